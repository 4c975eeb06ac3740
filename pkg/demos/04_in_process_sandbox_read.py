"""Reading outside a sandbox from inside it, one byte at a time.

The program plays both sides of a software-sandbox scenario in a single
process. Function A recurses 64 deep, planting 64 return-stack entries
that all point at A's call site - right before a gadget that loads a
secret byte and touches one probe-array line per nibble value. Function
B then unwinds its own much shorter recursion; once the ring wraps, B's
returns are predicted into A's planted entries and the gadget runs
speculatively - with B's registers, which hold an out-of-bounds offset.

Architecturally nothing escapes the sandbox (a committed out-of-range
load faults). Microarchitecturally the gadget's probe touch survives
the rollback, and flush+reload on the probe array names the byte.

Run:  python3 demos/04_in_process_sandbox_read.py
"""

from rsbsim.scenarios.in_process import NOISE_PRESET, run_in_process


def main() -> None:
    # Noise-free: every planted byte reads back exactly.
    clean = run_in_process(secret="squeamish ossifrage")
    print("noise-free measurement")
    print(f"  planted  : {clean.expected!r}")
    print(f"  recovered: {clean.recovered!r}")
    print(f"  byte accuracy: {clean.details['byte_accuracy']:.3f}\n")

    # Measurement noise flips probe verdicts; averaging reload latencies
    # over repeated trials recovers most bytes anyway.
    noisy = run_in_process(secret="squeamish ossifrage",
                           flip_prob=NOISE_PRESET, trials=100, seed=5)
    print(f"verdict-flip noise at the shipped preset ({NOISE_PRESET}), "
          f"100 trials per byte")
    print(f"  recovered: {noisy.recovered!r}")
    print(f"  byte accuracy: {noisy.details['byte_accuracy']:.3f}\n")

    # The indirect variant goes further: the sandboxed dispatch adds a
    # heap base to every address, and the wrong-path gadget runs with
    # that base speculatively zeroed - so the planted offset becomes an
    # absolute machine address, far outside the sandboxed ranges.
    outside = run_in_process(secret="X", mode="indirect")
    print("indirect dispatch, absolute out-of-sandbox read")
    print(f"  recovered: {outside.recovered!r}")
    print(f"  sandbox architecturally enforced: "
          f"{outside.details['sandbox_enforced']}")


if __name__ == "__main__":
    main()
