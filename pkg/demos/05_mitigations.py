"""Two program-level mitigations, applied as assembly-to-assembly
rewrites, and proof that they change nothing architectural.

retpoline      - every `ret` becomes a five-instruction trampoline. The
                 trampoline's own call plants a fresh predictor entry
                 pointing at a pause/jmp capture loop, so a mispredicted
                 return can only ever speculate into that loop - which
                 touches no memory.
fence-on-call  - a serialising fence is inserted after every call.
                 Every return-stack entry then points at the fence, so
                 stale-entry speculation drains before any dependent
                 load can run.

Run:  python3 demos/05_mitigations.py
"""

from rsbsim import (
    Machine, apply_fence_after_call, apply_retpoline, assemble,
    disassemble, verify_equivalence,
)
from rsbsim.scenarios.in_process import run_in_process

LEAKY = """
.entry main
main:
    mov r1, 0x300000
    call f
    load r2, [r1]        ; stale-prediction target: a dependent load
    halt
f:
    mov r3, out
    store [sp], r3       ; redirect the architectural return
    ret
out:
    mov r3, 0            ; code addresses move under rewriting; scrub
    halt
"""


def main() -> None:
    plain = assemble(LEAKY)

    print("the victim function, before and after the retpoline:")
    print(disassemble(plain))
    hardened = apply_retpoline(plain)
    print(disassemble(hardened))

    # The rewrite proves itself: both programs end in the same state.
    ok, detail = verify_equivalence(plain, hardened)
    print(f"architectural equivalence: {ok} ({detail})\n")

    # Without the mitigation the mispredicted return runs the dependent
    # load and leaves a measurable footprint in the cache.
    probe_line = 0x300000
    m = Machine(plain)
    m.run()
    print(f"plain program:     probe line cached after run -> "
          f"{m.caches.present(probe_line)!r}")

    m = Machine(hardened)
    m.run()
    print(f"retpolined:        probe line cached after run -> "
          f"{m.caches.present(probe_line)!r}")

    m = Machine(apply_fence_after_call(plain))
    m.run()
    print(f"fence after call:  probe line cached after run -> "
          f"{m.caches.present(probe_line)!r}\n")

    # End to end: the sandbox-escape read drops to zero recovered bytes.
    for label, kwargs in [("open channel", {}),
                          ("retpoline", {"retpoline": True}),
                          ("fence after call", {"fence_after_call": True})]:
        report = run_in_process(secret="secret!", **kwargs)
        print(f"in-process read with {label:<17}: "
              f"recovered {report.recovered!r} "
              f"(accuracy {report.details['byte_accuracy']:.2f})")


if __name__ == "__main__":
    main()
