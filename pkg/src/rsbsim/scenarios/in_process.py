"""In-process sandboxed read via return-stack wrap-around.

One program, one process. The "sandbox" is enforced by the machine's
address-range check: architectural loads may only touch the arena and the
probe pages; the secret sits outside and a committed load of it raises.

The program stacks two recursions:

  A recurses deeper than the RSB is long, so the ring holds only its last
  few return addresses. B then recurses exactly RSB-size times from inside
  A's innermost frame and returns; its balanced push/pop sequence rewrites
  *every* ring entry with B's post-call site (the gadget) while leaving the
  top pointer where A's unwind expects it. Every one of A's returns then
  pops a stale gadget entry: prediction lands on the gadget, which loads a
  secret byte and touches one low-nibble and one high-nibble probe page
  before the frame is squashed.

A guard register distinguishes the two phases: while B itself runs (and its
own returns are predicted straight back into the gadget), the guard routes
both the committed and the speculative path around the probe touches, so
the probe array stays clean until the stale-entry phase begins.

Two flavors of the gadget exist:

  direct    B is called directly and the leaked byte sits just past the end
            of the sandboxed arena; the speculative load simply skips the
            range check a committed load would hit.
  indirect  B is dispatched through a function pointer and the gadget body
            clears the heap-base register before the load, so the "offset"
            register is dereferenced as an absolute machine address: any
            byte anywhere in simulated memory can be fetched, not merely
            bytes near the arena.

The second probe touch always sits at gadget instruction 11, and
min_spec_on_hit=11 models a pipeline deep enough to race that far before
the (L1-resident) return target resolves.
"""

from __future__ import annotations

from ..core import CoreConfig, ExecutionError, Machine
from ..isa import Op, Program, assemble
from ..mem import CacheConfig
from ..predictor import RsbVariant
from ..sidechannel import ProbeArray, calibrate_threshold, decode_nibbles
from ..rng import XorShift64
from . import ScenarioError, ScenarioReport, recovery_precision
from .cross_process import PANGRAM

__all__ = [
    "HEAP",
    "NOISE_PRESET",
    "SECRET_ABS",
    "SECRET_OFF",
    "build_in_process",
    "run_in_process",
]

HEAP = 0x100000
PROBE_LO_OFF = 0x4000       # 16 slots x 4 KiB, low nibble
PROBE_HI_OFF = 0x14000      # 16 slots x 4 KiB, high nibble
SECRET_OFF = 0x24000        # just past the sandboxed ranges
ARENA_END_OFF = SECRET_OFF  # sandbox covers arena + probes only
SECRET_ABS = 0x30000        # nowhere near the arena: absolute-read target
STACK = (0x70000, 0x80000)

GADGET_INSTRUCTIONS = 11
DEFAULT_CORE = CoreConfig(min_spec_on_hit=GADGET_INSTRUCTIONS)

# measurement-noise level at which 100-trial fastest-average decoding
# recovers a large secret with accuracy in the mid-80% range
NOISE_PRESET = 0.37


def build_in_process(*, a_depth: int = 64, b_depth: int = 16,
                     mode: str = "direct") -> Program:
    if mode == "direct":
        prologue = ""
        dispatch = "    call B_rec"
        # in-sandbox addressing: r7 is an offset from the live heap base
        fetch = "    load r3, [r15 + r7]"
    elif mode == "indirect":
        prologue = f"    mov r8, {HEAP}\n    mov r13, B_rec\n"
        dispatch = "    call r13"
        # the speculative path clears the heap base, so r7 is dereferenced
        # as an absolute address; the base is restored before the probe
        # touches so they land in the real probe pages
        fetch = ("    mov r15, 0\n"
                 "    load r3, [r15 + r7]\n"
                 "    mov r15, r8")
    else:
        raise ScenarioError(f"unknown call mode {mode!r}")
    return assemble(f"""
.entry start
start:
    mov r15, {HEAP}
    mov r7, 0            ; secret offset, patched per byte
    mov r9, 0
    mov r1, {a_depth}
{prologue}    call A_rec
    halt
A_rec:
    beq r1, 0, A_base
    sub r1, 1
    call A_rec
A_after:
    ret
A_base:
    mov r2, {b_depth}
{dispatch}
A_resume:
    mov r9, 1
    ret
B_rec:
    beq r2, 0, B_leaf
    sub r2, 1
    call B_rec
B_gadget:
    bne r9, 1, B_skip
{fetch}
    mov r4, r3
    and r3, 15
    shl r3, 12
    load r5, [r15 + r3 + {PROBE_LO_OFF}]
    and r4, 240
    shl r4, 8
    load r5, [r15 + r4 + {PROBE_HI_OFF}]
    pause
    pause
B_skip:
    ret
B_leaf:
    ret
""")


def _offset_patch_slot(program: Program) -> int:
    for i, ins in enumerate(program.insns):
        if ins.op == Op.MOV_IMM and ins.dst == 7:
            return i
    raise ScenarioError("offset register initialiser not found")


def run_in_process(*, secret: str | bytes = PANGRAM,
                   nbytes: int | None = None,
                   trials: int = 1, flip_prob: float = 0.0,
                   mode: str = "direct",
                   rsb_size: int = 16,
                   variant: RsbVariant = RsbVariant.CYCLIC,
                   a_depth: int = 64, b_depth: int | None = None,
                   seed: int = 7,
                   fence_after_call: bool = False,
                   retpoline: bool = False,
                   core: CoreConfig | None = None,
                   cache: CacheConfig | None = None,
                   engine: str = "fast",
                   measurements: list | None = None) -> ScenarioReport:
    """Recover nbytes of the secret, one byte per program run (majority
    voting across `trials` runs per byte when measuring with noise).

    engine='reference' uses the tracing interpreter; engine='fast' the
    compiled twin (same semantics, same random draws). Passing a
    `measurements` list forces the reference engine, since only it keeps
    per-trial slot readings.
    """
    from ..harden import apply_fence_after_call, apply_retpoline

    data = secret.encode("ascii") if isinstance(secret, str) else bytes(secret)
    nbytes = len(data) if nbytes is None else nbytes
    if nbytes > 1024:
        raise ScenarioError("secret window is 1024 bytes")
    if nbytes > len(data):
        raise ScenarioError("nbytes exceeds the planted secret")
    b_depth = rsb_size if b_depth is None else b_depth

    program = build_in_process(a_depth=a_depth, b_depth=b_depth, mode=mode)
    if fence_after_call:
        program = apply_fence_after_call(program)
    if retpoline:
        program = apply_retpoline(program)
    patch_slot = _offset_patch_slot(program)

    # direct mode leaks bytes just past the arena (r7 = heap offset);
    # indirect mode leaks bytes at an absolute address (r7 = address,
    # dereferenced against a speculatively zeroed base)
    secret_base = HEAP + SECRET_OFF if mode == "direct" else SECRET_ABS
    patch_base = SECRET_OFF if mode == "direct" else SECRET_ABS

    cache = cache or CacheConfig()
    threshold = calibrate_threshold(cache)
    ranges = [(HEAP, HEAP + ARENA_END_OFF), (STACK[0], STACK[1])]
    sandbox_enforced = not any(lo <= secret_base < hi for lo, hi in ranges)

    if measurements is not None:
        engine = "reference"
    if engine == "fast":
        from ..fastpath import run_inproc_fast
        recovered, undecoded, total_steps = run_inproc_fast(
            program, patch_slot=patch_slot, patch_base=patch_base,
            nbytes=nbytes, trials=trials, flip_prob=flip_prob,
            secret_base=secret_base, data=data,
            rsb_size=rsb_size, variant=variant,
            core=core or DEFAULT_CORE, cache=cache,
            stack_top=STACK[1], ranges=ranges,
            lo_base=HEAP + PROBE_LO_OFF, hi_base=HEAP + PROBE_HI_OFF,
            stride=4096, threshold=threshold, seed=seed,
            mem_size=0x130000)
    elif engine == "reference":
        recovered, undecoded, total_steps, sandbox_enforced = (
            _run_reference(program, patch_slot=patch_slot,
                           patch_base=patch_base, nbytes=nbytes,
                           trials=trials, flip_prob=flip_prob,
                           secret_base=secret_base, data=data,
                           rsb_size=rsb_size, variant=variant,
                           core=core or DEFAULT_CORE, cache=cache,
                           ranges=ranges, threshold=threshold, seed=seed,
                           measurements=measurements))
    else:
        raise ScenarioError(f"unknown engine {engine!r}")

    correct = sum(1 for i, v in enumerate(recovered) if v == data[i])

    def render(vals) -> str:
        return "".join(chr(v) if v is not None and 32 <= v < 127 else "?"
                       for v in vals)

    text = render(recovered)
    expected = render(data[:nbytes])
    report = ScenarioReport(
        name=f"in-process-read-{mode}",
        expected=expected,
        recovered=text,
        precision=recovery_precision(expected, text),
        details={"engine": engine, "trials": trials, "flip_prob": flip_prob,
                 "undecoded": undecoded, "steps": total_steps,
                 "bytes_correct": correct,
                 "byte_accuracy": correct / nbytes if nbytes else 1.0,
                 "sandbox_enforced": sandbox_enforced,
                 "variant": variant.name.lower()})
    if variant is RsbVariant.STOP_ON_UNDERFLOW:
        report.notes.append(
            "underflow stops prediction entirely, so the wrapped (stale) "
            "entries this attack needs are never consulted")
    elif variant is RsbVariant.BTB_FALLBACK:
        report.notes.append(
            "on underflow the BTB supplies the (trained, correct) return "
            "target, so stale ring entries are never consulted")
    if fence_after_call:
        report.notes.append("every stale return-stack entry now points at a "
                            "serialising fence")
    if retpoline:
        report.notes.append("returns can only be predicted into the "
                            "retpoline capture loop")
    # Built-in expectation for --check: mitigations (and the non-wrapping
    # buffer variants) hold the read at chance; the open channel reads
    # everything when noise-free. Under noise the sharp floor is only
    # claimed for the calibrated shape - enough bytes and enough trials
    # for the latency averaging to converge.
    accuracy = report.details["byte_accuracy"]
    if retpoline or fence_after_call or variant is not RsbVariant.CYCLIC:
        report.ok = accuracy <= 0.05
    elif flip_prob == 0.0:
        report.ok = accuracy == 1.0
    elif flip_prob <= NOISE_PRESET and nbytes >= 256 and trials >= 50:
        report.ok = accuracy >= 0.8
    else:
        report.ok = True
        report.notes.append(
            "no sharp accuracy contract for this noisy configuration "
            "(calibrated shape: >=256 bytes, >=50 trials, noise at or "
            "below the shipped preset)")
    return report


def _run_reference(program: Program, *, patch_slot: int, patch_base: int,
                   nbytes: int, trials: int, flip_prob: float,
                   secret_base: int, data: bytes,
                   rsb_size: int, variant: RsbVariant,
                   core: CoreConfig, cache: CacheConfig,
                   ranges: list[tuple[int, int]], threshold: int, seed: int,
                   measurements: list | None
                   ) -> tuple[list[int | None], int, int, bool]:
    """The tracing-interpreter measurement loop (the readable double of
    the compiled one)."""
    m = Machine(program, core=core, cache=cache,
                rsb_size=rsb_size, rsb_variant=variant,
                stack_top=STACK[1])
    m.addr_ranges = list(ranges)
    m.mem.write_blob(secret_base, data)

    # the sandbox is real: a committed load of the secret faults
    try:
        m.mem.read_word(secret_base)  # physical access is fine...
        m._check_range(secret_base, 0)  # ...architectural is not
        sandbox_enforced = False
    except ExecutionError:
        sandbox_enforced = True

    probe_lo = ProbeArray(HEAP + PROBE_LO_OFF, 16)
    probe_hi = ProbeArray(HEAP + PROBE_HI_OFF, 16)
    rng = XorShift64(seed)

    recovered: list[int | None] = []
    undecoded = 0
    total_steps = 0
    for b in range(nbytes):
        lo_votes = [0] * 16
        hi_votes = [0] * 16
        lo_sums = [0] * 16
        hi_sums = [0] * 16
        for _ in range(trials):
            probe_lo.flush_all(m.caches)
            probe_hi.flush_all(m.caches)
            m.set_program(program.with_imm(patch_slot, patch_base + b),
                          load_data=False)
            res = m.run(max_steps=200_000)
            total_steps += res.steps
            lo = probe_lo.reload_and_time(m.caches, threshold,
                                          rng=rng, flip_prob=flip_prob)
            hi = probe_hi.reload_and_time(m.caches, threshold,
                                          rng=rng, flip_prob=flip_prob)
            if measurements is not None:
                from ..sidechannel import MeasurementResult, SlotReading
                combined = lo.readings + tuple(
                    SlotReading(r.slot + 16, r.latency, r.hot)
                    for r in hi.readings)
                measurements.append(MeasurementResult(combined))
            for s in lo.hot_slots():
                lo_votes[s] += 1
            for s in hi.hot_slots():
                hi_votes[s] += 1
            for r in lo.readings:
                lo_sums[r.slot] += r.latency
            for r in hi.readings:
                hi_sums[r.slot] += r.latency
        # noiseless runs demand an outright majority; noisy runs take the
        # slot with the fastest average reload instead
        if flip_prob > 0.0:
            byte = _fastest(lo_sums, hi_sums)
        else:
            byte = _vote(lo_votes, hi_votes, trials)
        if byte is None:
            undecoded += 1
        recovered.append(byte)
    return recovered, undecoded, total_steps, sandbox_enforced


def _vote(lo_votes: list[int], hi_votes: list[int],
          trials: int) -> int | None:
    """Pick the plurality slot per nibble; demand a unique winner that won
    more than half the trials (with trials=1 this is exact decoding)."""
    def winner(votes: list[int]) -> int | None:
        best = max(votes)
        if best * 2 <= trials or votes.count(best) != 1:
            return None
        return votes.index(best)

    lo, hi = winner(lo_votes), winner(hi_votes)
    if lo is None or hi is None:
        return None
    return decode_nibbles([lo], [hi])


def _fastest(lo_sums: list[int], hi_sums: list[int]) -> int | None:
    """Pick the slot with the lowest total (hence average) reload latency
    per nibble; ties leave the byte undecoded."""
    def winner(sums: list[int]) -> int | None:
        best = min(sums)
        if sums.count(best) != 1:
            return None
        return sums.index(best)

    lo, hi = winner(lo_sums), winner(hi_sums)
    if lo is None or hi is None:
        return None
    return decode_nibbles([lo], [hi])
