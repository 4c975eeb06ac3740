"""Cross-process keystroke recovery through the return-stack predictor.

Three processes share one core:

  attacker - repeatedly executes a call at index G-1 of its code, where G is
             the index of a *gadget* inside the victim's code image. Code
             addresses are process-local indices, so each call plants G in
             the shared RSB without the attacker ever returning through it.
  victim   - blocks on read_char inside a five-deep call chain. Its stack
             line was flushed on the syscall path, so the returns resolve
             slowly; predictions come from the RSB, which now holds G. The
             gadget dereferences a shared probe page selected by the key
             just read - speculatively only, it is never reached
             architecturally.
  measurer - times every probe page, appends the index of each
             below-threshold (cached) page to a result log, then flushes
             the probe array again.

A context switch overwrites only the top few RSB entries with kernel return
addresses (predictions into them die on an unfetchable address), so the
victim's deeper returns still consume the attacker's entries. With
flush_rsb_on_switch the kernel refills the whole RSB instead and the
channel closes.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import ScenarioError, ScenarioReport, recovery_precision
from ..core import CoreConfig, Machine
from ..harden import apply_fence_after_call, apply_retpoline
from ..isa import Program, assemble
from ..kernel import SchedConfig, System
from ..mem import CacheConfig
from ..predictor import RsbVariant
from ..sidechannel import calibrate_threshold

__all__ = [
    "JITTER_PRESET",
    "PANGRAM",
    "CrossSetup",
    "build_cross_setup",
    "run_cross_process",
]

PANGRAM = "The quick brown fox jumps over the lazy dog"

# shipped scheduler-randomization level for the noisy reproduction: one in
# four scheduling decisions picks a random ready process. The chunked
# measurer is built to survive this (see build_measurer), so recovery
# precision stays near 1.0 - comfortably above the 0.84 acceptance floor.
JITTER_PRESET = 0.25

SHARED_BASE = 0x200000
SLOTS = 128
SLOT_STRIDE = 4096
SHARED_END = SHARED_BASE + SLOTS * SLOT_STRIDE
VICTIM_STACK = (0x100000, 0x110000)
ATTACKER_STACK = (0x120000, 0x130000)
MEASURER_STACK = (0x140000, 0x150000)
RESULTS_BASE = 0x160000
RESULTS_END = 0x170000


def build_victim() -> Program:
    return assemble(f"""
.entry start
start:
    mov r12, {SHARED_BASE}
main_loop:
    call rc1
    jmp main_loop
rc1:
    call rc2
    ret
rc2:
    call rc3
    ret
rc3:
    call rc4
    ret
rc4:
    call do_read
    ret
do_read:
    syscall 0
    and r0, 127
    clflush [sp]
    ret
gadget:
    shl r0, 12
    load r11, [r12 + r0]
    pause
    jmp gadget
""")


def build_attacker(gadget_index: int, stack_top: int) -> Program:
    """The poisoning loop. The call instruction must sit at gadget_index-1
    so its pushed return address aliases the victim's gadget."""
    pad = gadget_index - 3
    if pad < 0:
        raise ScenarioError(
            f"gadget index {gadget_index} leaves no room for the poison loop")
    pauses = "\n".join("    pause" for _ in range(pad))
    return assemble(f"""
.entry start
start:
    mov sp, {stack_top}
    mov r1, 16
{pauses}
poison:
    call landpad
landpad:
    sub r1, 1
    bne r1, 0, poison
    syscall 1
    jmp start
""")


def build_measurer(cache: CacheConfig) -> Program:
    """Unrolled probe sweep: time each slot, log the cached ones, flush.

    Three timing hazards are handled:

    * the sweep runs in chunks sized to fit inside one scheduling quantum
      and yields after each chunk, so the timed brackets are never split
      by preemption and the target only runs between chunks (each chunk
      is flushed right after it is read, so a line it warms while we are
      away is still waiting, cold-flushed, when its chunk comes up again);
    * hot/cold is a real threshold comparison (sign bit of
      delta - threshold), not an exact-miss equality check, so a perturbed
      delta can never be mistaken for a cache hit;
    * a delta larger than any legal access latency means the bracket was
      split anyway (e.g. randomized scheduling). The slot is flushed (the
      aborted load already warmed it) and timed again.
    """
    threshold = calibrate_threshold(cache)
    outlier = cache.lat_mem + 56  # beyond the slowest legal delta
    sign_bit = -(1 << 63)
    chunk = 32
    lines = [".entry mstart", "mstart:",
             f"    mov r10, {SHARED_BASE}",
             f"    mov r11, {RESULTS_BASE}",
             "sweep:"]
    for base in range(0, SLOTS, chunk):
        for i in range(base, base + chunk):
            lines += [
                f"time{i}:",
                "    rdtsc r4",
                f"    load r3, [r10 + {i * SLOT_STRIDE}]",
                "    rdtsc r5",
                "    sub r5, r4",
                "    mov r6, r5",
                f"    sub r6, {outlier}",
                f"    and r6, {sign_bit}",
                f"    bne r6, 0, clean{i}",
                f"    clflush [r10 + {i * SLOT_STRIDE}]",
                f"    jmp time{i}",
                f"clean{i}:",
                f"    sub r5, {threshold}",
                f"    and r5, {sign_bit}",
                f"    beq r5, 0, skip{i}",
                f"    store [r11], {i}",
                "    add r11, 8",
                f"skip{i}:",
            ]
        for i in range(base, base + chunk):
            lines.append(f"    clflush [r10 + {i * SLOT_STRIDE}]")
        lines.append("    syscall 1")
    lines.append("    jmp sweep")
    return assemble("\n".join(lines) + "\n")


@dataclass
class CrossSetup:
    victim: Program
    attacker: Program
    measurer: Program
    text: str
    cadence_ms: int
    start_ms: int
    max_cycles: int
    core: CoreConfig
    cache: CacheConfig
    sched: SchedConfig
    rsb_size: int
    rsb_variant: RsbVariant
    seed: int


def build_cross_setup(*, text: str = PANGRAM, sentences: int = 1,
                      cadence_ms: int = 50, start_ms: int = 1,
                      seed: int = 1, jitter: float = 0.0,
                      flush_rsb_on_switch: bool = False,
                      retpoline: bool = False,
                      fence_after_call: bool = False,
                      rsb_size: int = 16,
                      rsb_variant: RsbVariant = RsbVariant.CYCLIC,
                      quantum: int = 10_000,
                      kernel_rsb_pushes: int = 3,
                      cycles_per_ms: int = 1000,
                      core: CoreConfig | None = None,
                      cache: CacheConfig | None = None) -> CrossSetup:
    full_text = text * sentences
    victim = build_victim()
    if fence_after_call:
        victim = apply_fence_after_call(victim)
    if retpoline:
        victim = apply_retpoline(victim)
    cache = cache or CacheConfig()
    attacker = build_attacker(victim.labels["gadget"], ATTACKER_STACK[1])
    measurer = build_measurer(cache)
    last_ms = start_ms + len(full_text) * cadence_ms
    return CrossSetup(
        victim=victim, attacker=attacker, measurer=measurer,
        text=full_text, cadence_ms=cadence_ms, start_ms=start_ms,
        max_cycles=(last_ms + 250) * cycles_per_ms,
        core=core or CoreConfig(),
        cache=cache,
        sched=SchedConfig(quantum=quantum, jitter=jitter,
                          kernel_rsb_pushes=kernel_rsb_pushes,
                          flush_rsb_on_switch=flush_rsb_on_switch,
                          cycles_per_ms=cycles_per_ms),
        rsb_size=rsb_size, rsb_variant=rsb_variant, seed=seed)


def _decode_results(mem, results_cursor: int) -> str:
    count = (results_cursor - RESULTS_BASE) // 8
    slots = [mem.read_word(RESULTS_BASE + 8 * k) for k in range(count)]
    return "".join(chr(s & 0x7F) for s in slots)


def run_cross_process(engine: str = "fast", **kwargs) -> ScenarioReport:
    """Run the whole experiment and score the recovered key stream against
    the typed text. engine='reference' uses the tracing interpreter;
    engine='fast' uses the compiled system loop (same semantics).
    """
    setup = build_cross_setup(**kwargs)
    if engine == "fast":
        from ..fastpath import run_cross_fast
        recovered, stats = run_cross_fast(setup)
    elif engine == "reference":
        recovered, stats = _run_reference(setup)
    else:
        raise ScenarioError(f"unknown engine {engine!r}")

    report = ScenarioReport(
        name="cross-process-keystrokes",
        expected=setup.text,
        recovered=recovered,
        precision=recovery_precision(setup.text, recovered),
        details=stats)
    if setup.sched.flush_rsb_on_switch:
        report.notes.append("RSB refilled with kernel addresses on every "
                            "context switch")
    # Built-in expectation for --check: a suppressed channel must score at
    # chance; an open one must recover the text. Only flushing and the
    # retpoline suppress it: fence-after-call and the non-wrapping buffer
    # variants change nothing here, because the poisoned entries are
    # planted by the attacker's own calls - they are never stale and the
    # buffer never underflows while they are consumed.
    suppressed = (setup.sched.flush_rsb_on_switch
                  or kwargs.get("retpoline", False))
    if suppressed:
        report.ok = report.precision <= 0.05
    elif setup.sched.jitter == 0.0:
        report.ok = report.precision == 1.0
    else:
        report.ok = report.precision >= 0.84
    return report


def _run_reference(setup: CrossSetup) -> tuple[str, dict]:
    sys = System(core=setup.core, cache=setup.cache, sched=setup.sched,
                 rsb_size=setup.rsb_size, rsb_variant=setup.rsb_variant,
                 seed=setup.seed)
    attacker = sys.spawn("attacker", setup.attacker,
                         stack_top=ATTACKER_STACK[1],
                         ranges=[ATTACKER_STACK])
    victim = sys.spawn("victim", setup.victim,
                       stack_top=VICTIM_STACK[1],
                       ranges=[VICTIM_STACK, (SHARED_BASE, SHARED_END)])
    measurer = sys.spawn("measurer", setup.measurer,
                         stack_top=MEASURER_STACK[1],
                         ranges=[(SHARED_BASE, SHARED_END),
                                 (RESULTS_BASE, RESULTS_END)])
    sys.type_text(setup.text, start_ms=setup.start_ms,
                  cadence_ms=setup.cadence_ms)
    sys.run(max_cycles=setup.max_cycles)

    recovered = _decode_results(sys.machine.mem, measurer.regs[11])
    stats = {
        "engine": "reference",
        "keystrokes": len(setup.text),
        "records": len(recovered),
        "switches": sys.switches,
        "cycles": sys.machine.cycle,
        "steps": sum(p.steps for p in sys.procs),
    }
    return recovered, stats
