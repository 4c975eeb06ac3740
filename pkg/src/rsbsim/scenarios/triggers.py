"""Four small programs, each provoking return mispredictions through a
different mechanism:

  deep_chain       - a call chain deeper than the RSB; once the ring wraps,
                     returns are predicted into functions several levels up.
  context_switch   - a process resumes after a switch and its first few
                     returns are predicted into kernel addresses.
  stack_switch     - a function rewinds sp to an outer frame and returns;
                     the next returns all follow stale RSB entries.
  return_overwrite - code writes a new target over its own return address;
                     the prediction still follows the RSB.

The demo functions pad return sites with pauses so that speculative
execution sits still until frames resolve - that keeps predicted/actual
pairs one-to-one with architectural returns and makes the reports legible.
"""

from __future__ import annotations

from bisect import bisect_right

from . import ScenarioReport
from ..core import KERNEL_BASE, CoreConfig, Machine
from ..isa import Program, assemble
from ..kernel import SchedConfig, System
from ..predictor import RsbVariant

__all__ = [
    "run_deep_chain",
    "run_context_switch",
    "run_stack_switch",
    "run_return_overwrite",
]

_PAD = "    pause\n    pause\n    pause\n"


def _function_namer(program: Program):
    """Maps a code index to the name of the enclosing label."""
    items = sorted(program.labels.items(), key=lambda kv: kv[1])
    starts = [idx for _, idx in items]
    names = [name for name, _ in items]

    def name_of(idx: int | None) -> str:
        if idx is None:
            return "(stall)"
        if idx >= KERNEL_BASE:
            return f"kernel+{idx - KERNEL_BASE}"
        k = bisect_right(starts, idx) - 1
        return names[k] if k >= 0 else f"@{idx}"

    return name_of


def _return_rows(machine: Machine, program: Program) -> list[dict]:
    """One row per architectural return, from the machine trace."""
    name_of = _function_namer(program)
    rows = []
    for ev in machine.trace or ():
        if ev.event == "spec-enter" and ev.depth == 1:
            rows.append({
                "ret_in": name_of(ev.pc),
                "predicted": name_of(ev.predicted),
                "actual": name_of(ev.actual),
                "correct": ev.predicted == ev.actual,
            })
        elif ev.event == "stall" and ev.depth == 0:
            rows.append({
                "ret_in": name_of(ev.pc),
                "predicted": "(stall)",
                "actual": name_of(ev.actual),
                "correct": False,
            })
    return rows


def run_deep_chain(*, rsb_size: int = 4, chain_depth: int = 9,
                   variant: RsbVariant = RsbVariant.CYCLIC) -> ScenarioReport:
    """Call chain_depth functions, return through all of them, and record
    which predictions survive the ring wrapping around."""
    parts = [".entry main", "main:", f"    call f0", "    halt"]
    for k in range(chain_depth - 1):
        parts.append(f"f{k}:")
        parts.append(f"    call f{k + 1}")
        parts.append(_PAD + "    ret")
    parts.append(f"f{chain_depth - 1}:")
    parts.append(_PAD + "    ret")
    program = assemble("\n".join(parts) + "\n")

    m = Machine(program, rsb_size=rsb_size, rsb_variant=variant, trace=True)
    m.run(max_steps=100_000)
    rows = _return_rows(m, program)
    correct = sum(r["correct"] for r in rows)
    report = ScenarioReport(
        name="deep-chain", expected="", recovered="",
        precision=correct / len(rows) if rows else 0.0,
        details={"rsb_size": rsb_size, "chain_depth": chain_depth,
                 "returns": rows, "correct": correct,
                 "mispredicted": len(rows) - correct},
        ok=bool(rows) and correct == min(rsb_size, len(rows)))
    if rows and all(r["correct"] for r in rows[:rsb_size]):
        report.notes.append(
            f"first {rsb_size} returns predicted correctly; deeper returns "
            f"follow entries left by calls {rsb_size} levels further down")
    return report


def run_context_switch(*, depth: int = 6,
                       kernel_rsb_pushes: int = 3,
                       variant: RsbVariant = RsbVariant.CYCLIC,
                       ) -> ScenarioReport:
    """A process yields while depth calls are outstanding; after the switch
    in and out of another process, its first kernel_rsb_pushes returns are
    predicted into kernel addresses."""
    parts = [".entry main", "main:", "    call g0", "    syscall 2"]
    for k in range(depth - 1):
        parts.append(f"g{k}:")
        parts.append(f"    call g{k + 1}")
        parts.append(_PAD + "    ret")
    parts.append(f"g{depth - 1}:")
    parts.append("    syscall 1")
    parts.append(_PAD + "    ret")
    prog_a = assemble("\n".join(parts) + "\n")
    prog_b = assemble(".entry start\nstart:\n    syscall 1\n    syscall 2\n")

    sys = System(sched=SchedConfig(kernel_rsb_pushes=kernel_rsb_pushes),
                 rsb_variant=variant, trace=True)
    sys.spawn("worker", prog_a, stack_top=0x110000,
              ranges=[(0x100000, 0x110000)])
    sys.spawn("other", prog_b, stack_top=0x130000,
              ranges=[(0x120000, 0x130000)])
    sys.run(max_cycles=1_000_000)

    rows = _return_rows(sys.machine, prog_a)
    kernel_rows = [r for r in rows if r["predicted"].startswith("kernel")]
    report = ScenarioReport(
        name="context-switch", expected="", recovered="",
        precision=len(kernel_rows) / len(rows) if rows else 0.0,
        details={"depth": depth, "kernel_rsb_pushes": kernel_rsb_pushes,
                 "returns": rows, "kernel_predictions": len(kernel_rows),
                 "switches": sys.switches},
        ok=bool(rows) and
        len(kernel_rows) == min(kernel_rsb_pushes, len(rows)))
    report.notes.append(
        f"{len(kernel_rows)} of {len(rows)} post-switch returns were "
        f"predicted into the kernel's return addresses")
    return report


def run_stack_switch(*, variant: RsbVariant = RsbVariant.CYCLIC,
                     ) -> ScenarioReport:
    """fF rewinds sp to fC's frame and returns from there; the RSB still
    holds the abandoned inner return sites, so the next three returns are
    predicted into fE, fD and fC."""
    program = assemble(f"""
.entry main
main:
    call fA
    halt
fA:
    call fB
{_PAD}    ret
fB:
    call fC
{_PAD}    ret
fC:
    mov r8, sp
    call fD
fC_catch:
{_PAD}    ret
fD:
    call fE
{_PAD}    ret
fE:
    call fF
{_PAD}    ret
fF:
    mov sp, r8
    jmp fC_catch
""")
    m = Machine(program, rsb_variant=variant, trace=True)
    m.run(max_steps=100_000)
    rows = _return_rows(m, program)
    wrong = [r for r in rows if not r["correct"]]
    report = ScenarioReport(
        name="stack-switch", expected="", recovered="",
        precision=len(wrong) / len(rows) if rows else 0.0,
        details={"returns": rows, "mispredicted": len(wrong)},
        ok=len(wrong) >= 3 and len(wrong) == len(rows))
    if wrong:
        into = ", ".join(r["predicted"] for r in wrong)
        report.notes.append(
            f"after the sp rewind, {len(wrong)} consecutive returns were "
            f"predicted into abandoned frames: {into}")
    return report


def run_return_overwrite(*, variant: RsbVariant = RsbVariant.CYCLIC,
                         ) -> ScenarioReport:
    """A function stores a different code address over its own return
    address. The architectural return follows memory; the prediction
    follows the stale RSB entry."""
    program = assemble(f"""
.entry main
main:
    call victim
back:
    halt
victim:
    store [sp], elsewhere
{_PAD}    ret
elsewhere:
    mov r0, 23294
    halt
""")
    m = Machine(program, rsb_variant=variant, trace=True)
    m.run(max_steps=10_000)
    rows = _return_rows(m, program)
    landed = m.regs[0] == 23294
    precision = 1.0 if rows and not rows[0]["correct"] and landed else 0.0
    report = ScenarioReport(
        name="return-overwrite", expected="", recovered="",
        precision=precision,
        details={"returns": rows, "architectural_target_reached": landed},
        ok=precision == 1.0)
    if rows:
        report.notes.append(
            f"return predicted {rows[0]['predicted']} (stale RSB entry) but "
            f"architecturally went to {rows[0]['actual']}")
    return report
