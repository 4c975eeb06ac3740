"""Software mitigations applied as program-to-program transforms.

retpoline  - replaces every `ret` with a trampoline that feeds the return
             predictor a harmless self-supplied target (a pause/jmp capture
             loop) while the real return address is still read from the
             stack. Mispredicted returns then speculate into the capture
             loop instead of attacker-chosen code.

fence_after_call - inserts a serialising fence at every return site. Stale
             return-stack entries keep pointing at call-return sites, so a
             mispredicted return lands on the fence and the speculation nest
             drains before any dependent load can run.

Both transforms renumber instruction indices, so every control-flow target,
label, and label-derived immediate is remapped. Both are idempotent.
"""

from __future__ import annotations

from dataclasses import replace

from .isa import SP, Instruction, Op, Program

__all__ = ["apply_retpoline", "apply_fence_after_call", "verify_equivalence"]

_RP_LANDING = "__rp_land_"
_RP_TRAP = "__rp_trap_"


def _remap_instruction(ins: Instruction, new_pos: list[int]) -> Instruction:
    patch = {}
    if ins.op in (Op.CALL_DIRECT, Op.JMP, Op.BEQ, Op.BNE):
        patch["target"] = new_pos[ins.target]
    if ins.imm_is_label and 0 <= ins.imm <= len(new_pos) - 1:
        patch["imm"] = new_pos[ins.imm]
    return replace(ins, **patch) if patch else ins


def _remapped_labels(labels: dict[str, int], new_pos: list[int]) -> dict[str, int]:
    return {name: new_pos[idx] for name, idx in labels.items()}


def apply_retpoline(program: Program) -> Program:
    """Replace each `ret` with the 5-instruction return trampoline:

        call LAND          ; pushes TRAP as the predicted return target
        TRAP: pause
              jmp TRAP
        LAND: add sp, 8    ; discard the trampoline's own return address
              ret          ; real return; prediction can only reach TRAP

    Trampoline-internal returns (recognised by their landing-pad label) are
    left alone, so applying the transform twice is a no-op.
    """
    n = len(program.insns)
    landings = {idx for name, idx in program.labels.items()
                if name.startswith(_RP_LANDING)}

    def is_trampoline_ret(i: int, ins: Instruction) -> bool:
        return ins.op == Op.RET and (i - 1) in landings

    new_pos = [0] * (n + 1)
    pos = 0
    for i, ins in enumerate(program.insns):
        new_pos[i] = pos
        pos += 5 if ins.op == Op.RET and not is_trampoline_ret(i, ins) else 1
    new_pos[n] = pos

    out: list[Instruction] = []
    labels = _remapped_labels(program.labels, new_pos)
    serial = sum(1 for name in program.labels if name.startswith(_RP_TRAP))
    for i, ins in enumerate(program.insns):
        if ins.op == Op.RET and not is_trampoline_ret(i, ins):
            b = new_pos[i]
            out.append(Instruction(op=Op.CALL_DIRECT, target=b + 3))
            out.append(Instruction(op=Op.PAUSE))
            out.append(Instruction(op=Op.JMP, target=b + 1))
            out.append(Instruction(op=Op.ADD, dst=SP, imm=8))
            out.append(Instruction(op=Op.RET))
            labels[f"{_RP_TRAP}{serial}"] = b + 1
            labels[f"{_RP_LANDING}{serial}"] = b + 3
            serial += 1
        else:
            out.append(_remap_instruction(ins, new_pos))

    return Program(insns=tuple(out), labels=labels,
                   entry=new_pos[program.entry], data=program.data)


def apply_fence_after_call(program: Program) -> Program:
    """Insert `fence` directly after every call. The fence becomes the
    return address that calls push, so every stale return-stack entry now
    points at a serialising instruction. Idempotent: calls already followed
    by a fence are left alone."""
    n = len(program.insns)

    def needs_fence(i: int, ins: Instruction) -> bool:
        if ins.op not in (Op.CALL_DIRECT, Op.CALL_INDIRECT):
            return False
        return i + 1 >= n or program.insns[i + 1].op != Op.FENCE

    new_pos = [0] * (n + 1)
    pos = 0
    for i, ins in enumerate(program.insns):
        new_pos[i] = pos
        pos += 2 if needs_fence(i, ins) else 1
    new_pos[n] = pos

    out: list[Instruction] = []
    for i, ins in enumerate(program.insns):
        out.append(_remap_instruction(ins, new_pos))
        if needs_fence(i, ins):
            out.append(Instruction(op=Op.FENCE))

    return Program(insns=tuple(out),
                   labels=_remapped_labels(program.labels, new_pos),
                   entry=new_pos[program.entry], data=program.data)


def verify_equivalence(a: Program, b: Program, *,
                       regs_init: dict[int, int] | None = None,
                       regions: list[tuple[int, int]] | None = None,
                       max_steps: int = 1_000_000) -> tuple[bool, str]:
    """Architecturally execute both programs from the same start state and
    compare final registers and the given memory regions (defaults to the
    union of both programs' data segments). Returns (equal, detail).
    """
    from .core import run_sequential  # local import to avoid a cycle
    from .isa import NUM_REGS, RegisterFile
    from .core import STACK_TOP

    if regions is None:
        regions = [(addr, addr + len(blob))
                   for p in (a, b) for addr, blob in p.data]

    results = []
    for prog in (a, b):
        regs = RegisterFile()
        regs[SP] = STACK_TOP
        if regs_init:
            for r, v in regs_init.items():
                regs[r] = v
        results.append(run_sequential(prog, regs=regs, max_steps=max_steps))

    ra, rb = results
    for i in range(NUM_REGS):
        if ra.regs[i] != rb.regs[i]:
            return False, f"register r{i}: {ra.regs[i]:#x} != {rb.regs[i]:#x}"
    for lo, hi in regions:
        for addr in range(lo, hi):
            va, vb = ra.mem.read_byte(addr), rb.mem.read_byte(addr)
            if va != vb:
                return False, f"memory {addr:#x}: {va:#x} != {vb:#x}"
    if ra.reason != rb.reason:
        return False, f"stop reason: {ra.reason} != {rb.reason}"
    return True, "equivalent"
