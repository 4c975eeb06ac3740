"""Execution engines: a sequential architectural interpreter and a
speculative engine with return-address prediction and rollback.

The speculative engine opens a *frame* at every predicted return: registers
are checkpointed, execution continues at the predicted target, and the frame
resolves once the true return target (a stack load) would be available.
Mispredicted frames roll registers and speculative stores back; correct ones
fold their work into the committed state. Cache, RSB and BTB updates made
during speculation are never rolled back - that residue is the side channel
the attack scenarios measure.

Window semantics: a frame may execute speculative instructions until the
resolve deadline (open cycle + true-target load latency) has passed, but is
always granted at least `min_spec_on_hit` instructions (the pipeline-depth
race that exists even when the stack load hits L1). `max_spec_instructions`
bounds the whole speculation nest, like a reorder buffer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .isa import NUM_REGS, SP, Op, Program, RegisterFile
from .mem import CacheConfig, CacheHierarchy, PhysicalMemory
from .predictor import BranchTargetBuffer, ReturnStackBuffer, RsbVariant

__all__ = [
    "CoreConfig",
    "Machine",
    "ExecutionError",
    "RunResult",
    "TraceEvent",
    "run_sequential",
    "SeqResult",
    "STACK_TOP",
    "KERNEL_BASE",
]

_U64 = 0xFFFFFFFFFFFFFFFF

STACK_TOP = 0xF00000       # default initial sp for standalone machines
KERNEL_BASE = 1 << 30      # reserved code-address range for kernel returns

SYS_EXIT = 2               # matches the kernel module's syscall numbering


@dataclass(frozen=True)
class CoreConfig:
    max_spec_depth: int = 8
    max_spec_instructions: int = 64
    min_spec_on_hit: int = 2


class ExecutionError(Exception):
    """Architectural execution fault.

    kind is one of: invalid-pc, unmapped, stack-underflow, bad-syscall,
    budget-exhausted.
    """

    def __init__(self, kind: str, pc: int, cycle: int, msg: str):
        super().__init__(f"{kind} at pc={pc} cycle={cycle}: {msg}")
        self.kind = kind
        self.pc = pc
        self.cycle = cycle


@dataclass(frozen=True)
class TraceEvent:
    cycle: int
    event: str          # spec-enter | spec-commit | spec-squash | stall | exec
    pc: int
    depth: int
    predicted: int | None = None
    actual: int | None = None


@dataclass(frozen=True)
class RunResult:
    reason: str         # halt | steps | cycles | block | yield | exit
    steps: int
    cycles: int


class _Frame:
    __slots__ = ("checkpoint", "true_target", "predicted", "resolve_at", "undo")

    def __init__(self, checkpoint: list[int], true_target: int, predicted: int,
                 resolve_at: int):
        self.checkpoint = checkpoint
        self.true_target = true_target
        self.predicted = predicted
        self.resolve_at = resolve_at
        self.undo: list[tuple[int, bool, int]] = []


class Machine:
    """One simulated core plus its memory system and predictors.

    The machine is deliberately mutable and reusable: scenarios re-run
    programs against warm caches via reset().
    """

    def __init__(self, program: Program, *,
                 core: CoreConfig | None = None,
                 cache: CacheConfig | None = None,
                 rsb_size: int = 16,
                 rsb_variant: RsbVariant = RsbVariant.CYCLIC,
                 btb_size: int = 256,
                 stack_top: int = STACK_TOP,
                 trace: bool = False):
        self.program = program
        self.cfg = core or CoreConfig()
        self.mem = PhysicalMemory()
        self.caches = CacheHierarchy(cache)
        self.rsb = ReturnStackBuffer(rsb_size, rsb_variant)
        self.btb = BranchTargetBuffer(btb_size)
        self.stack_top = stack_top
        self.regs = RegisterFile()
        self.pc = 0
        self.cycle = 0
        self.halted = False
        self.frames: list[_Frame] = []
        self.shadow: dict[int, int] = {}   # speculative store buffer (nest-wide)
        self.nest_instrs = 0
        self.addr_ranges: list[tuple[int, int]] | None = None
        self.syscall_cb = None             # callable(machine, num) -> run reason
        self.trace: list[TraceEvent] | None = [] if trace else None
        self.instret = 0
        for addr, blob in program.data:
            self.mem.write_blob(addr, blob)
        self.reset()

    # -- lifecycle ---------------------------------------------------------

    def reset(self, *, entry: int | None = None) -> None:
        """Clear architectural state for a fresh run. Memory, caches and
        predictors are kept (deliberately: cross-run microarchitectural
        residue is what the scenarios are about)."""
        self.regs = RegisterFile()
        self.regs[SP] = self.stack_top
        self.pc = self.program.entry if entry is None else entry
        self.halted = False
        self.frames.clear()
        self.shadow.clear()
        self.nest_instrs = 0

    def set_program(self, program: Program, *, load_data: bool = True) -> None:
        self.program = program
        if load_data:
            for addr, blob in program.data:
                self.mem.write_blob(addr, blob)
        self.reset()

    # -- helpers -----------------------------------------------------------

    def _emit(self, cycle: int, event: str, pc: int, depth: int,
              predicted: int | None = None, actual: int | None = None) -> None:
        if self.trace is not None:
            self.trace.append(TraceEvent(cycle, event, pc, depth, predicted, actual))

    def _check_range(self, addr: int, pc: int) -> None:
        if self.addr_ranges is None:
            return
        for lo, hi in self.addr_ranges:
            if lo <= addr < hi:
                return
        raise ExecutionError("unmapped", pc, self.cycle,
                             f"address {addr:#x} outside process ranges")

    def _read(self, addr: int) -> int:
        if self.frames and addr in self.shadow:
            return self.shadow[addr]
        return self.mem.read_word(addr)

    def _spec_write(self, addr: int, val: int) -> None:
        f = self.frames[-1]
        f.undo.append((addr, addr in self.shadow, self.shadow.get(addr, 0)))
        self.shadow[addr] = val & _U64

    def _resolve_one(self) -> None:
        f = self.frames.pop()
        if self.cycle < f.resolve_at:
            self.cycle = f.resolve_at
        if f.predicted == f.true_target:
            if self.frames:
                self.frames[-1].undo.extend(f.undo)
            else:
                for addr, val in self.shadow.items():
                    self.mem.write_word(addr, val)
                self.shadow.clear()
                self.nest_instrs = 0
            self._emit(self.cycle, "spec-commit", self.pc, len(self.frames) + 1,
                       f.predicted, f.true_target)
        else:
            regs = self.regs.regs
            regs[:] = f.checkpoint
            for addr, present, old in reversed(f.undo):
                if present:
                    self.shadow[addr] = old
                else:
                    self.shadow.pop(addr, None)
            self.pc = f.true_target
            self._emit(self.cycle, "spec-squash", self.pc, len(self.frames) + 1,
                       f.predicted, f.true_target)
            if not self.frames:
                self.nest_instrs = 0

    def _resolve_all(self) -> None:
        while self.frames:
            self._resolve_one()

    def _drain_check(self) -> None:
        cfg = self.cfg
        while self.frames and (
            self.nest_instrs >= cfg.max_spec_instructions
            or (self.cycle >= self.frames[-1].resolve_at
                and self.nest_instrs >= cfg.min_spec_on_hit)
        ):
            self._resolve_one()

    # -- execution ---------------------------------------------------------

    def run(self, *, max_steps: int | None = None,
            max_cycles: int | None = None) -> RunResult:
        """Run until halt, a budget limit, or a syscall hand-off.

        Returns a RunResult whose reason is 'halt', 'steps', 'cycles', or a
        reason produced by the syscall callback ('block'/'yield'/'exit').
        """
        insns = self.program.insns
        n_insns = len(insns)
        regs = self.regs.regs
        caches = self.caches
        rsb = self.rsb
        btb = self.btb
        cfg = self.cfg
        steps = 0
        start_cycle = self.cycle

        while True:
            if self.halted:
                return RunResult("halt", steps, self.cycle - start_cycle)
            if max_steps is not None and steps >= max_steps:
                return RunResult("steps", steps, self.cycle - start_cycle)
            if max_cycles is not None and self.cycle - start_cycle >= max_cycles:
                return RunResult("cycles", steps, self.cycle - start_cycle)

            if self.frames:
                self._drain_check()

            pc = self.pc
            depth = len(self.frames)
            if pc < 0 or pc >= n_insns:
                if depth:
                    # speculative fetch fault: wait out the resolve, give the
                    # frame its normal verdict, and continue from there
                    self._resolve_one()
                    continue
                raise ExecutionError("invalid-pc", pc, self.cycle,
                                     "fetch outside program")

            ins = insns[pc]
            op = ins.op
            steps += 1
            self.instret += 1
            if depth:
                self.nest_instrs += 1

            if op <= Op.SHL:  # MOV_IMM, MOV_REG, ADD, SUB, AND, SHL
                if op == Op.MOV_IMM:
                    regs[ins.dst] = ins.imm & _U64
                elif op == Op.MOV_REG:
                    regs[ins.dst] = regs[ins.src]
                elif op == Op.ADD:
                    rhs = regs[ins.src] if ins.src is not None else ins.imm
                    regs[ins.dst] = (regs[ins.dst] + rhs) & _U64
                elif op == Op.SUB:
                    rhs = regs[ins.src] if ins.src is not None else ins.imm
                    regs[ins.dst] = (regs[ins.dst] - rhs) & _U64
                elif op == Op.AND:
                    rhs = regs[ins.src] if ins.src is not None else (ins.imm & _U64)
                    regs[ins.dst] = regs[ins.dst] & rhs
                else:
                    count = (regs[ins.src] & 63) if ins.src is not None else ins.imm
                    regs[ins.dst] = (regs[ins.dst] << count) & _U64
                self.cycle += 1
                self.pc = pc + 1

            elif op == Op.LOAD:
                addr = (regs[ins.base]
                        + (regs[ins.index] if ins.index is not None else 0)
                        + ins.disp) & _U64
                if not depth:
                    self._check_range(addr, pc)
                lat = caches.access(addr, speculative=bool(depth))
                regs[ins.dst] = self._read(addr)
                self.cycle += lat
                self.pc = pc + 1

            elif op == Op.STORE:
                addr = (regs[ins.base]
                        + (regs[ins.index] if ins.index is not None else 0)
                        + ins.disp) & _U64
                val = regs[ins.src] if ins.src is not None else (ins.imm & _U64)
                lat = caches.access(addr, is_write=True, speculative=bool(depth))
                if depth:
                    self._spec_write(addr, val)
                else:
                    self._check_range(addr, pc)
                    self.mem.write_word(addr, val)
                self.cycle += lat
                self.pc = pc + 1

            elif op == Op.CALL_DIRECT or op == Op.CALL_INDIRECT:
                if op == Op.CALL_INDIRECT:
                    target = regs[ins.src]
                    btb.update(pc, target)
                else:
                    target = ins.target
                ra = pc + 1
                sp = (regs[SP] - 8) & _U64
                lat = caches.access(sp, is_write=True, speculative=bool(depth))
                if depth:
                    self._spec_write(sp, ra)
                else:
                    self.mem.write_word(sp, ra)
                regs[SP] = sp
                rsb.push(ra)
                self.cycle += lat
                self.pc = target

            elif op == Op.RET:
                sp = regs[SP]
                if not depth and sp >= self.stack_top:
                    raise ExecutionError("stack-underflow", pc, self.cycle,
                                         "return with an empty stack")
                lat = caches.access(sp, speculative=bool(depth))
                true_target = self._read(sp)
                # predict from the state built by earlier executions; this
                # return's own target only becomes visible afterwards
                pred = rsb.predict_pop(btb, pc)
                btb.update(pc, true_target)
                regs[SP] = (sp + 8) & _U64
                if pred is None or depth >= cfg.max_spec_depth:
                    self.cycle += lat
                    self.pc = true_target
                    self._emit(self.cycle, "stall", pc, depth, None, true_target)
                else:
                    self.frames.append(_Frame(regs.copy(), true_target, pred,
                                              self.cycle + lat))
                    self.cycle += 1
                    self.pc = pred
                    self._emit(self.cycle, "spec-enter", pc, depth + 1,
                               pred, true_target)

            elif op == Op.JMP:
                self.cycle += 1
                self.pc = ins.target

            elif op == Op.BEQ or op == Op.BNE:
                lhs = regs[ins.dst]
                rhs = regs[ins.src] if ins.src is not None else (ins.imm & _U64)
                taken = (lhs == rhs) if op == Op.BEQ else (lhs != rhs)
                self.cycle += 1
                self.pc = ins.target if taken else pc + 1

            elif op == Op.CLFLUSH:
                addr = (regs[ins.base]
                        + (regs[ins.index] if ins.index is not None else 0)
                        + ins.disp) & _U64
                caches.clflush(addr)
                self.cycle += 1
                self.pc = pc + 1

            elif op == Op.RDTSC:
                regs[ins.dst] = self.cycle
                self.cycle += 1
                self.pc = pc + 1

            elif op == Op.PAUSE:
                self.cycle += 1
                self.pc = pc + 1

            elif op == Op.FENCE:
                if self.frames:
                    self._resolve_all()
                    steps -= 1
                    self.instret -= 1
                    continue
                self.cycle += 1
                self.pc = pc + 1

            elif op == Op.SYSCALL:
                if self.frames:
                    self._resolve_all()
                    steps -= 1
                    self.instret -= 1
                    continue
                self.cycle += 1
                self.pc = pc + 1
                num = ins.imm
                if self.syscall_cb is not None:
                    reason = self.syscall_cb(self, num)
                    if reason != "ok":
                        return RunResult(reason, steps, self.cycle - start_cycle)
                elif num == SYS_EXIT:
                    self.halted = True
                    return RunResult("exit", steps, self.cycle - start_cycle)
                else:
                    raise ExecutionError("bad-syscall", pc, self.cycle,
                                         f"syscall {num} outside a system run")

            else:  # HALT
                if self.frames:
                    self._resolve_all()
                    steps -= 1
                    self.instret -= 1
                    continue
                self.cycle += 1
                self.halted = True
                return RunResult("halt", steps, self.cycle - start_cycle)

    def step(self) -> RunResult:
        """Advance by a single (architectural or speculative) instruction."""
        return self.run(max_steps=1)

    @property
    def depth(self) -> int:
        return len(self.frames)


# --------------------------------------------------------------------------
# sequential reference engine

@dataclass
class SeqResult:
    regs: RegisterFile
    mem: PhysicalMemory
    steps: int
    reason: str


def run_sequential(program: Program, *,
                   mem: PhysicalMemory | None = None,
                   regs: RegisterFile | None = None,
                   stack_top: int = STACK_TOP,
                   max_steps: int = 1_000_000,
                   syscall_cb=None) -> SeqResult:
    """Architectural oracle: executes the program with no caches, no
    prediction and no speculation. One cycle per instruction.

    Raises ExecutionError on invalid fetch, stack underflow, unhandled
    syscalls, and budget exhaustion ('budget-exhausted', distinct from halt).
    """
    m = mem if mem is not None else PhysicalMemory()
    if mem is None:
        for addr, blob in program.data:
            m.write_blob(addr, blob)
    r = regs if regs is not None else RegisterFile()
    if regs is None:
        r[SP] = stack_top
    rg = r.regs
    insns = program.insns
    n = len(insns)
    pc = program.entry
    steps = 0
    cycle = 0

    while True:
        if steps >= max_steps:
            raise ExecutionError("budget-exhausted", pc, cycle,
                                 f"no halt within {max_steps} steps")
        if pc < 0 or pc >= n:
            raise ExecutionError("invalid-pc", pc, cycle, "fetch outside program")
        ins = insns[pc]
        op = ins.op
        steps += 1
        cycle += 1

        if op == Op.MOV_IMM:
            rg[ins.dst] = ins.imm & _U64
            pc += 1
        elif op == Op.MOV_REG:
            rg[ins.dst] = rg[ins.src]
            pc += 1
        elif op == Op.ADD:
            rhs = rg[ins.src] if ins.src is not None else ins.imm
            rg[ins.dst] = (rg[ins.dst] + rhs) & _U64
            pc += 1
        elif op == Op.SUB:
            rhs = rg[ins.src] if ins.src is not None else ins.imm
            rg[ins.dst] = (rg[ins.dst] - rhs) & _U64
            pc += 1
        elif op == Op.AND:
            rhs = rg[ins.src] if ins.src is not None else (ins.imm & _U64)
            rg[ins.dst] = rg[ins.dst] & rhs
            pc += 1
        elif op == Op.SHL:
            count = (rg[ins.src] & 63) if ins.src is not None else ins.imm
            rg[ins.dst] = (rg[ins.dst] << count) & _U64
            pc += 1
        elif op == Op.LOAD:
            addr = (rg[ins.base] + (rg[ins.index] if ins.index is not None else 0)
                    + ins.disp) & _U64
            rg[ins.dst] = m.read_word(addr)
            pc += 1
        elif op == Op.STORE:
            addr = (rg[ins.base] + (rg[ins.index] if ins.index is not None else 0)
                    + ins.disp) & _U64
            val = rg[ins.src] if ins.src is not None else (ins.imm & _U64)
            m.write_word(addr, val)
            pc += 1
        elif op == Op.CALL_DIRECT or op == Op.CALL_INDIRECT:
            target = rg[ins.src] if op == Op.CALL_INDIRECT else ins.target
            sp = (rg[SP] - 8) & _U64
            m.write_word(sp, pc + 1)
            rg[SP] = sp
            pc = target
        elif op == Op.RET:
            sp = rg[SP]
            if sp >= stack_top:
                raise ExecutionError("stack-underflow", pc, cycle,
                                     "return with an empty stack")
            target = m.read_word(sp)
            rg[SP] = (sp + 8) & _U64
            pc = target
        elif op == Op.JMP:
            pc = ins.target
        elif op == Op.BEQ or op == Op.BNE:
            lhs = rg[ins.dst]
            rhs = rg[ins.src] if ins.src is not None else (ins.imm & _U64)
            taken = (lhs == rhs) if op == Op.BEQ else (lhs != rhs)
            pc = ins.target if taken else pc + 1
        elif op in (Op.CLFLUSH, Op.FENCE, Op.PAUSE):
            pc += 1
        elif op == Op.RDTSC:
            rg[ins.dst] = cycle
            pc += 1
        elif op == Op.SYSCALL:
            pc += 1
            if syscall_cb is not None:
                reason = syscall_cb(r, m, ins.imm)
                if reason != "ok":
                    return SeqResult(r, m, steps, reason)
            elif ins.imm == SYS_EXIT:
                return SeqResult(r, m, steps, "exit")
            else:
                raise ExecutionError("bad-syscall", pc - 1, cycle,
                                     f"syscall {ins.imm} outside a system run")
        else:  # HALT
            return SeqResult(r, m, steps, "halt")
