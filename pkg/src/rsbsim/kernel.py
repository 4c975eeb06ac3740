"""A miniature operating-system model: processes, a round-robin scheduler,
timestamped input events, and the context-switch behaviour that makes the
return-stack predictor a cross-process channel.

All processes share one Machine (one core, one cache hierarchy, one RSB and
BTB). A context switch saves and restores registers and swaps the visible
program and address ranges, but predictor state is carried over: the switch
models a short kernel path that pops and pushes a few of its own return
addresses, overwriting the top entries in place and leaving everything
deeper untouched. With flush_rsb_on_switch the kernel instead refills the
whole RSB with a benign kernel address.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .core import KERNEL_BASE, CoreConfig, ExecutionError, Machine
from .isa import Program, RegisterFile, SP
from .mem import CacheConfig
from .predictor import RsbVariant
from .rng import XorShift64

__all__ = [
    "SYS_READ_CHAR",
    "SYS_SCHED_YIELD",
    "SYS_EXIT",
    "SchedConfig",
    "Process",
    "InputEvent",
    "System",
]

SYS_READ_CHAR = 0
SYS_SCHED_YIELD = 1
SYS_EXIT = 2


@dataclass(frozen=True)
class SchedConfig:
    quantum: int = 10_000           # cycles per time slice
    jitter: float = 0.0             # probability of a random ready pick
    kernel_rsb_pushes: int = 3      # RSB entries the kernel path overwrites
    flush_rsb_on_switch: bool = False
    cycles_per_ms: int = 1000


@dataclass(frozen=True)
class InputEvent:
    cycle: int
    char: int


@dataclass
class Process:
    pid: int
    name: str
    program: Program
    stack_top: int
    ranges: list[tuple[int, int]] | None
    regs: RegisterFile = field(default_factory=RegisterFile)
    state: str = "ready"            # ready | blocked | done
    cycles_used: int = 0
    steps: int = 0

    def __post_init__(self):
        self.regs[SP] = self.stack_top
        self.regs.pc = self.program.entry


class System:
    """One core, several processes, a cooperative-preemptive scheduler."""

    def __init__(self, *,
                 core: CoreConfig | None = None,
                 cache: CacheConfig | None = None,
                 sched: SchedConfig | None = None,
                 rsb_size: int = 16,
                 rsb_variant: RsbVariant = RsbVariant.CYCLIC,
                 btb_size: int = 256,
                 seed: int = 1,
                 trace: bool = False):
        self.sched = sched or SchedConfig()
        self.machine = Machine(Program((), {}, 0, ()), core=core, cache=cache,
                               rsb_size=rsb_size, rsb_variant=rsb_variant,
                               btb_size=btb_size, trace=trace)
        self.machine.syscall_cb = self._syscall
        self.procs: list[Process] = []
        self.current: Process | None = None
        self.events: deque[InputEvent] = deque()
        self.trace: list[tuple[int, str, int, int]] = []
        self.rng = XorShift64(seed)
        self.switches = 0

    # -- setup -------------------------------------------------------------

    def spawn(self, name: str, program: Program, *, stack_top: int,
              ranges: list[tuple[int, int]] | None = None) -> Process:
        proc = Process(len(self.procs), name, program, stack_top, ranges)
        for addr, blob in program.data:
            self.machine.mem.write_blob(addr, blob)
        self.procs.append(proc)
        return proc

    def push_input(self, cycle: int, char: int) -> None:
        if self.events and cycle < self.events[-1].cycle:
            raise ValueError("input events must be pushed in cycle order")
        self.events.append(InputEvent(cycle, char))

    def type_text(self, text: str, *, start_ms: int = 1,
                  cadence_ms: int = 50) -> None:
        """Queue keystrokes at a fixed cadence, timestamped in milliseconds."""
        cpm = self.sched.cycles_per_ms
        for i, ch in enumerate(text):
            self.push_input((start_ms + i * cadence_ms) * cpm, ord(ch))

    # -- kernel internals --------------------------------------------------

    def _syscall(self, machine: Machine, num: int) -> str:
        proc = self.current
        if num == SYS_EXIT:
            proc.state = "done"
            return "exit"
        if num == SYS_SCHED_YIELD:
            return "yield"
        if num == SYS_READ_CHAR:
            if self.events and self.events[0].cycle <= machine.cycle:
                ev = self.events.popleft()
                machine.regs[0] = ev.char
                self.trace.append((machine.cycle, "input", proc.pid, ev.char))
                return "ok"
            return "block"
        raise ExecutionError("bad-syscall", machine.pc - 1, machine.cycle,
                             f"unknown syscall {num}")

    def _clobber_rsb(self) -> None:
        rsb = self.machine.rsb
        if self.sched.flush_rsb_on_switch:
            rsb.flush_fill(KERNEL_BASE)
            return
        k = min(self.sched.kernel_rsb_pushes, rsb.size)
        for _ in range(k):
            rsb.predict_pop()
        for i in range(k):
            rsb.push(KERNEL_BASE + k - 1 - i)

    def _switch_to(self, proc: Process) -> None:
        """Restore proc's context. Registers were synced out after its last
        slice, so this only copies in; the RSB clobber happens only when the
        running process actually changes."""
        m = self.machine
        if self.current is not proc:
            self._clobber_rsb()
            m.program = proc.program
            m.addr_ranges = proc.ranges
            m.stack_top = proc.stack_top
            self.switches += 1
            self.trace.append((m.cycle, "switch", proc.pid, self.switches))
        m.regs.regs[:] = proc.regs.regs
        m.pc = proc.regs.pc
        m.halted = False
        self.current = proc

    def _deliver_input(self) -> None:
        """Wake blocked readers for any events that are now due (FIFO)."""
        while self.events and self.events[0].cycle <= self.machine.cycle:
            waiter = next((p for p in self.procs if p.state == "blocked"), None)
            if waiter is None:
                return
            ev = self.events.popleft()
            waiter.regs[0] = ev.char
            waiter.state = "ready"
            self.trace.append((self.machine.cycle, "input", waiter.pid, ev.char))

    def _pick_next(self) -> Process | None:
        ready = [p for p in self.procs if p.state == "ready"]
        if not ready:
            return None
        if self.sched.jitter > 0.0 and self.rng.chance(self.sched.jitter):
            return ready[self.rng.below(len(ready))]
        start = (self.current.pid + 1) if self.current is not None else 0
        n = len(self.procs)
        for off in range(n):
            p = self.procs[(start + off) % n]
            if p.state == "ready":
                return p
        return None

    # -- main loop ---------------------------------------------------------

    def run(self, *, max_cycles: int = 10_000_000) -> str:
        """Schedule until every process exits, everyone deadlocks on input,
        or the cycle budget runs out. Returns 'done', 'deadlock' or 'cycles'.
        """
        m = self.machine
        limit = m.cycle + max_cycles
        while m.cycle < limit:
            self._deliver_input()
            nxt = self._pick_next()
            if nxt is None:
                blocked = [p for p in self.procs if p.state == "blocked"]
                if not blocked:
                    return "done"
                if not self.events:
                    return "deadlock"
                # idle: skip forward to the next keystroke
                m.cycle = max(m.cycle, self.events[0].cycle)
                continue
            self._switch_to(nxt)
            res = m.run(max_cycles=min(self.sched.quantum, limit - m.cycle))
            nxt.regs.regs[:] = m.regs.regs
            nxt.regs.pc = m.pc
            nxt.cycles_used += res.cycles
            nxt.steps += res.steps
            if res.reason == "block":
                nxt.state = "blocked"
            elif res.reason in ("exit", "halt"):
                nxt.state = "done"
            # 'yield' and 'cycles' leave the process ready
        return "cycles"
