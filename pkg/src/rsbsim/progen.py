"""Random program generator for differential testing.

Programs are emitted as assembly text and are halting by construction:
cross-function calls only go to later functions (a DAG), self-recursion
counts a register down to zero before each deeper call, loops count a
dedicated register down from a small constant, and branches only jump
forward within their function. A "hazard" block rewrites the function's
own return address to a local label - after saving the original, which it
pushes back before the second return - so mispredicted and rolled-back
returns get exercised without ever losing the way back to main.

Register conventions: r11 holds the saved return address inside hazard
blocks, r12 counts loops and recursion depth, r14 the data-window base;
everything else is fair game for the instruction soup. rdtsc and syscalls
are never emitted: the former reads the cycle counter (which the two
engines deliberately disagree on) and the latter needs an operating
system.
"""

from __future__ import annotations

import random

__all__ = ["generate", "DATA_BASE", "DATA_SIZE"]

DATA_BASE = 0x40000
DATA_SIZE = 0x1000          # small window so loads often alias stores

_SOUP_REGS = ["r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7",
              "r8", "r9", "r10", "r13", "r15"]


class _Gen:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.lines: list[str] = []
        self.label_serial = 0

    def fresh(self, stem: str) -> str:
        self.label_serial += 1
        return f"{stem}_{self.label_serial}"

    def reg(self) -> str:
        return self.rng.choice(_SOUP_REGS)

    def disp(self) -> int:
        # mostly aligned, sometimes deliberately straddling words
        off = self.rng.randrange(0, DATA_SIZE - 8)
        if self.rng.random() < 0.8:
            off &= ~7
        return off

    def soup(self, n: int) -> None:
        r = self.rng
        for _ in range(n):
            kind = r.random()
            if kind < 0.35:
                op = r.choice(["add", "sub", "and"])
                if r.random() < 0.5:
                    self.lines.append(f"    {op} {self.reg()}, {self.reg()}")
                else:
                    self.lines.append(f"    {op} {self.reg()}, {r.randrange(-2**16, 2**16)}")
            elif kind < 0.45:
                self.lines.append(f"    shl {self.reg()}, {r.randrange(0, 20)}")
            elif kind < 0.55:
                self.lines.append(f"    mov {self.reg()}, {r.randrange(-2**31, 2**31)}")
            elif kind < 0.62:
                self.lines.append(f"    mov {self.reg()}, {self.reg()}")
            elif kind < 0.75:
                self.lines.append(f"    load {self.reg()}, [r14 + {self.disp()}]")
            elif kind < 0.88:
                val = self.reg() if r.random() < 0.6 else str(r.randrange(0, 2**32))
                self.lines.append(f"    store [r14 + {self.disp()}], {val}")
            elif kind < 0.92:
                self.lines.append(f"    clflush [r14 + {self.disp()}]")
            elif kind < 0.96:
                self.lines.append("    pause")
            else:
                self.lines.append("    fence")

    def forward_branch(self) -> None:
        lbl = self.fresh("skip")
        mnem = self.rng.choice(["beq", "bne"])
        rhs = self.reg() if self.rng.random() < 0.5 else str(self.rng.randrange(0, 4))
        self.lines.append(f"    {mnem} {self.reg()}, {rhs}, {lbl}")
        self.soup(self.rng.randrange(1, 4))
        self.lines.append(f"{lbl}:")

    def loop(self) -> None:
        lbl = self.fresh("loop")
        self.lines.append(f"    mov r12, {self.rng.randrange(1, 5)}")
        self.lines.append(f"{lbl}:")
        self.soup(self.rng.randrange(1, 4))
        self.lines.append("    sub r12, 1")
        self.lines.append(f"    bne r12, 0, {lbl}")

    def hazard_return(self) -> None:
        """Rewrite the stored return address to a local label; the detour
        pushes the saved original back and returns through it."""
        alt = self.fresh("detour")
        self.lines.append("    load r11, [sp]")
        self.lines.append(f"    store [sp], {alt}")
        self.lines.append("    ret")
        self.lines.append(f"{alt}:")
        self.soup(self.rng.randrange(1, 3))
        self.lines.append("    sub sp, 8")
        self.lines.append("    store [sp], r11")
        # scrub the saved address so final register state stays
        # position-independent (rewriting passes relocate code)
        self.lines.append("    mov r11, 0")
        self.lines.append("    ret")

    def function(self, idx: int, n_funcs: int) -> None:
        r = self.rng
        self.lines.append(f"fn{idx}:")
        for _ in range(r.randrange(1, 4)):
            roll = r.random()
            if roll < 0.45:
                self.soup(r.randrange(1, 5))
            elif roll < 0.6:
                self.forward_branch()
            elif roll < 0.75:
                self.loop()
            elif idx + 1 < n_funcs:
                callee = r.randrange(idx + 1, n_funcs)
                self.lines.append(f"    call fn{callee}")
        if r.random() < 0.25:
            self.hazard_return()
        else:
            self.lines.append("    ret")

    def recursive_function(self, idx: int, n_funcs: int) -> None:
        """Bounded self-recursion: the countdown entry tests and decrements
        r12 before each deeper call, so the depth is fixed during descent
        and the body below it can clobber r12 freely."""
        r = self.rng
        rec = self.fresh("rec")
        base = self.fresh("base")
        self.lines.append(f"fn{idx}:")
        self.lines.append(f"    mov r12, {r.randrange(1, 6)}")
        self.lines.append(f"{rec}:")
        self.lines.append(f"    beq r12, 0, {base}")
        self.lines.append("    sub r12, 1")
        self.lines.append(f"    call {rec}")
        self.lines.append(f"{base}:")
        for _ in range(r.randrange(1, 3)):
            roll = r.random()
            if roll < 0.55:
                self.soup(r.randrange(1, 4))
            elif roll < 0.75:
                self.forward_branch()
            elif idx + 1 < n_funcs:
                callee = r.randrange(idx + 1, n_funcs)
                self.lines.append(f"    call fn{callee}")
        if r.random() < 0.25:
            self.hazard_return()
        else:
            self.lines.append("    ret")

    def run(self, n_funcs: int) -> str:
        r = self.rng
        self.lines.append(".entry main")
        self.lines.append("main:")
        self.lines.append(f"    mov r14, {DATA_BASE}")
        self.soup(r.randrange(1, 4))
        for _ in range(r.randrange(1, 4)):
            self.lines.append(f"    call fn{r.randrange(0, n_funcs)}")
            if r.random() < 0.5:
                self.soup(r.randrange(1, 3))
        self.lines.append("    halt")
        for i in range(n_funcs):
            if r.random() < 0.3:
                self.recursive_function(i, n_funcs)
            else:
                self.function(i, n_funcs)
        return "\n".join(self.lines) + "\n"


def generate(seed: int, *, max_funcs: int = 5) -> str:
    """Return the assembly text of one random halting program."""
    rng = random.Random(seed)
    return _Gen(rng).run(rng.randrange(1, max_funcs + 1))
