"""Toy ISA: instruction set, assembler and disassembler.

Code addresses are instruction indices, not byte offsets. Data lives in a
separate byte-addressable space (see rsbsim.mem). All data values are 64-bit;
byte extraction is done with AND masks.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import IntEnum

__all__ = [
    "Op",
    "Instruction",
    "Program",
    "RegisterFile",
    "AssemblyError",
    "SP",
    "NUM_REGS",
    "REG_NAMES",
    "assemble",
    "disassemble",
]


# --------------------------------------------------------------------------
# registers

NUM_REGS = 17  # r0..r15 plus sp
SP = 16

REG_NAMES = tuple(f"r{i}" for i in range(16)) + ("sp",)

# x86-flavoured aliases accepted on input; output always uses canonical names.
_REG_ALIASES = {
    "rax": 0, "rbx": 1, "rcx": 2, "rdx": 3,
    "rsi": 4, "rdi": 5, "rbp": 6, "rsp": SP,
}
_REG_IDS = {name: i for i, name in enumerate(REG_NAMES)} | _REG_ALIASES


class Op(IntEnum):
    # data movement
    MOV_IMM = 0
    MOV_REG = 1
    # arithmetic / logic
    ADD = 2
    SUB = 3
    AND = 4
    SHL = 5
    # memory
    LOAD = 6
    STORE = 7
    CLFLUSH = 8
    # control flow
    CALL_DIRECT = 9
    CALL_INDIRECT = 10
    RET = 11
    JMP = 12
    BEQ = 13
    BNE = 14
    # misc
    RDTSC = 15
    FENCE = 16
    PAUSE = 17
    SYSCALL = 18
    HALT = 19


IMM_MIN = -(1 << 63)
IMM_MAX = (1 << 63) - 1


@dataclass(frozen=True, slots=True)
class Instruction:
    """One decoded instruction.

    Field use by opcode:
      dst       destination register (MOV/ALU/LOAD/RDTSC), compare lhs (BEQ/BNE)
      src       source register, or None when the operand is `imm`
      imm       immediate operand (64-bit signed), syscall number
      target    code address for CALL_DIRECT/JMP/BEQ/BNE
      base/index/disp   memory operand [base + index + disp]
      imm_is_label      imm was written as a label, i.e. it is a code address
                        and must be remapped by program transforms
    """

    op: Op
    dst: int | None = None
    src: int | None = None
    imm: int = 0
    target: int = 0
    base: int | None = None
    index: int | None = None
    disp: int = 0
    imm_is_label: bool = False


@dataclass(frozen=True)
class Program:
    insns: tuple[Instruction, ...]
    labels: dict[str, int] = field(default_factory=dict)
    entry: int = 0
    data: tuple[tuple[int, bytes], ...] = ()

    def __len__(self) -> int:
        return len(self.insns)

    def with_imm(self, idx: int, imm: int) -> "Program":
        """Copy of the program with instruction idx's immediate replaced."""
        insns = list(self.insns)
        insns[idx] = replace(insns[idx], imm=imm)
        return replace(self, insns=tuple(insns))


class RegisterFile:
    """16 general registers plus sp, all 64-bit, plus the program counter."""

    __slots__ = ("regs", "pc")

    def __init__(self, pc: int = 0):
        self.regs: list[int] = [0] * NUM_REGS
        self.pc = pc

    def copy(self) -> "RegisterFile":
        c = RegisterFile(self.pc)
        c.regs[:] = self.regs
        return c

    def __getitem__(self, r: int) -> int:
        return self.regs[r]

    def __setitem__(self, r: int, v: int) -> None:
        self.regs[r] = v & 0xFFFFFFFFFFFFFFFF

    @property
    def sp(self) -> int:
        return self.regs[SP]

    @sp.setter
    def sp(self, v: int) -> None:
        self.regs[SP] = v & 0xFFFFFFFFFFFFFFFF

    def __repr__(self) -> str:
        live = {REG_NAMES[i]: v for i, v in enumerate(self.regs) if v}
        return f"RegisterFile(pc={self.pc}, {live})"


class AssemblyError(Exception):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line
        self.msg = msg


# --------------------------------------------------------------------------
# assembler

_LABEL_RE = re.compile(r"^[A-Za-z_.$][\w.$]*$")
_MEM_RE = re.compile(r"^\[(.+)\]$")


def _parse_int(tok: str) -> int | None:
    try:
        return int(tok, 0)
    except ValueError:
        return None


class _Asm:
    def __init__(self, text: str):
        self.text = text
        self.insns: list[tuple[int, Instruction]] = []  # (line_no, insn)
        self.labels: dict[str, int] = {}
        self.label_lines: dict[str, int] = {}
        self.entry_label: str | None = None
        self.entry_line = 0
        self.data: list[tuple[int, bytes]] = []
        # operands that still need a label resolved: (pos, field, name, line)
        self.fixups: list[tuple[int, str, str, int]] = []

    def err(self, msg: str) -> AssemblyError:
        return AssemblyError(self.line_no, msg)

    def reg(self, tok: str) -> int | None:
        return _REG_IDS.get(tok.lower())

    def imm_or_label(self, tok: str, fld: str, pos: int) -> int:
        """Numeric immediate, or a label recorded for later resolution."""
        v = _parse_int(tok)
        if v is not None:
            if not IMM_MIN <= v <= IMM_MAX:
                raise self.err(f"immediate out of range: {tok}")
            return v
        if _LABEL_RE.match(tok) and self.reg(tok) is None:
            self.fixups.append((pos, fld, tok, self.line_no))
            return 0
        raise self.err(f"bad operand: {tok!r}")

    def mem_operand(self, tok: str) -> tuple[int, int | None, int]:
        m = _MEM_RE.match(tok)
        if not m:
            raise self.err(f"expected memory operand, got {tok!r}")
        base: int | None = None
        index: int | None = None
        disp = 0
        for part in (p.strip() for p in m.group(1).split("+")):
            r = self.reg(part)
            if r is not None:
                if base is None:
                    base = r
                elif index is None:
                    index = r
                else:
                    raise self.err("memory operand has too many registers")
                continue
            v = _parse_int(part)
            if v is None:
                raise self.err(f"bad memory operand term: {part!r}")
            disp += v
        if base is None:
            raise self.err("memory operand needs a base register")
        if not IMM_MIN <= disp <= IMM_MAX:
            raise self.err("memory displacement out of range")
        return base, index, disp

    def split_operands(self, rest: str) -> list[str]:
        """Split on commas that are not inside brackets."""
        out, depth, cur = [], 0, []
        for ch in rest:
            if ch == "[":
                depth += 1
            elif ch == "]":
                depth -= 1
            if ch == "," and depth == 0:
                out.append("".join(cur).strip())
                cur = []
            else:
                cur.append(ch)
        tail = "".join(cur).strip()
        if tail:
            out.append(tail)
        if depth != 0:
            raise self.err("unbalanced brackets")
        return out

    def directive(self, mnem: str, ops: list[str]) -> None:
        if mnem == ".entry":
            if len(ops) != 1 or not _LABEL_RE.match(ops[0]):
                raise self.err(".entry takes one label")
            self.entry_label = ops[0]
            self.entry_line = self.line_no
        elif mnem == ".data":
            if len(ops) < 2:
                raise self.err(".data takes an address and at least one byte")
            addr = _parse_int(ops[0])
            if addr is None or addr < 0:
                raise self.err(f"bad .data address: {ops[0]!r}")
            vals = []
            for tok in ops[1:]:
                v = _parse_int(tok)
                if v is None or not 0 <= v <= 255:
                    raise self.err(f"bad .data byte: {tok!r}")
                vals.append(v)
            self.data.append((addr, bytes(vals)))
        else:
            raise self.err(f"unknown directive {mnem!r}")

    def emit(self, **kw) -> None:
        self.insns.append((self.line_no, Instruction(**kw)))

    def instruction(self, mnem: str, ops: list[str]) -> None:
        pos = len(self.insns)
        n = len(ops)

        def need(k: int) -> None:
            if n != k:
                raise self.err(f"{mnem} takes {k} operand(s), got {n}")

        if mnem == "mov":
            need(2)
            d = self.reg(ops[0])
            if d is None:
                raise self.err(f"bad register: {ops[0]!r}")
            s = self.reg(ops[1])
            if s is not None:
                self.emit(op=Op.MOV_REG, dst=d, src=s)
            else:
                self.emit(op=Op.MOV_IMM, dst=d, imm=self.imm_or_label(ops[1], "imm", pos))
        elif mnem in ("add", "sub", "and", "shl"):
            need(2)
            d = self.reg(ops[0])
            if d is None:
                raise self.err(f"bad register: {ops[0]!r}")
            opc = {"add": Op.ADD, "sub": Op.SUB, "and": Op.AND, "shl": Op.SHL}[mnem]
            s = self.reg(ops[1])
            if s is not None:
                self.emit(op=opc, dst=d, src=s)
            else:
                v = self.imm_or_label(ops[1], "imm", pos)
                if mnem == "shl" and not 0 <= v <= 63:
                    raise self.err(f"shift amount out of range: {v}")
                self.emit(op=opc, dst=d, imm=v)
        elif mnem == "load":
            need(2)
            d = self.reg(ops[0])
            if d is None:
                raise self.err(f"bad register: {ops[0]!r}")
            b, x, disp = self.mem_operand(ops[1])
            self.emit(op=Op.LOAD, dst=d, base=b, index=x, disp=disp)
        elif mnem == "store":
            need(2)
            b, x, disp = self.mem_operand(ops[0])
            s = self.reg(ops[1])
            if s is not None:
                self.emit(op=Op.STORE, src=s, base=b, index=x, disp=disp)
            else:
                v = self.imm_or_label(ops[1], "imm", pos)
                self.emit(op=Op.STORE, imm=v, base=b, index=x, disp=disp)
        elif mnem == "clflush":
            need(1)
            b, x, disp = self.mem_operand(ops[0])
            self.emit(op=Op.CLFLUSH, base=b, index=x, disp=disp)
        elif mnem == "call":
            need(1)
            s = self.reg(ops[0])
            if s is not None:
                self.emit(op=Op.CALL_INDIRECT, src=s)
            else:
                self.emit(op=Op.CALL_DIRECT, target=self.imm_or_label(ops[0], "target", pos))
        elif mnem == "jmp":
            need(1)
            self.emit(op=Op.JMP, target=self.imm_or_label(ops[0], "target", pos))
        elif mnem in ("beq", "bne"):
            need(3)
            d = self.reg(ops[0])
            if d is None:
                raise self.err(f"bad register: {ops[0]!r}")
            opc = Op.BEQ if mnem == "beq" else Op.BNE
            s = self.reg(ops[1])
            t = self.imm_or_label(ops[2], "target", pos)
            if s is not None:
                self.emit(op=opc, dst=d, src=s, target=t)
            else:
                self.emit(op=opc, dst=d, imm=self.imm_or_label(ops[1], "imm", pos), target=t)
        elif mnem == "rdtsc":
            need(1)
            d = self.reg(ops[0])
            if d is None:
                raise self.err(f"bad register: {ops[0]!r}")
            self.emit(op=Op.RDTSC, dst=d)
        elif mnem == "syscall":
            need(1)
            self.emit(op=Op.SYSCALL, imm=self.imm_or_label(ops[0], "imm", pos))
        elif mnem in ("ret", "fence", "pause", "halt"):
            need(0)
            opc = {"ret": Op.RET, "fence": Op.FENCE, "pause": Op.PAUSE, "halt": Op.HALT}[mnem]
            self.emit(op=opc)
        else:
            raise self.err(f"unknown mnemonic {mnem!r}")

    def run(self) -> Program:
        for self.line_no, raw in enumerate(self.text.splitlines(), start=1):
            line = raw.split(";", 1)[0].strip()
            while line:
                head, colon, rest = line.partition(":")
                head = head.strip()
                if colon and _LABEL_RE.match(head) and not head.startswith("."):
                    if head in self.labels:
                        raise self.err(f"duplicate label {head!r}")
                    self.labels[head] = len(self.insns)
                    self.label_lines[head] = self.line_no
                    line = rest.strip()
                    continue
                break
            if not line:
                continue
            parts = line.split(None, 1)
            mnem = parts[0].lower()
            ops = self.split_operands(parts[1]) if len(parts) > 1 else []
            if mnem.startswith("."):
                self.directive(mnem, ops)
            else:
                self.instruction(mnem, ops)

        for pos, fld, name, line in self.fixups:
            if name not in self.labels:
                raise AssemblyError(line, f"undefined label {name!r}")
            ln, ins = self.insns[pos]
            patch = {fld: self.labels[name]}
            if fld == "imm":
                patch["imm_is_label"] = True
            self.insns[pos] = (ln, replace(ins, **patch))

        entry = 0
        if self.entry_label is not None:
            if self.entry_label not in self.labels:
                raise AssemblyError(self.entry_line, f"undefined label {self.entry_label!r}")
            entry = self.labels[self.entry_label]

        return Program(
            insns=tuple(ins for _, ins in self.insns),
            labels=dict(self.labels),
            entry=entry,
            data=tuple(self.data),
        )


def assemble(text: str) -> Program:
    """Assemble source text into a Program.

    Raises AssemblyError (with a line number) on syntax errors, undefined or
    duplicate labels, and out-of-range immediates.
    """
    return _Asm(text).run()


# --------------------------------------------------------------------------
# disassembler

def _mem_str(ins: Instruction) -> str:
    parts = [REG_NAMES[ins.base]]
    if ins.index is not None:
        parts.append(REG_NAMES[ins.index])
    if ins.disp:
        parts.append(str(ins.disp))
    return "[" + " + ".join(parts) + "]"


def _insn_str(ins: Instruction, label_of: dict[int, str]) -> str:
    op = ins.op
    r = REG_NAMES

    def tgt() -> str:
        return label_of.get(ins.target, str(ins.target))

    def imm_s() -> str:
        if ins.imm_is_label:
            return label_of.get(ins.imm, str(ins.imm))
        return str(ins.imm)

    if op == Op.MOV_IMM:
        return f"mov {r[ins.dst]}, {imm_s()}"
    if op == Op.MOV_REG:
        return f"mov {r[ins.dst]}, {r[ins.src]}"
    if op in (Op.ADD, Op.SUB, Op.AND, Op.SHL):
        mnem = {Op.ADD: "add", Op.SUB: "sub", Op.AND: "and", Op.SHL: "shl"}[op]
        rhs = r[ins.src] if ins.src is not None else imm_s()
        return f"{mnem} {r[ins.dst]}, {rhs}"
    if op == Op.LOAD:
        return f"load {r[ins.dst]}, {_mem_str(ins)}"
    if op == Op.STORE:
        rhs = r[ins.src] if ins.src is not None else imm_s()
        return f"store {_mem_str(ins)}, {rhs}"
    if op == Op.CLFLUSH:
        return f"clflush {_mem_str(ins)}"
    if op == Op.CALL_DIRECT:
        return f"call {tgt()}"
    if op == Op.CALL_INDIRECT:
        return f"call {r[ins.src]}"
    if op in (Op.BEQ, Op.BNE):
        mnem = "beq" if op == Op.BEQ else "bne"
        rhs = r[ins.src] if ins.src is not None else imm_s()
        return f"{mnem} {r[ins.dst]}, {rhs}, {tgt()}"
    if op == Op.JMP:
        return f"jmp {tgt()}"
    if op == Op.RDTSC:
        return f"rdtsc {r[ins.dst]}"
    if op == Op.SYSCALL:
        return f"syscall {ins.imm}"
    return {Op.RET: "ret", Op.FENCE: "fence", Op.PAUSE: "pause", Op.HALT: "halt"}[op]


def disassemble(p: Program) -> str:
    """Render a Program as assembly text that reassembles to the same
    instruction list, entry point and data segments. Labels are regenerated
    (L0, L1, ...) at branch targets; original label names are not preserved.
    """
    targets = {
        ins.target
        for ins in p.insns
        if ins.op in (Op.CALL_DIRECT, Op.JMP, Op.BEQ, Op.BNE)
    }
    targets |= {ins.imm for ins in p.insns if ins.imm_is_label}
    if p.entry:
        targets.add(p.entry)
    label_of = {t: f"L{n}" for n, t in enumerate(sorted(t for t in targets if 0 <= t <= len(p.insns)))}

    lines = []
    if p.entry:
        lines.append(f".entry {label_of[p.entry]}")
    for addr, blob in p.data:
        lines.append(f".data {addr}, " + ", ".join(str(b) for b in blob))
    for i, ins in enumerate(p.insns):
        if i in label_of:
            lines.append(f"{label_of[i]}:")
        lines.append("    " + _insn_str(ins, label_of))
    if len(p.insns) in label_of:  # target one past the end
        lines.append(f"{label_of[len(p.insns)]}:")
    return "\n".join(lines) + "\n"
