"""Assembler, disassembler and register-file behavior."""

import pytest

from rsbsim.isa import (
    SP, AssemblyError, Instruction, Op, Program, RegisterFile, assemble,
    disassemble,
)

FULL_COVERAGE = """
.entry main
.data 0x40000, 1, 2, 3, 255
main:
    mov r0, 5
    mov rax, -1
    mov r1, r0
    add r1, 3
    add r1, r0
    sub r2, r1
    sub r2, -7
    and r3, 0xff
    and r3, r2
    shl r4, 5
    shl r4, r0
    load r5, [r0]
    load r6, [r0 + 8]
    load r7, [r0 + r1]
    load r8, [r0 + r1 + 16]
    store [r0], r5
    store [r0 + 24], 99
    clflush [r0 + 8]
    call helper
    mov r9, helper
    call r9
    jmp over
    pause
over:
    beq r0, 5, next
next:
    bne r0, r1, fin
    rdtsc r10
    fence
fin:
    syscall 2
helper:
    ret
    halt
"""


def test_assemble_covers_every_opcode():
    program = assemble(FULL_COVERAGE)
    used = {ins.op for ins in program.insns}
    assert used == set(Op)


def test_entry_and_labels():
    program = assemble(FULL_COVERAGE)
    assert program.entry == program.labels["main"]
    assert "helper" in program.labels
    assert program.data == ((0x40000, bytes([1, 2, 3, 255])),)


def test_label_as_immediate_is_marked():
    program = assemble(".entry m\nm:\n    mov r9, m\n    halt\n")
    assert program.insns[0].imm == 0
    assert program.insns[0].imm_is_label


def test_x86_aliases_encode_identically():
    a = assemble(".entry m\nm:\n    mov rax, 1\n    add rbx, rax\n    halt\n")
    b = assemble(".entry m\nm:\n    mov r0, 1\n    add r1, r0\n    halt\n")
    assert a.insns == b.insns


def test_disassemble_round_trips():
    first = assemble(FULL_COVERAGE)
    second = assemble(disassemble(first))
    assert first.insns == second.insns
    assert first.entry == second.entry
    assert first.data == second.data
    # canonical form is a fixed point
    assert disassemble(first) == disassemble(second)


@pytest.mark.parametrize("source, fragment", [
    ("m:\n    bogus r0\n", "bogus"),
    (".entry m\nm:\n    mov r99, 1\n", "r99"),
    (".entry m\nm:\n    jmp nowhere\n", "nowhere"),
    (".entry m\nm:\n    halt\nm:\n    halt\n", "duplicate"),
    (".entry gone\n    halt\n", "gone"),
    (".entry m\nm:\n    shl r0, 64\n", "shift"),
    (".entry m\nm:\n    shl r0, -1\n", "shift"),
    (".entry m\n.data 0x0, 256\nm:\n    halt\n", "data"),
    (".weird m\nm:\n    halt\n", "directive"),
])
def test_assembly_errors(source, fragment):
    with pytest.raises(AssemblyError) as err:
        assemble(source)
    assert fragment.lower() in str(err.value).lower()


def test_assembly_error_carries_line_number():
    with pytest.raises(AssemblyError) as err:
        assemble(".entry m\nm:\n    mov r0, 1\n    frobnicate\n    halt\n")
    assert err.value.line == 4


def test_with_imm_returns_modified_copy():
    program = assemble(".entry m\nm:\n    mov r0, 1\n    halt\n")
    patched = program.with_imm(0, 42)
    assert patched.insns[0].imm == 42
    assert program.insns[0].imm == 1
    assert patched.insns[1] == program.insns[1]
    assert patched.labels == program.labels


def test_register_file_defaults_and_copy():
    rf = RegisterFile()
    assert rf.pc == 0
    assert list(rf.regs) == [0] * 17
    rf[3] = 77
    rf.sp = 0x1000
    dup = rf.copy()
    dup[3] = 1
    dup.sp = 0
    assert rf[3] == 77
    assert rf[SP] == 0x1000
    assert rf.sp == 0x1000


def test_instruction_defaults():
    ins = Instruction(op=Op.HALT)
    assert ins.dst is None and ins.src is None
    assert ins.imm == 0 and ins.target == 0 and ins.disp == 0
    assert ins.base is None and ins.index is None
    assert not ins.imm_is_label


def test_program_len():
    program = assemble(".entry m\nm:\n    halt\n")
    assert len(program) == 1
    assert isinstance(program, Program)
