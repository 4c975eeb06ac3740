"""A first look at the machine: assemble a program, read its canonical
listing, run it on the architectural interpreter and on the speculative
core, and time a memory access with the cycle counter.

Run:  python3 demos/01_assembler_tour.py
"""

from rsbsim import Machine, assemble, disassemble, run_sequential

SOURCE = """
.entry main

; sum the bytes planted below, then time how long a reload takes
main:
    mov r1, 0x40000         ; data window
    mov r2, 0                ; accumulator
    mov r3, 4                ; loop counter
loop:
    load r4, [r1]
    and r4, 0xFF             ; low byte only
    add r2, r4
    add r1, 8
    sub r3, 1
    bne r3, 0, loop

    rdtsc r5                 ; -- timed reload of a warm line --
    load r6, [r1 + -8]
    rdtsc r7
    sub r7, r5               ; r7 = cycles for a cached load (+ overhead)
    halt

.data 0x40000, 10
.data 0x40008, 20
.data 0x40010, 30
.data 0x40018, 40
"""


def main() -> None:
    program = assemble(SOURCE)
    print(f"assembled {len(program)} instructions, "
          f"{len(program.labels)} labels\n")

    print("canonical listing:")
    print(disassemble(program))

    # The architectural interpreter: one instruction per cycle, no caches,
    # no prediction. This is the ground truth every other engine is
    # compared against.
    seq = run_sequential(program)
    print(f"sequential engine: stopped at '{seq.reason}' "
          f"after {seq.steps} instructions")
    print(f"  byte sum r2 = {seq.regs[2]}")

    # The speculative core: same architecture, but loads cost real cache
    # latencies and returns are predicted. On this straight-line program
    # the registers come out identical - only the cycle count differs.
    m = Machine(program)
    res = m.run()
    print(f"speculative core:  stopped at '{res.reason}' "
          f"after {res.steps} instructions, {res.cycles} cycles")
    print(f"  byte sum r2 = {m.regs[2]}")
    print(f"  timed reload r7 = {m.regs[7]} cycles "
          f"(the line was still in L1)")
    assert m.regs[2] == seq.regs[2] == 100


if __name__ == "__main__":
    main()
