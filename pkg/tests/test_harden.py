"""Program-to-program mitigation passes: retpoline, fence-after-call, and
the equivalence checker that guards both."""

from rsbsim.core import CoreConfig, Machine, run_sequential
from rsbsim.harden import (
    apply_fence_after_call, apply_retpoline, verify_equivalence,
)
from rsbsim.isa import Op, assemble
from rsbsim.progen import generate

from oracles import run_program_model

CALL_HEAVY = """
.entry main
main:
    mov r1, 5
    call f
    add r1, 100
    call f
    halt
f:
    add r1, 1
    call g
    ret
g:
    add r1, 10
    ret
"""


def test_retpoline_shape_of_one_return():
    prog = assemble(".entry main\nmain:\n    call f\n    halt\nf:\n    ret\n")
    rp = apply_retpoline(prog)
    assert len(rp.insns) == len(prog.insns) + 4
    b = rp.labels["f"]
    ops = [ins.op for ins in rp.insns[b:b + 5]]
    assert ops == [Op.CALL_DIRECT, Op.PAUSE, Op.JMP, Op.ADD, Op.RET]
    assert rp.labels["__rp_trap_0"] == b + 1
    assert rp.labels["__rp_land_0"] == b + 3
    assert rp.insns[b].target == b + 3          # call jumps over the trap
    assert rp.insns[b + 2].target == b + 1      # trap spins on itself


def test_retpoline_is_idempotent():
    prog = assemble(CALL_HEAVY)
    once = apply_retpoline(prog)
    twice = apply_retpoline(once)
    assert twice == once


def test_fence_pass_shape_and_idempotence():
    prog = assemble(CALL_HEAVY)
    fenced = apply_fence_after_call(prog)
    calls = [i for i, ins in enumerate(fenced.insns)
             if ins.op in (Op.CALL_DIRECT, Op.CALL_INDIRECT)]
    assert calls, "corpus program should contain calls"
    for i in calls:
        assert fenced.insns[i + 1].op == Op.FENCE
    assert apply_fence_after_call(fenced) == fenced


def test_transforms_preserve_architecture_on_hand_program():
    prog = assemble(CALL_HEAVY)
    for transform in (apply_retpoline, apply_fence_after_call):
        hardened = transform(prog)
        ok, detail = verify_equivalence(prog, hardened)
        assert ok, detail
        # cross-check against the independent interpreter as well
        a = run_program_model(prog)
        b = run_program_model(hardened)
        assert a.regs[:16] == b.regs[:16]
        assert a.reason == b.reason


def test_transforms_preserve_architecture_on_generated_corpus():
    for seed in range(40):
        prog = assemble(generate(seed))
        for transform in (apply_retpoline, apply_fence_after_call):
            ok, detail = verify_equivalence(prog, transform(prog))
            assert ok, f"seed {seed}: {detail}"


def test_composing_both_passes_still_equivalent():
    prog = assemble(CALL_HEAVY)
    both = apply_retpoline(apply_fence_after_call(prog))
    ok, detail = verify_equivalence(prog, both)
    assert ok, detail


def test_verify_equivalence_detects_divergence():
    a = assemble(".entry main\nmain:\n    mov r1, 1\n    halt\n")
    b = assemble(".entry main\nmain:\n    mov r1, 2\n    halt\n")
    ok, detail = verify_equivalence(a, b)
    assert not ok
    assert "r1" in detail


def test_verify_equivalence_compares_data_regions():
    a = assemble(".entry main\nmain:\n    halt\n.data 0x40000, 7\n")
    b = assemble(".entry main\nmain:\n    halt\n.data 0x40000, 8\n")
    ok, detail = verify_equivalence(a, b)
    assert not ok
    assert "0x40000" in detail


def test_retpoline_returns_predict_only_the_trap():
    prog = apply_retpoline(assemble(CALL_HEAVY))
    traps = {idx for name, idx in prog.labels.items()
             if name.startswith("__rp_trap_")}
    m = Machine(prog, trace=True)
    m.run()
    ret_frames = [ev for ev in m.trace if ev.event == "spec-enter"]
    assert ret_frames, "hardened returns should still open frames"
    assert all(ev.predicted in traps for ev in ret_frames)
    # every trap-directed frame is wrong-path and gets squashed
    assert sum(1 for ev in m.trace if ev.event == "spec-squash") == len(ret_frames)


def test_retpoline_trap_leaves_no_probe_residue():
    """A return whose stack slot was redirected normally speculates into the
    stale return site; with the trampoline the wrong path is the pause/jmp
    trap, which performs no memory access."""
    src = """
.entry main
main:
    mov r1, 0x300000
    call f
    load r2, [r1]
    halt
f:
    mov r3, out
    store [sp], r3
    ret
out:
    halt
"""
    probe_line = 0x300000
    plain = assemble(src)
    m = Machine(plain, core=CoreConfig(min_spec_on_hit=8))
    m.run()
    assert m.caches.present(probe_line) is not None     # transient touch

    rp = apply_retpoline(plain)
    m2 = Machine(rp, core=CoreConfig(min_spec_on_hit=8))
    m2.run()
    assert m2.caches.present(probe_line) is None


def test_fence_after_call_blocks_stale_return_site_leak():
    """With a fence as the return address, the mispredicted return drains
    before the dependent load at the stale site can run."""
    src = """
.entry main
main:
    mov r1, 0x300000
    call f
    load r2, [r1]
    halt
f:
    mov r3, out
    store [sp], r3
    ret
out:
    halt
"""
    probe_line = 0x300000
    plain = assemble(src)
    m = Machine(plain, core=CoreConfig(min_spec_on_hit=8))
    m.run()
    assert m.caches.present(probe_line) is not None

    fenced = apply_fence_after_call(plain)
    m2 = Machine(fenced, core=CoreConfig(min_spec_on_hit=8))
    m2.run()
    assert m2.caches.present(probe_line) is None


def test_hardened_programs_keep_engines_in_agreement():
    for seed in (3, 17, 29):
        prog = apply_retpoline(assemble(generate(seed)))
        seq = run_sequential(prog)
        m = Machine(prog)
        m.run()
        assert [seq.regs[i] for i in range(17)] == [m.regs[i] for i in range(17)]
