"""Speculative core: architectural equivalence against the big-step model,
rollback correctness, and the microarchitectural side effects that survive
a squash."""

import pytest

from oracles import ModelFault, memory_matches, run_program_model
from rsbsim.core import (
    CoreConfig, ExecutionError, Machine, run_sequential,
)
from rsbsim.isa import SP, assemble
from rsbsim.predictor import RsbVariant
from rsbsim.sidechannel import calibrate_threshold


def check_against_model(source: str, *, machine: Machine | None = None,
                        **machine_kwargs) -> Machine:
    """Run source on the speculative machine, the sequential engine and the
    independent model; all three must agree on registers, memory and the
    stop reason."""
    program = assemble(source)
    model = run_program_model(program)
    m = machine or Machine(program, **machine_kwargs)
    result = m.run(max_steps=1_000_000)
    assert result.reason == model.reason
    assert list(m.regs.regs) == model.regs
    assert memory_matches(model.mem, m.mem)

    seq = run_sequential(program)
    assert seq.reason == model.reason
    assert list(seq.regs.regs) == model.regs
    assert memory_matches(model.mem, seq.mem)
    return m


# --------------------------------------------------------------------------
# architectural semantics

def test_arithmetic_wraps_like_the_model():
    check_against_model("""
.entry main
main:
    mov r0, -1
    add r0, 2
    mov r1, 1
    shl r1, 63
    add r1, r1
    sub r2, 5
    and r3, r0
    mov r4, 0x1234
    and r4, 0xf0
    halt
""")


def test_memory_is_little_endian_and_unaligned_ok():
    check_against_model("""
.entry main
main:
    mov r9, 0x40000
    mov r0, 0x1122334455667788
    store [r9], r0
    load r1, [r9 + 3]
    store [r9 + 4093], r1
    load r2, [r9 + 4093]
    store [r9 + 16], 700
    load r3, [r9 + 16]
    halt
""")


def test_calls_branches_and_data_directive():
    check_against_model("""
.entry main
.data 0x41000, 7, 0, 0, 0, 0, 0, 0, 0
main:
    mov r9, 0x41000
    load r5, [r9]
    call double
    call double
    beq r5, 28, good
    mov r6, 111
    halt
good:
    mov r6, 222
    halt
double:
    add r5, r5
    ret
""")


def test_shl_by_register_masks_count():
    check_against_model("""
.entry main
main:
    mov r0, 1
    mov r1, 65
    shl r0, r1
    mov r2, 1
    mov r3, 64
    shl r2, r3
    halt
""")


def test_indirect_call_through_register():
    check_against_model("""
.entry main
main:
    mov r9, callee
    call r9
    halt
callee:
    mov r4, 99
    ret
""")


def test_exit_via_syscall():
    m = check_against_model("""
.entry main
main:
    mov r0, 1
    syscall 2
""")
    assert m.halted


def test_steps_match_model_when_nothing_speculates():
    source = """
.entry main
main:
    mov r0, 3
loop:
    sub r0, 1
    bne r0, 0, loop
    halt
"""
    program = assemble(source)
    model = run_program_model(program)
    result = Machine(program).run()
    assert result.steps == model.steps == 8


# --------------------------------------------------------------------------
# faults

def test_invalid_pc_fault():
    program = assemble(".entry m\nm:\n    jmp 99\n    halt\n")
    with pytest.raises(ExecutionError) as err:
        Machine(program).run()
    assert err.value.kind == "invalid-pc"
    with pytest.raises(ModelFault) as merr:
        run_program_model(program)
    assert merr.value.kind == "invalid-pc"


def test_stack_underflow_fault():
    program = assemble(".entry m\nm:\n    ret\n")
    with pytest.raises(ExecutionError) as err:
        Machine(program).run()
    assert err.value.kind == "stack-underflow"
    with pytest.raises(ModelFault) as merr:
        run_program_model(program)
    assert merr.value.kind == "stack-underflow"


def test_unhandled_syscall_fault():
    program = assemble(".entry m\nm:\n    syscall 7\n")
    with pytest.raises(ExecutionError) as err:
        Machine(program).run()
    assert err.value.kind == "bad-syscall"


def test_budget_reasons():
    program = assemble(".entry m\nm:\n    jmp m\n")
    assert Machine(program).run(max_steps=10).reason == "steps"
    assert Machine(program).run(max_cycles=10).reason == "cycles"
    with pytest.raises(ExecutionError) as err:
        run_sequential(program, max_steps=10)
    assert err.value.kind == "budget-exhausted"


# --------------------------------------------------------------------------
# speculation: rollback and residue

# A call whose return address is overwritten: the return is predicted to
# 'site' (the stale stack entry) but architecturally goes to 'out', so
# everything between 'site' and the resolve point runs transiently.
WRONG_PATH = """
.entry main
main:
    mov r9, 0x50000
    call f
site:
{body}
out:
    halt
f:
    store [sp], out
    ret
"""


def run_wrong_path(body: str, *, core: CoreConfig | None = None) -> Machine:
    program = assemble(WRONG_PATH.format(body=body))
    m = Machine(program, core=core, trace=True)
    m.run(max_steps=10_000)
    return m


def test_squash_restores_registers_and_memory():
    body = """
    mov r1, 777
    store [r9 + 0x100], 42
    pause
    pause
"""
    m = run_wrong_path(body, core=CoreConfig(min_spec_on_hit=8))
    assert m.regs[1] == 0                       # transient write rolled back
    assert m.mem.read_word(0x50100) == 0        # store never became visible
    events = [ev.event for ev in m.trace]
    assert "spec-enter" in events and "spec-squash" in events


def test_wrong_path_load_leaves_cache_residue():
    body = """
    load r2, [r9 + 0x3000]
    pause
    pause
    pause
"""
    m = run_wrong_path(body, core=CoreConfig(min_spec_on_hit=8))
    assert m.regs[2] == 0                       # value rolled back
    assert m.caches.present(0x53000) is not None    # the footprint stayed
    lat = m.caches.access(0x53000)
    assert lat < calibrate_threshold(m.caches.cfg)


def test_min_spec_on_hit_bounds_the_transient_window():
    # the stack line is L1-hot (the call just wrote it), so the return
    # resolves fast; a small window means the 4th wrong-path instruction
    # never issues, a large one lets it through
    body = """
    pause
    pause
    pause
    load r2, [r9 + 0x3000]
"""
    short = run_wrong_path(body, core=CoreConfig(min_spec_on_hit=2))
    assert short.caches.present(0x53000) is None
    long = run_wrong_path(body, core=CoreConfig(min_spec_on_hit=11))
    assert long.caches.present(0x53000) is not None


def test_fence_stops_transient_execution():
    body = """
    load r2, [r9 + 0x1000]
    fence
    load r3, [r9 + 0x3000]
    pause
"""
    m = run_wrong_path(body, core=CoreConfig(min_spec_on_hit=11))
    assert m.caches.present(0x51000) is not None    # before the fence: ran
    assert m.caches.present(0x53000) is None        # after the fence: never
    assert m.regs[2] == 0 and m.regs[3] == 0


def test_transient_store_forwards_to_transient_load():
    # the wrong path writes a value, reads it back through the store
    # buffer, and uses it to pick a probe line; the surviving cache line
    # proves the forwarding happened while memory itself stayed clean
    body = """
    store [r9 + 0x100], 3
    load r2, [r9 + 0x100]
    shl r2, 12
    load r3, [r9 + r2]
    pause
    pause
    pause
"""
    m = run_wrong_path(body, core=CoreConfig(min_spec_on_hit=12))
    assert m.mem.read_word(0x50100) == 0
    assert m.caches.present(0x50000 + 3 * 4096) is not None
    assert m.caches.present(0x50000 + 1 * 4096) is None


def test_sandbox_range_checks_skip_transient_accesses():
    # architectural accesses outside the allowed windows fault; transient
    # ones sail through and leave their cache footprint - the bypass the
    # in-process read depends on
    program = assemble(WRONG_PATH.format(body="""
    load r2, [r9 + 0x70000]
    pause
    pause
    pause
"""))
    m = Machine(program, core=CoreConfig(min_spec_on_hit=8))
    m.addr_ranges = [(0x50000, 0x60000), (0xE00000, 0xF00000)]
    m.run(max_steps=10_000)
    assert m.caches.present(0xC0000) is not None

    direct = assemble("""
.entry main
main:
    mov r9, 0x50000
    load r2, [r9 + 0x70000]
    halt
""")
    m2 = Machine(direct)
    m2.addr_ranges = [(0x50000, 0x60000)]
    with pytest.raises(ExecutionError) as err:
        m2.run()
    assert err.value.kind == "unmapped"


def test_misprediction_chain_reaches_depth_three():
    source = """
.entry main
main:
    call a
    halt
a:
    call b
    ret
b:
    call c
    ret
c:
    store [sp], x
    ret
x:
    mov r7, 1
    jmp fin
fin:
    halt
"""
    program = assemble(source)
    m = Machine(program, trace=True)
    m.run(max_steps=10_000)
    depths = {ev.depth for ev in m.trace if ev.event == "spec-enter"}
    assert {1, 2, 3} <= depths
    assert m.regs[7] == 1

    capped = Machine(program, core=CoreConfig(max_spec_depth=1), trace=True)
    capped.run(max_steps=10_000)
    capped_depths = {ev.depth for ev in capped.trace
                     if ev.event == "spec-enter"}
    assert capped_depths == {1}
    assert capped.regs[7] == 1                  # semantics unaffected


def test_runaway_transient_loop_still_resolves():
    # the wrong path lands in an infinite loop; the per-nest instruction
    # cap forces resolution, so the architectural run finishes
    body = """
spin:
    jmp spin
"""
    m = run_wrong_path(body, core=CoreConfig(min_spec_on_hit=64))
    assert not m.frames


def test_btb_trains_after_prediction_not_before():
    # same return executed twice with an empty RSB: the fallback variant
    # must stall the first time (nothing trained yet) and predict
    # correctly the second time
    source = """
.entry main
main:
    mov r5, 0
loop:
    sub sp, 8
    store [sp], back
    ret
back:
    add r5, 1
    bne r5, 2, loop
    halt
"""
    program = assemble(source)
    m = Machine(program, rsb_variant=RsbVariant.BTB_FALLBACK, trace=True)
    m.run(max_steps=10_000)
    ret_events = [ev for ev in m.trace if ev.event in ("stall", "spec-enter")]
    assert [ev.event for ev in ret_events] == ["stall", "spec-enter"]
    assert ret_events[1].predicted == ret_events[1].actual


def test_stop_variant_always_stalls_on_underflow():
    source = """
.entry main
main:
    mov r5, 0
loop:
    sub sp, 8
    store [sp], back
    ret
back:
    add r5, 1
    bne r5, 2, loop
    halt
"""
    m = Machine(assemble(source), rsb_variant=RsbVariant.STOP_ON_UNDERFLOW,
                trace=True)
    m.run(max_steps=10_000)
    ret_events = [ev for ev in m.trace if ev.event in ("stall", "spec-enter")]
    assert [ev.event for ev in ret_events] == ["stall", "stall"]


def test_rdtsc_times_cache_hits_and_misses():
    source = """
.entry main
main:
    mov r9, 0x40000
    rdtsc r0
    load r1, [r9]
    rdtsc r2
    load r3, [r9]
    rdtsc r4
    clflush [r9]
    load r5, [r9]
    rdtsc r6
    halt
"""
    m = Machine(assemble(source))
    m.run()
    cfg = m.caches.cfg
    threshold = calibrate_threshold(cfg)
    cold = m.regs[2] - m.regs[0]
    warm = m.regs[4] - m.regs[2]
    flushed = m.regs[6] - m.regs[4]
    assert cold > threshold
    assert warm < threshold
    assert flushed > threshold
    assert m.regs[0] < m.regs[2] < m.regs[4] < m.regs[6]


def test_reset_keeps_microarchitectural_state():
    program = assemble("""
.entry main
main:
    mov r9, 0x40000
    load r1, [r9]
    halt
""")
    m = Machine(program)
    m.run()
    assert m.caches.present(0x40000) is not None
    m.reset()
    assert m.regs[1] == 0 and m.pc == 0 and not m.halted
    assert m.regs[SP] == m.stack_top
    assert m.caches.present(0x40000) is not None    # caches survive reset
    second = m.run()
    assert second.reason == "halt"


def test_deterministic_replay():
    source = """
.entry main
main:
    call f
    halt
f:
    store [sp], g
    ret
g:
    halt
"""
    runs = []
    for _ in range(2):
        m = Machine(assemble(source), trace=True)
        res = m.run()
        runs.append((res, list(m.regs.regs), [tuple(ev.__dict__.values())
                                              for ev in m.trace]))
    assert runs[0] == runs[1]
