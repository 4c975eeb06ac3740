"""End-to-end demonstrations: misprediction triggers, the cross-process
keystroke monitor, the in-process sandboxed read, and their mitigations."""

import pytest
from hypothesis import given, strategies as st

from rsbsim.predictor import RsbVariant
from rsbsim.scenarios import (
    ScenarioError, levenshtein, recovery_precision,
)
from rsbsim.scenarios.cross_process import PANGRAM, run_cross_process
from rsbsim.scenarios.in_process import NOISE_PRESET, run_in_process
from rsbsim.scenarios.triggers import (
    run_context_switch, run_deep_chain, run_return_overwrite,
    run_stack_switch,
)

from oracles import edit_distance_model

# ---------------------------------------------------------------- scoring


def test_levenshtein_basics():
    assert levenshtein("", "") == 0
    assert levenshtein("abc", "abc") == 0
    assert levenshtein("abc", "abd") == 1
    assert levenshtein("abc", "") == 3
    assert levenshtein("kitten", "sitting") == 3


@given(st.text(alphabet="abcd", max_size=12),
       st.text(alphabet="abcd", max_size=12))
def test_levenshtein_matches_recursive_model(a, b):
    assert levenshtein(a, b) == edit_distance_model(a, b)


def test_recovery_precision_scoring():
    assert recovery_precision("", "") == 1.0
    assert recovery_precision("abcd", "abcd") == 1.0
    assert recovery_precision("abcd", "abcx") == 0.75
    assert recovery_precision("abcd", "") == 0.0
    assert recovery_precision("ab", "zzzzzzzz") == 0.0   # clamped


# ---------------------------------------------------------------- triggers


def test_deep_chain_wraps_four_levels_up():
    report = run_deep_chain()         # 4-entry ring, 9-deep chain
    rows = report.details["returns"]
    assert len(rows) == 9
    assert all(r["correct"] for r in rows[:4])
    assert not any(r["correct"] for r in rows[4:])
    # the wrapped ring serves the entry left four calls further down:
    # returning in f4 is predicted into f7 instead of f3
    assert rows[4] == {"ret_in": "f4", "predicted": "f7",
                       "actual": "f3", "correct": False}
    assert [(r["predicted"], r["actual"]) for r in rows[5:]] == [
        ("f6", "f2"), ("f5", "f1"), ("f4", "f0"), ("f7", "main")]
    assert report.ok
    assert report.precision == pytest.approx(4 / 9)


def test_deep_chain_stop_variant_stalls_instead():
    report = run_deep_chain(variant=RsbVariant.STOP_ON_UNDERFLOW)
    rows = report.details["returns"]
    assert len(rows) == 9
    assert all(r["correct"] for r in rows[:4])
    assert all(r["predicted"] == "(stall)" for r in rows[4:])
    assert report.ok


def test_deep_chain_btb_variant_stalls_on_cold_sites():
    # every return site executes once, so the fallback has nothing trained
    report = run_deep_chain(variant=RsbVariant.BTB_FALLBACK)
    rows = report.details["returns"]
    assert all(r["predicted"] == "(stall)" for r in rows[4:])
    assert report.ok


def test_deep_chain_bigger_buffer_predicts_everything():
    report = run_deep_chain(rsb_size=16)
    rows = report.details["returns"]
    assert all(r["correct"] for r in rows)
    assert report.ok


def test_context_switch_first_returns_go_to_kernel():
    report = run_context_switch()
    rows = report.details["returns"]
    assert len(rows) == 6
    assert all(r["predicted"].startswith("kernel") for r in rows[:3])
    assert not any(r["correct"] for r in rows[:3])
    assert all(r["correct"] for r in rows[3:])
    assert report.details["switches"] >= 2
    assert report.ok


def test_context_switch_clobber_depth_is_configurable():
    report = run_context_switch(kernel_rsb_pushes=5)
    rows = report.details["returns"]
    kernel = [r for r in rows if r["predicted"].startswith("kernel")]
    assert len(kernel) == 5
    assert report.ok


def test_stack_switch_returns_follow_abandoned_frames():
    report = run_stack_switch()
    rows = report.details["returns"]
    assert len(rows) == 3
    assert not any(r["correct"] for r in rows)
    assert [r["predicted"] for r in rows] == ["fE", "fD", "fC_catch"]
    assert report.ok


def test_return_overwrite_prediction_follows_the_buffer():
    report = run_return_overwrite()
    rows = report.details["returns"]
    assert rows and not rows[0]["correct"]
    assert rows[0]["predicted"] == "back"
    assert rows[0]["actual"] == "elsewhere"
    assert report.details["architectural_target_reached"]
    assert report.ok


def test_triggers_are_deterministic():
    for runner in (run_deep_chain, run_context_switch,
                   run_stack_switch, run_return_overwrite):
        assert str(runner()) == str(runner())


# ---------------------------------------------------------------- in-process


def test_in_process_reads_its_secret_exactly():
    report = run_in_process(secret="Hi there", engine="reference")
    assert report.recovered == "Hi there"
    assert report.precision == 1.0
    assert report.details["byte_accuracy"] == 1.0
    assert report.details["sandbox_enforced"]
    assert report.ok


def test_in_process_indirect_mode_reaches_outside_the_sandbox():
    report = run_in_process(secret="Q", mode="indirect", engine="reference")
    assert report.recovered == "Q"
    assert report.precision == 1.0
    assert report.ok


def test_in_process_retpoline_suppresses_the_leak():
    report = run_in_process(secret="Hi", retpoline=True, engine="reference")
    assert report.details["byte_accuracy"] == 0.0
    assert report.ok           # the mitigation meeting its goal counts as ok


def test_in_process_fence_suppresses_the_leak():
    report = run_in_process(secret="Hi", fence_after_call=True,
                            engine="reference")
    assert report.details["byte_accuracy"] == 0.0
    assert report.ok


def test_in_process_stop_variant_cannot_leak():
    report = run_in_process(secret="Hi",
                            variant=RsbVariant.STOP_ON_UNDERFLOW,
                            engine="reference")
    assert report.details["byte_accuracy"] == 0.0
    assert report.ok


def test_in_process_noise_needs_votes():
    # accuracy climbs with the trial count as the latency averages converge
    few = run_in_process(secret="x" * 32, flip_prob=NOISE_PRESET,
                         trials=7, seed=3)
    many = run_in_process(secret="x" * 32, flip_prob=NOISE_PRESET,
                          trials=100, seed=3)
    assert many.details["byte_accuracy"] > few.details["byte_accuracy"]
    assert many.details["byte_accuracy"] >= 0.8
    # below the calibrated shape there is no sharp contract, only a note
    assert few.ok
    assert any("no sharp accuracy contract" in n for n in few.notes)


def test_in_process_rejects_bad_parameters():
    with pytest.raises(ScenarioError, match="mode"):
        run_in_process(secret="x", mode="sideways")
    with pytest.raises(ScenarioError, match="engine"):
        run_in_process(secret="x", engine="warp")
    with pytest.raises(ScenarioError, match="nbytes"):
        run_in_process(secret="x", nbytes=5)
    with pytest.raises(ScenarioError, match="1024"):
        run_in_process(secret=b"\x00" * 2000)


def test_in_process_determinism_per_seed():
    a = run_in_process(secret="abcdefgh", flip_prob=0.2, trials=9, seed=11)
    b = run_in_process(secret="abcdefgh", flip_prob=0.2, trials=9, seed=11)
    assert a.recovered == b.recovered
    assert str(a) == str(b)


# ---------------------------------------------------------------- cross-process


def test_cross_process_recovers_short_text():
    report = run_cross_process(engine="reference", text="hello")
    assert report.recovered == "hello"
    assert report.precision == 1.0
    assert report.details["keystrokes"] == 5
    assert report.ok


def test_cross_process_flush_mitigation_closes_the_channel():
    report = run_cross_process(engine="reference", text="hello",
                               flush_rsb_on_switch=True)
    assert report.precision <= 0.05
    assert report.ok


def test_cross_process_retpoline_closes_the_channel():
    report = run_cross_process(engine="reference", text="hi",
                               retpoline=True)
    assert report.precision <= 0.05
    assert report.ok


def test_cross_process_leaks_under_every_buffer_variant():
    # the poisoned entries are planted by the attacker's own calls, so the
    # underflow policy never comes into play - no variant closes this one
    for variant in RsbVariant:
        report = run_cross_process(engine="reference", text="hi",
                                   rsb_variant=variant)
        assert report.precision == 1.0, variant
        assert report.ok


def test_cross_process_jitter_is_deterministic_per_seed():
    a = run_cross_process(engine="reference", text="hey", jitter=0.3, seed=5)
    b = run_cross_process(engine="reference", text="hey", jitter=0.3, seed=5)
    assert a.recovered == b.recovered
    assert a.details == b.details


def test_cross_process_rejects_unknown_engine():
    with pytest.raises(ScenarioError, match="engine"):
        run_cross_process(engine="warp", text="x")


def test_pangram_constant():
    assert PANGRAM == "The quick brown fox jumps over the lazy dog"
