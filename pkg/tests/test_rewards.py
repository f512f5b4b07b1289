from __future__ import annotations

import random

import pytest

import refdata
from trace_forge.codec import parse_or_malformed
from trace_forge.execution import fixture_record
from trace_forge.instrument import instrument
from trace_forge.model import (
    Block,
    ExecutionTrace,
    MalformedResponse,
    SourceProgram,
    TaskInstance,
    Trajectory,
)
from trace_forge.rewards import (
    MODE_COMMITTED_INPUT,
    MODE_GT_INPUT,
    RewardConfig,
    score,
    score_input_task,
)


def trajectory_from(predictions: list[str], answer: str) -> Trajectory:
    blocks: list[Block] = []
    for payload in predictions:
        blocks.append(Block("reasoning", ""))
        blocks.append(Block("print", payload))
    blocks.append(Block("reasoning", ""))
    blocks.append(Block("answer", answer))
    return Trajectory(blocks=tuple(blocks))


@pytest.mark.parametrize(
    "case,text",
    [(1, refdata.CASE_1_TEXT), (2, refdata.CASE_2_TEXT), (3, refdata.CASE_3_TEXT)],
)
def test_reference_cases(case, text, ref_trace):
    vector = score(parse_or_malformed(text, "output_prediction"), ref_trace)
    assert vector.step == refdata.CASE_STEP_FLAGS[case]
    assert vector.final == refdata.CASE_FINAL_FLAGS[case]
    assert vector.budgeted_total == pytest.approx(refdata.CASE_EXACT_TOTALS[case])
    # 1.5 vs 1.48 sits exactly on the 0.02 bound; allow float representation slack.
    assert abs(vector.budgeted_total - refdata.CASE_DISPLAYED_TOTALS[case]) <= 0.02 + 1e-12


def test_empty_trajectory_scores_zero():
    trace = ExecutionTrace(events=(("a", "1"), ("b", "2"), ("c", "3")), final_value="9")
    vector = score(trajectory_from([], "7"), trace)
    assert vector.step == (0, 0, 0)
    assert vector.final == 0
    assert vector.budgeted_total == 0.0


def test_malformed_scores_zero(ref_trace):
    vector = score(MalformedResponse(reason="bad"), ref_trace)
    assert vector.step == (0,) * 6
    assert vector.final == 0
    assert vector.budgeted_total == 0.0


def test_surplus_predictions_earn_nothing():
    trace = ExecutionTrace(events=(("a", "1"),), final_value="1")
    vector = score(trajectory_from(["a: 1", "b: 2", "c: 3"], "1"), trace)
    assert vector.step == (1,)
    assert vector.budgeted_total == pytest.approx(2.0)


def test_anchor_match_is_character_exact():
    trace = ExecutionTrace(events=(("last_dependency", "Xsdlqjcj"),), final_value="'x'")
    wrong = score(trajectory_from(["last_dependency: XsdlqjcJ"], "'x'"), trace)
    right = score(trajectory_from(["last_dependency: Xsdlqjcj"], "'x'"), trace)
    assert wrong.step == (0,)
    assert right.step == (1,)


def test_prediction_whitespace_trimmed():
    trace = ExecutionTrace(events=(("a", "1"),), final_value="1")
    vector = score(trajectory_from(["  a: 1  "], "1"), trace)
    assert vector.step == (1,)


def test_monotonic_budget_split():
    rng = random.Random(0)
    cfg = RewardConfig()
    for _ in range(30):
        n = rng.randint(1, 9)
        events = tuple((f"v{i}", str(i)) for i in range(n))
        trace = ExecutionTrace(events=events, final_value="0")
        correct = [f"v{i}: {i}" for i in range(n)]
        flip = rng.randrange(n)
        broken = list(correct)
        broken[flip] = "wrong: x"
        low = score(trajectory_from(broken, "0"), trace, cfg)
        high = score(trajectory_from(correct, "0"), trace, cfg)
        assert high.budgeted_total - low.budgeted_total == pytest.approx(
            cfg.r_internal_budget / n
        )
        assert 0.0 <= low.budgeted_total <= cfg.r_internal_budget + cfg.r_final


def test_positional_strictness():
    events = (("a", "1"), ("b", "2"))
    trace = ExecutionTrace(events=events, final_value="0")
    straight = score(trajectory_from(["a: 1", "b: 2"], "0"), trace)
    permuted = score(trajectory_from(["b: 2", "a: 1"], "0"), trace)
    assert sum(permuted.step) <= sum(straight.step)
    assert permuted.step == (0, 0)


def test_budget_config_scales_total(ref_trace):
    cfg = RewardConfig(r_internal_budget=2.0, r_final=3.0)
    vector = score(parse_or_malformed(refdata.CASE_2_TEXT, "output_prediction"), ref_trace, cfg)
    assert vector.budgeted_total == pytest.approx(0.5 * 2.0 + 3.0)


# --- input-prediction tasks ---------------------------------------------------

# abs() makes output prediction many-to-one: -3 and 3 share the output 3.
PREIMAGE_SOURCE = "def f(x):\n    y = abs(x)\n    return y\n"


def _preimage_setup(fixture_executor_factory):
    program = SourceProgram(id="pre1", entry_name="f", source_text=PREIMAGE_SOURCE)
    instrumented = instrument(program)
    records = [
        fixture_record(
            instrumented.source_text,
            "(3,)",
            events=(("y", "3"), ("return_val", "3")),
            final_value="3",
            origin_id="pre1",
        ),
        fixture_record(
            instrumented.source_text,
            "(-3,)",
            events=(("y", "3"), ("return_val", "3")),
            final_value="3",
            origin_id="pre1",
        ),
    ]
    executor = fixture_executor_factory(records)
    instance = TaskInstance(
        program=instrumented,
        task_kind="input_prediction",
        condition="3",
        target="(3,)",
        gt_input="(3,)",
    )
    return instance, executor


def input_trajectory(committed: str, predictions: list[str], answer: str) -> Trajectory:
    blocks = [Block("reasoning", ""), Block("input", committed)]
    for payload in predictions:
        blocks.append(Block("reasoning", ""))
        blocks.append(Block("print", payload))
    blocks.append(Block("reasoning", ""))
    blocks.append(Block("answer", answer))
    return Trajectory(blocks=tuple(blocks))


def test_input_task_self_consistency(fixture_executor_factory):
    instance, executor = _preimage_setup(fixture_executor_factory)
    t = input_trajectory("(3,)", ["y: 3", "return_val: 3"], "(3,)")
    vector = score_input_task(t, instance, RewardConfig(), executor)
    assert vector.step == (1, 1)
    assert vector.final == 1
    assert vector.budgeted_total == pytest.approx(2.0)


def test_input_task_alternate_preimage(fixture_executor_factory):
    instance, executor = _preimage_setup(fixture_executor_factory)
    t = input_trajectory("(-3,)", ["y: 3", "return_val: 3"], "(-3,)")
    for mode in (MODE_GT_INPUT, MODE_COMMITTED_INPUT):
        vector = score_input_task(
            t, instance, RewardConfig(input_task_trace_mode=mode), executor
        )
        assert vector.final == 1  # output-equivalent input
        assert vector.step == (1, 1)  # abs(-3) trace equals the gt trace here


def test_input_task_missing_commit_scores_zero(fixture_executor_factory):
    instance, executor = _preimage_setup(fixture_executor_factory)
    t = trajectory_from(["y: 3"], "(3,)")  # no <input> block
    vector = score_input_task(t, instance, RewardConfig(), executor)
    assert vector.step == (0, 0)
    assert vector.final == 0


def test_input_task_invalid_commit(fixture_executor_factory):
    instance, executor = _preimage_setup(fixture_executor_factory)
    # Unknown input literal: execution fails, terminal reward is zero; anchors
    # still compare against the gt trace in the default mode.
    t = input_trajectory("(oops!,)", ["y: ?", "return_val: ?"], "(9,)")
    vector = score_input_task(t, instance, RewardConfig(), executor)
    assert vector.final == 0
    assert vector.step == (0, 0)
    assert vector.budgeted_total == 0.0


def test_input_task_committed_mode_uses_committed_trace(fixture_executor_factory):
    program = SourceProgram(id="pre2", entry_name="f", source_text=PREIMAGE_SOURCE)
    instrumented = instrument(program)
    records = [
        fixture_record(
            instrumented.source_text,
            "(3,)",
            events=(("y", "3"), ("return_val", "3")),
            final_value="3",
            origin_id="pre2",
        ),
        fixture_record(
            instrumented.source_text,
            "(-4,)",
            events=(("y", "4"), ("return_val", "4")),
            final_value="4",
            origin_id="pre2",
        ),
    ]
    executor = fixture_executor_factory(records)
    instance = TaskInstance(
        program=instrumented,
        task_kind="input_prediction",
        condition="3",
        target="(3,)",
        gt_input="(3,)",
    )
    t = input_trajectory("(-4,)", ["y: 4", "return_val: 4"], "(-4,)")
    committed_mode = score_input_task(
        t, instance, RewardConfig(input_task_trace_mode=MODE_COMMITTED_INPUT), executor
    )
    gt_mode = score_input_task(
        t, instance, RewardConfig(input_task_trace_mode=MODE_GT_INPUT), executor
    )
    assert committed_mode.step == (1, 1)  # consistent with its own committed run
    assert gt_mode.step == (0, 0)  # inconsistent with the gt trace
    assert committed_mode.final == 0 and gt_mode.final == 0  # abs(-4) != 3


def test_input_task_rejects_output_instances(ref_executor, ref_instrumented):
    instance = TaskInstance(
        program=ref_instrumented,
        task_kind="output_prediction",
        condition=refdata.INPUT_LITERAL,
        target=refdata.FINAL_VALUE,
        gt_input=refdata.INPUT_LITERAL,
    )
    with pytest.raises(ValueError):
        score_input_task(trajectory_from([], "x"), instance, RewardConfig(), ref_executor)
