"""Binary stepwise and terminal rewards with the budgeted reporting total.

Anchor matching is positional and character-exact on the trimmed
`name: value` line; the terminal reward delegates value equality to the
executor's canonicalization policy. Malformed responses score all-zero: RL
rollouts produce garbage and the reward function must be total.
"""

from __future__ import annotations

from dataclasses import dataclass

from .execution import ExecutionFailed, Executor, TraceParseError, values_equal
from .model import (
    TASK_INPUT,
    ExecutionTrace,
    MalformedResponse,
    TaskInstance,
    Trajectory,
)

MODE_GT_INPUT = "gt_input"
MODE_COMMITTED_INPUT = "committed_input"


@dataclass(frozen=True)
class RewardConfig:
    r_internal_budget: float = 1.0
    r_final: float = 1.0
    anchor_match: str = "exact_trimmed"
    input_task_trace_mode: str = MODE_GT_INPUT

    def __post_init__(self) -> None:
        if self.r_internal_budget < 0 or self.r_final < 0:
            raise ValueError("reward budgets must be >= 0")
        if self.anchor_match != "exact_trimmed":
            raise ValueError(f"unknown anchor_match {self.anchor_match!r}")
        if self.input_task_trace_mode not in (MODE_GT_INPUT, MODE_COMMITTED_INPUT):
            raise ValueError(f"unknown trace mode {self.input_task_trace_mode!r}")


@dataclass(frozen=True)
class RewardVector:
    """Per-anchor binary rewards, the terminal reward, and the budgeted total
    (step fraction times the internal budget, plus the terminal budget)."""

    step: tuple[int, ...]
    final: int
    budgeted_total: float


def _budgeted(step: tuple[int, ...], final: int, cfg: RewardConfig) -> float:
    n = len(step)
    return (sum(step) / max(n, 1)) * cfg.r_internal_budget + final * cfg.r_final


def _zero(n: int, cfg: RewardConfig) -> RewardVector:
    return RewardVector(step=(0,) * n, final=0, budgeted_total=0.0)


def _step_rewards(
    trajectory: Trajectory, trace: ExecutionTrace
) -> tuple[int, ...]:
    predictions = trajectory.predicted_states
    step = []
    for i, (name, value) in enumerate(trace.events):
        expected = f"{name}: {value}"
        hit = i < len(predictions) and predictions[i].strip() == expected
        step.append(1 if hit else 0)
    return tuple(step)


def score(
    trajectory: Trajectory | MalformedResponse,
    trace: ExecutionTrace,
    cfg: RewardConfig = RewardConfig(),
) -> RewardVector:
    """Score an output-prediction trajectory against its ground-truth trace.

    The i-th prediction earns 1 only when it equals the i-th trace line;
    missing or surplus predictions score zero at unmatched positions. The
    terminal reward compares the answer to the trace's final value.
    """
    if isinstance(trajectory, MalformedResponse):
        return _zero(trace.n, cfg)
    step = _step_rewards(trajectory, trace)
    final = 1 if values_equal(trajectory.answer, trace.final_value) else 0
    return RewardVector(step=step, final=final, budgeted_total=_budgeted(step, final, cfg))


def score_input_task(
    trajectory: Trajectory | MalformedResponse,
    instance: TaskInstance,
    cfg: RewardConfig,
    executor: Executor,
) -> RewardVector:
    """Score an input-prediction trajectory.

    The terminal reward checks output-equivalence: executing the program on the
    committed input must reproduce the expected output (the instance condition),
    not necessarily the ground-truth input. Anchor rewards compare against the
    trace of gt_input, or of the committed input when the config says so.
    """
    if instance.task_kind != TASK_INPUT:
        raise ValueError("score_input_task requires an input_prediction instance")

    gt_trace = executor.generate_trace(instance.program, instance.gt_input)
    if isinstance(trajectory, MalformedResponse) or trajectory.committed_input is None:
        return _zero(gt_trace.n, cfg)

    committed = trajectory.committed_input
    committed_trace: ExecutionTrace | None = None
    try:
        committed_trace = executor.generate_trace(instance.program, committed)
    except (ExecutionFailed, TraceParseError):
        committed_trace = None

    if cfg.input_task_trace_mode == MODE_COMMITTED_INPUT:
        if committed_trace is None:
            step: tuple[int, ...] = (0,) * gt_trace.n
        else:
            step = _step_rewards(trajectory, committed_trace)
    else:
        step = _step_rewards(trajectory, gt_trace)

    final = 0
    if committed_trace is not None and values_equal(
        committed_trace.final_value, instance.condition
    ):
        final = 1
    return RewardVector(step=step, final=final, budgeted_total=_budgeted(step, final, cfg))
