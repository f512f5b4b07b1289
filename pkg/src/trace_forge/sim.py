"""Desk-scale optimization testbed for the bi-level objective.

A tabular softmax policy predicts one of `vocab` candidate states at each of n
anchors in a synthetic environment; a prediction is correct when it matches the
environment's correct path. The policy conditions on (anchor index, number of
correct predictions so far): the smallest state that lets intra-trajectory
credit matter. Three training modes share one loop:

  terminal   - only the terminal surrogate;
  step_group - stepwise surrogate with group-relative advantages (lambda = 0);
  bilevel    - stepwise surrogate with group + lambda * intra advantages.

All modes add exact KL to the frozen reference policy, computed in closed form
by weighting per-state KL with the policy's state-occupancy (the objective's
written form adds it unweighted; `kl_coeff` scales it, default 0.05, because a
unit coefficient pins the tabular policy to its uniform reference long before
the environment is solved; set kl_coeff=1.0 for the literal objective).

Trajectories here have a fixed anchor count, so the reported
`mean_traj_length` is the expected error-free prefix length (mean correct
streak), the closest evolving analogue of response length.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .advantage import (
    DEFAULT_EPSILON,
    AdvantageMatrix,
    GroupRewards,
    NonFinite,
    final_advantage,
    group_advantage,
    intra_advantage,
    combine,
    surrogate_losses,
)

METHOD_TERMINAL = "terminal"
METHOD_STEP_GROUP = "step_group"
METHOD_BILEVEL = "bilevel"
METHODS = (METHOD_TERMINAL, METHOD_STEP_GROUP, METHOD_BILEVEL)

DEFAULT_LEARNING_RATE = 0.05
DEFAULT_KL_COEFF = 0.05
DEFAULT_GROUP_SIZE = 5
DEFAULT_SEEDS = (1, 2, 3)


@dataclass(frozen=True)
class SyntheticEnv:
    n_anchors: int
    vocab: int
    correct_path: tuple[int, ...]
    answer_depends_on_trace: bool = True

    def __post_init__(self) -> None:
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if len(self.correct_path) != self.n_anchors:
            raise ValueError("correct_path length must equal n_anchors")
        if any(not 0 <= c < self.vocab for c in self.correct_path):
            raise ValueError("correct_path entries must be valid choices")

    @staticmethod
    def hard(seed: int = 0) -> "SyntheticEnv":
        """The default hard benchmark: vocab 8, six anchors, trace-dependent answer."""
        rng = np.random.default_rng(seed)
        return SyntheticEnv(
            n_anchors=6,
            vocab=8,
            correct_path=tuple(int(c) for c in rng.integers(0, 8, size=6)),
            answer_depends_on_trace=True,
        )


@dataclass
class TabularPolicy:
    """Softmax policy over (anchor index, prefix-correct count) states."""

    logits: np.ndarray  # (n, n, vocab); row [i, c] used for c <= i
    reference_logits: np.ndarray

    @staticmethod
    def uniform(env: SyntheticEnv) -> "TabularPolicy":
        shape = (env.n_anchors, max(env.n_anchors, 1), env.vocab)
        return TabularPolicy(logits=np.zeros(shape), reference_logits=np.zeros(shape))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


@dataclass
class RolloutBatch:
    rewards: GroupRewards
    logp_theta: np.ndarray  # (G, n) under the sampling policy
    logp_ref: np.ndarray
    states: np.ndarray  # (G, n) prefix-correct counts
    actions: np.ndarray  # (G, n) sampled choices


def rollout(
    policy: TabularPolicy,
    env: SyntheticEnv,
    G: int,
    seed: int | Sequence[int],
) -> RolloutBatch:
    """Sample G independent trajectories. Stepwise reward is 1 when the chosen
    state matches the correct path; the terminal reward needs the whole trace
    correct when the answer depends on it, else just the final step."""
    if G < 2:
        raise ValueError("group size must be >= 2")
    rng = np.random.default_rng(seed)
    n, V = env.n_anchors, env.vocab
    logp = _log_softmax(policy.logits)
    logp_ref = _log_softmax(policy.reference_logits)
    probs = np.exp(logp)

    step = np.zeros((G, n))
    lp_theta = np.zeros((G, n))
    lp_ref = np.zeros((G, n))
    states = np.zeros((G, n), dtype=int)
    actions = np.zeros((G, n), dtype=int)
    final = np.zeros(G)
    for g in range(G):
        correct_so_far = 0
        for i in range(n):
            states[g, i] = correct_so_far
            row = probs[i, correct_so_far]
            a = int(rng.choice(V, p=row / row.sum()))
            actions[g, i] = a
            lp_theta[g, i] = logp[i, correct_so_far, a]
            lp_ref[g, i] = logp_ref[i, correct_so_far, a]
            hit = a == env.correct_path[i]
            step[g, i] = 1.0 if hit else 0.0
            correct_so_far += int(hit)
        if env.answer_depends_on_trace:
            final[g] = 1.0 if correct_so_far == n else 0.0
        else:
            final[g] = step[g, -1]
    return RolloutBatch(
        rewards=GroupRewards(step=step, final=final),
        logp_theta=lp_theta,
        logp_ref=lp_ref,
        states=states,
        actions=actions,
    )


# --- exact policy statistics -------------------------------------------------


def _occupancy(probs: np.ndarray, env: SyntheticEnv) -> np.ndarray:
    """d[i, c] = P(prefix-correct count == c just before anchor i); row n is the
    distribution after the final anchor."""
    n = env.n_anchors
    d = np.zeros((n + 1, n + 1))
    d[0, 0] = 1.0
    for i in range(n):
        for c in range(i + 1):
            mass = d[i, c]
            if mass == 0.0:
                continue
            p_correct = probs[i, c, env.correct_path[i]]
            d[i + 1, c + 1] += mass * p_correct
            d[i + 1, c] += mass * (1.0 - p_correct)
    return d


def policy_metrics(policy: TabularPolicy, env: SyntheticEnv) -> dict[str, float]:
    """Exact expected final reward, per-anchor accuracy, and mean correct streak."""
    probs = _softmax(policy.logits)
    n = env.n_anchors
    d = _occupancy(probs, env)
    step_acc = 0.0
    for i in range(n):
        for c in range(i + 1):
            step_acc += d[i, c] * probs[i, c, env.correct_path[i]]
    step_acc /= n
    if env.answer_depends_on_trace:
        expected_final = d[n, n]
    else:
        expected_final = sum(
            d[n - 1, c] * probs[n - 1, c, env.correct_path[n - 1]] for c in range(n)
        )
    streak = sum(d[i, i] for i in range(1, n + 1))
    return {
        "expected_final_reward": float(expected_final),
        "stepwise_accuracy": float(step_acc),
        "mean_traj_length": float(streak),
    }


def exact_kl(logits: np.ndarray, reference_logits: np.ndarray, env: SyntheticEnv) -> float:
    """KL between the trajectory distributions of the policy and the reference:
    occupancy-weighted sum of per-state KLs."""
    probs = _softmax(logits)
    t = _log_softmax(logits) - _log_softmax(reference_logits)
    d = _occupancy(probs, env)
    total = 0.0
    for i in range(env.n_anchors):
        for c in range(i + 1):
            if d[i, c] > 0.0:
                total += d[i, c] * float((probs[i, c] * t[i, c]).sum())
    return total


# --- loss and analytic gradient ----------------------------------------------


def _method_advantages(
    batch: RolloutBatch, method: str, lam: float, epsilon: float
) -> AdvantageMatrix:
    rewards = batch.rewards
    final = final_advantage(rewards.final, epsilon)
    if method == METHOD_TERMINAL:
        zeros = np.zeros_like(rewards.step)
        return AdvantageMatrix(
            group=zeros, intra=zeros, combined=zeros, final=final, lam=0.0, epsilon=epsilon
        )
    effective_lam = 0.0 if method == METHOD_STEP_GROUP else lam
    group = group_advantage(rewards, epsilon)
    intra = intra_advantage(rewards)
    return AdvantageMatrix(
        group=group,
        intra=intra,
        combined=combine(group, intra, effective_lam),
        final=final,
        lam=effective_lam,
        epsilon=epsilon,
    )


def batch_loss(
    logits: np.ndarray,
    reference_logits: np.ndarray,
    batch: RolloutBatch,
    env: SyntheticEnv,
    method: str,
    lam: float,
    epsilon: float = DEFAULT_EPSILON,
    kl_coeff: float = DEFAULT_KL_COEFF,
) -> dict[str, float]:
    """Scalar objective for a fixed sampled batch as a function of the logits."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    logp = _log_softmax(logits)
    G, n = batch.actions.shape
    idx = (np.arange(n)[None, :].repeat(G, axis=0), batch.states, batch.actions)
    logp_new = logp[idx]
    adv = _method_advantages(batch, method, lam, epsilon)
    losses = surrogate_losses(
        adv,
        logp_new,
        batch.logp_theta,
        batch.logp_ref,
        exact_kl=exact_kl(logits, reference_logits, env),
    )
    total = losses["l_step"] + losses["l_final"] + kl_coeff * losses["kl"]
    return {**losses, "total": total}


def batch_loss_and_grad(
    logits: np.ndarray,
    reference_logits: np.ndarray,
    batch: RolloutBatch,
    env: SyntheticEnv,
    method: str,
    lam: float,
    epsilon: float = DEFAULT_EPSILON,
    kl_coeff: float = DEFAULT_KL_COEFF,
) -> tuple[dict[str, float], np.ndarray]:
    """Objective plus its analytic gradient with respect to the logits."""
    losses = batch_loss(logits, reference_logits, batch, env, method, lam, epsilon, kl_coeff)

    logp = _log_softmax(logits)
    probs = np.exp(logp)
    G, n = batch.actions.shape
    idx = (np.arange(n)[None, :].repeat(G, axis=0), batch.states, batch.actions)
    logp_new = logp[idx]
    adv = _method_advantages(batch, method, lam, epsilon)

    grad = np.zeros_like(logits)

    step_ratio = np.exp(logp_new - batch.logp_theta)
    seq_ratio = np.exp(logp_new.sum(axis=1) - batch.logp_theta.sum(axis=1))
    final_w = adv.final * seq_ratio  # (G,)
    for g in range(G):
        for i in range(n):
            c = batch.states[g, i]
            a = batch.actions[g, i]
            row = probs[i, c]
            # d logpi(a | i, c) / d logits[i, c, :]
            dlog = -row.copy()
            dlog[a] += 1.0
            weight = adv.combined[g, i] * step_ratio[g, i] + final_w[g]
            grad[i, c] -= (weight / G) * dlog

    grad += kl_coeff * _exact_kl_grad(logits, reference_logits, env)
    if not np.isfinite(grad).all():
        raise NonFinite("gradient contains NaN or infinity")
    return losses, grad


def _exact_kl_grad(
    logits: np.ndarray, reference_logits: np.ndarray, env: SyntheticEnv
) -> np.ndarray:
    """Gradient of the occupancy-weighted exact KL, including the dependence of
    the occupancy itself on the policy (backward value recursion)."""
    n = env.n_anchors
    probs = _softmax(logits)
    t = _log_softmax(logits) - _log_softmax(reference_logits)
    d = _occupancy(probs, env)

    k = np.zeros((n, n + 1))
    p = np.zeros((n, n + 1))
    for i in range(n):
        for c in range(i + 1):
            k[i, c] = float((probs[i, c] * t[i, c]).sum())
            p[i, c] = probs[i, c, env.correct_path[i]]

    # V[i, c]: expected remaining KL contribution from anchor i in state c.
    V = np.zeros((n + 1, n + 2))
    for i in range(n - 1, -1, -1):
        for c in range(i + 1):
            V[i, c] = k[i, c] + p[i, c] * V[i + 1, c + 1] + (1.0 - p[i, c]) * V[i + 1, c]

    grad = np.zeros_like(logits)
    for i in range(n):
        correct = env.correct_path[i]
        for c in range(i + 1):
            if d[i, c] == 0.0:
                continue
            row = probs[i, c]
            dk = row * (t[i, c] - k[i, c])
            dp = -p[i, c] * row
            dp[correct] += p[i, c]
            grad[i, c] += d[i, c] * (dk + (V[i + 1, c + 1] - V[i + 1, c]) * dp)
    return grad


# --- training loop -------------------------------------------------------------


@dataclass
class TrainCurve:
    steps: list[int] = field(default_factory=list)
    expected_final_reward: list[float] = field(default_factory=list)
    stepwise_accuracy: list[float] = field(default_factory=list)
    mean_traj_length: list[float] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    def record(self, step: int, metrics: Mapping[str, float]) -> None:
        self.steps.append(step)
        self.expected_final_reward.append(metrics["expected_final_reward"])
        self.stepwise_accuracy.append(metrics["stepwise_accuracy"])
        self.mean_traj_length.append(metrics["mean_traj_length"])


def train(
    env: SyntheticEnv,
    method: str,
    steps: int,
    lr: float = DEFAULT_LEARNING_RATE,
    lam: float = 0.3,
    seed: int = 1,
    G: int = DEFAULT_GROUP_SIZE,
    epsilon: float = DEFAULT_EPSILON,
    kl_coeff: float = DEFAULT_KL_COEFF,
) -> TrainCurve:
    """Gradient descent on the chosen surrogate; exact metrics recorded every
    step. Non-finite values abort with the offending step index."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    policy = TabularPolicy.uniform(env)
    curve = TrainCurve(
        metadata={
            "method": method,
            "lambda": lam if method == METHOD_BILEVEL else 0.0,
            "lr": lr,
            "seed": seed,
            "group_size": G,
            "epsilon": epsilon,
            "kl_coeff": kl_coeff,
            "env": {
                "n_anchors": env.n_anchors,
                "vocab": env.vocab,
                "correct_path": list(env.correct_path),
                "answer_depends_on_trace": env.answer_depends_on_trace,
            },
        }
    )
    for step_index in range(1, steps + 1):
        batch = rollout(policy, env, G, seed=(seed, step_index))
        try:
            _, grad = batch_loss_and_grad(
                policy.logits,
                policy.reference_logits,
                batch,
                env,
                method,
                lam,
                epsilon,
                kl_coeff,
            )
        except NonFinite as exc:
            raise NonFinite(f"step {step_index}: {exc}") from exc
        policy.logits = policy.logits - lr * grad
        if not np.isfinite(policy.logits).all():
            raise NonFinite(f"step {step_index}: logits diverged")
        curve.record(step_index, policy_metrics(policy, env))
    return curve


def moving_average(values: Sequence[float], window: int) -> list[float]:
    """Trailing moving average; window 1 reproduces the input."""
    if window < 1:
        raise ValueError("window must be >= 1")
    out: list[float] = []
    acc = 0.0
    vals = list(values)
    for i, v in enumerate(vals):
        acc += v
        if i >= window:
            acc -= vals[i - window]
        out.append(acc / min(i + 1, window))
    return out


def plot_curves(
    curves: Mapping[str, TrainCurve],
    out_path: str | Path,
    smooth_window: int = 25,
) -> dict[str, Path]:
    """Write reward/accuracy/length curves (raw and smoothed) as a CSV/PNG pair
    plus a metadata JSON; returns the emitted paths."""
    out_dir = Path(out_path)
    out_dir.mkdir(parents=True, exist_ok=True)

    csv_path = out_dir / "curves.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(
            [
                "label",
                "step",
                "expected_final_reward",
                "expected_final_reward_smooth",
                "stepwise_accuracy",
                "stepwise_accuracy_smooth",
                "mean_traj_length",
                "mean_traj_length_smooth",
            ]
        )
        for label, curve in curves.items():
            reward_s = moving_average(curve.expected_final_reward, smooth_window)
            acc_s = moving_average(curve.stepwise_accuracy, smooth_window)
            length_s = moving_average(curve.mean_traj_length, smooth_window)
            for j, step in enumerate(curve.steps):
                writer.writerow(
                    [
                        label,
                        step,
                        curve.expected_final_reward[j],
                        reward_s[j],
                        curve.stepwise_accuracy[j],
                        acc_s[j],
                        curve.mean_traj_length[j],
                        length_s[j],
                    ]
                )

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_reward, ax_len) = plt.subplots(1, 2, figsize=(11, 4))
    for label, curve in curves.items():
        ax_reward.plot(curve.steps, curve.expected_final_reward, alpha=0.25)
        ax_reward.plot(
            curve.steps, moving_average(curve.expected_final_reward, smooth_window), label=label
        )
        ax_len.plot(curve.steps, curve.mean_traj_length, alpha=0.25)
        ax_len.plot(
            curve.steps, moving_average(curve.mean_traj_length, smooth_window), label=label
        )
    ax_reward.set_xlabel("step")
    ax_reward.set_ylabel("expected final reward")
    ax_reward.legend()
    ax_len.set_xlabel("step")
    ax_len.set_ylabel("mean correct streak")
    ax_len.legend()
    fig.tight_layout()
    png_path = out_dir / "curves.png"
    fig.savefig(png_path, dpi=150)
    plt.close(fig)

    meta_path = out_dir / "metadata.json"
    meta = {
        "smooth_window": smooth_window,
        "curves": {label: curve.metadata for label, curve in curves.items()},
    }
    meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return {"csv": csv_path, "png": png_path, "metadata": meta_path}
