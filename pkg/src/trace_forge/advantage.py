"""Bi-level group-relative advantage estimation and surrogate losses.

Stepwise advantages combine two signals per anchor: a z-score of the binary
reward across the G sampled trajectories (population standard deviation plus a
stability epsilon in the denominator), and an intra-trajectory shaping term
that scales a correct step by one plus the mean correctness of its own future
steps. Terminal advantages z-score the final rewards the same way. Advantages
operate on the binary rewards; budgeted totals are reporting-only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPSILON = 1e-8
DEFAULT_LAMBDA = 0.3


class GroupTooSmall(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class NonFinite(ValueError):
    pass


def _as_binary_matrix(step: object) -> np.ndarray:
    arr = np.asarray(step, dtype=float)
    if arr.ndim != 2:
        raise ShapeMismatch(f"step rewards must be G x n, got shape {arr.shape}")
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ValueError("step rewards must be binary")
    return arr


@dataclass(frozen=True)
class GroupRewards:
    """Binary rewards for a group of G trajectories over n shared anchors.

    Ragged groups (branch-dependent trace lengths) must be aligned by the
    caller up to the minimum n, padding shorter trajectories with zeros.
    """

    step: np.ndarray
    final: np.ndarray

    def __post_init__(self) -> None:
        step = _as_binary_matrix(self.step)
        final = np.asarray(self.final, dtype=float)
        if final.ndim != 1 or final.shape[0] != step.shape[0]:
            raise ShapeMismatch("final rewards must be a length-G vector")
        if not np.isin(final, (0.0, 1.0)).all():
            raise ValueError("final rewards must be binary")
        object.__setattr__(self, "step", step)
        object.__setattr__(self, "final", final)

    @property
    def G(self) -> int:
        return int(self.step.shape[0])

    @property
    def n(self) -> int:
        return int(self.step.shape[1])

    @staticmethod
    def from_vectors(step_rows: list[list[int]], final: list[int]) -> "GroupRewards":
        """Build from per-trajectory reward vectors, zero-padding ragged rows to
        the minimum shared anchor count."""
        if not step_rows:
            raise ShapeMismatch("empty group")
        n = min(len(r) for r in step_rows)
        aligned = np.zeros((len(step_rows), n))
        for g, row in enumerate(step_rows):
            aligned[g, :] = row[:n]
        return GroupRewards(step=aligned, final=np.asarray(final, dtype=float))


def _zscore_columns(values: np.ndarray, epsilon: float) -> np.ndarray:
    mean = values.mean(axis=0, keepdims=True)
    std = values.std(axis=0, keepdims=True)  # population std, 1/G
    centered = values - mean
    out = np.zeros_like(values)
    live = (std > 0.0)[0]
    if live.any():
        out[:, live] = centered[:, live] / (std[:, live] + epsilon)
    return out


def group_advantage(rewards: GroupRewards, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Per-anchor z-score of rewards across the group; constant columns are
    exactly zero."""
    if rewards.G < 2:
        raise GroupTooSmall("group advantages need G >= 2")
    return _zscore_columns(rewards.step, epsilon)


def intra_advantage(rewards: GroupRewards) -> np.ndarray:
    """r_i * (1 + mean future correctness); the last anchor's future term is
    zero, so a correct terminal step scores exactly 1."""
    if rewards.n < 1:
        raise ShapeMismatch("intra advantages need n >= 1")
    r = rewards.step
    n = rewards.n
    future = np.zeros_like(r)
    if n > 1:
        # future_sum[:, i] = sum of r[:, i+1:]
        reversed_cumsum = np.cumsum(r[:, ::-1], axis=1)[:, ::-1]
        future_sum = reversed_cumsum - r
        denom = np.arange(n - 1, -1, -1, dtype=float)
        future[:, :-1] = future_sum[:, :-1] / denom[:-1]
    return r * (1.0 + future)


def combine(group: np.ndarray, intra: np.ndarray, lam: float) -> np.ndarray:
    """Elementwise group + lambda * intra."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    group = np.asarray(group, dtype=float)
    intra = np.asarray(intra, dtype=float)
    if group.shape != intra.shape:
        raise ShapeMismatch(f"shape mismatch: {group.shape} vs {intra.shape}")
    return group + lam * intra


def final_advantage(final: object, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Z-score the terminal rewards across the group."""
    values = np.asarray(final, dtype=float)
    if values.ndim != 1:
        raise ShapeMismatch("final rewards must be a vector")
    if values.shape[0] < 2:
        raise GroupTooSmall("final advantages need G >= 2")
    return _zscore_columns(values[:, None], epsilon)[:, 0]


@dataclass(frozen=True)
class AdvantageMatrix:
    group: np.ndarray
    intra: np.ndarray
    combined: np.ndarray
    final: np.ndarray
    lam: float
    epsilon: float

    @staticmethod
    def from_rewards(
        rewards: GroupRewards,
        lam: float = DEFAULT_LAMBDA,
        epsilon: float = DEFAULT_EPSILON,
    ) -> "AdvantageMatrix":
        group = group_advantage(rewards, epsilon)
        intra = intra_advantage(rewards)
        return AdvantageMatrix(
            group=group,
            intra=intra,
            combined=combine(group, intra, lam),
            final=final_advantage(rewards.final, epsilon),
            lam=lam,
            epsilon=epsilon,
        )


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFinite(f"{name} contains NaN or infinity")


def surrogate_losses(
    adv: AdvantageMatrix,
    logp_new: object,
    logp_old: object,
    logp_ref: object,
    exact_kl: float | None = None,
) -> dict[str, float]:
    """Importance-weighted surrogate terms for one sampled group.

    Log-probabilities are per-anchor (G x n); sequence-level quantities are row
    sums. The KL term uses the supplied exact value when full distributions are
    available, otherwise the per-sample estimator mean(logp_new - logp_ref).
    """
    new = np.asarray(logp_new, dtype=float)
    old = np.asarray(logp_old, dtype=float)
    ref = np.asarray(logp_ref, dtype=float)
    for name, arr in (("logp_new", new), ("logp_old", old), ("logp_ref", ref)):
        if arr.shape != adv.combined.shape:
            raise ShapeMismatch(
                f"{name} shape {arr.shape} does not match advantages {adv.combined.shape}"
            )
        _check_finite(name, arr)
    _check_finite("advantages", adv.combined)
    _check_finite("final advantages", adv.final)

    G = new.shape[0]
    step_ratio = np.exp(new - old)
    l_step = float(-(step_ratio * adv.combined).sum() / G)

    seq_ratio = np.exp(new.sum(axis=1) - old.sum(axis=1))
    l_final = float(-(seq_ratio * adv.final).sum() / G)

    kl = float(exact_kl) if exact_kl is not None else float((new - ref).mean())

    for name, value in (("l_step", l_step), ("l_final", l_final), ("kl", kl)):
        if not np.isfinite(value):
            raise NonFinite(f"{name} is not finite")
    return {"l_step": l_step, "l_final": l_final, "kl": kl, "total": l_step + l_final + kl}
