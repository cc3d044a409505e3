"""Group-relative policy optimization: advantages, clipped surrogate,
analytic gradient, and the decoupled-weight-decay Adam update.

Rewards are normalized within each query's group of rollouts (population
standard deviation; an all-equal group gets zero advantages). The surrogate
is min(ratio * A, clip(ratio, 1-eps, 1+eps) * A) with no KL term, stated at
the trajectory level: the ratio is exp(logp_new - logp_old) over whole
trajectories. Where the clipped branch attains the min the term is constant
in the parameters, so those trajectories contribute zero gradient; ties go
to the unclipped branch.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .trajectory import TrajectoryRecord

__all__ = [
    "ClipConfig",
    "DEGENERATE_STD",
    "NonFiniteGradientError",
    "OptimizerState",
    "RolloutGroup",
    "apply_update",
    "init_optimizer_state",
    "normalize_advantages",
    "objective_and_gradient",
    "surrogate",
]

DEGENERATE_STD = 1e-8

# (logp, grad) of one trajectory under a parameter vector.
TrajectoryEval = Callable[[np.ndarray, TrajectoryRecord], tuple[float, np.ndarray]]


@dataclass(frozen=True, slots=True)
class ClipConfig:
    epsilon: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon={self.epsilon} violates 0 < epsilon < 1")


@dataclass(frozen=True)
class RolloutGroup:
    """The G rollouts sampled for one query, with their rewards and
    group-normalized advantages."""

    query_id: str
    trajectories: tuple[TrajectoryRecord, ...]
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]

    def __post_init__(self) -> None:
        g = len(self.trajectories)
        if g < 2:
            raise ValueError("a rollout group needs G >= 2")
        if len(self.rewards) != g or len(self.advantages) != g:
            raise ValueError("group lists must have equal length")

    @classmethod
    def build(
        cls, query_id: str, trajectories: Sequence[TrajectoryRecord], rewards: Sequence[float]
    ) -> "RolloutGroup":
        return cls(
            query_id=query_id,
            trajectories=tuple(trajectories),
            rewards=tuple(rewards),
            advantages=tuple(normalize_advantages(list(rewards))),
        )


def normalize_advantages(rewards: Sequence[float]) -> list[float]:
    """(r - mean) / population_std per group member; an (almost) constant
    group maps to all-zero advantages instead of dividing by ~0."""
    if len(rewards) < 2:
        raise ValueError("advantage normalization needs at least 2 rewards")
    arr = np.asarray(rewards, dtype=np.float64)
    mean = arr.mean()
    std = arr.std()  # population (ddof=0)
    if std < DEGENERATE_STD:
        return [0.0] * len(rewards)
    return list((arr - mean) / std)


def surrogate(ratio: float, advantage: float, cfg: ClipConfig) -> float:
    """Clipped objective term for one trajectory; no KL regularization."""
    if ratio <= 0.0:
        raise ValueError(f"non-positive ratio {ratio}: log-prob bookkeeping bug")
    clipped = min(max(ratio, 1.0 - cfg.epsilon), 1.0 + cfg.epsilon)
    return min(ratio * advantage, clipped * advantage)


class NonFiniteGradientError(RuntimeError):
    def __init__(self, query_id: str):
        super().__init__(f"non-finite gradient contribution in group {query_id!r}")
        self.query_id = query_id


def objective_and_gradient(
    groups: Sequence[RolloutGroup],
    params_vec: np.ndarray,
    cfg: ClipConfig,
    evaluate: TrajectoryEval,
) -> tuple[float, np.ndarray]:
    """Objective value (mean over groups of the per-group mean surrogate)
    and its exact gradient with respect to the parameter vector.

    ``evaluate`` maps (params_vec, trajectory) to the trajectory's current
    log-probability and its gradient; logp_old is read off each record.
    """
    if not groups:
        raise ValueError("no groups to optimize")
    total = 0.0
    grad = np.zeros_like(params_vec)
    for group in groups:
        g = len(group.trajectories)
        w = 1.0 / (len(groups) * g)
        for traj, adv in zip(group.trajectories, group.advantages):
            logp, glp = evaluate(params_vec, traj)
            ratio = float(np.exp(logp - traj.logprob_old))
            if ratio <= 0.0 or not np.isfinite(ratio):
                raise ValueError(
                    f"bad ratio {ratio} for trajectory of group {group.query_id!r}"
                )
            clipped = min(max(ratio, 1.0 - cfg.epsilon), 1.0 + cfg.epsilon)
            un_term = ratio * adv
            cl_term = clipped * adv
            if un_term <= cl_term:
                total += w * un_term
                contribution = (w * adv * ratio) * glp
                if not np.all(np.isfinite(contribution)):
                    raise NonFiniteGradientError(group.query_id)
                grad += contribution
            else:
                total += w * cl_term  # constant in the parameters
    return total, grad


@dataclass(frozen=True)
class OptimizerState:
    """Adam with decoupled weight decay, flattened to the parameter vector.
    The update ascends the objective."""

    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def init_optimizer_state(n_params: int, lr: float, weight_decay: float = 0.0) -> OptimizerState:
    return OptimizerState(
        step=0,
        m=np.zeros(n_params, dtype=np.float64),
        v=np.zeros(n_params, dtype=np.float64),
        lr=lr,
        weight_decay=weight_decay,
    )


def apply_update(
    params_vec: np.ndarray, grad: np.ndarray, state: OptimizerState
) -> tuple[np.ndarray, OptimizerState]:
    """One ascent step. Decay is decoupled: it shrinks the parameters toward
    zero independently of the moment direction."""
    if not (params_vec.shape == grad.shape == state.m.shape):
        raise ValueError("parameter, gradient and moment shapes must agree")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new = params_vec + state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if state.weight_decay:
        new = new - state.lr * state.weight_decay * params_vec
    if not np.all(np.isfinite(new)):
        raise FloatingPointError("non-finite parameters after optimizer update")
    return new, replace(state, step=step, m=m, v=v)
