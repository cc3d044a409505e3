"""Adaptive mode balancing: tool-reward coefficients from batch mode counts.

The adaptive rule couples the coefficients to the batch's tool-on frequency,
lambda_on = base + 0.5 - f_on and lambda_off = base - 0.5 + f_on, so the
more frequent mode gets the smaller coefficient. A configurable free stage
drops the constraint late in training and both coefficients revert to the
base value. Coefficients are never clamped: a base below 0.5 can drive one
of them negative, and that pathology is part of what the sweeps probe.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from .trajectory import ModeToken

__all__ = ["AmbSchedule", "AmbState", "coefficients", "lambda_pair", "observe_batch"]


class AmbSchedule(enum.Enum):
    ADAPTIVE = "adaptive"
    LINEAR = "linear"
    OFF = "off"


def lambda_pair(lambda_base: float, f_on: float) -> tuple[float, float]:
    """Adaptive coefficients for a given tool-on frequency."""
    return lambda_base + 0.5 - f_on, lambda_base - 0.5 + f_on


@dataclass(frozen=True, slots=True)
class AmbState:
    """Per-batch balancing state. ``current_iter``/``total_iters`` drive the
    free stage and the linear variant; counts describe the current batch."""

    lambda_base: float = 1.2
    n_on: int = 0
    n_off: int = 0
    f_on: float = 0.0
    free_stage_at: int = 0
    schedule: AmbSchedule = AmbSchedule.ADAPTIVE
    current_iter: int = 0
    total_iters: int = 1

    def __post_init__(self) -> None:
        if self.lambda_base < 0:
            raise ValueError("lambda_base must be non-negative")
        if self.total_iters < 1:
            raise ValueError("total_iters must be positive")


def observe_batch(state: AmbState, modes: list[ModeToken]) -> AmbState:
    """Count the batch's modes and refresh f_on. The coefficients produced
    from this state score the same batch the counts came from."""
    if not modes:
        raise ValueError("observe_batch requires a non-empty batch")
    n_on = sum(1 for m in modes if m is ModeToken.TOOL_ON)
    n_off = len(modes) - n_on
    return replace(state, n_on=n_on, n_off=n_off, f_on=n_on / len(modes))


def coefficients(state: AmbState) -> tuple[float, float]:
    """(lambda_on, lambda_off) for the current batch.

    Adaptive: the coupled rule until the free stage, then (base, base).
    Linear: the frequency influence decays as (1 - t/t_max) over the whole
    run and never fully releases until the final step; the free stage does
    not apply. Off: always (base, base).
    """
    base = state.lambda_base
    if state.schedule is AmbSchedule.OFF:
        return base, base
    if state.schedule is AmbSchedule.ADAPTIVE:
        if state.current_iter >= state.free_stage_at:
            return base, base
        return lambda_pair(base, state.f_on)
    decay = 1.0 - state.current_iter / state.total_iters
    delta = decay * (0.5 - state.f_on)
    return base + delta, base - delta
