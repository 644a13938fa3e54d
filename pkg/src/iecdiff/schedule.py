"""Discrete noise schedules and DDIM transition coefficients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidRangeError

SCHEDULE_KINDS = ("linear",)


@dataclass(frozen=True)
class NoiseSchedule:
    """Training-grid noise levels plus the sub-sequence used for sampling.

    ``alpha_bars`` holds the cumulative products; every sampler and analysis
    routine uses these, never the per-step ``alphas``.  ``sample_steps`` is
    increasing and is traversed in reverse during sampling.
    """

    kind: str
    T_train: int
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    sample_steps: tuple[int, ...]
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @property
    def T_sample(self) -> int:
        return len(self.sample_steps)

    def alpha_bar_at(self, t_index: int) -> float:
        """Cumulative alpha at a grid index; index -1 is the clean boundary (1.0)."""
        if t_index == -1:
            return 1.0
        if not 0 <= t_index < self.T_train:
            raise InvalidRangeError(f"t_index {t_index} outside [-1, {self.T_train})")
        return float(self.alpha_bars[t_index])

    def source_index(self, position: int) -> int:
        """Grid index of the state entering sampling step ``position``."""
        self._check_position(position)
        return self.sample_steps[self.T_sample - 1 - position]

    def target_index(self, position: int) -> int:
        """Grid index of the state leaving sampling step ``position`` (-1 at the end)."""
        self._check_position(position)
        k = self.T_sample - 2 - position
        return self.sample_steps[k] if k >= 0 else -1

    def _check_position(self, position: int) -> None:
        if not 0 <= position < self.T_sample:
            raise InvalidRangeError(
                f"sampling position {position} outside [0, {self.T_sample})"
            )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "T_train": self.T_train,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "T_sample": self.T_sample,
            "stride": "uniform",
            "sample_steps": list(self.sample_steps),
        }


@dataclass(frozen=True)
class StepCoefficients:
    """Scalars of the simplified update ``x_prev = A * x_t + B * eps``."""

    A: float
    B: float
    alpha_bar_t: float
    alpha_bar_prev: float
    t_index: int
    prev_index: int = -1


def make_beta_schedule(
    kind: str = "linear",
    T_train: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    if kind not in SCHEDULE_KINDS:
        raise InvalidRangeError(f"unknown schedule kind {kind!r}")
    if int(T_train) != T_train or T_train < 1:
        raise InvalidRangeError(f"T_train must be a positive integer, got {T_train}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidRangeError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    T_train = int(T_train)
    betas = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(
        kind=kind,
        T_train=T_train,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sample_steps=tuple(range(T_train)),
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def select_timesteps(schedule: NoiseSchedule, T_sample: int) -> NoiseSchedule:
    """Uniform-stride sub-sequence ``0, s, 2s, ...`` with ``s = T_train // T_sample``."""
    if int(T_sample) != T_sample or not 1 <= T_sample <= schedule.T_train:
        raise InvalidRangeError(
            f"T_sample must lie in [1, {schedule.T_train}], got {T_sample}"
        )
    stride = schedule.T_train // int(T_sample)
    steps = tuple(range(0, stride * int(T_sample), stride))
    return replace(schedule, sample_steps=steps)


def coeffs_from_alpha_bars(alpha_bar_t: float, alpha_bar_prev: float) -> tuple[float, float]:
    A = math.sqrt(alpha_bar_prev) / math.sqrt(alpha_bar_t)
    if alpha_bar_prev == alpha_bar_t:
        return A, 0.0
    # sqrt(1 - ab_prev) - A sqrt(1 - ab_t), rewritten without cancellation so
    # the sign is exact even for nearly equal levels
    denom = math.sqrt(alpha_bar_t) * (math.sqrt(alpha_bar_t * (1.0 - alpha_bar_prev))
                                      + math.sqrt(alpha_bar_prev * (1.0 - alpha_bar_t)))
    B = (alpha_bar_t - alpha_bar_prev) / denom
    return A, B


def step_coeffs(schedule: NoiseSchedule, position: int) -> StepCoefficients:
    """Coefficients of sampling step ``position`` (0 is the step leaving x_T)."""
    t = schedule.source_index(position)
    prev = schedule.target_index(position)
    ab_t = schedule.alpha_bar_at(t)
    ab_prev = schedule.alpha_bar_at(prev)
    A, B = coeffs_from_alpha_bars(ab_t, ab_prev)
    return StepCoefficients(A=A, B=B, alpha_bar_t=ab_t, alpha_bar_prev=ab_prev,
                            t_index=t, prev_index=prev)


def all_step_coeffs(schedule: NoiseSchedule) -> list[StepCoefficients]:
    return [step_coeffs(schedule, p) for p in range(schedule.T_sample)]


def default_schedule(T_sample: int = 100) -> NoiseSchedule:
    return select_timesteps(make_beta_schedule("linear", 1000, 1e-4, 0.02), T_sample)
