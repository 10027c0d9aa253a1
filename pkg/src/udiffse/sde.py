"""Forward diffusion ``ds = -gamma s dt + g(t) dw`` and its perturbation kernel.

The diffusion coefficient interpolates geometrically between ``sigma_min``
and ``sigma_max``::

    g(t) = sigma_min * (sigma_max / sigma_min)**t * sqrt(2 log(sigma_max / sigma_min))

so the kernel ``p(s_t | s) = N_C(delta_t s, sigma(t)^2 I)`` has
``delta_t = exp(-gamma t)`` and a variance solving
``d sigma^2 / dt = -2 gamma sigma^2 + g(t)^2`` with ``sigma^2(0) = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .spectral import sample_complex_gaussian, standard_complex_normal


class ScheduleCoefficients(NamedTuple):
    delta: float
    sigma_sq: float
    g: float
    drift_scale: float


@dataclass(frozen=True)
class DiffusionSchedule:
    gamma: float = 1.5
    sigma_min: float = 0.05
    sigma_max: float = 0.5
    n_steps: int = 30

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ValueError(f"n_steps must be an integer >= 2, got {self.n_steps}")

    @property
    def log_ratio(self) -> float:
        return float(np.log(self.sigma_max / self.sigma_min))

    def delta(self, t):
        return np.exp(-self.gamma * _check_time(t))

    def g(self, t):
        t = _check_time(t)
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** t * np.sqrt(2 * self.log_ratio)

    def sigma_sq(self, t):
        t = _check_time(t)
        lr = self.log_ratio
        ratio = self.sigma_max / self.sigma_min
        return (
            self.sigma_min**2
            * (ratio ** (2 * t) - np.exp(-2 * self.gamma * t))
            * lr
            / (self.gamma + lr)
        )

    def sigma(self, t):
        return np.sqrt(self.sigma_sq(t))

    def coefficients(self, t) -> ScheduleCoefficients:
        return schedule_coefficients(self, t)


def _check_time(t):
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
        raise ValueError(f"time must lie in [0, 1], got {t}")
    return arr if arr.ndim else float(arr)


def schedule_coefficients(sched: DiffusionSchedule, t: float) -> ScheduleCoefficients:
    return ScheduleCoefficients(
        delta=sched.delta(t),
        sigma_sq=sched.sigma_sq(t),
        g=sched.g(t),
        drift_scale=-sched.gamma,
    )


def perturb(s, t: float, sched: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Draw ``s_t ~ N_C(delta_t s, sigma(t)^2 I)``."""
    s = np.asarray(s)
    return sample_complex_gaussian(sched.delta(t) * s, sched.sigma_sq(t), rng)


def tweedie_estimate(s_t, t: float, sched: DiffusionSchedule, score) -> np.ndarray:
    """Posterior-mean estimate of the clean signal from ``s_t`` and its score."""
    s_t = np.asarray(s_t)
    score = np.asarray(score)
    if s_t.shape != score.shape:
        raise ValueError(f"score shape {score.shape} does not match state shape {s_t.shape}")
    delta = sched.delta(t)
    if delta <= 0:
        raise ValueError("delta_t must be positive")
    return (s_t + sched.sigma_sq(t) * score) / delta


def simulate_forward(
    s,
    t: float,
    sched: DiffusionSchedule,
    rng: np.random.Generator,
    n_substeps: int = 1000,
    n_trials: int = 1,
) -> np.ndarray:
    """Euler-Maruyama integration of the forward SDE from time 0 to ``t``.

    Returns an array of shape ``(n_trials,) + s.shape``.  Only used to
    cross-check the closed-form kernel.
    """
    s = np.asarray(s, dtype=np.complex128)
    _check_time(t)
    dt = t / n_substeps
    state = np.broadcast_to(s, (n_trials,) + s.shape).copy()
    for k in range(n_substeps):
        tk = k * dt
        state = state - sched.gamma * state * dt + sched.g(tk) * np.sqrt(dt) * standard_complex_normal(
            state.shape, rng
        )
    return state
