"""Reverse-diffusion posterior sampling with an NMF noise model.

Two enhancement drivers share the same predictor-corrector machinery:

* :func:`run_udiffse_plus` makes a single reverse pass.  Every other step it
  nudges the state towards the observation, forms a Tweedie estimate of the
  clean speech and refits the noise model with one multiplicative update.
* :func:`run_udiffse` is the EM baseline: each round is a full reverse pass
  with the noise variance frozen, followed by an NMF fit on the final sample.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import noise_nmf
from .noise_nmf import NmfModel
from .sde import DiffusionSchedule, tweedie_estimate
from .spectral import Spectrogram, sample_complex_gaussian, standard_complex_normal

CADENCES = ("even", "every", "never")


@dataclass
class SamplerConfig:
    n_steps: int | None = None  # None: take it from the schedule
    corrector_snr: float = 0.5
    likelihood_weight: float = 3.0
    em_iterations: int = 5
    posterior_cadence: str = "even"
    seed: int = 0
    init_variance: float = 1.0
    update_noise: bool = True
    m_step_iterations: int = 50
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.n_steps is not None and self.n_steps < 2:
            raise ValueError(f"n_steps must be >= 2, got {self.n_steps}")
        if not self.corrector_snr > 0:
            raise ValueError("corrector_snr must be positive")
        if self.likelihood_weight < 0:
            raise ValueError("likelihood_weight must be nonnegative")
        if self.em_iterations < 1:
            raise ValueError("em_iterations must be >= 1")
        if self.posterior_cadence not in CADENCES:
            raise ValueError(f"posterior_cadence must be one of {CADENCES}")
        if self.init_variance < 0 or self.m_step_iterations < 0:
            raise ValueError("init_variance and m_step_iterations must be nonnegative")

    def steps(self, sched: DiffusionSchedule) -> int:
        return sched.n_steps if self.n_steps is None else self.n_steps

    def posterior_at(self, i: int) -> bool:
        if self.posterior_cadence == "never":
            return False
        return self.posterior_cadence == "every" or i % 2 == 0


@dataclass
class RunStats:
    score_evaluations: int = 0
    nmf_updates: int = 0
    wall_time: float = 0.0
    audio_duration: float = 0.0


@dataclass
class EnhanceResult:
    s_hat: np.ndarray
    nmf: NmfModel
    stats: RunStats = field(default_factory=RunStats)


class SamplerDivergence(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"sampler diverged at step i={step}: {detail}")
        self.step = step


def expected_score_evaluations(algo: str, n_steps: int, em_iterations: int = 1, cadence: str = "even") -> int:
    """Number of score-model calls made by a run, from the loop structure alone."""
    n_box = {"even": n_steps // 2, "every": n_steps, "never": 0}[cadence]
    if algo == "udiffse+":
        return 2 * n_steps + n_box
    if algo == "udiffse":
        return em_iterations * 2 * n_steps
    raise ValueError(f"unknown algorithm {algo!r}")


def _score(score_model, s, tau, v, stats):
    if stats is not None:
        stats.score_evaluations += 1
    return score_model.evaluate(s, tau, v)


def corrector_step(s, tau, sched, score_model, r, rng, v=None, stats=None, zeta=None):
    """Langevin correction with step ``(sigma_tau r)^2``."""
    eps = sched.sigma_sq(tau) * r**2
    score = _score(score_model, s, tau, v, stats)
    if zeta is None:
        zeta = standard_complex_normal(s.shape, rng)
    return s + eps * score + np.sqrt(2 * eps) * zeta


def predictor_step(s, tau, dt, sched, score_model, rng, v=None, stats=None, zeta=None):
    """Euler-Maruyama step of the reverse SDE from ``tau`` to ``tau - dt``."""
    f = -sched.gamma * s
    g = sched.g(tau)
    score = _score(score_model, s, tau, v, stats)
    if zeta is None:
        zeta = standard_complex_normal(s.shape, rng)
    return s - f * dt + g**2 * score * dt + g * np.sqrt(dt) * zeta


def posterior_gradient(s_tau, x, tau, sched, noise_var) -> np.ndarray:
    """Score of the pseudo-likelihood ``N_C(x; s/delta, sigma^2/delta^2 + noise_var)``."""
    noise_var = np.asarray(noise_var, dtype=np.float64)
    if np.any(noise_var <= 0):
        raise ValueError("noise variance must be strictly positive")
    delta = sched.delta(tau)
    if delta <= 0:
        raise ValueError("delta must be positive")
    var = sched.sigma_sq(tau) / delta**2 + noise_var
    return (x - s_tau / delta) / (delta * var)


def _as_array(x):
    if isinstance(x, Spectrogram):
        return x.data
    arr = np.asarray(x, dtype=np.complex128)
    if arr.ndim != 2:
        raise ValueError(f"expected an (F, T) array, got shape {arr.shape}")
    return arr


def _check_inputs(x, score_model, v, nmf=None):
    if not np.all(np.isfinite(x)):
        raise ValueError("observation contains non-finite values")
    if getattr(score_model, "conditional", False) and v is None:
        raise ValueError("conditional score model requires a visual embedding")
    if nmf is not None and nmf.shape != x.shape:
        raise ValueError(f"NMF shape {nmf.shape} does not match observation {x.shape}")


class _Guard:
    def __init__(self, x, factor):
        peak = float(np.max(np.abs(x)))
        self.limit = factor * peak if peak > 0 else factor

    def __call__(self, s, i):
        if not np.all(np.isfinite(s)):
            raise SamplerDivergence(i, "non-finite state")
        peak = float(np.max(np.abs(s)))
        if peak > self.limit:
            raise SamplerDivergence(i, f"|s| reached {peak:.3g} (limit {self.limit:.3g})")


def pc_prior_sample(init_mean, score_model, sched: DiffusionSchedule, cfg: SamplerConfig, v=None):
    """Plain predictor-corrector sampling started from ``N_C(init_mean, init_variance I)``."""
    x = _as_array(init_mean)
    rng = np.random.default_rng(cfg.seed)
    n = cfg.steps(sched)
    dt = 1.0 / n
    s = sample_complex_gaussian(x, cfg.init_variance, rng)
    for i in range(n, 0, -1):
        tau = i / n
        s = corrector_step(s, tau, sched, score_model, cfg.corrector_snr, rng, v)
        s = predictor_step(s, tau, dt, sched, score_model, rng, v)
    return s


def _reverse_pass(x, score_model, sched, cfg, rng, stats, v, noise_var, on_estimate=None):
    n = cfg.steps(sched)
    dt = 1.0 / n
    guard = _Guard(x, cfg.divergence_factor)
    s = sample_complex_gaussian(x, cfg.init_variance, rng)
    for i in range(n, 0, -1):
        tau = i / n
        s = corrector_step(s, tau, sched, score_model, cfg.corrector_snr, rng, v, stats)
        s = predictor_step(s, tau, dt, sched, score_model, rng, v, stats)
        if cfg.posterior_at(i):
            grad = posterior_gradient(s, x, tau, sched, noise_var())
            s = s + cfg.likelihood_weight * sched.g(tau) ** 2 * grad * dt
            if on_estimate is not None:
                score = _score(score_model, s, tau, v, stats)
                on_estimate(tweedie_estimate(s, tau, sched, score), i)
        guard(s, i)
    return s


def run_udiffse_plus(
    x,
    score_model,
    nmf_init: NmfModel,
    sched: DiffusionSchedule,
    cfg: SamplerConfig | None = None,
    v=None,
    audio_duration: float = 0.0,
) -> EnhanceResult:
    """Single-pass enhancement alternating posterior steps and NMF updates."""
    cfg = cfg or SamplerConfig()
    x = _as_array(x)
    _check_inputs(x, score_model, v, nmf_init)
    stats = RunStats(audio_duration=audio_duration)
    rng = np.random.default_rng(cfg.seed)
    state = {"nmf": nmf_init.copy()}

    def refit(s0, i):
        if not cfg.update_noise:
            return
        if not np.all(np.isfinite(s0)):
            raise SamplerDivergence(i, "non-finite Tweedie estimate")
        try:
            state["nmf"] = noise_nmf.mu_update_step(state["nmf"], np.abs(x - s0) ** 2)
        except FloatingPointError as exc:
            raise SamplerDivergence(i, str(exc)) from exc
        stats.nmf_updates += 1

    start = time.perf_counter()
    s = _reverse_pass(
        x, score_model, sched, cfg, rng, stats, v, lambda: state["nmf"].noise_variance(), refit
    )
    stats.wall_time = time.perf_counter() - start
    return EnhanceResult(s, state["nmf"], stats)


def run_udiffse(
    x,
    score_model,
    nmf_init: NmfModel,
    sched: DiffusionSchedule,
    cfg: SamplerConfig | None = None,
    v=None,
    audio_duration: float = 0.0,
) -> EnhanceResult:
    """EM baseline: full posterior-sampling passes alternating with NMF fits."""
    cfg = cfg or SamplerConfig()
    x = _as_array(x)
    _check_inputs(x, score_model, v, nmf_init)
    stats = RunStats(audio_duration=audio_duration)
    rng = np.random.default_rng(cfg.seed)
    nmf = nmf_init.copy()

    start = time.perf_counter()
    s = x
    for _ in range(cfg.em_iterations):
        frozen = nmf.noise_variance()
        s = _reverse_pass(x, score_model, sched, cfg, rng, stats, v, lambda: frozen)
        if cfg.update_noise:
            try:
                nmf = noise_nmf.fit(nmf, np.abs(x - s) ** 2, cfg.m_step_iterations)
            except FloatingPointError as exc:
                raise SamplerDivergence(0, str(exc)) from exc
            stats.nmf_updates += cfg.m_step_iterations
    stats.wall_time = time.perf_counter() - start
    return EnhanceResult(s, nmf, stats)


def enhance(algo: str, x, score_model, nmf_init, sched, cfg=None, v=None, audio_duration=0.0):
    if algo == "udiffse+":
        return run_udiffse_plus(x, score_model, nmf_init, sched, cfg, v, audio_duration)
    if algo == "udiffse":
        return run_udiffse(x, score_model, nmf_init, sched, cfg, v, audio_duration)
    raise ValueError(f"unknown algorithm {algo!r}; expected 'udiffse' or 'udiffse+'")
