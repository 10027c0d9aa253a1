"""NMF noise variance model ``n ~ N_C(0, diag(vec(W H)))``.

Maximizing the circular-Gaussian likelihood of a residual ``x - s`` over
``(W, H)`` is the same as minimizing the Itakura-Saito divergence between
``|x - s|^2`` and ``W H``; the updates below are the beta = 0 multiplicative
rules.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_RANK = 4
DEFAULT_EPS = 1e-10


@dataclass
class NmfModel:
    W: np.ndarray
    H: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        self.W = np.maximum(np.asarray(self.W, dtype=np.float64), self.eps)
        self.H = np.maximum(np.asarray(self.H, dtype=np.float64), self.eps)
        if self.W.ndim != 2 or self.H.ndim != 2 or self.W.shape[1] != self.H.shape[0]:
            raise ValueError(f"incompatible factor shapes {self.W.shape} and {self.H.shape}")

    @property
    def rank(self) -> int:
        return self.W.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape[0], self.H.shape[1]

    def noise_variance(self) -> np.ndarray:
        """Per-bin noise variance ``W @ H`` as an ``(F, T)`` array."""
        return self.W @ self.H

    def copy(self) -> "NmfModel":
        return NmfModel(self.W.copy(), self.H.copy(), self.eps)

    @classmethod
    def initialize(cls, x, rank: int = DEFAULT_RANK, rng=None, eps: float = DEFAULT_EPS):
        """Uniform(0.5, 1.5) factors scaled so that ``mean(W H) = mean(|x|^2) / 2``."""
        x = np.asarray(x)
        rng = np.random.default_rng(rng)
        n_freq, n_frames = x.shape
        W = rng.uniform(0.5, 1.5, size=(n_freq, rank))
        H = rng.uniform(0.5, 1.5, size=(rank, n_frames))
        target = np.mean(np.abs(x) ** 2) / 2
        if target <= 0:
            target = 1.0
        scale = np.sqrt(target / np.mean(W @ H))
        return cls(W * scale, H * scale, eps)


def is_divergence(V, V_hat) -> float:
    """Itakura-Saito divergence ``sum(V/V_hat - log(V/V_hat) - 1)``.

    Zero entries of ``V`` follow the ``0 log 0 = 0`` convention.
    """
    V = np.asarray(V, dtype=np.float64)
    V_hat = np.asarray(V_hat, dtype=np.float64)
    if np.any(V < 0):
        raise ValueError("V must be nonnegative")
    if np.any(V_hat <= 0):
        raise ValueError("V_hat must be strictly positive")
    ratio = V / V_hat
    with np.errstate(divide="ignore"):
        log_ratio = np.where(ratio > 0, np.log(np.where(ratio > 0, ratio, 1.0)), 0.0)
    return float(np.sum(ratio - log_ratio - 1.0))


def mu_update_step(model: NmfModel, V) -> NmfModel:
    """One multiplicative IS-NMF sweep, H first and then W."""
    V = np.asarray(V, dtype=np.float64)
    if not np.all(np.isfinite(V)):
        raise ValueError("residual power contains non-finite values")
    if V.shape != model.shape:
        raise ValueError(f"residual shape {V.shape} does not match model shape {model.shape}")
    W, H, eps = model.W, model.H, model.eps

    V_hat = W @ H
    H = H * (W.T @ (V / V_hat**2)) / (W.T @ (1.0 / V_hat))
    H = np.maximum(H, eps)

    V_hat = W @ H
    W = W * ((V / V_hat**2) @ H.T) / ((1.0 / V_hat) @ H.T)
    W = np.maximum(W, eps)

    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(H))):
        raise FloatingPointError("NMF update produced non-finite factors")
    return NmfModel(W, H, eps)


def fit(model: NmfModel, V, n_iter: int) -> NmfModel:
    for _ in range(n_iter):
        model = mu_update_step(model, V)
    return model


def log_likelihood(x, s, model: NmfModel) -> float:
    """``log p(x | s)`` under the complex Gaussian noise model."""
    var = model.noise_variance()
    resid = np.abs(np.asarray(x) - np.asarray(s)) ** 2
    return float(-np.sum(np.log(np.pi * var) + resid / var))
