"""Score models ``S(s_t, [v], t)`` and denoising score matching.

The complex score convention is ``score(z) = -(z - m) / var`` for
``z ~ N_C(m, var)``, i.e. half the gradient of the log-density taken with
respect to the real coordinates ``(Re z, Im z)`` and packed as ``a + ib``.

Prior file layout (all little-endian)::

    b"UDPRIOR1"  u32 F  u32 T  u32 conditional
    float64 Re(mu)[F*T]  Im(mu)[F*T]  c[F*T]
    if conditional: float64 Re(A)[p*F*T]  Im(A)[p*F*T]

Every ``F*T`` block is column-major over ``(F, T)``; ``A`` is stored one
embedding dimension after another and ``p`` is recovered from the payload size.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .sde import DiffusionSchedule
from .spectral import sample_complex_gaussian, standard_complex_normal

PRIOR_MAGIC = b"UDPRIOR1"
DEFAULT_T_MIN = 0.03


@runtime_checkable
class ScoreModel(Protocol):
    conditional: bool

    def evaluate(self, s_t: np.ndarray, t: float, v=None) -> np.ndarray: ...


def pool_embedding(v) -> np.ndarray:
    """Mean over video frames of a ``(T_v, p)`` embedding."""
    data = np.asarray(getattr(v, "data", v), dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError(f"visual embedding must be a non-empty (T_v, p) array, got {data.shape}")
    return data.mean(axis=0)


@dataclass
class GaussianPrior:
    """Diagonal complex Gaussian prior ``N_C(mu + A pool(v), diag(c))``.

    ``A`` has shape ``(F, T, p)`` and is ``None`` for an unconditional prior.
    """

    mu: np.ndarray
    c: np.ndarray
    A: np.ndarray | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.complex128)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.mu.ndim != 2 or self.c.shape != self.mu.shape:
            raise ValueError(f"mu {self.mu.shape} and c {self.c.shape} must be equal 2-D shapes")
        if np.any(self.c <= 0):
            raise ValueError("prior variance c must be strictly positive")
        if self.A is not None:
            self.A = np.asarray(self.A, dtype=np.complex128)
            if self.A.ndim != 3 or self.A.shape[:2] != self.mu.shape:
                raise ValueError(f"A must have shape {self.mu.shape + ('p',)}, got {self.A.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mu.shape

    @property
    def conditional(self) -> bool:
        return self.A is not None

    @property
    def embedding_dim(self) -> int | None:
        return None if self.A is None else self.A.shape[2]

    def effective_mean(self, v=None) -> np.ndarray:
        if self.A is None:
            return self.mu
        if v is None:
            raise ValueError("conditional prior requires a visual embedding")
        pooled = pool_embedding(v)
        if pooled.shape[0] != self.A.shape[2]:
            raise ValueError(f"embedding dim {pooled.shape[0]} != prior dim {self.A.shape[2]}")
        return self.mu + self.A @ pooled

    def sample(self, rng: np.random.Generator, v=None) -> np.ndarray:
        return sample_complex_gaussian(self.effective_mean(v), self.c, rng)

    def copy(self) -> "GaussianPrior":
        return GaussianPrior(self.mu.copy(), self.c.copy(), None if self.A is None else self.A.copy())


def gaussian_score(prior: GaussianPrior, s_t, t: float, sched: DiffusionSchedule, v=None) -> np.ndarray:
    s_t = np.asarray(s_t)
    if s_t.shape != prior.shape:
        raise ValueError(f"state shape {s_t.shape} does not match prior shape {prior.shape}")
    delta = sched.delta(t)
    var = delta**2 * prior.c + sched.sigma_sq(t)
    return -(s_t - delta * prior.effective_mean(v)) / var


@dataclass
class GaussianScoreModel:
    """Exact marginal score of a :class:`GaussianPrior` under the diffusion."""

    prior: GaussianPrior
    schedule: DiffusionSchedule

    @property
    def conditional(self) -> bool:
        return self.prior.conditional

    def evaluate(self, s_t, t, v=None):
        return gaussian_score(self.prior, s_t, t, self.schedule, v)


def _sample_times(n, rng, t_min):
    return rng.uniform(t_min, 1.0, size=n)


def dsm_loss(
    model,
    batch,
    sched: DiffusionSchedule,
    rng: np.random.Generator,
    visual=None,
    t_min: float = DEFAULT_T_MIN,
    t=None,
    zeta=None,
) -> float:
    """Monte-Carlo denoising score matching loss ``mean ||sigma(t) S + zeta||^2``.

    ``t`` and ``zeta`` may be injected to make the draw reproducible in tests.
    """
    batch = np.asarray(batch)
    if batch.ndim == 2:
        batch = batch[None]
    if batch.shape[0] == 0:
        raise ValueError("empty training batch")
    n = batch.shape[0]
    t = _sample_times(n, rng, t_min) if t is None else np.broadcast_to(t, (n,))
    zeta = standard_complex_normal(batch.shape, rng) if zeta is None else np.asarray(zeta)
    total = 0.0
    for k in range(n):
        sigma = np.sqrt(sched.sigma_sq(t[k]))
        s_t = sched.delta(t[k]) * batch[k] + sigma * zeta[k]
        v = None if visual is None else visual[k]
        resid = sigma * model.evaluate(s_t, t[k], v) + zeta[k]
        total += np.sum(np.abs(resid) ** 2)
    return float(total / n)


@dataclass
class PriorGradient:
    mu: np.ndarray
    c: np.ndarray
    A: np.ndarray | None = None


def gaussian_dsm_loss_and_grad(
    prior: GaussianPrior,
    batch,
    sched: DiffusionSchedule,
    t,
    zeta,
    visual=None,
) -> tuple[float, PriorGradient]:
    """DSM loss of a Gaussian prior and its gradient w.r.t. ``(mu, c, A)``.

    Complex gradients are packed as ``dL/dRe + i dL/dIm``.
    """
    batch = np.asarray(batch)
    t = np.asarray(t, dtype=np.float64)
    delta = sched.delta(t)[:, None, None]
    sig_sq = sched.sigma_sq(t)[:, None, None]
    sigma = np.sqrt(sig_sq)
    pooled = None
    if prior.conditional:
        if visual is None:
            raise ValueError("conditional prior requires visual embeddings for training")
        pooled = np.stack([pool_embedding(v) for v in visual])
        mean = prior.mu[None] + np.einsum("ftp,bp->bft", prior.A, pooled)
    else:
        mean = prior.mu[None]
    var = delta**2 * prior.c[None] + sig_sq
    s_t = delta * batch + sigma * zeta
    r = s_t - delta * mean
    e = zeta - sigma * r / var
    n = batch.shape[0]
    loss = float(np.sum(np.abs(e) ** 2) / n)

    g_mu_each = 2 * sigma * delta / var * e
    g_mu = g_mu_each.sum(axis=0) / n
    g_c = np.sum(2 * np.real(np.conj(e) * sigma * r) * delta**2 / var**2, axis=0) / n
    g_A = None
    if pooled is not None:
        g_A = np.einsum("bft,bp->ftp", g_mu_each, pooled) / n
    return loss, PriorGradient(g_mu, g_c, g_A)


@dataclass
class DsmConfig:
    steps: int = 1000
    batch_size: int = 16
    learning_rate: float = 1e-4
    optimizer: str = "sgd"  # "sgd", "momentum" or "adam"
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    t_min: float = DEFAULT_T_MIN
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("steps >= 0, batch_size >= 1 and learning_rate > 0 are required")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"DSM loss became non-finite ({loss}) at step {step}")
        self.step = step


@dataclass
class _Optimizer:
    cfg: DsmConfig
    state: dict = field(default_factory=dict)
    count: int = 0

    def step(self, name, param, grad):
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            return param - cfg.learning_rate * grad
        if cfg.optimizer == "momentum":
            buf = cfg.momentum * self.state.get(name, 0.0) + grad
            self.state[name] = buf
            return param - cfg.learning_rate * buf
        b1, b2 = cfg.betas
        m, v = self.state.get(name, (0.0, 0.0))
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * np.abs(grad) ** 2
        self.state[name] = (m, v)
        m_hat = m / (1 - b1**self.count)
        v_hat = v / (1 - b2**self.count)
        return param - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + 1e-8)


def train_dsm(
    prior: GaussianPrior,
    dataset,
    sched: DiffusionSchedule,
    cfg: DsmConfig | None = None,
    visual=None,
    rng: np.random.Generator | None = None,
) -> tuple[GaussianPrior, list[float]]:
    """Fit a Gaussian prior by stochastic gradient descent on the DSM loss.

    The variance is optimized through ``log c`` to keep it positive.  Returns
    the updated prior and the per-step loss history.
    """
    cfg = cfg or DsmConfig()
    dataset = np.asarray(dataset, dtype=np.complex128)
    if dataset.ndim == 2:
        dataset = dataset[None]
    if dataset.shape[0] == 0:
        raise ValueError("training dataset is empty")
    if dataset.shape[1:] != prior.shape:
        raise ValueError(f"dataset items {dataset.shape[1:]} do not match prior {prior.shape}")
    if prior.conditional and (visual is None or len(visual) != dataset.shape[0]):
        raise ValueError("conditional training needs one visual embedding per dataset item")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng

    mu = prior.mu.copy()
    log_c = np.log(prior.c)
    A = None if prior.A is None else prior.A.copy()
    opt = _Optimizer(cfg)
    history: list[float] = []
    # overflow is caught below as a non-finite loss
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(cfg.steps):
            idx = rng.integers(0, dataset.shape[0], size=cfg.batch_size)
            t = _sample_times(cfg.batch_size, rng, cfg.t_min)
            zeta = standard_complex_normal((cfg.batch_size,) + prior.shape, rng)
            current = GaussianPrior(mu, np.exp(log_c), A)
            vis = None if visual is None or A is None else [visual[i] for i in idx]
            loss, grad = gaussian_dsm_loss_and_grad(current, dataset[idx], sched, t, zeta, vis)
            if not np.isfinite(loss):
                raise TrainingDiverged(step, loss)
            history.append(loss)
            opt.count += 1
            mu = opt.step("mu", mu, grad.mu)
            log_c = opt.step("log_c", log_c, grad.c * np.exp(log_c))
            if A is not None:
                A = opt.step("A", A, grad.A)
    return GaussianPrior(mu, np.exp(log_c), A), history


def save_prior(path, prior: GaussianPrior) -> None:
    n_freq, n_frames = prior.shape
    parts = [
        PRIOR_MAGIC,
        struct.pack("<III", n_freq, n_frames, int(prior.conditional)),
        _col_major(prior.mu.real),
        _col_major(prior.mu.imag),
        _col_major(prior.c),
    ]
    if prior.A is not None:
        A = np.moveaxis(prior.A, 2, 0)
        parts.append(b"".join(_col_major(a.real) for a in A))
        parts.append(b"".join(_col_major(a.imag) for a in A))
    Path(path).write_bytes(b"".join(parts))


def _col_major(a) -> bytes:
    return np.asarray(a, dtype="<f8").ravel(order="F").tobytes()


def load_prior(path) -> GaussianPrior:
    raw = Path(path).read_bytes()
    header = len(PRIOR_MAGIC) + 12
    if raw[: len(PRIOR_MAGIC)] != PRIOR_MAGIC:
        raise ValueError(f"{path}: not a prior file (bad magic)")
    if len(raw) < header:
        raise ValueError(f"{path}: truncated header ({len(raw)} bytes)")
    n_freq, n_frames, flag = struct.unpack("<III", raw[len(PRIOR_MAGIC) : header])
    block = n_freq * n_frames
    body = np.frombuffer(raw, dtype="<f8", offset=header) if len(raw) > header else np.empty(0)
    if (len(raw) - header) % 8:
        raise ValueError(f"{path}: payload is not a whole number of float64 values")
    if flag not in (0, 1):
        raise ValueError(f"{path}: invalid conditional flag {flag}")
    if not flag and body.size != 3 * block:
        raise ValueError(f"{path}: expected {header + 24 * block} bytes, got {len(raw)}")
    if flag and (body.size <= 3 * block or (body.size - 3 * block) % (2 * block)):
        raise ValueError(f"{path}: conditional payload size {body.size * 8} bytes is inconsistent")

    def unflat(vec):
        return vec.reshape(n_freq, n_frames, order="F")

    mu = unflat(body[:block]) + 1j * unflat(body[block : 2 * block])
    c = unflat(body[2 * block : 3 * block])
    A = None
    if flag:
        p = (body.size - 3 * block) // (2 * block)
        rest = body[3 * block :]
        re = np.stack([unflat(r) for r in rest[: p * block].reshape(p, block)])
        im = np.stack([unflat(r) for r in rest[p * block :].reshape(p, block)])
        A = np.moveaxis(re + 1j * im, 0, 2)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(c))):
        raise ValueError(f"{path}: non-finite prior parameters")
    return GaussianPrior(mu, c, A)
