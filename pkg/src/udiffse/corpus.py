"""Synthetic scenes: quasi-speech sources, noises, mixtures and visual surrogates.

Every scene is generated from one integer seed.  Clean, noise and visual
components get independent child seeds, so changing the noise kind never
changes the clean signal.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .av_fusion import EMBED_DIM, VIDEO_FPS, VisualEmbedding, n_video_frames, write_visual_embedding
from .score_models import GaussianPrior
from .spectral import (
    DEFAULT_SAMPLE_RATE,
    Spectrogram,
    StftConfig,
    Waveform,
    istft,
    mix_at_snr,
    write_wav,
)

SOURCE_KINDS = ("harmonic", "am-modulated", "gaussian-prior-draw")
NOISE_KINDS = ("white", "lowpass", "babble-surrogate")
DEFAULT_DURATION = 2.04
SOURCE_RMS = 0.05
_DIRECTION_SEED = 20240101


@dataclass(frozen=True)
class SceneSpec:
    duration: float = DEFAULT_DURATION
    snr_db: float = 0.0
    source_kind: str = "harmonic"
    noise_kind: str = "white"
    seed: int = 0

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.source_kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.source_kind!r}; choose from {SOURCE_KINDS}")
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.noise_kind!r}; choose from {NOISE_KINDS}")


@dataclass
class Scene:
    clean: Waveform
    noisy: Waveform
    visual: VisualEmbedding
    spec: SceneSpec
    source_stft: np.ndarray | None = None


def _n_samples(duration, sr=DEFAULT_SAMPLE_RATE):
    return int(round(duration * sr))


def _envelope(n, rng, sr=DEFAULT_SAMPLE_RATE, rate_hz=4.0):
    # syllable-like amplitude contour
    t = np.arange(n) / sr
    phase = rng.uniform(0, 2 * np.pi)
    env = 0.5 * (1 + np.sin(2 * np.pi * rate_hz * t + phase))
    return env**1.5


def harmonic_source(n, rng, sr=DEFAULT_SAMPLE_RATE, n_harmonics=5):
    t = np.arange(n) / sr
    f0 = rng.uniform(110, 220)
    vibrato = 1 + 0.02 * np.sin(2 * np.pi * rng.uniform(4, 6) * t)
    phase = 2 * np.pi * np.cumsum(f0 * vibrato) / sr
    out = sum(np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k for k in range(1, n_harmonics + 1))
    return out * _envelope(n, rng, sr)


def am_source(n, rng, sr=DEFAULT_SAMPLE_RATE):
    t = np.arange(n) / sr
    carriers = rng.uniform(300, 3000, size=2)
    mod = 0.5 * (1 + np.sin(2 * np.pi * rng.uniform(2, 6) * t))
    return mod * sum(np.sin(2 * np.pi * fc * t + rng.uniform(0, 2 * np.pi)) for fc in carriers)


def _normalize_rms(x, rms):
    cur = np.sqrt(np.mean(x**2))
    return x if cur == 0 else x * (rms / cur)


def make_noise(kind, n, rng, sr=DEFAULT_SAMPLE_RATE):
    if kind == "white":
        return rng.standard_normal(n)
    if kind == "lowpass":
        sos = signal.butter(4, 1000, btype="low", fs=sr, output="sos")
        return signal.sosfilt(sos, rng.standard_normal(n))
    if kind == "babble-surrogate":
        return sum(harmonic_source(n, rng, sr) for _ in range(6))
    raise ValueError(f"unknown noise kind {kind!r}")


def speech_like_prior(
    n_bins=256, n_frames=256, rng=None, n_bands=4, floor=1e-3, peak=1.0, sharpness=3.0
) -> GaussianPrior:
    """Zero-mean Gaussian prior whose variance sits in a few time-modulated bands.

    The band layout mimics formant energy: narrow bands (1-2.5% of the bins)
    switched on and off by raised-sine envelopes.  Bins outside the bands keep
    a small floor variance.
    """
    rng = np.random.default_rng(rng)
    f = np.arange(n_bins)[:, None]
    t = np.arange(n_frames)[None, :]
    c = np.full((n_bins, n_frames), floor)
    for _ in range(n_bands):
        center = rng.uniform(0.05, 0.6) * n_bins
        width = rng.uniform(0.01, 0.025) * n_bins
        period = rng.uniform(0.25, 0.6) * n_frames
        phase = rng.uniform(0, 2 * np.pi)
        temporal = (0.5 * (1 + np.sin(2 * np.pi * t / period + phase))) ** sharpness
        c = c + peak * np.exp(-0.5 * ((f - center) / width) ** 2) * temporal
    return GaussianPrior(np.zeros((n_bins, n_frames), dtype=complex), c)


def visual_surrogate(clean: np.ndarray, duration: float, rng, sr=DEFAULT_SAMPLE_RATE, dim=EMBED_DIM, noise=0.01):
    """Rows ``e(t) u + eta`` with ``e`` the clean energy per video frame."""
    n_rows = n_video_frames(duration)
    edges = np.linspace(0, clean.size, n_rows + 1).astype(int)
    energy = np.array([np.mean(clean[a:b] ** 2) if b > a else 0.0 for a, b in zip(edges[:-1], edges[1:])])
    if energy.max() > 0:
        energy = energy / energy.max()
    direction = np.random.default_rng(_DIRECTION_SEED).standard_normal(dim)
    direction /= np.linalg.norm(direction)
    data = energy[:, None] * direction[None, :] + noise * rng.standard_normal((n_rows, dim))
    return VisualEmbedding(data.astype(np.float32), VIDEO_FPS)


def gen_synthetic_scene(
    spec: SceneSpec,
    prior: GaussianPrior | None = None,
    stft_config: StftConfig | None = None,
) -> Scene:
    """Generate one clean/noisy/visual triple.

    ``gaussian-prior-draw`` sources need ``prior``.  The draw is made in the
    STFT domain (kept as ``Scene.source_stft``) and resynthesized; the
    resynthesis is rescaled by the square root of the STFT redundancy so the
    clean signal's STFT carries the prior's energy.  Its length follows the
    prior's frame count.
    """
    seeds = np.random.SeedSequence(spec.seed).spawn(3)
    rng_clean, rng_noise, rng_vis = (np.random.default_rng(s) for s in seeds)
    n = _n_samples(spec.duration)

    if spec.source_kind == "harmonic":
        clean = _normalize_rms(harmonic_source(n, rng_clean), SOURCE_RMS)
    elif spec.source_kind == "am-modulated":
        clean = _normalize_rms(am_source(n, rng_clean), SOURCE_RMS)
    else:
        if prior is None:
            raise ValueError("gaussian-prior-draw sources require a prior")
        cfg = stft_config or StftConfig()
        if prior.shape[0] != cfg.n_bins:
            raise ValueError(f"prior has {prior.shape[0]} bins, STFT config gives {cfg.n_bins}")
        draw = prior.sample(rng_clean)
        clean = istft(Spectrogram(draw, cfg)).samples
        n = clean.size
        clean = clean * np.sqrt(2 * draw.size / n)

    noise = make_noise(spec.noise_kind, n, rng_noise)
    noisy = mix_at_snr(clean, noise, spec.snr_db)
    visual = visual_surrogate(clean, spec.duration, rng_vis)
    return Scene(Waveform(clean), noisy, visual, spec, draw if spec.source_kind == "gaussian-prior-draw" else None)


def write_scene(scene: Scene, directory, name: str, pcm16: bool = False) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "clean": directory / f"{name}_clean.wav",
        "noisy": directory / f"{name}_noisy.wav",
        "visual": directory / f"{name}_visual.avemb",
    }
    write_wav(paths["clean"], scene.clean, pcm16)
    write_wav(paths["noisy"], scene.noisy, pcm16)
    write_visual_embedding(paths["visual"], scene.visual)
    return paths


def write_manifest(path, entries) -> None:
    """One line per scene: ``key=value`` fields separated by spaces."""
    lines = [" ".join(f"{k}={v}" for k, v in entry.items()) for entry in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[dict]:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        entry = {}
        for field in line.split():
            key, sep, value = field.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: malformed field {field!r}")
            entry[key] = value
        for key in ("clean", "noisy", "visual"):
            if key in entry and not Path(entry[key]).is_absolute():
                entry[key] = str(path.parent / entry[key])
        entries.append(entry)
    return entries
