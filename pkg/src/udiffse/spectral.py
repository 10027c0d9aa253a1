"""Waveforms, STFT analysis/synthesis, SNR mixing and complex Gaussian draws.

All modeling happens on complex ``(F, T)`` arrays.  When a flat vector of
length ``F*T`` is needed the flattening is column-major (frequency index
runs fastest), see :meth:`Spectrogram.flatten`.

Framing convention: the signal is reflection-padded by ``window_length // 2``
samples on both sides, frames start every ``hop`` samples and a trailing
partial frame is dropped, so ``T = 1 + len(w) // hop``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

DEFAULT_SAMPLE_RATE = 16000


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 510
    hop: int = 128
    window: str = "hann"

    def __post_init__(self):
        if self.window_length < 2:
            raise ValueError("window_length must be at least 2")
        if not 1 <= self.hop <= self.window_length:
            raise ValueError(
                f"hop must lie in [1, window_length], got hop={self.hop}, "
                f"window_length={self.window_length}"
            )

    @property
    def n_bins(self) -> int:
        return self.window_length // 2 + 1

    def taper(self) -> np.ndarray:
        # periodic Hann: the squared-window overlap-add normalizer stays smooth
        return get_window(self.window, self.window_length, fftbins=True)

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop


@dataclass
class Spectrogram:
    """Complex ``(F, T)`` STFT array with the config that produced it.

    ``length`` is the sample count of the analysed waveform, used by
    :func:`istft` to trim the reconstruction.
    """

    data: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    length: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ValueError(f"spectrogram data must be a non-empty 2-D array, got {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def flatten(self) -> np.ndarray:
        return self.data.ravel(order="F")

    @classmethod
    def unflatten(cls, vec, n_bins, config=None, length=None):
        vec = np.asarray(vec)
        return cls(vec.reshape(n_bins, -1, order="F"), config or StftConfig(), length)


def _as_samples(w) -> tuple[np.ndarray, int]:
    if isinstance(w, Waveform):
        return w.samples, w.sample_rate
    return Waveform(w).samples, DEFAULT_SAMPLE_RATE


def stft(w, cfg: StftConfig | None = None) -> Spectrogram:
    cfg = cfg or StftConfig()
    x, _ = _as_samples(w)
    if x.size == 0:
        raise ValueError("cannot analyse an empty waveform")
    pad = cfg.window_length // 2
    padded = np.pad(x, pad, mode="reflect") if x.size > 1 else np.pad(x, pad, mode="edge")
    n_frames = cfg.n_frames(x.size)
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.window_length)[:: cfg.hop]
    frames = frames[:n_frames] * cfg.taper()
    data = np.fft.rfft(frames, n=cfg.window_length, axis=-1).T
    return Spectrogram(data, cfg, x.size)


def istft(S: Spectrogram, length: int | None = None, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`.

    Frames are re-windowed and divided by the overlap-added squared window,
    which makes ``istft(stft(w))`` reproduce ``w``.
    """
    cfg = S.config
    data = np.asarray(S.data)
    if not np.all(np.isfinite(data)):
        raise ValueError("spectrogram contains non-finite values")
    if data.shape[0] != cfg.n_bins:
        raise ValueError(f"expected {cfg.n_bins} frequency bins, got {data.shape[0]}")
    n_frames = data.shape[1]
    if length is None:
        length = S.length if S.length is not None else cfg.hop * (n_frames - 1)

    win = cfg.taper()
    frames = np.fft.irfft(data.T, n=cfg.window_length, axis=-1) * win
    total = cfg.window_length + cfg.hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    win_sq = win**2
    for k in range(n_frames):
        sl = slice(k * cfg.hop, k * cfg.hop + cfg.window_length)
        out[sl] += frames[k]
        norm[sl] += win_sq
    nz = norm > 1e-11
    out[nz] /= norm[nz]
    out[~nz] = 0.0

    pad = cfg.window_length // 2
    y = out[pad : pad + length]
    if y.size < length:
        y = np.pad(y, (0, length - y.size))
    return Waveform(y, sample_rate)


def signal_power(x) -> float:
    x = np.asarray(x)
    return float(np.mean(np.abs(x) ** 2))


def mix_at_snr(clean, noise, snr_db: float) -> Waveform:
    """Return ``clean + alpha * noise`` with ``alpha`` chosen so the mixture has ``snr_db``.

    The noise is tiled or truncated to the clean length.
    """
    s, sr = _as_samples(clean)
    n, _ = _as_samples(noise)
    if n.size == 0:
        raise ValueError("noise waveform is empty")
    if n.size < s.size:
        n = np.tile(n, int(np.ceil(s.size / n.size)))
    n = n[: s.size]
    p_clean = signal_power(s)
    p_noise = signal_power(n)
    if p_clean == 0.0:
        raise ValueError("clean signal is silent; SNR is undefined")
    if p_noise == 0.0:
        raise ValueError("noise signal is silent; cannot reach a finite SNR")
    alpha = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(s + alpha * n, sr)


def sample_complex_gaussian(mean, variance, rng: np.random.Generator) -> np.ndarray:
    """Circular complex Gaussian draw with ``E|z - mean|^2 = variance``.

    Real and imaginary parts are independent, each with variance ``variance / 2``.
    """
    mean = np.asarray(mean.data if isinstance(mean, Spectrogram) else mean)
    variance = np.asarray(variance, dtype=np.float64)
    if np.any(variance < 0):
        raise ValueError("variance must be nonnegative")
    scale = np.sqrt(np.broadcast_to(variance, mean.shape) / 2.0)
    draw = rng.standard_normal(mean.shape) + 1j * rng.standard_normal(mean.shape)
    return mean + scale * draw


def standard_complex_normal(shape, rng: np.random.Generator) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def read_wav(path) -> Waveform:
    """Read a mono 16 kHz WAV file (16-bit PCM or 32-bit float)."""
    sr, data = wavfile.read(Path(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: only mono audio is supported, got {data.shape[1]} channels")
    if sr != DEFAULT_SAMPLE_RATE:
        raise ValueError(f"{path}: expected {DEFAULT_SAMPLE_RATE} Hz, got {sr} Hz")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, sr)


def write_wav(path, w: Waveform, pcm16: bool = False) -> None:
    if w.sample_rate != DEFAULT_SAMPLE_RATE:
        raise ValueError(f"only {DEFAULT_SAMPLE_RATE} Hz output is supported")
    if pcm16:
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = w.samples.astype(np.float32)
    wavfile.write(Path(path), w.sample_rate, data)
