"""Evaluation metrics: SI-SDR and real-time factor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SI_SDR_CAP_DB = 100.0


@dataclass
class EvalResult:
    si_sdr_db: float
    rtf: float

    def __post_init__(self):
        if self.rtf < 0:
            raise ValueError("rtf must be nonnegative")


def _samples(w):
    return np.asarray(getattr(w, "samples", w), dtype=np.float64).ravel()


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, no mean removal; a perfect match returns 100 dB."""
    est = _samples(estimate)
    ref = _samples(reference)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.size} vs {ref.size}")
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0:
        raise ValueError("reference has zero energy")
    alpha = np.dot(est, ref) / ref_energy
    target = alpha * ref
    resid = np.dot(target - est, target - est)
    signal = np.dot(target, target)
    if resid == 0:
        return SI_SDR_CAP_DB
    if signal == 0:
        return -SI_SDR_CAP_DB
    return float(min(10 * np.log10(signal / resid), SI_SDR_CAP_DB))


def rtf(stats) -> float:
    """Wall-clock seconds spent per second of processed audio."""
    if not stats.audio_duration > 0:
        raise ValueError("audio duration must be positive to compute a real-time factor")
    return stats.wall_time / stats.audio_duration
