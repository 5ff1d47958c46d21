"""Vocal tract length perturbation on linear-frequency power spectrograms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class VtlpConfig:
    alpha_min: float = 0.9
    alpha_max: float = 1.1
    boundary_hz: float = 4800.0
    replicas: int = 7

    def __post_init__(self):
        if not 0 < self.alpha_min <= self.alpha_max:
            raise ConfigurationError(f"need 0 < alpha_min <= alpha_max, got {self.alpha_min}, {self.alpha_max}")
        if self.replicas < 0:
            raise ConfigurationError("replicas must be >= 0")
        if self.boundary_hz <= 0:
            raise ConfigurationError("boundary_hz must be positive")

    def validate_rate(self, sample_rate: float):
        if self.boundary_hz >= sample_rate / 2:
            raise ConfigurationError(f"boundary {self.boundary_hz} Hz must be below nyquist {sample_rate / 2}")


def _check_alpha(alpha):
    if alpha <= 0:
        raise ConfigurationError(f"warp factor must be positive, got {alpha}")


def warp_frequency(f, alpha: float, boundary_hz: float, nyquist: float):
    """Piecewise-linear VTLP warp: ``f * alpha`` up to a knee, then a straight
    line to ``nyquist``.  Fixes 0 and ``nyquist``."""
    _check_alpha(alpha)
    f = np.asarray(f, dtype=np.float64)
    if alpha == 1.0:
        return f.copy()
    knee = boundary_hz * min(alpha, 1.0) / alpha
    upper = nyquist - (nyquist - boundary_hz * min(alpha, 1.0)) * (nyquist - f) / (nyquist - knee)
    return np.where(f <= knee, f * alpha, upper)


def unwarp_frequency(g, alpha: float, boundary_hz: float, nyquist: float):
    """Inverse of :func:`warp_frequency`."""
    _check_alpha(alpha)
    g = np.asarray(g, dtype=np.float64)
    knee = boundary_hz * min(alpha, 1.0) / alpha
    top = boundary_hz * min(alpha, 1.0)
    upper = nyquist - (nyquist - g) * (nyquist - knee) / (nyquist - top)
    return np.where(g <= top, g / alpha, upper)


def vtlp_spectrogram(power: np.ndarray, alpha: float, config: VtlpConfig, sample_rate: float) -> np.ndarray:
    """Warp each frame of a (T, n_fft//2+1) power spectrogram along frequency.

    Output bin ``g`` takes the (linearly interpolated) input power at the
    frequency that warps onto ``g``; each frame is then rescaled to keep its
    total power.
    """
    _check_alpha(alpha)
    config.validate_rate(sample_rate)
    power = np.asarray(power)
    if alpha == 1.0:
        return power.copy()
    nyquist = sample_rate / 2
    n_bins = power.shape[-1]
    freqs = np.linspace(0.0, nyquist, n_bins)
    src = unwarp_frequency(freqs, alpha, config.boundary_hz, nyquist)
    pos = src / nyquist * (n_bins - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_bins - 2)
    frac = pos - lo
    out = power[..., lo] * (1 - frac) + power[..., lo + 1] * frac
    before = power.sum(axis=-1, keepdims=True)
    after = out.sum(axis=-1, keepdims=True)
    scale = np.divide(before, after, out=np.ones_like(after, dtype=np.float64), where=after > 0)
    return (out * scale).astype(power.dtype, copy=False)


def draw_alphas(n_records: int, config: VtlpConfig, seed: int) -> np.ndarray:
    """Warp factors for every (record, replica), shape (n_records, replicas)."""
    rng = np.random.default_rng(seed)
    return rng.uniform(config.alpha_min, config.alpha_max, size=(n_records, config.replicas))
