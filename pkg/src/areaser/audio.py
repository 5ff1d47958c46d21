"""Waveform to logMel features, and fixed-window segmentation of utterances."""
from __future__ import annotations

import hashlib
import json
import math
import wave
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np

from .errors import ConfigurationError, InputError

LOG_FLOOR = 1e-10
SILENCE = math.log(LOG_FLOOR)


@dataclass(frozen=True)
class FeatureParams:
    sample_rate: int = 16000
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 160
    n_mels: int = 40
    fmin: float = 0.0
    fmax: float = 8000.0

    def __post_init__(self):
        if self.sample_rate <= 0 or self.hop_length < 1 or self.n_mels < 1:
            raise ConfigurationError("sample_rate, hop_length and n_mels must be positive")
        if self.win_length > self.n_fft:
            raise ConfigurationError(f"win_length {self.win_length} exceeds n_fft {self.n_fft}")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigurationError(f"need 0 <= fmin < fmax <= nyquist, got {self.fmin}, {self.fmax}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def frames_for(self, seconds: float) -> int:
        return int(round(seconds * self.sample_rate / self.hop_length))

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InputError("sample_rate must be positive")
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains non-finite samples")


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM WAV file; multi-channel audio is averaged to mono."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getsampwidth() != 2:
                raise InputError(f"{path}: only 16-bit PCM is supported")
            channels = fh.getnchannels()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise InputError(f"{path}: unreadable WAV ({exc})") from exc
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return Waveform(data, rate)


def write_wav(path, wave_: Waveform) -> None:
    pcm = np.clip(np.round(wave_.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(wave_.sample_rate))
        fh.writeframes(pcm.tobytes())


def resample_linear(wave_: Waveform, target_rate: int) -> Waveform:
    if wave_.sample_rate == target_rate:
        return wave_
    n_out = int(round(len(wave_.samples) * target_rate / wave_.sample_rate))
    t_out = np.arange(n_out) / target_rate
    t_in = np.arange(len(wave_.samples)) / wave_.sample_rate
    return Waveform(np.interp(t_out, t_in, wave_.samples), target_rate)


def hann_window(length: int) -> np.ndarray:
    """Periodic Hann window."""
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / length)


def stft_power(wave_: Waveform, n_fft: int, hop_length: int, win_length: Optional[int] = None) -> np.ndarray:
    """Centered, reflect-padded, Hann-windowed power spectrogram, shape (T, n_fft//2 + 1)."""
    win_length = n_fft if win_length is None else win_length
    if win_length > n_fft or hop_length < 1:
        raise ConfigurationError(f"need win_length <= n_fft and hop >= 1, got {win_length}, {n_fft}, {hop_length}")
    x = wave_.samples
    pad = n_fft // 2
    if len(x) <= pad:
        raise InputError(f"waveform of {len(x)} samples is shorter than half a window ({pad + 1} needed)")
    xp = np.pad(x, pad, mode="reflect")
    window = np.zeros(n_fft)
    start = (n_fft - win_length) // 2
    window[start:start + win_length] = hann_window(win_length)
    n_frames = 1 + len(x) // hop_length
    idx = np.arange(n_fft)[None, :] + hop_length * np.arange(n_frames)[:, None]
    spec = np.fft.rfft(xp[idx] * window, n=n_fft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep, f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0, fmax: Optional[float] = None) -> np.ndarray:
    """Area-normalised triangular filters on the Slaney mel scale, shape (n_mels, n_fft//2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ConfigurationError(f"need 0 <= fmin < fmax <= nyquist, got {fmin}, {fmax}")
    fft_freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if empty.size:
        raise ConfigurationError(f"{n_mels} mel filters too many for n_fft={n_fft}: filters {empty.tolist()} are empty")
    return weights


def mel_center_frequencies(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def power_to_log_mel(power: np.ndarray, params: FeatureParams, filters: Optional[np.ndarray] = None) -> np.ndarray:
    """Natural log of mel-pooled power, floored at ``LOG_FLOOR``; shape (T, n_mels)."""
    if filters is None:
        filters = mel_filterbank(params.n_mels, params.n_fft, params.sample_rate, params.fmin, params.fmax)
    return np.log(np.maximum(power @ filters.T, LOG_FLOOR))


@dataclass
class LogMelSpectrogram:
    frames: np.ndarray  # (T, n_mels)
    params: FeatureParams


def log_mel(wave_: Waveform, params: FeatureParams, return_power: bool = False):
    wave_ = resample_linear(wave_, params.sample_rate)
    power = stft_power(wave_, params.n_fft, params.hop_length, params.win_length)
    spec = LogMelSpectrogram(power_to_log_mel(power, params), params)
    return (spec, power) if return_power else spec


# ---------------------------------------------------------------------------
# segmentation


@dataclass
class Segment:
    features: np.ndarray  # (window_frames, n_mels)
    utterance_id: str
    label: int
    start_frame: int


def segment_starts(n_frames: int, window: int, hop: int) -> List[int]:
    """Window start frames: multiples of ``hop``, plus an end-aligned window
    when the tail would otherwise be missed.  Short inputs get one start at 0."""
    if window < 1 or hop < 1:
        raise ConfigurationError(f"window and hop must be positive, got {window}, {hop}")
    if n_frames <= window:
        return [0]
    starts = list(range(0, n_frames - window + 1, hop))
    if starts[-1] + window < n_frames:
        starts.append(n_frames - window)
    return starts


def segment_utterance(frames: np.ndarray, window_frames: int, hop_frames: int, utterance_id: str,
                      label: int, pad_value: float = SILENCE) -> List[Segment]:
    """Cut a (T, M) feature matrix into overlapping windows of ``window_frames``.

    Inputs shorter than one window yield a single segment right-padded with
    ``pad_value``.
    """
    frames = np.asarray(frames)
    T = frames.shape[0]
    out = []
    for s in segment_starts(T, window_frames, hop_frames):
        seg = frames[s:s + window_frames]
        if seg.shape[0] < window_frames:
            pad = np.full((window_frames - seg.shape[0],) + frames.shape[1:], pad_value, dtype=frames.dtype)
            seg = np.concatenate([seg, pad], axis=0)
        out.append(Segment(seg, utterance_id, label, s))
    return out


def segment_frames(params: FeatureParams, window_seconds: float, overlap_seconds: float):
    """(window, hop) in frames for a given window length and overlap in seconds."""
    if window_seconds <= 0:
        raise ConfigurationError("window length must be positive")
    if not 0 <= overlap_seconds < window_seconds:
        raise ConfigurationError("overlap must be in [0, window)")
    window = params.frames_for(window_seconds)
    hop = params.frames_for(window_seconds - overlap_seconds)
    if window < 1 or hop < 1:
        raise ConfigurationError("window/hop shorter than one frame")
    return window, hop


def segment_log_mel(spec: LogMelSpectrogram, utterance_id: str, label: int, window_seconds: float = 2.0,
                    overlap_seconds: float = 1.0) -> List[Segment]:
    window, hop = segment_frames(spec.params, window_seconds, overlap_seconds)
    return segment_utterance(spec.frames, window, hop, utterance_id, label)
