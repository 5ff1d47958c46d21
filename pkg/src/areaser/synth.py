"""Synthetic four-class corpus written straight into a feature store.

Each class puts its energy in a different frequency band (with per-utterance
jitter in centre, width, level and temporal envelope) on top of a noise
floor, so the classes are separable but not trivially identical.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .audio import FeatureParams
from .store import LABELS, FeatureStore

SYNTH_PARAMS = FeatureParams(sample_rate=16000, n_fft=512, win_length=512, hop_length=800, n_mels=20,
                             fmin=0.0, fmax=8000.0)
BAND_CENTERS_HZ = (400.0, 1100.0, 2400.0, 4200.0)


def synth_power(label: int, n_frames: int, params: FeatureParams, rng: np.random.Generator) -> np.ndarray:
    freqs = np.linspace(0, params.sample_rate / 2, params.n_bins)
    center = BAND_CENTERS_HZ[label] * rng.uniform(0.92, 1.08)
    width = center * rng.uniform(0.10, 0.18)
    level = rng.uniform(0.5, 2.0)
    t = np.arange(n_frames)
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * t / rng.uniform(8, 30) + rng.uniform(0, 2 * np.pi))
    envelope *= rng.uniform(0.7, 1.3, size=n_frames)
    band = np.exp(-0.5 * ((freqs - center) / width) ** 2)
    noise = rng.exponential(0.02, size=(n_frames, params.n_bins))
    return noise + level * envelope[:, None] * band[None, :]


def make_synthetic_store(out_dir, per_class: int = 25, seed: int = 0, params: FeatureParams = SYNTH_PARAMS,
                         min_seconds: float = 2.5, max_seconds: float = 4.0) -> FeatureStore:
    """Write ``4 * per_class`` utterances and a ``manifest.csv`` listing them."""
    rng = np.random.default_rng(seed)
    store = FeatureStore.create(out_dir, params, {"synthetic": {"per_class": per_class, "seed": seed}})
    rows = []
    for i in range(per_class):
        for label, name in enumerate(LABELS):
            uid = f"synth_{name}_{i:04d}"
            n_frames = params.frames_for(rng.uniform(min_seconds, max_seconds))
            rec = store.add_power(uid, name, synth_power(label, n_frames, params, rng))
            rows.append((uid, rec.path, name))
    store.write_index()
    with open(Path(out_dir) / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utterance_id", "feature_path", "label"])
        w.writerows(rows)
    return store
