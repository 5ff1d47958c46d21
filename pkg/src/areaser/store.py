"""Feature store: per-utterance tensors plus a JSON-lines index.

Layout of a store directory::

    params.json        feature parameters (and VTLP settings once augmented)
    index.jsonl        one record per utterance, original or augmented
    logmel/<name>.atnt (T, n_mels) log-mel features
    power/<name>.atnt  (T, n_fft//2+1) power spectrogram, the VTLP source
"""
from __future__ import annotations

import csv
import hashlib
import json
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from itertools import repeat
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .audio import FeatureParams, log_mel, power_to_log_mel, read_wav, mel_filterbank
from .augment import VtlpConfig, draw_alphas, vtlp_spectrogram
from .errors import AreaSerError, InputError
from .tensor import load_tensor, save_tensor

LABELS = ("neutral", "excitement", "sadness", "anger")
LABEL_IDS = {name: i for i, name in enumerate(LABELS)}
MANIFEST_COLUMNS = ["utterance_id", "wav_path", "label"]


def label_id(label: str) -> int:
    try:
        return LABEL_IDS[label.strip().lower()]
    except KeyError:
        raise InputError(f"unknown label {label!r}; expected one of {', '.join(LABELS)}") from None


@dataclass
class Record:
    utterance_id: str
    label: str
    path: str
    power_path: str
    frames: int
    params_hash: str
    augmented: bool = False
    alpha: Optional[float] = None
    source_utterance_id: Optional[str] = None
    replica: Optional[int] = None

    @property
    def label_id(self) -> int:
        return LABEL_IDS[self.label]

    @property
    def source(self) -> str:
        return self.source_utterance_id if self.augmented else self.utterance_id

    def to_json(self) -> str:
        d = asdict(self)
        if not self.augmented:
            for k in ("alpha", "source_utterance_id", "replica"):
                d.pop(k)
        return json.dumps(d, sort_keys=True)


def file_stem(utterance_id: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", utterance_id)[:60]
    return f"{hashlib.sha1(utterance_id.encode()).hexdigest()[:10]}_{safe}"


class FeatureStore:
    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "params.json"
        if not meta_path.exists():
            raise InputError(f"{self.root} is not a feature store (no params.json)")
        self.meta = json.loads(meta_path.read_text())
        self.params = FeatureParams(**self.meta["features"])
        self.records: List[Record] = []
        index = self.root / "index.jsonl"
        if index.exists():
            for line in index.read_text().splitlines():
                if line.strip():
                    self.records.append(Record(**json.loads(line)))
        self._filters = None

    @classmethod
    def create(cls, root, params: FeatureParams, extra_meta: Optional[dict] = None) -> "FeatureStore":
        root = Path(root)
        (root / "logmel").mkdir(parents=True, exist_ok=True)
        (root / "power").mkdir(parents=True, exist_ok=True)
        meta = {"features": asdict(params)}
        meta.update(extra_meta or {})
        (root / "params.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        (root / "index.jsonl").write_text("")
        return cls(root)

    # -- records -------------------------------------------------------------
    def originals(self) -> List[Record]:
        return [r for r in self.records if not r.augmented]

    def augmented(self) -> List[Record]:
        return [r for r in self.records if r.augmented]

    def by_id(self) -> Dict[str, Record]:
        return {r.utterance_id: r for r in self.records}

    def write_index(self) -> None:
        text = "".join(r.to_json() + "\n" for r in self.records)
        (self.root / "index.jsonl").write_text(text)

    def save_meta(self) -> None:
        (self.root / "params.json").write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n")

    @property
    def filters(self) -> np.ndarray:
        if self._filters is None:
            p = self.params
            self._filters = mel_filterbank(p.n_mels, p.n_fft, p.sample_rate, p.fmin, p.fmax)
        return self._filters

    def add_power(self, utterance_id: str, label: str, power: np.ndarray, **extra) -> Record:
        """Store a power spectrogram and its log-mel features as a new record."""
        stem = file_stem(utterance_id)
        power = np.asarray(power, dtype=np.float32)
        feats = power_to_log_mel(power.astype(np.float64), self.params, self.filters).astype(np.float32)
        rec = Record(utterance_id=utterance_id, label=label, path=f"logmel/{stem}.atnt",
                     power_path=f"power/{stem}.atnt", frames=int(feats.shape[0]),
                     params_hash=self.params.digest(), **extra)
        save_tensor(self.root / rec.path, feats)
        save_tensor(self.root / rec.power_path, power)
        self.records.append(rec)
        return rec

    def load_features(self, rec: Record) -> np.ndarray:
        path = self.root / rec.path
        if not path.exists():
            raise InputError(f"missing feature file {path} for {rec.utterance_id}")
        return load_tensor(path)

    def load_power(self, rec: Record) -> np.ndarray:
        path = self.root / rec.power_path
        if not path.exists():
            raise InputError(f"missing source spectrogram {path} for {rec.utterance_id}")
        return load_tensor(path)


# ---------------------------------------------------------------------------
# manifest ingestion


def read_manifest(path) -> List[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_COLUMNS:
            raise InputError(f"manifest columns must be exactly {','.join(MANIFEST_COLUMNS)}, got {reader.fieldnames}")
        rows = list(reader)
    seen = set()
    for row in rows:
        uid = row["utterance_id"]
        if uid in seen:
            raise InputError(f"duplicate utterance_id {uid!r} in manifest")
        seen.add(uid)
    return rows


def _extract(row: dict, base: Path, params: FeatureParams):
    uid = row["utterance_id"]
    try:
        label = LABELS[label_id(row["label"])]
        wav = Path(row["wav_path"])
        wav = wav if wav.is_absolute() else base / wav
        _, power = log_mel(read_wav(wav), params, return_power=True)
        return uid, label, power, None
    except (AreaSerError, OSError) as exc:
        return uid, None, None, str(exc)


def prepare_store(manifest_path, out_dir, params: FeatureParams, jobs: int = 1) -> Tuple[FeatureStore, List[Tuple[str, str]]]:
    """Extract features for every manifest row.

    Returns the store and a list of ``(utterance_id, error message)`` for
    rows that failed; successful rows are indexed in manifest order whatever
    the number of worker processes.
    """
    rows = read_manifest(manifest_path)
    base = Path(manifest_path).resolve().parent
    store = FeatureStore.create(out_dir, params)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(_extract, rows, repeat(base), repeat(params))
            results = list(results)
    else:
        results = [_extract(row, base, params) for row in rows]
    failures = []
    for uid, label, power, err in results:
        if err is None:
            store.add_power(uid, label, power)
        else:
            failures.append((uid, err))
    store.write_index()
    return store, failures


# ---------------------------------------------------------------------------
# augmentation


def generate_replicas(store: FeatureStore, config: VtlpConfig, seed: int,
                      sources: Optional[List[Record]] = None) -> List[Record]:
    """Append ``config.replicas`` VTLP copies of each source record to the store.

    Previously generated replicas are discarded first, so re-running with
    the same seed reproduces the same records.  Warp factors come from one
    seed-derived stream over (record, replica).
    """
    config.validate_rate(store.params.sample_rate)
    store.records = store.originals()
    sources = store.originals() if sources is None else sources
    alphas = draw_alphas(len(sources), config, seed)
    new = []
    for i, src in enumerate(sources):
        power = store.load_power(src)
        for r in range(config.replicas):
            alpha = float(alphas[i, r])
            warped = vtlp_spectrogram(power, alpha, config, store.params.sample_rate)
            new.append(store.add_power(f"{src.utterance_id}#vtlp{r + 1}", src.label, warped, augmented=True,
                                       alpha=alpha, source_utterance_id=src.utterance_id,
                                       replica=r + 1))
    store.meta["vtlp"] = dict(asdict(config), seed=int(seed))
    store.save_meta()
    store.write_index()
    return new


def replicas_available(store: FeatureStore) -> int:
    vt = store.meta.get("vtlp")
    return int(vt["replicas"]) if vt else 0


def ensure_replicas(store: FeatureStore, config: VtlpConfig, seed: int, needed: int) -> None:
    """Make sure at least ``needed`` replicas per utterance exist."""
    if needed <= 0:
        return
    vt = store.meta.get("vtlp")
    if vt and vt["replicas"] >= needed and vt.get("seed") == seed:
        return
    cfg = VtlpConfig(config.alpha_min, config.alpha_max, config.boundary_hz, max(needed, config.replicas))
    generate_replicas(store, cfg, seed)
