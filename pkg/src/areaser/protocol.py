"""Cross-validation protocol, ablation table and parameter sweeps."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .audio import segment_frames, segment_utterance, SILENCE
from .augment import VtlpConfig
from .config import SegmentConfig, TrainConfig
from .errors import ConfigurationError
from .estimator import AreaAttentionClassifier
from .metrics import MetricsReport
from .model import ModelConfig
from .store import LABELS, FeatureStore, Record, ensure_replicas

log = logging.getLogger(__name__)

N_FOLDS = 5


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: frozenset
    test_ids: frozenset


def split_folds(records: Sequence[Record], seed: int, n_folds: int = N_FOLDS,
                test_fraction: float = 0.2) -> List[FoldSplit]:
    """Stratified random 80/20 splits of the non-augmented utterances.

    Each fold is an independent draw from one seeded stream; within a class
    the test share is ``round(test_fraction * class size)``.
    """
    originals = [r for r in records if not r.augmented]
    by_class: Dict[str, List[str]] = {}
    for r in originals:
        by_class.setdefault(r.label, []).append(r.utterance_id)
    for label, ids in by_class.items():
        if len(ids) < n_folds:
            raise ConfigurationError(f"class {label!r} has {len(ids)} utterances; need at least {n_folds}")
    rng = np.random.default_rng(seed)
    all_ids = frozenset(r.utterance_id for r in originals)
    folds = []
    for k in range(n_folds):
        test = []
        for label in sorted(by_class):
            ids = sorted(by_class[label])
            n_test = int(round(test_fraction * len(ids)))
            test.extend(ids[i] for i in rng.permutation(len(ids))[:n_test])
        test_ids = frozenset(test)
        folds.append(FoldSplit(k, all_ids - test_ids, test_ids))
    return folds


def fold_records(records: Sequence[Record], split: FoldSplit, replicas: int = 0) -> Tuple[List[Record], List[Record]]:
    """Training records (originals plus up to ``replicas`` augmented copies of
    each) and test records (originals only) of one fold."""
    train, test = [], []
    for r in records:
        if r.augmented:
            if r.source_utterance_id in split.train_ids and r.replica is not None and r.replica <= replicas:
                train.append(r)
        elif r.utterance_id in split.train_ids:
            train.append(r)
        elif r.utterance_id in split.test_ids:
            test.append(r)
    return train, test


def build_segments(store: FeatureStore, records: Sequence[Record], window: int, hop: int):
    """Stack segments of ``records`` as model input (n, mel, frames), with labels
    and utterance ids as groups."""
    X, y, groups = [], [], []
    for r in records:
        feats = store.load_features(r)
        for seg in segment_utterance(feats, window, hop, r.utterance_id, r.label_id, SILENCE):
            X.append(seg.features.T)
            y.append(seg.label)
            groups.append(seg.utterance_id)
    return np.stack(X).astype(np.float32), np.asarray(y, dtype=np.int64), groups


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(fold)]).generate_state(1)[0])


@dataclass
class FoldResult:
    fold: int
    estimator: AreaAttentionClassifier
    history: List[dict]
    report: MetricsReport
    best_epoch: int


def train_fold(store: FeatureStore, split: FoldSplit, model_config: ModelConfig, train_config: TrainConfig,
               segments: SegmentConfig = SegmentConfig(), seed: int = 0) -> FoldResult:
    params = store.params
    win, train_hop = segment_frames(params, segments.window_seconds, segments.train_overlap)
    _, test_hop = segment_frames(params, segments.window_seconds, segments.test_overlap)
    train_recs, test_recs = fold_records(store.records, split, train_config.replicas)
    X, y, _ = build_segments(store, train_recs, win, train_hop)
    eval_set = build_segments(store, test_recs, win, test_hop)
    monitor = None
    if train_config.monitor_train:
        monitor = build_segments(store, [r for r in train_recs if not r.augmented], win, test_hop)
    est = AreaAttentionClassifier.from_model_config(
        model_config, epochs=train_config.epochs, batch_size=train_config.batch_size, lr=train_config.lr,
        optimizer=train_config.optimizer, betas=train_config.betas, weight_decay=train_config.weight_decay,
        normalize=train_config.normalize, random_state=fold_seed(seed, split.fold_index), dtype=train_config.dtype)
    est.fit(X, y, eval_set=eval_set, monitor_set=monitor)
    return FoldResult(split.fold_index, est, est.history_, est.best_report_, est.best_epoch_)


# ---------------------------------------------------------------------------
# experiments


def summarize(results: Sequence[FoldResult]) -> dict:
    """Fold-mean and best-fold WA/UA/ACC of the selected checkpoints."""
    reps = [r.report for r in results]
    best = max(results, key=lambda r: (r.report.acc, -r.fold))
    return {
        "mean": {k: float(np.mean([getattr(p, k) for p in reps])) for k in ("wa", "ua", "acc")},
        "best_fold": {"fold": best.fold, "wa": best.report.wa, "ua": best.report.ua, "acc": best.report.acc},
        "folds": [{"fold": r.fold, "best_epoch": r.best_epoch, "wa": r.report.wa, "ua": r.report.ua,
                   "acc": r.report.acc} for r in results],
    }


def write_history_csv(path, history: Sequence[dict]) -> None:
    cols = ["epoch", "loss", "wa", "ua", "acc", "train_wa", "train_ua", "train_acc"]
    cols = [c for c in cols if any(c in row for row in history)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in cols])


def write_confusion_csv(path, confusion) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *LABELS[:len(confusion)]])
        for name, row in zip(LABELS, confusion):
            w.writerow([name, *[int(v) for v in row]])


def run_experiment(store: FeatureStore, model_config: ModelConfig, train_config: TrainConfig,
                   segments: SegmentConfig = SegmentConfig(), seed: int = 0, out_dir=None,
                   save_checkpoints: bool = True) -> Tuple[List[FoldResult], dict]:
    splits = split_folds(store.records, seed)
    results = []
    for k in train_config.folds:
        res = train_fold(store, splits[k], model_config, train_config, segments, seed)
        results.append(res)
        if out_dir is not None:
            d = Path(out_dir)
            d.mkdir(parents=True, exist_ok=True)
            write_history_csv(d / f"fold{k}_history.csv", res.history)
            write_confusion_csv(d / f"fold{k}_confusion.csv", res.report.confusion)
            if save_checkpoints:
                res.estimator.save(d / f"fold{k}.ckpt", {"fold": k, "seed": seed, "segments": asdict(segments)})
    summary = summarize(results)
    if out_dir is not None:
        Path(out_dir, "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return results, summary


def _with_area(model_config: ModelConfig, **changes) -> ModelConfig:
    return replace(model_config, attention=replace(model_config.attention, **changes))


ABLATION_ROWS = ("CNN", "CNN+VTLP", "Attention", "Attention+VTLP", "AreaAttention", "AreaAttention+VTLP")


def ablation_configs(model_config: ModelConfig, train_config: TrainConfig, replicas: int):
    cnn = replace(model_config, use_attention=False)
    plain = _with_area(replace(model_config, use_attention=True), max_height=1, max_width=1)
    area = replace(model_config, use_attention=True)
    out = {}
    for name, mc in (("CNN", cnn), ("Attention", plain), ("AreaAttention", area)):
        out[name] = (mc, replace(train_config, replicas=0))
        out[name + "+VTLP"] = (mc, replace(train_config, replicas=replicas))
    return {name: out[name] for name in ABLATION_ROWS}


def _run_grid(store, grid, segments, seed, vtlp: VtlpConfig, out_dir, title):
    needed = max(tc.replicas for _, tc in grid.values())
    ensure_replicas(store, vtlp, seed, needed)
    table = {}
    for name, (mc, tc) in grid.items():
        sub = None if out_dir is None else Path(out_dir) / name.replace("+", "_")
        results, summary = run_experiment(store, mc, tc, segments, seed, sub, save_checkpoints=False)
        table[name] = {"summary": summary, "histories": [r.history for r in results]}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        body = {name: row["summary"] for name, row in table.items()}
        Path(out_dir, f"{title}.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return table


def run_ablation(store: FeatureStore, model_config: ModelConfig, train_config: TrainConfig,
                 vtlp: VtlpConfig = VtlpConfig(), segments: SegmentConfig = SegmentConfig(), seed: int = 0,
                 out_dir=None) -> Dict[str, dict]:
    """Six configurations sharing folds and seeds: CNN, single-cell attention,
    area attention, each with and without VTLP replicas."""
    grid = ablation_configs(model_config, train_config, vtlp.replicas)
    return _run_grid(store, grid, segments, seed, vtlp, out_dir, "ablation")


SWEEP_KINDS = ("max_area_size", "area_features", "replica_count")


def sweep_configs(kind: str, model_config: ModelConfig, train_config: TrainConfig, vtlp: VtlpConfig):
    grid = {}
    if kind == "max_area_size":
        for s in range(1, 5):
            mc = _with_area(replace(model_config, use_attention=True), max_height=s, max_width=s)
            grid[f"{s}x{s}"] = (mc, replace(train_config, replicas=0))
            grid[f"{s}x{s}+VTLP"] = (mc, replace(train_config, replicas=vtlp.replicas))
    elif kind == "area_features":
        for key in ("max", "mean", "sample"):
            for value in ("max", "mean", "sum"):
                mc = _with_area(replace(model_config, use_attention=True), key_mode=key, value_mode=value)
                grid[f"{key}-{value}"] = (mc, train_config)
    elif kind == "replica_count":
        for mult in range(1, 9):
            grid[f"x{mult}"] = (model_config, replace(train_config, replicas=mult - 1))
    else:
        raise ConfigurationError(f"unknown sweep kind {kind!r}; expected one of {SWEEP_KINDS}")
    return grid


def run_sweeps(store: FeatureStore, kind: str, model_config: ModelConfig, train_config: TrainConfig,
               vtlp: VtlpConfig = VtlpConfig(), segments: SegmentConfig = SegmentConfig(), seed: int = 0,
               out_dir=None) -> Dict[str, dict]:
    grid = sweep_configs(kind, model_config, train_config, vtlp)
    return _run_grid(store, grid, segments, seed, vtlp, out_dir, f"sweep_{kind}")
