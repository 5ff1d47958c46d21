"""Command-line interface: ``areaser <command> ...``.

Exit status is 0 on success, 1 for usage or configuration errors, 2 for
data errors and 3 for numerical failures.  Errors are reported on stderr as
one line: ``error code=<CODE>: <message>``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .audio import SILENCE, segment_frames, segment_utterance
from .augment import VtlpConfig
from .config import RunConfig, SegmentConfig, dump_config, load_config
from .errors import AreaSerError, InputError
from .estimator import AreaAttentionClassifier
from .gradcheck import check_model, run_suite
from .protocol import SWEEP_KINDS, build_segments, fold_records, run_ablation, run_experiment, run_sweeps, split_folds
from .protocol import write_confusion_csv
from .store import FeatureStore, ensure_replicas, generate_replicas, prepare_store
from .synth import make_synthetic_store

log = logging.getLogger("areaser")


class UsageError(AreaSerError):
    code = "USAGE"
    exit_status = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _run_dir(args, cfg: RunConfig, name: str) -> Path:
    out = Path(args.out) if args.out else Path(cfg.out_dir) / name
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    return out


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _open_store(path) -> FeatureStore:
    return FeatureStore(path)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# -- commands ------------------------------------------------------------------


def cmd_prepare(args) -> int:
    cfg = _config(args)
    store, failures = prepare_store(args.manifest, args.out_dir, cfg.features, jobs=args.jobs)
    for uid, msg in failures:
        print(f"error code=DATA utterance_id={uid}: {msg}", file=sys.stderr)
    print(f"prepared {len(store.records)} utterances into {args.out_dir}; {len(failures)} failed")
    return 2 if failures else 0


def cmd_augment(args) -> int:
    cfg = _config(args)
    store = _open_store(args.store)
    vt = replace(cfg.vtlp, replicas=args.replicas)
    new = generate_replicas(store, vt, args.seed)
    print(f"wrote {len(new)} augmented records ({vt.replicas} per utterance)")
    return 0


def _train_config(cfg: RunConfig, fold: Optional[str]) -> RunConfig:
    if fold is None or fold == "all":
        return cfg
    try:
        k = int(fold)
    except ValueError:
        raise UsageError(f"--fold must be an integer in 0..4 or 'all', got {fold!r}") from None
    return replace(cfg, train=replace(cfg.train, folds=(k,)))


def cmd_train(args) -> int:
    cfg = _train_config(_config(args), args.fold)
    store = _open_store(args.store)
    ensure_replicas(store, cfg.vtlp, cfg.seed, cfg.train.replicas)
    out = _run_dir(args, cfg, "train")
    _, summary = run_experiment(store, cfg.model, cfg.train, cfg.segments, cfg.seed, out)
    _print_json(summary)
    return 0


def cmd_eval(args) -> int:
    store = _open_store(args.store)
    est = AreaAttentionClassifier.load(args.checkpoint)
    header = est.checkpoint_header_
    fold = args.fold if args.fold is not None else header.get("fold")
    seed = args.seed if args.seed is not None else header.get("seed")
    if fold is None or seed is None:
        raise UsageError("checkpoint has no fold/seed; pass --fold and --seed")
    segments = SegmentConfig(**header["segments"]) if "segments" in header else SegmentConfig()
    split = split_folds(store.records, seed)[fold]
    _, test = fold_records(store.records, split)
    win, hop = segment_frames(store.params, segments.window_seconds, segments.test_overlap)
    X, y, groups = build_segments(store, test, win, hop)
    rep = est.score_utterances(X, y, groups)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_confusion_csv(out / "confusion.csv", rep.confusion)
        (out / "metrics.json").write_text(json.dumps(rep.as_dict(), indent=2, sort_keys=True) + "\n")
    _print_json(dict(rep.as_dict(), fold=fold, seed=seed))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    store = _open_store(args.store)
    out = _run_dir(args, cfg, "ablation")
    table = run_ablation(store, cfg.model, cfg.train, cfg.vtlp, cfg.segments, cfg.seed, out)
    _print_json({k: v["summary"]["mean"] for k, v in table.items()})
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    store = _open_store(args.store)
    out = _run_dir(args, cfg, f"sweep_{args.kind}")
    table = run_sweeps(store, args.kind, cfg.model, cfg.train, cfg.vtlp, cfg.segments, cfg.seed, out)
    _print_json({k: v["summary"]["mean"] for k, v in table.items()})
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed or 0, model_checks=True)
    if args.size == "full":
        results += check_model(np.random.default_rng((args.seed or 0) + 1), n_params=40, mel=12, frames=16)
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status:4s} {r.name} rel_error={r.error:.3e} tol={r.tol:g}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    if failed:
        print(f"error code=NUMERICAL: {failed} gradient check(s) failed", file=sys.stderr)
        return 3
    return 0


def cmd_synth(args) -> int:
    store = make_synthetic_store(args.out, per_class=args.per_class, seed=args.seed)
    print(f"wrote {len(store.records)} synthetic utterances to {args.out}")
    return 0


def _write_matrix(path: Path, matrix: np.ndarray, header: List[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in matrix:
            w.writerow([repr(float(v)) for v in row])


def cmd_export_repr(args) -> int:
    est = AreaAttentionClassifier.load(args.checkpoint)
    store = _open_store(args.store)
    rec = store.by_id().get(args.utterance_id)
    if rec is None:
        raise InputError(f"utterance {args.utterance_id!r} not in store {args.store}")
    header = est.checkpoint_header_
    segments = SegmentConfig(**header["segments"]) if "segments" in header else SegmentConfig()
    win, hop = segment_frames(store.params, segments.window_seconds, segments.test_overlap)
    segs = segment_utterance(store.load_features(rec), win, hop, rec.utterance_id, rec.label_id, SILENCE)
    if not 0 <= args.segment < len(segs):
        raise UsageError(f"--segment must be in 0..{len(segs) - 1}")
    x = est._scale(segs[args.segment].features.T[None]).astype(est.network_.dtype)
    tokens, attn, grid = est.network_.representation(x)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_matrix(out / "representation.csv", tokens[0], [f"c{i}" for i in range(tokens.shape[2])])
    n_maps = 0
    if attn is not None:
        for h, m in enumerate(attn[0]):
            _write_matrix(out / f"attention_head{h}.csv", m, [f"area{i}" for i in range(m.shape[1])])
            n_maps += 1
    meta = {"utterance_id": rec.utterance_id, "segment": args.segment, "grid": list(grid),
            "tokens": int(tokens.shape[1]), "channels": int(tokens.shape[2]), "heads": n_maps}
    (out / "export.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _print_json(meta)
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="areaser", description="Multiscale area attention for speech emotion recognition.")
    p.add_argument("--threads", type=int, default=None, help="limit BLAS threads (1 for single-threaded runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("prepare", cmd_prepare, "extract logMel features for a manifest")
    sp.add_argument("manifest")
    sp.add_argument("out_dir")
    sp.add_argument("--config")
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("augment", cmd_augment, "generate VTLP replicas inside a store")
    sp.add_argument("store")
    sp.add_argument("--replicas", type=int, default=VtlpConfig().replicas)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config")

    for name, fn, help_ in (("train", cmd_train, "cross-validated training"),
                            ("ablate", cmd_ablate, "six-row ablation table"),
                            ("sweep", cmd_sweep, "parameter sweep")):
        sp = add(name, fn, help_)
        sp.add_argument("store")
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        if name == "train":
            sp.add_argument("--fold", default="all", help="fold index 0..4 or 'all'")
        if name == "sweep":
            sp.add_argument("--kind", required=True, choices=SWEEP_KINDS)

    sp = add("eval", cmd_eval, "score a checkpoint on its test fold")
    sp.add_argument("store")
    sp.add_argument("checkpoint")
    sp.add_argument("--fold", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite")
    sp.add_argument("--size", choices=("small", "full"), default="small")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("synth", cmd_synth, "write a synthetic four-class feature store")
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-class", type=int, default=25)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("export-repr", cmd_export_repr, "dump the attended representation and attention maps")
    sp.add_argument("checkpoint")
    sp.add_argument("utterance_id")
    sp.add_argument("--store", required=True)
    sp.add_argument("--segment", type=int, default=0)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if args.threads is not None:
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except AreaSerError as exc:
        print(f"error code={exc.code}: {exc}", file=sys.stderr)
        return exc.exit_status
    except OSError as exc:
        print(f"error code=DATA: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"error code=NUMERICAL: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
