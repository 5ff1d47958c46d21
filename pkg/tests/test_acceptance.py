"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records a ``criterion N PASS|FAIL`` line that is printed in the
pytest terminal summary.
"""
import json
import shutil
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from threadpoolctl import threadpool_limits

from areaser import area_attention as aa
from areaser.area_attention import (
    KEY_MODES, VALUE_MODES, AreaConfig, AttentionWeights, area_attention_forward, area_geometry,
    assemble_pooled_memory, block_sums, build_integral_tables, enumerate_areas, pool_area_max, pool_area_stats,
)
from areaser.audio import Waveform, stft_power
from areaser.augment import VtlpConfig, vtlp_spectrogram, warp_frequency
from areaser.cli import main
from areaser.config import SegmentConfig, TrainConfig
from areaser.gradcheck import check_area_attention, run_suite, tiny_model_config
from areaser.metrics import compute_metrics
from areaser.model import ModelConfig
from areaser.protocol import fold_records, run_ablation, run_experiment, run_sweeps, split_folds
from areaser.store import LABELS, FeatureStore, Record, generate_replicas
from areaser.synth import make_synthetic_store

from oracles import brute_pool, multihead_self_attention


@contextmanager
def criterion(log, n, text):
    try:
        yield
    except BaseException:
        log.append((n, f"criterion {n:2d} FAIL  {text}"))
        raise
    log.append((n, f"criterion {n:2d} PASS  {text}"))


@pytest.fixture(scope="module")
def synth100(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth100") / "store"
    assert main(["synth", "--out", str(root), "--per-class", "25", "--seed", "0"]) == 0
    return root


# 1 -----------------------------------------------------------------------------


def test_criterion_01_area_enumeration(acceptance_log):
    with criterion(acceptance_log, 1, "area enumeration counts and 3x3/2x2 partition"):
        aa.area_geometry.cache_clear()
        t0 = time.perf_counter()
        for H in range(1, 9):
            for W in range(1, 9):
                for mh in range(1, 5):
                    for mw in range(1, 5):
                        expected = sum((H - h + 1) * (W - w + 1)
                                       for h in range(1, min(mh, H) + 1) for w in range(1, min(mw, W) + 1))
                        assert len(enumerate_areas(H, W, mh, mw)) == expected
        areas = enumerate_areas(3, 3, 2, 2)
        kinds = {}
        for a in areas:
            kinds[(a.height, a.width)] = kinds.get((a.height, a.width), 0) + 1
        elapsed = time.perf_counter() - t0
        assert len(areas) == 25
        assert kinds == {(1, 1): 9, (1, 2): 6, (2, 1): 6, (2, 2): 4}
        assert elapsed < 1.0, elapsed


# 2 -----------------------------------------------------------------------------


def test_criterion_02_pooling_oracles(acceptance_log):
    with criterion(acceptance_log, 2, "integral-table sum/mean/std and window max equal brute force"):
        rng = np.random.default_rng(2)
        t0 = time.perf_counter()
        for _ in range(50):
            H, W, C = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 5)
            mh, mw = rng.integers(1, 5), rng.integers(1, 5)
            m = rng.standard_normal((H, W, C)) * rng.uniform(0.1, 10) + rng.uniform(-5, 5)
            bsum, bmean, bstd, bmax, barg = brute_pool(m, mh, mw)
            tables = build_integral_tables(m)
            geom = area_geometry(int(H), int(W), int(mh), int(mw))
            sums = block_sums(tables.sum, geom)
            np.testing.assert_allclose(sums, bsum, rtol=1e-5, atol=1e-12)
            stats = [pool_area_stats(m, tables, a) for a in enumerate_areas(int(H), int(W), int(mh), int(mw))]
            np.testing.assert_allclose([s.sum for s in stats], bsum, rtol=1e-5, atol=1e-12)
            np.testing.assert_allclose([s.mean for s in stats], bmean, rtol=1e-5, atol=1e-12)
            np.testing.assert_allclose([s.std for s in stats], bstd, rtol=1e-5, atol=1e-12)
            pooled = assemble_pooled_memory(m, AreaConfig(int(mh), int(mw), "sample", "sum"))
            np.testing.assert_allclose(pooled.sigma, bstd, rtol=1e-5, atol=1e-12)
            vals, args = pool_area_max(m, int(mh), int(mw))
            np.testing.assert_array_equal(vals, bmax)
            np.testing.assert_array_equal(args, barg)
        assert time.perf_counter() - t0 < 10.0


# 3 -----------------------------------------------------------------------------


def test_criterion_03_single_cell_reduction(acceptance_log):
    with criterion(acceptance_log, 3, "1x1 area attention equals multi-head self-attention (1e-6)"):
        rng = np.random.default_rng(3)
        C, heads = 8, 2
        for key_mode in KEY_MODES:
            for value_mode in VALUE_MODES:
                for training in (False, True):
                    x = rng.standard_normal((4, 4, C))
                    wts = AttentionWeights.init(C, rng, np.float64)
                    cfg = AreaConfig(1, 1, key_mode, value_mode, heads)
                    out, _, _ = area_attention_forward(x.reshape(16, C), x, wts, cfg, training,
                                                       np.random.default_rng(0))
                    ref = multihead_self_attention(x.reshape(16, C), wts.wq, wts.wk, wts.wv, wts.wo, heads)
                    assert np.max(np.abs(out - ref)) <= 1e-6


# 4 -----------------------------------------------------------------------------


def test_criterion_04_gradient_suite(acceptance_log):
    with criterion(acceptance_log, 4, "finite-difference suite: layers < 1e-4, model spot check < 1e-3"):
        t0 = time.perf_counter()
        results = run_suite(seed=0)
        elapsed = time.perf_counter() - t0
        failed = [(r.name, r.error) for r in results if not r.passed]
        assert not failed, failed
        assert all(r.tol == 1e-4 for r in results if not r.name.startswith("model."))
        assert any(r.name.startswith("model.") and r.tol == 1e-3 for r in results)
        modes = {r.name.split(".")[0] for r in results if r.name.startswith("area_attention")}
        assert len(modes) == 9
        assert elapsed < 120.0


# 5 -----------------------------------------------------------------------------


def test_criterion_05_sample_keys(acceptance_log):
    with criterion(acceptance_log, 5, "sample keys: eval == mean bitwise, sigma 0 == mean, gradient with fixed noise"):
        rng = np.random.default_rng(5)
        for dtype in (np.float32, np.float64):
            m = rng.standard_normal((2, 4, 5, 8)).astype(dtype)
            s = assemble_pooled_memory(m, AreaConfig(3, 3, "sample", "max"), training=False)
            mean = assemble_pooled_memory(m, AreaConfig(3, 3, "mean", "max"), training=False)
            assert s.keys.tobytes() == mean.keys.tobytes()
            wts = AttentionWeights.init(8, rng, dtype)
            a, _, _ = area_attention_forward(m.reshape(2, 20, 8), m, wts, AreaConfig(3, 3, "sample", "max", 4))
            b, _, _ = area_attention_forward(m.reshape(2, 20, 8), m, wts, AreaConfig(3, 3, "mean", "max", 4))
            assert a.tobytes() == b.tobytes()
        # zero-spread areas: constant memory, and singletons in any memory
        const = np.full((4, 4, 3), -1.25)
        p = assemble_pooled_memory(const, AreaConfig(3, 3, "sample", "sum"), training=True,
                                   rng=np.random.default_rng(1))
        assert np.all(p.sigma == 0) and p.keys.tobytes() == p.mean.tobytes()
        noisy = rng.standard_normal((4, 4, 3))
        p = assemble_pooled_memory(noisy, AreaConfig(3, 3, "sample", "sum"), training=True,
                                   rng=np.random.default_rng(1))
        zero = p.sigma == 0
        assert zero[:16].all()
        np.testing.assert_array_equal(p.keys[zero], p.mean[zero])
        for value_mode in VALUE_MODES:
            res = check_area_attention(np.random.default_rng(50), "sample", value_mode)
            assert all(r.passed for r in res), [(r.name, r.error) for r in res]


# 6 -----------------------------------------------------------------------------


def test_criterion_06_vtlp(acceptance_log, synth100, tmp_path):
    with criterion(acceptance_log, 6, "VTLP identity, monotone warp, 1000->1050 Hz tone, 700 train-only replicas"):
        rng = np.random.default_rng(6)
        p = rng.random((9, 513))
        assert vtlp_spectrogram(p, 1.0, VtlpConfig(), 16000).tobytes() == p.tobytes()
        grid = np.linspace(0, 8000, 1000)
        for alpha in (0.9, 0.95, 1.0, 1.05, 1.1):
            g = warp_frequency(grid, alpha, 4800, 8000)
            assert np.all(np.diff(g) > 0)
            assert g[0] == 0 and g[-1] == pytest.approx(8000, abs=1e-9)
        t = np.arange(8000) / 16000
        spec = stft_power(Waveform(np.sin(2 * np.pi * 1000 * t), 16000), 1024, 160)
        warped = vtlp_spectrogram(spec, 1.05, VtlpConfig(), 16000)
        assert np.all(warped[3:-3].argmax(axis=1) == round(1050 / (16000 / 1024)))

        root = tmp_path / "store"
        shutil.copytree(synth100, root)
        store = FeatureStore(root)
        new = generate_replicas(store, VtlpConfig(replicas=7), seed=0)
        assert len(new) == 700 and len(store.originals()) == 100
        assert len(FeatureStore(root).augmented()) == 700
        for split in split_folds(store.records, seed=0):
            for use in (0, 7):
                train, test = fold_records(store.records, split, use)
                assert not any(r.augmented for r in test)
                test_ids = {r.utterance_id for r in test}
                assert not any(r.source in test_ids for r in train)


# 7 -----------------------------------------------------------------------------


def test_criterion_07_metrics(acceptance_log):
    with criterion(acceptance_log, 7, "WA 0.575 / UA 0.6 / ACC 0.5875 and ACC == (WA+UA)/2 on 100 matrices"):
        cm = np.array([[8, 1, 1, 0], [2, 5, 3, 0], [4, 6, 10, 0], [0, 0, 0, 0]])
        rep = compute_metrics(cm)
        assert rep.wa == pytest.approx(0.575, abs=1e-15)
        assert rep.ua == pytest.approx(0.6, abs=1e-15)
        assert rep.acc == pytest.approx(0.5875, abs=1e-15)
        rng = np.random.default_rng(7)
        for _ in range(100):
            m = rng.integers(0, 30, size=(4, 4))
            m[rng.integers(4)] *= rng.integers(0, 2)
            r = compute_metrics(m)
            assert r.acc == (r.wa + r.ua) / 2


# 8 -----------------------------------------------------------------------------


def _random_records(counts, replicas):
    recs = []
    for label, n in zip(LABELS, counts):
        for i in range(n):
            uid = f"{label}-{i}"
            recs.append(Record(uid, label, "", "", 1, "h"))
            recs.extend(Record(f"{uid}#vtlp{r}", label, "", "", 1, "h", True, 1.0, uid, r)
                         for r in range(1, replicas + 1))
    return recs


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(5, 30), min_size=4, max_size=4), st.integers(0, 7), st.integers(0, 2 ** 31))
def _leakage_property(counts, replicas, seed):
    recs = _random_records(counts, replicas)
    for split in split_folds(recs, seed):
        train, test = fold_records(recs, split, replicas)
        assert not any(r.augmented for r in test)
        assert all(r.source in split.train_ids for r in train)


def test_criterion_08_protocol(acceptance_log, synth100):
    with criterion(acceptance_log, 8, "5 disjoint stratified 80/20 seeded splits, no augmented leakage"):
        store = FeatureStore(synth100)
        folds = split_folds(store.records, seed=11)
        labels = {r.utterance_id: r.label for r in store.records}
        assert len(folds) == 5
        for f in folds:
            assert not f.train_ids & f.test_ids
            assert len(f.train_ids | f.test_ids) == 100
            assert len(f.test_ids) == 20 and len(f.train_ids) == 80
            assert sorted(labels[i] for i in f.test_ids) == sorted(LABELS * 5)
        assert split_folds(store.records, seed=11) == folds
        assert split_folds(FeatureStore(synth100).records, seed=11) == folds
        _leakage_property()


# 9 -----------------------------------------------------------------------------

LEARNING_EPOCHS = 10  # budget inside the 30-epoch bound that keeps one thread under 10 minutes


def test_criterion_09_learning_smoke(acceptance_log, synth100, tmp_path):
    with criterion(acceptance_log, 9, "AreaAttention+VTLP on synthetic corpus: train WA >= 0.95, test ACC >= 0.85, < 10 min"):
        root = tmp_path / "store"
        shutil.copytree(synth100, root)
        t0 = time.perf_counter()
        with threadpool_limits(limits=1):
            store = FeatureStore(root)
            vt = VtlpConfig()
            generate_replicas(store, vt, seed=0)
            tc = TrainConfig(epochs=LEARNING_EPOCHS, replicas=vt.replicas, folds=(0,))
            results, summary = run_experiment(store, ModelConfig(), tc, SegmentConfig(), seed=0, out_dir=None)
        elapsed = time.perf_counter() - t0
        history = results[0].history
        reached = [row["epoch"] for row in history if row["train_wa"] >= 0.95]
        print(json.dumps({"elapsed_s": round(elapsed, 1), "history": history}))
        assert reached and reached[0] <= 30
        assert summary["mean"]["acc"] >= 0.85
        assert elapsed < 600.0


# 10 ----------------------------------------------------------------------------


def test_criterion_10_ablation_and_sweeps(acceptance_log, small_store_dir, tmp_path):
    with criterion(acceptance_log, 10, "6-row ablation, 9-cell area-feature sweep, 1x1 cell == Attention row"):
        root = tmp_path / "store"
        shutil.copytree(small_store_dir, root)
        store = FeatureStore(root)
        mc = tiny_model_config()
        tc = TrainConfig(epochs=1, batch_size=16, folds=(0,))
        vt = VtlpConfig(replicas=2)
        ablation = run_ablation(store, mc, tc, vt, seed=4, out_dir=tmp_path / "ablation")
        assert list(ablation) == ["CNN", "CNN+VTLP", "Attention", "Attention+VTLP", "AreaAttention",
                                  "AreaAttention+VTLP"]
        table = json.loads((tmp_path / "ablation" / "ablation.json").read_text())
        assert len(table) == 6 and all(set(row) == {"mean", "best_fold", "folds"} for row in table.values())
        feats = run_sweeps(store, "area_features", mc, tc, vt, seed=4, out_dir=tmp_path / "features")
        assert sorted(feats) == sorted(f"{k}-{v}" for k in KEY_MODES for v in VALUE_MODES)
        sizes = run_sweeps(store, "max_area_size", mc, tc, vt, seed=4)
        assert sizes["1x1"]["histories"] == ablation["Attention"]["histories"]
        assert sizes["1x1"]["summary"] == ablation["Attention"]["summary"]


# 11 ----------------------------------------------------------------------------

TINY_YAML = """\
seed: 9
model:
  parallel_channels: 2
  trunk_channels: [4, 4, 4, 80]
  attention: {max_height: 2, max_width: 2}
train:
  epochs: 2
  batch_size: 16
  folds: [0, 1]
  replicas: 1
"""


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_11_determinism(acceptance_log, tmp_path, capsys):
    with criterion(acceptance_log, 11, "reruns with the same config and seed are bitwise identical"):
        (tmp_path / "c.yaml").write_text(TINY_YAML)
        outputs = []
        for rep in ("a", "b"):
            base = tmp_path / rep
            assert main(["synth", "--out", str(base / "store"), "--per-class", "5", "--seed", "3"]) == 0
            assert main(["augment", str(base / "store"), "--replicas", "1", "--seed", "9"]) == 0
            assert main(["train", str(base / "store"), "--config", str(tmp_path / "c.yaml"),
                         "--out", str(base / "run")]) == 0
            assert main(["sweep", str(base / "store"), "--config", str(tmp_path / "c.yaml"), "--kind",
                         "replica_count", "--out", str(base / "sweep")]) == 0
            capsys.readouterr()
            assert main(["eval", str(base / "store"), str(base / "run" / "fold1.ckpt"), "--out",
                         str(base / "eval")]) == 0
            assert main(["export-repr", str(base / "run" / "fold0.ckpt"), "synth_sadness_0002", "--store",
                         str(base / "store"), "--out", str(base / "export")]) == 0
            outputs.append((_tree_bytes(base), capsys.readouterr().out))
        (files_a, out_a), (files_b, out_b) = outputs
        assert files_a.keys() == files_b.keys()
        assert "run/fold0.ckpt" in files_a and "run/fold0_history.csv" in files_a
        for name in files_a:
            assert files_a[name] == files_b[name], name
        assert out_a == out_b
