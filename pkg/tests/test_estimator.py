import numpy as np
import pytest
from sklearn.base import clone

from areaser.errors import InputError
from areaser.estimator import AreaAttentionClassifier, check_labels, check_segments, group_segments

TINY = dict(parallel_channels=2, trunk_channels=(4, 4, 4, 80), max_area=(2, 2), batch_size=8)


def toy_data(n_utt=8, segs=2, seed=0):
    """Class k has a bright mel band at rows 2k..2k+1."""
    rng = np.random.default_rng(seed)
    X, y, g = [], [], []
    for u in range(n_utt):
        label = u % 4
        for _ in range(segs):
            x = rng.normal(0, 0.3, (8, 12))
            x[2 * label:2 * label + 2] += 3
            X.append(x)
            y.append(label)
            g.append(f"u{u}")
    return np.array(X, np.float32), np.array(y), g


def test_get_params_and_clone():
    est = AreaAttentionClassifier(**TINY, epochs=3)
    params = est.get_params()
    assert params["epochs"] == 3 and params["max_area"] == (2, 2)
    c = clone(est)
    assert c.get_params() == params and c is not est
    est.set_params(lr=0.5)
    assert est.lr == 0.5


def test_model_config_roundtrip():
    est = AreaAttentionClassifier(**TINY, key_mode="mean", value_mode="sum")
    cfg = est.model_config()
    assert cfg.attention.key_mode == "mean"
    back = AreaAttentionClassifier.from_model_config(cfg, epochs=2)
    assert back.model_config() == cfg and back.epochs == 2


def test_input_validation():
    with pytest.raises(InputError):
        check_segments(np.zeros((2, 8)))
    with pytest.raises(InputError):
        check_segments(np.zeros((0, 8, 12)))
    with pytest.raises(InputError):
        check_segments(np.full((1, 8, 12), np.nan))
    assert check_segments(np.zeros((2, 1, 8, 12))).shape == (2, 8, 12)
    with pytest.raises(InputError):
        check_labels([0, 4], 2, 4)
    with pytest.raises(InputError):
        check_labels([0.5, 1], 2, 4)
    with pytest.raises(InputError):
        check_labels([0, 1, 2], 2, 4)


def test_group_segments_order():
    ids, rows = group_segments(["b", "a", "b", "c"])
    assert ids == ["b", "a", "c"]
    assert [r.tolist() for r in rows] == [[0, 2], [1], [3]]


def test_predict_before_fit():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        AreaAttentionClassifier().predict(np.zeros((1, 8, 12)))


def test_fit_learns_toy_problem():
    X, y, g = toy_data()
    est = AreaAttentionClassifier(**TINY, epochs=8, lr=1e-2, random_state=0)
    est.fit(X, y, eval_set=(X, y, g), monitor_set=(X, y, g))
    assert [row["epoch"] for row in est.history_] == list(range(9))
    assert est.history_[0]["loss"] is None
    assert est.best_acc_ == max(row["acc"] for row in est.history_)
    assert est.best_acc_ == 1.0
    assert est.predict(X).shape == (len(X),)
    assert est.score(X, y) > 0.9  # ClassifierMixin accuracy on segments
    ids, probs, labels = est.predict_utterances(X, g)
    assert ids == [f"u{i}" for i in range(8)]
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)


def test_best_epoch_weights_restored():
    X, y, g = toy_data()
    est = AreaAttentionClassifier(**TINY, epochs=3, lr=1e-2).fit(X, y, eval_set=(X, y, g))
    rep = est.score_utterances(X, y, g)
    assert rep.acc == est.best_acc_


def test_fit_is_deterministic():
    X, y, g = toy_data()
    a = AreaAttentionClassifier(**TINY, epochs=2, random_state=4).fit(X, y, eval_set=(X, y, g))
    b = AreaAttentionClassifier(**TINY, epochs=2, random_state=4).fit(X, y, eval_set=(X, y, g))
    assert a.history_ == b.history_
    assert a.predict_proba(X).tobytes() == b.predict_proba(X).tobytes()


def test_normalize_flag():
    X, y, _ = toy_data()
    est = AreaAttentionClassifier(**TINY, epochs=1, normalize=True).fit(X + 10, y)
    assert est.feature_mean_ == pytest.approx(float((X + 10).mean()), rel=1e-5)


def test_save_load_roundtrip(tmp_path):
    X, y, g = toy_data()
    est = AreaAttentionClassifier(**TINY, epochs=2, normalize=True).fit(X, y, eval_set=(X, y, g))
    est.save(tmp_path / "e.ckpt", {"fold": 1})
    back = AreaAttentionClassifier.load(tmp_path / "e.ckpt")
    assert back.get_params() == est.get_params()
    assert back.history_ == est.history_ and back.checkpoint_header_["fold"] == 1
    assert back.predict_proba(X).tobytes() == est.predict_proba(X).tobytes()
    back.save(tmp_path / "again.ckpt", {"fold": 1})
    assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "e.ckpt").read_bytes()
