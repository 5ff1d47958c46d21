"""scikit-learn compatible wrapper around :class:`AreaAttentionNet`.

``fit`` runs minibatch training with per-epoch utterance-level evaluation
on an optional ``eval_set`` and keeps the weights of the epoch with the
highest ACC (mean of WA and UA).
"""
from __future__ import annotations

import logging
import math
from typing import Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .area_attention import AreaConfig
from .errors import InputError, NumericalError
from .layers import cross_entropy
from .metrics import MetricsReport, compute_metrics, confusion_matrix
from .model import AreaAttentionNet, ModelConfig, average_utterance_probs, load_checkpoint, save_checkpoint
from .optim import make_optimizer
from .tensor import resolve_dtype

log = logging.getLogger(__name__)


def check_segments(X, dtype=np.float32) -> np.ndarray:
    """Validate a stack of segments: (n, mel, frames) or (n, 1, mel, frames), finite."""
    X = np.asarray(X)
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3:
        raise InputError(f"expected segments of shape (n, mel, frames), got {X.shape}")
    if X.shape[0] == 0:
        raise InputError("no segments given")
    if not np.all(np.isfinite(X)):
        raise InputError("segments contain non-finite values")
    return X.astype(dtype, copy=False)


def check_labels(y, n, n_classes) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise InputError("labels must be integer class ids")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= n_classes:
        raise InputError(f"labels must lie in [0, {n_classes})")
    return y


def group_segments(groups: Sequence) -> Tuple[list, list]:
    """Unique group ids in first-appearance order, with the row indices of each."""
    order, index = [], {}
    for i, g in enumerate(groups):
        if g not in index:
            index[g] = []
            order.append(g)
        index[g].append(i)
    return order, [np.asarray(index[g]) for g in order]


class AreaAttentionClassifier(ClassifierMixin, BaseEstimator):
    """Speech-emotion classifier over fixed-size logMel segments.

    Parameters mirror the network and training configuration; see
    :class:`ModelConfig` and :class:`AreaConfig`.  ``max_area`` is a
    ``(height, width)`` pair; ``use_attention=False`` gives the plain CNN.
    """

    def __init__(self, parallel_channels=16, trunk_channels=(32, 48, 64, 80), time_kernel=(2, 10),
                 freq_kernel=(10, 2), pool_after=(0, 1), use_attention=True, max_area=(3, 3),
                 key_mode="sample", value_mode="max", num_heads=4, n_classes=4, epochs=50,
                 batch_size=32, lr=1e-3, optimizer="adam", betas=(0.9, 0.999), weight_decay=0.0,
                 normalize=False, random_state=0, dtype="float32", verbose=0):
        self.parallel_channels = parallel_channels
        self.trunk_channels = trunk_channels
        self.time_kernel = time_kernel
        self.freq_kernel = freq_kernel
        self.pool_after = pool_after
        self.use_attention = use_attention
        self.max_area = max_area
        self.key_mode = key_mode
        self.value_mode = value_mode
        self.num_heads = num_heads
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.betas = betas
        self.weight_decay = weight_decay
        self.normalize = normalize
        self.random_state = random_state
        self.dtype = dtype
        self.verbose = verbose

    # -- configuration -----------------------------------------------------
    def model_config(self) -> ModelConfig:
        return ModelConfig(
            parallel_channels=self.parallel_channels,
            trunk_channels=tuple(self.trunk_channels),
            time_kernel=tuple(self.time_kernel),
            freq_kernel=tuple(self.freq_kernel),
            pool_after=tuple(self.pool_after),
            use_attention=self.use_attention,
            attention=AreaConfig(self.max_area[0], self.max_area[1], self.key_mode, self.value_mode, self.num_heads),
            num_classes=self.n_classes,
        )

    @classmethod
    def from_model_config(cls, config: ModelConfig, **train_params) -> "AreaAttentionClassifier":
        a = config.attention
        return cls(parallel_channels=config.parallel_channels, trunk_channels=config.trunk_channels,
                   time_kernel=config.time_kernel, freq_kernel=config.freq_kernel, pool_after=config.pool_after,
                   use_attention=config.use_attention, max_area=(a.max_height, a.max_width), key_mode=a.key_mode,
                   value_mode=a.value_mode, num_heads=a.num_heads, n_classes=config.num_classes, **train_params)

    def _seeds(self):
        root = np.random.SeedSequence(int(self.random_state))
        init_seq, shuffle_seq = root.spawn(2)
        return int(init_seq.generate_state(1)[0]), np.random.default_rng(shuffle_seq)

    def _scale(self, X):
        if self.normalize:
            return (X - self.feature_mean_) / self.feature_std_
        return X

    # -- training ------------------------------------------------------------
    def fit(self, X, y, eval_set=None, monitor_set=None):
        """Train on segments ``X`` with labels ``y``.

        ``eval_set`` and ``monitor_set`` are ``(X, y, groups)`` triples scored
        at utterance level after every epoch; ``eval_set`` drives model
        selection.
        """
        dtype = resolve_dtype(self.dtype)
        X = check_segments(X, dtype)
        y = check_labels(y, len(X), self.n_classes)
        self.classes_ = np.arange(self.n_classes)
        self.feature_mean_, self.feature_std_ = 0.0, 1.0
        if self.normalize:
            self.feature_mean_ = float(X.mean())
            self.feature_std_ = float(X.std()) or 1.0
        init_seed, shuffle_rng = self._seeds()
        self.network_ = AreaAttentionNet(self.model_config(), seed=init_seed, dtype=dtype)
        self.optimizer_ = make_optimizer(self.optimizer, self.lr, self.betas, self.weight_decay)
        self.history_ = []
        best_acc, best_state, self.best_epoch_ = -math.inf, None, 0
        Xs = self._scale(X).astype(dtype, copy=False)

        for epoch in range(0, int(self.epochs) + 1):
            loss = None
            if epoch > 0:
                loss = self._train_epoch(Xs, y, shuffle_rng)
            row = {"epoch": epoch, "loss": loss}
            if eval_set is not None:
                rep = self.score_utterances(*eval_set)
                row.update(wa=rep.wa, ua=rep.ua, acc=rep.acc)
                if rep.acc > best_acc:
                    best_acc, self.best_epoch_ = rep.acc, epoch
                    best_state = {k: v.copy() for k, v in self.network_.state_arrays().items()}
                    self.best_report_ = rep
            if monitor_set is not None:
                rep = self.score_utterances(*monitor_set)
                row.update(train_wa=rep.wa, train_ua=rep.ua, train_acc=rep.acc)
            self.history_.append(row)
            if self.verbose:
                log.info("epoch %s %s", epoch, {k: v for k, v in row.items() if k != "epoch"})
        self.best_acc_ = best_acc if eval_set is not None else None
        if best_state is not None:
            self.network_.load_state_arrays(best_state)
        else:
            self.best_epoch_ = int(self.epochs)
        self.network_.eval()
        return self

    def _train_epoch(self, X, y, rng) -> float:
        net = self.network_
        net.train()
        order = rng.permutation(len(X))
        total, count = 0.0, 0
        for start in range(0, len(X), self.batch_size):
            idx = order[start:start + self.batch_size]
            logits = net.forward(X[idx])
            loss, dlogits = cross_entropy(logits, y[idx])
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite training loss at sample offset {start}")
            net.backward(dlogits)
            self.optimizer_.step(net.named_parameters())
            total += loss * len(idx)
            count += len(idx)
        net.eval()
        return total / count

    # -- inference -------------------------------------------------------------
    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_segments(X, self.network_.dtype)
        return self.network_.predict_proba(self._scale(X).astype(self.network_.dtype, copy=False))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def predict_utterances(self, X, groups, average="probs"):
        """Average segment predictions per utterance.

        Returns ``(utterance_ids, probabilities, predicted_labels)``; with
        ``average="logits"`` the mean logit is soft-maxed instead.
        """
        probs = self.predict_proba(X)
        if average == "logits":
            probs = np.log(np.maximum(probs, 1e-300))
        ids, rows = group_segments(list(groups))
        out = np.empty((len(ids), probs.shape[1]))
        labels = np.empty(len(ids), dtype=np.int64)
        for i, r in enumerate(rows):
            p, _ = average_utterance_probs(probs[r])
            if average == "logits":
                p = np.exp(p - p.max())
                p /= p.sum()
            out[i] = p
            labels[i] = int(np.argmax(p))
        return ids, out, labels

    def score_utterances(self, X, y, groups) -> MetricsReport:
        y = np.asarray(y)
        ids, _, pred = self.predict_utterances(X, groups)
        _, rows = group_segments(list(groups))
        truth = np.array([y[r[0]] for r in rows])
        return compute_metrics(confusion_matrix(truth, pred, self.n_classes))

    # -- persistence -----------------------------------------------------------
    def save(self, path, extra: Optional[dict] = None) -> None:
        check_is_fitted(self, "network_")
        params = self.get_params()
        params = {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
        header = {
            "format": "areaser-checkpoint-1",
            "estimator_params": params,
            "model_config": self.network_.config.to_dict(),
            "step": self.optimizer_.step_count,
            "best_epoch": self.best_epoch_,
            "best_acc": self.best_acc_,
            "history": self.history_,
            "feature_mean": self.feature_mean_,
            "feature_std": self.feature_std_,
            "noise_rng_state": self.network_.noise_rng.bit_generator.state,
        }
        if extra:
            header.update(extra)
        save_checkpoint(path, header, self.network_.state_arrays())

    @classmethod
    def load(cls, path) -> "AreaAttentionClassifier":
        header, arrays = load_checkpoint(path)
        params = dict(header["estimator_params"])
        for k in ("trunk_channels", "time_kernel", "freq_kernel", "pool_after", "max_area", "betas"):
            params[k] = tuple(params[k])
        est = cls(**params)
        est.classes_ = np.arange(est.n_classes)
        est.network_ = AreaAttentionNet(ModelConfig.from_dict(header["model_config"]), dtype=resolve_dtype(est.dtype))
        est.network_.load_state_arrays(arrays)
        est.network_.noise_rng.bit_generator.state = header["noise_rng_state"]
        est.network_.eval()
        est.optimizer_ = make_optimizer(est.optimizer, est.lr, est.betas, est.weight_decay)
        est.optimizer_.step_count = header["step"]
        est.history_ = header["history"]
        est.best_epoch_ = header["best_epoch"]
        est.best_acc_ = header["best_acc"]
        est.feature_mean_ = header["feature_mean"]
        est.feature_std_ = header["feature_std"]
        est.checkpoint_header_ = header
        return est
