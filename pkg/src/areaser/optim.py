"""SGD and Adam operating in place on named parameter arrays."""
from __future__ import annotations

from typing import Dict, Iterable, Tuple

import numpy as np

from .errors import ConfigurationError, NumericalError

NamedTriple = Tuple[str, np.ndarray, np.ndarray]  # (name, parameter, gradient)


def _check_grads(triples):
    for name, p, g in triples:
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")


class SGD:
    def __init__(self, lr=0.01, momentum=0.0, weight_decay=0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, triples: Iterable[NamedTriple]):
        triples = list(triples)
        _check_grads(triples)
        self.step_count += 1
        for name, p, g in triples:
            if self.weight_decay:
                g = g + self.weight_decay * p
            if self.momentum:
                v = self.velocity.setdefault(name, np.zeros_like(p))
                v *= self.momentum
                v += g
                g = v
            p -= (self.lr * g).astype(p.dtype, copy=False)

    def state_dict(self):
        return {"step_count": self.step_count}, dict(self.velocity)

    def load_state_dict(self, meta, arrays):
        self.step_count = meta["step_count"]
        self.velocity = {k: v.copy() for k, v in arrays.items()}


class Adam:
    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, triples: Iterable[NamedTriple]):
        triples = list(triples)
        _check_grads(triples)
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for name, p, g in triples:
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p -= update.astype(p.dtype, copy=False)

    def state_dict(self):
        arrays = {f"m.{k}": v for k, v in self.m.items()}
        arrays.update({f"v.{k}": v for k, v in self.v.items()})
        return {"step_count": self.step_count}, arrays

    def load_state_dict(self, meta, arrays):
        self.step_count = meta["step_count"]
        self.m = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("v.")}


def make_optimizer(algo: str, lr: float, betas=(0.9, 0.999), weight_decay=0.0, momentum=0.0):
    algo = algo.lower()
    if algo == "adam":
        return Adam(lr=lr, betas=tuple(betas), weight_decay=weight_decay)
    if algo == "sgd":
        return SGD(lr=lr, momentum=momentum, weight_decay=weight_decay)
    raise ConfigurationError(f"unknown optimizer {algo!r}; expected 'adam' or 'sgd'")
