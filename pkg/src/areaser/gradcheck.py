"""Central finite-difference checks of every hand-written backward pass."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import layers as L
from .area_attention import KEY_MODES, VALUE_MODES, AreaConfig, AttentionWeights, area_attention_backward, area_attention_forward
from .model import AreaAttentionNet, ModelConfig

EPS = 1e-4
LAYER_TOL = 1e-4
MODEL_TOL = 1e-3


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def _projection(rng, shape):
    return rng.standard_normal(shape)


def check_conv(rng) -> List[CheckResult]:
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, 3, 2))
    b = rng.standard_normal(4)
    pad = ((1, 1), (0, 1))
    out, _ = L.conv2d_forward(x, w, b, stride=(1, 2), padding=pad)
    R = _projection(rng, out.shape)
    f = lambda: float(np.sum(L.conv2d_forward(x, w, b, (1, 2), pad)[0] * R))
    g = L.conv2d_backward(R, L.conv2d_forward(x, w, b, (1, 2), pad)[1])
    return [CheckResult(f"conv2d.{k}", rel_error(a, numeric_grad(f, arr)), LAYER_TOL)
            for k, arr, a in (("input", x, g.input_grad), ("weight", w, g.param_grads["weight"]),
                              ("bias", b, g.param_grads["bias"]))]


def check_batchnorm(rng) -> List[CheckResult]:
    results = []
    for training in (True, False):
        x = rng.standard_normal((3, 2, 2, 3)) * 2 + 1
        gamma, beta = rng.standard_normal(2), rng.standard_normal(2)
        rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2, 2)
        R = _projection(rng, x.shape)

        def f():
            return float(np.sum(L.batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), training)[0] * R))

        g = L.batchnorm_backward(R, L.batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), training)[1])
        mode = "train" if training else "eval"
        for k, arr, a in (("input", x, g.input_grad), ("gamma", gamma, g.param_grads["gamma"]),
                          ("beta", beta, g.param_grads["beta"])):
            results.append(CheckResult(f"batchnorm[{mode}].{k}", rel_error(a, numeric_grad(f, arr)), LAYER_TOL))
    return results


def check_linear(rng) -> List[CheckResult]:
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((5, 3))
    b = rng.standard_normal(3)
    R = _projection(rng, (4, 3))
    f = lambda: float(np.sum(L.linear_forward(x, w, b) * R))
    g = L.linear_backward(R, x, w)
    return [CheckResult(f"linear.{k}", rel_error(a, numeric_grad(f, arr)), LAYER_TOL)
            for k, arr, a in (("input", x, g.input_grad), ("weight", w, g.param_grads["weight"]),
                              ("bias", b, g.param_grads["bias"]))]


def check_pointwise(rng) -> List[CheckResult]:
    x = rng.standard_normal((3, 2, 4, 4))
    x[np.abs(x) < 1e-2] += 0.1  # keep away from the relu kink
    R = _projection(rng, x.shape)
    res = [CheckResult("relu.input", rel_error(L.relu_backward(R, x), numeric_grad(lambda: float(np.sum(L.relu(x) * R)), x)), LAYER_TOL)]
    out, cache = L.maxpool2d_forward(x)
    Rp = _projection(rng, out.shape)
    res.append(CheckResult("maxpool2d.input", rel_error(L.maxpool2d_backward(Rp, cache),
                           numeric_grad(lambda: float(np.sum(L.maxpool2d_forward(x)[0] * Rp)), x)), LAYER_TOL))
    z = rng.standard_normal((3, 5))
    Rs = _projection(rng, z.shape)
    res.append(CheckResult("softmax.input", rel_error(L.softmax_backward(Rs, L.softmax(z)),
                           numeric_grad(lambda: float(np.sum(L.softmax(z) * Rs)), z)), LAYER_TOL))
    labels = rng.integers(0, 5, size=3)
    _, d = L.cross_entropy(z, labels)
    res.append(CheckResult("cross_entropy.logits", rel_error(d, numeric_grad(lambda: L.cross_entropy(z, labels)[0], z)), LAYER_TOL))
    return res


def check_area_attention(rng, key_mode: str, value_mode: str, H=3, W=3, C=4, heads=2) -> List[CheckResult]:
    cfg = AreaConfig(2, 2, key_mode, value_mode, heads)
    memory = rng.standard_normal((H, W, C))
    query = rng.standard_normal((H * W, C))
    wts = AttentionWeights.init(C, rng, np.float64)
    R = _projection(rng, (H * W, C))
    noise_seed = int(rng.integers(1 << 31))

    def f():
        out, _, _ = area_attention_forward(query, memory, wts, cfg, True, np.random.default_rng(noise_seed))
        return float(np.sum(out * R))

    _, _, cache = area_attention_forward(query, memory, wts, cfg, True, np.random.default_rng(noise_seed))
    g = area_attention_backward(cache, R)
    name = f"area_attention[{key_mode}-{value_mode}]"
    pairs = [("memory", memory, g.memory_grad), ("query", query, g.input_grad),
             ("wq", wts.wq, g.param_grads["wq"]), ("wk", wts.wk, g.param_grads["wk"]),
             ("wv", wts.wv, g.param_grads["wv"]), ("wo", wts.wo, g.param_grads["wo"])]
    return [CheckResult(f"{name}.{k}", rel_error(a, numeric_grad(f, arr)), LAYER_TOL) for k, arr, a in pairs]


def tiny_model_config(**attention) -> ModelConfig:
    area = dict(max_height=2, max_width=2, key_mode="sample", value_mode="max", num_heads=4)
    area.update(attention)
    return ModelConfig(parallel_channels=2, trunk_channels=(4, 4, 4, 80), attention=AreaConfig(**area))


def check_model(rng, n_params: int = 10, mel: int = 8, frames: int = 12, config: ModelConfig = None) -> List[CheckResult]:
    """Spot check of ``n_params`` random parameter entries through the whole network."""
    config = config or tiny_model_config()
    net = AreaAttentionNet(config, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    x = rng.standard_normal((3, 1, mel, frames))
    labels = rng.integers(0, config.num_classes, size=3)
    noise_state = net.noise_rng.bit_generator.state
    snapshot = {k: v.copy() for k, v in net.state_arrays().items()}

    def loss():
        # batchnorm running buffers and sampling noise must not drift between evaluations
        for prefix, mod in net.modules():
            for k in mod.buffers:
                mod.buffers[k][...] = snapshot[f"{prefix}.{k}"]
        net.noise_rng.bit_generator.state = noise_state
        return L.cross_entropy(net.forward(x), labels)[0]

    net.train()
    loss()
    # the forward inside loss() left the cache backward consumes
    net.noise_rng.bit_generator.state = noise_state
    for prefix, mod in net.modules():
        for k in mod.buffers:
            mod.buffers[k][...] = snapshot[f"{prefix}.{k}"]
    _, d = L.cross_entropy(net.forward(x), labels)
    net.backward(d)
    params = list(net.named_parameters())
    sizes = np.array([p.size for _, p, _ in params])
    results = []
    picks = rng.choice(int(sizes.sum()), size=n_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for flat_idx in sorted(picks):
        j = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        name, p, g = params[j]
        i = int(flat_idx - offsets[j])
        pf = p.reshape(-1)
        old = pf[i]
        pf[i] = old + EPS
        fp = loss()
        pf[i] = old - EPS
        fm = loss()
        pf[i] = old
        num = (fp - fm) / (2 * EPS)
        ana = float(g.reshape(-1)[i])
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        results.append(CheckResult(f"model.{name}[{i}]", err, MODEL_TOL))
    return results


def run_suite(seed: int = 0, model_checks: bool = True) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = check_conv(rng) + check_batchnorm(rng) + check_linear(rng) + check_pointwise(rng)
    for km in KEY_MODES:
        for vm in VALUE_MODES:
            results += check_area_attention(rng, km, vm)
    if model_checks:
        results += check_model(rng)
    return results
