"""Differentiable building blocks with hand-written backward passes.

Every layer follows the same contract: ``forward`` caches whatever the
matching ``backward`` needs, ``backward`` takes the upstream gradient,
stores parameter gradients in ``self.grads`` and returns the input
gradient.  Functional kernels (``conv2d_forward`` etc.) are exposed for
direct testing.
"""
from __future__ import annotations

import math
from typing import Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, InputError, NumericalError
from .tensor import GradBundle

Padding = Union[int, Tuple[int, int], Tuple[Tuple[int, int], Tuple[int, int]]]


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def normalize_padding(padding: Padding) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    """Return ``((top, bottom), (left, right))``."""
    if isinstance(padding, (tuple, list)) and isinstance(padding[0], (tuple, list)):
        (pt, pb), (pl, pr) = padding
        return (int(pt), int(pb)), (int(pl), int(pr))
    ph, pw = _pair(padding)
    return (ph, ph), (pw, pw)


def same_padding(kernel: Tuple[int, int]) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    """Stride-1 padding that keeps spatial extents; extra row/col goes last."""
    kh, kw = kernel
    return ((kh - 1) // 2, kh // 2), ((kw - 1) // 2, kw // 2)


# ---------------------------------------------------------------------------
# convolution


def conv2d_forward(x, weight, bias, stride=1, padding: Padding = 0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``weight`` (K,C,kh,kw).

    Returns ``(out, cache)``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"input has {c} channels, weight expects {cw}")
    sh, sw = _pair(stride)
    (pt, pb), (pl, pr) = normalize_padding(padding)
    if kh > h + pt + pb or kw > w + pl + pr:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + pt + pb}x{w + pl + pr}")
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = win.shape[2], win.shape[3]
    # (N,C,Ho,Wo,kh,kw) -> (N*Ho*Wo, C*kh*kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ weight.reshape(k, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    cache = (x.shape, xp.shape, cols, weight, bias is not None, (sh, sw), (pt, pb, pl, pr), (ho, wo))
    return np.ascontiguousarray(out), cache


def conv2d_backward(upstream, cache) -> GradBundle:
    x_shape, xp_shape, cols, weight, has_bias, (sh, sw), (pt, pb, pl, pr), (ho, wo) = cache
    n, c, h, w = x_shape
    k, _, kh, kw = weight.shape
    if upstream.shape != (n, k, ho, wo):
        raise DimensionError(f"upstream shape {upstream.shape} != forward output {(n, k, ho, wo)}")
    g = upstream.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
    grads = {"weight": (g.T @ cols).reshape(weight.shape)}
    if has_bias:
        grads["bias"] = g.sum(axis=0)
    # (C*kh*kw, N*Ho*Wo) so each kernel offset is one contiguous (C, N, Ho, Wo) block
    dcols = (weight.reshape(k, -1).T @ g.T).reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((c, n) + xp_shape[2:], dtype=upstream.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += dcols[:, i, j]
    dxp = dxp.transpose(1, 0, 2, 3)
    dx = dxp[:, :, pt:pt + h, pl:pl + w]
    return GradBundle(np.ascontiguousarray(dx), grads)


# ---------------------------------------------------------------------------
# batch normalisation


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalisation of (N,C,H,W) input.

    In training mode the running buffers are updated in place.
    """
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise InputError("batchnorm needs at least 2 values per channel in training mode")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out.astype(x.dtype, copy=False), (xhat, inv_std, gamma, training)


def batchnorm_backward(upstream, cache) -> GradBundle:
    xhat, inv_std, gamma, training = cache
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    dgamma = (upstream * xhat).sum(axis=axes)
    dbeta = upstream.sum(axis=axes)
    dxhat = upstream * gamma.reshape(shape)
    if training:
        m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
        dx = (inv_std.reshape(shape) / m) * (
            m * dxhat - dxhat.sum(axis=axes).reshape(shape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
        )
    else:
        dx = dxhat * inv_std.reshape(shape)
    return GradBundle(dx.astype(upstream.dtype, copy=False), {"gamma": dgamma, "beta": dbeta})


# ---------------------------------------------------------------------------
# elementwise, pooling, dense


def relu(x):
    return np.maximum(x, 0)


def relu_backward(upstream, x):
    return upstream * (x > 0)


def maxpool2d_forward(x, size=2):
    """Non-overlapping ``size`` x ``size`` max pooling; trailing rows/cols dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise DimensionError(f"cannot max-pool {h}x{w} by {size}")
    xc = x[:, :, : ho * size, : wo * size].reshape(n, c, ho, size, wo, size)
    xc = xc.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = xc.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(xc, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, size)


def maxpool2d_backward(upstream, cache):
    x_shape, arg, size = cache
    n, c, h, w = x_shape
    ho, wo = arg.shape[2], arg.shape[3]
    dwin = np.zeros((n, c, ho, wo, size * size), dtype=upstream.dtype)
    np.put_along_axis(dwin, arg[..., None], upstream[..., None], axis=-1)
    dwin = dwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
    dx = np.zeros(x_shape, dtype=upstream.dtype)
    dx[:, :, : ho * size, : wo * size] = dwin
    return dx


def linear_forward(x, weight, bias):
    """``x @ weight + bias`` with weight stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear expects last dim {weight.shape[0]}, got {x.shape}")
    return x @ weight + bias


def linear_backward(upstream, x, weight) -> GradBundle:
    x2 = x.reshape(-1, x.shape[-1])
    g2 = upstream.reshape(-1, upstream.shape[-1])
    return GradBundle(upstream @ weight.T, {"weight": x2.T @ g2, "bias": g2.sum(axis=0)})


def softmax(x, axis=-1):
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(upstream, probs, axis=-1):
    return probs * (upstream - (upstream * probs).sum(axis=axis, keepdims=True))


def log_softmax(x, axis=-1):
    if x.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood. Returns ``(loss, dlogits)``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if k == 0:
        raise DimensionError("cross_entropy over an empty class axis")
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise InputError(f"labels must be {n} ints in [0, {k})")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1
    dlogits /= n
    return float(loss), dlogits.astype(logits.dtype, copy=False)


# ---------------------------------------------------------------------------
# stateful layers


class Layer:
    """Parameters, buffers and a train/eval switch."""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.training = True
        self._cache = None

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}

    def named_parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield from self.params.items()

    def _take_cache(self):
        if self._cache is None:
            raise ContractError(f"{type(self).__name__}.backward called without a matching forward")
        cache, self._cache = self._cache, None
        return cache


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding: Padding = 0,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = _pair(kernel_size)
        self.stride = _pair(stride)
        self.padding = normalize_padding(padding)
        fan_in = in_channels * kh * kw
        self.params["weight"] = kaiming_uniform(rng, (out_channels, in_channels, kh, kw), fan_in, dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)

    def forward(self, x):
        out, self._cache = conv2d_forward(x, self.params["weight"], self.params["bias"], self.stride, self.padding)
        return out

    def backward(self, upstream):
        bundle = conv2d_backward(upstream, self._take_cache())
        self.grads = bundle.param_grads
        return bundle.input_grad


class BatchNorm2d(Layer):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x):
        out, self._cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"], self.buffers["running_mean"],
            self.buffers["running_var"], self.training, self.momentum, self.eps)
        return out

    def backward(self, upstream):
        bundle = batchnorm_backward(upstream, self._take_cache())
        self.grads = bundle.param_grads
        return bundle.input_grad


class Linear(Layer):
    def __init__(self, in_features, out_features, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = kaiming_uniform(rng, (in_features, out_features), in_features, dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)

    def forward(self, x):
        self._cache = x
        return linear_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, upstream):
        bundle = linear_backward(upstream, self._take_cache(), self.params["weight"])
        self.grads = bundle.param_grads
        return bundle.input_grad


class ConvBlock(Layer):
    """Conv2d -> BatchNorm2d -> ReLU, with optional trailing 2x2 max-pool."""

    def __init__(self, in_channels, out_channels, kernel_size, padding: Padding, pool=False,
                 rng=None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size, padding=padding, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)
        self.pool = pool
        self.children = {"conv": self.conv, "bn": self.bn}

    def train(self, mode=True):
        super().train(mode)
        for child in self.children.values():
            child.train(mode)
        return self

    def forward(self, x):
        z = self.bn.forward(self.conv.forward(x))
        a = relu(z)
        cache = [z]
        if self.pool:
            a, pcache = maxpool2d_forward(a)
            cache.append(pcache)
        self._cache = cache
        return a

    def backward(self, upstream):
        cache = self._take_cache()
        if self.pool:
            upstream = maxpool2d_backward(upstream, cache[1])
        g = relu_backward(upstream, cache[0])
        return self.conv.backward(self.bn.backward(g))


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(parts, axis=1)


def ensure_finite_loss(loss: float) -> float:
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss}")
    return loss
