"""Multiscale area attention over a 2-D memory grid.

An *area* is an axis-aligned rectangle of grid cells no larger than
``max_height`` x ``max_width``.  Each area contributes one key and one
value, pooled from its cells (max, mean, sum, or a mean perturbed by the
area's standard deviation).  Queries are the individual grid cells, so the
layer maps an ``H x W x C`` grid to ``H*W`` output tokens of width ``C``.

Areas are always ordered by (height, width, top, left).  Within one
(height, width) block the areas form a dense ``(H-h+1) x (W-w+1)`` grid of
top-left corners, which lets rectangle sums, sliding maxima and their
adjoints be computed with array slicing instead of per-area loops.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .layers import Layer, softmax
from .tensor import GradBundle

KEY_MODES = ("max", "mean", "sample")
VALUE_MODES = ("max", "mean", "sum")

# relative variance below this is treated as zero (summed-table cancellation noise)
_VAR_RTOL = 64 * np.finfo(np.float64).eps


@dataclass(frozen=True)
class AreaConfig:
    max_height: int = 3
    max_width: int = 3
    key_mode: str = "sample"
    value_mode: str = "max"
    num_heads: int = 4

    def __post_init__(self):
        if self.max_height < 1 or self.max_width < 1:
            raise ConfigurationError("max area height and width must be >= 1")
        if self.num_heads < 1:
            raise ConfigurationError("num_heads must be >= 1")
        object.__setattr__(self, "key_mode", str(self.key_mode).lower())
        object.__setattr__(self, "value_mode", str(self.value_mode).lower())
        if self.key_mode not in KEY_MODES:
            raise ConfigurationError(f"key_mode must be one of {KEY_MODES}, got {self.key_mode!r}")
        if self.value_mode not in VALUE_MODES:
            raise ConfigurationError(f"value_mode must be one of {VALUE_MODES}, got {self.value_mode!r}")


class AreaIndex(NamedTuple):
    top: int
    left: int
    height: int
    width: int


class _Block(NamedTuple):
    height: int
    width: int
    offset: int  # index of the block's first area
    rows: int  # H - height + 1
    cols: int  # W - width + 1


class AreaGeometry(NamedTuple):
    grid: Tuple[int, int]
    blocks: Tuple[_Block, ...]
    count: int
    sizes: np.ndarray  # (A, 1) cell count per area


def _check_grid(H, W, max_h, max_w):
    if H < 1 or W < 1:
        raise DimensionError(f"grid extents must be positive, got {H}x{W}")
    if max_h < 1 or max_w < 1:
        raise DimensionError(f"area bounds must be positive, got {max_h}x{max_w}")


@lru_cache(maxsize=64)
def area_geometry(H: int, W: int, max_h: int, max_w: int) -> AreaGeometry:
    _check_grid(H, W, max_h, max_w)
    blocks = []
    sizes = []
    offset = 0
    for h in range(1, min(max_h, H) + 1):
        for w in range(1, min(max_w, W) + 1):
            rows, cols = H - h + 1, W - w + 1
            blocks.append(_Block(h, w, offset, rows, cols))
            sizes.append(np.full(rows * cols, h * w, dtype=np.float64))
            offset += rows * cols
    sizes_arr = np.concatenate(sizes)[:, None]
    sizes_arr.setflags(write=False)
    return AreaGeometry((H, W), tuple(blocks), offset, sizes_arr)


def enumerate_areas(H: int, W: int, max_h: int, max_w: int) -> List[AreaIndex]:
    """All rectangles up to ``max_h`` x ``max_w`` inside an ``H`` x ``W`` grid.

    Bounds larger than the grid are clipped.  Order: height, width, top, left.

    >>> len(enumerate_areas(3, 3, 2, 2))
    25
    """
    geom = area_geometry(H, W, max_h, max_w)
    return [
        AreaIndex(t, l, b.height, b.width)
        for b in geom.blocks
        for t in range(b.rows)
        for l in range(b.cols)
    ]


def area_count(H: int, W: int, max_h: int, max_w: int) -> int:
    return area_geometry(H, W, max_h, max_w).count


# ---------------------------------------------------------------------------
# summed-area tables


class IntegralTables(NamedTuple):
    sum: np.ndarray
    sumsq: np.ndarray  # of (memory - shift) squared
    shift: np.ndarray  # (..., 1, 1, C) per-channel grid mean


def build_integral_tables(memory: np.ndarray) -> IntegralTables:
    """Zero-bordered prefix sums of ``memory`` (..., H, W, C) and of its
    squared deviation from the per-channel grid mean.

    ``sum[..., i, j, :]`` is the total of ``memory[..., :i, :j, :]``.  Centring
    the squares keeps the variance difference from cancelling on offset
    data.  Tables are accumulated in float64.
    """
    memory = np.asarray(memory, dtype=np.float64)
    if memory.ndim < 3:
        raise DimensionError(f"memory must be (..., H, W, C), got {memory.shape}")

    def table(x):
        pad = [(0, 0)] * x.ndim
        pad[-3] = (1, 0)
        pad[-2] = (1, 0)
        return np.pad(x.cumsum(axis=-3).cumsum(axis=-2), pad)

    shift = memory.mean(axis=(-3, -2), keepdims=True)
    centred = memory - shift
    return IntegralTables(table(memory), table(centred * centred), shift)


def rect_sum(table: np.ndarray, area: AreaIndex) -> np.ndarray:
    t, l, h, w = area
    return table[..., t + h, l + w, :] - table[..., t, l + w, :] - table[..., t + h, l, :] + table[..., t, l, :]


def block_sums(table: np.ndarray, geom: AreaGeometry) -> np.ndarray:
    """Sums of every area, shape (..., A, C), via four-corner lookups."""
    H, W = geom.grid
    out = []
    for b in geom.blocks:
        h, w = b.height, b.width
        s = table[..., h:, w:, :] - table[..., :H + 1 - h, w:, :] - table[..., h:, :W + 1 - w, :] + table[..., :H + 1 - h, :W + 1 - w, :]
        out.append(s.reshape(s.shape[:-3] + (-1, s.shape[-1])))
    return np.concatenate(out, axis=-2)


def block_sums_adjoint(grad: np.ndarray, geom: AreaGeometry) -> np.ndarray:
    """Transpose of ``memory -> block_sums(build_integral_tables(memory).sum)``.

    ``grad`` is (..., A, C); returns (..., H, W, C): each cell receives the
    total gradient of every area that contains it.
    """
    H, W = geom.grid
    lead = grad.shape[:-2]
    c = grad.shape[-1]
    dt = np.zeros(lead + (H + 1, W + 1, c), dtype=np.float64)
    for b in geom.blocks:
        h, w = b.height, b.width
        g = grad[..., b.offset:b.offset + b.rows * b.cols, :].reshape(lead + (b.rows, b.cols, c))
        dt[..., h:, w:, :] += g
        dt[..., :H + 1 - h, w:, :] -= g
        dt[..., h:, :W + 1 - w, :] -= g
        dt[..., :H + 1 - h, :W + 1 - w, :] += g
    d = dt[..., 1:, 1:, :]
    # adjoint of the double prefix sum is a double suffix sum
    d = np.flip(np.flip(d, axis=-3).cumsum(axis=-3), axis=-3)
    d = np.flip(np.flip(d, axis=-2).cumsum(axis=-2), axis=-2)
    return d


class AreaStats(NamedTuple):
    sum: np.ndarray
    mean: np.ndarray
    std: np.ndarray


def _std_from_moments(sum_, sumsq, n, shift):
    """Mean and population std from the plain sum and the centred sum of squares.

    The variance does not depend on ``shift``, so gradients treat it as a
    constant.  Single cells have zero spread by definition.
    """
    mean = sum_ / n
    mean_sq = sumsq / n
    dev = mean - shift
    var = mean_sq - dev * dev
    # below this the spread is not resolvable in the raw values' precision
    floor = _VAR_RTOL * (mean_sq + shift * shift)
    var = np.where((var <= floor) | (n == 1), 0.0, var)
    return mean, np.sqrt(var)


def pool_area_stats(memory: np.ndarray, tables: IntegralTables, area: AreaIndex) -> AreaStats:
    """Sum, mean and population standard deviation of one area, per channel."""
    H, W = memory.shape[-3], memory.shape[-2]
    t, l, h, w = area
    if h < 1 or w < 1 or t < 0 or l < 0 or t + h > H or l + w > W:
        raise DimensionError(f"area {area} outside {H}x{W} grid")
    n = h * w
    s = rect_sum(tables.sum, area)
    mean, std = _std_from_moments(s, rect_sum(tables.sumsq, area), n, tables.shift[..., 0, 0, :])
    return AreaStats(s, mean, std)


# ---------------------------------------------------------------------------
# sliding-window maxima


def sliding_window_max(values: Sequence[float], k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Maxima of every length-``k`` window of a 1-D sequence (monotonic deque).

    Returns ``(maxima, argmax)``; ties resolve to the smallest index.
    """
    values = np.asarray(values)
    n = len(values)
    if k < 1 or k > n:
        raise DimensionError(f"window {k} invalid for length {n}")
    dq: deque = deque()
    maxima = np.empty(n - k + 1, dtype=values.dtype)
    arg = np.empty(n - k + 1, dtype=np.int64)
    for i in range(n):
        while dq and values[dq[-1]] < values[i]:
            dq.pop()
        dq.append(i)
        if dq[0] <= i - k:
            dq.popleft()
        if i >= k - 1:
            maxima[i - k + 1] = values[dq[0]]
            arg[i - k + 1] = dq[0]
    return maxima, arg


def pool_area_max_deque(memory: np.ndarray, max_h: int, max_w: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-area maxima of an (H, W, C) grid using row-then-column deque passes.

    Slow reference path; :func:`pool_area_max` is the vectorised equivalent.
    """
    H, W, C = memory.shape
    geom = area_geometry(H, W, max_h, max_w)
    vals = np.empty((geom.count, C), dtype=memory.dtype)
    args = np.empty((geom.count, C), dtype=np.int64)
    for b in geom.blocks:
        for c in range(C):
            row_max = np.empty((H, b.cols), dtype=memory.dtype)
            row_arg = np.empty((H, b.cols), dtype=np.int64)
            for r in range(H):
                row_max[r], cols = sliding_window_max(memory[r, :, c], b.width)
                row_arg[r] = r * W + cols
            for col in range(b.cols):
                m, rows = sliding_window_max(row_max[:, col], b.height)
                idx = b.offset + np.arange(b.rows) * b.cols + col
                vals[idx, c] = m
                args[idx, c] = row_arg[rows, col]
    return vals, args


def pool_area_max(memory: np.ndarray, max_h: int, max_w: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-area elementwise maxima of ``memory`` (..., H, W, C).

    Returns ``(values, argmax)`` of shape (..., A, C); ``argmax`` holds the
    row-major flat cell index of the maximum, smallest index on ties.
    Window maxima are grown one row/column at a time, so every window shape
    costs one vectorised comparison over the grid.
    """
    H, W = memory.shape[-3], memory.shape[-2]
    geom = area_geometry(H, W, max_h, max_w)
    lead = memory.shape[:-3]
    C = memory.shape[-1]
    flat = (np.arange(H)[:, None] * W + np.arange(W)[None, :])[..., None]
    flat = np.broadcast_to(flat, memory.shape).astype(np.int64)
    mw = min(max_w, W)

    # horizontal pass: row_val[w] is the max over columns l..l+w-1
    row_val, row_arg = [memory], [flat]
    for w in range(2, mw + 1):
        prev_v, prev_a = row_val[-1][..., :-1, :], row_arg[-1][..., :-1, :]
        new_v, new_a = memory[..., w - 1:, :], flat[..., w - 1:, :]
        take = new_v > prev_v
        row_val.append(np.where(take, new_v, prev_v))
        row_arg.append(np.where(take, new_a, prev_a))

    vals = np.empty(lead + (geom.count, C), dtype=memory.dtype)
    args = np.empty(lead + (geom.count, C), dtype=np.int64)
    # vertical pass per window width
    cur = {}
    for w in range(1, mw + 1):
        cur[w] = (row_val[w - 1], row_arg[w - 1])
    for b in geom.blocks:
        h, w = b.height, b.width
        if h > 1:
            pv, pa = cur[w]
            base_v, base_a = row_val[w - 1], row_arg[w - 1]
            nv, na = base_v[..., h - 1:, :, :], base_a[..., h - 1:, :, :]
            pv, pa = pv[..., :-1, :, :], pa[..., :-1, :, :]
            take = nv > pv
            cur[w] = (np.where(take, nv, pv), np.where(take, na, pa))
        v, a = cur[w]
        sl = slice(b.offset, b.offset + b.rows * b.cols)
        vals[..., sl, :] = v.reshape(lead + (-1, C))
        args[..., sl, :] = a.reshape(lead + (-1, C))
    return vals, args


def route_to_cells(grad: np.ndarray, argmax: np.ndarray, H: int, W: int) -> np.ndarray:
    """Scatter-add ``grad`` (..., A, C) onto cells (..., H, W, C) at ``argmax``."""
    lead = grad.shape[:-2]
    A, C = grad.shape[-2:]
    B = int(np.prod(lead)) if lead else 1
    g = grad.reshape(B, A, C)
    a = argmax.reshape(B, A, C)
    idx = (np.arange(B)[:, None, None] * (H * W) + a) * C + np.arange(C)[None, None, :]
    out = np.bincount(idx.ravel(), weights=g.ravel(), minlength=B * H * W * C)
    return out.reshape(lead + (H, W, C))


# ---------------------------------------------------------------------------
# pooled keys and values


@dataclass
class PooledMemory:
    geometry: AreaGeometry
    keys: np.ndarray  # (..., A, C)
    values: np.ndarray  # (..., A, C)
    sigma: Optional[np.ndarray] = None  # sample mode only
    mean: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None  # drawn xi, sample mode in training only
    shift: Optional[np.ndarray] = None  # (..., 1, 1, C) centre of the squared-moment table
    key_argmax: Optional[np.ndarray] = None
    value_argmax: Optional[np.ndarray] = None

    @property
    def areas(self) -> List[AreaIndex]:
        H, W = self.geometry.grid
        b = self.geometry.blocks
        return enumerate_areas(H, W, b[-1].height, b[-1].width)


def assemble_pooled_memory(memory: np.ndarray, config: AreaConfig, training: bool = False,
                           rng: Optional[np.random.Generator] = None) -> PooledMemory:
    """Pool keys and values of every area of ``memory`` (..., H, W, C).

    ``sample`` keys are ``mean + std * xi`` with fresh standard-normal ``xi``
    per area and channel in training; outside training they equal the mean.
    """
    if memory.ndim < 3:
        raise DimensionError(f"memory must be (..., H, W, C), got {memory.shape}")
    H, W = memory.shape[-3], memory.shape[-2]
    geom = area_geometry(H, W, config.max_height, config.max_width)
    dtype = memory.dtype
    need_sum = "mean" in (config.key_mode, config.value_mode) or config.value_mode == "sum" or config.key_mode == "sample"
    sums = mean = sigma = noise = None
    max_v = max_a = None
    if need_sum:
        tables = build_integral_tables(memory)
        sums = block_sums(tables.sum, geom)
        if config.key_mode == "sample":
            shift = tables.shift[..., 0, :, :]
            mean, sigma = _std_from_moments(sums, block_sums(tables.sumsq, geom), geom.sizes, shift)
        else:
            mean = sums / geom.sizes
    if "max" in (config.key_mode, config.value_mode):
        max_v, max_a = pool_area_max(memory, config.max_height, config.max_width)

    out = PooledMemory(geom, None, None)
    if config.key_mode == "sample":
        out.shift = tables.shift
    if config.key_mode == "max":
        out.keys, out.key_argmax = max_v, max_a
    elif config.key_mode == "mean":
        out.keys = mean.astype(dtype)
    else:
        out.mean = mean.astype(dtype)
        out.sigma = sigma.astype(dtype)
        if training:
            if rng is None:
                raise ConfigurationError("sample keys in training mode need a random generator")
            noise = rng.standard_normal(mean.shape).astype(dtype)
            out.noise = noise
            out.keys = out.mean + out.sigma * noise
        else:
            out.keys = out.mean
    if config.value_mode == "max":
        out.values, out.value_argmax = max_v, max_a
    elif config.value_mode == "mean":
        out.values = (sums / geom.sizes).astype(dtype)
    else:
        out.values = sums.astype(dtype)
    return out


def pooled_memory_backward(pooled: PooledMemory, config: AreaConfig, memory: np.ndarray,
                           dkeys: np.ndarray, dvalues: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``memory`` given gradients w.r.t. pooled keys/values."""
    geom = pooled.geometry
    H, W = geom.grid
    n = geom.sizes
    d_sum = np.zeros(dkeys.shape, dtype=np.float64)
    d_sumsq = None
    d_cells = np.zeros(memory.shape, dtype=np.float64)

    if config.value_mode == "sum":
        d_sum += dvalues
    elif config.value_mode == "mean":
        d_sum += dvalues / n
    else:
        d_cells += route_to_cells(dvalues, pooled.value_argmax, H, W)

    if config.key_mode == "mean":
        d_sum += dkeys / n
    elif config.key_mode == "max":
        d_cells += route_to_cells(dkeys, pooled.key_argmax, H, W)
    else:
        d_mean = dkeys.astype(np.float64)
        if pooled.noise is not None:
            sigma = pooled.sigma.astype(np.float64)
            d_sigma = dkeys * pooled.noise.astype(np.float64)
            safe = np.where(sigma > 0, sigma, 1.0)
            d_var = np.where(sigma > 0, d_sigma / (2 * safe), 0.0)
            dev = pooled.mean.astype(np.float64) - pooled.shift[..., 0, :, :]
            d_mean = d_mean - 2 * dev * d_var
            d_sumsq = d_var / n
        d_sum += d_mean / n

    d_cells += block_sums_adjoint(d_sum, geom)
    if d_sumsq is not None:
        d_cells += 2 * (memory.astype(np.float64) - pooled.shift) * block_sums_adjoint(d_sumsq, geom)
    return d_cells.astype(memory.dtype)


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, dtype=np.float32) -> "AttentionWeights":
        bound = math.sqrt(3.0 / channels)
        mats = [rng.uniform(-bound, bound, (channels, channels)).astype(dtype) for _ in range(4)]
        return cls(*mats)

    @classmethod
    def identity(cls, channels: int, dtype=np.float64) -> "AttentionWeights":
        return cls(*[np.eye(channels, dtype=dtype) for _ in range(4)])


class AttentionGrads(GradBundle):
    """Gradient bundle carrying the memory gradient next to the query gradient."""

    def __init__(self, input_grad, param_grads, memory_grad):
        super().__init__(input_grad, param_grads)
        self.memory_grad = memory_grad


class AttentionCache:
    def __init__(self, **kw):
        self.__dict__.update(kw)
        self.consumed = False


def _split_heads(x, heads):
    # (B, T, C) -> (B, heads, T, dk)
    B, T, C = x.shape
    return x.reshape(B, T, heads, C // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, T, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, h * dk)


def area_attention_forward(query: np.ndarray, memory: np.ndarray, weights: AttentionWeights,
                           config: AreaConfig, training: bool = False,
                           rng: Optional[np.random.Generator] = None):
    """Scaled dot-product attention of ``query`` tokens over the areas of ``memory``.

    ``query`` is (B, N, C) or (N, C); ``memory`` is (B, H, W, C) or (H, W, C).
    Returns ``(output, attn, cache)`` with ``attn`` of shape (B, heads, N, A)
    (leading batch axis dropped for unbatched input).
    """
    unbatched = memory.ndim == 3
    if unbatched:
        query, memory = query[None], memory[None]
    if memory.ndim != 4 or query.ndim != 3:
        raise DimensionError(f"bad shapes query={query.shape} memory={memory.shape}")
    B, N, C = query.shape
    if memory.shape[0] != B or memory.shape[-1] != C:
        raise DimensionError(f"query {query.shape} and memory {memory.shape} disagree")
    heads = config.num_heads
    if C % heads:
        raise ConfigurationError(f"{heads} heads do not divide {C} channels")
    dk = C // heads

    pooled = assemble_pooled_memory(memory, config, training, rng)
    q = query @ weights.wq
    k = pooled.keys @ weights.wk
    v = pooled.values @ weights.wv
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scale = 1.0 / math.sqrt(dk)
    attn = softmax((qh @ kh.transpose(0, 1, 3, 2)) * scale)
    ctx = _merge_heads(attn @ vh)
    out = ctx @ weights.wo
    cache = AttentionCache(query=query, memory=memory, weights=weights, config=config, pooled=pooled,
                           qh=qh, kh=kh, vh=vh, attn=attn, ctx=ctx, scale=scale, unbatched=unbatched)
    if unbatched:
        return out[0], attn[0], cache
    return out, attn, cache


def area_attention_backward(cache: AttentionCache, upstream: np.ndarray) -> AttentionGrads:
    if cache.consumed:
        raise ContractError("attention cache already consumed by a previous backward")
    cache.consumed = True
    if cache.unbatched:
        upstream = upstream[None]
    w = cache.weights
    if upstream.shape != cache.ctx.shape:
        raise DimensionError(f"upstream {upstream.shape} != output {cache.ctx.shape}")
    heads = cache.config.num_heads

    def flat(x):
        return x.reshape(-1, x.shape[-1])

    d_wo = flat(cache.ctx).T @ flat(upstream)
    d_ctx = _split_heads(upstream @ w.wo.T, heads)
    attn = cache.attn
    d_attn = d_ctx @ cache.vh.transpose(0, 1, 3, 2)
    d_vh = attn.transpose(0, 1, 3, 2) @ d_ctx
    d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True)) * cache.scale
    d_qh = d_scores @ cache.kh
    d_kh = d_scores.transpose(0, 1, 3, 2) @ cache.qh
    d_q, d_k, d_v = _merge_heads(d_qh), _merge_heads(d_kh), _merge_heads(d_vh)

    pooled = cache.pooled
    grads = {
        "wq": flat(cache.query).T @ flat(d_q),
        "wk": flat(pooled.keys).T @ flat(d_k),
        "wv": flat(pooled.values).T @ flat(d_v),
        "wo": d_wo,
    }
    d_query = d_q @ w.wq.T
    d_memory = pooled_memory_backward(pooled, cache.config, cache.memory, d_k @ w.wk.T, d_v @ w.wv.T)
    if cache.unbatched:
        d_query, d_memory = d_query[0], d_memory[0]
    return AttentionGrads(d_query, grads, d_memory)


class AreaAttention(Layer):
    """Self-attention layer: grid cells attend over the grid's areas.

    Input (B, H, W, C); output (B, H*W, C) in row-major cell order.
    """

    def __init__(self, channels: int, config: AreaConfig, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32, noise_rng: Optional[np.random.Generator] = None):
        super().__init__()
        if channels % config.num_heads:
            raise ConfigurationError(f"{config.num_heads} heads do not divide {channels} channels")
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        wts = AttentionWeights.init(channels, rng, dtype)
        self.params.update(wq=wts.wq, wk=wts.wk, wv=wts.wv, wo=wts.wo)
        self.noise_rng = noise_rng if noise_rng is not None else np.random.default_rng(0)
        self.last_attention: Optional[np.ndarray] = None

    @property
    def weights(self) -> AttentionWeights:
        p = self.params
        return AttentionWeights(p["wq"], p["wk"], p["wv"], p["wo"])

    def forward(self, x):
        B, H, W, C = x.shape
        query = x.reshape(B, H * W, C)
        out, attn, cache = area_attention_forward(query, x, self.weights, self.config, self.training, self.noise_rng)
        self.last_attention = attn
        self._cache = cache
        return out

    def backward(self, upstream):
        cache = self._take_cache()
        bundle = area_attention_backward(cache, upstream)
        self.grads = bundle.param_grads
        B, H, W, C = cache.memory.shape
        return bundle.memory_grad + bundle.input_grad.reshape(B, H, W, C)
