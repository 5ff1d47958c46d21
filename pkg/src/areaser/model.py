"""CNN + area-attention emotion classifier and its checkpoint format."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .area_attention import AreaAttention, AreaConfig
from .errors import ConfigurationError, ContractError, DimensionError, InputError
from .layers import ConvBlock, Linear, concat_channels, same_padding, softmax
from .tensor import read_tensor, resolve_dtype, write_tensor

CHECKPOINT_MAGIC = b"ATCK"
REPR_CHANNELS = 80


@dataclass(frozen=True)
class ModelConfig:
    parallel_channels: int = 16
    trunk_channels: Tuple[int, ...] = (32, 48, 64, 80)
    time_kernel: Tuple[int, int] = (2, 10)
    freq_kernel: Tuple[int, int] = (10, 2)
    pool_after: Tuple[int, ...] = (0, 1)
    use_attention: bool = True
    attention: AreaConfig = field(default_factory=AreaConfig)
    num_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "trunk_channels", tuple(int(c) for c in self.trunk_channels))
        object.__setattr__(self, "time_kernel", tuple(int(c) for c in self.time_kernel))
        object.__setattr__(self, "freq_kernel", tuple(int(c) for c in self.freq_kernel))
        object.__setattr__(self, "pool_after", tuple(int(c) for c in self.pool_after))
        if isinstance(self.attention, dict):
            object.__setattr__(self, "attention", AreaConfig(**self.attention))
        if not self.trunk_channels or self.trunk_channels[-1] != REPR_CHANNELS:
            raise ConfigurationError(f"last trunk layer must have {REPR_CHANNELS} channels, got {self.trunk_channels}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.parallel_channels < 1:
            raise ConfigurationError("parallel_channels must be >= 1")
        if any(i < 0 or i >= len(self.trunk_channels) for i in self.pool_after):
            raise ConfigurationError(f"pool_after indices {self.pool_after} out of range")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("trunk_channels", "time_kernel", "freq_kernel", "pool_after"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "attention" in d and isinstance(d["attention"], dict):
            d["attention"] = AreaConfig(**d["attention"])
        return cls(**d)

    def min_input_shape(self) -> Tuple[int, int]:
        """Smallest (mel bins, frames) for which every layer has a valid output."""
        factor = 2 ** len(self.pool_after)
        return factor, factor


class AreaAttentionNet:
    """Parallel time/frequency convolutions, a four-layer convolutional trunk,
    area self-attention over the final feature map, token-mean pooling and a
    linear classifier.

    Input is (N, 1, mel_bins, frames) or (N, mel_bins, frames).
    """

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = resolve_dtype(dtype)
        init_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(init_seq)
        self.noise_rng = np.random.default_rng(noise_seq)
        p = config.parallel_channels
        self.time_branch = ConvBlock(1, p, config.time_kernel, same_padding(config.time_kernel), rng=rng, dtype=self.dtype)
        self.freq_branch = ConvBlock(1, p, config.freq_kernel, same_padding(config.freq_kernel), rng=rng, dtype=self.dtype)
        self.trunk: List[ConvBlock] = []
        in_ch = 2 * p
        for i, ch in enumerate(config.trunk_channels):
            self.trunk.append(ConvBlock(in_ch, ch, 3, 1, pool=i in config.pool_after, rng=rng, dtype=self.dtype))
            in_ch = ch
        self.attention: Optional[AreaAttention] = None
        if config.use_attention:
            self.attention = AreaAttention(in_ch, config.attention, rng=rng, dtype=self.dtype, noise_rng=self.noise_rng)
        self.fc = Linear(in_ch, config.num_classes, rng=rng, dtype=self.dtype)
        self.training = True
        self._cache = None

    # -- structure ---------------------------------------------------------
    def modules(self) -> Iterator[Tuple[str, object]]:
        yield "time_branch.conv", self.time_branch.conv
        yield "time_branch.bn", self.time_branch.bn
        yield "freq_branch.conv", self.freq_branch.conv
        yield "freq_branch.bn", self.freq_branch.bn
        for i, block in enumerate(self.trunk):
            yield f"trunk{i}.conv", block.conv
            yield f"trunk{i}.bn", block.bn
        if self.attention is not None:
            yield "attention", self.attention
        yield "fc", self.fc

    def _blocks(self):
        return [self.time_branch, self.freq_branch, *self.trunk] + ([self.attention] if self.attention else []) + [self.fc]

    def train(self, mode: bool = True):
        self.training = mode
        for b in self._blocks():
            b.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def named_parameters(self) -> Iterator[Tuple[str, np.ndarray, Optional[np.ndarray]]]:
        for prefix, mod in self.modules():
            for name, arr in mod.params.items():
                yield f"{prefix}.{name}", arr, mod.grads.get(name)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, mod in self.modules():
            for name, arr in mod.params.items():
                out[f"{prefix}.{name}"] = arr
            for name, arr in mod.buffers.items():
                out[f"{prefix}.{name}"] = arr
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]):
        for prefix, mod in self.modules():
            for store in (mod.params, mod.buffers):
                for name in list(store):
                    key = f"{prefix}.{name}"
                    if key not in arrays:
                        raise InputError(f"checkpoint is missing tensor {key}")
                    if arrays[key].shape != store[name].shape:
                        raise InputError(f"tensor {key} has shape {arrays[key].shape}, expected {store[name].shape}")
                    store[name][...] = arrays[key]

    def n_parameters(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())

    # -- computation -------------------------------------------------------
    def _prepare(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1] != 1:
            raise DimensionError(f"expected (N, 1, mel, frames) input, got {x.shape}")
        mh, mw = self.config.min_input_shape()
        if x.shape[2] < mh or x.shape[3] < mw:
            raise DimensionError(f"input {x.shape[2]}x{x.shape[3]} smaller than minimum {mh}x{mw}")
        return x.astype(self.dtype, copy=False)

    def features(self, x) -> np.ndarray:
        """Final convolutional map as a token grid (N, H', W', 80)."""
        x = self._prepare(x)
        h = concat_channels([self.time_branch.forward(x), self.freq_branch.forward(x)])
        for block in self.trunk:
            h = block.forward(h)
        return np.ascontiguousarray(h.transpose(0, 2, 3, 1))

    def forward(self, x) -> np.ndarray:
        grid = self.features(x)
        n, gh, gw, c = grid.shape
        tokens = self.attention.forward(grid) if self.attention is not None else grid.reshape(n, gh * gw, c)
        pooled = tokens.mean(axis=1)
        self._cache = (grid.shape, tokens)
        return self.fc.forward(pooled)

    def backward(self, dlogits: np.ndarray) -> None:
        if self._cache is None:
            raise ContractError("backward called before forward")
        (n, gh, gw, c), _ = self._cache
        self._cache = None
        d_pooled = self.fc.backward(dlogits)
        d_tokens = np.broadcast_to(d_pooled[:, None, :] / (gh * gw), (n, gh * gw, c))
        if self.attention is not None:
            d_grid = self.attention.backward(np.ascontiguousarray(d_tokens))
        else:
            d_grid = d_tokens.reshape(n, gh, gw, c)
        d_h = np.ascontiguousarray(d_grid.transpose(0, 3, 1, 2))
        for block in reversed(self.trunk):
            d_h = block.backward(d_h)
        p = self.config.parallel_channels
        self.time_branch.backward(np.ascontiguousarray(d_h[:, :p]))
        self.freq_branch.backward(np.ascontiguousarray(d_h[:, p:]))

    def predict_proba(self, x, batch_size: int = 64) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            out = [softmax(self.forward(x[i:i + batch_size]).astype(np.float64)) for i in range(0, len(x), batch_size)]
        finally:
            self.train(was_training)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.num_classes))

    def representation(self, x):
        """Eval-mode pre-classifier tokens (N, L, 80), attention maps or None, grid shape."""
        was_training = self.training
        self.eval()
        try:
            grid = self.features(x)
            n, gh, gw, c = grid.shape
            if self.attention is not None:
                tokens = self.attention.forward(grid)
                attn = self.attention.last_attention
                self.attention._cache = None
            else:
                tokens, attn = grid.reshape(n, gh * gw, c), None
        finally:
            self.train(was_training)
        return tokens, attn, (gh, gw)


def average_utterance_probs(segment_probs: np.ndarray) -> Tuple[np.ndarray, int]:
    """Mean of per-segment class probabilities and its argmax (lowest id on ties)."""
    segment_probs = np.asarray(segment_probs, dtype=np.float64)
    if segment_probs.ndim != 2 or segment_probs.shape[0] == 0:
        raise InputError("need at least one segment to predict an utterance")
    probs = segment_probs.mean(axis=0)
    return probs, int(np.argmax(probs))


def predict_utterance(segments, net: AreaAttentionNet) -> np.ndarray:
    """Utterance-level class probabilities from its segments."""
    if not segments:
        raise InputError("need at least one segment to predict an utterance")
    ids = {s.utterance_id for s in segments}
    if len(ids) != 1:
        raise InputError(f"segments span several utterances: {sorted(ids)}")
    x = np.stack([s.features.T for s in segments])
    return average_utterance_probs(net.predict_proba(x))[0]


# ---------------------------------------------------------------------------
# checkpoint container:  b"ATCK" | u32 header length | JSON header |
#   per tensor: u32 name length | utf-8 name | ATNT tensor


def save_checkpoint(path, header: dict, arrays: Dict[str, np.ndarray]) -> None:
    names = sorted(arrays)
    header = dict(header, tensors=names)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in names:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_tensor(fh, arrays[name])


def load_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise InputError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode())
        arrays = {}
        for _ in header["tensors"]:
            (k,) = struct.unpack("<I", fh.read(4))
            name = fh.read(k).decode()
            arrays[name] = read_tensor(fh)
    return header, arrays
