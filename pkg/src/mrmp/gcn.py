"""Two-block graph convolutional classifier over latent (prunable) weights.

Block one aggregates node signals with learned ``n x n`` attention matrices,
one per head; block two multiplies the aggregates with convolution filters.
Node features are then mean-pooled and classified by a dense layer (optionally
preceded by a hidden dense layer).

All weight uses go through the band-stop reparametrization. Forward passes are
vectorized over a leading *rate* axis: one call evaluates the network at every
threshold in a list, sharing a single set of latents.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bandstop import BandStopConfig, extract_mask, reparametrize_multi
from .errors import DimensionError, DomainError, ParseError

PRUNABLE_ORDER = ("proj", "attention", "conv", "hidden", "out")


@dataclass(frozen=True)
class GcnConfig:
    nodes: int
    in_channels: int = 12
    heads: int = 1
    filters: int = 32
    classes: int = 2
    hidden: int = 0
    proj_channels: int | None = None

    def __post_init__(self):
        for name in ("nodes", "in_channels", "heads", "filters", "classes"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        if self.hidden < 0 or (self.proj_channels is not None and self.proj_channels < 1):
            raise DomainError("hidden and proj_channels must be positive when set")

    @property
    def channels(self) -> int:
        """Per-node signal width entering the attention block."""
        return self.proj_channels or self.in_channels

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Shapes of every parameter, prunable tensors first."""
        c, n = self.channels, self.nodes
        prunable: dict[str, tuple[int, ...]] = {}
        biases: dict[str, tuple[int, ...]] = {}
        if self.proj_channels:
            prunable["proj"] = (self.in_channels, c)
        prunable["attention"] = (self.heads, n, n)
        prunable["conv"] = (self.heads * c, self.filters)
        biases["conv_bias"] = (self.filters,)
        width = self.filters
        if self.hidden:
            prunable["hidden"] = (self.filters, self.hidden)
            biases["hidden_bias"] = (self.hidden,)
            width = self.hidden
        prunable["out"] = (width, self.classes)
        biases["out_bias"] = (self.classes,)
        return {**prunable, **biases}

    def param_count(self, prunable_only: bool = False) -> int:
        return sum(
            math.prod(s) for k, s in self.shapes().items() if not (prunable_only and k.endswith("_bias"))
        )


def sbu_config(hidden: int | None = None) -> GcnConfig:
    """Two interacting 15-joint skeletons, 1 head, 8-channel nodes, 32 filters, 8 classes.

    Without an explicit ``hidden`` the widest dense layer keeping the total
    parameter count within 15,320 is used.
    """
    base = GcnConfig(nodes=30, in_channels=12, heads=1, filters=32, classes=8, proj_channels=8)
    if hidden is None:
        fixed = GcnConfig(**{**asdict(base), "hidden": 1}).param_count()
        per_unit = base.filters + base.classes + 1
        hidden = 1 + (15_320 - fixed) // per_unit
    return GcnConfig(**{**asdict(base), "hidden": hidden})


def fpha_config(hidden: int = 256) -> GcnConfig:
    return GcnConfig(nodes=21, in_channels=12, heads=16, filters=128, classes=45, hidden=hidden, proj_channels=32)


class GcnModel:
    """Latent parameters of the network plus its current band-stop setting."""

    def __init__(self, config: GcnConfig, params: dict[str, Tensor], bandstop: BandStopConfig | None = None):
        expected = config.shapes()
        if set(params) != set(expected):
            raise DimensionError(f"parameter names {sorted(params)} do not match config {sorted(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {params[name].shape}")
        self.config = config
        self.params = params
        self.bandstop = bandstop or BandStopConfig()

    @property
    def prunable_names(self) -> list[str]:
        return [k for k in PRUNABLE_ORDER if k in self.params]

    def prunable(self) -> list[Tensor]:
        return [self.params[k] for k in self.prunable_names]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def dtype(self):
        return self.params["conv"].dtype

    def param_count(self, prunable_only: bool = False) -> int:
        return self.config.param_count(prunable_only)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "GcnModel":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return GcnModel(self.config, params, self.bandstop)


def build_model(config: GcnConfig, seed: int, dtype=np.float64) -> GcnModel:
    """Uniform fan-in initialization; biases start at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.shapes().items():
        if name.endswith("_bias"):
            data = np.zeros(shape)
        else:
            fan_in = shape[-2]
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return GcnModel(config, params)


# -- effective weights ------------------------------------------------------


def soft_weights(model: GcnModel, thresholds: Sequence[float], sigma: float) -> dict[str, Tensor]:
    """Band-stop weights for every threshold, each of shape ``(R,) + latent.shape``."""
    return {k: reparametrize_multi(model.params[k], thresholds, sigma) for k in model.prunable_names}


def hard_weights(model: GcnModel, thresholds: Sequence[float]) -> dict[str, Tensor]:
    """Weights under the binary masks ``|w| > a`` (the large-sigma limit)."""
    out = {}
    for k in model.prunable_names:
        latent = model.params[k]
        masks = np.stack([extract_mask(latent, a) for a in thresholds])
        out[k] = ad.hadamard(ad.expand(latent, len(thresholds)), Tensor(masks, dtype=latent.dtype))
    return out


def masked_weights(model: GcnModel, masks: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Weights under fixed, externally chosen masks (one rate)."""
    out = {}
    for k in model.prunable_names:
        latent = model.params[k]
        out[k] = ad.hadamard(ad.expand(latent, 1), Tensor(masks[k][None], dtype=latent.dtype))
    return out


# -- forward ----------------------------------------------------------------


def _check_signals(model: GcnModel, signals: np.ndarray) -> np.ndarray:
    cfg = model.config
    signals = np.asarray(signals.data if isinstance(signals, Tensor) else signals, dtype=model.dtype)
    if signals.ndim != 3 or signals.shape[1:] != (cfg.nodes, cfg.in_channels):
        raise DimensionError(
            f"graphs must be batch x {cfg.nodes} x {cfg.in_channels}, got {signals.shape}"
        )
    return signals


def _aggregate(model: GcnModel, signals: np.ndarray, weights: dict[str, Tensor]) -> Tensor:
    """Per-head aggregates ``A_h x`` laid out as ``(R*heads, n*batch, channels)``.

    The raw signals do not depend on the rate, so every attention matrix of
    every rate is applied in one product. The (bias-free) input projection is
    linear and acts on channels only, so it commutes with aggregation and is
    applied afterwards.
    """
    cfg = model.config
    attention = weights["attention"]
    rates = attention.shape[0]
    batch, n, s = signals.shape
    cols = Tensor(np.ascontiguousarray(signals.transpose(1, 0, 2)).reshape(n, batch * s))
    rows = ad.reshape(attention, (rates * cfg.heads * n, n))
    agg = ad.reshape(ad.matmul(rows, cols), (rates * cfg.heads, n * batch, s))
    if "proj" in weights:
        proj = ad.reshape(ad.expand(weights["proj"], cfg.heads, axis=1), (rates * cfg.heads, s, cfg.channels))
        agg = ad.matmul(agg, proj)
    return agg


def attention_aggregate(model: GcnModel, signals, a: float | None = None, hard: bool = False) -> Tensor:
    """Attention block alone at one threshold: ``batch x n x (heads * channels)``."""
    signals = _check_signals(model, signals)
    weights = _weights_for(model, [model.bandstop.a if a is None else a], hard)
    batch, n, _ = signals.shape
    agg = _aggregate(model, signals, weights)
    heads, c = model.config.heads, model.config.channels
    return ad.reshape(ad.transpose(ad.reshape(agg, (heads, n, batch, c)), (2, 1, 0, 3)), (batch, n, heads * c))


def forward_weights(model: GcnModel, signals, weights: dict[str, Tensor]) -> Tensor:
    """Logits ``(R, batch, classes)`` for precomputed rate-stacked weights."""
    signals = _check_signals(model, signals)
    cfg = model.config
    p = model.params
    conv_w = weights["conv"]
    rates = conv_w.shape[0]
    batch, n, _ = signals.shape
    agg = _aggregate(model, signals, weights)
    filters = ad.reshape(conv_w, (rates * cfg.heads, cfg.channels, cfg.filters))
    per_head = ad.reshape(ad.matmul(agg, filters), (rates, cfg.heads, n * batch, cfg.filters))
    conv = per_head if cfg.heads == 1 else ad.reduce_sum(per_head, axis=1)
    conv = ad.relu(ad.add_bias(ad.reshape(conv, (rates, n * batch, cfg.filters)), p["conv_bias"]))
    pooled = ad.scale(ad.reduce_sum(ad.reshape(conv, (rates, n, batch, cfg.filters)), axis=1), 1.0 / n)
    feats = pooled
    if "hidden" in weights:
        feats = ad.relu(ad.add_bias(ad.matmul(feats, weights["hidden"]), p["hidden_bias"]))
    return ad.add_bias(ad.matmul(feats, weights["out"]), p["out_bias"])


def _weights_for(model: GcnModel, thresholds: Sequence[float], hard: bool) -> dict[str, Tensor]:
    if hard:
        return hard_weights(model, thresholds)
    return soft_weights(model, thresholds, model.bandstop.sigma)


def forward_multi(model: GcnModel, graphs, thresholds: Sequence[float], hard: bool = False) -> Tensor:
    return forward_weights(model, graphs, _weights_for(model, thresholds, hard))


def forward(model: GcnModel, graphs, a: float | None = None, hard: bool = False) -> Tensor:
    """Logits ``batch x classes`` at one threshold (defaults to ``model.bandstop.a``)."""
    logits = forward_multi(model, graphs, [model.bandstop.a if a is None else a], hard)
    return ad.reshape(logits, logits.shape[1:])


def predict(model: GcnModel, graphs, a: float, batch_size: int = 1024) -> np.ndarray:
    """Class predictions under the hard mask at threshold ``a``."""
    graphs = np.asarray(graphs)
    out = []
    with ad.no_grad():
        for start in range(0, len(graphs), batch_size):
            logits = forward(model, graphs[start : start + batch_size], a, hard=True)
            out.append(logits.data.argmax(axis=-1))
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


# -- checkpoints ------------------------------------------------------------

MAGIC = b"MRMP"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Binary tensor container; see README for the byte layout."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise DomainError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
        chunks.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise ParseError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        (tag,) = take("<B")
        if tag not in _TAG_DTYPES:
            raise ParseError(f"{path}: unknown dtype tag {tag}")
        dtype = _TAG_DTYPES[tag].newbyteorder("<")
        nbytes = math.prod(dims) * dtype.itemsize
        if pos + nbytes > len(buf):
            raise ParseError(f"{path}: truncated checkpoint")
        out[name] = np.frombuffer(buf, dtype=dtype, count=math.prod(dims), offset=pos).reshape(dims).astype(
            _TAG_DTYPES[tag]
        )
        pos += nbytes
    return out


def save_model(path, model: GcnModel, meta: dict | None = None) -> None:
    """Latents to ``path``; architecture and ``meta`` to the ``path + '.json'`` sidecar."""
    path = Path(path)
    write_tensors(path, {k: v.data for k, v in model.params.items()})
    sidecar = {"config": asdict(model.config), **(meta or {})}
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_model(path) -> tuple[GcnModel, dict]:
    path = Path(path)
    sidecar_path = path.with_name(path.name + ".json")
    meta = json.loads(sidecar_path.read_text())
    config = GcnConfig(**meta.pop("config"))
    tensors = read_tensors(path)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()}
    return GcnModel(config, params), meta
