"""Stacked SeparatedConvolutionMP model: configuration, accounting, forward/backward, checkpoints."""

from __future__ import annotations

import io
import json
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import nncore
from .errors import BadArg, ConfigError, FormatError, ShapeError
from .sigdata import SECTION_SAMPLES, SECTIONS

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class BlockSpec:
    K: int  # kernel size
    F: int  # output filters
    M: int  # pool size

    def __post_init__(self):
        if self.K < 1 or self.F < 1 or self.M < 1:
            raise ConfigError(f"block arguments must be >= 1: {self}")


REFERENCE_BLOCKS: tuple[BlockSpec, ...] = tuple(
    BlockSpec(k, f, 2) for k, f in zip((7, 7, 7, 5, 5, 3, 3), (10, 12, 14, 16, 18, 20, 20))
)


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 1
    blocks: tuple[BlockSpec, ...] = REFERENCE_BLOCKS
    sections: int = SECTIONS
    section_samples: int = SECTION_SAMPLES
    dropout_p: float = 0.5
    num_classes: int = 5

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.input_channels < 1:
            raise ConfigError("input_channels must be >= 1")
        if not self.blocks:
            raise ConfigError("at least one block is required")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")

    @property
    def input_length(self) -> int:
        return self.sections * self.section_samples

    @property
    def input_size(self) -> int:
        return self.input_channels * self.input_length

    @property
    def flatten_size(self) -> int:
        return shape_propagate(self)[1]

    def with_channels(self, n: int) -> "ModelConfig":
        return ModelConfig(n, self.blocks, self.sections, self.section_samples, self.dropout_p,
                           self.num_classes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["blocks"] = tuple(BlockSpec(**b) for b in d["blocks"])
        return cls(**d)


def shape_propagate(config: ModelConfig) -> tuple[list[tuple[int, int]], int]:
    """Per-layer ``(channels, length)`` after each block, and the flatten size."""
    ch, length = config.input_channels, config.input_length
    shapes = []
    for i, blk in enumerate(config.blocks):
        conv_len = length - blk.K + 1
        if conv_len < 1:
            raise ConfigError(f"block {i} ({blk}): kernel longer than input length {length}")
        length = conv_len // blk.M
        if length < 1:
            raise ConfigError(f"block {i} ({blk}): pooling leaves no samples (conv length {conv_len})")
        ch = blk.F
        shapes.append((ch, length))
    return shapes, ch * length


# ---------------------------------------------------------------------------
# cost accounting


@dataclass
class LayerCost:
    name: str
    params: int
    ops_standard: int | None = None
    ops_separable: int | None = None


@dataclass
class CostReport:
    layers: list[LayerCost]
    total_params: int
    flatten_size: int
    input_size: int

    def to_dict(self) -> dict:
        return {
            "total_params": self.total_params,
            "flatten_size": self.flatten_size,
            "input_size": self.input_size,
            "layers": [asdict(layer) for layer in self.layers],
        }


def op_counts(ch: int, k: int, s: int, f: int) -> tuple[int, int]:
    """Operation counts of a standard vs. a depthwise separable convolution layer."""
    if min(ch, k, s, f) < 1:
        raise BadArg("all arguments must be >= 1")
    if s <= k:
        raise BadArg(f"signal length {s} must exceed kernel size {k}")
    standard = ch * k * (s - k) * f
    separable = ch * k * (s - k) + ch * (s - k) * f
    return standard, separable


def reduction_ratio(k, f):
    """Separable / standard cost: ``1/k + 1/f``.

    Returns a ``Fraction`` when both arguments are ints, a float otherwise.
    """
    if k <= 0 or f <= 0:
        raise BadArg("kernel size and filters must be positive")
    if isinstance(k, int) and isinstance(f, int):
        return Fraction(1, k) + Fraction(1, f)
    return 1.0 / k + 1.0 / f


def param_count(config: ModelConfig) -> CostReport:
    layers = []
    ch, length = config.input_channels, config.input_length
    for i, blk in enumerate(config.blocks):
        dw = ch * blk.K
        pw = ch * blk.F + blk.F
        std, sep = op_counts(ch, blk.K, length, blk.F) if length > blk.K else (None, None)
        layers.append(LayerCost(f"block{i}.depthwise", dw, std, sep))
        layers.append(LayerCost(f"block{i}.pointwise", pw))
        ch, length = blk.F, (length - blk.K + 1) // blk.M
    flat = ch * length
    layers.append(LayerCost("dense", flat * config.num_classes + config.num_classes))
    return CostReport(layers, sum(layer.params for layer in layers), flat, config.input_size)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    """Learnable tensors; ``arrays()`` yields them in checkpoint order."""

    depthwise: list[np.ndarray]
    pointwise: list[np.ndarray]
    pointwise_bias: list[np.ndarray]
    dense_w: np.ndarray
    dense_b: np.ndarray

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i in range(len(self.depthwise)):
            out.append((f"block{i}.depthwise.w", self.depthwise[i]))
            out.append((f"block{i}.pointwise.w", self.pointwise[i]))
            out.append((f"block{i}.pointwise.b", self.pointwise_bias[i]))
        out.append(("dense.w", self.dense_w))
        out.append(("dense.b", self.dense_b))
        return out

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named_arrays()]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()]).astype(np.float32)

    def copy(self) -> "ModelParams":
        return ModelParams(
            [a.copy() for a in self.depthwise],
            [a.copy() for a in self.pointwise],
            [a.copy() for a in self.pointwise_bias],
            self.dense_w.copy(),
            self.dense_b.copy(),
        )

    @classmethod
    def from_vector(cls, config: ModelConfig, vec: np.ndarray) -> "ModelParams":
        template = zero_params(config)
        arrays = template.arrays()
        need = sum(a.size for a in arrays)
        if vec.size != need:
            raise ShapeError(f"parameter vector has {vec.size} entries, config needs {need}")
        pos = 0
        for a in arrays:
            a[...] = vec[pos : pos + a.size].reshape(a.shape)
            pos += a.size
        return template


def zero_params(config: ModelConfig) -> ModelParams:
    dw, pw, pb = [], [], []
    ch = config.input_channels
    for blk in config.blocks:
        dw.append(np.zeros((ch, blk.K), np.float32))
        pw.append(np.zeros((blk.F, ch), np.float32))
        pb.append(np.zeros(blk.F, np.float32))
        ch = blk.F
    flat = config.flatten_size
    return ModelParams(dw, pw, pb, np.zeros((config.num_classes, flat), np.float32),
                       np.zeros(config.num_classes, np.float32))


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """He-normal weights (variance ``2 / fan_in``), zero biases."""
    rng = np.random.default_rng(seed)
    p = zero_params(config)
    for i in range(len(config.blocks)):
        p.depthwise[i][...] = rng.standard_normal(p.depthwise[i].shape) * np.sqrt(2.0 / p.depthwise[i].shape[1])
        p.pointwise[i][...] = rng.standard_normal(p.pointwise[i].shape) * np.sqrt(2.0 / p.pointwise[i].shape[1])
    p.dense_w[...] = rng.standard_normal(p.dense_w.shape) * np.sqrt(2.0 / p.dense_w.shape[1])
    return p


# ---------------------------------------------------------------------------
# forward / backward


def logits(config: ModelConfig, params: ModelParams, x: np.ndarray, train: bool = False,
           rng: np.random.Generator | None = None, tape: nncore.GradTape | None = None,
           dtype=np.float64, fused: bool = True) -> np.ndarray:
    """Class scores before softmax for a window ``(C, L)`` or batch ``(B, C, L)``.

    ``fused=False`` runs the block as four separate reference operators.
    """
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != config.input_channels or x.shape[2] != config.input_length:
        raise ShapeError(
            f"model expects (B, {config.input_channels}, {config.input_length}), got {x.shape}"
        )
    h = x.astype(dtype, copy=False)
    for i, blk in enumerate(config.blocks):
        if fused:
            h = nncore.separable_block(h, params.depthwise[i], params.pointwise[i],
                                       params.pointwise_bias[i], blk.M, tape, name=f"block{i}")
            continue
        h = nncore.depthwise_conv1d(h, params.depthwise[i], tape, name=f"block{i}.depthwise")
        h = nncore.pointwise_conv1d(h, params.pointwise[i], params.pointwise_bias[i], tape,
                                    name=f"block{i}.pointwise")
        h = nncore.relu(h, tape)
        h = nncore.maxpool1d(h, blk.M, tape)
    h = nncore.flatten(h, tape)
    h = nncore.dropout(h, config.dropout_p, train, rng, tape)
    z = nncore.dense(h, params.dense_w, params.dense_b, tape, name="dense")
    return z[0] if single else z


def forward(config: ModelConfig, params: ModelParams, x: np.ndarray, train: bool = False,
            rng: np.random.Generator | None = None, dtype=np.float32) -> np.ndarray:
    """Class probabilities (softmax) for a window or a batch of windows."""
    return nncore.softmax(logits(config, params, x, train, rng, None, dtype))


def loss_and_grads(config: ModelConfig, params: ModelParams, x: np.ndarray, targets: np.ndarray,
                   train: bool = True, rng: np.random.Generator | None = None,
                   dtype=np.float32, fused: bool = True) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Mean cross-entropy over a batch, its parameter gradients, and the batch probabilities."""
    tape = nncore.GradTape()
    z = logits(config, params, x, train, rng, tape, dtype, fused)
    p = nncore.softmax(z)
    targets = np.asarray(targets)
    losses = nncore.cross_entropy_from_logits(z, targets)
    n = len(targets)
    g = nncore.softmax_cross_entropy_grad(p, targets) / n
    grads = tape.backward(g, input_grad=False)
    return float(np.sum(losses) / n), grads, p


def grads_in_order(params: ModelParams, grads: dict[str, np.ndarray]) -> list[np.ndarray]:
    return [grads[name] for name, _ in params.named_arrays()]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, config: ModelConfig, params: ModelParams, seed: int | None = None,
                    metrics_at_save: dict | None = None, signals: list[str] | None = None) -> None:
    """One JSON header line, then the float32 little-endian parameter blob.

    Written to a temporary file and renamed so readers never see partial files.
    """
    header = {
        "format_version": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "seed": seed,
        "signals": signals,
        "metrics_at_save": metrics_at_save or {},
        "param_count": params.size,
    }
    blob = params.to_vector().astype("<f4").tobytes()
    data = json.dumps(header, sort_keys=True).encode() + b"\n" + blob
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    seed: int | None = None
    signals: list[str] | None = None
    metrics_at_save: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    stream = io.BytesIO(raw)
    line = stream.readline()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad checkpoint header: {exc}", str(path), "header") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT:
        raise FormatError("unsupported checkpoint format", str(path), "format_version")
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad model config: {exc}", str(path), "config") from exc
    vec = np.frombuffer(stream.read(), dtype="<f4")
    try:
        params = ModelParams.from_vector(config, vec)
    except ShapeError as exc:
        raise FormatError(str(exc), str(path), "params") from exc
    return Checkpoint(config, params, header.get("seed"), header.get("signals"),
                      header.get("metrics_at_save") or {})
