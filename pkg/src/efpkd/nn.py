"""Small numpy neural engine: Conv1D / BatchNorm1D / ReLU / Flatten / Dense.

Arrays are float64 throughout.  A batch enters as ``[B, 1, d]`` (channels
first) and the classifier head is always the last Dense layer; whatever feeds
that layer is the embedding used for prototypes.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when array or layer dimensions do not line up."""


class StaleCacheError(RuntimeError):
    """Raised when a forward cache is used after its parameters changed."""


# --------------------------------------------------------------------------
# Network description
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv1D:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1


@dataclass(frozen=True)
class BatchNorm1D:
    channels: int
    momentum: float = 0.1
    eps: float = 1e-5


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    in_units: int
    out_units: int


Layer = Conv1D | BatchNorm1D | ReLU | Flatten | Dense

_LAYER_TYPES = {cls.__name__: cls for cls in (Conv1D, BatchNorm1D, ReLU, Flatten, Dense)}


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[Layer, ...]
    n_features: int
    role: str = "student"

    def __post_init__(self) -> None:
        self.validate()

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_units

    @property
    def head_index(self) -> int:
        return len(self.layers) - 1

    def validate(self) -> None:
        if self.role not in ("teacher", "student"):
            raise ValueError(f"unknown network role {self.role!r}")
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ShapeError("last layer must be Dense")
        if sum(isinstance(layer, Flatten) for layer in self.layers) != 1:
            raise ShapeError("network needs exactly one Flatten layer")
        channels, length, flat = 1, self.n_features, None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv1D):
                if flat is not None:
                    raise ShapeError(f"layer {i}: Conv1D after Flatten")
                if layer.in_channels != channels:
                    raise ShapeError(f"layer {i}: expected {channels} input channels, got {layer.in_channels}")
                if layer.stride != 1 or layer.kernel_size % 2 == 0:
                    raise ShapeError(f"layer {i}: only stride 1 with odd kernel is supported")
                channels = layer.out_channels
            elif isinstance(layer, BatchNorm1D):
                if flat is not None:
                    raise ShapeError(f"layer {i}: BatchNorm1D after Flatten")
                if layer.channels != channels:
                    raise ShapeError(f"layer {i}: BatchNorm1D over {layer.channels} channels, input has {channels}")
            elif isinstance(layer, Flatten):
                flat = channels * length
            elif isinstance(layer, Dense):
                if flat is None:
                    raise ShapeError(f"layer {i}: Dense before Flatten")
                if layer.in_units != flat:
                    raise ShapeError(f"layer {i}: Dense expects {layer.in_units} inputs, got {flat}")
                flat = layer.out_units

    def to_dict(self) -> dict[str, Any]:
        return {
            "role": self.role,
            "n_features": self.n_features,
            "layers": [{"type": type(layer).__name__, **layer.__dict__} for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NetworkSpec":
        layers = []
        for entry in data["layers"]:
            entry = dict(entry)
            layers.append(_LAYER_TYPES[entry.pop("type")](**entry))
        return cls(tuple(layers), int(data["n_features"]), data.get("role", "student"))


def conv_net_spec(
    n_features: int,
    n_classes: int,
    conv_channels: Sequence[int],
    hidden: int,
    *,
    batch_norm: bool,
    role: str,
    kernel_size: int = 3,
) -> NetworkSpec:
    """Conv stack -> Flatten -> Dense(hidden) -> ReLU -> Dense(n_classes)."""
    layers: list[Layer] = []
    in_ch = 1
    for out_ch in conv_channels:
        layers.append(Conv1D(in_ch, out_ch, kernel_size))
        if batch_norm:
            layers.append(BatchNorm1D(out_ch))
        layers.append(ReLU())
        in_ch = out_ch
    layers += [Flatten(), Dense(in_ch * n_features, hidden), ReLU(), Dense(hidden, n_classes)]
    return NetworkSpec(tuple(layers), n_features, role)


def student_spec(n_features: int, n_classes: int, conv_channels=(64, 128), hidden: int = 64) -> NetworkSpec:
    return conv_net_spec(n_features, n_classes, conv_channels, hidden, batch_norm=False, role="student")


def teacher_spec(
    n_features: int, n_classes: int, conv_channels=(512, 1024, 2048), hidden: int = 512
) -> NetworkSpec:
    return conv_net_spec(n_features, n_classes, conv_channels, hidden, batch_norm=True, role="teacher")


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------

TRAINABLE = {Conv1D: ("W", "b"), Dense: ("W", "b"), BatchNorm1D: ("gamma", "beta")}
BUFFERS = {BatchNorm1D: ("running_mean", "running_var")}


@dataclass
class ModelParams:
    """Per-layer parameter blocks; ``blocks[i]`` belongs to ``spec.layers[i]``."""

    spec: NetworkSpec
    blocks: list[dict[str, np.ndarray]]
    version: int = 0
    frozen: bool = False

    @property
    def total_count(self) -> int:
        return sum(arr.size for block in self.blocks for arr in block.values())

    def names(self) -> list[tuple[int, str]]:
        out = []
        for i, layer in enumerate(self.spec.layers):
            for name in TRAINABLE.get(type(layer), ()) + BUFFERS.get(type(layer), ()):
                out.append((i, name))
        return out

    def trainable(self):
        for i, layer in enumerate(self.spec.layers):
            for name in TRAINABLE.get(type(layer), ()):
                yield i, name, self.blocks[i][name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, [{k: v.copy() for k, v in b.items()} for b in self.blocks])

    def to_vector(self) -> np.ndarray:
        parts = [self.blocks[i][name].ravel() for i, name in self.names()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def load_vector(self, vec: np.ndarray) -> None:
        if vec.shape != (self.total_count,):
            raise ShapeError(f"vector of length {vec.size} for {self.total_count} parameters")
        pos = 0
        for i, name in self.names():
            arr = self.blocks[i][name]
            arr[...] = vec[pos : pos + arr.size].reshape(arr.shape)
            pos += arr.size
        self.version += 1

    def touch(self) -> None:
        self.version += 1


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ModelParams:
    """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    blocks: list[dict[str, np.ndarray]] = []
    for layer in spec.layers:
        if isinstance(layer, Conv1D):
            bound = 1.0 / math.sqrt(layer.in_channels * layer.kernel_size)
            blocks.append({
                "W": rng.uniform(-bound, bound, (layer.out_channels, layer.in_channels, layer.kernel_size)),
                "b": rng.uniform(-bound, bound, layer.out_channels),
            })
        elif isinstance(layer, Dense):
            bound = 1.0 / math.sqrt(layer.in_units)
            blocks.append({
                "W": rng.uniform(-bound, bound, (layer.in_units, layer.out_units)),
                "b": rng.uniform(-bound, bound, layer.out_units),
            })
        elif isinstance(layer, BatchNorm1D):
            c = layer.channels
            blocks.append({
                "gamma": np.ones(c), "beta": np.zeros(c),
                "running_mean": np.zeros(c), "running_var": np.ones(c),
            })
        else:
            blocks.append({})
    return ModelParams(spec, blocks)


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[B, C, L] -> [B, L, C*k] with zero 'same' padding."""
    pad = (k - 1) // 2
    B, C, L = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    cols = np.empty((B, L, C, k))
    for j in range(k):
        cols[:, :, :, j] = xp[:, :, j : j + L].transpose(0, 2, 1)
    return cols.reshape(B, L, C * k)


def _col2im(dcols: np.ndarray, C: int, k: int) -> np.ndarray:
    pad = (k - 1) // 2
    B, L, _ = dcols.shape
    d = dcols.reshape(B, L, C, k)
    dxp = np.zeros((B, C, L + 2 * pad))
    for j in range(k):
        dxp[:, :, j : j + L] += d[:, :, :, j].transpose(0, 2, 1)
    return dxp[:, :, pad : pad + L]


@dataclass
class ForwardCache:
    params: ModelParams
    version: int
    mode: str
    saved: list[Any] = field(default_factory=list)


def forward(spec: NetworkSpec, params: ModelParams, batch: np.ndarray, mode: str = "infer"):
    """Run the network; returns ``(logits, embedding, cache)``."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if params.spec != spec:
        raise ShapeError("parameters were built for a different network spec")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != spec.n_features:
        raise ShapeError(f"batch must have shape [B, 1, {spec.n_features}], got {list(x.shape)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("batch contains non-finite values")

    cache = ForwardCache(params, params.version, mode)
    embedding = None
    for i, layer in enumerate(spec.layers):
        block = params.blocks[i]
        if i == spec.head_index:
            embedding = x
        if isinstance(layer, Conv1D):
            cols = _im2col(x, layer.kernel_size)
            wmat = block["W"].reshape(layer.out_channels, -1)
            out = cols @ wmat.T + block["b"]
            cache.saved.append(cols)
            x = out.transpose(0, 2, 1)
        elif isinstance(layer, BatchNorm1D):
            if mode == "train":
                mean = x.mean(axis=(0, 2))
                var = x.var(axis=(0, 2))
                n = x.shape[0] * x.shape[2]
                unbiased = var * n / max(n - 1, 1)
                m = layer.momentum
                block["running_mean"] *= 1 - m
                block["running_mean"] += m * mean
                block["running_var"] *= 1 - m
                block["running_var"] += m * unbiased
            else:
                mean, var = block["running_mean"], block["running_var"]
            inv_std = 1.0 / np.sqrt(var + layer.eps)
            xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
            cache.saved.append((xhat, inv_std))
            x = xhat * block["gamma"][None, :, None] + block["beta"][None, :, None]
        elif isinstance(layer, ReLU):
            mask = x > 0
            cache.saved.append(mask)
            x = x * mask
        elif isinstance(layer, Flatten):
            cache.saved.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        else:
            cache.saved.append(x)
            x = x @ block["W"] + block["b"]
    return x, embedding, cache


def backward(cache: ForwardCache, upstream_grad: np.ndarray, embedding_grad: np.ndarray | None = None):
    """Gradients for every trainable block given dLoss/dlogits.

    ``embedding_grad`` (dLoss/dembedding) is added where the embedding feeds the
    head, which is how prototype terms reach the representation layers.
    """
    params = cache.params
    if cache.mode != "train":
        raise ValueError("backward needs a cache produced in train mode")
    if params.version != cache.version:
        raise StaleCacheError("parameters changed since this forward pass")
    spec = params.spec
    g = np.asarray(upstream_grad, dtype=np.float64)
    grads: list[dict[str, np.ndarray]] = [{} for _ in spec.layers]
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, block, saved = spec.layers[i], params.blocks[i], cache.saved[i]
        if isinstance(layer, Dense):
            grads[i] = {"W": saved.T @ g, "b": g.sum(axis=0)}
            if i == 0:
                break
            g = g @ block["W"].T
            if i == spec.head_index and embedding_grad is not None:
                g = g + embedding_grad
        elif isinstance(layer, Flatten):
            g = g.reshape(saved)
        elif isinstance(layer, ReLU):
            g = g * saved
        elif isinstance(layer, BatchNorm1D):
            xhat, inv_std = saved
            axes = (0, 2)
            n = xhat.shape[0] * xhat.shape[2]
            grads[i] = {"gamma": (g * xhat).sum(axis=axes), "beta": g.sum(axis=axes)}
            gx = g * block["gamma"][None, :, None]
            g = (inv_std[None, :, None] / n) * (
                n * gx - gx.sum(axis=axes)[None, :, None] - xhat * (gx * xhat).sum(axis=axes)[None, :, None]
            )
        else:
            cols = saved
            gt = g.transpose(0, 2, 1)  # [B, L, C_out]
            B, L, co = gt.shape
            g2 = gt.reshape(B * L, co)
            dw = g2.T @ cols.reshape(B * L, -1)
            grads[i] = {"W": dw.reshape(block["W"].shape), "b": g2.sum(axis=0)}
            if i == 0:
                break
            dcols = (g2 @ block["W"].reshape(co, -1)).reshape(B, L, -1)
            g = _col2im(dcols, layer.in_channels, layer.kernel_size)
    return grads


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def log_softmax_temperature(logits: np.ndarray, zeta: float) -> np.ndarray:
    if not zeta > 0:
        raise ValueError(f"temperature must be positive, got {zeta}")
    z = np.asarray(logits, dtype=np.float64) / zeta
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_temperature(logits: np.ndarray, zeta: float = 1.0) -> np.ndarray:
    return np.exp(log_softmax_temperature(logits, zeta))


def _check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.int64)


def loss_supervised(logits: np.ndarray, labels, mode: str = "multi") -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient wrt logits.

    Binary mode is two-class cross-entropy over a two-unit head, which is the
    same quantity as BCE on the anomaly probability.
    """
    logits = np.asarray(logits, dtype=np.float64)
    B, K = logits.shape
    if mode == "binary" and K != 2:
        raise ValueError(f"binary mode needs a 2-unit head, got {K}")
    if mode not in ("binary", "multi"):
        raise ValueError(f"unknown label mode {mode!r}")
    labels = _check_labels(labels, K)
    logp = log_softmax_temperature(logits, 1.0)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / B


def loss_kd(
    teacher_logits: np.ndarray,
    student_logits: np.ndarray,
    zeta: float,
    alpha: int = 1,
    n_samples: int | None = None,
) -> tuple[float, np.ndarray]:
    """alpha * zeta^2 * mean KL(teacher_soft || student_soft); gradient wrt student logits."""
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape or t.ndim != 2:
        raise ShapeError(f"teacher {t.shape} and student {s.shape} logits must match")
    if alpha not in (0, 1):
        raise ValueError("alpha must be 0 or 1")
    n = t.shape[0] if n_samples is None else n_samples
    if alpha == 0:
        return 0.0, np.zeros_like(s)
    log_pt = log_softmax_temperature(t, zeta)
    log_ps = log_softmax_temperature(s, zeta)
    pt = np.exp(log_pt)
    kl = (pt * (log_pt - log_ps)).sum()
    value = max(float(zeta**2 * kl / n), 0.0)
    grad = zeta * (np.exp(log_ps) - pt) / n
    return value, grad


# --------------------------------------------------------------------------
# Optimisers
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "sgd"
    base_lr: float = 1e-4
    decay: float = 0.97
    round_index: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: list[dict[str, np.ndarray]] | None = None
    second: list[dict[str, np.ndarray]] | None = None

    @property
    def lr(self) -> float:
        if self.kind == "sgd":
            return self.base_lr * self.decay ** (self.round_index - 1)
        return self.base_lr


def optimizer_step(params: ModelParams, grads: list[dict[str, np.ndarray]], state: OptimizerState) -> ModelParams:
    if params.frozen:
        raise RuntimeError(f"{params.spec.role} parameters are frozen")
    for i, name, arr in params.trainable():
        g = grads[i][name]
        if g.shape != arr.shape:
            raise ShapeError(f"layer {i} {name}: gradient {g.shape} vs parameter {arr.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in layer {i} ({name}), round {state.round_index}")
    if state.kind == "sgd":
        lr = state.lr
        for i, name, arr in params.trainable():
            arr -= lr * grads[i][name]
    elif state.kind == "adam":
        if state.first is None:
            state.first = [{n: np.zeros_like(a) for n, a in b.items()} for b in params.blocks]
            state.second = [{n: np.zeros_like(a) for n, a in b.items()} for b in params.blocks]
        state.step += 1
        c1 = 1 - state.beta1**state.step
        c2 = 1 - state.beta2**state.step
        for i, name, arr in params.trainable():
            g = grads[i][name]
            m = state.first[i][name]
            v = state.second[i][name]
            m *= state.beta1
            m += (1 - state.beta1) * g
            v *= state.beta2
            v += (1 - state.beta2) * g * g
            arr -= state.base_lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    else:
        raise ValueError(f"unknown optimizer {state.kind!r}")
    params.touch()
    return params


# --------------------------------------------------------------------------
# Serialisation
# --------------------------------------------------------------------------

PARAM_MAGIC = b"EFPKDPRM"
FORMAT_VERSION = 1


def save_params(params: ModelParams, path: str | Path, extra: dict | None = None) -> None:
    """Write ``magic | u32 version | u32 manifest length | manifest JSON | float64 LE data``."""
    manifest = {
        "spec": params.spec.to_dict(),
        "blocks": [{"layer": i, "name": name, "shape": list(params.blocks[i][name].shape)} for i, name in params.names()],
        "total_count": params.total_count,
        "extra": extra or {},
    }
    raw = json.dumps(manifest, sort_keys=True).encode("utf-8")
    data = params.to_vector().astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC + struct.pack("<II", FORMAT_VERSION, len(raw)) + raw + data)


def load_params(path: str | Path) -> tuple[ModelParams, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != PARAM_MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    version, n = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    manifest = json.loads(blob[16 : 16 + n].decode("utf-8"))
    spec = NetworkSpec.from_dict(manifest["spec"])
    params = init_params(spec, np.random.default_rng(0))
    vec = np.frombuffer(blob[16 + n :], dtype="<f8").astype(np.float64)
    params.load_vector(vec)
    params.version = 0
    return params, manifest.get("extra", {})
