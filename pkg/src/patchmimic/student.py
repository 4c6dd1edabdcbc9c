"""The two student MLPs: forward pass, analytic backprop, Adam, training loop.

Each student is a 3-layer MLP (GeLU after the first two layers) applied to
every patch embedding independently; the forward student maps shallow-layer
embeddings to deep-layer ones and the backward student does the reverse.
Production paths run in float32; the same formulas run in float64 for the
finite-difference gradient checks.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import erf

from .errors import DataError, NumericError
from .feature_store import Manifest, read_feature_grid

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact GeLU, x * Phi(x) with Phi the standard-normal CDF (erf form)."""
    x = np.asarray(x)
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_grad(x):
    """d/dx [x * Phi(x)] = Phi(x) + x * phi(x)."""
    x = np.asarray(x)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return (cdf + x * pdf).astype(x.dtype, copy=False)


@dataclass
class StudentNet:
    """Parameters and Adam state of one student MLP.

    Weight matrices are stored input-major: w1 (d_in, hidden), w2 (hidden,
    hidden), w3 (hidden, d_out); the forward pass is row-vector x @ w + b.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w3.shape[1]

    @property
    def dtype(self):
        return self.w1.dtype

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def initialize(cls, d_in: int, hidden: int, d_out: int,
                   rng: np.random.Generator, dtype=np.float32) -> "StudentNet":
        """Glorot-uniform weights, zero biases, zeroed Adam moments."""
        def glorot(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)

        net = cls(
            w1=glorot(d_in, hidden), b1=np.zeros(hidden, dtype=dtype),
            w2=glorot(hidden, hidden), b2=np.zeros(hidden, dtype=dtype),
            w3=glorot(hidden, d_out), b3=np.zeros(d_out, dtype=dtype),
        )
        net.adam_m = {k: np.zeros_like(v) for k, v in net.params().items()}
        net.adam_v = {k: np.zeros_like(v) for k, v in net.params().items()}
        return net

    def astype(self, dtype) -> "StudentNet":
        """Copy of the net (parameters and moments) in another dtype."""
        out = StudentNet(*(getattr(self, n).astype(dtype) for n in PARAM_NAMES))
        out.adam_m = {k: v.astype(dtype) for k, v in self.adam_m.items()}
        out.adam_v = {k: v.astype(dtype) for k, v in self.adam_v.items()}
        out.adam_t = self.adam_t
        return out


def forward(net: StudentNet, x: np.ndarray) -> np.ndarray:
    """Apply the MLP to a batch of patch vectors, one row per patch."""
    x = np.atleast_2d(x)
    if x.shape[1] != net.d_in:
        raise DataError(f"input dim {x.shape[1]} does not match net d_in {net.d_in}")
    a1 = gelu(x @ net.w1 + net.b1)
    a2 = gelu(a1 @ net.w2 + net.b2)
    return a2 @ net.w3 + net.b3


def _forward_trace(net, x):
    z1 = x @ net.w1 + net.b1
    a1 = gelu(z1)
    z2 = a1 @ net.w2 + net.b2
    a2 = gelu(z2)
    y = a2 @ net.w3 + net.b3
    return y, (z1, a1, z2, a2)


def batch_losses(pred: np.ndarray, target: np.ndarray, distance: str) -> np.ndarray:
    """Per-patch losses for a batch; rows are patches.

    cosine: 1 - cos(pred, target) in [0, 2]; a zero-norm operand yields loss 1
    (orthogonal-equivalent) and contributes no gradient. l2: ||pred - target||.
    """
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    if pred.shape != target.shape:
        raise DataError(f"pred shape {pred.shape} != target shape {target.shape}")
    if distance == "cosine":
        np_ = np.linalg.norm(pred, axis=1)
        nt = np.linalg.norm(target, axis=1)
        ok = (np_ > 0) & (nt > 0)
        cos = np.zeros(pred.shape[0], dtype=pred.dtype)
        dots = np.einsum("ij,ij->i", pred, target)
        cos[ok] = dots[ok] / (np_[ok] * nt[ok])
        return 1.0 - cos
    if distance == "l2":
        return np.linalg.norm(pred - target, axis=1)
    raise DataError(f"unknown distance '{distance}'")


def per_patch_loss(pred: np.ndarray, target: np.ndarray, distance: str) -> float:
    """Loss between a single predicted and target patch vector."""
    return float(batch_losses(pred[None, :], target[None, :], distance)[0])


def _loss_grad_wrt_pred(pred, target, distance):
    """Per-patch loss values and dloss/dpred, batched."""
    losses = batch_losses(pred, target, distance)
    grad = np.zeros_like(pred)
    if distance == "cosine":
        np_ = np.linalg.norm(pred, axis=1)
        nt = np.linalg.norm(target, axis=1)
        ok = (np_ > 0) & (nt > 0)
        dots = np.einsum("ij,ij->i", pred, target)
        # d/dp [1 - p.t/(|p||t|)] = -t/(|p||t|) + (p.t) p/(|p|^3 |t|)
        inv = np.zeros_like(np_)
        inv[ok] = 1.0 / (np_[ok] * nt[ok])
        grad[ok] = (-target[ok] * inv[ok, None]
                    + pred[ok] * (dots[ok] * inv[ok] / (np_[ok] ** 2))[:, None])
    else:  # l2
        diff = pred - target
        norms = np.linalg.norm(diff, axis=1)
        ok = norms > 0
        grad[ok] = diff[ok] / norms[ok, None]
    return losses, grad


@dataclass
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def items(self):
        return [(name, getattr(self, name)) for name in PARAM_NAMES]


def backward(net: StudentNet, batch: np.ndarray, targets: np.ndarray,
             distance: str, reduction: str = "mean") -> tuple[float, Gradients]:
    """Loss and analytic gradients of the reduced per-patch loss over a batch."""
    batch = np.atleast_2d(batch)
    targets = np.atleast_2d(targets)
    if batch.shape[1] != net.d_in:
        raise DataError(f"input dim {batch.shape[1]} does not match net d_in {net.d_in}")
    if reduction not in ("mean", "sum"):
        raise DataError(f"unknown reduction '{reduction}'")
    pred, (z1, a1, z2, a2) = _forward_trace(net, batch)
    losses, dpred = _loss_grad_wrt_pred(pred, targets, distance)
    loss = losses.sum()
    if reduction == "mean":
        loss /= len(losses)
        dpred = dpred / len(losses)

    dz3 = dpred
    g_w3 = a2.T @ dz3
    g_b3 = dz3.sum(axis=0)
    dz2 = (dz3 @ net.w3.T) * gelu_grad(z2)
    g_w2 = a1.T @ dz2
    g_b2 = dz2.sum(axis=0)
    dz1 = (dz2 @ net.w2.T) * gelu_grad(z1)
    g_w1 = batch.T @ dz1
    g_b1 = dz1.sum(axis=0)

    grads = Gradients(g_w1, g_b1, g_w2, g_b2, g_w3, g_b3)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter block '{name}'")
    return float(loss), grads


def adam_step(net: StudentNet, grads: Gradients, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Standard Adam update with bias correction, in place."""
    beta1, beta2 = betas
    net.adam_t += 1
    t = net.adam_t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = net.adam_m[name]
        v = net.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p = getattr(net, name)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if not np.isfinite(p).all():
            raise NumericError(f"non-finite parameter block '{name}' after Adam step {t}")


@dataclass
class TrainConfig:
    layer_pair: tuple[int, int] = (8, 12)
    epochs: int = 50
    learning_rate: float = 0.001
    loss_distance: str = "cosine"
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    hidden_units: int | None = None  # None: match the input embedding dim
    loss_reduction: str = "mean"

    def validate(self) -> None:
        j, k = self.layer_pair
        if not j < k:
            raise DataError(f"layer_pair must satisfy j < k, got ({j}, {k})")
        if self.epochs < 1:
            raise DataError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise DataError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.loss_distance not in ("cosine", "l2"):
            raise DataError(f"unknown loss_distance '{self.loss_distance}'")
        if self.loss_reduction not in ("mean", "sum"):
            raise DataError(f"unknown loss_reduction '{self.loss_reduction}'")


@dataclass
class TrainLog:
    epoch_loss_forward: list[float] = field(default_factory=list)
    epoch_loss_backward: list[float] = field(default_factory=list)


def train(manifest: Manifest, config: TrainConfig,
          progress=None) -> tuple[StudentNet, StudentNet, TrainLog]:
    """Jointly train the forward and backward students on the nominal train split.

    Every epoch visits each training image once in a seeded shuffled order; all
    patch embeddings of one image form one optimization step per network. The
    networks from the final epoch are returned - there is no test-set checkpoint
    selection. Bit-deterministic for a fixed seed/config/manifest.
    """
    config.validate()
    j, k = config.layer_pair
    train_samples = manifest.train_samples()
    if not train_samples:
        raise DataError("manifest has no train samples")
    for s in train_samples:
        for layer in (j, k):
            if layer not in s.feature_paths:
                raise DataError(
                    f"sample '{s.sample_id}' has no features for layer {layer}"
                )

    first_j = read_feature_grid(train_samples[0].feature_paths[j])
    first_k = read_feature_grid(train_samples[0].feature_paths[k])
    d_j, d_k = first_j.dim, first_k.dim
    hidden = config.hidden_units if config.hidden_units else d_j

    rng = np.random.default_rng(config.seed)
    s_f = StudentNet.initialize(d_j, hidden, d_k, rng)
    s_b = StudentNet.initialize(d_k, hidden, d_j, rng)

    log = TrainLog()
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_samples))
        sum_f = 0.0
        sum_b = 0.0
        for idx in order:
            sample = train_samples[idx]
            f_j = read_feature_grid(sample.feature_paths[j]).data.reshape(-1, d_j)
            f_k = read_feature_grid(sample.feature_paths[k]).data.reshape(-1, d_k)

            loss_f, grads = backward(s_f, f_j, f_k, config.loss_distance,
                                     config.loss_reduction)
            adam_step(s_f, grads, config.learning_rate, config.adam_betas,
                      config.adam_eps)
            loss_b, grads = backward(s_b, f_k, f_j, config.loss_distance,
                                     config.loss_reduction)
            adam_step(s_b, grads, config.learning_rate, config.adam_betas,
                      config.adam_eps)

            if not (np.isfinite(loss_f) and np.isfinite(loss_b)):
                raise NumericError(
                    f"training diverged at epoch {epoch}, sample '{sample.sample_id}' "
                    f"(forward loss {loss_f}, backward loss {loss_b})"
                )
            sum_f += loss_f
            sum_b += loss_b
        log.epoch_loss_forward.append(sum_f / len(train_samples))
        log.epoch_loss_backward.append(sum_b / len(train_samples))
        if progress is not None:
            progress(epoch, log.epoch_loss_forward[-1], log.epoch_loss_backward[-1])
    return s_f, s_b, log


MODEL_MAGIC = b"PMDL"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sII")  # magic, version, json length


def _net_arrays(net: StudentNet):
    arrays = [getattr(net, name) for name in PARAM_NAMES]
    arrays += [net.adam_m[name] for name in PARAM_NAMES]
    arrays += [net.adam_v[name] for name in PARAM_NAMES]
    return arrays


def save_model(path: str | os.PathLike, s_f: StudentNet, s_b: StudentNet,
               config: TrainConfig) -> None:
    """Versioned binary container with both nets, Adam state, and the config."""
    arrays = _net_arrays(s_f) + _net_arrays(s_b)
    meta = {
        "config": asdict(config),
        "dtype": np.dtype(s_f.dtype).name,
        "adam_t": [s_f.adam_t, s_b.adam_t],
        "shapes": [list(a.shape) for a in arrays],
    }
    blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, len(blob)))
        f.write(blob)
        for a in arrays:
            f.write(np.ascontiguousarray(a).tobytes())


def load_model(path: str | os.PathLike) -> tuple[StudentNet, StudentNet, TrainConfig]:
    """Bit-exact inverse of save_model; rejects bad magic and version skew."""
    with open(path, "rb") as f:
        header = f.read(_MODEL_HEADER.size)
        if len(header) < _MODEL_HEADER.size:
            raise DataError(f"{path}: truncated model header")
        magic, version, blob_len = _MODEL_HEADER.unpack(header)
        if magic != MODEL_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        if version != MODEL_VERSION:
            raise DataError(f"{path}: unsupported model version {version}")
        meta = json.loads(f.read(blob_len).decode("utf-8"))
        dtype = np.dtype(meta["dtype"])
        arrays = []
        for shape in meta["shapes"]:
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(n * dtype.itemsize)
            if len(raw) < n * dtype.itemsize:
                raise DataError(f"{path}: truncated model payload")
            arrays.append(np.frombuffer(raw, dtype=dtype).reshape(shape).copy())

    def build(arr, t):
        net = StudentNet(*arr[:6])
        net.adam_m = dict(zip(PARAM_NAMES, arr[6:12]))
        net.adam_v = dict(zip(PARAM_NAMES, arr[12:18]))
        net.adam_t = t
        return net

    s_f = build(arrays[:18], meta["adam_t"][0])
    s_b = build(arrays[18:], meta["adam_t"][1])
    cfg = meta["config"]
    cfg["layer_pair"] = tuple(cfg["layer_pair"])
    cfg["adam_betas"] = tuple(cfg["adam_betas"])
    return s_f, s_b, TrainConfig(**cfg)
