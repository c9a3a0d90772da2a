"""Minimal deterministic neural-network engine.

Forward pass, exact backpropagation, SGD-momentum/Adam optimizers and flat
parameter-vector algebra for small MLP/CNN classifiers, all on numpy.

Parameters are stored as float32 vectors (that is also the checkpoint
format); every arithmetic path runs internally in float64 so gradients are
trustworthy down to finite-difference resolution, and results are rounded
back to float32 at the boundary. All operations are pure functions of
their inputs and bit-reproducible in serial execution.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

CHECKPOINT_MAGIC = b"CMRK1"

_LAYER_KINDS = ("dense", "conv", "relu", "flatten", "softmax-output")


@dataclass(frozen=True)
class Layer:
    """One layer descriptor; only the fields relevant to `kind` are set."""

    kind: str
    width: int | None = None      # dense
    kernel: int | None = None     # conv
    channels: int | None = None   # conv
    stride: int | None = None     # conv

    def __post_init__(self):
        if self.kind not in _LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}, expected one of {_LAYER_KINDS}")
        if self.kind == "dense" and (self.width is None or self.width < 1):
            raise ValueError("dense layer needs width >= 1")
        if self.kind == "conv":
            if self.kernel is None or self.kernel < 1:
                raise ValueError("conv layer needs kernel >= 1")
            if self.channels is None or self.channels < 1:
                raise ValueError("conv layer needs channels >= 1")
            if self.stride is None or self.stride < 1:
                raise ValueError("conv layer needs stride >= 1")

    def to_obj(self):
        if self.kind == "dense":
            return ["dense", self.width]
        if self.kind == "conv":
            return ["conv", self.kernel, self.channels, self.stride]
        return [self.kind]

    @staticmethod
    def from_obj(obj) -> "Layer":
        kind = obj[0]
        if kind == "dense":
            return dense(int(obj[1]))
        if kind == "conv":
            return conv(int(obj[1]), int(obj[2]), int(obj[3]))
        return Layer(kind)


def dense(width: int) -> Layer:
    return Layer("dense", width=width)


def conv(kernel: int, channels: int, stride: int = 1) -> Layer:
    return Layer("conv", kernel=kernel, channels=channels, stride=stride)


def relu() -> Layer:
    return Layer("relu")


def flatten() -> Layer:
    return Layer("flatten")


def softmax_output() -> Layer:
    return Layer("softmax-output")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description. Parameter count is a pure function of this."""

    input_shape: tuple[int, int, int]  # (H, W, C)
    classes: int
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be (H, W, C) of positive ints, got {self.input_shape}")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        _layout(self)  # validate shapes eagerly

    def to_obj(self):
        return {
            "input": list(self.input_shape),
            "classes": self.classes,
            "layers": [l.to_obj() for l in self.layers],
        }

    @staticmethod
    def from_obj(obj) -> "ModelSpec":
        return ModelSpec(
            input_shape=tuple(obj["input"]),
            classes=int(obj["classes"]),
            layers=tuple(Layer.from_obj(l) for l in obj["layers"]),
        )


def small_cnn(input_shape=(28, 28, 1), classes=10) -> ModelSpec:
    """2 conv + 2 dense desk-scale CNN (~52k parameters at 28x28x1)."""
    return ModelSpec(
        input_shape=input_shape,
        classes=classes,
        layers=(
            conv(3, 8, stride=2), relu(),
            conv(3, 16, stride=2), relu(),
            flatten(),
            dense(64), relu(),
            dense(classes),
        ),
    )


def small_mlp(input_shape=(28, 28, 1), classes=10, hidden=128) -> ModelSpec:
    return ModelSpec(
        input_shape=input_shape,
        classes=classes,
        layers=(flatten(), dense(hidden), relu(), dense(classes)),
    )


# ---------------------------------------------------------------------------
# parameter layout

@dataclass(frozen=True)
class _Slot:
    layer_index: int
    name: str  # "w" or "b"
    shape: tuple[int, ...]
    offset: int
    size: int


@dataclass(frozen=True)
class _Layout:
    slots: tuple[_Slot, ...]
    param_count: int
    in_shapes: tuple[tuple[int, ...], ...]   # activation shape entering each layer
    out_shape: tuple[int, ...]


def _conv_out(h, w, kernel, stride):
    pad = kernel // 2
    oh = (h + 2 * pad - kernel) // stride + 1
    ow = (w + 2 * pad - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv reduces {h}x{w} below 1x1 (kernel={kernel}, stride={stride})")
    return oh, ow


@lru_cache(maxsize=None)
def _layout(spec: ModelSpec) -> _Layout:
    slots = []
    in_shapes = []
    cur = spec.input_shape
    offset = 0
    for idx, layer in enumerate(spec.layers):
        in_shapes.append(cur)
        if layer.kind == "dense":
            if len(cur) != 1:
                raise ValueError(f"layer {idx}: dense expects flat input, got shape {cur} (insert flatten)")
            w_shape = (cur[0], layer.width)
            b_shape = (layer.width,)
            slots.append(_Slot(idx, "w", w_shape, offset, cur[0] * layer.width))
            offset += cur[0] * layer.width
            slots.append(_Slot(idx, "b", b_shape, offset, layer.width))
            offset += layer.width
            cur = (layer.width,)
        elif layer.kind == "conv":
            if len(cur) != 3:
                raise ValueError(f"layer {idx}: conv expects (H, W, C) input, got shape {cur}")
            h, w, c = cur
            k, f, s = layer.kernel, layer.channels, layer.stride
            oh, ow = _conv_out(h, w, k, s)
            slots.append(_Slot(idx, "w", (k, k, c, f), offset, k * k * c * f))
            offset += k * k * c * f
            slots.append(_Slot(idx, "b", (f,), offset, f))
            offset += f
            cur = (oh, ow, f)
        elif layer.kind == "flatten":
            cur = (int(np.prod(cur)),)
        elif layer.kind == "relu":
            pass
        elif layer.kind == "softmax-output":
            if idx != len(spec.layers) - 1:
                raise ValueError("softmax-output must be the final layer")
    if cur != (spec.classes,):
        raise ValueError(f"network output shape {cur} does not match class count {spec.classes}")
    return _Layout(tuple(slots), offset, tuple(in_shapes), cur)


def param_count(spec: ModelSpec) -> int:
    return _layout(spec).param_count


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Fan-in-scaled uniform weights, zero biases; deterministic in seed."""
    rng = np.random.default_rng(np.random.SeedSequence([_nonneg(seed), 0xC0DE]))
    vec = np.zeros(param_count(spec), dtype=np.float32)
    for slot in _layout(spec).slots:
        if slot.name == "w":
            fan_in = int(np.prod(slot.shape[:-1]))
            bound = 1.0 / np.sqrt(fan_in)
            vals = rng.uniform(-bound, bound, size=slot.size)
            vec[slot.offset:slot.offset + slot.size] = vals.astype(np.float32)
    return vec


def unflatten_params(spec: ModelSpec, vec: np.ndarray) -> list[np.ndarray]:
    """Split a flat vector into per-tensor views (no copies)."""
    _check_params(spec, vec)
    return [
        vec[s.offset:s.offset + s.size].reshape(s.shape)
        for s in _layout(spec).slots
    ]


def flatten_params(tensors) -> np.ndarray:
    return np.concatenate([np.asarray(t).ravel() for t in tensors])


def _nonneg(seed: int) -> int:
    return int(seed) & 0xFFFFFFFFFFFFFFFF


def _check_params(spec, vec):
    n = param_count(spec)
    if vec.ndim != 1 or vec.shape[0] != n:
        raise ValueError(f"parameter vector has shape {vec.shape}, spec needs ({n},)")


def _check_batch(spec, batch):
    expect = spec.input_shape
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expect:
        raise ValueError(f"batch shape {tuple(batch.shape)} does not match spec input (B, {expect[0]}, {expect[1]}, {expect[2]})")
    if batch.shape[0] == 0:
        raise ValueError("empty batch")


# ---------------------------------------------------------------------------
# forward / backward

def _tensors64(spec, vec):
    lay = _layout(spec)
    out = {}
    for s in lay.slots:
        out[(s.layer_index, s.name)] = vec[s.offset:s.offset + s.size].astype(np.float64).reshape(s.shape)
    return out


def _conv_forward(x, w, b, stride):
    k = w.shape[0]
    pad = k // 2
    bsz, h, width, _ = x.shape
    oh, ow = _conv_out(h, width, k, stride)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.broadcast_to(b, (bsz, oh, ow, b.shape[0])).copy()
    for di in range(k):
        for dj in range(k):
            xs = xp[:, di:di + stride * (oh - 1) + 1:stride,
                    dj:dj + stride * (ow - 1) + 1:stride, :]
            out += xs @ w[di, dj]
    return out, xp


def _conv_backward(dout, xp, w, stride, in_shape):
    k = w.shape[0]
    pad = k // 2
    _, oh, ow, _ = dout.shape
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for di in range(k):
        for dj in range(k):
            sl_i = slice(di, di + stride * (oh - 1) + 1, stride)
            sl_j = slice(dj, dj + stride * (ow - 1) + 1, stride)
            xs = xp[:, sl_i, sl_j, :]
            dw[di, dj] = np.tensordot(xs, dout, axes=([0, 1, 2], [0, 1, 2]))
            dxp[:, sl_i, sl_j, :] += dout @ w[di, dj].T
    db = dout.sum(axis=(0, 1, 2))
    h, width, _ = in_shape
    dx = dxp[:, pad:pad + h, pad:pad + width, :]
    return dx, dw, db


def _run_forward(spec, params, batch, keep_caches):
    _check_params(spec, params)
    batch = np.asarray(batch)
    _check_batch(spec, batch)
    tensors = _tensors64(spec, params)
    lay = _layout(spec)
    x = batch.astype(np.float64, copy=False)
    caches = []
    for idx, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            w, b = tensors[(idx, "w")], tensors[(idx, "b")]
            caches.append(x if keep_caches else None)
            x = x @ w + b
        elif layer.kind == "conv":
            w, b = tensors[(idx, "w")], tensors[(idx, "b")]
            out, xp = _conv_forward(x, w, b, layer.stride)
            caches.append((xp, x.shape[1:]) if keep_caches else None)
            x = out
        elif layer.kind == "relu":
            caches.append(x if keep_caches else None)
            x = np.maximum(x, 0.0)
        elif layer.kind == "flatten":
            caches.append(x.shape if keep_caches else None)
            x = x.reshape(x.shape[0], -1)
        else:  # softmax-output marker: loss applies the softmax
            caches.append(None)
    return x, tensors, caches


def forward(spec: ModelSpec, params: np.ndarray, batch: np.ndarray) -> np.ndarray:
    """Logits [B, K]; deterministic, float64."""
    logits, _, _ = _run_forward(spec, params, batch, keep_caches=False)
    return logits


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _ce_loss_and_dlogits(logits, target_probs):
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - (z * target_probs).sum(axis=1)))
    probs = _softmax(logits)
    dlogits = (probs - target_probs) / logits.shape[0]
    return loss, dlogits


def _backprop(spec, tensors, caches, dlogits):
    lay = _layout(spec)
    grad = np.zeros(lay.param_count, dtype=np.float64)
    dx = dlogits
    for idx in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[idx]
        if layer.kind == "dense":
            x = caches[idx]
            w = tensors[(idx, "w")]
            dw = x.T @ dx
            db = dx.sum(axis=0)
            dx = dx @ w.T
            _store(spec, grad, idx, dw, db)
        elif layer.kind == "conv":
            xp, in_shape = caches[idx]
            w = tensors[(idx, "w")]
            dx, dw, db = _conv_backward(dx, xp, w, layer.stride, in_shape)
            _store(spec, grad, idx, dw, db)
        elif layer.kind == "relu":
            dx = dx * (caches[idx] > 0.0)
        elif layer.kind == "flatten":
            dx = dx.reshape(caches[idx])
    return grad


def _store(spec, grad, layer_index, dw, db):
    for s in _layout(spec).slots:
        if s.layer_index == layer_index:
            src = dw if s.name == "w" else db
            grad[s.offset:s.offset + s.size] = src.ravel()


def loss_and_grad(spec: ModelSpec, params: np.ndarray, batch: np.ndarray,
                  labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != np.asarray(batch).shape[0]:
        raise ValueError("labels must be 1-D and match the batch size")
    if np.any(labels < 0) or np.any(labels >= spec.classes):
        raise ValueError(f"labels must lie in [0, {spec.classes})")
    logits, tensors, caches = _run_forward(spec, params, batch, keep_caches=True)
    onehot = np.zeros_like(logits)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    loss, dlogits = _ce_loss_and_dlogits(logits, onehot)
    grad = _backprop(spec, tensors, caches, dlogits)
    return loss, grad.astype(np.float32)


def soft_loss_and_grad(spec: ModelSpec, params: np.ndarray, batch: np.ndarray,
                       target_probs: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy against full target distributions (soft labels)."""
    target_probs = np.asarray(target_probs, dtype=np.float64)
    if target_probs.shape != (np.asarray(batch).shape[0], spec.classes):
        raise ValueError("target_probs must have shape (B, classes)")
    logits, tensors, caches = _run_forward(spec, params, batch, keep_caches=True)
    loss, dlogits = _ce_loss_and_dlogits(logits, target_probs)
    grad = _backprop(spec, tensors, caches, dlogits)
    return loss, grad.astype(np.float32)


def predict(spec: ModelSpec, params: np.ndarray, images: np.ndarray,
            chunk: int = 256) -> np.ndarray:
    """Argmax class per image (ties -> lowest class index)."""
    out = np.empty(images.shape[0], dtype=np.int64)
    for lo in range(0, images.shape[0], chunk):
        logits = forward(spec, params, images[lo:lo + chunk])
        out[lo:lo + chunk] = np.argmax(logits, axis=1)
    return out


def accuracy(spec: ModelSpec, params: np.ndarray, images, labels=None) -> float:
    """Fraction of argmax-correct predictions on a dataset or (images, labels)."""
    if labels is None:
        images, labels = images.images, images.labels
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise ValueError("empty dataset")
    return float(np.mean(predict(spec, params, images) == labels))


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean norm of (a - b)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a.astype(np.float64) - b.astype(np.float64)))


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class OptimizerState:
    kind: str  # "sgd-momentum" | "adam"
    lr: float
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    velocity: np.ndarray | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def make_optimizer(kind: str, lr: float, n_params: int, momentum: float = 0.9,
                   weight_decay: float = 0.0) -> OptimizerState:
    if kind == "sgd-momentum":
        return OptimizerState(kind=kind, lr=lr, momentum=momentum,
                              weight_decay=weight_decay,
                              velocity=np.zeros(n_params, dtype=np.float32))
    if kind == "adam":
        return OptimizerState(kind=kind, lr=lr, weight_decay=weight_decay,
                              m=np.zeros(n_params, dtype=np.float32),
                              v=np.zeros(n_params, dtype=np.float32))
    raise ValueError(f"unknown optimizer kind {kind!r}")


def optimizer_step(state: OptimizerState, params: np.ndarray,
                   grad: np.ndarray) -> tuple[np.ndarray, OptimizerState]:
    """One update; returns fresh (params', state'), inputs untouched."""
    if params.shape != grad.shape:
        raise ValueError(f"params/grad length mismatch: {params.shape} vs {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite entries in gradient")
    p = params.astype(np.float64)
    g = grad.astype(np.float64)
    if state.weight_decay:
        g = g + state.weight_decay * p
    if state.kind == "sgd-momentum":
        vel = state.velocity.astype(np.float64)
        vel = state.momentum * vel + g
        new_p = (p - state.lr * vel).astype(np.float32)
        new_state = OptimizerState(kind=state.kind, lr=state.lr, momentum=state.momentum,
                                   weight_decay=state.weight_decay,
                                   step_count=state.step_count + 1,
                                   velocity=vel.astype(np.float32))
        return new_p, new_state
    if state.kind == "adam":
        t = state.step_count + 1
        m = state.beta1 * state.m.astype(np.float64) + (1 - state.beta1) * g
        v = state.beta2 * state.v.astype(np.float64) + (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        new_p = (p - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(np.float32)
        new_state = OptimizerState(kind=state.kind, lr=state.lr, beta1=state.beta1,
                                   beta2=state.beta2, eps=state.eps,
                                   weight_decay=state.weight_decay, step_count=t,
                                   m=m.astype(np.float32), v=v.astype(np.float32))
        return new_p, new_state
    raise ValueError(f"unknown optimizer kind {state.kind!r}")


# ---------------------------------------------------------------------------
# checkpoints

def spec_digest(spec: ModelSpec) -> bytes:
    """32-byte digest of the canonical architecture description."""
    canon = json.dumps(spec.to_obj(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).digest()


def model_digest(spec: ModelSpec, params: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(spec_digest(spec))
    h.update(np.ascontiguousarray(params, dtype="<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(path, spec: ModelSpec, params: np.ndarray) -> None:
    """Header: magic "CMRK1" | sha256 spec digest | u64-LE count; then raw LE float32."""
    _check_params(spec, params)
    data = np.ascontiguousarray(params, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(spec_digest(spec))
        fh.write(struct.pack("<Q", params.shape[0]))
        fh.write(data)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, spec: ModelSpec | None = None) -> tuple[np.ndarray, str]:
    """Load a parameter vector; returns (params, spec digest hex).

    Rejects bad magic, truncation and (when `spec` is given) digest mismatch.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    head = len(CHECKPOINT_MAGIC) + 32 + 8
    if len(blob) < head:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a certmark checkpoint")
    digest = blob[len(CHECKPOINT_MAGIC):len(CHECKPOINT_MAGIC) + 32]
    (count,) = struct.unpack("<Q", blob[len(CHECKPOINT_MAGIC) + 32:head])
    if spec is not None:
        if digest != spec_digest(spec):
            raise CheckpointError(f"{path}: checkpoint spec digest does not match the given ModelSpec")
        if count != param_count(spec):
            raise CheckpointError(f"{path}: parameter count {count} does not match spec ({param_count(spec)})")
    if len(blob) - head != 4 * count:
        raise CheckpointError(f"{path}: expected {4 * count} payload bytes, found {len(blob) - head}")
    params = np.frombuffer(blob, dtype="<f4", count=count, offset=head)
    return params.astype(np.float32), digest.hex()
