"""Gated-attention MIL head and dual-stream MIL head, with exact backward passes.

Both heads take a bag as a P x D matrix. Computations follow the dtype of the
model parameters (float32 for training, float64 for gradient checks).

Checkpoints use the MMLP container (little-endian)::

    "MMLP" | version u32 = 1 | kind_len u32 | kind utf-8 | n_blocks u32
    | per block: name_len u32 | name utf-8 | ndim u32 | dims u32 x ndim | f32 data
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from mixupmil.bagstore import FeatureBag
from mixupmil.nn_core import (
    DenseLayer,
    ShapeError,
    affine,
    affine_backward,
    glorot_uniform,
    grad_check,
    init_dense,
    sigmoid,
    soft_cross_entropy,
    softmax,
    softmax_backward,
    softmax_xent_grad,
)
from mixupmil.rng import RngStream

HIDDEN = 128
QUERY = 128
STREAM_WEIGHT = 0.5
KINDS = ("abmil", "dsmil")

CKPT_MAGIC = b"MMLP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _layer(params: dict[str, np.ndarray], name: str) -> DenseLayer:
    return DenseLayer(params[f"{name}.weight"], params[f"{name}.bias"])


@dataclass
class ABMILModel:
    """Gated attention pooling followed by a linear classifier."""

    params: dict[str, np.ndarray]
    kind: str = field(default="abmil", init=False)

    @property
    def attn_V(self) -> DenseLayer:
        return _layer(self.params, "attn_V")

    @property
    def attn_U(self) -> DenseLayer:
        return _layer(self.params, "attn_U")

    @property
    def attn_w(self) -> np.ndarray:
        return self.params["attn_w"]

    @property
    def classifier(self) -> DenseLayer:
        return _layer(self.params, "classifier")

    @property
    def dim(self) -> int:
        return self.params["attn_V.weight"].shape[1]

    @property
    def n_classes(self) -> int:
        return self.params["classifier.weight"].shape[0]

    @property
    def hidden(self) -> int:
        return self.params["attn_V.weight"].shape[0]

    def astype(self, dtype) -> "ABMILModel":
        return ABMILModel({k: v.astype(dtype, copy=True) for k, v in self.params.items()})


@dataclass
class DSMILModel:
    """Instance stream (max-scoring instance per class) plus critical-instance attention stream."""

    params: dict[str, np.ndarray]
    stream_weight: float = STREAM_WEIGHT
    kind: str = field(default="dsmil", init=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.stream_weight <= 1.0:
            raise ValueError(f"stream_weight must lie in [0, 1], got {self.stream_weight}")

    @property
    def inst_classifier(self) -> DenseLayer:
        return _layer(self.params, "inst_classifier")

    @property
    def query(self) -> DenseLayer:
        return _layer(self.params, "query")

    @property
    def value(self) -> DenseLayer:
        return _layer(self.params, "value")

    @property
    def bag_classifier(self) -> DenseLayer:
        return _layer(self.params, "bag_classifier")

    @property
    def dim(self) -> int:
        return self.params["value.weight"].shape[1]

    @property
    def n_classes(self) -> int:
        return self.params["bag_classifier.weight"].shape[0]

    def astype(self, dtype) -> "DSMILModel":
        return DSMILModel({k: v.astype(dtype, copy=True) for k, v in self.params.items()}, self.stream_weight)


MilModel = Union[ABMILModel, DSMILModel]


def init_model(kind: str, dim: int, n_classes: int, rng: RngStream, hidden: int = HIDDEN,
               query: int = QUERY, stream_weight: float = STREAM_WEIGHT) -> MilModel:
    """Glorot-uniform weights, zero biases; layers drawn in the order listed below."""
    if dim < 1 or n_classes < 2:
        raise ValueError(f"need D >= 1 and C >= 2, got D={dim}, C={n_classes}")
    params: dict[str, np.ndarray] = {}

    def dense(name: str, n_in: int, n_out: int) -> None:
        layer = init_dense(n_in, n_out, rng)
        params[f"{name}.weight"] = layer.weight
        params[f"{name}.bias"] = layer.bias

    if kind == "abmil":
        dense("attn_V", dim, hidden)
        dense("attn_U", dim, hidden)
        params["attn_w"] = glorot_uniform(hidden, 1, rng).reshape(hidden)
        dense("classifier", dim, n_classes)
        return ABMILModel(params)
    if kind == "dsmil":
        dense("inst_classifier", dim, n_classes)
        dense("query", dim, query)
        dense("value", dim, dim)
        dense("bag_classifier", dim, n_classes)
        return DSMILModel(params, stream_weight)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {', '.join(KINDS)}")


def _features(model: MilModel, bag) -> np.ndarray:
    x = bag.features if isinstance(bag, FeatureBag) else np.asarray(bag)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ShapeError(f"bag of shape {x.shape} does not match model dimension {model.dim}")
    dtype = next(iter(model.params.values())).dtype
    return x.astype(dtype, copy=False)


# ---------------------------------------------------------------- gated attention head


@dataclass
class ABMILOutput:
    class_probs: np.ndarray
    attention: np.ndarray
    logits: np.ndarray
    trace: dict = field(repr=False)


def abmil_forward(model: ABMILModel, bag) -> ABMILOutput:
    x = _features(model, bag)
    hv = np.tanh(affine(model.attn_V, x))
    hu = sigmoid(affine(model.attn_U, x))
    gated = hv * hu
    scores = gated @ model.attn_w
    attention = softmax(scores)
    z = attention @ x
    logits = affine(model.classifier, z)
    probs = softmax(logits)
    trace = {"x": x, "hv": hv, "hu": hu, "gated": gated, "z": z}
    return ABMILOutput(probs, attention, logits, trace)


def abmil_backward(model: ABMILModel, out: ABMILOutput, target: np.ndarray) -> dict[str, np.ndarray]:
    t = out.trace
    x, hv, hu = t["x"], t["hv"], t["hu"]
    target = np.asarray(target, dtype=x.dtype)
    d_logits = softmax_xent_grad(out.class_probs, target)
    g = {}
    g["classifier.weight"], g["classifier.bias"], d_z = affine_backward(model.classifier, t["z"], d_logits)
    d_att = x @ d_z
    d_scores = softmax_backward(out.attention, d_att)
    g["attn_w"] = t["gated"].T @ d_scores
    d_gated = np.outer(d_scores, model.attn_w)
    d_pre_v = d_gated * hu * (1 - hv * hv)
    d_pre_u = d_gated * hv * hu * (1 - hu)
    g["attn_V.weight"], g["attn_V.bias"], _ = affine_backward(model.attn_V, x, d_pre_v)
    g["attn_U.weight"], g["attn_U.bias"], _ = affine_backward(model.attn_U, x, d_pre_u)
    return g


# ---------------------------------------------------------------- dual-stream head


@dataclass
class DSMILOutput:
    instance_probs: np.ndarray  # P x C
    fused_probs: np.ndarray  # C
    attention: np.ndarray  # P x C, one distribution per class
    bag_logits: np.ndarray
    max_logits: np.ndarray
    fused_logits: np.ndarray
    critical: np.ndarray  # critical instance index per class
    trace: dict = field(repr=False)


def dsmil_forward(model: DSMILModel, bag, critical: np.ndarray | None = None) -> DSMILOutput:
    """Dual-stream forward pass.

    ``critical`` pins the per-class critical instance indices instead of taking
    the argmax of the instance scores; gradient checks use it to stay on one
    smooth piece of the loss.
    """
    x = _features(model, bag)
    n_classes = model.n_classes
    scores = affine(model.inst_classifier, x)  # P x C
    if critical is None:
        critical = np.argmax(scores, axis=0)  # first maximum wins ties
    else:
        critical = np.asarray(critical, dtype=np.int64)
    max_logits = scores[critical, np.arange(n_classes)]
    q = affine(model.query, x)  # P x Q
    q_crit = q[critical]  # C x Q
    attention = softmax(q @ q_crit.T, axis=0)  # P x C
    v = affine(model.value, x)  # P x D
    emb = attention.T @ v  # C x D, row c is the class-c bag embedding
    bc = model.bag_classifier
    bag_logits = np.sum(bc.weight * emb, axis=1) + bc.bias
    lam = model.stream_weight
    fused = lam * bag_logits + (1 - lam) * max_logits
    trace = {"x": x, "q": q, "q_crit": q_crit, "v": v, "emb": emb}
    return DSMILOutput(softmax(scores, axis=1), softmax(fused), attention, bag_logits, max_logits,
                       fused, critical, trace)


def dsmil_backward(model: DSMILModel, out: DSMILOutput, target: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of :func:`mil_loss` with the critical indices held fixed."""
    t = out.trace
    x, q, q_crit, v, emb = t["x"], t["q"], t["q_crit"], t["v"], t["emb"]
    target = np.asarray(target, dtype=x.dtype)
    n_classes = model.n_classes
    d_bag = 0.5 * softmax_xent_grad(softmax(out.bag_logits), target)
    d_max = 0.5 * softmax_xent_grad(softmax(out.max_logits), target)
    g = {}
    bc = model.bag_classifier
    g["bag_classifier.weight"] = d_bag[:, None] * emb
    g["bag_classifier.bias"] = d_bag
    d_emb = d_bag[:, None] * bc.weight  # C x D
    d_att = v @ d_emb.T  # P x C
    d_v = out.attention @ d_emb  # P x D
    g["value.weight"], g["value.bias"], _ = affine_backward(model.value, x, d_v)
    d_sim = softmax_backward(out.attention, d_att, axis=0)  # P x C
    d_q = d_sim @ q_crit
    np.add.at(d_q, out.critical, d_sim.T @ q)
    g["query.weight"], g["query.bias"], _ = affine_backward(model.query, x, d_q)
    d_scores = np.zeros((x.shape[0], n_classes), dtype=x.dtype)
    np.add.at(d_scores, (out.critical, np.arange(n_classes)), d_max)
    g["inst_classifier.weight"], g["inst_classifier.bias"], _ = affine_backward(model.inst_classifier, x, d_scores)
    return g


# ---------------------------------------------------------------- shared entry points


def forward(model: MilModel, bag, critical: np.ndarray | None = None):
    if model.kind == "abmil":
        return abmil_forward(model, bag)
    return dsmil_forward(model, bag, critical)


def mil_loss(outputs, target: np.ndarray) -> float:
    """Cross-entropy for the gated head; mean of both stream losses for the dual-stream head."""
    target = np.asarray(target)
    if isinstance(outputs, ABMILOutput):
        return soft_cross_entropy(outputs.class_probs, target)
    bag_loss = soft_cross_entropy(softmax(outputs.bag_logits), target)
    inst_loss = soft_cross_entropy(softmax(outputs.max_logits), target)
    return 0.5 * bag_loss + 0.5 * inst_loss


def loss_and_grads(model: MilModel, bag, target: np.ndarray,
                   critical: np.ndarray | None = None) -> tuple[float, dict[str, np.ndarray]]:
    out = forward(model, bag, critical)
    if model.kind == "abmil":
        grads = abmil_backward(model, out, target)
    else:
        grads = dsmil_backward(model, out, target)
    return mil_loss(out, target), grads


def gradient_error(model: MilModel, bag, target: np.ndarray, h: float = 1e-2, order: int = 6) -> float:
    """grad_check of :func:`loss_and_grads` on a float64 copy of ``model``.

    Dual-stream critical indices are pinned to their unperturbed values.
    """
    m64 = model.astype(np.float64)
    x = np.asarray(bag.features if isinstance(bag, FeatureBag) else bag, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    critical = dsmil_forward(m64, x).critical if m64.kind == "dsmil" else None
    _, grads = loss_and_grads(m64, x, target, critical)

    def loss() -> float:
        return mil_loss(forward(m64, x, critical), target)

    return grad_check(loss, m64.params, grads, h=h, order=order)


def class_probs(model: MilModel, bag) -> np.ndarray:
    out = forward(model, bag)
    return out.class_probs if model.kind == "abmil" else out.fused_probs


def predict(model: MilModel, bag) -> tuple[int, float]:
    """Most probable class (lowest index on ties) and its probability."""
    probs = class_probs(model, bag)
    k = int(np.argmax(probs))
    return k, float(probs[k])


# ---------------------------------------------------------------- checkpoints


def encode_checkpoint(model: MilModel) -> bytes:
    blocks = dict(model.params)
    if model.kind == "dsmil":
        blocks["stream_weight"] = np.asarray(model.stream_weight)
    kind = model.kind.encode()
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(kind)), kind, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        enc = name.encode("utf-8")
        out.append(struct.pack("<I", len(enc)) + enc)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_checkpoint(data: bytes) -> MilModel:
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic: expected b'MMLP'")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    version, kind_len = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = take(kind_len).decode()
    (n_blocks,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape))
        params[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(data):
        raise CheckpointError("trailing bytes after last block")
    if kind == "abmil":
        return ABMILModel(params)
    if kind == "dsmil":
        lam = float(params.pop("stream_weight"))
        return DSMILModel(params, lam)
    raise CheckpointError(f"unknown model kind {kind!r}")


def save_checkpoint(model: MilModel, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


def load_checkpoint(path: str | Path) -> MilModel:
    return decode_checkpoint(Path(path).read_bytes())
