"""MLP client models: an encoder producing an embedding and a linear head
producing logits.

Clients may run different architectures; the only cross-client contract is
that every head maps to the same number of classes, so logits can be
exchanged between heterogeneous models.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernel import (
    DimensionError,
    Tensor,
    affine_backward,
    affine_forward,
    relu_backward,
    relu_forward,
)

# Registered architectures: hidden layer widths of the encoder.
ARCH_HIDDEN = {
    "arch-S": [24],
    "arch-L": [48, 32],
}


@dataclass(frozen=True)
class ArchSpec:
    arch_id: str
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def embed_dim(self) -> int:
        return self.hidden_dims[-1]

    def to_dict(self) -> dict:
        return {
            "arch_id": self.arch_id,
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchSpec":
        return ArchSpec(
            arch_id=d["arch_id"],
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(int(h) for h in d["hidden_dims"]),
            num_classes=int(d["num_classes"]),
        )


def make_arch(arch_id: str, input_dim: int, num_classes: int) -> ArchSpec:
    if arch_id not in ARCH_HIDDEN:
        raise ValueError(f"unknown arch_id {arch_id!r}; known: {sorted(ARCH_HIDDEN)}")
    return ArchSpec(arch_id, input_dim, tuple(ARCH_HIDDEN[arch_id]), num_classes)


@dataclass
class Model:
    spec: ArchSpec
    # encoder layers: list of (W, b); head: single (W, b) mapping embed -> K
    encoder: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    head: tuple[Tensor, Tensor] = None

    def param_count(self) -> int:
        n = sum(w.size + b.size for w, b in self.encoder)
        return n + self.head[0].size + self.head[1].size

    def copy(self) -> "Model":
        return Model(
            spec=self.spec,
            encoder=[(w.copy(), b.copy()) for w, b in self.encoder],
            head=(self.head[0].copy(), self.head[1].copy()),
        )

    def flat_params(self) -> np.ndarray:
        parts = []
        for w, b in self.encoder:
            parts.append(w.reshape(-1))
            parts.append(b)
        parts.append(self.head[0].reshape(-1))
        parts.append(self.head[1])
        return np.concatenate(parts)

    def set_flat_params(self, theta: np.ndarray) -> None:
        i = 0
        for w, b in self.encoder:
            w[...] = theta[i : i + w.size].reshape(w.shape)
            i += w.size
            b[...] = theta[i : i + b.size]
            i += b.size
        w, b = self.head
        w[...] = theta[i : i + w.size].reshape(w.shape)
        i += w.size
        b[...] = theta[i : i + b.size]
        i += b.size
        if i != theta.size:
            raise DimensionError(f"expected {i} params, got {theta.size}")


@dataclass
class Grads:
    """Parameter gradients structured like Model parameters."""

    encoder: list[tuple[Tensor, Tensor]]
    head: tuple[Tensor, Tensor]

    @staticmethod
    def zeros_like(model: Model) -> "Grads":
        return Grads(
            encoder=[(np.zeros_like(w), np.zeros_like(b)) for w, b in model.encoder],
            head=(np.zeros_like(model.head[0]), np.zeros_like(model.head[1])),
        )

    def add_scaled(self, other: "Grads", scale: float) -> None:
        for (w, b), (ow, ob) in zip(self.encoder, other.encoder):
            w += scale * ow
            b += scale * ob
        self.head[0][...] += scale * other.head[0]
        self.head[1][...] += scale * other.head[1]

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in self.encoder:
            parts.append(w.reshape(-1))
            parts.append(b)
        parts.append(self.head[0].reshape(-1))
        parts.append(self.head[1])
        return np.concatenate(parts)


@dataclass
class ForwardCache:
    """Intermediate activations kept for the backward pass."""

    x: Tensor
    pre_acts: list[Tensor]   # per encoder layer, before ReLU
    acts: list[Tensor]       # per encoder layer, after ReLU
    embedding: Tensor        # == acts[-1]
    logits: Tensor


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(spec: ArchSpec, seed: int) -> Model:
    """Glorot-uniform weights, zero biases; deterministic given seed."""
    rng = np.random.default_rng([int(seed), 0x6D6F64])
    dims = [spec.input_dim, *spec.hidden_dims]
    encoder = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        encoder.append((_glorot(rng, d_in, d_out), np.zeros(d_out)))
    head = (_glorot(rng, spec.embed_dim, spec.num_classes), np.zeros(spec.num_classes))
    return Model(spec=spec, encoder=encoder, head=head)


def forward(model: Model, x: Tensor) -> ForwardCache:
    """Compute embedding = encoder(x) (post-ReLU) and logits = head(embedding)."""
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise DimensionError(
            f"input has shape {x.shape}, model expects [B, {model.spec.input_dim}]"
        )
    pre_acts, acts = [], []
    h = x
    for w, b in model.encoder:
        z = affine_forward(h, w, b)
        pre_acts.append(z)
        h = relu_forward(z)
        acts.append(h)
    logits = affine_forward(h, *model.head)
    return ForwardCache(x=x, pre_acts=pre_acts, acts=acts, embedding=h, logits=logits)


def backward(
    model: Model,
    cache: ForwardCache,
    grad_logits: Tensor | None = None,
    grad_embedding: Tensor | None = None,
) -> Grads:
    """Backprop explicit upstream gradients through head and encoder.

    Either or both of grad_logits / grad_embedding may be supplied; they are
    combined at the embedding.
    """
    grads = Grads.zeros_like(model)
    if grad_logits is not None:
        grad_emb, gw, gb = affine_backward(cache.embedding, model.head[0], grad_logits)
        grads.head[0][...] = gw
        grads.head[1][...] = gb
    else:
        grad_emb = np.zeros_like(cache.embedding)
    if grad_embedding is not None:
        grad_emb = grad_emb + grad_embedding
    upstream = grad_emb
    for layer in range(len(model.encoder) - 1, -1, -1):
        upstream = relu_backward(cache.pre_acts[layer], upstream)
        inp = cache.x if layer == 0 else cache.acts[layer - 1]
        upstream, gw, gb = affine_backward(inp, model.encoder[layer][0], upstream)
        grads.encoder[layer][0][...] = gw
        grads.encoder[layer][1][...] = gb
    return grads


def sgd_step(model: Model, grads: Grads, lr: float) -> Model:
    """Return a new model with params <- params - lr * grads."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    new = model.copy()
    for (w, b), (gw, gb) in zip(new.encoder, grads.encoder):
        if w.shape != gw.shape or b.shape != gb.shape:
            raise DimensionError("gradient shape does not match parameters")
        w -= lr * gw
        b -= lr * gb
    new.head[0][...] -= lr * grads.head[0]
    new.head[1][...] -= lr * grads.head[1]
    return new


def average_models(models: list[Model], weights: list[float] | None = None) -> Model:
    """Parameter average of homogeneous models (FedAvg aggregation)."""
    specs = {m.spec for m in models}
    if len(specs) != 1:
        raise ValueError("parameter averaging requires identical architectures")
    if weights is None:
        weights = [1.0 / len(models)] * len(models)
    total = sum(weights)
    weights = [w / total for w in weights]
    out = models[0].copy()
    theta = sum(w * m.flat_params() for w, m in zip(weights, models))
    out.set_flat_params(theta)
    return out


# --- checkpoint container: sequence of (name, shape, little-endian f64 payload)

_MAGIC = b"AFCK"


def _named_arrays(model: Model):
    for i, (w, b) in enumerate(model.encoder):
        yield f"encoder.{i}.w", w
        yield f"encoder.{i}.b", b
    yield "head.w", model.head[0]
    yield "head.b", model.head[1]


def save_model(model: Model, path: str | Path) -> None:
    """Binary checkpoint plus a JSON sidecar holding the ArchSpec."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        arrays = list(_named_arrays(model))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(model.spec.to_dict(), indent=2))


def load_model(path: str | Path) -> Model:
    path = Path(path)
    spec = ArchSpec.from_dict(json.loads(path.with_suffix(path.suffix + ".json").read_text()))
    arrays = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            arrays[name] = np.array(data, dtype=np.float64)
    encoder = []
    i = 0
    while f"encoder.{i}.w" in arrays:
        encoder.append((arrays[f"encoder.{i}.w"], arrays[f"encoder.{i}.b"]))
        i += 1
    return Model(spec=spec, encoder=encoder, head=(arrays["head.w"], arrays["head.b"]))
