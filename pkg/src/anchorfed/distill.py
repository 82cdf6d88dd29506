"""Class-balanced synthetic anchor synthesis by distribution matching.

Each iteration re-samples a random feature encoder and minimizes, per class,
the squared distance between the mean encoded real mini-batch and the mean
encoded synthetic members of that class. Synthetic features are the only
optimized variables (SGD with momentum). An optional DP mode clips the
per-iteration gradient and injects Gaussian noise before the step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError, Dataset, load_dataset, save_dataset
from .kernel import NumericError, Tensor, relu_backward, relu_forward


@dataclass
class AnchorSet:
    features: Tensor          # [ipc * K, D], grouped by class
    labels: np.ndarray        # exactly `per_class` of each class, ascending
    num_classes: int
    ipc: int
    origin: str = "global"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        counts = np.bincount(self.labels, minlength=self.num_classes)
        if len(set(counts.tolist())) != 1:
            raise DataError(f"anchor set not class-balanced: counts {counts.tolist()}")
        if not np.isfinite(self.features).all():
            raise NumericError("anchor features contain non-finite values")

    @property
    def per_class(self) -> int:
        return self.features.shape[0] // self.num_classes

    def class_rows(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def as_dataset(self) -> Dataset:
        return Dataset(self.features, self.labels, self.num_classes, split="anchor")


@dataclass
class DPConfig:
    clip_norm: float = 2.0
    noise_sigma: float = 1.2
    batch_size: int | None = None      # defaults to the distillation batch size
    subset_per_class: int | None = None

    def validate(self):
        if self.clip_norm <= 0:
            raise DataError("dp.clip_norm must be positive")
        if self.noise_sigma < 0:
            raise DataError("dp.noise_sigma must be >= 0")


@dataclass
class DistillConfig:
    ipc: int = 50
    iterations: int = 200
    lr: float = 1.0
    momentum: float = 0.5
    batch_size: int = 64
    encoder: str = "random-mlp"        # random-mlp | identity
    encoder_width_range: tuple[int, int] = (16, 64)
    init: str = "real"                 # real | noise
    seed: int = 0
    dp: DPConfig | None = None

    def validate(self):
        if self.ipc < 1:
            raise DataError("ipc must be >= 1")
        if self.lr <= 0:
            raise DataError("distill lr must be positive")
        if self.encoder not in ("random-mlp", "identity"):
            raise DataError(f"unknown encoder {self.encoder!r}")
        if self.init not in ("real", "noise"):
            raise DataError(f"unknown init {self.init!r}")
        if self.dp is not None:
            self.dp.validate()


@dataclass
class DistillTrace:
    """Optional diagnostics collector for tests and audits."""

    objective_start: float = float("nan")
    objective_end: float = float("nan")
    grad_norms: list = field(default_factory=list)        # pre-noise, post-clip
    noise_draws: list = field(default_factory=list)       # raw draws, std == noise_sigma


class _RandomEncoder:
    """One-hidden-layer ReLU MLP with Glorot-uniform weights."""

    def __init__(self, dim: int, width: int, rng: np.random.Generator):
        limit = np.sqrt(6.0 / (dim + width))
        self.w = rng.uniform(-limit, limit, size=(dim, width))

    def forward(self, x: Tensor) -> Tensor:
        return relu_forward(x @ self.w)

    def backward(self, x: Tensor, grad_out: Tensor) -> Tensor:
        return relu_backward(x @ self.w, grad_out) @ self.w.T


class _IdentityEncoder:
    def forward(self, x: Tensor) -> Tensor:
        return x

    def backward(self, x: Tensor, grad_out: Tensor) -> Tensor:
        return grad_out


def _make_encoder(cfg: DistillConfig, dim: int, rng: np.random.Generator):
    if cfg.encoder == "identity":
        return _IdentityEncoder()
    lo, hi = cfg.encoder_width_range
    width = int(rng.integers(lo, hi + 1))
    return _RandomEncoder(dim, width, rng)


def matching_objective(encoder, real: Dataset, syn: AnchorSet) -> float:
    """Sum over classes of squared distance between mean encoded features."""
    total = 0.0
    for c in range(real.num_classes):
        m_real = encoder.forward(real.features[real.labels == c]).mean(axis=0)
        m_syn = encoder.forward(syn.features[syn.class_rows(c)]).mean(axis=0)
        total += float(((m_real - m_syn) ** 2).sum())
    return total


def _init_anchors(dataset: Dataset, cfg: DistillConfig, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    k, d = dataset.num_classes, dataset.dim
    labels = np.repeat(np.arange(k), cfg.ipc)
    feats = np.empty((cfg.ipc * k, d))
    for c in range(k):
        idx = np.flatnonzero(dataset.labels == c)
        pick = rng.choice(idx, size=cfg.ipc, replace=idx.size < cfg.ipc)
        if cfg.init == "real":
            feats[labels == c] = dataset.features[pick]
        else:
            feats[labels == c] = rng.normal(0.0, 1.0, size=(cfg.ipc, d))
    return feats, labels


def _class_balanced_subset(dataset: Dataset, per_class: int, rng: np.random.Generator) -> Dataset:
    idx = []
    for c in range(dataset.num_classes):
        cls = np.flatnonzero(dataset.labels == c)
        idx.extend(rng.choice(cls, size=min(per_class, cls.size), replace=False))
    return dataset.subset(np.array(sorted(idx), dtype=np.int64))


def distill(dataset: Dataset, cfg: DistillConfig, trace: DistillTrace | None = None) -> AnchorSet:
    """Distill a class-balanced AnchorSet from one client's raw data."""
    cfg.validate()
    missing = [c for c in range(dataset.num_classes)
               if not (dataset.labels == c).any()]
    if missing:
        raise DataError(f"dataset missing classes {missing}; all classes required")

    rng_init = np.random.default_rng([cfg.seed, 0x1317, 1])
    rng_iter = np.random.default_rng([cfg.seed, 0x1317, 2])
    rng_noise = np.random.default_rng([cfg.seed, 0x1317, 3])

    dp = cfg.dp
    if dp is not None and dp.subset_per_class is not None:
        dataset = _class_balanced_subset(dataset, dp.subset_per_class, rng_init)

    feats, labels = _init_anchors(dataset, cfg, rng_init)
    syn = AnchorSet(feats, labels, dataset.num_classes, cfg.ipc,
                    origin=str(dataset.client_id))
    velocity = np.zeros_like(syn.features)

    # fixed held-out encoder for objective tracking, independent of the
    # per-iteration encoders
    holdout = _make_encoder(cfg, dataset.dim,
                            np.random.default_rng([cfg.seed, 0x1317, 4]))
    if trace is not None:
        trace.objective_start = matching_objective(holdout, dataset, syn)

    class_rows = [syn.class_rows(c) for c in range(dataset.num_classes)]
    class_idx = [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]

    for it in range(cfg.iterations):
        enc = _make_encoder(cfg, dataset.dim, rng_iter)
        grad = np.zeros_like(syn.features)
        for c in range(dataset.num_classes):
            idx = class_idx[c]
            batch = rng_iter.choice(idx, size=min(cfg.batch_size, idx.size), replace=False)
            m_real = enc.forward(dataset.features[batch]).mean(axis=0)
            syn_c = syn.features[class_rows[c]]
            emb_syn = enc.forward(syn_c)
            diff = emb_syn.mean(axis=0) - m_real
            # d/d emb_j of ||mean(emb) - m_real||^2 = 2 * diff / n_syn
            grad_emb = np.tile(2.0 * diff / syn_c.shape[0], (syn_c.shape[0], 1))
            grad[class_rows[c]] = enc.backward(syn_c, grad_emb)
        if not np.isfinite(grad).all():
            raise NumericError(f"non-finite distillation gradient at iteration {it}")

        if dp is not None:
            norm = float(np.linalg.norm(grad))
            if np.isfinite(dp.clip_norm) and norm > dp.clip_norm:
                grad *= dp.clip_norm / norm
                norm = dp.clip_norm
            draws = dp.noise_sigma * rng_noise.standard_normal(grad.shape)
            if trace is not None:
                trace.grad_norms.append(min(norm, dp.clip_norm))
                trace.noise_draws.append(draws.copy())
            # clip-then-noise with sensitivity clip_norm / batch_size
            b = dp.batch_size if dp.batch_size is not None else cfg.batch_size
            scale = dp.clip_norm / b if np.isfinite(dp.clip_norm) else 0.0
            grad = grad + scale * draws

        velocity = cfg.momentum * velocity + grad
        syn.features -= cfg.lr * velocity
        if not np.isfinite(syn.features).all():
            raise NumericError(f"non-finite anchor features at iteration {it}")

    if trace is not None:
        trace.objective_end = matching_objective(holdout, dataset, syn)
    return syn


def distill_dp(dataset: Dataset, cfg: DistillConfig, trace: DistillTrace | None = None) -> AnchorSet:
    """Distillation with the DP mechanism; cfg.dp must be set."""
    if cfg.dp is None:
        raise DataError("distill_dp requires cfg.dp")
    return distill(dataset, cfg, trace=trace)


def merge_anchors(sets: list[AnchorSet], mode: str = "average") -> AnchorSet:
    """Combine per-client anchor sets into the shared global set.

    average: element-wise mean of class-and-slot-aligned features (default);
    union: concatenation of all sets.
    """
    if not sets:
        raise DataError("no anchor sets to merge")
    if mode not in ("average", "union"):
        raise DataError(f"unknown merge mode {mode!r}")
    if len(sets) == 1:
        s = sets[0]
        return AnchorSet(s.features.copy(), s.labels.copy(), s.num_classes, s.ipc, origin="global")
    first = sets[0]
    if mode == "average":
        for s in sets[1:]:
            if s.features.shape != first.features.shape or s.ipc != first.ipc \
                    or s.num_classes != first.num_classes:
                raise DataError("average merge requires identical IPC, K and feature dim")
        # align by (class, slot): sort each set's rows by label (stable)
        aligned = []
        for s in sets:
            order = np.argsort(s.labels, kind="stable")
            aligned.append(s.features[order])
        labels = first.labels[np.argsort(first.labels, kind="stable")]
        feats = np.mean(aligned, axis=0)
        return AnchorSet(feats, labels, first.num_classes, first.ipc, origin="global")
    feats = np.concatenate([s.features for s in sets])
    labels = np.concatenate([s.labels for s in sets])
    order = np.argsort(labels, kind="stable")
    return AnchorSet(feats[order], labels[order], first.num_classes, first.ipc, origin="global")


def save_anchors(anchors: AnchorSet, path: str | Path, config_hash: str = "") -> None:
    """CSV of features/labels plus a JSON sidecar with provenance fields."""
    path = Path(path)
    save_dataset(anchors.as_dataset(), path)
    sidecar = {
        "origin": anchors.origin,
        "ipc": anchors.ipc,
        "num_classes": anchors.num_classes,
        "config_hash": config_hash,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_anchors(path: str | Path) -> AnchorSet:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    ds = load_dataset(path, sidecar["num_classes"])
    return AnchorSet(ds.features, ds.labels, sidecar["num_classes"],
                     sidecar["ipc"], origin=sidecar["origin"])
