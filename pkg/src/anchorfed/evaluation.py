"""Accuracy matrices, the communication-cost ledger, and empirical probes of
the generalization-bound quantities (synthetic labeling error, teacher
labeling error, and a proxy A-distance between anchor and real features).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression

from .data import ClientData, DataError, Dataset
from .distill import AnchorSet
from .kernel import NumericError, Tensor
from .losses import ce_loss
from .models import Model, forward, init_model, make_arch, sgd_step


def predict(model: Model, x: Tensor) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    return np.argmax(forward(model, x).logits, axis=1)


def accuracy(model: Model, dataset: Dataset) -> float:
    if dataset.n == 0:
        raise DataError("cannot evaluate on an empty dataset")
    return float((predict(model, dataset.features) == dataset.labels).mean())


@dataclass
class AccuracyMatrix:
    matrix: np.ndarray     # A[i, j] = accuracy of model i on client j's test set

    @property
    def global_avg(self) -> float:
        return float(self.matrix.mean())

    @property
    def local_avg(self) -> float:
        return float(np.diag(self.matrix).mean())

    def inter_client(self, i: int) -> float:
        """Mean accuracy of model i across all clients' test sets."""
        return float(self.matrix[i].mean())


def evaluate_all(models: list[Model], suite: list[ClientData]) -> AccuracyMatrix:
    n = len(models)
    if n != len(suite):
        raise DataError("one model per client required")
    a = np.empty((n, n))
    for i, m in enumerate(models):
        for j, cd in enumerate(suite):
            a[i, j] = accuracy(m, cd.test)
    return AccuracyMatrix(a)


@dataclass
class CommLedger:
    algorithm: str
    pre_fl_floats: int
    per_round_floats: int
    rounds: int

    @property
    def total(self) -> int:
        return self.pre_fl_floats + self.per_round_floats * self.rounds

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "pre_fl_floats": self.pre_fl_floats,
            "per_round_floats": self.per_round_floats,
            "rounds": self.rounds,
            "total": self.total,
        }


def comm_audit(
    algorithm: str,
    rounds: int,
    ipc: int = 0,
    num_classes: int = 0,
    logit_dim: int = 0,
    anchor_record_floats: int = 0,
    model_params: int = 0,
) -> CommLedger:
    """Analytic per-run communication cost in shared scalar counts.

    Anchor-sharing runs pay anchor_record_floats * ipc * num_classes once
    before training and num_classes * ipc * logit_dim of logits per round;
    parameter-sharing runs pay model_params per round and nothing up front.
    """
    if rounds < 1:
        raise DataError("rounds must be >= 1")
    if algorithm in ("desa", "logit-only"):
        if min(ipc, num_classes, logit_dim, anchor_record_floats) <= 0:
            raise DataError("anchor-sharing audit needs ipc, num_classes, logit_dim, anchor_record_floats")
        pre = anchor_record_floats * ipc * num_classes
        per = num_classes * ipc * logit_dim
    elif algorithm in ("fedavg", "param-sharing", "standalone"):
        if algorithm == "standalone":
            return CommLedger(algorithm, 0, 0, rounds)
        if model_params <= 0:
            raise DataError("parameter-sharing audit needs model_params")
        pre, per = 0, model_params
    else:
        raise DataError(f"unknown algorithm {algorithm!r}")
    return CommLedger(algorithm, pre, per, rounds)


@dataclass
class BoundProbeConfig:
    oracle_arch: str = "arch-L"
    oracle_epochs: int = 40
    oracle_lr: float = 0.05
    oracle_batch: int = 64
    classifier_samples: int = 2000
    seed: int = 0


@dataclass
class BoundProbeReport:
    est_synth_label_error: float
    est_kd_label_error: float | None
    proxy_divergence: float
    component_weights: dict

    def to_dict(self) -> dict:
        return {
            "est_synth_label_error": self.est_synth_label_error,
            "est_kd_label_error": self.est_kd_label_error,
            "proxy_divergence": self.proxy_divergence,
            "component_weights": self.component_weights,
        }


def pooled_dataset(suite: list[ClientData], split: str = "train") -> Dataset:
    parts = [getattr(c, split) for c in suite]
    return Dataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        parts[0].num_classes,
        split=split,
    )


def train_oracle(pool: Dataset, cfg: BoundProbeConfig) -> Model:
    """Reference labeler: a fixed-budget model fit on pooled real data."""
    spec = make_arch(cfg.oracle_arch, pool.dim, pool.num_classes)
    model = init_model(spec, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0x02AC])
    for _ in range(cfg.oracle_epochs):
        perm = rng.permutation(pool.n)
        for start in range(0, pool.n, cfg.oracle_batch):
            idx = perm[start : start + cfg.oracle_batch]
            loss, grads = ce_loss(model, pool.features[idx], pool.labels[idx])
            if not np.isfinite(loss):
                raise NumericError("oracle training diverged")
            model = sgd_step(model, grads, cfg.oracle_lr)
    return model


def proxy_a_distance(
    source: Tensor, target: Tensor, seed: int, max_samples: int = 2000
) -> float:
    """2*(2*acc - 1) of a domain classifier separating the two samples,
    evaluated on a held-out half and clamped to [0, 2]."""
    rng = np.random.default_rng([seed, 0x0AD1])
    # balance the two samples so chance accuracy is exactly 0.5
    n = min(len(source), len(target), max_samples)
    def pick(x):
        return x[rng.choice(len(x), size=n, replace=False)]
    s, t = pick(source), pick(target)
    x = np.concatenate([s, t])
    y = np.concatenate([np.zeros(len(s)), np.ones(len(t))])
    perm = rng.permutation(len(x))
    x, y = x[perm], y[perm]
    half = len(x) // 2
    clf = LogisticRegression(max_iter=1000)
    clf.fit(x[:half], y[:half])
    acc = float(clf.score(x[half:], y[half:]))
    acc = max(acc, 1.0 - acc)
    return float(np.clip(2.0 * (2.0 * acc - 1.0), 0.0, 2.0))


def bound_probe(
    suite: list[ClientData],
    anchors: AnchorSet,
    kd_teacher_logits: Tensor | None,
    cfg: BoundProbeConfig,
    lam_reg: float = 1.0,
    lam_kd: float = 1.0,
) -> BoundProbeReport:
    """Estimate the measurable bound quantities on the pooled global data."""
    pool = pooled_dataset(suite, "train")
    oracle = train_oracle(pool, cfg)
    oracle_on_anchors = predict(oracle, anchors.features)
    synth_err = float((oracle_on_anchors != anchors.labels).mean())
    kd_err = None
    if kd_teacher_logits is not None:
        teacher_labels = np.argmax(kd_teacher_logits, axis=1)
        kd_err = float((teacher_labels != oracle_on_anchors).mean())
    divergence = proxy_a_distance(
        pool.features, anchors.features, cfg.seed, cfg.classifier_samples
    )
    total = 1.0 + lam_reg + lam_kd
    weights = {
        "ce": 1.0 / total,
        "reg": lam_reg / total,
        "kd": lam_kd / total,
    }
    return BoundProbeReport(synth_err, kd_err, divergence, weights)
