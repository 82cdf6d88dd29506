"""The three training losses and their exact gradients.

- cross-entropy on local data (optionally augmented with anchor records),
- anchor regularization: temperature-scaled supervised contrastive distance
  between local and anchor embeddings, with anchor embeddings detached,
- knowledge distillation: KL from the softmax of averaged neighbor logits to
  the local model's softmax on the anchors.

Every loss returns (value, parameter gradients); the gradients are assembled
by hand from the kernel primitives and checked against finite differences in
the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import DimensionError, Tensor, log_softmax, softmax
from .models import Grads, Model, backward, forward


@dataclass
class LossBatch:
    local_x: Tensor
    local_y: np.ndarray
    anchor_x: Tensor | None = None
    anchor_y: np.ndarray | None = None
    mean_neighbor_logits: Tensor | None = None   # row-aligned with anchor_x
    lam_reg: float = 1.0
    lam_kd: float = 1.0
    tau: float = 0.5
    include_anchor_ce: bool = True

    def validate(self):
        if self.lam_reg < 0 or self.lam_kd < 0:
            raise ValueError("loss coefficients must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lam_kd > 0 and self.mean_neighbor_logits is not None:
            if self.anchor_x is None or \
                    self.mean_neighbor_logits.shape[0] != self.anchor_x.shape[0]:
                raise DimensionError("neighbor logits must align with anchor records")


def ce_loss(model: Model, x: Tensor, y: np.ndarray) -> tuple[float, Grads]:
    """Mean negative log-likelihood of the true class."""
    cache = forward(model, x)
    logp = log_softmax(cache.logits)
    n = x.shape[0]
    loss = -float(logp[np.arange(n), y].mean())
    grad_logits = softmax(cache.logits)
    grad_logits[np.arange(n), y] -= 1.0
    grad_logits /= n
    return loss, backward(model, cache, grad_logits=grad_logits)


def _supcon_value_and_embed_grad(
    emb: Tensor, labels: np.ndarray, tau: float
) -> tuple[float, Tensor]:
    """Supervised contrastive loss over a combined batch, averaged over
    samples that have at least one positive; returns gradient w.r.t. the
    embeddings. Samples without positives contribute 0.
    """
    n = emb.shape[0]
    sims = emb @ emb.T / tau
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(n, dtype=bool)
    pos = same & off_diag
    pos_counts = pos.sum(axis=1)
    active = pos_counts > 0
    if not active.any():
        return 0.0, np.zeros_like(emb)

    # log-sum-exp over everyone but self, per row
    masked = np.where(off_diag, sims, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    exp = np.where(off_diag, np.exp(masked - row_max), 0.0)
    lse = row_max[:, 0] + np.log(exp.sum(axis=1))

    per_sample = np.zeros(n)
    per_sample[active] = lse[active] - (
        np.where(pos, sims, 0.0).sum(axis=1)[active] / pos_counts[active]
    )
    n_active = int(active.sum())
    loss = float(per_sample[active].sum() / n_active)

    # dloss/dsims[j, a] for a != j: softmax weight minus positive indicator
    alpha = exp / exp.sum(axis=1, keepdims=True)
    g = alpha.copy()
    g[active] -= pos[active] / pos_counts[active, None]
    g[~active] = 0.0
    g[:, :] = np.where(off_diag, g, 0.0)
    g /= n_active
    grad_emb = (g + g.T) @ emb / tau
    return loss, grad_emb


def reg_loss(
    model: Model,
    local_x: Tensor,
    local_y: np.ndarray,
    anchor_x: Tensor,
    anchor_y: np.ndarray,
    tau: float,
) -> tuple[float, Grads]:
    """Anchor regularization over the combined local ∪ anchor batch.

    Anchor embeddings enter the forward value but are detached, so the
    gradient only pulls local embeddings toward same-class anchors.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    x = np.concatenate([local_x, anchor_x])
    labels = np.concatenate([local_y, anchor_y])
    cache = forward(model, x)
    loss, grad_emb = _supcon_value_and_embed_grad(cache.embedding, labels, tau)
    grad_emb = grad_emb.copy()
    grad_emb[local_x.shape[0]:] = 0.0   # detach the anchor rows
    return loss, backward(model, cache, grad_embedding=grad_emb)


def kd_loss(
    model: Model, anchor_x: Tensor, mean_neighbor_logits: Tensor
) -> tuple[float, Grads]:
    """Mean KL(softmax(teacher) || softmax(student)) over anchor records."""
    cache = forward(model, anchor_x)
    if mean_neighbor_logits.shape != cache.logits.shape:
        raise DimensionError(
            f"teacher logits {mean_neighbor_logits.shape} do not align with "
            f"student logits {cache.logits.shape}"
        )
    n = anchor_x.shape[0]
    p_teacher = softmax(mean_neighbor_logits)
    logp_teacher = log_softmax(mean_neighbor_logits)
    logp_student = log_softmax(cache.logits)
    loss = float((p_teacher * (logp_teacher - logp_student)).sum() / n)
    grad_logits = (softmax(cache.logits) - p_teacher) / n
    return loss, backward(model, cache, grad_logits=grad_logits)


def total_loss(model: Model, batch: LossBatch) -> tuple[float, Grads, dict]:
    """loss = ce + lam_reg * reg + lam_kd * kd; gradients sum linearly."""
    batch.validate()
    has_anchors = batch.anchor_x is not None and batch.anchor_x.shape[0] > 0

    if batch.include_anchor_ce and has_anchors:
        ce_x = np.concatenate([batch.local_x, batch.anchor_x])
        ce_y = np.concatenate([batch.local_y, batch.anchor_y])
    else:
        ce_x, ce_y = batch.local_x, batch.local_y
    ce, grads = ce_loss(model, ce_x, ce_y)
    components = {"ce": ce, "reg": 0.0, "kd": 0.0}

    if batch.lam_reg > 0 and has_anchors:
        reg, g_reg = reg_loss(
            model, batch.local_x, batch.local_y,
            batch.anchor_x, batch.anchor_y, batch.tau,
        )
        components["reg"] = reg
        grads.add_scaled(g_reg, batch.lam_reg)

    if batch.lam_kd > 0 and has_anchors and batch.mean_neighbor_logits is not None:
        kd, g_kd = kd_loss(model, batch.anchor_x, batch.mean_neighbor_logits)
        components["kd"] = kd
        grads.add_scaled(g_kd, batch.lam_kd)

    loss = components["ce"] + batch.lam_reg * components["reg"] \
        + batch.lam_kd * components["kd"]
    return loss, grads, components
