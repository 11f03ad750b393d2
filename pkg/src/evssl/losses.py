"""Contrastive objectives over a batch of embeddings.

Negatives are the other elements of the batch. All functions take and return
:class:`gradcore.Tensor` values, so any of them can sit under ``backward``.
Keys from the momentum branch and teacher embeddings enter as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, ShapeMismatch

KEY_PROJECTION_MODES = ("own", "query")
EVENT_LOSSES = ("projection", "vanilla")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.2
    lambda1: float = 2.0
    key_projection_mode: str = "own"
    event_loss: str = "projection"
    normalize_img: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if not self.lambda1 >= 0:
            raise ConfigError("lambda1 must be >= 0")
        if self.key_projection_mode not in KEY_PROJECTION_MODES:
            raise ConfigError(f"key_projection_mode must be one of {KEY_PROJECTION_MODES}")
        if self.event_loss not in EVENT_LOSSES:
            raise ConfigError(f"event_loss must be one of {EVENT_LOSSES}")


@dataclass(frozen=True, eq=False)
class BatchEmbeddings:
    q_evt: gc.Tensor  # (B, E) online event head
    k_evt: gc.Tensor  # (B, E) momentum event head, no gradient
    q_img: gc.Tensor  # (B, E) online image head
    y: gc.Tensor  # (B, E) unit teacher rows, no gradient

    def __post_init__(self):
        shapes = {t.shape for t in (self.q_evt, self.k_evt, self.q_img, self.y)}
        if len(shapes) != 1 or len(self.q_evt.shape) != 2:
            raise ShapeMismatch(f"batch embeddings disagree on shape: {shapes}")
        if self.k_evt.requires_grad or self.y.requires_grad:
            raise ValueError("keys and teacher embeddings must be constants")
        if not np.allclose(np.linalg.norm(self.y.value, axis=1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("teacher rows must be unit norm")

    @classmethod
    def from_arrays(cls, q_evt, k_evt, q_img, y) -> BatchEmbeddings:
        return cls(gc.as_tensor(q_evt), gc.constant(k_evt), gc.as_tensor(q_img), gc.constant(y))

    @property
    def size(self) -> int:
        return self.q_evt.shape[0]


def nce_from_logits(logits: gc.Tensor, positives) -> gc.Tensor:
    """Mean over rows of ``-log softmax(logits)[i, positives[i]]``."""
    rows, cols = logits.shape
    onehot = np.zeros((rows, cols))
    onehot[np.arange(rows), np.asarray(positives)] = 1.0
    picked = gc.sum_(gc.mul(gc.log_softmax_rows(logits), gc.constant(onehot)))
    return gc.scale(picked, -1.0 / rows)


def info_nce(q: gc.Tensor, keys: gc.Tensor, pos: int, tau: float, normalize_inputs: bool = True) -> gc.Tensor:
    """InfoNCE of one query against ``keys`` with ``keys[pos]`` as the positive."""
    m, e = keys.shape
    if not 0 <= pos < m:
        raise ShapeMismatch(f"positive index {pos} outside {m} keys")
    q2 = gc.reshape(q, (1, e))
    if normalize_inputs:
        q2, keys = gc.l2_normalize(q2), gc.l2_normalize(keys)
    logits = gc.scale(gc.matmul(q2, gc.transpose(keys)), 1.0 / tau)
    return nce_from_logits(logits, [pos])


def info_nce_rows(queries: gc.Tensor, keys: gc.Tensor, tau: float) -> gc.Tensor:
    """Batch InfoNCE: query i is matched with key i, all other keys are negatives."""
    logits = gc.scale(gc.matmul(queries, gc.transpose(keys)), 1.0 / tau)
    return nce_from_logits(logits, np.arange(queries.shape[0]))


def zeta_rows(v1: gc.Tensor, v2: gc.Tensor) -> gc.Tensor:
    """Row-wise ``(v1 . v2) * v2 / |v2|``."""
    return gc.scale_rows(gc.l2_normalize(v2), gc.rowwise_dot(v1, v2))


def zeta(v1: gc.Tensor, v2: gc.Tensor) -> gc.Tensor:
    e = v1.shape[0]
    out = zeta_rows(gc.reshape(v1, (1, e)), gc.reshape(v2, (1, e)))
    return gc.reshape(out, (e,))


def l_evt(batch: BatchEmbeddings, tau: float, key_projection_mode: str = "own") -> gc.Tensor:
    """Event projection loss.

    Query and key embeddings are unit-normalized, projected onto teacher
    directions, and the projections are compared without re-normalization.
    In ``"own"`` mode every key is projected onto its own sample's teacher; in
    ``"query"`` mode all keys are projected onto the querying sample's teacher.
    """
    if batch.size < 2:
        raise ShapeMismatch("in-batch negatives need B >= 2")
    qn = gc.l2_normalize(batch.q_evt)
    kn = gc.l2_normalize(batch.k_evt)
    zq = zeta_rows(qn, batch.y)
    if key_projection_mode == "own":
        logits = gc.matmul(zq, gc.transpose(zeta_rows(kn, batch.y)))
    elif key_projection_mode == "query":
        # zeta(q_i, y_i) . zeta(k_j, y_i) = (q_i . y_i)(k_j . y_i) / |y_i|^2 * |y_i|^2
        y_hat = gc.l2_normalize(batch.y)
        logits = gc.scale_rows(gc.matmul(y_hat, gc.transpose(kn)), gc.rowwise_dot(qn, y_hat))
    else:
        raise ValueError(f"unknown key projection mode {key_projection_mode!r}")
    return nce_from_logits(gc.scale(logits, 1.0 / tau), np.arange(batch.size))


def l_evt_vanilla(batch: BatchEmbeddings, tau: float) -> gc.Tensor:
    """Plain InfoNCE between event queries and momentum keys (the collapsing baseline)."""
    if batch.size < 2:
        raise ShapeMismatch("in-batch negatives need B >= 2")
    return info_nce_rows(gc.l2_normalize(batch.q_evt), gc.l2_normalize(batch.k_evt), tau)


def l_rgb(batch: BatchEmbeddings, tau: float, normalize: bool = True) -> gc.Tensor:
    if batch.size < 2:
        raise ShapeMismatch("in-batch negatives need B >= 2")
    q = gc.l2_normalize(batch.q_img) if normalize else batch.q_img
    return info_nce_rows(q, batch.y, tau)


def pairwise_scores(m: gc.Tensor, tau: float) -> gc.Tensor:
    """Row-stochastic exponential-kernel similarities, diagonal included."""
    if m.shape[0] < 2:
        raise ShapeMismatch("pairwise scores need B >= 2")
    mn = gc.l2_normalize(m)
    return gc.softmax_rows(gc.scale(gc.matmul(mn, gc.transpose(mn)), 1.0 / tau))


def l_kl(s_q: gc.Tensor, s_y: gc.Tensor) -> gc.Tensor:
    """``sum_ij s_q[i,j] * log(s_q[i,j] / s_y[i,j])``."""
    if s_q.shape != s_y.shape:
        raise ShapeMismatch(f"l_kl: {s_q.shape} vs {s_y.shape}")
    return gc.sum_(gc.mul(s_q, gc.sub(gc.log(s_q), gc.log(s_y))))


def total_loss(batch: BatchEmbeddings, cfg: LossConfig) -> tuple[gc.Tensor, dict[str, float]]:
    if cfg.event_loss == "projection":
        evt = l_evt(batch, cfg.tau, cfg.key_projection_mode)
    else:
        evt = l_evt_vanilla(batch, cfg.tau)
    rgb = l_rgb(batch, cfg.tau, cfg.normalize_img)
    kl = l_kl(pairwise_scores(batch.q_img, cfg.tau), pairwise_scores(batch.y, cfg.tau))
    total = gc.add(gc.add(evt, rgb), gc.scale(kl, cfg.lambda1))
    parts = {"l_evt": evt.item(), "l_rgb": rgb.item(), "l_kl": kl.item(), "l_total": total.item()}
    return total, parts
