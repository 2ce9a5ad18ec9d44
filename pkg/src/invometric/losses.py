"""Cross-entropy and multi-similarity objectives with analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, ShapeError

__all__ = [
    "MSLossConfig",
    "cross_entropy",
    "cosine_similarity_matrix",
    "mine_pairs",
    "ms_loss",
]


@dataclass(frozen=True)
class MSLossConfig:
    """Multi-similarity hyperparameters.

    ``alpha`` and ``beta`` scale the positive and negative soft-max terms,
    ``lam`` is the similarity offset, ``epsilon`` the mining margin.
    """

    alpha: float = 2.0
    beta: float = 50.0
    lam: float = 1.0
    epsilon: float = 0.1

    def __post_init__(self):
        if not self.alpha > 0 or not self.beta > 0:
            raise ConfigError(f"alpha and beta must be positive, got {self.alpha}, {self.beta}")
        if not self.epsilon >= 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"logits must be (B, n_classes>=2), got {logits.shape}")
    b, ncls = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= ncls):
        raise ConfigError(f"labels must lie in [0, {ncls}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(b)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1
    grad /= b
    return loss, grad


def cosine_similarity_matrix(embeddings):
    """Pairwise dot products; equals cosine similarity for unit rows."""
    e = np.asarray(embeddings)
    return e @ e.T


def mine_pairs(similarity, labels, cfg: MSLossConfig):
    """Select informative pairs for every anchor.

    Returns a list with, per anchor, either ``None`` (no positive partner in
    the batch, anchor skipped) or a ``(positives, negatives)`` pair of index
    arrays. A negative is kept when it is more similar than the hardest
    positive minus ``epsilon``; a positive when it is less similar than the
    hardest negative plus ``epsilon``. An empty opposite set keeps everything.
    """
    s = np.asarray(similarity)
    labels = np.asarray(labels)
    b = len(labels)
    same = labels[:, None] == labels[None, :]
    out = []
    for i in range(b):
        pos = np.flatnonzero(same[i])
        pos = pos[pos != i]
        neg = np.flatnonzero(~same[i])
        if pos.size == 0:
            out.append(None)
            continue
        if neg.size == 0:
            out.append((pos, neg))
            continue
        sp, sn = s[i, pos], s[i, neg]
        kept_neg = neg[sn > sp.min() - cfg.epsilon]
        kept_pos = pos[sp < sn.max() + cfg.epsilon]
        out.append((kept_pos, kept_neg))
    return out


def _log1p_sum_exp(z):
    """``log(1 + sum(exp(z)))`` and the softmax weights ``exp(z) / (1 + sum)``."""
    if z.size == 0:
        return 0.0, z
    top = max(0.0, float(z.max()))
    ez = np.exp(z - top)
    denom = np.exp(-top) + ez.sum()
    return top + float(np.log(denom)), ez / denom


def ms_loss(embeddings, labels, cfg: MSLossConfig | None = None):
    """Multi-similarity loss over a batch of unit-norm embeddings.

    Averages over anchors that have at least one same-label partner. Mined
    pair sets are treated as constants when differentiating. Returns
    ``(loss, grad_embeddings)``.
    """
    cfg = cfg or MSLossConfig()
    e = np.asarray(embeddings)
    labels = np.asarray(labels)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ShapeError(f"ms_loss needs a batch of at least 2 embeddings, got shape {e.shape}")
    if labels.shape != (e.shape[0],):
        raise ShapeError(f"expected {e.shape[0]} labels, got shape {labels.shape}")
    s = cosine_similarity_matrix(e)
    mined = mine_pairs(s, labels, cfg)
    active = [i for i, m in enumerate(mined) if m is not None]
    grad_s = np.zeros_like(s)
    if not active:
        return 0.0, np.zeros_like(e)
    total = 0.0
    for i in active:
        pos, neg = mined[i]
        lp, wp = _log1p_sum_exp(-cfg.alpha * (s[i, pos] - cfg.lam))
        ln, wn = _log1p_sum_exp(cfg.beta * (s[i, neg] - cfg.lam))
        total += lp / cfg.alpha + ln / cfg.beta
        grad_s[i, pos] -= wp
        grad_s[i, neg] += wn
    m = len(active)
    grad_s /= m
    grad_e = (grad_s + grad_s.T) @ e
    return total / m, grad_e
