"""PFID objective: cross entropy plus gated pairwise KL terms on softmax outputs.

Every batch-level loss returns a :class:`LossOutput` carrying the value and
the exact gradient with respect to the logits.  Class labels are 1-based
(``1..K``) throughout.

Pairwise terms are accumulated over pairs in construction order, which keeps
results bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import EPS, kl_divergence, log_softmax, softmax
from .pairing import PairBatch


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0  # nats

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")


@dataclass
class LossOutput:
    value: float
    grad_logits: np.ndarray  # (batch, K)
    # only the siamese baseline fills this
    grad_embeddings: np.ndarray | None = None


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n == 0:
        raise ValueError("empty batch")
    bad = (labels < 1) | (labels > k)
    if np.any(bad):
        raise ValueError(f"labels out of range 1..{k}: {labels[bad].tolist()}")
    return labels


def cross_entropy_loss(logits, labels) -> LossOutput:
    """Mean negative log-likelihood of the true class."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n, k = z.shape
    labels = _check_labels(labels, n, k)
    rows = np.arange(n)
    value = -log_softmax(z)[rows, labels - 1].mean()
    grad = softmax(z)
    grad[rows, labels - 1] -= 1.0
    return LossOutput(float(value), grad / n)


def similar_pair_loss(p, q) -> float:
    """Symmetric KL: KL(p||q) + KL(q||p)."""
    return kl_divergence(p, q) + kl_divergence(q, p)


def dissimilar_pair_loss(p, q, margin: float) -> float:
    """Two-sided hinge pushing each directed KL above ``margin``."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    return max(0.0, margin - kl_divergence(p, q)) + max(0.0, margin - kl_divergence(q, p))


def guide_gate(p, q, label_i: int, label_j: int) -> int:
    """1 when at least one pair member is currently classified correctly."""
    return int(int(np.argmax(p)) + 1 == label_i or int(np.argmax(q)) + 1 == label_j)


def _kl_grads(p, q):
    """Directed KL(p||q) for rows of ``p`` and ``q`` with gradients w.r.t. both logit rows.

    The clamp used by :func:`kl_divergence` is differentiated through (zero
    slope where it is active).
    """
    pc = np.clip(p, EPS, 1.0)
    qc = np.clip(q, EPS, 1.0)
    log_ratio = np.log(pc) - np.log(qc)
    kl = np.sum(pc * log_ratio, axis=1)
    dp = (log_ratio + 1.0) * (p > EPS)
    dq = -(pc / qc) * (q > EPS)
    # softmax Jacobian-vector product: s * (g - <s, g>)
    gz = p * (dp - np.sum(p * dp, axis=1, keepdims=True))
    gw = q * (dq - np.sum(q * dq, axis=1, keepdims=True))
    return kl, gz, gw


def _check_pairs(pairs, n: int) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        raise ValueError(f"pair index out of range for batch of {n}")
    return pairs


def pair_gates(probs, labels, pairs) -> np.ndarray:
    pred = np.argmax(probs, axis=1) + 1
    i, j = pairs[:, 0], pairs[:, 1]
    return ((pred[i] == labels[i]) | (pred[j] == labels[j])).astype(np.float64)


def _scatter(grad, pairs, gi, gj):
    # sequential accumulation in pair order
    np.add.at(grad, pairs[:, 0], gi)
    np.add.at(grad, pairs[:, 1], gj)


def guided_pair_terms(logits, labels, pairs: PairBatch, config: LossConfig) -> LossOutput:
    """The two gated pairwise terms alone, each averaged over its full pair set.

    Gates are evaluated on the current predictions and held constant.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n, k = z.shape
    labels = _check_labels(labels, n, k)
    sim = _check_pairs(pairs.similar_pairs, n)
    dis = _check_pairs(pairs.dissimilar_pairs, n)
    probs = softmax(z)
    grad = np.zeros_like(z)
    value = 0.0

    if len(sim):
        p, q = probs[sim[:, 0]], probs[sim[:, 1]]
        a = pair_gates(probs, labels, sim) / len(sim)
        kl_pq, g1p, g1q = _kl_grads(p, q)
        kl_qp, g2q, g2p = _kl_grads(q, p)
        value += float(np.sum(a * (kl_pq + kl_qp)))
        _scatter(grad, sim, a[:, None] * (g1p + g2p), a[:, None] * (g1q + g2q))

    if len(dis):
        m = config.margin
        p, q = probs[dis[:, 0]], probs[dis[:, 1]]
        a = pair_gates(probs, labels, dis) / len(dis)
        kl_pq, g1p, g1q = _kl_grads(p, q)
        kl_qp, g2q, g2p = _kl_grads(q, p)
        act1 = (m - kl_pq > 0).astype(np.float64)
        act2 = (m - kl_qp > 0).astype(np.float64)
        value += float(np.sum(a * (act1 * (m - kl_pq) + act2 * (m - kl_qp))))
        w1 = -(a * act1)[:, None]
        w2 = -(a * act2)[:, None]
        _scatter(grad, dis, w1 * g1p + w2 * g2p, w1 * g1q + w2 * g2q)

    return LossOutput(value, grad)


def pfid_loss(logits, labels, pairs: PairBatch, config: LossConfig = LossConfig()) -> LossOutput:
    """Cross entropy plus the guided similar and dissimilar KL terms.

    Empty similar or dissimilar sets contribute nothing.
    """
    ce = cross_entropy_loss(logits, labels)
    pw = guided_pair_terms(logits, labels, pairs, config)
    return LossOutput(ce.value + pw.value, ce.grad_logits + pw.grad_logits)


def siamese_hinge_loss(emb_i, emb_j, same: bool, margin: float):
    """Contrastive hinge on raw features.

    Same identity: ``||e_i - e_j||^2``.  Different identity:
    ``max(0, margin - ||e_i - e_j||)^2``.  Returns ``(value, grad_i, grad_j)``.
    """
    ei = np.asarray(emb_i, dtype=np.float64)
    ej = np.asarray(emb_j, dtype=np.float64)
    if ei.shape != ej.shape:
        raise ValueError(f"dimension mismatch: {ei.shape} vs {ej.shape}")
    if margin <= 0:
        raise ValueError("margin must be > 0")
    diff = ei - ej
    if same:
        return float(diff @ diff), 2.0 * diff, -2.0 * diff
    dist = float(np.sqrt(diff @ diff))
    slack = margin - dist
    if slack <= 0:
        return 0.0, np.zeros_like(ei), np.zeros_like(ej)
    if dist == 0.0:
        # direction undefined at coincidence; the subgradient 0 is used
        return slack * slack, np.zeros_like(ei), np.zeros_like(ej)
    g = -2.0 * slack * diff / dist
    return slack * slack, g, -g


def siamese_batch_loss(embeddings, num_classes: int, pairs: PairBatch, margin: float) -> LossOutput:
    """Mean hinge over similar pairs plus mean hinge over dissimilar pairs.

    The classification head receives no gradient in this mode.
    """
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n = e.shape[0]
    if margin <= 0:
        raise ValueError("margin must be > 0")
    grad = np.zeros_like(e)
    value = 0.0

    sim = _check_pairs(pairs.similar_pairs, n)
    if len(sim):
        diff = e[sim[:, 0]] - e[sim[:, 1]]
        value += float(np.sum(diff * diff)) / len(sim)
        g = 2.0 * diff / len(sim)
        _scatter(grad, sim, g, -g)

    dis = _check_pairs(pairs.dissimilar_pairs, n)
    if len(dis):
        diff = e[dis[:, 0]] - e[dis[:, 1]]
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        slack = np.maximum(margin - dist, 0.0)
        value += float(np.sum(slack * slack)) / len(dis)
        safe = np.where(dist > 0, dist, 1.0)
        coef = np.where(dist > 0, -2.0 * slack / safe, 0.0) / len(dis)
        g = coef[:, None] * diff
        _scatter(grad, dis, g, -g)

    return LossOutput(value, np.zeros((n, num_classes)), grad)
