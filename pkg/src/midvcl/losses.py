"""Contrastive objectives with analytic gradients.

Every loss is a function of the query embeddings only; positives, negatives,
prototypes and intrinsic keys come from the momentum branch and are treated
as constants.  Losses return ``(value, grad_wrt_queries)`` so the caller can
push the gradient back through its own autodiff graph.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

NORM_TOLERANCE = 1e-4


@dataclass(frozen=True)
class LossConfig:
    temperature_tau: float = 0.2
    negatives_r: int = 16
    alpha_shad: float = 0.5
    beta_refl: float = 0.5
    queue_size: int = 256

    def __post_init__(self):
        if not self.temperature_tau > 0:
            raise InvalidInputError("temperature_tau must be positive")
        if self.negatives_r < 1:
            raise InvalidInputError("negatives_r must be at least 1")
        if self.alpha_shad < 0 or self.beta_refl < 0:
            raise InvalidInputError("alpha_shad and beta_refl must be non-negative")
        if self.queue_size < 1:
            raise InvalidInputError("queue_size must be positive")


class NegativeQueue:
    """FIFO ring buffer of key embeddings used as negatives.

    Callers take ``negatives()`` before pushing the current batch, so a
    batch never sees its own keys.  Single writer, no concurrent readers.
    """

    def __init__(self, capacity, dim, seed=0):
        if capacity < 1:
            raise InvalidInputError("queue capacity must be positive")
        rng = np.random.default_rng(seed)
        buf = rng.standard_normal((capacity, dim))
        self.buffer = buf / np.linalg.norm(buf, axis=1, keepdims=True)
        self.ptr = 0

    @property
    def capacity(self):
        return len(self.buffer)

    def negatives(self):
        return self.buffer.copy()

    def push(self, keys):
        keys = np.asarray(keys, dtype=np.float64)
        if len(keys) > self.capacity:
            raise InvalidInputError("cannot push more keys than the queue holds")
        _check_unit(keys, "keys")
        idx = (self.ptr + np.arange(len(keys))) % self.capacity
        self.buffer[idx] = keys
        self.ptr = int((self.ptr + len(keys)) % self.capacity)


def _check_unit(x, name):
    if x.size and not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contain non-finite values")
    dev = np.abs(np.linalg.norm(x, axis=-1) - 1.0)
    if dev.size and dev.max() > NORM_TOLERANCE:
        raise InvalidInputError(f"{name} are not unit-norm (max deviation {dev.max():.2e})")


def _softmax_ce(logits, target_col=0):
    """Mean cross-entropy of rows against column ``target_col`` and d/dlogits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    b = len(logits)
    loss = -log_p[:, target_col].mean()
    dlogits = np.exp(log_p)
    dlogits[:, target_col] -= 1.0
    return float(loss), dlogits / b


def info_nce(queries, positives, negatives, tau):
    """InfoNCE with a shared negative set.

    loss = -(1/B) sum_i log softmax([q_i.p_i, q_i.n_1, ..., q_i.n_M] / tau)[0]
    """
    if not tau > 0:
        raise InvalidInputError("tau must be positive")
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    n = np.asarray(negatives, dtype=np.float64)
    if q.shape != p.shape:
        raise InvalidInputError(f"queries {q.shape} and positives {p.shape} differ in shape")
    if n.ndim != 2 or len(n) < 1 or n.shape[1] != q.shape[1]:
        raise InvalidInputError("negatives must be a non-empty (M, D) array")
    _check_unit(q, "queries")
    _check_unit(p, "positives")
    _check_unit(n, "negatives")

    logits = np.concatenate([(q * p).sum(1, keepdims=True), q @ n.T], axis=1) / tau
    loss, dlogits = _softmax_ce(logits)
    grad = (dlogits[:, :1] * p + dlogits[:, 1:] @ n) / tau
    return loss, grad


def sample_prototype_negatives(positive, k, r, seed):
    """For each anchor, ``r`` distinct clusters other than its own, uniformly."""
    positive = np.asarray(positive)
    if not 1 <= r <= k - 1:
        raise InvalidInputError(f"r={r} must lie in [1, K-1] for K={k}")
    rng = np.random.default_rng(seed)
    keys = rng.random((len(positive), k))
    keys[np.arange(len(positive)), positive] = np.inf
    return np.argsort(keys, axis=1, kind="stable")[:, :r]


def proto_nce(queries, centroids, concentrations, positive, negative_idx):
    """Prototype NCE for explicit positive and negative cluster indices.

    loss_i = -log exp(v_i.s_p / phi_p) / sum_{j in {p} + neg_i} exp(v_i.s_j / phi_j)
    """
    v = np.asarray(queries, dtype=np.float64)
    s = np.asarray(centroids, dtype=np.float64)
    phi = np.asarray(concentrations, dtype=np.float64)
    cols = np.concatenate([np.asarray(positive)[:, None], np.asarray(negative_idx)], axis=1)
    protos = s[cols]  # (B, r + 1, D)
    scale = 1.0 / phi[cols]  # (B, r + 1)
    logits = np.einsum("bd,bjd->bj", v, protos) * scale
    loss, dlogits = _softmax_ce(logits)
    grad = np.einsum("bj,bjd->bd", dlogits * scale, protos)
    return loss, grad


def shape_proto_nce(queries, bank, clustering_index, sample_ids, r, seed):
    """Prototype NCE against one clustering of the bank.

    ``sample_ids`` index the bank's assignments, i.e. the cluster of each
    query's paired silhouette.  Negative prototypes are drawn per anchor.
    """
    v = np.asarray(queries, dtype=np.float64)
    _check_unit(v, "queries")
    clustering = bank[clustering_index]
    ids = np.asarray(sample_ids)
    if ids.shape != (len(v),):
        raise InvalidInputError("need one sample id per query")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= len(clustering.assignments):
        raise InvalidInputError("sample id without a cluster assignment")
    positive = clustering.assignments[ids]
    negative_idx = sample_prototype_negatives(positive, clustering.k, r, seed)
    return proto_nce(v, clustering.centroids, clustering.concentrations, positive, negative_idx)


def default_negatives_r(k, cap=16):
    return max(1, min(k - 1, cap))


def proto_term(queries, bank, sample_ids, config, seed):
    """Average prototype loss over every clustering in the bank."""
    total, grad = 0.0, np.zeros_like(np.asarray(queries, dtype=np.float64))
    for i, c in enumerate(bank.clusterings):
        r = min(config.negatives_r, c.k - 1)
        loss, g = shape_proto_nce(queries, bank, i, sample_ids, r, seed=[seed, i])
        total += loss
        grad += g
    n = len(bank)
    return total / n, grad / n


@dataclass
class ViewBatch:
    """Embeddings for one training step.

    queries: query-branch embeddings of augmented view 1 (B, D)
    keys: key-branch embeddings of augmented view 2 (B, D)
    negatives: queue snapshot taken before this batch's keys were pushed (M, D)
    sample_ids: dataset indices, used to look up prototype assignments
    """

    queries: np.ndarray
    keys: np.ndarray
    negatives: np.ndarray
    sample_ids: np.ndarray
    seed: int = 0


def intrinsic_view_loss(queries, intrinsic_keys, negatives, tau):
    """InfoNCE with reflectance or shading embeddings as the positives."""
    if isinstance(negatives, NegativeQueue):
        negatives = negatives.negatives()
    return info_nce(queries, intrinsic_keys, negatives, tau)


def spcl_loss(batch, bank, config):
    """InfoNCE between the two views plus the averaged prototype term.

    With ``bank=None`` (before clustering warm-up, or for the plain baseline)
    only the InfoNCE term is used.  Returns ``(total, grad, terms)``.
    """
    loss, grad = info_nce(batch.queries, batch.keys, batch.negatives, config.temperature_tau)
    terms = {"loss_infonce": loss}
    total = loss
    if bank is not None:
        proto, g = proto_term(batch.queries, bank, batch.sample_ids, config, batch.seed)
        terms["loss_proto"] = proto
        total = total + proto
        grad = grad + g
    terms["loss_total"] = total
    return total, grad, terms


def midvcl_loss(batch, bank, refl_keys, shad_keys, config):
    """InfoNCE + prototype term + alpha * shading view + beta * reflectance view.

    A view whose keys are ``None`` or whose weight is zero is left out.
    Returns ``(total, grad, terms)``.
    """
    if config.alpha_shad < 0 or config.beta_refl < 0:
        raise InvalidInputError("alpha_shad and beta_refl must be non-negative")
    total, grad, terms = spcl_loss(batch, bank, config)
    tau = config.temperature_tau
    if shad_keys is not None and config.alpha_shad > 0:
        loss, g = intrinsic_view_loss(batch.queries, shad_keys, batch.negatives, tau)
        terms["loss_shad"] = loss
        total = total + config.alpha_shad * loss
        grad = grad + config.alpha_shad * g
    if refl_keys is not None and config.beta_refl > 0:
        loss, g = intrinsic_view_loss(batch.queries, refl_keys, batch.negatives, tau)
        terms["loss_refl"] = loss
        total = total + config.beta_refl * loss
        grad = grad + config.beta_refl * g
    terms["loss_total"] = total
    return total, grad, terms
