"""Denoising patch-level contrast plus the two baseline objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .rng import generator
from .vit import mask_array

POOLS = ("per_image", "cross_image", "filtered")
_EXCLUDED = -1e9


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    negative_pool: str = "per_image"
    filter_threshold: float = 0.8

    def __post_init__(self):
        if not self.temperature > 0:
            raise ObjectiveError(f"temperature must be positive, got {self.temperature}")
        if self.negative_pool not in POOLS:
            raise ObjectiveError(f"unknown negative pool {self.negative_pool!r}")
        if not 0.0 < self.filter_threshold <= 1.0:
            raise ObjectiveError(f"filter_threshold must be in (0, 1], got {self.filter_threshold}")


@dataclass
class LossReport:
    loss: Tensor
    per_anchor_rank: np.ndarray
    mean_softmax_entropy: float
    n_anchors: int
    pool_size: np.ndarray

    @property
    def value(self) -> float:
        return self.loss.item()

    @property
    def mean_rank(self) -> float:
        return float(self.per_anchor_rank.mean())

    @property
    def top1(self) -> float:
        return float((self.per_anchor_rank == 1).mean())


def _report(loss: Tensor, logits: np.ndarray, labels: np.ndarray, keep: np.ndarray | None = None) -> LossReport:
    logits = np.asarray(logits, dtype=np.float64)
    if keep is None:
        keep = np.ones(logits.shape, dtype=bool)
    rows = np.arange(len(labels))
    pos = logits[rows, labels][:, None]
    rank = 1 + ((logits > pos) & keep).sum(axis=1)
    z = np.where(keep, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
    return LossReport(loss, rank, float(ent.mean()), len(labels), keep.sum(axis=1))


def _gradient_free(keys, what: str) -> np.ndarray:
    if isinstance(keys, Tensor):
        if keys.requires_grad:
            raise ObjectiveError(f"{what} must be gradient-free")
        return keys.data
    return np.asarray(keys)


def _normalize(a: np.ndarray) -> np.ndarray:
    norm = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    return a / np.maximum(norm, 1e-12)


def conmim_loss(query_feats: Tensor, key_feats, masks, cfg: LossConfig = LossConfig()) -> LossReport:
    """Masked-anchor InfoNCE against keys at the same positions.

    ``query_feats`` (N, K, D) come from the corrupted branch, ``key_feats``
    (N, K, D) from the momentum branch and must carry no gradient.  For
    anchor j of image n the positive is key j of image n.
    """
    keys = _gradient_free(key_feats, "key branch")
    q = query_feats if isinstance(query_feats, Tensor) else Tensor(query_feats)
    if q.shape != keys.shape or q.ndim != 3:
        raise ObjectiveError(f"query {q.shape} and key {keys.shape} features must both be (N, K, D)")
    n, k, d = q.shape
    m = np.broadcast_to(mask_array(masks).reshape(-1, k), (n, k))
    if not m.any():
        raise ObjectiveError("empty mask across batch: no anchors")
    n_idx, j_idx = np.nonzero(m)
    qn = nx.l2_normalize(q)
    kn = _normalize(keys.astype(q.dtype, copy=False))
    inv_t = 1.0 / cfg.temperature
    keep = None
    if cfg.negative_pool == "cross_image":
        sim = nx.reshape(qn, (n * k, d)) @ Tensor(np.ascontiguousarray(kn.reshape(n * k, d).T))
        rows = n_idx * k + j_idx
        labels = rows
        logits = nx.take(sim, rows, axis=0) * inv_t
    else:
        sim = qn @ Tensor(np.ascontiguousarray(kn.transpose(0, 2, 1)))
        rows = n_idx * k + j_idx
        labels = j_idx
        logits = nx.take(nx.reshape(sim, (n * k, k)), rows, axis=0) * inv_t
        if cfg.negative_pool == "filtered":
            cos = sim.data.reshape(n * k, k)[rows]
            keep = cos <= cfg.filter_threshold
            keep[np.arange(len(rows)), labels] = True
            logits = nx.where(keep, logits, np.asarray(_EXCLUDED, dtype=q.dtype))
    loss = nx.cross_entropy(logits, labels)
    return _report(loss, logits.data, labels, keep)


def instance_infonce_loss(batch_feats_a: Tensor, batch_feats_b, temperature: float = 0.1) -> LossReport:
    """Symmetric in-batch InfoNCE: a_i's positive is b_i, every other b_j is a negative."""
    b = _gradient_free(batch_feats_b, "target branch")
    a = batch_feats_a if isinstance(batch_feats_a, Tensor) else Tensor(batch_feats_a)
    if a.ndim != 2 or a.shape != b.shape:
        raise ObjectiveError(f"feature batches must both be (N, D), got {a.shape} and {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ObjectiveError("instance contrast needs N >= 2 (no negatives otherwise)")
    if not temperature > 0:
        raise ObjectiveError("temperature must be positive")
    an = nx.l2_normalize(a)
    bn = _normalize(b.astype(a.dtype, copy=False))
    logits = (an @ Tensor(np.ascontiguousarray(bn.T))) * (1.0 / temperature)
    labels = np.arange(n)
    l_ab = nx.cross_entropy(logits, labels)
    l_ba = nx.cross_entropy(nx.transpose(logits, (1, 0)), labels)
    loss = (l_ab + l_ba) * 0.5
    both = np.concatenate([logits.data, logits.data.T])
    return _report(loss, both, np.concatenate([labels, labels]))


# ---------------------------------------------------------------------------
# tokenizer stand-in for the discrete-token baseline


@dataclass
class TokenizerCodebook:
    centroids: np.ndarray  # (V, P)

    @property
    def V(self) -> int:
        return self.centroids.shape[0]

    def assign(self, patches: np.ndarray) -> np.ndarray:
        """Nearest-centroid ids for patches (..., P)."""
        x = np.asarray(patches, dtype=np.float64)
        flat = x.reshape(-1, x.shape[-1])
        c = self.centroids.astype(np.float64)
        d2 = (flat * flat).sum(1)[:, None] - 2 * flat @ c.T + (c * c).sum(1)[None, :]
        return d2.argmin(axis=1).reshape(x.shape[:-1])


def fit_codebook(patches: np.ndarray, V: int, seed: int = 0, iters: int = 20) -> TokenizerCodebook:
    """k-means with k-means++ seeding, squared Euclidean distance."""
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim != 2:
        raise ObjectiveError(f"fit_codebook expects (M, P) patches, got {x.shape}")
    m = x.shape[0]
    if V < 1:
        raise ObjectiveError("codebook size must be >= 1")
    if m < V:
        raise ObjectiveError(f"fit_codebook needs at least V={V} patches, got {m}")
    rng = generator(seed, "codebook")
    sq = (x * x).sum(1)
    centroids = np.empty((V, x.shape[1]))
    centroids[0] = x[rng.integers(m)]
    d2 = np.maximum(sq - 2 * x @ centroids[0] + centroids[0] @ centroids[0], 0.0)
    for c in range(1, V):
        total = d2.sum()
        pick = rng.integers(m) if total <= 0 else rng.choice(m, p=d2 / total)
        centroids[c] = x[pick]
        d2 = np.minimum(d2, np.maximum(sq - 2 * x @ centroids[c] + centroids[c] @ centroids[c], 0.0))
    for _ in range(iters):
        dist = sq[:, None] - 2 * x @ centroids.T + (centroids * centroids).sum(1)[None, :]
        assign = dist.argmin(axis=1)
        counts = np.bincount(assign, minlength=V)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
    return TokenizerCodebook(centroids)


def beit_style_loss(patch_logits: Tensor, token_ids) -> LossReport:
    """Cross-entropy of masked-anchor token predictions against codebook ids."""
    logits = patch_logits if isinstance(patch_logits, Tensor) else Tensor(patch_logits)
    ids = np.asarray(token_ids)
    if logits.ndim != 2 or ids.shape != (logits.shape[0],):
        raise ObjectiveError(f"expected (A, V) logits and (A,) ids, got {logits.shape} and {ids.shape}")
    v = logits.shape[1]
    if ids.size == 0:
        raise ObjectiveError("no masked anchors")
    if not np.issubdtype(ids.dtype, np.integer) or ids.min() < 0 or ids.max() >= v:
        raise ObjectiveError(f"token id out of range [0, {v})")
    loss = nx.cross_entropy(logits, ids)
    return _report(loss, logits.data, ids)


def toy_loss_grad_check(seed: int = 0, pool: str = "per_image", n: int = 2, k: int = 4, d: int = 8) -> float:
    """Finite-difference check of the full ConMIM loss w.r.t. query features, 64-bit."""
    rng = generator(seed, "gradcheck")
    query = rng.normal(size=(n, k, d))
    keys = rng.normal(size=(n, k, d))
    masks = np.zeros((n, k), dtype=bool)
    for i in range(n):
        masks[i, rng.choice(k, size=max(1, k // 2), replace=False)] = True
    cfg = LossConfig(negative_pool=pool, filter_threshold=0.5 if pool == "filtered" else 0.8)
    return nx.grad_check(lambda q: conmim_loss(q, keys, masks, cfg).loss, query)
