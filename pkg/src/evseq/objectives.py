"""Contrastive objectives over sequence and event embeddings.

Two losses and their combination:

* a subsequence-contrastive loss on whole-view embeddings: same-origin view
  pairs are pulled together (squared cosine distance), mined different-origin
  pairs are pushed past a margin;
* a masked-event loss in latent space: the true event embedding at each
  masked position must be closer (by cosine) to its own prediction than to
  predictions at randomly chosen other masked positions, scored as a softmax
  cross-entropy;
* their weighted sum.

Sampling helpers (views, mask plans, negative sets) are pure functions of
their seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import (Tensor, as_tensor, concat, l2_normalize, logsumexp,
                       matmul, relu, reshape, take, transpose, tsum)
from .data import EventSequence, rng_for
from .encoder import MaskPlan

TAG_VIEWS = 301
TAG_MASK = 302
TAG_NEG = 303


class ObjectiveError(ValueError):
    pass


def _rng(seed, tag: int) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return rng_for(int(seed), tag)


# sampling ---------------------------------------------------------------


@dataclass(frozen=True)
class View:
    """One contiguous slice of one batch sequence."""

    origin: int
    start: int
    length: int


def auto_view_range(t: int) -> tuple[int, int]:
    """Default per-sequence view length range: [max(1, T//4), T], both ends
    clipped into [5, 150]."""
    lo = min(max(max(1, t // 4), 5), 150)
    hi = min(max(t, 5), 150)
    return lo, hi


def sample_views(sequences: Sequence[EventSequence], n_views: int,
                 len_range: Optional[tuple[int, int]] = None,
                 seed=0) -> list[View]:
    """n_views slices per sequence, length uniform in [L_lo, min(L_hi, T)],
    start uniform over admissible offsets.

    ``len_range=None`` picks a per-sequence range via auto_view_range. A
    sequence shorter than L_lo degenerates to whole-sequence views.
    """
    if n_views < 2:
        raise ObjectiveError("n_views must be >= 2 (a view needs a positive pair)")
    if len_range is not None and len_range[0] < 1:
        raise ObjectiveError("view length lower bound must be >= 1")
    rng = _rng(seed, TAG_VIEWS)
    out = []
    for b, seq in enumerate(sequences):
        t = len(seq)
        lo, hi = auto_view_range(t) if len_range is None else len_range
        hi = min(hi, t)
        for _ in range(n_views):
            if t < lo:
                out.append(View(origin=b, start=0, length=t))
                continue
            length = int(rng.integers(lo, hi + 1))
            start = int(rng.integers(0, t - length + 1))
            out.append(View(origin=b, start=start, length=length))
    return out


def view_slices(sequences: Sequence[EventSequence],
                views: Sequence[View]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Materialize (mcc, amount) array pairs for each view."""
    mccs, amounts = [], []
    for v in views:
        seq = sequences[v.origin]
        sl = slice(v.start, v.start + v.length)
        mccs.append(seq.mcc[sl])
        amounts.append(seq.amount[sl])
    return mccs, amounts


def sample_mask(lengths: Sequence[int], rate: float, seed=0) -> MaskPlan:
    """Independent Bernoulli(rate) per valid position; a sequence that draws
    nothing gets one uniformly random forced position."""
    if not (0.0 < rate < 1.0):
        raise ObjectiveError(f"mask rate must be in (0, 1), got {rate}")
    rng = _rng(seed, TAG_MASK)
    plan = []
    for t in lengths:
        hits = np.flatnonzero(rng.random(t) < rate)
        if hits.size == 0:
            hits = np.array([rng.integers(0, t)], dtype=np.int64)
        plan.append(hits.astype(np.int64))
    return MaskPlan(positions=plan)


def sample_negatives(pool_size: int, n_neg: int, self_index: int, seed=0) -> np.ndarray:
    """n_neg distinct pool indices excluding self_index (all available when
    the pool is too small)."""
    if pool_size < 2:
        raise ObjectiveError("negative pool must have at least 2 entries")
    rng = _rng(seed, TAG_NEG)
    n = min(n_neg, pool_size - 1)
    draw = rng.choice(pool_size - 1, size=n, replace=False)
    return draw + (draw >= self_index)


def sample_negative_sets(pool_size: int, n_neg: int, seed=0) -> list[np.ndarray]:
    """One negative index set per pool entry, drawn from a single stream."""
    rng = _rng(seed, TAG_NEG)
    return [sample_negatives(pool_size, n_neg, i, rng) for i in range(pool_size)]


# cosine geometry ---------------------------------------------------------


def cosine_similarity(u, v) -> Tensor:
    """u.v / (|u||v|), norms clamped at 1e-12; row-wise on 2-D inputs."""
    un, vn = l2_normalize(as_tensor(u)), l2_normalize(as_tensor(v))
    return tsum(un * vn, axis=-1)


def cosine_distance(u, v) -> Tensor:
    return 1.0 - cosine_similarity(u, v)


def pairwise_cosine_distances(z: np.ndarray) -> np.ndarray:
    """Plain numpy M x M distance matrix (mining and test oracles)."""
    norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    zn = z / norms
    return np.clip(1.0 - zn @ zn.T, 0.0, 2.0)


# subsequence-contrastive loss -------------------------------------------


@dataclass
class ViewBatch:
    embeddings: Tensor      # (M, H)
    origins: np.ndarray     # (M,)


def coles_pairs(z: np.ndarray, origins: np.ndarray,
                n_hard: Optional[int]) -> tuple[np.ndarray, np.ndarray]:
    """Positive pairs (all same-origin) and mined negative pairs.

    For each view, the n_hard closest different-origin views are taken (ties
    broken by index); the union is deduplicated as unordered pairs.
    ``n_hard=None`` keeps every cross-origin pair. Returns two (P, 2) arrays
    of row indices, each sorted lexicographically.
    """
    origins = np.asarray(origins)
    m = len(origins)
    d = pairwise_cosine_distances(z)
    same = origins[:, None] == origins[None, :]
    iu, ju = np.triu_indices(m, k=1)
    keep = same[iu, ju]
    pos = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)
    if n_hard is None:
        rows, cols = iu[~keep], ju[~keep]
    else:
        blocked = np.where(same, np.inf, d)
        idx = np.argsort(blocked, axis=1, kind="stable")[:, :n_hard]
        rows = np.repeat(np.arange(m), idx.shape[1])
        cols = idx.reshape(-1)
        ok = ~np.isinf(blocked[rows, cols])
        rows, cols = rows[ok], cols[ok]
    lo = np.minimum(rows, cols)
    hi = np.maximum(rows, cols)
    enc = np.unique(lo * m + hi)
    neg = np.stack([enc // m, enc % m], axis=1).astype(np.int64)
    return pos, neg


def _pair_distances(zn: Tensor, pairs: np.ndarray) -> Tensor:
    da = take(zn, pairs[:, 0])
    db = take(zn, pairs[:, 1])
    return 1.0 - tsum(da * db, axis=1)


def coles_loss(views: ViewBatch, rho: float = 0.5,
               n_hard: Optional[int] = 5) -> Tensor:
    """Mean over contributing pairs of d^2 (positives) and max(0, rho - d)^2
    (mined negatives).

    A pair contributes when its term is nonzero: positives with d above the
    1e-12 identity threshold (coincident views would otherwise flicker in and
    out of the count by one rounding ulp), negatives with d inside the
    margin. With no contributing pairs the loss is 0.
    """
    if rho <= 0:
        raise ObjectiveError(f"margin rho must be > 0, got {rho}")
    origins = np.asarray(views.origins)
    if np.unique(origins).size < 2:
        raise ObjectiveError("view batch has a single origin: no negative pairs exist")
    pos, neg = coles_pairs(views.embeddings.data, origins, n_hard)
    zn = l2_normalize(views.embeddings)
    total = as_tensor(0.0)
    count = 0
    if len(pos):
        d = _pair_distances(zn, pos)
        keep = (d.data > 1e-12).astype(np.float64)
        total = total + tsum(d * d * keep)
        count += int(keep.sum())
    if len(neg):
        h = relu(rho - _pair_distances(zn, neg))
        keep = (h.data > 1e-12).astype(np.float64)
        total = total + tsum(h * h * keep)
        count += int(keep.sum())
    if count == 0:
        return as_tensor(0.0)
    return total / float(count)


# masked-event loss -------------------------------------------------------


@dataclass
class MaskedBatch:
    targets: Tensor                # (m, d) true event embeddings
    predictions: Tensor            # (m, d) predicted event embeddings
    negatives: list[np.ndarray]    # per position, indices into the pool


def cmlm_loss(mb: MaskedBatch) -> Tensor:
    """Softmax cross-entropy of each target against its own prediction versus
    predictions at its negative positions, -mean_i log p_i(own).

    Similarities are cosine; gradients flow through targets and predictions
    alike; the log-sum-exp is computed in stabilized form.
    """
    m = mb.targets.shape[0]
    if m == 0:
        raise ObjectiveError("empty mask set: nothing to score")
    if len(mb.negatives) != m:
        raise ObjectiveError(f"{len(mb.negatives)} negative sets for {m} positions")
    sizes = {len(j) for j in mb.negatives}
    if 0 in sizes:
        raise ObjectiveError("empty negative set")
    tn = l2_normalize(mb.targets)
    pn = l2_normalize(mb.predictions)
    sims = matmul(tn, transpose(pn))            # sims[i, j] = sim(r_i, rhat_j)
    ar = np.arange(m)
    own = take(sims, (ar, ar))
    if len(sizes) == 1:
        n = sizes.pop()
        rows = np.repeat(ar, n)
        cols = np.concatenate([np.asarray(j, dtype=np.int64) for j in mb.negatives])
        if np.any(cols == rows):
            raise ObjectiveError("negative set contains the position itself")
        negs = reshape(take(sims, (rows, cols)), (m, n))
        logits = concat([reshape(own, (m, 1)), negs], axis=1)
        return tsum(logsumexp(logits, axis=1) - own) / float(m)
    # ragged negative sets: score positions one at a time
    total = as_tensor(0.0)
    for i, j in enumerate(mb.negatives):
        j = np.asarray(j, dtype=np.int64)
        if np.any(j == i):
            raise ObjectiveError("negative set contains the position itself")
        row = take(sims, (np.full(1 + len(j), i), np.concatenate([[i], j])))
        total = total + logsumexp(row, axis=0) - take(own, np.array([i]))
    return tsum(total) / float(m)


def hybrid_loss(coles, cmlm, lam: float) -> Tensor:
    """coles + lam * cmlm."""
    if lam < 0:
        raise ObjectiveError(f"lambda must be >= 0, got {lam}")
    return as_tensor(coles) + float(lam) * as_tensor(cmlm)
