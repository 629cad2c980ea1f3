"""Retrieval evaluation: distance ranking, CMC, mAP and mINP.

The fast path is vectorised numpy; `brute_force_metrics` recomputes the
same quantities with plain Python loops and shares no code with it, so the
two can be checked against each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError


@dataclass
class RankingResult:
    """Per-query gallery orderings by ascending distance.

    `order[q]` lists unmasked gallery indices for query q, closest first;
    `relevant[q]` flags, aligned with `order[q]`, whether the gallery item
    shares the query identity. Ties in distance are broken by ascending
    gallery index.
    """

    order: list[np.ndarray]
    relevant: list[np.ndarray]
    num_gallery: int

    @property
    def num_query(self) -> int:
        return len(self.order)


def _as_matrix(x) -> np.ndarray:
    vec = getattr(x, "vectors", x)
    if hasattr(vec, "detach"):
        vec = vec.detach().cpu().numpy()
    return np.asarray(vec, dtype=np.float64)


def _as_labels(x, n: int) -> np.ndarray:
    lab = getattr(x, "labels", None)
    if lab is None:
        raise DataError("ranking requires labelled embeddings")
    if hasattr(lab, "detach"):
        lab = lab.detach().cpu().numpy()
    lab = np.asarray(lab, dtype=np.int64)
    if lab.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {lab.shape}")
    return lab


def rank(query, gallery, exclusion: np.ndarray | None = None) -> RankingResult:
    """Sort the gallery by Euclidean distance for every query.

    `exclusion` is an optional boolean (num_query, num_gallery) mask; True
    entries are dropped from that query's ranking (e.g. same-camera
    filtering). Every query identity must survive in the unmasked gallery.
    """
    q = _as_matrix(query)
    g = _as_matrix(gallery)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise DataError(f"query/gallery dimension mismatch: {q.shape} vs {g.shape}")
    q_labels = _as_labels(query, q.shape[0])
    g_labels = _as_labels(gallery, g.shape[0])
    nq, ng = q.shape[0], g.shape[0]
    if exclusion is not None:
        exclusion = np.asarray(exclusion, dtype=bool)
        if exclusion.shape != (nq, ng):
            raise DataError(f"exclusion mask must be ({nq}, {ng}), got {exclusion.shape}")

    d2 = np.sum(q**2, axis=1)[:, None] + np.sum(g**2, axis=1)[None, :] - 2.0 * q @ g.T
    dist = np.sqrt(np.maximum(d2, 0.0))

    offenders = []
    order: list[np.ndarray] = []
    relevant: list[np.ndarray] = []
    for i in range(nq):
        keep = np.ones(ng, dtype=bool) if exclusion is None else ~exclusion[i]
        kept_idx = np.nonzero(keep)[0]
        rel_mask = g_labels[kept_idx] == q_labels[i]
        if not rel_mask.any():
            offenders.append(i)
            continue
        # Stable sort on distance keeps ascending gallery index on ties.
        perm = np.argsort(dist[i, kept_idx], kind="stable")
        order.append(kept_idx[perm])
        relevant.append(rel_mask[perm])
    if offenders:
        raise DataError(
            "queries with no relevant unmasked gallery item: "
            + ", ".join(str(i) for i in offenders)
        )
    return RankingResult(order=order, relevant=relevant, num_gallery=ng)


def cmc(r: RankingResult, k: int) -> float:
    """Fraction of queries with at least one relevant item in the top k."""
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    hits = sum(1 for rel in r.relevant if rel[:k].any())
    return hits / r.num_query


def mean_ap(r: RankingResult) -> float:
    """Mean over queries of average precision at the relevant ranks."""
    aps = []
    for rel in r.relevant:
        ranks = np.nonzero(rel)[0] + 1
        precisions = np.cumsum(rel)[ranks - 1] / ranks
        aps.append(precisions.mean())
    return float(np.mean(aps))


def mean_inp(r: RankingResult) -> float:
    """Mean inverse negative penalty: |relevant| / rank of the hardest match."""
    inps = []
    for rel in r.relevant:
        ranks = np.nonzero(rel)[0] + 1
        inps.append(len(ranks) / ranks[-1])
    return float(np.mean(inps))


def cmc_curve(r: RankingResult) -> np.ndarray:
    """CMC at every k from 1 to the gallery size."""
    curve = np.zeros(r.num_gallery, dtype=np.float64)
    for rel in r.relevant:
        first = int(np.nonzero(rel)[0][0])
        curve[first:] += 1.0
    return curve / r.num_query


def summarize(r: RankingResult) -> dict:
    """The standard metrics payload written by the eval CLI."""
    curve = cmc_curve(r)

    def at(k: int) -> float:
        return float(curve[min(k, r.num_gallery) - 1])

    return {
        "rank1": at(1),
        "rank5": at(5),
        "rank10": at(10),
        "rank20": at(20),
        "mAP": mean_ap(r),
        "mINP": mean_inp(r),
        "num_query": r.num_query,
        "num_gallery": r.num_gallery,
    }


def brute_force_metrics(query, gallery, exclusion: np.ndarray | None = None):
    """Recompute (cmc curve, mAP, mINP) by exhaustive enumeration.

    Test oracle only: plain Python loops, no shared code with the fast
    path above.
    """
    q = _as_matrix(query)
    g = _as_matrix(gallery)
    q_labels = _as_labels(query, q.shape[0])
    g_labels = _as_labels(gallery, g.shape[0])
    nq, ng = q.shape[0], g.shape[0]

    curve_hits = [0] * ng
    ap_values = []
    inp_values = []
    for i in range(nq):
        scored = []
        for j in range(ng):
            if exclusion is not None and exclusion[i][j]:
                continue
            d = math.sqrt(sum((q[i][t] - g[j][t]) ** 2 for t in range(q.shape[1])))
            scored.append((d, j))
        scored.sort()  # tuple order: distance first, gallery index second
        flags = [1 if g_labels[j] == q_labels[i] else 0 for _, j in scored]
        if sum(flags) == 0:
            raise DataError(f"query {i} has no relevant unmasked gallery item")

        first_hit = flags.index(1)
        for k in range(first_hit, ng):
            curve_hits[k] += 1

        seen = 0
        precisions = []
        for pos, f in enumerate(flags, start=1):
            if f:
                seen += 1
                precisions.append(seen / pos)
        ap_values.append(sum(precisions) / len(precisions))

        last_hit = max(pos for pos, f in enumerate(flags, start=1) if f)
        inp_values.append(sum(flags) / last_hit)

    curve = np.array([h / nq for h in curve_hits], dtype=np.float64)
    return curve, sum(ap_values) / nq, sum(inp_values) / nq


def permutation_baseline(
    r: RankingResult, n_shuffles: int = 1000, seed: int = 0
) -> tuple[float, float]:
    """Mean and stddev of mAP when every query's ranking is shuffled."""
    rng = np.random.default_rng(seed)
    samples = np.empty(n_shuffles, dtype=np.float64)
    for s in range(n_shuffles):
        aps = []
        for rel in r.relevant:
            shuffled = rng.permutation(rel)
            ranks = np.nonzero(shuffled)[0] + 1
            aps.append(float(np.mean(np.cumsum(shuffled)[ranks - 1] / ranks)))
        samples[s] = np.mean(aps)
    return float(samples.mean()), float(samples.std())
