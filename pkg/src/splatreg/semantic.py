"""Semantic relevancy scoring, submap extraction and correspondence matching."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .errors import EmptyCorrespondenceError, EmptySubmapError, NoSemanticsError
from .model import GaussianMap

logger = logging.getLogger(__name__)

# Domain tags keep the per-source RNG streams of matching apart from RANSAC's.
_MATCH_STREAM = 0x4D41


@dataclass(frozen=True, eq=False)
class QuerySet:
    """Positive query embeddings and the generic/null ("negative") embeddings."""

    positive: NDArray[np.float64]
    negatives: NDArray[np.float64]

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positive, dtype=np.float64))
        neg = np.atleast_2d(np.asarray(self.negatives, dtype=np.float64))
        if pos.shape[0] == 0 or neg.shape[0] == 0:
            raise ValueError("need at least one positive and one negative query")
        if pos.shape[1] != neg.shape[1]:
            raise ValueError("positive and negative queries differ in dimension")
        if np.any(np.linalg.norm(pos, axis=1) == 0) or np.any(np.linalg.norm(neg, axis=1) == 0):
            raise ValueError("query embeddings must have nonzero norm")
        object.__setattr__(self, "positive", pos)
        object.__setattr__(self, "negatives", neg)

    @property
    def dim(self) -> int:
        return self.positive.shape[1]


class Sampling(str, Enum):
    UNIFORM = "uniform"
    SIMILARITY_PROPORTIONAL = "similarity_proportional"


@dataclass(frozen=True)
class MatchConfig:
    m_candidates: int = 8
    radius: float = math.inf
    sampling: Sampling = Sampling.SIMILARITY_PROPORTIONAL
    bidirectional: bool = True
    min_relevancy: float = 0.5
    inflate_radius: float = 0.0
    deflate_sigma: float = math.inf
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sampling", Sampling(self.sampling))
        if self.m_candidates < 1:
            raise ValueError("m_candidates must be >= 1")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not 0.0 <= self.min_relevancy <= 1.0:
            raise ValueError("min_relevancy must lie in [0, 1]")
        if self.inflate_radius < 0 or self.deflate_sigma < 0:
            raise ValueError("inflate_radius and deflate_sigma must be nonnegative")


class CorrespondenceSet:
    """Weighted (source index, target index) pairs without duplicates.

    Stored as three parallel arrays; row ``k`` is pair ``k``.
    """

    def __init__(self, source, target, weight):
        self.source = np.asarray(source, dtype=np.int64).reshape(-1)
        self.target = np.asarray(target, dtype=np.int64).reshape(-1)
        self.weight = np.asarray(weight, dtype=np.float64).reshape(-1)
        if not (len(self.source) == len(self.target) == len(self.weight)):
            raise ValueError("source, target and weight must have equal length")
        if np.any((self.weight < 0.0) | (self.weight > 1.0)) or not np.all(np.isfinite(self.weight)):
            raise ValueError("weights must lie in [0, 1]")
        if np.any(self.source < 0) or np.any(self.target < 0):
            raise ValueError("indices must be nonnegative")
        keys = np.stack([self.source, self.target], axis=1)
        if len(np.unique(keys, axis=0)) != len(keys):
            raise ValueError("duplicate (source, target) pair")
        for a in (self.source, self.target, self.weight):
            a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.source)

    def __iter__(self):
        return zip(self.source.tolist(), self.target.tolist(), self.weight.tolist())

    def subset(self, rows) -> CorrespondenceSet:
        rows = np.asarray(rows, dtype=np.int64)
        return CorrespondenceSet(self.source[rows], self.target[rows], self.weight[rows])

    def with_weights(self, weight) -> CorrespondenceSet:
        return CorrespondenceSet(self.source, self.target, weight)

    def check_bounds(self, n_source: int, n_target: int) -> None:
        if len(self) and (self.source.max() >= n_source or self.target.max() >= n_target):
            raise IndexError("correspondence index out of range for its map")

    def equals(self, other: CorrespondenceSet) -> bool:
        return (np.array_equal(self.source, other.source) and np.array_equal(self.target, other.target)
                and np.array_equal(self.weight, other.weight))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm embedding")
    return x / n


def relevancy_scores(embeddings, queries: QuerySet) -> NDArray[np.float64]:
    """Relevancy of every row of ``embeddings`` against ``queries``.

    For a positive query q and negative n the pairwise softmax is
    exp(cos(e, q)) / (exp(cos(e, q)) + exp(cos(e, n))). Each Gaussian keeps the
    worst case over negatives and the best case over positives.
    """
    e = _unit_rows(np.atleast_2d(np.asarray(embeddings, dtype=np.float64)))
    if e.shape[1] != queries.dim:
        raise ValueError(f"embedding dim {e.shape[1]} != query dim {queries.dim}")
    cos_pos = e @ _unit_rows(queries.positive).T     # (N, P)
    cos_neg = e @ _unit_rows(queries.negatives).T    # (N, K)
    diff = cos_neg[:, None, :] - cos_pos[:, :, None]  # (N, P, K)
    pairwise = 1.0 / (1.0 + np.exp(diff))
    return pairwise.min(axis=2).max(axis=1)


def relevancy(embedding, queries: QuerySet) -> float:
    return float(relevancy_scores(np.asarray(embedding)[None, :], queries)[0])


def extract_submap(m: GaussianMap, queries: QuerySet, cfg: MatchConfig) -> NDArray[np.int64]:
    """Indices of Gaussians relevant to ``queries``, after inflate/deflate clean-up.

    Inflate adds every Gaussian within ``inflate_radius`` of a selected mean
    (0 disables). Deflate drops Gaussians whose nearest selected neighbour is
    farther than median + deflate_sigma * std of those distances (inf disables).
    """
    if not m.has_semantics:
        raise NoSemanticsError("map has no semantic embeddings loaded")
    scores = relevancy_scores(m.embeddings, queries)
    selected = np.flatnonzero(scores >= cfg.min_relevancy)
    if len(selected) == 0:
        raise EmptySubmapError(f"no Gaussian reaches relevancy {cfg.min_relevancy}")

    if cfg.inflate_radius > 0:
        tree = cKDTree(m.means)
        near = tree.query_ball_point(m.means[selected], r=cfg.inflate_radius)
        extra = np.fromiter((j for group in near for j in group), dtype=np.int64)
        selected = np.union1d(selected, extra)

    if math.isfinite(cfg.deflate_sigma) and len(selected) > 2:
        pts = m.means[selected]
        nn = cKDTree(pts).query(pts, k=2)[0][:, 1]
        cutoff = np.median(nn) + cfg.deflate_sigma * np.std(nn)
        selected = selected[nn <= cutoff]

    if len(selected) == 0:
        raise EmptySubmapError("submap is empty after post-processing")
    return selected


def _candidates(tree: cKDTree, n_target: int, point, radius: float) -> np.ndarray:
    if math.isinf(radius):
        return np.arange(n_target, dtype=np.int64)
    return np.asarray(sorted(tree.query_ball_point(point, r=radius)), dtype=np.int64)


def _match_one_direction(from_map, to_map, from_idx, to_idx, cfg: MatchConfig, direction: int, workers: int):
    to_idx = np.asarray(to_idx, dtype=np.int64)
    tree = cKDTree(to_map.means[to_idx])
    e_from = _unit_rows(from_map.embeddings)
    e_to = _unit_rows(to_map.embeddings[to_idx])

    def one(i: int):
        local = _candidates(tree, len(to_idx), from_map.means[i], cfg.radius)
        if len(local) == 0:
            return []
        w = np.clip(e_to[local] @ e_from[i], 0.0, 1.0)
        rng = np.random.default_rng([cfg.seed, _MATCH_STREAM, direction, int(i)])
        if cfg.sampling is Sampling.SIMILARITY_PROPORTIONAL and np.any(w > 0):
            pos = np.flatnonzero(w > 0)
            k = min(cfg.m_candidates, len(pos))
            pick = rng.choice(pos, size=k, replace=False, p=w[pos] / w[pos].sum())
        else:
            k = min(cfg.m_candidates, len(local))
            pick = rng.choice(len(local), size=k, replace=False)
        return [(int(i), int(to_idx[local[p]]), float(w[p])) for p in pick]

    from_idx = [int(i) for i in from_idx]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, from_idx))
    else:
        results = [one(i) for i in from_idx]
    return [pair for group in results for pair in group]


def match(source: GaussianMap, target: GaussianMap, source_idx, target_idx,
          cfg: MatchConfig, workers: int = 1) -> CorrespondenceSet:
    """Sample up to M semantic candidates per source Gaussian within the spatial gate.

    Each source Gaussian draws from its own RNG stream keyed by (seed, index),
    so the result does not depend on ``workers``. Output is sorted by
    (source, target).
    """
    if not (source.has_semantics and target.has_semantics):
        raise NoSemanticsError("both maps need semantic embeddings")
    if source.embedding_dim != target.embedding_dim:
        raise ValueError("source and target embedding dimensions differ")
    if len(source_idx) == 0 or len(target_idx) == 0:
        raise EmptySubmapError("matching needs nonempty index lists")

    pairs: dict[tuple[int, int], float] = {}
    for i, j, w in _match_one_direction(source, target, source_idx, target_idx, cfg, 0, workers):
        pairs[(i, j)] = w
    if cfg.bidirectional:
        for j, i, w in _match_one_direction(target, source, target_idx, source_idx, cfg, 1, workers):
            pairs.setdefault((i, j), w)
    if not pairs:
        raise EmptyCorrespondenceError(f"no target candidates within gate radius {cfg.radius}")
    keys = sorted(pairs)
    return CorrespondenceSet([k[0] for k in keys], [k[1] for k in keys], [pairs[k] for k in keys])
