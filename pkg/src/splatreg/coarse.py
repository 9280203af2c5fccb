"""Coarse Gaussian-to-Gaussian similarity registration.

The objective over correspondences (i, j) with weights w_ij is

    J(s, R, t) = 1/2 sum w_ij ( |s R p_i + t - q_j|^2 + |s R Hp_i - Hq_j|_F^2 )

where p, q are Gaussian means and Hp = H_p Lambda_p, Hq = H_q Lambda_q are the
covariance factors (orientation times diagonal scale). It has a closed-form
minimiser: an SVD of the weighted cross-covariance gives R, a ratio of traces
gives s, and the weighted centroids give t.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .errors import (
    DegenerateGeometryError,
    InsufficientCorrespondencesError,
    NoConsensusError,
)
from .model import GaussianMap, SimilarityTransform
from .semantic import CorrespondenceSet

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

_RANSAC_STREAM = 0x5241
# Singular-value ratio below which K is treated as rank deficient.
RANK_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class CoarseProblem:
    """Per-correspondence arrays: means ``p``/``q`` (N, 3), weights ``w`` (N,),
    covariance factors ``hp``/``hq`` (N, 3, 3).

    ``hp``/``hq`` set to ``None`` drops the covariance term, leaving plain
    weighted point-set alignment.
    """

    p: Array
    q: Array
    w: Array
    hp: Array | None = None
    hq: Array | None = None

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64).reshape(-1, 3)
        q = np.asarray(self.q, dtype=np.float64).reshape(-1, 3)
        w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        if not (len(p) == len(q) == len(w)):
            raise ValueError("p, q and w must have the same length")
        if (self.hp is None) != (self.hq is None):
            raise ValueError("hp and hq must both be given or both be None")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "w", w)
        if self.hp is not None:
            object.__setattr__(self, "hp", np.asarray(self.hp, dtype=np.float64).reshape(-1, 3, 3))
            object.__setattr__(self, "hq", np.asarray(self.hq, dtype=np.float64).reshape(-1, 3, 3))
            if not (len(self.hp) == len(self.hq) == len(p)):
                raise ValueError("covariance factors must match the number of pairs")

    @classmethod
    def from_maps(cls, source: GaussianMap, target: GaussianMap, corr: CorrespondenceSet,
                  use_covariance: bool = True) -> CoarseProblem:
        corr.check_bounds(len(source), len(target))
        hp = hq = None
        if use_covariance:
            hp = source.factors()[corr.source]
            hq = target.factors()[corr.target]
        return cls(source.means[corr.source], target.means[corr.target], corr.weight, hp, hq)

    def __len__(self) -> int:
        return len(self.w)

    @property
    def use_covariance(self) -> bool:
        return self.hp is not None

    def subset(self, rows) -> CoarseProblem:
        rows = np.asarray(rows, dtype=np.int64)
        if self.hp is None:
            return CoarseProblem(self.p[rows], self.q[rows], self.w[rows])
        return CoarseProblem(self.p[rows], self.q[rows], self.w[rows], self.hp[rows], self.hq[rows])

    def with_weights(self, w) -> CoarseProblem:
        return CoarseProblem(self.p, self.q, w, self.hp, self.hq)


class CoarseResult(NamedTuple):
    transform: SimilarityTransform
    objective: float


class RansacResult(NamedTuple):
    transform: SimilarityTransform
    inliers: NDArray[np.int64]
    objective: float
    best_round: int
    threshold: float


@dataclass(frozen=True)
class RansacConfig:
    """``inlier_threshold=None`` means 3x the median nearest-neighbour spacing
    of the target Gaussians referenced by the correspondences.

    With ``weighted_sampling`` minimal samples are drawn with probability
    proportional to the semantic weights; zero-weight pairs are never drawn.
    """

    iterations: int = 1000
    sample_size: int = 4
    inlier_threshold: float | None = None
    min_inliers: int = 10
    seed: int = 0
    refit_on_inliers: bool = True
    weighted_sampling: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.sample_size < 3:
            raise ValueError("sample_size must be >= 3")
        if self.min_inliers < self.sample_size:
            raise ValueError("min_inliers must be >= sample_size")
        if self.inlier_threshold is not None and not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")


def objective(problem: CoarseProblem, T: SimilarityTransform) -> float:
    R = T.rotation_matrix
    r = T.scale * (problem.p @ R.T) + T.translation - problem.q
    per_pair = np.einsum("ij,ij->i", r, r)
    if problem.use_covariance:
        D = T.scale * np.einsum("ab,nbc->nac", R, problem.hp) - problem.hq
        per_pair = per_pair + np.einsum("nab,nab->n", D, D)
    return float(0.5 * np.dot(problem.w, per_pair))


def residuals(problem: CoarseProblem, T: SimilarityTransform) -> Array:
    """Mean-term residual |s R p + t - q| per pair, in target units."""
    r = T.scale * (problem.p @ T.rotation_matrix.T) + T.translation - problem.q
    return np.sqrt(np.einsum("ij,ij->i", r, r))


def _solve(p, q, w, hp, hq) -> SimilarityTransform:
    keep = w > 0.0
    if np.count_nonzero(keep) < 3:
        raise DegenerateGeometryError("need at least 3 positively weighted pairs")
    # Dropping zero weights up front makes w=0 bitwise identical to deleting the pair.
    p, q, w = p[keep], q[keep], w[keep]
    total = w.sum()
    mu_p = (w @ p) / total
    mu_q = (w @ q) / total
    pc = p - mu_p
    qc = q - mu_q
    K = (qc * w[:, None]).T @ pc
    denom = float(w @ np.einsum("ij,ij->i", pc, pc))
    if hp is not None:
        hp, hq = hp[keep], hq[keep]
        K = K + np.einsum("n,nab,ncb->ac", w, hq, hp)
        denom += float(w @ np.einsum("nab,nab->n", hp, hp))
    if not np.all(np.isfinite(K)):
        raise DegenerateGeometryError("non-finite cross-covariance")

    U, sig, Vt = np.linalg.svd(K)
    if sig[0] <= 0.0 or sig[1] <= RANK_TOL * sig[0]:
        raise DegenerateGeometryError("cross-covariance has rank < 2; rotation is not determined")
    d = 1.0 if np.linalg.det(U @ Vt) > 0 else -1.0
    theta = np.array([1.0, 1.0, d])
    R = (U * theta) @ Vt
    scale = float(np.dot(theta, sig)) / denom
    if not (np.isfinite(scale) and scale > 0.0):
        raise DegenerateGeometryError(f"computed scale {scale} is not positive")
    t = mu_q - scale * (R @ mu_p)
    return SimilarityTransform.from_matrix(scale, R, t)


def solve_closed_form(problem: CoarseProblem) -> CoarseResult:
    T = _solve(problem.p, problem.q, problem.w, problem.hp, problem.hq)
    return CoarseResult(T, objective(problem, T))


def default_threshold(target_points) -> float:
    pts = np.unique(np.asarray(target_points, dtype=np.float64), axis=0)
    if len(pts) < 2:
        raise InsufficientCorrespondencesError("cannot derive an inlier threshold from < 2 target points")
    nn = cKDTree(pts).query(pts, k=2)[0][:, 1]
    return 3.0 * float(np.median(nn))


def _better(a, b) -> bool:
    """Consensus ordering: more inliers, then smaller residual sum, then earlier round."""
    return (a[0], -a[1], -a[2]) > (b[0], -b[1], -b[2])


def solve_ransac(problem: CoarseProblem, cfg: RansacConfig, workers: int = 1) -> RansacResult:
    n = len(problem)
    if n < cfg.sample_size:
        raise InsufficientCorrespondencesError(f"{n} correspondences, sample size is {cfg.sample_size}")
    thr = cfg.inlier_threshold if cfg.inlier_threshold is not None else default_threshold(problem.q)

    if cfg.weighted_sampling:
        eligible = np.flatnonzero(problem.w > 0)
        probs = problem.w[eligible] / problem.w[eligible].sum() if len(eligible) else None
    else:
        eligible, probs = np.arange(n), None
    if len(eligible) < cfg.sample_size:
        raise InsufficientCorrespondencesError(
            f"{len(eligible)} positively weighted correspondences, sample size is {cfg.sample_size}")

    def run_round(k: int):
        rng = np.random.default_rng([cfg.seed, _RANSAC_STREAM, k])
        rows = rng.choice(eligible, size=cfg.sample_size, replace=False, p=probs)
        sample = problem.subset(rows)
        try:
            T = _solve(sample.p, sample.q, sample.w, sample.hp, sample.hq)
        except DegenerateGeometryError:
            return None
        res = residuals(problem, T)
        inl = res < thr
        return (int(inl.sum()), float(res[inl].sum()), k)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(run_round, range(cfg.iterations)))
    else:
        scores = [run_round(k) for k in range(cfg.iterations)]

    best = None
    for s in scores:
        if s is not None and (best is None or _better(s, best)):
            best = s
    best_count = 0 if best is None else best[0]
    if best is None or best_count < cfg.min_inliers:
        raise NoConsensusError(best_count, cfg.min_inliers)

    # Replay the winning round; it is a pure function of (seed, round).
    k = best[2]
    rng = np.random.default_rng([cfg.seed, _RANSAC_STREAM, k])
    sample = problem.subset(rng.choice(eligible, size=cfg.sample_size, replace=False, p=probs))
    T = _solve(sample.p, sample.q, sample.w, sample.hp, sample.hq)
    inliers = np.flatnonzero(residuals(problem, T) < thr)
    if cfg.refit_on_inliers:
        try:
            T = solve_closed_form(problem.subset(inliers)).transform
        except DegenerateGeometryError:
            logger.warning("refit on %d inliers is degenerate; keeping the sample model", len(inliers))
    logger.info("ransac: %d/%d inliers (round %d, threshold %.4g)", len(inliers), n, k, thr)
    return RansacResult(T, inliers, objective(problem.subset(inliers), T), k, thr)
