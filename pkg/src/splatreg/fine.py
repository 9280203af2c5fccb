"""Similarity registration from corresponding camera poses.

Given poses (a_k, Ra_k) in an arbitrary frame A and (b_k, Rb_k) in a map
frame B, the objective is

    F(s, R, t) = 1/2 sum ( |s R a_k + t - b_k|^2 + beta_k |R Ra_k - Rb_k|_F^2 ).

For beta -> 0 the minimiser tends to the closed-form alignment of the camera
origins (:func:`solve_fine_limit`). :func:`solve_fine_iterative` minimises F
for any beta >= 0 and is used to check that limit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

from .errors import DegenerateGeometryError
from .model import Pose, SimilarityTransform, compose, inverse
from .rotations import so3_exp

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

RANK_TOL = 1e-12
# Stand-in for s when the best scale for the current rotation is not positive.
SCALE_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class FineProblem:
    a: Array          # (N, 3) camera origins in frame A
    b: Array          # (N, 3) camera origins in frame B
    Ra: Array         # (N, 3, 3)
    Rb: Array         # (N, 3, 3)
    beta: Array       # (N,) rotation-term weights

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64).reshape(-1, 3)
        n = len(a)
        beta = np.broadcast_to(np.asarray(self.beta, dtype=np.float64), (n,)).copy()
        if np.any(beta < 0):
            raise ValueError("beta must be nonnegative")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64).reshape(n, 3))
        object.__setattr__(self, "Ra", np.asarray(self.Ra, dtype=np.float64).reshape(n, 3, 3))
        object.__setattr__(self, "Rb", np.asarray(self.Rb, dtype=np.float64).reshape(n, 3, 3))
        object.__setattr__(self, "beta", beta)

    @classmethod
    def from_pairs(cls, pairs: list[tuple[Pose, Pose]], beta=0.0) -> FineProblem:
        if not pairs:
            raise DegenerateGeometryError("no pose pairs")
        return cls(
            a=[pa.origin for pa, _ in pairs],
            b=[pb.origin for _, pb in pairs],
            Ra=[pa.rotation_matrix for pa, _ in pairs],
            Rb=[pb.rotation_matrix for _, pb in pairs],
            beta=beta,
        )

    def __len__(self) -> int:
        return len(self.a)

    def with_beta(self, beta) -> FineProblem:
        return FineProblem(self.a, self.b, self.Ra, self.Rb, beta)


class IterativeResult(NamedTuple):
    transform: SimilarityTransform
    objective: float
    iterations: int
    converged: bool
    history: list[float]


def fine_objective(problem: FineProblem, T: SimilarityTransform) -> float:
    R = T.rotation_matrix
    r = T.scale * (problem.a @ R.T) + T.translation - problem.b
    D = np.einsum("ab,nbc->nac", R, problem.Ra) - problem.Rb
    return float(0.5 * (np.sum(r * r) + np.dot(problem.beta, np.einsum("nab,nab->n", D, D))))


def solve_fine_limit(problem: FineProblem) -> SimilarityTransform:
    """Umeyama alignment of the camera origins (the beta -> 0 limit)."""
    if len(problem) < 3:
        raise DegenerateGeometryError("need at least 3 pose pairs")
    mu_a = problem.a.mean(axis=0)
    mu_b = problem.b.mean(axis=0)
    A = (problem.a - mu_a).T     # 3 x N
    B = (problem.b - mu_b).T
    U, sig, Vt = np.linalg.svd(B @ A.T)
    if sig[0] <= 0.0 or sig[1] <= RANK_TOL * sig[0]:
        raise DegenerateGeometryError("camera origins are coincident or collinear")
    theta = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    R = U @ theta @ Vt
    scale = float(np.trace(theta @ np.diag(sig)) / np.trace(A.T @ A))
    if not (np.isfinite(scale) and scale > 0):
        raise DegenerateGeometryError(f"computed scale {scale} is not positive")
    return SimilarityTransform.from_matrix(scale, R, mu_b - scale * R @ mu_a)


def solve_fine_iterative(problem: FineProblem, init: SimilarityTransform | None = None,
                         max_iters: int = 200, tol: float = 1e-15) -> IterativeResult:
    """Block-coordinate descent on the full objective.

    Each sweep sets t in closed form, takes one Riemannian gradient step on R
    (exponential map, Newton-scaled initial length, Armijo halving) and then
    sets s in closed form. Stops once a sweep lowers the objective by less than
    ``tol * (1 + F)``. Starts more than a quarter turn off (where the best s is
    not positive) are first rotated towards the origin alignment.
    """
    if len(problem) == 0:
        raise DegenerateGeometryError("no pose pairs")
    init = init or SimilarityTransform.identity()
    mu_a = problem.a.mean(axis=0)
    mu_b = problem.b.mean(axis=0)
    A = problem.a - mu_a
    B = problem.b - mu_b
    AA = float(np.sum(A * A))
    BA = B.T @ A                                             # sum b_k a_k^T
    G = np.einsum("n,nab,ncb->ac", problem.beta, problem.Rb, problem.Ra)  # sum beta Rb Ra^T

    def F(s: float, R: Array) -> float:
        # Objective with t eliminated, evaluated term by term (no cancellation near 0).
        r = s * (A @ R.T) - B
        D = np.einsum("ab,nbc->nac", R, problem.Ra) - problem.Rb
        return 0.5 * (float(np.sum(r * r)) + float(np.dot(problem.beta, np.einsum("nab,nab->n", D, D))))

    # Scale used to orient rotation steps while the optimal s for the current R
    # is not positive (R more than a quarter turn off). There F is flat in R
    # when beta = 0, so the clamped s alone would stall the descent.
    s_ref = float(np.sqrt(np.sum(B * B) / AA)) if AA > 0.0 else 1.0

    def best_scale(R: Array) -> tuple[float, bool]:
        if AA == 0.0:
            return s, False
        c = float(np.sum(R * BA))
        return (c / AA, False) if c > 0.0 else (SCALE_FLOOR, True)

    s, R = init.scale, init.rotation_matrix
    f_init = fine_objective(problem, init)
    history = [f_init]
    clamped = False
    f = F(s, R)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        f_prev = f
        s_dir = s_ref if clamped else s
        f_dir = F(s_dir, R) if clamped else f
        # Rotation step along the steepest descent axis of F(s_dir, R exp(theta [e]x)).
        N = R.T @ (s_dir * BA + G)
        v = np.array([N[2, 1] - N[1, 2], N[0, 2] - N[2, 0], N[1, 0] - N[0, 1]])
        gnorm = float(np.linalg.norm(v))
        if gnorm > 0.0:
            e = v / gnorm
            curv = float(np.trace(N) - e @ (0.5 * (N + N.T)) @ e)
            step = gnorm / curv if curv > 0 else np.pi / 2
            step = min(step, np.pi)
            for _ in range(31):
                R_new = R @ so3_exp(step * e)
                f_new = F(s_dir, R_new)
                if f_new <= f_dir - 1e-4 * step * gnorm:
                    R = R_new
                    break
                step *= 0.5
        s, clamped = best_scale(R)
        f = F(s, R)
        history.append(f)
        if not clamped and f_prev - f <= tol * (1.0 + abs(f)):
            converged = True
            break

    t = mu_b - s * (R @ mu_a)
    T = SimilarityTransform.from_matrix(s, R, t)
    f_T = fine_objective(problem, T)
    if f_T > f_init:
        # Never hand back something worse than the starting point (rounding at
        # an optimal init, or an iteration budget spent in the recovery phase).
        return IterativeResult(init, f_init, it, converged, history)
    return IterativeResult(T, f_T, it, converged, history)


def compose_source_to_target(T_A_to_Bs: SimilarityTransform, T_A_to_Bt: SimilarityTransform) -> SimilarityTransform:
    """Source-map frame to target-map frame, given both maps' alignments of frame A."""
    return compose(T_A_to_Bt, inverse(T_A_to_Bs))
