"""Synthetic Gaussian scenes with known transforms, plus RE/TE/SE metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .model import (
    GaussianMap,
    Pose,
    SimilarityTransform,
    apply_to_map,
    apply_to_pose,
    compose,
    inverse,
)
from .rotations import quat_multiply, quat_normalize, quat_to_matrix, random_quat, rotation_angle
from .semantic import CorrespondenceSet


@dataclass(frozen=True)
class SceneSpec:
    n_gaussians: int = 500
    n_clusters: int = 8
    cluster_spread: float = 0.05
    scene_diameter: float = 10.0
    embedding_dim: int = 64
    cluster_embedding_noise: float = 0.0
    seed: int = 0
    sh_rest_dim: int = 9

    def __post_init__(self):
        if self.n_gaussians < 1:
            raise ValueError("n_gaussians must be positive")
        if not 1 <= self.n_clusters <= self.n_gaussians:
            raise ValueError("need 1 <= n_clusters <= n_gaussians")
        if self.cluster_spread <= 0 or self.scene_diameter <= 0 or self.embedding_dim < 1:
            raise ValueError("cluster_spread, scene_diameter and embedding_dim must be positive")
        if self.cluster_embedding_noise < 0:
            raise ValueError("cluster_embedding_noise must be nonnegative")


@dataclass(frozen=True)
class PerturbSpec:
    """Source-side corruption.

    ``mean_noise_sigma`` is in scene (target-frame) units. Injected outlier
    correspondences point at a random target Gaussian at least
    ``outlier_min_separation`` away from the true partner.
    """

    mean_noise_sigma: float = 0.0
    rotation_jitter_deg: float = 0.0
    outlier_fraction: float = 0.0
    drop_fraction: float = 0.0
    seed: int = 0
    outlier_min_separation: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction < 1.0 or not 0.0 <= self.drop_fraction < 1.0:
            raise ValueError("fractions must lie in [0, 1)")
        if self.mean_noise_sigma < 0 or self.rotation_jitter_deg < 0 or self.outlier_min_separation < 0:
            raise ValueError("noise levels must be nonnegative")


class GeometricMetrics(NamedTuple):
    rotation_error_deg: float
    translation_error: float
    scale_error: float


class Scene(NamedTuple):
    map: GaussianMap
    labels: np.ndarray           # cluster id per Gaussian
    cluster_embeddings: np.ndarray
    cluster_centers: np.ndarray


@dataclass(frozen=True, eq=False)
class Split:
    source: GaussianMap
    target: GaussianMap
    T_gt: SimilarityTransform
    source_ids: np.ndarray        # row in the original scene for each source Gaussian
    target_ids: np.ndarray
    correspondences: CorrespondenceSet
    outliers: np.ndarray          # rows of ``correspondences`` that were injected


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def make_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    radius = spec.scene_diameter / 2.0
    k, n, d = spec.n_clusters, spec.n_gaussians, spec.embedding_dim

    centers = _unit(rng.normal(size=(k, 3))) * (radius * rng.random((k, 1)) ** (1.0 / 3.0))
    labels = rng.permutation(np.arange(n) % k)
    means = centers[labels] + rng.normal(scale=spec.cluster_spread * spec.scene_diameter, size=(n, 3))

    base = _unit(rng.normal(size=(k, d)))
    emb = base[labels]
    if spec.cluster_embedding_noise > 0:
        emb = _unit(emb + spec.cluster_embedding_noise * _unit(rng.normal(size=(n, d))))

    m = GaussianMap(
        means=means,
        quats=random_quat(rng, n),
        scales=spec.scene_diameter * np.exp(rng.uniform(np.log(0.01), np.log(0.1), size=(n, 3))),
        opacities=rng.uniform(0.05, 0.95, size=n),
        sh_dc=rng.normal(scale=0.5, size=(n, 3)),
        sh_rest=rng.normal(scale=0.05, size=(n, spec.sh_rest_dim)),
        embeddings=emb,
        frame_label="scene",
    )
    return Scene(m, labels, base, centers)


def generate_scene(spec: SceneSpec) -> GaussianMap:
    return make_scene(spec).map


def random_similarity(rng: np.random.Generator, scale: float | None = None,
                      translation_scale: float = 1.0) -> SimilarityTransform:
    s = float(np.exp(rng.uniform(np.log(0.5), np.log(2.0)))) if scale is None else scale
    return SimilarityTransform(s, random_quat(rng), rng.normal(scale=translation_scale, size=3))


def split_and_transform(m: GaussianMap, overlap_fraction: float, T_gt: SimilarityTransform,
                        perturb: PerturbSpec = PerturbSpec()) -> Split:
    """Cut a scene into overlapping target/source halves along a random plane.

    The overlap band holds ``overlap_fraction`` of the Gaussians and lands in
    both halves. The source half is perturbed and expressed in the frame
    ``inverse(T_gt)``, so ``T_gt`` maps source coordinates onto the target.
    """
    if len(m) == 0:
        raise ValueError("cannot split an empty map")
    if not 0.0 < overlap_fraction <= 1.0:
        raise ValueError("overlap_fraction must lie in (0, 1]")
    rng = np.random.default_rng(perturb.seed)
    n = len(m)
    normal = _unit(rng.normal(size=3))
    order = np.argsort(m.means @ normal, kind="stable")
    n_over = int(round(overlap_fraction * n))
    if n_over == 0:
        raise ValueError(f"overlap band is empty for {n} Gaussians at fraction {overlap_fraction}")
    lo = (n - n_over) // 2
    target_ids = np.sort(order[: lo + n_over])
    source_ids = np.sort(order[lo:])

    n_drop = int(round(perturb.drop_fraction * len(source_ids)))
    if n_drop:
        dropped = rng.choice(len(source_ids), size=n_drop, replace=False)
        source_ids = np.delete(source_ids, dropped)

    src = m.subset(source_ids)
    if perturb.mean_noise_sigma > 0:
        src = src.replace(means=src.means + rng.normal(scale=perturb.mean_noise_sigma, size=src.means.shape))
    if perturb.rotation_jitter_deg > 0:
        axes = _unit(rng.normal(size=(len(src), 3)))
        ang = np.deg2rad(perturb.rotation_jitter_deg) * rng.normal(size=(len(src), 1))
        jitter = np.concatenate([np.cos(ang / 2), np.sin(ang / 2) * axes], axis=1)
        src = src.replace(quats=quat_normalize(quat_multiply(jitter, src.quats)))
    source = apply_to_map(inverse(T_gt), src, frame_label="source")
    target = m.subset(target_ids).replace(frame_label="target")

    # Ground-truth pairs are the overlap Gaussians that survived dropping.
    pos_in_target = {int(g): r for r, g in enumerate(target_ids)}
    src_rows = np.array([r for r, g in enumerate(source_ids) if int(g) in pos_in_target], dtype=np.int64)
    tgt_rows = np.array([pos_in_target[int(source_ids[r])] for r in src_rows], dtype=np.int64)

    outliers = np.zeros(0, dtype=np.int64)
    n_out = int(round(perturb.outlier_fraction * len(src_rows)))
    if n_out:
        outliers = np.sort(rng.choice(len(src_rows), size=n_out, replace=False))
        for r in outliers:
            true_q = target.means[tgt_rows[r]]
            far = np.linalg.norm(target.means - true_q, axis=1) > perturb.outlier_min_separation
            far[tgt_rows[r]] = False
            cand = np.flatnonzero(far)
            if len(cand) == 0:
                raise ValueError("no target Gaussian satisfies outlier_min_separation")
            tgt_rows[r] = rng.choice(cand)

    e_s = _unit(source.embeddings[src_rows])
    e_t = _unit(target.embeddings[tgt_rows])
    w = np.clip(np.einsum("ij,ij->i", e_s, e_t), 0.0, 1.0)
    corr = CorrespondenceSet(src_rows, tgt_rows, w)
    return Split(source, target, T_gt, source_ids, target_ids, corr, outliers)


def sample_poses(rng: np.random.Generator, n: int, center, radius: float) -> list[Pose]:
    """Cameras scattered around ``center`` with uniformly random orientations."""
    center = np.asarray(center, dtype=np.float64)
    return [Pose(center + radius * rng.normal(size=3), random_quat(rng)) for _ in range(n)]


def pair_poses(poses: list[Pose], T_A_to_B: SimilarityTransform, rng: np.random.Generator | None = None,
               noise_sigma: float = 0.0) -> list[tuple[Pose, Pose]]:
    """Pair each frame-A pose with its image under ``T_A_to_B`` (origin noise optional)."""
    pairs = []
    for a in poses:
        b = apply_to_pose(T_A_to_B, a)
        if noise_sigma > 0:
            b = Pose(b.origin + rng.normal(scale=noise_sigma, size=3), b.rotation)
        pairs.append((a, b))
    return pairs


def metrics(T_est: SimilarityTransform, T_gt: SimilarityTransform) -> GeometricMetrics:
    """RE: geodesic angle of R_est^T R_gt in degrees; TE: |t_est - t_gt|; SE: |s_est/s_gt - 1|."""
    R_rel = quat_to_matrix(T_est.rotation).T @ quat_to_matrix(T_gt.rotation)
    return GeometricMetrics(
        float(np.degrees(rotation_angle(R_rel))),
        float(np.linalg.norm(T_est.translation - T_gt.translation)),
        abs(T_est.scale / T_gt.scale - 1.0),
    )


def compose_gt(T_gt: SimilarityTransform, T_A_to_Bs: SimilarityTransform) -> SimilarityTransform:
    """Frame-A-to-target transform implied by the source alignment and ``T_gt``."""
    return compose(T_gt, T_A_to_Bs)
