"""Gaussian map data types and similarity-transform algebra.

A :class:`GaussianMap` is stored column-wise (one array per attribute) so the
solvers can work on whole maps with numpy; ``map[i]`` gives back a
:class:`GaussianPrimitive` view of a single row. Every type here is an
immutable value: arrays are copied on construction and marked read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .rotations import (
    IDENTITY_QUAT,
    matrix_to_quat,
    quat_canonical,
    quat_conjugate,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
)

Array = NDArray[np.float64]

QUAT_TOL = 1e-9
# Map orientations may come straight from float32 files, whose rounding alone
# leaves |q| off by a few 1e-7. They are kept verbatim (so files round-trip
# bit for bit) and normalised wherever a rotation matrix is built.
MAP_QUAT_TOL = 1e-6


def _frozen(a, dtype=np.float64, shape=None) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    if shape is not None:
        out = out.reshape(shape)
    out.setflags(write=False)
    return out


def _check_unit(q: np.ndarray, what: str, tol: float = QUAT_TOL) -> None:
    if q.size and np.max(np.abs(np.linalg.norm(q, axis=-1) - 1.0)) > tol:
        raise ValueError(f"{what}: quaternion is not unit length")


@dataclass(frozen=True, eq=False)
class GaussianPrimitive:
    mean: Array
    orientation: Array
    scale: Array
    opacity: float
    sh_dc: Array
    sh_rest: Array
    embedding: Array

    def covariance(self) -> Array:
        F = quat_to_matrix(quat_normalize(self.orientation)) * self.scale
        return F @ F.T


@dataclass(frozen=True, eq=False)
class GaussianMap:
    """Ordered collection of Gaussians. Row ``i`` of every array is Gaussian ``i``.

    ``embeddings`` has shape (N, d); ``d == 0`` means no semantics are loaded.
    ``sh_rest`` holds the higher-order colour coefficients as an opaque block.
    """

    means: Array
    quats: Array
    scales: Array
    opacities: Array | None = None
    sh_dc: Array | None = None
    sh_rest: Array | None = None
    embeddings: Array | None = None
    frame_label: str = ""

    def __post_init__(self):
        means = _frozen(self.means).reshape(-1, 3)
        n = len(means)
        set_ = lambda name, value: object.__setattr__(self, name, value)  # noqa: E731
        set_("means", means)
        set_("quats", _frozen(self.quats, shape=(n, 4)))
        set_("scales", _frozen(self.scales, shape=(n, 3)))
        set_("opacities", _frozen(np.ones(n) if self.opacities is None else self.opacities, shape=(n,)))
        set_("sh_dc", _frozen(np.zeros((n, 3)) if self.sh_dc is None else self.sh_dc, shape=(n, 3)))
        rest = np.zeros((n, 0)) if self.sh_rest is None else np.asarray(self.sh_rest, dtype=np.float64)
        if rest.ndim != 2:
            rest = rest.reshape(n, -1) if n else rest.reshape(0, 0)
        if rest.shape[0] != n:
            raise ValueError(f"sh_rest must have {n} rows, got {rest.shape[0]}")
        set_("sh_rest", _frozen(rest))
        emb = np.zeros((n, 0)) if self.embeddings is None else np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != n:
            raise ValueError(f"embeddings must have shape ({n}, d), got {emb.shape}")
        set_("embeddings", _frozen(emb))

        for name in ("means", "quats", "scales", "opacities", "sh_dc", "sh_rest", "embeddings"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")
        _check_unit(self.quats, "GaussianMap", MAP_QUAT_TOL)
        if np.any(self.scales <= 0.0):
            raise ValueError("scales must be strictly positive")
        if np.any((self.opacities < 0.0) | (self.opacities > 1.0)):
            raise ValueError("opacities must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mean=self.means[i],
            orientation=self.quats[i],
            scale=self.scales[i],
            opacity=float(self.opacities[i]),
            sh_dc=self.sh_dc[i],
            sh_rest=self.sh_rest[i],
            embedding=self.embeddings[i],
        )

    @property
    def embedding_dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def has_semantics(self) -> bool:
        return self.embedding_dim > 0

    @classmethod
    def empty(cls, embedding_dim: int = 0, sh_rest_dim: int = 0, frame_label: str = "") -> GaussianMap:
        return cls(
            means=np.zeros((0, 3)),
            quats=np.zeros((0, 4)),
            scales=np.zeros((0, 3)),
            sh_rest=np.zeros((0, sh_rest_dim)),
            embeddings=np.zeros((0, embedding_dim)),
            frame_label=frame_label,
        )

    @classmethod
    def from_primitives(cls, prims, embedding_dim: int | None = None, frame_label: str = "") -> GaussianMap:
        prims = list(prims)
        if not prims:
            return cls.empty(embedding_dim or 0, frame_label=frame_label)
        d = len(prims[0].embedding) if embedding_dim is None else embedding_dim
        if any(len(p.embedding) != d for p in prims):
            raise ValueError(f"all embeddings must have length {d}")
        return cls(
            means=[p.mean for p in prims],
            quats=[p.orientation for p in prims],
            scales=[p.scale for p in prims],
            opacities=[p.opacity for p in prims],
            sh_dc=[p.sh_dc for p in prims],
            sh_rest=np.array([p.sh_rest for p in prims]).reshape(len(prims), -1),
            embeddings=np.array([p.embedding for p in prims]).reshape(len(prims), d),
            frame_label=frame_label,
        )

    def replace(self, **changes) -> GaussianMap:
        fields_ = dict(
            means=self.means, quats=self.quats, scales=self.scales,
            opacities=self.opacities, sh_dc=self.sh_dc, sh_rest=self.sh_rest,
            embeddings=self.embeddings, frame_label=self.frame_label,
        )
        fields_.update(changes)
        return GaussianMap(**fields_)

    def subset(self, indices) -> GaussianMap:
        idx = np.asarray(indices, dtype=np.int64)
        return self.replace(
            means=self.means[idx], quats=self.quats[idx], scales=self.scales[idx],
            opacities=self.opacities[idx], sh_dc=self.sh_dc[idx],
            sh_rest=self.sh_rest[idx], embeddings=self.embeddings[idx],
        )

    def factors(self) -> Array:
        """Covariance factors H @ Lambda, shape (N, 3, 3)."""
        return quat_to_matrix(quat_normalize(self.quats)) * self.scales[:, None, :]

    def covariances(self) -> Array:
        F = self.factors()
        return F @ np.swapaxes(F, -1, -2)


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """x -> scale * R x + translation, with R stored as a unit quaternion (w >= 0)."""

    scale: float = 1.0
    rotation: Array = field(default_factory=lambda: IDENTITY_QUAT.copy())
    translation: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        scale = float(self.scale)
        if not np.isfinite(scale) or scale <= 0.0:
            raise ValueError(f"scale must be finite and positive, got {scale}")
        q = _frozen(quat_canonical(np.asarray(self.rotation, dtype=np.float64)), shape=(4,))
        t = _frozen(self.translation, shape=(3,))
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite rotation or translation")
        _check_unit(q, "SimilarityTransform")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> SimilarityTransform:
        return cls()

    @classmethod
    def from_matrix(cls, scale: float, R, t) -> SimilarityTransform:
        return cls(scale, matrix_to_quat(R), t)

    @property
    def rotation_matrix(self) -> Array:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> Array:
        """4x4 homogeneous matrix [[sR, t], [0, 1]]."""
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation_matrix
        M[:3, 3] = self.translation
        return M

    def __matmul__(self, other: SimilarityTransform) -> SimilarityTransform:
        return compose(self, other)

    def __repr__(self) -> str:
        return (f"SimilarityTransform(scale={self.scale!r}, rotation={self.rotation.tolist()!r}, "
                f"translation={self.translation.tolist()!r})")


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera pose: origin in world coordinates and camera-to-world rotation."""

    origin: Array
    rotation: Array = field(default_factory=lambda: IDENTITY_QUAT.copy())

    def __post_init__(self):
        o = _frozen(self.origin, shape=(3,))
        q = _frozen(self.rotation, shape=(4,))
        _check_unit(q, "Pose")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "rotation", q)

    @property
    def rotation_matrix(self) -> Array:
        return quat_to_matrix(self.rotation)


def apply_to_point(T: SimilarityTransform, p) -> Array:
    return T.scale * (T.rotation_matrix @ np.asarray(p, dtype=np.float64)) + T.translation


def apply_to_points(T: SimilarityTransform, pts) -> Array:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    return T.scale * (pts @ T.rotation_matrix.T) + T.translation


def apply_to_gaussian(T: SimilarityTransform, g: GaussianPrimitive) -> GaussianPrimitive:
    """Move one Gaussian: covariance becomes s^2 R Sigma R^T.

    Higher-order colour coefficients are carried unrotated.
    """
    return GaussianPrimitive(
        mean=apply_to_point(T, g.mean),
        orientation=quat_multiply(T.rotation, g.orientation),
        scale=T.scale * np.asarray(g.scale, dtype=np.float64),
        opacity=g.opacity,
        sh_dc=g.sh_dc,
        sh_rest=g.sh_rest,
        embedding=g.embedding,
    )


def apply_to_map(T: SimilarityTransform, m: GaussianMap, frame_label: str | None = None) -> GaussianMap:
    """Vectorised :func:`apply_to_gaussian` over every row of ``m``."""
    return m.replace(
        means=apply_to_points(T, m.means),
        quats=quat_multiply(T.rotation, m.quats) if len(m) else m.quats,
        scales=T.scale * m.scales,
        frame_label=m.frame_label if frame_label is None else frame_label,
    )


def apply_to_pose(T: SimilarityTransform, pose: Pose) -> Pose:
    return Pose(apply_to_point(T, pose.origin), quat_multiply(T.rotation, pose.rotation))


def compose(A: SimilarityTransform, B: SimilarityTransform) -> SimilarityTransform:
    """Transform equal to applying ``B`` first, then ``A``."""
    return SimilarityTransform(
        A.scale * B.scale,
        quat_multiply(A.rotation, B.rotation),
        A.scale * (A.rotation_matrix @ B.translation) + A.translation,
    )


def inverse(T: SimilarityTransform) -> SimilarityTransform:
    inv_s = 1.0 / T.scale
    return SimilarityTransform(
        inv_s,
        quat_conjugate(T.rotation),
        -inv_s * (T.rotation_matrix.T @ T.translation),
    )
