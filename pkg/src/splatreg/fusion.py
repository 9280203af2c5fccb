"""End-to-end registration: submaps, matching, coarse and fine solves, map fusion."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .coarse import CoarseProblem, RansacConfig, solve_closed_form, solve_ransac
from .errors import ConfigError, SplatRegError
from .fine import FineProblem, compose_source_to_target, solve_fine_limit
from .mapio import read_pose_pairs
from .model import GaussianMap, SimilarityTransform, apply_to_map
from .semantic import MatchConfig, QuerySet, extract_submap, match
from .synth import GeometricMetrics, metrics

logger = logging.getLogger(__name__)

DEDUP_COSINE = 0.95


@dataclass(frozen=True)
class PipelineConfig:
    match: MatchConfig = field(default_factory=MatchConfig)
    ransac: RansacConfig | None = field(default_factory=RansacConfig)
    fine_pose_pairs: tuple[str, str] | None = None
    skip_fine: bool = False
    dedup_radius: float = 0.0

    def __post_init__(self):
        if not self.skip_fine and self.fine_pose_pairs is None:
            raise ConfigError("fine registration requested but fine_pose_pairs is not set")
        if self.fine_pose_pairs is not None and len(self.fine_pose_pairs) != 2:
            raise ConfigError("fine_pose_pairs must name two files (frame A to source, frame A to target)")
        if self.dedup_radius < 0:
            raise ConfigError("dedup_radius must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> PipelineConfig:
        """Build from a JSON-style dict with the same field names; unknown keys are rejected."""
        try:
            d = dict(d)
            _reject_unknown(d, cls, "config")
            if "match" in d:
                _reject_unknown(d["match"], MatchConfig, "match")
                d["match"] = MatchConfig(**_inf_floats(d["match"]))
            if d.get("ransac") is not None:
                _reject_unknown(d["ransac"], RansacConfig, "ransac")
                d["ransac"] = RansacConfig(**d["ransac"])
            pp = d.get("fine_pose_pairs")
            if pp is not None:
                base = Path(base_dir) if base_dir is not None else Path(".")
                d["fine_pose_pairs"] = tuple(str(base / p) for p in pp)
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid pipeline config: {exc}") from None

    @classmethod
    def load(cls, path) -> PipelineConfig:
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(d, base_dir=path.parent)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["match"]["sampling"] = self.match.sampling.value
        d["match"] = {k: (str(v) if isinstance(v, float) and np.isinf(v) else v) for k, v in d["match"].items()}
        if self.fine_pose_pairs is not None:
            d["fine_pose_pairs"] = list(self.fine_pose_pairs)
        return d

    def with_seed(self, seed: int) -> PipelineConfig:
        ransac = None if self.ransac is None else dataclasses.replace(self.ransac, seed=seed)
        return dataclasses.replace(self, match=dataclasses.replace(self.match, seed=seed), ransac=ransac)


def _reject_unknown(d, cls, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _inf_floats(d: dict) -> dict:
    # JSON has no infinity literal; accept the strings "inf" / "infinity".
    return {k: (float(v) if isinstance(v, str) and v.lower() in ("inf", "infinity") else v) for k, v in d.items()}


@dataclass
class RegistrationReport:
    transform: SimilarityTransform
    coarse_transform: SimilarityTransform | None = None
    fine_transform: SimilarityTransform | None = None
    objective: float | None = None
    inlier_count: int | None = None
    correspondence_count: int | None = None
    submap_sizes: tuple[int, int] | None = None
    metrics: GeometricMetrics | None = None
    inliers: np.ndarray | None = None
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Persisted fields only; timings and the inlier list stay in memory."""
        from .mapio import _transform_dict

        d: dict = {}
        if self.coarse_transform is not None:
            d["coarse_transform"] = _transform_dict(self.coarse_transform)
        if self.fine_transform is not None:
            d["fine_transform"] = _transform_dict(self.fine_transform)
        for key in ("objective", "inlier_count", "correspondence_count"):
            value = getattr(self, key)
            if value is not None:
                d[key] = value
        if self.submap_sizes is not None:
            d["submap_sizes"] = list(self.submap_sizes)
        if self.metrics is not None:
            d["metrics"] = {"RE": self.metrics.rotation_error_deg, "TE": self.metrics.translation_error,
                            "SE": self.metrics.scale_error}
        return d

    @classmethod
    def from_dict(cls, d: dict, transform: SimilarityTransform | None = None) -> RegistrationReport:
        from .mapio import _transform_from

        m = d.get("metrics")
        return cls(
            transform=transform if transform is not None else SimilarityTransform.identity(),
            coarse_transform=_transform_from(d["coarse_transform"]) if "coarse_transform" in d else None,
            fine_transform=_transform_from(d["fine_transform"]) if "fine_transform" in d else None,
            objective=d.get("objective"),
            inlier_count=d.get("inlier_count"),
            correspondence_count=d.get("correspondence_count"),
            submap_sizes=tuple(d["submap_sizes"]) if "submap_sizes" in d else None,
            metrics=GeometricMetrics(m["RE"], m["TE"], m["SE"]) if m is not None else None,
        )


def fuse(source: GaussianMap, target: GaussianMap, T: SimilarityTransform,
         dedup_radius: float = 0.0) -> GaussianMap:
    """Target primitives followed by the source primitives moved by ``T``.

    With ``dedup_radius > 0`` a moved source Gaussian is dropped when some
    target mean lies within the radius and their embeddings have cosine above
    0.95. Maps without semantics are never deduplicated.
    """
    moved = apply_to_map(T, source)
    d = max(source.embedding_dim, target.embedding_dim)
    if source.embedding_dim not in (0, d) or target.embedding_dim not in (0, d):
        raise ValueError("maps carry embeddings of different dimension")

    keep = np.ones(len(moved), dtype=bool)
    if dedup_radius > 0 and len(moved) and len(target) and source.has_semantics and target.has_semantics:
        e_s = moved.embeddings / np.linalg.norm(moved.embeddings, axis=1, keepdims=True)
        e_t = target.embeddings / np.linalg.norm(target.embeddings, axis=1, keepdims=True)
        near = cKDTree(target.means).query_ball_point(moved.means, r=dedup_radius)
        for i, group in enumerate(near):
            if group and np.max(e_t[group] @ e_s[i]) > DEDUP_COSINE:
                keep[i] = False
    moved = moved.subset(np.flatnonzero(keep))

    def padded(m: GaussianMap, n_rest: int) -> tuple[np.ndarray, np.ndarray]:
        emb = m.embeddings if m.embedding_dim == d else np.zeros((len(m), d))
        rest = np.zeros((len(m), n_rest))
        rest[:, : m.sh_rest.shape[1]] = m.sh_rest
        return emb, rest

    n_rest = max(moved.sh_rest.shape[1], target.sh_rest.shape[1])
    if moved.sh_rest.shape[1] != target.sh_rest.shape[1] and len(moved) and len(target):
        logger.warning("colour coefficient blocks differ (%d vs %d); zero-padding the shorter",
                       moved.sh_rest.shape[1], target.sh_rest.shape[1])
    emb_t, rest_t = padded(target, n_rest)
    emb_s, rest_s = padded(moved, n_rest)
    return GaussianMap(
        means=np.vstack([target.means, moved.means]),
        quats=np.vstack([target.quats, moved.quats]),
        scales=np.vstack([target.scales, moved.scales]),
        opacities=np.concatenate([target.opacities, moved.opacities]),
        sh_dc=np.vstack([target.sh_dc, moved.sh_dc]),
        sh_rest=np.vstack([rest_t, rest_s]),
        embeddings=np.vstack([emb_t, emb_s]),
        frame_label=target.frame_label,
    )


class _Stage:
    def __init__(self, name: str, timings: dict):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if isinstance(exc, SplatRegError) and exc.stage is None:
            exc.stage = self.name
        return False


def run_pipeline(source: GaussianMap, target: GaussianMap, queries: QuerySet, cfg: PipelineConfig,
                 ground_truth: SimilarityTransform | None = None,
                 workers: int = 1) -> tuple[GaussianMap, RegistrationReport]:
    """Register ``source`` onto ``target`` and fuse them.

    Errors raised by a stage carry its name in ``exc.stage``.
    """
    timings: dict[str, float] = {}
    with _Stage("extract", timings):
        src_idx = extract_submap(source, queries, cfg.match)
        tgt_idx = extract_submap(target, queries, cfg.match)
    logger.info("submaps: %d source, %d target Gaussians", len(src_idx), len(tgt_idx))

    with _Stage("match", timings):
        corr = match(source, target, src_idx, tgt_idx, cfg.match, workers=workers)
    logger.info("matching: %d correspondences", len(corr))

    with _Stage("coarse", timings):
        problem = CoarseProblem.from_maps(source, target, corr)
        if cfg.ransac is not None:
            res = solve_ransac(problem, cfg.ransac, workers=workers)
            coarse_T, coarse_obj, inliers = res.transform, res.objective, res.inliers
        else:
            coarse_T, coarse_obj = solve_closed_form(problem)
            inliers = np.arange(len(corr))

    fine_T = None
    if not cfg.skip_fine:
        with _Stage("fine", timings):
            pairs_s = read_pose_pairs(cfg.fine_pose_pairs[0])
            pairs_t = read_pose_pairs(cfg.fine_pose_pairs[1])
            T_a_s = solve_fine_limit(FineProblem.from_pairs(pairs_s))
            T_a_t = solve_fine_limit(FineProblem.from_pairs(pairs_t))
            fine_T = compose_source_to_target(T_a_s, T_a_t)
    final_T = fine_T if fine_T is not None else coarse_T

    with _Stage("fuse", timings):
        fused = fuse(source, target, final_T, cfg.dedup_radius)

    for name, sec in timings.items():
        logger.info("stage %s: %.3f s", name, sec)
    report = RegistrationReport(
        transform=final_T,
        coarse_transform=coarse_T,
        fine_transform=fine_T,
        objective=coarse_obj,
        inlier_count=len(inliers),
        correspondence_count=len(corr),
        submap_sizes=(len(src_idx), len(tgt_idx)),
        metrics=metrics(final_T, ground_truth) if ground_truth is not None else None,
        inliers=inliers,
        timings=timings,
    )
    return fused, report
