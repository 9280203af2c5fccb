"""Semantic, initialization-free registration and fusion of Gaussian-splat maps."""

from .coarse import CoarseProblem, RansacConfig, objective, solve_closed_form, solve_ransac
from .errors import ExitCode, SplatRegError
from .fine import (
    FineProblem,
    compose_source_to_target,
    fine_objective,
    solve_fine_iterative,
    solve_fine_limit,
)
from .fusion import PipelineConfig, RegistrationReport, fuse, run_pipeline
from .model import (
    GaussianMap,
    GaussianPrimitive,
    Pose,
    SimilarityTransform,
    apply_to_gaussian,
    apply_to_map,
    apply_to_point,
    apply_to_points,
    apply_to_pose,
    compose,
    inverse,
)
from .semantic import CorrespondenceSet, MatchConfig, QuerySet, extract_submap, match, relevancy
from .synth import GeometricMetrics, PerturbSpec, SceneSpec, generate_scene, metrics, split_and_transform

__version__ = "0.1.0"
