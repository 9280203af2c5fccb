"""Command-line entry point: ``splatreg <subcommand> ...``.

Subcommands: synth, extract, match, coarse, fine, register, eval. Logs go to
stderr; stdout only carries machine-readable results (JSON or key=value).
Every randomized subcommand requires an explicit ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import mapio
from .coarse import CoarseProblem, RansacConfig, solve_closed_form, solve_ransac
from .errors import ConfigError, ExitCode, SplatRegError
from .fine import (
    FineProblem,
    compose_source_to_target,
    fine_objective,
    solve_fine_iterative,
    solve_fine_limit,
)
from .fusion import PipelineConfig, RegistrationReport, run_pipeline
from .model import SimilarityTransform, apply_to_point, compose, inverse
from .semantic import MatchConfig, QuerySet, Sampling, extract_submap, match
from .synth import (
    PerturbSpec,
    SceneSpec,
    make_scene,
    metrics,
    pair_poses,
    random_similarity,
    sample_poses,
    split_and_transform,
)

logger = logging.getLogger("splatreg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ExitCode.BAD_CONFIG, f"{self.prog}: error: {message}\n")


def _sidecar_for(ply: str, explicit: str | None) -> str | None:
    if explicit:
        return explicit
    guess = Path(ply).with_suffix(".gsem")
    return str(guess) if guess.exists() else None


def _read_map(ply: str, sidecar: str | None):
    return mapio.read_map(ply, _sidecar_for(ply, sidecar))


def _queries(args) -> QuerySet:
    return QuerySet(mapio.read_sidecar(args.queries), mapio.read_sidecar(args.negatives))


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = SceneSpec(
        n_gaussians=args.n_gaussians, n_clusters=args.clusters, cluster_spread=args.spread,
        scene_diameter=args.diameter, embedding_dim=args.dim,
        cluster_embedding_noise=args.embedding_noise, seed=args.seed,
    )
    scene = make_scene(spec)
    rng = np.random.default_rng([args.seed, 1])
    T_gt = random_similarity(rng, scale=args.scale, translation_scale=args.diameter)
    perturb = PerturbSpec(
        mean_noise_sigma=args.noise, rotation_jitter_deg=args.jitter, outlier_fraction=args.outliers,
        drop_fraction=args.drop, seed=args.seed + 1, outlier_min_separation=args.outlier_separation,
    )
    split = split_and_transform(scene.map, args.overlap, T_gt, perturb)

    mapio.write_map(split.source, out / "source.ply", out / "source.gsem")
    mapio.write_map(split.target, out / "target.ply", out / "target.gsem")
    mapio.write_transform(T_gt, None, out / "gt_transform.json")
    mapio.write_correspondences(split.correspondences, out / "correspondences.txt")
    mapio.write_index_list(split.outliers, out / "outliers.txt", header="rows of correspondences.txt that are injected outliers")

    # Query the clusters best represented in the overlap; negatives are generic random directions.
    overlap_ids = np.intersect1d(split.source_ids, split.target_ids)
    counts = np.bincount(scene.labels[overlap_ids], minlength=spec.n_clusters)
    top = np.argsort(-counts, kind="stable")[: args.n_queries]
    mapio.write_sidecar(scene.cluster_embeddings[top], out / "queries.gsem")
    neg = rng.normal(size=(args.n_negatives, spec.embedding_dim))
    mapio.write_sidecar(neg / np.linalg.norm(neg, axis=1, keepdims=True), out / "negatives.gsem")

    # Camera poses in an arbitrary frame A, as an external SfM run would report them,
    # placed around the overlap region.
    T_A_to_target = random_similarity(rng, translation_scale=args.diameter)
    T_A_to_source = compose(inverse(T_gt), T_A_to_target)
    centre_a = apply_to_point(inverse(T_A_to_target), scene.map.means[overlap_ids].mean(axis=0))
    poses_a = sample_poses(rng, args.n_poses, centre_a, args.diameter / (4.0 * T_A_to_target.scale))
    mapio.write_pose_pairs(pair_poses(poses_a, T_A_to_source, rng, args.pose_noise), out / "poses_source.txt")
    mapio.write_pose_pairs(pair_poses(poses_a, T_A_to_target, rng, args.pose_noise), out / "poses_target.txt")

    cfg = {
        "match": {"m_candidates": 8, "radius": "inf", "sampling": "similarity_proportional",
                  "bidirectional": True, "min_relevancy": args.min_relevancy, "inflate_radius": 0.0,
                  "deflate_sigma": 3.0, "seed": args.seed},
        "ransac": {"iterations": 2000, "sample_size": 4, "inlier_threshold": 1e-3 * args.diameter,
                   "min_inliers": 10, "seed": args.seed, "refit_on_inliers": True, "weighted_sampling": True},
        "fine_pose_pairs": ["poses_source.txt", "poses_target.txt"],
        "skip_fine": False,
        "dedup_radius": 0.0,
    }
    (out / "register.json").write_text(json.dumps(cfg, indent=2) + "\n", encoding="utf-8")
    _emit({
        "out_dir": str(out),
        "source_gaussians": len(split.source),
        "target_gaussians": len(split.target),
        "correspondences": len(split.correspondences),
        "injected_outliers": len(split.outliers),
        "scale": T_gt.scale,
    })
    return ExitCode.SUCCESS


# ---------------------------------------------------------------------------
# stage subcommands
# ---------------------------------------------------------------------------

def cmd_extract(args) -> int:
    m = _read_map(args.map, args.sidecar)
    cfg = MatchConfig(min_relevancy=args.min_relevancy, inflate_radius=args.inflate,
                      deflate_sigma=args.deflate)
    idx = extract_submap(m, _queries(args), cfg)
    mapio.write_index_list(idx, args.out, header="submap indices")
    _emit({"selected": len(idx), "total": len(m), "out": args.out})
    return ExitCode.SUCCESS


def cmd_match(args) -> int:
    source = _read_map(args.source, args.source_sidecar)
    target = _read_map(args.target, args.target_sidecar)
    src_idx = mapio.read_index_list(args.source_idx) if args.source_idx else np.arange(len(source))
    tgt_idx = mapio.read_index_list(args.target_idx) if args.target_idx else np.arange(len(target))
    cfg = MatchConfig(m_candidates=args.m, radius=args.radius, sampling=args.sampling,
                      bidirectional=not args.one_way, seed=args.seed)
    corr = match(source, target, src_idx, tgt_idx, cfg, workers=args.threads)
    mapio.write_correspondences(corr, args.out)
    _emit({"correspondences": len(corr), "out": args.out})
    return ExitCode.SUCCESS


def cmd_coarse(args) -> int:
    if args.ransac and args.seed is None:
        raise ConfigError("--ransac requires --seed")
    source = _read_map(args.source, args.source_sidecar)
    target = _read_map(args.target, args.target_sidecar)
    corr = mapio.read_correspondences(args.corr)
    problem = CoarseProblem.from_maps(source, target, corr)
    if args.ransac:
        cfg = RansacConfig(iterations=args.iterations, sample_size=args.sample_size,
                           inlier_threshold=args.threshold, min_inliers=args.min_inliers, seed=args.seed)
        res = solve_ransac(problem, cfg, workers=args.threads)
        T, obj, n_inl = res.transform, res.objective, len(res.inliers)
    else:
        T, obj = solve_closed_form(problem)
        n_inl = len(corr)
    report = RegistrationReport(T, coarse_transform=T, objective=obj, inlier_count=n_inl,
                                correspondence_count=len(corr))
    mapio.write_transform(T, report, args.out)
    _emit({"out": args.out, "objective": obj, "inliers": n_inl, "correspondences": len(corr)})
    return ExitCode.SUCCESS


def cmd_fine(args) -> int:
    transforms = []
    objectives = []
    for path in (args.poses_source, args.poses_target):
        problem = FineProblem.from_pairs(mapio.read_pose_pairs(path), beta=args.beta)
        T = solve_fine_limit(problem)
        if args.iterative:
            res = solve_fine_iterative(problem, T, max_iters=args.max_iters)
            if not res.converged:
                logger.warning("%s: iterative solve stopped after %d iterations", path, res.iterations)
            T = res.transform
        transforms.append(T)
        objectives.append(fine_objective(problem, T))
    T = compose_source_to_target(*transforms)
    report = RegistrationReport(T, fine_transform=T)
    mapio.write_transform(T, report, args.out)
    _emit({"out": args.out, "objective_source": objectives[0], "objective_target": objectives[1]})
    return ExitCode.SUCCESS


def cmd_register(args) -> int:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig(skip_fine=True)
    cfg = cfg.with_seed(args.seed)
    source = _read_map(args.source, args.source_sidecar)
    target = _read_map(args.target, args.target_sidecar)
    gt = mapio.read_transform(args.ground_truth)[0] if args.ground_truth else None
    fused, report = run_pipeline(source, target, _queries(args), cfg, ground_truth=gt, workers=args.threads)
    if args.out_map:
        sidecar = Path(args.out_map).with_suffix(".gsem") if fused.has_semantics else None
        mapio.write_map(fused, args.out_map, sidecar)
    if args.out_transform:
        mapio.write_transform(report.transform, report, args.out_transform)
    summary = report.to_dict()
    summary["transform"] = mapio._transform_dict(report.transform)
    summary["fused_gaussians"] = len(fused)
    _emit(summary)
    return ExitCode.SUCCESS


def cmd_eval(args) -> int:
    est = mapio.read_transform(args.est)[0]
    gt = mapio.read_transform(args.gt)[0]
    m = metrics(est, gt)
    if args.json:
        _emit({"RE": m.rotation_error_deg, "TE": m.translation_error, "SE": m.scale_error})
    else:
        print(f"RE={m.rotation_error_deg:.6g} TE={m.translation_error:.6g} SE={m.scale_error:.6g}")
    return ExitCode.SUCCESS


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _float_or_inf(text: str) -> float:
    value = float(text)
    if math.isnan(value):
        raise argparse.ArgumentTypeError("NaN is not allowed")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="splatreg", description="Semantic registration and fusion of Gaussian-splat maps.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_map(p, name, required=True):
        p.add_argument(f"--{name}", required=required, help=f"{name} map PLY")
        p.add_argument(f"--{name}-sidecar", help="GSEM embeddings (default: PLY path with .gsem suffix)")

    def add_threads(p):
        p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")

    p = sub.add_parser("synth", help="generate a synthetic two-submap scene with ground truth")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-gaussians", type=int, default=500)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--spread", type=float, default=0.05, help="cluster std as a fraction of the diameter")
    p.add_argument("--diameter", type=float, default=10.0)
    p.add_argument("--dim", type=int, default=256, help="embedding dimension")
    p.add_argument("--embedding-noise", type=float, default=3.0)
    p.add_argument("--overlap", type=float, default=0.3)
    p.add_argument("--scale", type=float, default=None, help="ground-truth scale (default: random)")
    p.add_argument("--noise", type=float, default=0.0, help="mean noise sigma, scene units")
    p.add_argument("--jitter", type=float, default=0.0, help="orientation noise, degrees")
    p.add_argument("--outliers", type=float, default=0.0, help="fraction of rewired correspondences")
    p.add_argument("--outlier-separation", type=float, default=0.0)
    p.add_argument("--drop", type=float, default=0.0)
    p.add_argument("--n-poses", type=int, default=20)
    p.add_argument("--pose-noise", type=float, default=0.0)
    p.add_argument("--n-queries", type=int, default=2)
    p.add_argument("--n-negatives", type=int, default=4)
    p.add_argument("--min-relevancy", type=float, default=0.55, help="written into register.json")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="select the query-relevant submap of one map")
    p.add_argument("--map", required=True)
    p.add_argument("--sidecar")
    p.add_argument("--queries", required=True)
    p.add_argument("--negatives", required=True)
    p.add_argument("--min-relevancy", type=float, default=0.5)
    p.add_argument("--inflate", type=float, default=0.0)
    p.add_argument("--deflate", type=_float_or_inf, default=math.inf)
    p.add_argument("--out", required=True, help="index list output")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("match", help="sample semantic correspondences between two maps")
    add_map(p, "source")
    add_map(p, "target")
    p.add_argument("--source-idx", help="index list restricting the source")
    p.add_argument("--target-idx", help="index list restricting the target")
    p.add_argument("-M", "--m", type=int, default=8, help="candidates per Gaussian")
    p.add_argument("--radius", type=_float_or_inf, default=math.inf)
    p.add_argument("--sampling", choices=[s.value for s in Sampling], default=Sampling.SIMILARITY_PROPORTIONAL.value)
    p.add_argument("--one-way", action="store_true", help="skip the target-to-source pass")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    add_threads(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("coarse", help="closed-form (optionally RANSAC) coarse registration")
    add_map(p, "source")
    add_map(p, "target")
    p.add_argument("--corr", required=True, help="correspondence file")
    p.add_argument("--ransac", action="store_true")
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--sample-size", type=int, default=4)
    p.add_argument("--min-inliers", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    add_threads(p)
    p.set_defaults(func=cmd_coarse)

    p = sub.add_parser("fine", help="source-to-target transform from two pose-pair files")
    p.add_argument("--poses-source", required=True, help="frame A <-> source poses")
    p.add_argument("--poses-target", required=True, help="frame A <-> target poses")
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--iterative", action="store_true", help="minimise the full objective for --beta")
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fine)

    p = sub.add_parser("register", help="full pipeline: extract, match, coarse, fine, fuse")
    add_map(p, "source")
    add_map(p, "target")
    p.add_argument("--queries", required=True, help="GSEM file of positive query embeddings")
    p.add_argument("--negatives", required=True, help="GSEM file of generic/null query embeddings")
    p.add_argument("--config", help="JSON pipeline config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--ground-truth", help="transform file; adds RE/TE/SE to the report")
    p.add_argument("--out-map")
    p.add_argument("--out-transform")
    add_threads(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="compare an estimated transform with ground truth")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args))
    except SplatRegError as exc:
        where = f" [{exc.stage}]" if exc.stage else ""
        print(f"splatreg{where}: {exc}", file=sys.stderr)
        return int(exc.exit_code)
    except OSError as exc:
        print(f"splatreg: {exc}", file=sys.stderr)
        return int(ExitCode.IO_ERROR)
    except ValueError as exc:
        print(f"splatreg: {exc}", file=sys.stderr)
        return int(ExitCode.BAD_CONFIG)
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"splatreg: internal error: {exc}", file=sys.stderr)
        return int(ExitCode.INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
