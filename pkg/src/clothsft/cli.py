"""Command-line surface tying scene generation, fitting and evaluation together.

Subcommands: ``gen-scene``, ``texture-map``, ``reconstruct``, ``evaluate``,
``ablate``.  Successful runs print a one-line JSON summary to stdout; failures
print a one-line JSON error record to stderr and exit with a code identifying
the failure class:

    0  success
    2  usage error (unknown flags, malformed values)
    3  missing file or directory
    4  schema or configuration violation
    5  runtime failure (solver, optimization, rendering, metrics)

If the environment variable ``CLOTHSFT_OUTPUT_ROOT`` is set, relative output
paths are created under it; input paths are taken as given.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import GradientError
from .estimators import (ABLATION_CONFIGS, EstimatorError, SfTReconstructor,
                         TextureMapper, ablate, evaluate_reconstruction)
from .geometry import MeshError
from .losses import LossWeights
from .metrics import MetricError
from .optim import Schedule
from .physics import SolverConfig, SolverError
from .render import RenderError
from .scene import (Scene, SceneConfig, SceneError, gen_scene, load_ground_truth,
                    load_image, load_scene, save_image, write_toml)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_SCHEMA = 4
EXIT_RUNTIME = 5

METRIC_COLUMNS = ("frame", "chamfer_l1", "chamfer_l2", "p2s_l1", "p2s_l2",
                  "depth_error")


def _error_record(kind: str, message: str, code: int) -> None:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}),
          file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors as JSON records (exit 2)."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        _error_record("usage", message, EXIT_USAGE)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# Argument value parsers
# ---------------------------------------------------------------------------


def _grid(text: str) -> tuple[int, int]:
    try:
        r, c = text.lower().split("x")
        return int(r), int(c)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROWSxCOLS, got '{text}'")


def _vec3(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z, got '{text}'")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"non-numeric component in '{text}'")


def _named_float(text: str) -> tuple[str, float]:
    name, sep, value = text.partition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got '{text}'")
    try:
        return name, float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"non-numeric value in '{text}'")


def _param_override(text: str) -> tuple[str, dict]:
    """NAME,key=value[,key=value...] with keys from the parameter spec."""
    name, *fields = text.split(",")
    if not name or not fields:
        raise argparse.ArgumentTypeError(
            f"expected NAME,key=value[,...], got '{text}'")
    out = {}
    for f in fields:
        key, sep, value = f.partition("=")
        if not sep or key not in ("initial", "lr", "lower", "upper"):
            raise argparse.ArgumentTypeError(
                f"bad spec field '{f}' (use initial/lr/lower/upper)")
        try:
            out[key] = float(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"non-numeric value in '{f}'")
    return name, out


def _out_path(text: str) -> Path:
    root = os.environ.get("CLOTHSFT_OUTPUT_ROOT")
    p = Path(text)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


# ---------------------------------------------------------------------------
# Shared flag groups
# ---------------------------------------------------------------------------


def _add_weight_flags(p: argparse.ArgumentParser) -> None:
    w = LossWeights()
    p.add_argument("--texture-weight", type=float, default=w.texture_weight,
                   help="texture smoothness weight for phase 1")
    p.add_argument("--silhouette-weight", type=float, default=w.silhouette_weight)
    p.add_argument("--energy-weight", type=float, default=w.energy_weight)
    p.add_argument("--force-weight", type=float, default=w.force_weight)
    p.add_argument("--no-silhouette", action="store_true",
                   help="drop the silhouette term (silhouette weight 0)")
    p.add_argument("--no-reg-energy", action="store_true",
                   help="drop the deformation-energy regularizer")
    p.add_argument("--no-reg-force", action="store_true",
                   help="drop the force-direction regularizer")


def _add_schedule_flags(p: argparse.ArgumentParser) -> None:
    s = Schedule()
    p.add_argument("--initial-frames", type=int, default=s.initial_frames)
    p.add_argument("--frames-added-every", type=int, default=s.frames_added_every)
    p.add_argument("--epochs-after-last-frame", type=int,
                   default=s.epochs_after_last_frame)
    p.add_argument("--texture-phase-epochs", type=int, default=s.texture_phase_epochs)


def _add_param_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=_named_float, action="append", default=[],
                   metavar="NAME=VALUE",
                   help="learning-rate override for one parameter group")
    p.add_argument("--param", type=_param_override, action="append", default=[],
                   metavar="NAME,KEY=VALUE[,...]",
                   help="override initial/lr/lower/upper of one parameter group")


def _weights_from_args(args) -> LossWeights:
    return LossWeights(
        texture_weight=args.texture_weight,
        silhouette_weight=0.0 if args.no_silhouette else args.silhouette_weight,
        energy_weight=0.0 if args.no_reg_energy else args.energy_weight,
        force_weight=0.0 if args.no_reg_force else args.force_weight)


def _schedule_from_args(args) -> Schedule:
    return Schedule(initial_frames=args.initial_frames,
                    frames_added_every=args.frames_added_every,
                    epochs_after_last_frame=args.epochs_after_last_frame,
                    texture_phase_epochs=args.texture_phase_epochs)


def _load_texture_file(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"texture file {path} not found")
    if path.suffix == ".npy":
        return np.load(path)
    if path.suffix == ".png":
        return load_image(path)
    raise SceneError(f"unsupported texture format '{path.suffix}' (use .npy or .png)")


def _fit_texture(scene: Scene, args, out_dir: Path | None) -> np.ndarray:
    """Phase 1: recover the texture from the template frame, or load one."""
    if getattr(args, "texture", None):
        return _load_texture_file(args.texture)
    size = args.texture_size
    problem = scene.to_problem(np.full((size, size, 3), 0.5))
    mapper = TextureMapper(texture_size=size,
                           epochs=args.texture_phase_epochs,
                           lr=args.texture_lr,
                           smoothness_weight=args.texture_weight,
                           verbose=args.verbose)
    mapper.fit(problem)
    if out_dir is not None:
        _write_history_csv(out_dir / "texture_history.csv", mapper.history_)
    return mapper.texture_


def _write_history_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _prepare_out_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_scene(args) -> int:
    rows, cols = args.mesh
    width, height = args.resolution
    config = SceneConfig(
        rows=rows, cols=cols, spacing=args.spacing, density=args.density,
        pinning=args.pinning, frames=args.frames, frame_dt=args.frame_dt,
        width=width, height=height, texture_size=args.texture_size,
        wind=args.wind, wind_amplitude=args.wind_amplitude,
        wind_jitter=args.wind_jitter, constant_accel=args.constant_accel,
        stretch=args.stretch, bend=args.bend, shear=args.shear,
        camera_distance=args.camera_distance, cloud_points=args.cloud_points,
        seed=args.seed)
    out = gen_scene(config, args.out_dir)
    print(json.dumps({"scene_dir": str(out), "n_frames": config.frames + 1,
                      "wind": config.wind, "seed": config.seed}))
    return EXIT_OK


def cmd_texture_map(args) -> int:
    scene = load_scene(args.scene_dir)
    out = _prepare_out_dir(args.out_dir)
    size = args.texture_size
    problem = scene.to_problem(np.full((size, size, 3), 0.5))
    mapper = TextureMapper(texture_size=size, epochs=args.epochs, lr=args.lr,
                           smoothness_weight=args.texture_weight,
                           verbose=args.verbose)
    mapper.fit(problem)
    np.save(out / "texture.npy", mapper.texture_)
    save_image(out / "texture.png", mapper.texture_)
    _write_history_csv(out / "texture_history.csv", mapper.history_)
    final = mapper.history_[-1]["total"]
    print(json.dumps({"out_dir": str(out), "epochs": mapper.n_epochs_,
                      "final_loss": final}))
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    started = time.time()
    scene = load_scene(args.scene_dir)
    out = _prepare_out_dir(args.out_dir)
    texture = _fit_texture(scene, args, out)

    weights = _weights_from_args(args)
    schedule = _schedule_from_args(args)
    problem = scene.to_problem(texture, weights=weights,
                               solver=SolverConfig(method=args.solver))
    est = SfTReconstructor(
        weights=weights, schedule=schedule,
        learning_rates=dict(args.lr) or None,
        param_overrides={k: v for k, v in args.param} or None,
        checkpoint_every=args.checkpoint_every,
        checkpoint_dir=str(out / "checkpoints") if args.checkpoint_every else None,
        log_path=str(out / "log.csv"), verbose=args.verbose)
    if args.checkpoint_every:
        (out / "checkpoints").mkdir(exist_ok=True)
    est.fit(problem)

    np.save(out / "texture.npy", texture)
    save_image(out / "texture.png", texture)
    np.save(out / "trajectory.npy", est.trajectory_)
    np.save(out / "dynamic_accel.npy", est.params_["dynamic_forces"])
    final_loss = float(est.history_[-1]["total"])
    write_toml(out / "params.toml", {
        "schema": 1,
        "stiffness": {"stretch": est.stiffness_.stretch,
                      "bend": est.stiffness_.bend,
                      "shear": est.stiffness_.shear},
        "raw": {name: float(est.params_[name])
                for name in ("log10_stretch", "log10_bend", "log10_shear")},
        "forces": {"constant_accel": [float(v)
                                      for v in est.params_["constant_force"]]},
        "result": {"final_loss": final_loss,
                   "epochs": len(est.history_)},
    })
    summary = {"out_dir": str(out), "final_loss": repr(final_loss),
               "epochs": len(est.history_),
               "stiffness": [est.stiffness_.stretch, est.stiffness_.bend,
                             est.stiffness_.shear],
               "wall_time_s": round(time.time() - started, 3)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    scene = load_scene(args.scene_dir)
    gt = load_ground_truth(args.scene_dir)
    result = Path(args.result_dir)
    traj_path = result / "trajectory.npy"
    if not traj_path.exists():
        raise FileNotFoundError(f"no trajectory at {traj_path}")
    trajectory = np.load(traj_path)
    texture = None
    if (result / "texture.npy").exists():
        texture = np.load(result / "texture.npy")
    rows = evaluate_reconstruction(scene.mesh, scene.camera, trajectory,
                                   gt.clouds, gt.depths[1:], texture)
    out_csv = args.out if args.out else result / "metrics.csv"
    with open(out_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(METRIC_COLUMNS))
        writer.writeheader()
        writer.writerows(rows)
    summary = {k: rows[-1][k] for k in METRIC_COLUMNS[1:]}
    print(json.dumps({"metrics_csv": str(out_csv), **summary}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    scene = load_scene(args.scene_dir)
    gt = load_ground_truth(args.scene_dir)
    out = _prepare_out_dir(args.out_dir)
    configs = args.configs.split(",") if args.configs else None
    texture = _fit_texture(scene, args, out)
    problem = scene.to_problem(texture, solver=SolverConfig(method=args.solver))
    table = ablate(problem, gt.clouds, gt.depths[1:], configs=configs,
                   schedule=_schedule_from_args(args),
                   learning_rates=dict(args.lr) or None,
                   verbose=args.verbose)
    _write_history_csv(out / "ablation.csv", table)
    (out / "ablation.json").write_text(json.dumps(table, indent=2) + "\n")
    print(json.dumps({"out_dir": str(out),
                      "configs": [row["config"] for row in table],
                      "chamfer_l2": {row["config"]: row["chamfer_l2"]
                                     for row in table}}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser assembly and entry point
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="clothsft",
                     description="Differentiable cloth simulation and "
                                 "shape-from-template reconstruction.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate a synthetic scene directory")
    g.add_argument("out_dir", type=_out_path)
    g.add_argument("--mesh", type=_grid, default=(25, 25), metavar="RxC")
    g.add_argument("--spacing", type=float, default=SceneConfig.spacing)
    g.add_argument("--density", type=float, default=SceneConfig.density)
    g.add_argument("--pinning", choices=("top_row", "top_corners"),
                   default="top_row")
    g.add_argument("--frames", type=int, default=SceneConfig.frames)
    g.add_argument("--frame-dt", type=float, default=SceneConfig.frame_dt)
    g.add_argument("--resolution", type=_grid, default=(256, 256), metavar="WxH")
    g.add_argument("--texture-size", type=int, default=SceneConfig.texture_size)
    g.add_argument("--wind", choices=("none", "lateral", "camera_axis", "crumple"),
                   default=SceneConfig.wind)
    g.add_argument("--wind-amplitude", type=float, default=SceneConfig.wind_amplitude)
    g.add_argument("--wind-jitter", type=float, default=SceneConfig.wind_jitter)
    g.add_argument("--constant-accel", type=_vec3, default=SceneConfig.constant_accel,
                   metavar="X,Y,Z")
    g.add_argument("--stretch", type=float, default=SceneConfig.stretch)
    g.add_argument("--bend", type=float, default=SceneConfig.bend)
    g.add_argument("--shear", type=float, default=SceneConfig.shear)
    g.add_argument("--camera-distance", type=float, default=None)
    g.add_argument("--cloud-points", type=int, default=SceneConfig.cloud_points)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("texture-map", help="phase 1: recover the texture")
    t.add_argument("scene_dir", type=Path)
    t.add_argument("out_dir", type=_out_path)
    t.add_argument("--texture-size", type=int, default=64)
    t.add_argument("--epochs", type=int, default=Schedule().texture_phase_epochs)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--texture-weight", type=float,
                   default=LossWeights().texture_weight)
    t.add_argument("--verbose", action="count", default=0)
    t.set_defaults(func=cmd_texture_map)

    r = sub.add_parser("reconstruct",
                       help="phases 1+2: texture, then stiffness and forces")
    r.add_argument("scene_dir", type=Path)
    r.add_argument("out_dir", type=_out_path)
    r.add_argument("--texture", type=Path, default=None,
                   help="use this texture (.npy/.png) instead of running phase 1")
    r.add_argument("--texture-size", type=int, default=64)
    r.add_argument("--texture-lr", type=float, default=0.05)
    _add_weight_flags(r)
    _add_schedule_flags(r)
    _add_param_flags(r)
    r.add_argument("--solver", choices=("auto", "dense", "pcg"), default="auto")
    r.add_argument("--checkpoint-every", type=int, default=0)
    r.add_argument("--verbose", action="count", default=0)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="compare a result against ground truth")
    e.add_argument("scene_dir", type=Path)
    e.add_argument("result_dir", type=Path)
    e.add_argument("--out", type=_out_path, default=None,
                   help="metrics CSV path (default RESULT_DIR/metrics.csv)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="run the regularizer ablation matrix")
    a.add_argument("scene_dir", type=Path)
    a.add_argument("out_dir", type=_out_path)
    a.add_argument("--configs", default=None,
                   help=f"comma-separated subset of {','.join(ABLATION_CONFIGS)}")
    a.add_argument("--texture", type=Path, default=None)
    a.add_argument("--texture-size", type=int, default=64)
    a.add_argument("--texture-lr", type=float, default=0.05)
    a.add_argument("--texture-weight", type=float,
                   default=LossWeights().texture_weight)
    _add_schedule_flags(a)
    _add_param_flags(a)
    a.add_argument("--solver", choices=("auto", "dense", "pcg"), default="auto")
    a.add_argument("--verbose", action="count", default=0)
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        _error_record(type(exc).__name__, str(exc), EXIT_MISSING)
        return EXIT_MISSING
    except (SceneError, MeshError, ValueError) as exc:
        _error_record(type(exc).__name__, str(exc), EXIT_SCHEMA)
        return EXIT_SCHEMA
    except (EstimatorError, SolverError, RenderError, GradientError,
            MetricError) as exc:
        _error_record(type(exc).__name__, str(exc), EXIT_RUNTIME)
        return EXIT_RUNTIME
    except Exception as exc:  # last resort: report, never traceback-dump
        _error_record(type(exc).__name__, str(exc), EXIT_RUNTIME)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
