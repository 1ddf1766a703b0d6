"""Scikit-learn style estimators for the two optimization phases.

``TextureMapper`` fits a texture to the template frame (phase 1);
``SfTReconstructor`` fits stiffnesses and external forces to the full video
(phase 2). Both follow the usual conventions: constructor stores hyper
parameters untouched, ``fit`` validates and learns, learned state lives in
trailing-underscore attributes.
"""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .autodiff import GradientClipper, GradientError, Tape
from .losses import LossWeights
from .metrics import (METRIC_SAMPLE_SEED, chamfer, depth_error,
                      point_to_surface, sample_surface)
from .optim import (AdamOptimizer, ParamSpec, Schedule, default_sft_specs,
                    default_texture_spec)
from .physics import SolverError, Stiffness, simulate
from .pipeline import SfTProblem, build_sft_loss, build_texture_loss
from .render import rasterize
from .validation import check_problem, check_positive_int, check_texture


class EstimatorError(RuntimeError):
    """Optimization aborted (divergence, solver failure, non-finite loss)."""


def diverged(losses: list[float], patience: int) -> bool:
    """True when the last ``patience`` transitions were all increases."""
    if len(losses) < patience + 1:
        return False
    tail = losses[-(patience + 1):]
    return all(b > a for a, b in zip(tail, tail[1:]))


def _check_fitted(est, attr: str) -> None:
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted; call fit first")


class TextureMapper(BaseEstimator):
    """Phase 1: optimize a texture so the rendered template matches frame 0.

    Parameters mirror the published defaults: 64x64 texture initialized at
    0.5, learning rate 0.05, smoothness weight 1e-4. The fit aborts when the
    loss has increased ``divergence_patience`` epochs in a row.
    """

    def __init__(self, texture_size: int = 64, epochs: int = 400,
                 lr: float = 0.05, smoothness_weight: float = 1e-4,
                 divergence_patience: int = 50, verbose: int = 0):
        self.texture_size = texture_size
        self.epochs = epochs
        self.lr = lr
        self.smoothness_weight = smoothness_weight
        self.divergence_patience = divergence_patience
        self.verbose = verbose

    def fit(self, problem: SfTProblem, y=None) -> "TextureMapper":
        problem = check_problem(problem)
        size = check_positive_int(self.texture_size, "texture_size")
        epochs = check_positive_int(self.epochs, "epochs")
        if self.smoothness_weight < 0:
            raise ValueError("smoothness_weight must be nonnegative")
        spec = default_texture_spec(size, size)
        spec.lr = self.lr
        opt = AdamOptimizer([spec])
        weights = replace(problem.weights, texture_weight=self.smoothness_weight)
        problem = replace(problem, weights=weights)

        self.history_ = []
        for epoch in range(epochs):
            tape = Tape()
            tex_var = tape.leaf(opt.params["texture"].copy(), "texture")
            try:
                loss_var, terms = build_texture_loss(tape, tex_var, problem)
                if not np.isfinite(terms["total"]):
                    raise EstimatorError(
                        f"texture phase: non-finite loss at epoch {epoch}")
                grads = tape.backward(loss_var)
            except GradientError as exc:
                raise EstimatorError(
                    f"texture phase: gradient failure at epoch {epoch}: {exc}") from exc
            opt.step(grads)
            self.history_.append({"epoch": epoch, **terms})
            losses = [row["total"] for row in self.history_]
            if diverged(losses, self.divergence_patience):
                raise EstimatorError(
                    f"texture phase diverging: loss increased "
                    f"{self.divergence_patience} consecutive epochs "
                    f"(epoch {epoch}, loss {losses[-1]:.6g})")
            if self.verbose and epoch % 50 == 0:
                print(f"[texture] epoch {epoch} loss {terms['total']:.6g}")
        self.texture_ = opt.params["texture"].copy()
        self.n_epochs_ = epochs
        return self

    def predict(self, problem: SfTProblem) -> np.ndarray:
        """Render the template frame with the fitted texture."""
        _check_fitted(self, "texture_")
        problem = check_problem(problem)
        out = rasterize(problem.mesh.rest_positions, problem.mesh.triangles,
                        problem.mesh.uvs, self.texture_, problem.camera,
                        keep_record=False)
        return out.rgb


class SfTReconstructor(BaseEstimator):
    """Phase 2: recover stiffnesses and external forces from rendered frames.

    Each epoch simulates the active frames from the template, renders them,
    backpropagates the weighted loss, clips gradients (fixed norm first, then
    the running-percentile auto clip) and applies one adaptive-moment update
    per parameter group. Frames activate progressively per the schedule.
    """

    def __init__(self, weights: LossWeights | None = None,
                 schedule: Schedule | None = None,
                 learning_rates: dict | None = None,
                 param_overrides: dict | None = None,
                 clip_norm: float = 1000.0, auto_clip_percentile: float = 10.0,
                 checkpoint_every: int = 0, checkpoint_dir: str | None = None,
                 log_path: str | None = None, verbose: int = 0):
        self.weights = weights
        self.schedule = schedule
        self.learning_rates = learning_rates
        self.param_overrides = param_overrides
        self.clip_norm = clip_norm
        self.auto_clip_percentile = auto_clip_percentile
        self.checkpoint_every = checkpoint_every
        self.checkpoint_dir = checkpoint_dir
        self.log_path = log_path
        self.verbose = verbose

    def _specs(self, n_dynamic: int, n_vertices: int) -> list[ParamSpec]:
        specs = default_sft_specs(n_dynamic, n_vertices)
        by_name = {s.name: s for s in specs}
        lrs = self.learning_rates or {}
        unknown = set(lrs) - set(by_name)
        if unknown:
            raise ValueError(f"learning_rates for unknown groups: {sorted(unknown)}")
        for name, lr in lrs.items():
            by_name[name].lr = float(lr)
        overrides = self.param_overrides or {}
        unknown = set(overrides) - set(by_name)
        if unknown:
            raise ValueError(f"param_overrides for unknown groups: {sorted(unknown)}")
        for name, fields in overrides.items():
            spec = by_name[name]
            bad = set(fields) - {"initial", "lr", "lower", "upper"}
            if bad:
                raise ValueError(f"{name}: unknown spec fields {sorted(bad)}")
            if "initial" in fields:
                init = np.asarray(fields["initial"], dtype=float)
                spec.initial = (np.full_like(spec.initial, float(init))
                                if init.ndim == 0 else init)
            for key in ("lr", "lower", "upper"):
                if key in fields:
                    setattr(spec, key, float(fields[key]))
            spec.validate()
        return specs

    def fit(self, problem: SfTProblem, y=None) -> "SfTReconstructor":
        problem = check_problem(problem)
        check_texture(problem.texture)
        weights = self.weights if self.weights is not None else LossWeights()
        weights.validate()
        problem = replace(problem, weights=weights)
        sched = self.schedule if self.schedule is not None else Schedule()
        sched.validate()
        n_dyn = problem.n_dynamic
        opt = AdamOptimizer(self._specs(n_dyn, problem.mesh.n_vertices))
        clipper = GradientClipper(max_norm=self.clip_norm,
                                  percentile=self.auto_clip_percentile)
        total = sched.total_epochs(n_dyn)

        self.history_ = []
        log_writer = None
        log_file = None
        if self.log_path:
            log_file = open(self.log_path, "w", newline="")
        try:
            for epoch in range(total):
                active = sched.active_frames(epoch, n_dyn)
                tape = Tape()
                leaves = {name: tape.leaf(value.copy(), name)
                          for name, value in opt.params.items()}
                try:
                    loss_var, terms, _ = build_sft_loss(tape, leaves, problem,
                                                        active)
                    if not np.isfinite(terms["total"]):
                        raise EstimatorError(
                            f"non-finite loss at epoch {epoch} "
                            f"({active} active frames)")
                    grads = tape.backward(loss_var)
                except SolverError as exc:
                    raise EstimatorError(
                        f"implicit solve failed at epoch {epoch} "
                        f"({active} active frames): {exc}") from exc
                except GradientError as exc:
                    raise EstimatorError(
                        f"gradient failure at epoch {epoch} "
                        f"({active} active frames): {exc}") from exc
                grads = clipper.clip(grads)
                opt.step(grads)

                row = {"epoch": epoch, "active_frames": active, **terms}
                row["grad_norm_dynamic_forces"] = float(
                    np.linalg.norm(grads["dynamic_forces"].ravel()))
                for name in ("log10_stretch", "log10_bend", "log10_shear"):
                    row[name] = float(opt.params[name])
                self.history_.append(row)
                if log_file is not None:
                    if log_writer is None:
                        log_writer = csv.DictWriter(log_file,
                                                    fieldnames=list(row))
                        log_writer.writeheader()
                    log_writer.writerow(row)
                if self.verbose and epoch % 25 == 0:
                    print(f"[sft] epoch {epoch} active {active} "
                          f"loss {terms['total']:.6g}")
                if self.checkpoint_every and self.checkpoint_dir \
                        and (epoch + 1) % self.checkpoint_every == 0:
                    self._save_checkpoint(opt, epoch)
        finally:
            if log_file is not None:
                log_file.close()

        self.params_ = {k: v.copy() for k, v in opt.params.items()}
        self.stiffness_ = Stiffness(10.0 ** float(opt.params["log10_stretch"]),
                                    10.0 ** float(opt.params["log10_bend"]),
                                    10.0 ** float(opt.params["log10_shear"]))
        self.trajectory_ = self._simulate(problem, self.params_)
        self.problem_ = problem
        return self

    def _save_checkpoint(self, opt: AdamOptimizer, epoch: int) -> None:
        out = Path(self.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        state = opt.state_dict()
        flat = {"t": np.array(state["t"])}
        for section in ("params", "m", "v"):
            for name, value in state[section].items():
                flat[f"{section}/{name}"] = value
        np.savez(out / f"checkpoint_{epoch + 1:05d}.npz", **flat)

    @staticmethod
    def _simulate(problem: SfTProblem, params: dict) -> np.ndarray:
        stiff = Stiffness(10.0 ** float(params["log10_stretch"]),
                          10.0 ** float(params["log10_bend"]),
                          10.0 ** float(params["log10_shear"]))
        forces = problem.mesh.masses[:, None] * (params["constant_force"]
                                                 + params["dynamic_forces"])
        return simulate(problem.mesh, problem.rest, stiff, problem.params,
                        forces, solver=problem.solver)

    def predict(self, problem: SfTProblem | None = None) -> np.ndarray:
        """Trajectory (n_frames + 1, N, 3) under the fitted parameters."""
        _check_fitted(self, "params_")
        if problem is None:
            return self.trajectory_.copy()
        return self._simulate(check_problem(problem), self.params_)


# ---------------------------------------------------------------------------
# Evaluation and ablation orchestration

def evaluate_reconstruction(mesh, camera, trajectory: np.ndarray,
                            gt_points, gt_depths: np.ndarray,
                            texture: np.ndarray | None = None) -> list[dict]:
    """Per-frame metric rows for a reconstructed trajectory vs ground truth.

    ``gt_points`` holds one point cloud per dynamic frame; ``gt_depths`` the
    matching depth maps. Row 0 of ``trajectory`` (the template) is skipped.
    Returns per-frame rows followed by a summary row of means.
    """
    n_dyn = len(gt_points)
    if trajectory.shape[0] != n_dyn + 1:
        raise ValueError(f"trajectory has {trajectory.shape[0]} frames, "
                         f"expected {n_dyn + 1}")
    tex = texture if texture is not None else np.full((4, 4, 3), 0.5)
    rows = []
    for n in range(1, n_dyn + 1):
        cloud = np.asarray(gt_points[n - 1], dtype=float)
        positions = trajectory[n]
        samples = sample_surface(positions, mesh.triangles, len(cloud),
                                 seed=METRIC_SAMPLE_SEED + n)
        out = rasterize(positions, mesh.triangles, mesh.uvs, tex, camera,
                        keep_record=False)
        rows.append({
            "frame": n,
            "chamfer_l1": chamfer(samples, cloud, power=1),
            "chamfer_l2": chamfer(samples, cloud, power=2),
            "p2s_l1": point_to_surface(cloud, positions, mesh.triangles,
                                       power=1, seed=METRIC_SAMPLE_SEED + n),
            "p2s_l2": point_to_surface(cloud, positions, mesh.triangles,
                                       power=2, seed=METRIC_SAMPLE_SEED + n),
            "depth_error": depth_error(gt_depths[n - 1], out.depth),
        })
    summary = {"frame": "mean"}
    for key in ("chamfer_l1", "chamfer_l2", "p2s_l1", "p2s_l2", "depth_error"):
        summary[key] = float(np.mean([r[key] for r in rows]))
    rows.append(summary)
    return rows


ABLATION_CONFIGS = {
    "full": {},
    "no-sil": {"silhouette_weight": 0.0},
    "no-reg-force": {"force_weight": 0.0},
    "no-reg-energy": {"energy_weight": 0.0},
    "no-both": {"energy_weight": 0.0, "force_weight": 0.0},
}


def ablate(problem: SfTProblem, gt_points, gt_depths: np.ndarray,
           configs: list[str] | None = None,
           **reconstructor_kwargs) -> list[dict]:
    """Run the reconstruction once per ablation config and tabulate metrics.

    Returns one row per config with the scene-mean metrics plus the weights
    used, mirroring the ablation table structure.
    """
    names = configs if configs is not None else list(ABLATION_CONFIGS)
    unknown = set(names) - set(ABLATION_CONFIGS)
    if unknown:
        raise ValueError(f"unknown ablation configs: {sorted(unknown)}")
    table = []
    for name in names:
        weights = replace(LossWeights(), **ABLATION_CONFIGS[name])
        est = SfTReconstructor(weights=weights, **reconstructor_kwargs)
        est.fit(problem)
        rows = evaluate_reconstruction(problem.mesh, problem.camera,
                                       est.trajectory_, gt_points, gt_depths,
                                       problem.texture)
        summary = rows[-1]
        table.append({
            "config": name,
            "silhouette_weight": weights.silhouette_weight,
            "energy_weight": weights.energy_weight,
            "force_weight": weights.force_weight,
            "chamfer_l1": summary["chamfer_l1"],
            "chamfer_l2": summary["chamfer_l2"],
            "p2s_l1": summary["p2s_l1"],
            "p2s_l2": summary["p2s_l2"],
            "depth_error": summary["depth_error"],
            "final_loss": est.history_[-1]["total"],
        })
    return table
