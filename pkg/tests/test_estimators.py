import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from clothsft.estimators import (ABLATION_CONFIGS, EstimatorError,
                                 METRIC_SAMPLE_SEED, SfTReconstructor,
                                 TextureMapper, ablate, diverged,
                                 evaluate_reconstruction)
from clothsft.geometry import build_template, compute_masses, rest_quantities, top_row_indices
from clothsft.losses import LossWeights
from clothsft.metrics import sample_surface
from clothsft.optim import Schedule
from clothsft.physics import SimParams, SolverConfig, Stiffness, simulate
from clothsft.pipeline import SfTProblem
from clothsft.render import Camera, rasterize

RES = 24


def make_problem(rng, n_dyn=2, accel=None, solver=None):
    mesh = build_template(3, 3, 0.3, pinned=top_row_indices(3, 3))
    mesh.masses = compute_masses(mesh, density=0.1)
    rest = rest_quantities(mesh)
    camera = Camera.look_at(eye=(0.3, -0.3, 1.2), target=(0.3, -0.3, 0.0),
                            fx=40.0, fy=40.0, width=RES, height=RES)
    tex = rng.uniform(0.1, 0.9, size=(6, 6, 3))
    problem = SfTProblem(
        mesh=mesh, rest=rest, camera=camera,
        target_rgb=np.zeros((n_dyn + 1, RES, RES, 3)),
        target_mask=np.zeros((n_dyn + 1, RES, RES)),
        texture=tex, params=SimParams(),
        solver=solver or SolverConfig())
    stiff = Stiffness(200.0, 1e-3, 1e-4)
    if accel is None:
        accel = np.broadcast_to([0.4, -0.8, 1.5], (n_dyn, mesh.n_vertices, 3))
    forces = mesh.masses[:, None] * accel
    traj = simulate(mesh, rest, stiff, problem.params, forces)
    for n in range(n_dyn + 1):
        out = rasterize(traj[n], mesh.triangles, mesh.uvs, tex, camera,
                        keep_record=False)
        problem.target_rgb[n] = out.rgb
        problem.target_mask[n] = out.mask
    return problem, traj


def test_diverged_detector():
    assert not diverged([3.0, 2.0, 1.0], patience=2)
    assert not diverged([1.0, 2.0], patience=2)
    assert diverged([1.0, 2.0, 3.0], patience=2)
    assert not diverged([1.0, 2.0, 2.0], patience=2)
    assert diverged([5.0, 1.0, 2.0, 3.0, 4.0], patience=3)


def test_texture_mapper_fits_scene(rng):
    problem, _ = make_problem(rng)
    est = TextureMapper(texture_size=6, epochs=60, divergence_patience=50)
    est.fit(problem)
    assert est.texture_.shape == (6, 6, 3)
    assert (est.texture_ >= 0.0).all() and (est.texture_ <= 1.0).all()
    losses = [row["total"] for row in est.history_]
    assert losses[-1] < 0.25 * losses[0]
    predicted = est.predict(problem)
    err = np.mean((predicted - problem.target_rgb[0]) ** 2)
    init_err = np.mean((0.5 - problem.target_rgb[0]) ** 2)
    assert err < init_err


def test_texture_mapper_validation(rng):
    problem, _ = make_problem(rng)
    with pytest.raises(ValueError, match="texture_size"):
        TextureMapper(texture_size=0).fit(problem)
    with pytest.raises(ValueError, match="smoothness_weight"):
        TextureMapper(smoothness_weight=-1.0).fit(problem)
    with pytest.raises(NotFittedError):
        TextureMapper().predict(problem)


def test_reconstructor_reduces_loss(rng, tmp_path):
    problem, _ = make_problem(rng)
    log = tmp_path / "log.csv"
    # default force rates are tuned for full-size scenes and limit-cycle on
    # this tiny one, so damp them; this also exercises the override plumbing
    est = SfTReconstructor(
        schedule=Schedule(epochs_after_last_frame=40),
        learning_rates={"constant_force": 0.02, "dynamic_forces": 0.04},
        checkpoint_every=10, checkpoint_dir=str(tmp_path / "ckpt"),
        log_path=str(log))
    est.fit(problem)
    assert len(est.history_) == 40
    losses = [row["total"] for row in est.history_]
    assert losses[-1] < losses[0]
    assert est.trajectory_.shape == (3, 9, 3)
    # parameter boxes respected
    assert 1.0 <= est.params_["log10_stretch"] <= 3.0
    assert -4.0 <= est.params_["log10_bend"] <= -2.0
    # artifacts
    assert (tmp_path / "ckpt" / "checkpoint_00010.npz").exists()
    header = log.read_text().splitlines()[0]
    assert "total" in header and "active_frames" in header
    assert len(log.read_text().splitlines()) == 41
    # predict returns the stored trajectory by default
    assert np.array_equal(est.predict(), est.trajectory_)


def test_reconstructor_abort_reports_epoch(rng):
    # an unsatisfiable CG tolerance fails the first implicit solve; the fit
    # must surface it as an abort naming the epoch and active frame count
    # (rtol 0 can actually be met when the residual cancels to exactly zero,
    # so use a strictly impossible negative bound)
    problem, _ = make_problem(rng)
    problem = SfTProblem(**{**problem.__dict__,
                            "solver": SolverConfig(method="pcg", rtol=-1.0)})
    est = SfTReconstructor(schedule=Schedule(epochs_after_last_frame=5))
    with pytest.raises(EstimatorError, match="epoch 0 .2 active frames."):
        est.fit(problem)


def test_reconstructor_sklearn_protocol(rng):
    est = SfTReconstructor(weights=LossWeights(force_weight=0.0),
                           clip_norm=10.0)
    params = est.get_params()
    assert params["clip_norm"] == 10.0
    cloned = clone(est)
    assert cloned.get_params()["weights"].force_weight == 0.0
    with pytest.raises(NotFittedError):
        est.predict()
    with pytest.raises(ValueError, match="unknown groups"):
        problem, _ = make_problem(rng)
        SfTReconstructor(learning_rates={"bogus": 1.0},
                         schedule=Schedule(epochs_after_last_frame=1)).fit(problem)


def test_evaluate_reconstruction_perfect_match(rng):
    problem, traj = make_problem(rng)
    gt_points = []
    gt_depths = []
    for n in range(1, 3):
        gt_points.append(sample_surface(traj[n], problem.mesh.triangles, 200,
                                        seed=METRIC_SAMPLE_SEED + n))
        out = rasterize(traj[n], problem.mesh.triangles, problem.mesh.uvs,
                        problem.texture, problem.camera, keep_record=False)
        gt_depths.append(out.depth)
    rows = evaluate_reconstruction(problem.mesh, problem.camera, traj,
                                   gt_points, np.stack(gt_depths),
                                   problem.texture)
    assert len(rows) == 3 and rows[-1]["frame"] == "mean"
    assert rows[-1]["chamfer_l2"] == 0.0  # identical sampling, same seed
    assert rows[-1]["depth_error"] == 0.0
    assert rows[-1]["p2s_l2"] < 1e-12
    with pytest.raises(ValueError, match="frames"):
        evaluate_reconstruction(problem.mesh, problem.camera, traj[:2],
                                gt_points, np.stack(gt_depths))


def test_ablate_single_config(rng):
    problem, traj = make_problem(rng)
    gt_points = [sample_surface(traj[n], problem.mesh.triangles, 100,
                                seed=METRIC_SAMPLE_SEED + n) for n in (1, 2)]
    gt_depths = []
    for n in (1, 2):
        out = rasterize(traj[n], problem.mesh.triangles, problem.mesh.uvs,
                        problem.texture, problem.camera, keep_record=False)
        gt_depths.append(out.depth)
    table = ablate(problem, gt_points, np.stack(gt_depths), configs=["full"],
                   schedule=Schedule(epochs_after_last_frame=3))
    assert len(table) == 1
    row = table[0]
    assert row["config"] == "full"
    assert row["energy_weight"] == 2.0 and row["force_weight"] == 2e-4
    assert set(row) >= {"chamfer_l2", "p2s_l2", "depth_error", "final_loss"}
    with pytest.raises(ValueError, match="unknown ablation"):
        ablate(problem, gt_points, np.stack(gt_depths), configs=["nope"])
    assert set(ABLATION_CONFIGS) == {"full", "no-sil", "no-reg-force",
                                     "no-reg-energy", "no-both"}
