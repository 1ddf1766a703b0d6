import numpy as np
import pytest

from clothsft.autodiff import Tape
from clothsft.geometry import build_template, compute_masses, rest_quantities, top_row_indices
from clothsft.losses import LossWeights, energy_regularization
from clothsft.physics import SimParams, Stiffness, simulate
from clothsft.pipeline import (SfTProblem, build_sft_loss, build_texture_loss,
                               record_frame_energy, record_step)
from clothsft.render import Camera, rasterize
from clothsft.autodiff import pow10
from helpers import rel_err

RES = 32
N_DYN = 2


def tiny_problem(rng, weights=None):
    mesh = build_template(3, 3, 0.3, pinned=top_row_indices(3, 3))
    mesh.masses = compute_masses(mesh, density=0.1)
    rest = rest_quantities(mesh)
    camera = Camera.look_at(eye=(0.3, -0.3, 1.2), target=(0.3, -0.3, 0.0),
                            fx=50.0, fy=50.0, width=RES, height=RES)
    tex = rng.uniform(0.2, 0.8, size=(4, 4, 3))
    # placeholder targets; tests overwrite with rendered ones
    problem = SfTProblem(
        mesh=mesh, rest=rest, camera=camera,
        target_rgb=np.zeros((N_DYN + 1, RES, RES, 3)),
        target_mask=np.zeros((N_DYN + 1, RES, RES)),
        texture=tex, params=SimParams(),
        weights=weights or LossWeights())
    return problem


def base_leaves_values(rng, n_vertices):
    return {
        "log10_stretch": np.float64(np.log10(200.0)),
        "log10_bend": np.float64(-3.0),
        "log10_shear": np.float64(-4.0),
        "constant_force": np.array([0.2, -0.5, 0.8]),
        "dynamic_forces": 0.5 * rng.standard_normal((N_DYN, n_vertices, 3)),
    }


def fill_targets(problem, leaf_values, rng):
    """Render targets from a slightly different parameter set."""
    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in leaf_values.items()}
    true_vals = dict(leaf_values)
    true_vals["constant_force"] = leaf_values["constant_force"] + 0.3
    true_vals["dynamic_forces"] = leaf_values["dynamic_forces"] + \
        0.2 * rng.standard_normal(leaf_values["dynamic_forces"].shape)
    t2 = Tape()
    leaves2 = {k: t2.leaf(v, k) for k, v in true_vals.items()}
    _, _, traj = build_sft_loss(t2, leaves2, problem, N_DYN)
    for n in range(N_DYN + 1):
        out = rasterize(traj[n], problem.mesh.triangles, problem.mesh.uvs,
                        problem.texture, problem.camera, keep_record=False)
        problem.target_rgb[n] = out.rgb
        problem.target_mask[n] = out.mask


def build_loss_value(problem, leaf_values, active=N_DYN):
    tape = Tape()
    leaves = {k: tape.leaf(np.copy(v), k) for k, v in leaf_values.items()}
    loss_var, terms, traj = build_sft_loss(tape, leaves, problem, active)
    return tape, loss_var, terms, traj


def test_pipeline_trajectory_matches_simulate(rng):
    problem = tiny_problem(rng)
    vals = base_leaves_values(rng, problem.mesh.n_vertices)
    fill_targets(problem, vals, rng)
    _, _, _, traj = build_loss_value(problem, vals)

    stiff = Stiffness(10.0 ** vals["log10_stretch"], 10.0 ** vals["log10_bend"],
                      10.0 ** vals["log10_shear"])
    masses = problem.mesh.masses[:, None]
    fext = masses * (vals["constant_force"] + vals["dynamic_forces"])
    ref = simulate(problem.mesh, problem.rest, stiff, problem.params, fext)
    assert np.array_equal(traj, ref)


def test_identity_targets_zero_image_terms(rng):
    problem = tiny_problem(rng)
    vals = base_leaves_values(rng, problem.mesh.n_vertices)
    _, _, _, traj = build_loss_value(problem, vals)
    for n in range(N_DYN + 1):
        out = rasterize(traj[n], problem.mesh.triangles, problem.mesh.uvs,
                        problem.texture, problem.camera, keep_record=False)
        problem.target_rgb[n] = out.rgb
        problem.target_mask[n] = out.mask
    _, _, terms, _ = build_loss_value(problem, vals)
    assert terms["image"] == 0.0
    assert terms["silhouette"] == 0.0
    assert terms["total"] == pytest.approx(
        2.0 * terms["energy_reg"] + 2e-4 * terms["force_reg"])


def test_energy_term_bit_identical_to_regularizer(rng):
    problem = tiny_problem(rng)
    vals = base_leaves_values(rng, problem.mesh.n_vertices)
    fill_targets(problem, vals, rng)
    _, _, terms, traj = build_loss_value(problem, vals)
    stiff = Stiffness(10.0 ** vals["log10_stretch"], 10.0 ** vals["log10_bend"],
                      10.0 ** vals["log10_shear"])
    assert terms["energy_reg"] == energy_regularization(traj[1:], problem.rest, stiff)


def test_active_frames_bounds(rng):
    problem = tiny_problem(rng)
    vals = base_leaves_values(rng, problem.mesh.n_vertices)
    fill_targets(problem, vals, rng)
    with pytest.raises(ValueError, match="active_frames"):
        build_loss_value(problem, vals, active=0)
    with pytest.raises(ValueError, match="active_frames"):
        build_loss_value(problem, vals, active=N_DYN + 1)


def test_sft_gradients_match_fd(rng):
    # energy term frozen out so plain FD of the total loss is a valid oracle
    # (its stop-gradient makes FD disagree on the stiffness leaves otherwise)
    problem = tiny_problem(rng, weights=LossWeights(energy_weight=0.0))
    vals = base_leaves_values(rng, problem.mesh.n_vertices)
    fill_targets(problem, vals, rng)
    tape, loss_var, _, _ = build_loss_value(problem, vals)
    grads = tape.backward(loss_var)

    def loss_at(updated):
        _, lv, _, _ = build_loss_value(problem, updated)
        return float(lv.value)

    for name, h in (("log10_stretch", 1e-5), ("log10_bend", 1e-5),
                    ("log10_shear", 1e-5)):
        trial = dict(vals)
        trial[name] = vals[name] + h
        fp = loss_at(trial)
        trial[name] = vals[name] - h
        fm = loss_at(trial)
        fd = (fp - fm) / (2 * h)
        assert rel_err(np.asarray(grads[name]), np.asarray(fd)) < 2e-3, name

    for name, h in (("constant_force", 1e-6), ("dynamic_forces", 1e-6)):
        fd = np.zeros_like(vals[name])
        flat_idx = list(np.ndindex(vals[name].shape))
        for idx in flat_idx:
            trial = dict(vals)
            arr = vals[name].copy()
            arr[idx] += h
            trial[name] = arr
            fp = loss_at(trial)
            arr = vals[name].copy()
            arr[idx] -= h
            trial[name] = arr
            fm = loss_at(trial)
            fd[idx] = (fp - fm) / (2 * h)
        assert rel_err(grads[name], fd) < 2e-3, name


def test_energy_stop_gradient_semantics(rng):
    # Tape gradient of a pure energy objective w.r.t. log-stiffness must match
    # FD in which the energy's own stiffness stays frozen at the base value
    # while the simulation uses the perturbed one.
    problem = tiny_problem(rng)
    vals = base_leaves_values(rng, problem.mesh.n_vertices)
    fill_targets(problem, vals, rng)
    mesh, rest, params = problem.mesh, problem.rest, problem.params
    base_stiff = Stiffness(10.0 ** vals["log10_stretch"],
                           10.0 ** vals["log10_bend"],
                           10.0 ** vals["log10_shear"])

    def record_energy_objective(leaf_values):
        tape = Tape()
        leaves = {k: tape.leaf(np.copy(v), k) for k, v in leaf_values.items()}
        y = pow10(tape, leaves["log10_stretch"])
        b = pow10(tape, leaves["log10_bend"])
        s = pow10(tape, leaves["log10_shear"])
        from clothsft.pipeline import record_external_force, record_exact_mean
        x_var = tape.constant(mesh.rest_positions.copy())
        v_var = tape.constant(np.zeros_like(mesh.rest_positions))
        terms = []
        stiff_now = Stiffness(float(y.value), float(b.value), float(s.value))
        for n in range(1, N_DYN + 1):
            fext = record_external_force(tape, leaves["constant_force"],
                                         leaves["dynamic_forces"], n - 1,
                                         mesh.masses)
            for _ in range(params.substeps):
                x_var, v_var = record_step(tape, x_var, v_var, y, b, s, fext,
                                           mesh, rest, params, problem.solver)
            terms.append(record_frame_energy(tape, x_var, rest, stiff_now))
        return tape, record_exact_mean(tape, terms)

    tape, r_e = record_energy_objective(vals)
    grads = tape.backward(r_e)

    def frozen_fd(name, h):
        def sim_energy(leaf_values):
            stiff = Stiffness(10.0 ** leaf_values["log10_stretch"],
                              10.0 ** leaf_values["log10_bend"],
                              10.0 ** leaf_values["log10_shear"])
            fext = mesh.masses[:, None] * (leaf_values["constant_force"]
                                           + leaf_values["dynamic_forces"])
            traj = simulate(mesh, rest, stiff, params, fext)
            return energy_regularization(traj[1:], rest, base_stiff)
        trial = dict(vals)
        trial[name] = vals[name] + h
        fp = sim_energy(trial)
        trial[name] = vals[name] - h
        fm = sim_energy(trial)
        return (fp - fm) / (2 * h)

    for name in ("log10_stretch", "log10_bend", "log10_shear"):
        fd = frozen_fd(name, 1e-5)
        assert rel_err(np.asarray(grads[name]), np.asarray(fd)) < 2e-3, name


def test_texture_gradients_match_fd(rng):
    problem = tiny_problem(rng)
    vals = base_leaves_values(rng, problem.mesh.n_vertices)
    fill_targets(problem, vals, rng)

    tex0 = rng.uniform(0.2, 0.8, size=(4, 4, 3))

    def tex_loss(tex):
        tape = Tape()
        tvar = tape.leaf(np.copy(tex), "texture")
        loss_var, _, = build_texture_loss(tape, tvar, problem)[:2]
        return tape, tvar, loss_var

    tape, tvar, loss_var = tex_loss(tex0)
    grads = tape.backward(loss_var)
    h = 1e-6
    fd = np.zeros_like(tex0)
    for idx in np.ndindex(tex0.shape):
        t = tex0.copy()
        t[idx] += h
        fp = float(tex_loss(t)[2].value)
        t = tex0.copy()
        t[idx] -= h
        fm = float(tex_loss(t)[2].value)
        fd[idx] = (fp - fm) / (2 * h)
    assert rel_err(grads["texture"], fd) < 2e-3
