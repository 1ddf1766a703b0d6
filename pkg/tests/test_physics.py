import numpy as np
import pytest

from clothsft.geometry import RestQuantities, build_template, rest_quantities
from clothsft.physics import (ClothState, SimParams, SolverConfig, Stiffness,
                              bend_energy, force_jacobian, internal_forces,
                              jacobian_matvec, shear_energy, simulate, step,
                              step_with_context, step_vjp, stretch_energy,
                              total_energy)
from conftest import make_mesh, perturbed_positions
from helpers import fd_gradient, fd_jacobian, rel_err

STIFF = Stiffness(stretch=200.0, bend=1e-3, shear=1e-4)


def single_edge_rest(length=1.0):
    return RestQuantities(
        edges=np.array([[0, 1]]), rest_lengths=np.array([length]),
        bend_pairs=np.zeros((0, 3), dtype=np.int64), rest_bend_angles=np.zeros(0),
        shear_pairs=np.zeros((0, 3), dtype=np.int64), rest_shear_angles=np.zeros(0))


def test_single_edge_hooke_force():
    # L0 = 1, |e| = 1.2, Y = 100: 20 N pulling the endpoints together.
    rest = single_edge_rest(1.0)
    pos = np.array([[0.0, 0.0, 0.0], [1.2, 0.0, 0.0]])
    f = internal_forces(pos, rest, Stiffness(100.0, 0.0, 0.0))
    assert np.allclose(f[1], [-20.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(f[0], [20.0, 0.0, 0.0], atol=1e-12)
    assert np.isclose(stretch_energy(pos, rest, 100.0), 0.5 * 100.0 * 0.2 ** 2)


def test_energies_zero_at_rest():
    mesh = make_mesh(4, 4, 0.05)
    rest = rest_quantities(mesh)
    pos = mesh.rest_positions
    assert stretch_energy(pos, rest, 200.0) == 0.0
    assert bend_energy(pos, rest, 1e-3) == 0.0
    assert shear_energy(pos, rest, 1e-4) == 0.0


def test_energies_nonnegative_random(rng):
    mesh = make_mesh(3, 4, 0.1)
    rest = rest_quantities(mesh)
    for _ in range(5):
        pos = perturbed_positions(mesh, rng, scale=0.05)
        assert stretch_energy(pos, rest, 1.0) >= 0.0
        assert bend_energy(pos, rest, 1.0) >= 0.0
        assert shear_energy(pos, rest, 1.0) >= 0.0


def test_forces_are_negative_energy_gradient(rng):
    mesh = make_mesh(3, 3, 0.1)
    rest = rest_quantities(mesh)
    for _ in range(5):
        pos = perturbed_positions(mesh, rng)
        f = internal_forces(pos, rest, STIFF)
        g = fd_gradient(lambda p: total_energy(p, rest, STIFF), pos, h=1e-7)
        assert rel_err(f, -g) < 1e-5


def test_force_jacobian_symmetric_and_matches_fd(rng):
    mesh = make_mesh(3, 3, 0.1)
    rest = rest_quantities(mesh)
    for _ in range(3):
        pos = perturbed_positions(mesh, rng)
        jac = force_jacobian(pos, rest, STIFF).toarray()
        sym = rel_err(jac, jac.T)
        assert sym < 1e-8
        jac_fd = fd_jacobian(lambda p: internal_forces(p, rest, STIFF), pos, h=1e-6)
        assert rel_err(jac, jac_fd) < 1e-4


def test_jacobian_matvec_matches_assembly(rng):
    mesh = make_mesh(3, 4, 0.08)
    rest = rest_quantities(mesh)
    pos = perturbed_positions(mesh, rng)
    jac = force_jacobian(pos, rest, STIFF).toarray()
    for _ in range(3):
        vec = rng.standard_normal(pos.shape)
        assert rel_err(jacobian_matvec(pos, rest, STIFF, vec),
                       (jac @ vec.ravel()).reshape(-1, 3)) < 1e-12


def test_net_force_and_torque_vanish(rng):
    # Internal forces of a free cloth must not create momentum.
    mesh = make_mesh(4, 4, 0.06)
    rest = rest_quantities(mesh)
    pos = perturbed_positions(mesh, rng, scale=0.03)
    f = internal_forces(pos, rest, STIFF)
    scale = np.abs(f).max()
    assert np.linalg.norm(f.sum(axis=0)) < 1e-10 * max(scale, 1.0)
    torque = np.cross(pos, f).sum(axis=0)
    assert np.linalg.norm(torque) < 1e-10 * max(scale, 1.0)


def test_rest_state_is_fixed_point():
    mesh = make_mesh(3, 3, 0.1, pinned=[0, 1, 2])
    rest = rest_quantities(mesh)
    state = ClothState(mesh.rest_positions.copy(), np.zeros((9, 3)))
    out = step(state, mesh, rest, STIFF, np.zeros((9, 3)), SimParams())
    assert np.array_equal(out.positions, state.positions)
    assert np.array_equal(out.velocities, np.zeros((9, 3)))


def test_one_dof_backward_euler_closed_form():
    # Zero stiffness, one free vertex: v1 = damping * dt * F / m, x1 = x0 + dt*v1.
    mesh = make_mesh(2, 2, 1.0, pinned=[0, 1, 2])
    rest = rest_quantities(mesh)
    zero = Stiffness(0.0, 0.0, 0.0)
    m = mesh.masses[3]
    force = np.zeros((4, 3))
    force[3] = [0.3, -0.2, 0.1]
    params = SimParams(dt=0.005, substeps=4, damping=1.0)
    state = ClothState(mesh.rest_positions.copy(), np.zeros((4, 3)))
    out = step(state, mesh, rest, zero, force, params)
    expect_v = params.dt * force[3] / m
    assert np.array_equal(out.velocities[3], expect_v)
    assert np.array_equal(out.positions[3], state.positions[3] + params.dt * expect_v)
    assert np.array_equal(out.positions[:3], state.positions[:3])

    damped = step(state, mesh, rest, zero, force, SimParams(dt=0.005, substeps=4, damping=0.9))
    assert np.allclose(damped.velocities[3], 0.9 * expect_v, rtol=1e-15)


def test_mass_force_costiffness_scaling_invariance():
    # Scaling masses, external forces and stiffnesses by one constant leaves
    # the motion unchanged (accelerations are M^-1 F).
    mesh = make_mesh(3, 3, 0.1, pinned=[0, 1, 2])
    rest = rest_quantities(mesh)
    rng = np.random.default_rng(7)
    forces = 1e-4 * rng.standard_normal((5, 9, 3))
    traj = simulate(mesh, rest, STIFF, SimParams(), forces)

    c = 2.0
    mesh2 = make_mesh(3, 3, 0.1, pinned=[0, 1, 2])
    mesh2.masses = c * mesh2.masses
    stiff2 = Stiffness(c * STIFF.stretch, c * STIFF.bend, c * STIFF.shear)
    traj2 = simulate(mesh2, rest, stiff2, SimParams(), c * forces)
    assert rel_err(traj, traj2) < 1e-9


def test_first_order_convergence_single_spring():
    # Backward Euler is first order: halving dt halves the global error.
    mesh = make_mesh(2, 2, 1.0, pinned=[0, 1, 2])
    rest = rest_quantities(mesh)
    stiff = Stiffness(5.0, 0.0, 0.0)
    x0 = mesh.rest_positions.copy()
    x0[3, 0] += 0.1
    total_t = 0.08
    finals = {}
    for div in (1, 2, 64):
        dt = 0.005 / div
        n = int(round(total_t / dt))
        params = SimParams(dt=dt, substeps=1, damping=1.0)
        traj = simulate(mesh, rest, stiff, params, np.zeros((n, 4, 3)),
                        initial=ClothState(x0.copy(), np.zeros((4, 3))))
        finals[div] = traj[-1][3]
    err1 = np.linalg.norm(finals[1] - finals[64])
    err2 = np.linalg.norm(finals[2] - finals[64])
    assert 1.6 < err1 / err2 < 2.5


def test_pcg_matches_dense(rng):
    # Small strains keep the implicit system positive definite, which CG needs;
    # near buckling the matrix goes indefinite and the dense path is the one
    # that stays valid.
    mesh = make_mesh(4, 4, 0.05, pinned=[0, 1])
    rest = rest_quantities(mesh)
    state = ClothState(perturbed_positions(mesh, rng, 1e-4),
                       0.001 * rng.standard_normal((16, 3)))
    force = 1e-4 * rng.standard_normal((16, 3))
    dense = step(state.copy(), mesh, rest, STIFF, force, SimParams(),
                 SolverConfig(method="dense"))
    pcg = step(state.copy(), mesh, rest, STIFF, force, SimParams(),
               SolverConfig(method="pcg", rtol=1e-12))
    assert rel_err(dense.positions, pcg.positions) < 1e-9
    assert rel_err(dense.velocities, pcg.velocities) < 1e-8


def test_simulate_includes_initial_state_and_shape():
    mesh = make_mesh(3, 3, 0.1, pinned=[0, 1, 2])
    rest = rest_quantities(mesh)
    traj = simulate(mesh, rest, STIFF, SimParams(), np.zeros((4, 9, 3)))
    assert traj.shape == (5, 9, 3)
    assert np.array_equal(traj[0], mesh.rest_positions)
    # zero forces from rest: everything stays put
    assert np.array_equal(traj[-1], mesh.rest_positions)


def test_step_vjp_matches_fd(rng):
    # Adjoint of one substep against central differences, all inputs.
    mesh = make_mesh(3, 3, 0.1, pinned=[0])
    rest = rest_quantities(mesh)
    params = SimParams()
    x0 = perturbed_positions(mesh, rng, 0.01)
    v0 = 0.02 * rng.standard_normal(x0.shape)
    f_ext = 1e-4 * rng.standard_normal(x0.shape)
    wx = rng.standard_normal(x0.shape)
    wv = rng.standard_normal(x0.shape)

    def run(x, v, stiff, fe):
        out = step(ClothState(x.copy(), v.copy()), mesh, rest, stiff, fe, params)
        return float(np.vdot(wx, out.positions) + np.vdot(wv, out.velocities))

    out, ctx = step_with_context(ClothState(x0.copy(), v0.copy()), mesh, rest,
                                 STIFF, f_ext, params)
    gx, gv, gy, gb, gs, gf = step_vjp(ctx, wx, wv)

    assert rel_err(gx, fd_gradient(lambda x: run(x, v0, STIFF, f_ext), x0, 1e-7)) < 1e-4
    assert rel_err(gv, fd_gradient(lambda v: run(x0, v, STIFF, f_ext), v0, 1e-7)) < 1e-5
    assert rel_err(gf, fd_gradient(lambda f: run(x0, v0, STIFF, f), f_ext, 1e-7)) < 1e-5
    h = 1e-5
    for name, grad in (("stretch", gy), ("bend", gb), ("shear", gs)):
        def over_k(k):
            kw = {"stretch": STIFF.stretch, "bend": STIFF.bend, "shear": STIFF.shear}
            kw[name] = k
            return run(x0, v0, Stiffness(**kw), f_ext)
        base = getattr(STIFF, name)
        fd = (over_k(base + h) - over_k(base - h)) / (2 * h)
        assert rel_err(grad, fd) < 1e-4, name


def test_step_requires_masses():
    mesh = build_template(2, 2, 1.0)
    rest = rest_quantities(mesh)
    state = ClothState(mesh.rest_positions.copy(), np.zeros((4, 3)))
    with pytest.raises(ValueError, match="masses"):
        step(state, mesh, rest, STIFF, np.zeros((4, 3)), SimParams())
