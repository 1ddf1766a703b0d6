import numpy as np
import pytest

from clothsft.geometry import RestQuantities, rest_quantities
from clothsft.losses import (LossWeights, energy_regularization,
                             energy_regularization_position_grads,
                             force_regularization, force_regularization_grads,
                             image_loss, image_loss_grad, silhouette_loss,
                             silhouette_loss_grad, texture_smoothness,
                             texture_smoothness_grad, total_sft_loss,
                             total_tex_loss)
from clothsft.physics import Stiffness, total_energy
from helpers import fd_gradient, rel_err


def test_image_loss_values():
    black = np.zeros((4, 5, 3))
    white = np.ones((4, 5, 3))
    assert image_loss(black, black) == 0.0
    assert image_loss(black, white) == pytest.approx(3.0)
    a = np.zeros((2, 2, 3))
    b = a.copy()
    b[0, 1, 0] = 0.5
    assert image_loss(a, b) == pytest.approx(0.0625)
    with pytest.raises(ValueError, match="mismatch"):
        image_loss(black, np.zeros((4, 4, 3)))


def test_image_loss_grad_matches_fd(rng):
    a = rng.uniform(size=(3, 4, 3))
    b = rng.uniform(size=(3, 4, 3))
    g = image_loss_grad(a, b)
    fd = fd_gradient(lambda x: image_loss(x, b), a, 1e-6)
    assert rel_err(g, fd) < 1e-7


def test_silhouette_loss_values():
    m = np.zeros((4, 4))
    assert silhouette_loss(m, m) == 0.0
    assert silhouette_loss(m, 1.0 - m) == pytest.approx(1.0)
    half = np.zeros((4, 4))
    half[:2] = 1.0
    assert silhouette_loss(half, np.zeros((4, 4))) == pytest.approx(0.5)
    g = silhouette_loss_grad(half, m)
    fd = fd_gradient(lambda x: silhouette_loss(x, m), half, 1e-6)
    assert rel_err(g, fd) < 1e-7


def test_energy_regularization_matches_physics(small_mesh, small_rest, rng):
    stiff = Stiffness(200.0, 1e-3, 1e-4)
    frames = [small_mesh.rest_positions + 0.02 * rng.standard_normal((small_mesh.n_vertices, 3))
              for _ in range(3)]
    r_e = energy_regularization(frames, small_rest, stiff)
    expect = sum(total_energy(x, small_rest, stiff) for x in frames) / 3
    assert r_e == expect  # bit-identical delegation
    assert energy_regularization([small_mesh.rest_positions], small_rest, stiff) == 0.0


def test_energy_regularization_grads_match_fd(small_mesh, small_rest, rng):
    stiff = Stiffness(200.0, 1e-3, 1e-4)
    frames = [small_mesh.rest_positions + 0.02 * rng.standard_normal((small_mesh.n_vertices, 3))
              for _ in range(2)]
    grads = energy_regularization_position_grads(frames, small_rest, stiff)
    for k in range(2):
        def f(x, k=k):
            trial = list(frames)
            trial[k] = x
            return energy_regularization(trial, small_rest, stiff)
        fd = fd_gradient(f, frames[k], 1e-6)
        assert rel_err(grads[k], fd) < 1e-5


def test_stretched_edge_energy_reg_value():
    # one horizontal edge of rest length 1 stretched to 1.1 under Y=200
    rest = RestQuantities(
        edges=np.array([[0, 1]]), rest_lengths=np.array([1.0]),
        bend_pairs=np.zeros((0, 3), dtype=np.int64), rest_bend_angles=np.zeros(0),
        shear_pairs=np.zeros((0, 3), dtype=np.int64), rest_shear_angles=np.zeros(0))
    x = np.array([[0.0, 0.0, 0.0], [1.1, 0.0, 0.0]])
    stiff = Stiffness(200.0, 0.0, 0.0)
    assert energy_regularization([x], rest, stiff) == pytest.approx(1.0)


def test_force_regularization_values():
    cam = np.zeros(3)
    pos = np.array([[[0.0, 0.0, 1.0]]])
    par = np.array([[[0.0, 0.0, 2.5]]])
    assert force_regularization(par, pos, cam) == 0.0
    f = np.array([[[3.0, 4.0, 0.0]]])
    assert force_regularization(f, pos, cam) == pytest.approx(5.0)
    assert force_regularization(2.0 * f, pos, cam) == pytest.approx(10.0)
    # invariant under adding any multiple of the ray direction
    shifted = f + 7.3 * pos
    assert force_regularization(shifted, pos, cam) == pytest.approx(5.0)


def test_force_regularization_rejects_vertex_at_camera():
    cam = np.array([1.0, 2.0, 3.0])
    pos = np.array([[[1.0, 2.0, 3.0]]])
    with pytest.raises(ValueError, match="degenerate"):
        force_regularization(np.ones((1, 1, 3)), pos, cam)


def test_force_regularization_grads_match_fd(rng):
    cam = np.array([0.3, -0.2, -2.0])
    pos = rng.standard_normal((2, 5, 3))
    forces = rng.standard_normal((2, 5, 3))
    g_f, g_x = force_regularization_grads(forces, pos, cam)
    fd_f = fd_gradient(lambda f: force_regularization(f, pos, cam), forces, 1e-6)
    fd_x = fd_gradient(lambda x: force_regularization(forces, x, cam), pos, 1e-6)
    assert rel_err(g_f, fd_f) < 1e-6
    assert rel_err(g_x, fd_x) < 1e-5


def test_texture_smoothness_values():
    assert texture_smoothness(np.full((5, 7, 3), 0.42)) == 0.0
    assert texture_smoothness(np.array([[0.0, 1.0]])) == pytest.approx(1.0)
    checker = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert texture_smoothness(checker) == pytest.approx(2.0)
    assert texture_smoothness(np.array([[0.7]])) == 0.0


def test_texture_smoothness_grad_matches_fd(rng):
    # generic texel values: no ties, so the subgradient is the gradient
    tex = rng.uniform(size=(4, 5, 3))
    g = texture_smoothness_grad(tex)
    fd = fd_gradient(lambda t: texture_smoothness(t), tex, 1e-7)
    assert rel_err(g, fd) < 1e-5


def test_total_losses():
    w = LossWeights()
    w.validate()
    assert total_sft_loss(1.0, 1.0, 1.0, 1.0, w) == pytest.approx(1.0 + 1.0 + 2.0 + 2e-4)
    assert total_tex_loss(1.0, 1.0, w) == pytest.approx(1.0 + 1e-4)
    assert total_sft_loss(0.0, 0.0, 0.0, 0.0, w) == 0.0
    with pytest.raises(ValueError, match="nonnegative"):
        LossWeights(energy_weight=-1.0).validate()
