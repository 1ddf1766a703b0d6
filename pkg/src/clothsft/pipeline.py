"""Objective graphs: wires simulation, rendering and losses onto a tape.

The reconstruction optimizes log10 stiffnesses, a constant acceleration C and
per-frame per-vertex accelerations D (both in N/kg; multiplied by the lumped
masses before entering the solver). Frame 0 is the template configuration and
is excluded from every loss term; dynamic frame n is produced by ``substeps``
implicit steps from frame n-1 under the frame's external forces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Var, pow10, weighted_sum
from .geometry import ClothMesh, RestQuantities
from .losses import (LossWeights, force_regularization,
                     force_regularization_grads, image_loss, image_loss_grad,
                     silhouette_loss, silhouette_loss_grad, texture_smoothness,
                     texture_smoothness_grad)
from .physics import (ClothState, SimParams, SolverConfig, Stiffness,
                      internal_forces, step_vjp, step_with_context,
                      total_energy)
from .render import Camera, rasterize, rasterize_backward


@dataclass
class SfTProblem:
    """Static data of one reconstruction: scene targets plus discretization."""

    mesh: ClothMesh
    rest: RestQuantities
    camera: Camera
    target_rgb: np.ndarray    # (n_frames, H, W, 3), index 0 = template frame
    target_mask: np.ndarray   # (n_frames, H, W)
    texture: np.ndarray       # fixed during reconstruction
    params: SimParams = field(default_factory=SimParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def n_dynamic(self) -> int:
        return self.target_rgb.shape[0] - 1

    def validate(self) -> None:
        self.params.validate()
        self.weights.validate()
        if self.mesh.masses is None:
            raise ValueError("mesh masses unset")
        if self.target_rgb.shape[:3] != self.target_mask.shape:
            raise ValueError("target rgb/mask frame dimensions disagree")
        if self.n_dynamic < 1:
            raise ValueError("need at least one dynamic frame")


# ---------------------------------------------------------------------------
# Primitive recorders

def record_external_force(tape: Tape, c_var: Var, d_var: Var, frame: int,
                          masses: np.ndarray) -> Var:
    """Total per-vertex force m_i * (C + D[frame, i]) as one node."""
    m = masses[:, None]
    value = m * (np.asarray(c_var.value) + np.asarray(d_var.value)[frame])

    def vjp(grad):
        g_c = np.sum(m * grad, axis=0)
        g_d = np.zeros_like(d_var.value)
        g_d[frame] = m * grad
        return [g_c, g_d]

    return tape.record("external_force", value, (c_var, d_var), vjp)


def record_step(tape: Tape, x_var: Var, v_var: Var, y_var: Var, b_var: Var,
                s_var: Var, fext_var: Var, mesh: ClothMesh,
                rest: RestQuantities, params: SimParams,
                solver: SolverConfig) -> tuple[Var, Var]:
    """One implicit substep; returns (positions, velocities) Vars."""
    stiff = Stiffness(float(y_var.value), float(b_var.value), float(s_var.value))
    state = ClothState(np.asarray(x_var.value), np.asarray(v_var.value))
    new_state, ctx = step_with_context(state, mesh, rest, stiff,
                                       np.asarray(fext_var.value), params, solver)

    def vjp(grad):
        gx_next, gv_next = grad
        return list(step_vjp(ctx, gx_next, gv_next))

    node = tape.record("step", (new_state.positions, new_state.velocities),
                       (x_var, v_var, y_var, b_var, s_var, fext_var), vjp)
    return tape.item(node, 0), tape.item(node, 1)


def record_render(tape: Tape, x_var: Var, tex_var: Var, mesh: ClothMesh,
                  camera: Camera) -> tuple[Var, Var, Var]:
    """Rasterize positions+texture; returns (rgb, mask, depth) Vars."""
    out = rasterize(np.asarray(x_var.value), mesh.triangles, mesh.uvs,
                    np.asarray(tex_var.value), camera)
    rec = out.record

    def vjp(grad):
        g_rgb, g_mask, g_depth = grad
        g_pos, g_tex = rasterize_backward(rec, g_rgb, g_mask, g_depth)
        return [g_pos, g_tex]

    node = tape.record("render", (out.rgb, out.mask, out.depth),
                       (x_var, tex_var), vjp)
    return tape.item(node, 0), tape.item(node, 1), tape.item(node, 2)


def record_image_loss(tape: Tape, rgb_var: Var, target: np.ndarray) -> Var:
    value = image_loss(np.asarray(rgb_var.value), target)
    return tape.record("image_loss", value, (rgb_var,),
                       lambda g: [g * image_loss_grad(np.asarray(rgb_var.value), target)])


def record_silhouette_loss(tape: Tape, mask_var: Var, target: np.ndarray) -> Var:
    value = silhouette_loss(np.asarray(mask_var.value), target)
    return tape.record(
        "silhouette_loss", value, (mask_var,),
        lambda g: [g * silhouette_loss_grad(np.asarray(mask_var.value), target)])


def record_frame_energy(tape: Tape, x_var: Var, rest: RestQuantities,
                        stiff: Stiffness) -> Var:
    """Internal energy of one frame; stiffnesses enter as constants only.

    Not listing the stiffness Vars as parents realizes the stop-gradient the
    energy regularizer requires: positions feel the pull, stiffnesses do not.
    """
    value = total_energy(np.asarray(x_var.value), rest, stiff)
    return tape.record(
        "frame_energy", value, (x_var,),
        lambda g: [-g * internal_forces(np.asarray(x_var.value), rest, stiff)])


def record_frame_force_reg(tape: Tape, fext_var: Var, x_var: Var,
                           camera_position: np.ndarray) -> Var:
    f = np.asarray(fext_var.value)[None]
    x = np.asarray(x_var.value)[None]
    value = force_regularization(f, x, camera_position)

    def vjp(grad):
        g_f, g_x = force_regularization_grads(f, x, camera_position)
        return [grad * g_f[0], grad * g_x[0]]

    return tape.record("force_reg", value, (fext_var, x_var), vjp)


def record_texture_smoothness(tape: Tape, tex_var: Var) -> Var:
    value = texture_smoothness(np.asarray(tex_var.value))
    return tape.record(
        "texture_smoothness", value, (tex_var,),
        lambda g: [g * texture_smoothness_grad(np.asarray(tex_var.value))])


def record_exact_mean(tape: Tape, vars_: list[Var]) -> Var:
    """Sum-then-divide mean, matching the standalone regularizer arithmetic."""
    n = len(vars_)
    value = float(sum(float(v.value) for v in vars_) / n)
    return tape.record("mean", value, tuple(vars_), lambda g: [g / n] * n)


# ---------------------------------------------------------------------------
# Full objective graphs

def build_sft_loss(tape: Tape, leaves: dict[str, Var], problem: SfTProblem,
                   active_frames: int):
    """Record the reconstruction objective over the first ``active_frames``
    dynamic frames.

    ``leaves`` must hold Vars named log10_stretch, log10_bend, log10_shear,
    constant_force, dynamic_forces. Returns (loss Var, per-term value dict,
    trajectory array of frame positions including the template frame).
    """
    problem.validate()
    if not 1 <= active_frames <= problem.n_dynamic:
        raise ValueError(f"active_frames {active_frames} outside "
                         f"[1, {problem.n_dynamic}]")
    mesh, rest = problem.mesh, problem.rest
    y_var = pow10(tape, leaves["log10_stretch"])
    b_var = pow10(tape, leaves["log10_bend"])
    s_var = pow10(tape, leaves["log10_shear"])
    stiff_now = Stiffness(float(y_var.value), float(b_var.value),
                          float(s_var.value))

    x_var = tape.constant(mesh.rest_positions.copy())
    v_var = tape.constant(np.zeros_like(mesh.rest_positions))

    im_terms, sil_terms, e_terms, rf_terms = [], [], [], []
    trajectory = [mesh.rest_positions.copy()]
    cam_pos = problem.camera.position
    for n in range(1, active_frames + 1):
        fext_var = record_external_force(tape, leaves["constant_force"],
                                         leaves["dynamic_forces"], n - 1,
                                         mesh.masses)
        for _ in range(problem.params.substeps):
            x_var, v_var = record_step(tape, x_var, v_var, y_var, b_var, s_var,
                                       fext_var, mesh, rest, problem.params,
                                       problem.solver)
        trajectory.append(np.asarray(x_var.value))
        rgb_var, mask_var, _ = record_render(tape, x_var,
                                             tape.constant(problem.texture),
                                             mesh, problem.camera)
        im_terms.append(record_image_loss(tape, rgb_var, problem.target_rgb[n]))
        sil_terms.append(record_silhouette_loss(tape, mask_var,
                                                problem.target_mask[n]))
        e_terms.append(record_frame_energy(tape, x_var, rest, stiff_now))
        rf_terms.append(record_frame_force_reg(tape, fext_var, x_var, cam_pos))

    l_im = record_exact_mean(tape, im_terms)
    l_sil = record_exact_mean(tape, sil_terms)
    r_e = record_exact_mean(tape, e_terms)
    r_f = record_exact_mean(tape, rf_terms)

    w = problem.weights
    # zero-weight terms stay out of the sum, so backward never visits them
    parts = [(l_im, 1.0)]
    for var, weight in ((l_sil, w.silhouette_weight), (r_e, w.energy_weight),
                        (r_f, w.force_weight)):
        if weight > 0.0:
            parts.append((var, weight))
    loss_var = weighted_sum(tape, [p[0] for p in parts], [p[1] for p in parts])

    terms = {"image": float(l_im.value), "silhouette": float(l_sil.value),
             "energy_reg": float(r_e.value), "force_reg": float(r_f.value),
             "total": float(loss_var.value)}
    return loss_var, terms, np.stack(trajectory)


def build_texture_loss(tape: Tape, tex_var: Var, problem: SfTProblem):
    """Record the texture-phase objective on the template frame."""
    problem.validate()
    x_var = tape.constant(problem.mesh.rest_positions.copy())
    rgb_var, _, _ = record_render(tape, x_var, tex_var, problem.mesh,
                                  problem.camera)
    l_im = record_image_loss(tape, rgb_var, problem.target_rgb[0])
    smooth = record_texture_smoothness(tape, tex_var)
    w = problem.weights
    if w.texture_weight > 0.0:
        loss_var = weighted_sum(tape, [l_im, smooth], [1.0, w.texture_weight])
    else:
        loss_var = l_im
    terms = {"image": float(l_im.value), "smoothness": float(smooth.value),
             "total": float(loss_var.value)}
    return loss_var, terms
