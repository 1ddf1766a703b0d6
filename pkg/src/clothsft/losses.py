"""Loss terms for texture mapping and shape-from-template reconstruction.

Every loss comes in two parts: a plain evaluation function and a closed-form
gradient companion, so the objective graph can record them as single nodes.
All reductions are means, which keeps the weights comparable across image
resolutions and frame counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .physics import Stiffness, internal_forces, total_energy

# below this squared length a viewing ray is considered degenerate
_RAY_EPS = 1e-18
# perpendicular force components below this norm get a zero subgradient
_PERP_EPS = 1e-30


@dataclass(frozen=True)
class LossWeights:
    """Weights of the optional loss terms.

    ``texture_weight`` scales the texture smoothness prior in the texture
    phase; the other three scale silhouette, energy and force-direction terms
    of the reconstruction objective.
    """

    texture_weight: float = 1e-4
    silhouette_weight: float = 1.0
    energy_weight: float = 2.0
    force_weight: float = 2e-4

    def validate(self) -> None:
        for name in ("texture_weight", "silhouette_weight", "energy_weight",
                     "force_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} shape mismatch: {a.shape} vs {b.shape}")


def image_loss(rendered_rgb: np.ndarray, target_rgb: np.ndarray) -> float:
    """Mean over pixels of the squared L2 color difference."""
    _check_same_shape(rendered_rgb, target_rgb, "image")
    n_pixels = rendered_rgb.shape[0] * rendered_rgb.shape[1]
    diff = rendered_rgb - target_rgb
    return float(np.sum(diff * diff) / n_pixels)


def image_loss_grad(rendered_rgb: np.ndarray, target_rgb: np.ndarray) -> np.ndarray:
    n_pixels = rendered_rgb.shape[0] * rendered_rgb.shape[1]
    return 2.0 * (rendered_rgb - target_rgb) / n_pixels


def silhouette_loss(rendered_mask: np.ndarray, target_mask: np.ndarray) -> float:
    """Mean squared difference of coverage masks."""
    _check_same_shape(rendered_mask, target_mask, "mask")
    diff = rendered_mask - target_mask
    return float(np.mean(diff * diff))


def silhouette_loss_grad(rendered_mask: np.ndarray,
                         target_mask: np.ndarray) -> np.ndarray:
    return 2.0 * (rendered_mask - target_mask) / rendered_mask.size


def energy_regularization(frame_positions, rest, stiffness: Stiffness) -> float:
    """Mean total internal energy over the given frames.

    Delegates to the simulator's energy so the value is bit-identical to what
    the physics module reports. The stiffness values enter as constants: this
    term intentionally carries no gradient to them.
    """
    frames = list(frame_positions)
    if not frames:
        return 0.0
    return float(sum(total_energy(x, rest, stiffness) for x in frames)
                 / len(frames))


def energy_regularization_position_grads(frame_positions, rest,
                                         stiffness: Stiffness) -> list:
    """d(mean energy)/d(positions) per frame: minus the internal forces."""
    frames = list(frame_positions)
    scale = 1.0 / len(frames)
    return [-scale * internal_forces(x, rest, stiffness) for x in frames]


def _ray_geometry(positions: np.ndarray, camera_position: np.ndarray):
    d = positions - np.asarray(camera_position, dtype=float)
    dd = np.sum(d * d, axis=-1)
    if np.any(dd < _RAY_EPS):
        raise ValueError("viewing direction degenerate: vertex at camera position")
    return d, dd


def force_regularization(forces: np.ndarray, positions: np.ndarray,
                         camera_position: np.ndarray) -> float:
    """Mean norm of the per-vertex force component orthogonal to its view ray.

    ``forces`` and ``positions`` are (n_frames, n_vertices, 3); the ray of
    vertex i in frame n points from the camera position to that vertex's
    current position. Forces along the ray are free, sideways forces pay.
    """
    _check_same_shape(forces, positions, "force/position")
    d, dd = _ray_geometry(positions, camera_position)
    beta = np.sum(forces * d, axis=-1) / dd
    perp = forces - beta[..., None] * d
    return float(np.mean(np.linalg.norm(perp, axis=-1)))


def force_regularization_grads(forces: np.ndarray, positions: np.ndarray,
                               camera_position: np.ndarray):
    """Closed-form gradients of ``force_regularization``.

    Returns (d/d forces, d/d positions). With r = ||P F|| and unit direction
    n = P F / r the force gradient is n itself (P is an orthogonal projector)
    and the position gradient is -(F.d / d.d) n, using that n is orthogonal
    to the ray.
    """
    d, dd = _ray_geometry(positions, camera_position)
    beta = np.sum(forces * d, axis=-1) / dd
    perp = forces - beta[..., None] * d
    r = np.linalg.norm(perp, axis=-1)
    safe = np.where(r > _PERP_EPS, r, 1.0)
    n_hat = np.where((r > _PERP_EPS)[..., None], perp / safe[..., None], 0.0)
    count = forces.shape[0] * forces.shape[1]
    g_forces = n_hat / count
    g_positions = -(beta[..., None] * n_hat) / count
    return g_forces, g_positions


def texture_smoothness(texture: np.ndarray) -> float:
    """Mean absolute finite difference between neighboring texels.

    Horizontal and vertical neighbor pairs are averaged separately and the
    two means added; multi-channel differences use the L1 norm over channels.
    Directions without any pair (one-texel extent) contribute zero.
    """
    tex = np.asarray(texture, dtype=float)
    if tex.ndim == 2:
        tex = tex[:, :, None]
    total = 0.0
    if tex.shape[1] >= 2:
        dh = tex[:, 1:] - tex[:, :-1]
        total += float(np.sum(np.abs(dh)) / (tex.shape[0] * (tex.shape[1] - 1)))
    if tex.shape[0] >= 2:
        dv = tex[1:, :] - tex[:-1, :]
        total += float(np.sum(np.abs(dv)) / ((tex.shape[0] - 1) * tex.shape[1]))
    return total


def texture_smoothness_grad(texture: np.ndarray) -> np.ndarray:
    """Subgradient of ``texture_smoothness`` (sign convention: 0 at ties)."""
    tex = np.asarray(texture, dtype=float)
    squeeze = tex.ndim == 2
    if squeeze:
        tex = tex[:, :, None]
    grad = np.zeros_like(tex)
    if tex.shape[1] >= 2:
        s = np.sign(tex[:, 1:] - tex[:, :-1]) / (tex.shape[0] * (tex.shape[1] - 1))
        grad[:, 1:] += s
        grad[:, :-1] -= s
    if tex.shape[0] >= 2:
        s = np.sign(tex[1:, :] - tex[:-1, :]) / ((tex.shape[0] - 1) * tex.shape[1])
        grad[1:, :] += s
        grad[:-1, :] -= s
    return grad[:, :, 0] if squeeze else grad


def total_sft_loss(image: float, silhouette: float, energy_reg: float,
                   force_reg: float, weights: LossWeights) -> float:
    return (image + weights.silhouette_weight * silhouette
            + weights.energy_weight * energy_reg
            + weights.force_weight * force_reg)


def total_tex_loss(image: float, smoothness: float, weights: LossWeights) -> float:
    return image + weights.texture_weight * smoothness
