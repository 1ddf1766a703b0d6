"""Software differentiable rasterizer with a pinhole camera model.

Projection follows the standard pinhole convention (x right, y down, z
forward): p = (fx * x / z + cx, fy * y / z + cy) in pixel coordinates, where
integer coordinates are pixel centers.

Rasterization is z-buffered with perspective-correct barycentric attribute
interpolation and bilinear texture lookup; no lighting. Boundary coverage is
made differentiable analytically: each triangle contributes a coverage ramp
alpha = clamp(0.5 + d, 0, 1) of its screen-space signed boundary distance d
(in pixels), and the pixel's soft mask is the clamped sum of triangle
coverages. The linear ramps of two triangles sharing an edge are exactly
complementary, so interior edges leave no seams; only true silhouette
boundaries ramp. Color is the nearest triangle's texture sample scaled by the
soft mask, depth is the nearest triangle's perspective-correct camera-space z
(+inf on background), and the mask is exactly zero wherever depth is the
sentinel.

``rasterize`` returns a record from which ``rasterize_backward`` replays the
chains in reverse: texture gradients through the bilinear weights, position
gradients through the screen-space barycentric/coverage derivatives composed
with the projection Jacobian
    [[fx/z, 0, -fx*x/z^2], [0, fy/z, -fy*y/z^2]].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEPTH_SENTINEL = np.inf
AA_WIDTH = 1.0          # coverage ramp width in pixels
_MIN_AREA2 = 1e-12      # degenerate screen triangles are skipped
_PAIR_SENTINEL = -1


class RenderError(Exception):
    """Invalid rendering input."""


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics plus world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray    # (3, 3), world -> camera
    translation: np.ndarray  # (3,)
    near: float = 1e-4

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @staticmethod
    def look_at(eye, target, up=(0.0, 1.0, 0.0), fx=300.0, fy=300.0,
                width=256, height=256, near=1e-4) -> "Camera":
        """Camera at eye looking toward target; image y runs against world up."""
        eye = np.asarray(eye, dtype=float)
        z_axis = np.asarray(target, dtype=float) - eye
        nz = np.linalg.norm(z_axis)
        if nz < 1e-12:
            raise RenderError("look_at: eye and target coincide")
        z_axis = z_axis / nz
        x_axis = np.cross(z_axis, np.asarray(up, dtype=float))
        nx = np.linalg.norm(x_axis)
        if nx < 1e-12:
            raise RenderError("look_at: up parallel to view direction")
        x_axis = x_axis / nx
        y_axis = np.cross(z_axis, x_axis)
        rot = np.stack([x_axis, y_axis, z_axis], axis=0)
        return Camera(fx=fx, fy=fy, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                      width=width, height=height, rotation=rot,
                      translation=-rot @ eye, near=near)


def project(camera: Camera, points: np.ndarray, strict: bool = True):
    """Project world points to (pixels (N,2), depths (N,), valid (N,)).

    With strict=True, points at or behind the near plane raise RenderError;
    otherwise they are flagged invalid (culled) and their pixel values are
    meaningless.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cam_pts = camera.world_to_camera(pts)
    z = cam_pts[:, 2]
    valid = z >= camera.near
    if strict and not valid.all():
        bad = np.flatnonzero(~valid)
        raise RenderError(f"points behind camera near plane: indices {bad.tolist()}")
    z_safe = np.where(valid, z, 1.0)
    px = camera.fx * cam_pts[:, 0] / z_safe + camera.cx
    py = camera.fy * cam_pts[:, 1] / z_safe + camera.cy
    return np.stack([px, py], axis=-1), z, valid


def project_backward(camera: Camera, points: np.ndarray, pixel_grads: np.ndarray,
                     depth_grads: np.ndarray | None = None) -> np.ndarray:
    """Pull image-space gradients back to world-space point gradients.

    Applies the transpose of the projection Jacobian then the transpose of the
    world-to-camera rotation. The returned per-point gradient of a pure pixel
    gradient is orthogonal to the camera-to-point direction.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cam_pts = camera.world_to_camera(pts)
    x, y, z = cam_pts[:, 0], cam_pts[:, 1], cam_pts[:, 2]
    gx = camera.fx / z * pixel_grads[:, 0]
    gy = camera.fy / z * pixel_grads[:, 1]
    gz = (-camera.fx * x / z ** 2 * pixel_grads[:, 0]
          - camera.fy * y / z ** 2 * pixel_grads[:, 1])
    if depth_grads is not None:
        gz = gz + depth_grads
    return np.stack([gx, gy, gz], axis=-1) @ camera.rotation


def projection_jacobian(camera: Camera, cam_point: np.ndarray) -> np.ndarray:
    """(2, 3) Jacobian of the pixel coordinates w.r.t. a camera-space point."""
    x, y, z = cam_point
    return np.array([[camera.fx / z, 0.0, -camera.fx * x / z ** 2],
                     [0.0, camera.fy / z, -camera.fy * y / z ** 2]])


# ---------------------------------------------------------------------------
# Bilinear texture sampling

def _bilinear_setup(texture: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Corner indices, fractional weights and texel coords for uv in [0,1]^2."""
    th, tw = texture.shape[:2]
    tx = np.clip(u, 0.0, 1.0) * (tw - 1)
    ty = np.clip(v, 0.0, 1.0) * (th - 1)
    ix = np.clip(tx.astype(np.int64), 0, max(tw - 2, 0))
    iy = np.clip(ty.astype(np.int64), 0, max(th - 2, 0))
    fx = tx - ix
    fy = ty - iy
    return ix, iy, fx, fy


def sample_texture(texture: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Bilinear sample plus derivatives w.r.t. the continuous texel coords."""
    th, tw = texture.shape[:2]
    ix, iy, fx, fy = _bilinear_setup(texture, u, v)
    c00 = texture[iy, ix]
    c01 = texture[iy, np.minimum(ix + 1, tw - 1)]
    c10 = texture[np.minimum(iy + 1, th - 1), ix]
    c11 = texture[np.minimum(iy + 1, th - 1), np.minimum(ix + 1, tw - 1)]
    wx, wy = fx[..., None], fy[..., None]
    color = ((1 - wy) * ((1 - wx) * c00 + wx * c01)
             + wy * ((1 - wx) * c10 + wx * c11))
    dc_dtx = (1 - wy) * (c01 - c00) + wy * (c11 - c10)
    dc_dty = (1 - wx) * (c10 - c00) + wx * (c11 - c01)
    return color, dc_dtx, dc_dty


# ---------------------------------------------------------------------------
# Rasterization

@dataclass
class RasterRecord:
    """Forward state retained for rasterize_backward."""

    positions: np.ndarray
    triangles: np.ndarray
    uvs: np.ndarray
    texture: np.ndarray
    camera: Camera
    pair_tri: np.ndarray      # (P,) triangle index per candidate pair
    pair_pix: np.ndarray      # (P,) flat pixel index per candidate pair
    win_pair: np.ndarray      # (H*W,) index into pair arrays, -1 on background
    alpha_sum: np.ndarray     # (H*W,) pre-clamp coverage sum
    mask_flat: np.ndarray     # (H*W,) final soft mask
    # deterministic recomputation results shared between forward and backward;
    # purely a speed cache, never part of the render semantics
    cache: dict = field(default_factory=dict, repr=False)


@dataclass
class RenderOutput:
    rgb: np.ndarray            # (H, W, 3) in [0, 1]
    mask: np.ndarray           # (H, W) in [0, 1]
    depth: np.ndarray          # (H, W), +inf where uncovered
    record: RasterRecord | None = None


def _screen_geometry(record_or_args):
    """Projected screen coords, camera z, and the per-triangle keep mask."""
    positions, triangles, camera = record_or_args
    pix, z, valid = project(camera, positions, strict=False)
    tri_ok = valid[triangles].all(axis=1)
    return pix, z, tri_ok


def _build_pairs(pix, tri_ok, triangles, width, height):
    """Candidate (triangle, pixel) pairs from AA-padded screen bounding boxes."""
    tri_idx = np.flatnonzero(tri_ok)
    if len(tri_idx) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    corners = pix[triangles[tri_idx]]            # (T, 3, 2)
    pad = 0.5 * AA_WIDTH + 0.5
    x0 = np.clip(np.floor(corners[:, :, 0].min(axis=1) - pad), 0, width - 1).astype(np.int64)
    x1 = np.clip(np.ceil(corners[:, :, 0].max(axis=1) + pad), 0, width - 1).astype(np.int64)
    y0 = np.clip(np.floor(corners[:, :, 1].min(axis=1) - pad), 0, height - 1).astype(np.int64)
    y1 = np.clip(np.ceil(corners[:, :, 1].max(axis=1) + pad), 0, height - 1).astype(np.int64)
    w = x1 - x0 + 1
    h = y1 - y0 + 1
    # drop fully off-screen boxes (their clipped extent collapses)
    on = (corners[:, :, 0].max(axis=1) >= -pad) & (corners[:, :, 0].min(axis=1) <= width - 1 + pad) \
        & (corners[:, :, 1].max(axis=1) >= -pad) & (corners[:, :, 1].min(axis=1) <= height - 1 + pad)
    tri_idx, x0, y0, w, h = tri_idx[on], x0[on], y0[on], w[on], h[on]
    sizes = w * h
    if sizes.sum() == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    pair_tri = np.repeat(tri_idx, sizes)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    local = np.arange(sizes.sum(), dtype=np.int64) - np.repeat(offsets, sizes)
    px = np.repeat(x0, sizes) + local % np.repeat(w, sizes)
    py = np.repeat(y0, sizes) + local // np.repeat(w, sizes)
    return pair_tri, py * width + px


def _pair_coverage(pix, pair_tri, pair_pix, triangles, width):
    """Per-pair screen barycentrics and signed-distance coverage.

    Returns (bary (P,3) unclamped, alpha (P,), area2 (P,), valid (P,)).
    """
    tv = triangles[pair_tri]
    p0, p1, p2 = pix[tv[:, 0]], pix[tv[:, 1]], pix[tv[:, 2]]
    qx = (pair_pix % width).astype(float)
    qy = (pair_pix // width).astype(float)

    e1 = p1 - p0
    e2 = p2 - p0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    ok = np.abs(det) > _MIN_AREA2
    det_safe = np.where(ok, det, 1.0)
    rx = qx - p0[:, 0]
    ry = qy - p0[:, 1]
    beta = (rx * e2[:, 1] - ry * e2[:, 0]) / det_safe
    gamma = (e1[:, 0] * ry - e1[:, 1] * rx) / det_safe
    bary = np.stack([1.0 - beta - gamma, beta, gamma], axis=-1)

    sigma = np.sign(det_safe)
    dmin = np.full(len(pair_tri), np.inf)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        pa, pb = pix[tv[:, a]], pix[tv[:, b]]
        ex = pb[:, 0] - pa[:, 0]
        ey = pb[:, 1] - pa[:, 1]
        ln = np.sqrt(ex * ex + ey * ey)
        ln = np.maximum(ln, 1e-12)
        cross = ex * (qy - pa[:, 1]) - ey * (qx - pa[:, 0])
        dmin = np.minimum(dmin, sigma * cross / ln)
    alpha = np.clip(0.5 + dmin / AA_WIDTH, 0.0, 1.0)
    alpha = np.where(ok, alpha, 0.0)
    return bary, alpha, det, ok


def _winner_attributes(record: RasterRecord):
    """Recompute interpolation state for the winning pair of each covered pixel."""
    pix, z, _ = _screen_geometry((record.positions, record.triangles, record.camera))
    covered = np.flatnonzero(record.win_pair >= 0)
    wp = record.win_pair[covered]
    tri = record.pair_tri[wp]
    tv = record.triangles[tri]
    width = record.camera.width

    bary = record.cache.get("winner_bary")
    if bary is None:
        bary, _, _, _ = _pair_coverage(pix, tri, record.pair_pix[wp],
                                       record.triangles, width)
        record.cache["winner_bary"] = bary
    bclip = np.maximum(bary, 0.0)
    s = bclip.sum(axis=1)
    bhat = bclip / s[:, None]
    zv = z[tv]                       # (C, 3)
    rho = bhat / zv
    wsum = rho.sum(axis=1)
    wpersp = rho / wsum[:, None]
    uv = np.einsum("ci,cij->cj", wpersp, record.uvs[tv])
    depth = 1.0 / wsum
    return covered, tri, tv, pix, z, bary, bclip, s, bhat, zv, rho, wsum, wpersp, uv, depth


def rasterize(positions: np.ndarray, triangles: np.ndarray, uvs: np.ndarray,
              texture: np.ndarray, camera: Camera,
              keep_record: bool = True) -> RenderOutput:
    """Render a textured triangle mesh; see the module docstring for semantics."""
    if texture.ndim != 3 or texture.shape[2] != 3:
        raise RenderError(f"texture must be (H, W, 3), got {texture.shape}")
    h, w = camera.height, camera.width
    n_pix = h * w

    pix, z, tri_ok = _screen_geometry((positions, triangles, camera))
    pair_tri, pair_pix = _build_pairs(pix, tri_ok, triangles, w, h)

    if len(pair_tri):
        bary, alpha, det, ok = _pair_coverage(pix, pair_tri, pair_pix, triangles, w)
        live = alpha > 0.0
        pair_tri, pair_pix = pair_tri[live], pair_pix[live]
        bary, alpha = bary[live], alpha[live]
    else:
        alpha = np.zeros(0)
        bary = np.zeros((0, 3))

    alpha_sum = np.zeros(n_pix)
    win_pair = np.full(n_pix, _PAIR_SENTINEL, dtype=np.int64)
    depth_flat = np.full(n_pix, DEPTH_SENTINEL)

    if len(pair_tri):
        np.add.at(alpha_sum, pair_pix, alpha)
        # perspective-correct candidate depth per pair (clamped barycentrics)
        tv = triangles[pair_tri]
        bclip = np.maximum(bary, 0.0)
        bhat = bclip / bclip.sum(axis=1)[:, None]
        cand_depth = 1.0 / (bhat / z[tv]).sum(axis=1)
        np.minimum.at(depth_flat, pair_pix, cand_depth)
        eq = cand_depth == depth_flat[pair_pix]
        pair_index = np.arange(len(pair_tri), dtype=np.int64)
        big = np.full(n_pix, np.iinfo(np.int64).max, dtype=np.int64)
        np.minimum.at(big, pair_pix[eq], pair_index[eq])
        has = big < np.iinfo(np.int64).max
        win_pair[has] = big[has]

    mask_flat = np.minimum(alpha_sum, 1.0)
    mask_flat[win_pair == _PAIR_SENTINEL] = 0.0

    rgb = np.zeros((n_pix, 3))
    record = RasterRecord(positions=positions, triangles=triangles, uvs=uvs,
                          texture=texture, camera=camera, pair_tri=pair_tri,
                          pair_pix=pair_pix, win_pair=win_pair,
                          alpha_sum=alpha_sum, mask_flat=mask_flat)
    covered = np.flatnonzero(win_pair >= 0)
    if len(covered):
        (_, _, _, _, _, _, _, _, _, _, _, _, _, uv, depth_win) = _winner_attributes(record)
        tex_trio = sample_texture(texture, uv[:, 0], uv[:, 1])
        record.cache["tex_trio"] = tex_trio
        color = tex_trio[0]
        rgb[covered] = mask_flat[covered, None] * color
        depth_flat[covered] = depth_win
        depth_flat[win_pair == _PAIR_SENTINEL] = DEPTH_SENTINEL

    return RenderOutput(rgb=rgb.reshape(h, w, 3), mask=mask_flat.reshape(h, w),
                        depth=depth_flat.reshape(h, w),
                        record=record if keep_record else None)


def rasterize_backward(record: RasterRecord, grad_rgb: np.ndarray,
                       grad_mask: np.ndarray | None = None,
                       grad_depth: np.ndarray | None = None):
    """Adjoint of rasterize: returns (grad_positions, grad_texture).

    grad_depth entries on background pixels are ignored (their depth is the
    constant sentinel).
    """
    cam = record.camera
    h, w = cam.height, cam.width
    n_pts = record.positions.shape[0]
    g_rgb = grad_rgb.reshape(-1, 3)
    g_mask = np.zeros(h * w) if grad_mask is None else grad_mask.reshape(-1)
    g_depth = None if grad_depth is None else grad_depth.reshape(-1)

    grad_pix = np.zeros((n_pts, 2))
    grad_z = np.zeros(n_pts)
    grad_tex = np.zeros_like(record.texture)

    covered = np.flatnonzero(record.win_pair >= 0)
    if len(covered):
        (covered, tri, tv, pix, z, bary, bclip, s, bhat, zv, rho, wsum, wpersp,
         uv, depth) = _winner_attributes(record)
        texture = record.texture
        th, tw = texture.shape[:2]
        tex_trio = record.cache.get("tex_trio")
        if tex_trio is None:
            tex_trio = sample_texture(texture, uv[:, 0], uv[:, 1])
        color, dc_dtx, dc_dty = tex_trio
        a_pix = record.mask_flat[covered]

        g_rgb_c = g_rgb[covered]                       # (C, 3)
        g_color = a_pix[:, None] * g_rgb_c
        g_alpha_from_rgb = np.einsum("ci,ci->c", g_rgb_c, color)

        # texture scatter through the bilinear weights
        ix, iy, fx, fy = _bilinear_setup(texture, uv[:, 0], uv[:, 1])
        ix1 = np.minimum(ix + 1, tw - 1)
        iy1 = np.minimum(iy + 1, th - 1)
        for iyc, ixc, wgt in ((iy, ix, (1 - fy) * (1 - fx)), (iy, ix1, (1 - fy) * fx),
                              (iy1, ix, fy * (1 - fx)), (iy1, ix1, fy * fx)):
            np.add.at(grad_tex, (iyc, ixc), wgt[:, None] * g_color)

        # uv path: through the texture's spatial gradient
        g_tx = np.einsum("ci,ci->c", g_color, dc_dtx)
        g_ty = np.einsum("ci,ci->c", g_color, dc_dty)
        g_uv = np.stack([g_tx * (tw - 1), g_ty * (th - 1)], axis=-1)

        # uv = sum_i w_i uv_i
        g_w = np.einsum("cj,cij->ci", g_uv, record.uvs[tv])

        # depth = 1 / wsum
        g_wsum = np.zeros(len(covered))
        if g_depth is not None:
            g_wsum -= g_depth[covered] / wsum ** 2

        # w_i = rho_i / wsum
        g_rho = g_w / wsum[:, None]
        g_wsum += -np.einsum("ci,ci->c", g_w, rho) / wsum ** 2
        g_rho += g_wsum[:, None]

        # rho_i = bhat_i / z_i
        g_bhat = g_rho / zv
        g_zv = -g_rho * bhat / zv ** 2

        # bhat = bclip / s
        g_bclip = (g_bhat - np.einsum("ci,ci->c", g_bhat, bhat)[:, None]) / s[:, None]
        g_bary = np.where(bary > 0.0, g_bclip, 0.0)

        # barycentrics to screen coordinates
        p0, p1, p2 = pix[tv[:, 0]], pix[tv[:, 1]], pix[tv[:, 2]]
        e1 = p1 - p0
        e2 = p2 - p0
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        qx = (record.pair_pix[record.win_pair[covered]] % w).astype(float)
        qy = (record.pair_pix[record.win_pair[covered]] // w).astype(float)
        rx = qx - p0[:, 0]
        ry = qy - p0[:, 1]
        beta = bary[:, 1]
        gamma = bary[:, 2]

        g_beta = g_bary[:, 1] - g_bary[:, 0]
        g_gamma = g_bary[:, 2] - g_bary[:, 0]
        g_nbeta = g_beta / det
        g_ngamma = g_gamma / det
        g_det = -(g_beta * beta + g_gamma * gamma) / det

        g_e1 = np.zeros_like(e1)
        g_e2 = np.zeros_like(e2)
        g_r = np.zeros((len(covered), 2))
        # n_beta = rx*e2y - ry*e2x
        g_r[:, 0] += g_nbeta * e2[:, 1]
        g_e2[:, 1] += g_nbeta * rx
        g_r[:, 1] -= g_nbeta * e2[:, 0]
        g_e2[:, 0] -= g_nbeta * ry
        # n_gamma = e1x*ry - e1y*rx
        g_e1[:, 0] += g_ngamma * ry
        g_r[:, 1] += g_ngamma * e1[:, 0]
        g_e1[:, 1] -= g_ngamma * rx
        g_r[:, 0] -= g_ngamma * e1[:, 1]
        # det = e1x*e2y - e1y*e2x
        g_e1[:, 0] += g_det * e2[:, 1]
        g_e2[:, 1] += g_det * e1[:, 0]
        g_e1[:, 1] -= g_det * e2[:, 0]
        g_e2[:, 0] -= g_det * e1[:, 1]

        g_p0 = -(g_r + g_e1 + g_e2)
        np.add.at(grad_pix, tv[:, 0], g_p0)
        np.add.at(grad_pix, tv[:, 1], g_e1)
        np.add.at(grad_pix, tv[:, 2], g_e2)
        np.add.at(grad_z, tv.ravel(), g_zv.ravel())

        # coverage path through the winner is handled with all pairs below
        g_alpha_pixel = g_mask.copy()
        np.add.at(g_alpha_pixel, covered, g_alpha_from_rgb)
    else:
        g_alpha_pixel = g_mask.copy()

    # alpha path: every candidate pair of every pixel with unsaturated coverage
    if len(record.pair_tri):
        pix_all, z_all, _ = _screen_geometry((record.positions, record.triangles,
                                              record.camera))
        live = record.alpha_sum[record.pair_pix] < 1.0
        g_a = np.where(live, g_alpha_pixel[record.pair_pix], 0.0)
        sel = np.flatnonzero(g_a != 0.0)
        if len(sel):
            ptri = record.pair_tri[sel]
            ppix = record.pair_pix[sel]
            tvs = record.triangles[ptri]
            qx = (ppix % w).astype(float)
            qy = (ppix // w).astype(float)
            p0, p1, p2 = pix_all[tvs[:, 0]], pix_all[tvs[:, 1]], pix_all[tvs[:, 2]]
            e1 = p1 - p0
            e2 = p2 - p0
            det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
            sigma = np.sign(det)
            dists = np.empty((len(sel), 3))
            corners = (p0, p1, p2)
            for k, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
                pa, pb = corners[a], corners[b]
                ex = pb[:, 0] - pa[:, 0]
                ey = pb[:, 1] - pa[:, 1]
                ln = np.maximum(np.sqrt(ex * ex + ey * ey), 1e-12)
                cross = ex * (qy - pa[:, 1]) - ey * (qx - pa[:, 0])
                dists[:, k] = sigma * cross / ln
            dmin = dists.min(axis=1)
            argmin = dists.argmin(axis=1)
            in_band = (dmin > -0.5 * AA_WIDTH) & (dmin < 0.5 * AA_WIDTH)
            g_d = np.where(in_band, g_a[sel] / AA_WIDTH, 0.0)

            for k, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
                pick = np.flatnonzero((argmin == k) & (g_d != 0.0))
                if not len(pick):
                    continue
                pa = corners[a][pick]
                pb = corners[b][pick]
                ex = pb[:, 0] - pa[:, 0]
                ey = pb[:, 1] - pa[:, 1]
                ln = np.maximum(np.sqrt(ex * ex + ey * ey), 1e-12)
                rxk = qx[pick] - pa[:, 0]
                ryk = qy[pick] - pa[:, 1]
                cross = ex * ryk - ey * rxk
                sg = sigma[pick]
                gdk = g_d[pick]
                g_cross = gdk * sg / ln
                g_ln = -gdk * sg * cross / ln ** 2
                g_ex = g_cross * ryk + g_ln * ex / ln
                g_ey = -g_cross * rxk + g_ln * ey / ln
                g_rx = -g_cross * ey
                g_ry = g_cross * ex
                g_pb = np.stack([g_ex, g_ey], axis=-1)
                g_pa = -g_pb - np.stack([g_rx, g_ry], axis=-1)
                np.add.at(grad_pix, tvs[pick, b], g_pb)
                np.add.at(grad_pix, tvs[pick, a], g_pa)

    grad_positions = project_backward(record.camera, record.positions, grad_pix, grad_z)
    return grad_positions, grad_tex
