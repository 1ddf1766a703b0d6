"""Reconstruction quality metrics: Chamfer, point-to-surface, depth error.

Nearest-neighbor queries go through a uniform spatial grid; the grid only
prunes candidates, while every surviving distance is computed with the exact
same arithmetic a brute-force scan would use, so results agree with an O(M^2)
oracle to the bit.
"""

from __future__ import annotations

import math

import numpy as np

_AREA_EPS = 1e-12
_CHUNK = 128  # points per block in the point-triangle sweep

# Shared seed for evaluation-time surface sampling. Ground-truth clouds and
# reconstruction-side samples for dynamic frame n both use seed
# METRIC_SAMPLE_SEED + n, so a perfect reconstruction scores exactly zero.
METRIC_SAMPLE_SEED = 1234


class MetricError(Exception):
    """Invalid metric input (empty cloud, degenerate surface, empty ROI)."""


def _validate_cloud(points: np.ndarray, name: str) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise MetricError(f"{name}: expected nonempty (M, 3) cloud, got {pts.shape}")
    if not np.isfinite(pts).all():
        raise MetricError(f"{name}: non-finite coordinates")
    return pts


def _check_power(power: int) -> int:
    if power not in (1, 2):
        raise MetricError(f"power must be 1 or 2, got {power}")
    return int(power)


# ---------------------------------------------------------------------------
# Uniform-grid nearest neighbor

class _UniformGrid:
    """Point buckets on a uniform cubic grid, queried ring by ring.

    A cell at Chebyshev ring r is at least (r-1)*cell away, so the search can
    stop once that bound exceeds the best squared distance found.
    """

    def __init__(self, points: np.ndarray, target_per_cell: float = 4.0):
        self.points = points
        self.origin = points.min(axis=0)
        extent = points.max(axis=0) - self.origin
        span = float(extent.max())
        n_cells_goal = max(points.shape[0] / target_per_cell, 1.0)
        self.cell = span / math.ceil(n_cells_goal ** (1.0 / 3.0)) if span > 0 else 1.0
        self.dims = np.floor(extent / self.cell).astype(np.int64) + 1
        coords = np.floor((points - self.origin) / self.cell).astype(np.int64)
        np.clip(coords, 0, self.dims - 1, out=coords)
        keys = (coords[:, 0] * self.dims[1] + coords[:, 1]) * self.dims[2] + coords[:, 2]
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        uniq, starts = np.unique(sorted_keys, return_index=True)
        bounds = np.append(starts, len(order))
        self.buckets = {int(k): order[bounds[i]:bounds[i + 1]]
                        for i, k in enumerate(uniq)}
        self._rings: dict[int, list[tuple[int, int, int]]] = {}

    def _ring(self, r: int) -> list[tuple[int, int, int]]:
        """Offsets at Chebyshev radius exactly r, built from the cube faces."""
        ring = self._rings.get(r)
        if ring is not None:
            return ring
        if r == 0:
            ring = [(0, 0, 0)]
        else:
            full = range(-r, r + 1)
            inner = range(-r + 1, r)
            ring = [(ox, oy, oz) for ox in (-r, r) for oy in full for oz in full]
            ring += [(ox, oy, oz) for ox in inner for oy in (-r, r) for oz in full]
            ring += [(ox, oy, oz) for ox in inner for oy in inner for oz in (-r, r)]
        self._rings[r] = ring
        return ring

    def nearest_sqdist(self, q: np.ndarray) -> float:
        qc = np.floor((q - self.origin) / self.cell).astype(np.int64)
        r_max = int(np.maximum(np.abs(qc), np.abs(qc - (self.dims - 1))).max())
        # first ring whose cells can intersect the occupied box
        r_min = int(np.maximum(np.maximum(-qc, qc - (self.dims - 1)), 0).max())
        if r_min > int(self.dims.max()):
            # far outside the box: scanning every point beats ring bookkeeping
            # (identical arithmetic, so the result matches a brute scan bit
            # for bit either way)
            return float(np.sum((self.points - q) ** 2, axis=-1).min())
        best = np.inf
        d1, d2 = int(self.dims[1]), int(self.dims[2])
        for r in range(r_min, r_max + 1):
            lower = (r - 1) * self.cell
            if best < np.inf and lower > 0 and lower * lower > best:
                break
            for ox, oy, oz in self._ring(r):
                cx, cy, cz = int(qc[0]) + ox, int(qc[1]) + oy, int(qc[2]) + oz
                if cx < 0 or cy < 0 or cz < 0 or cx >= self.dims[0] \
                        or cy >= d1 or cz >= d2:
                    continue
                idx = self.buckets.get((cx * d1 + cy) * d2 + cz)
                if idx is None:
                    continue
                d2s = np.sum((self.points[idx] - q) ** 2, axis=-1)
                m = d2s.min()
                if m < best:
                    best = float(m)
        return best


def nn_distances(from_pts: np.ndarray, to_pts: np.ndarray) -> np.ndarray:
    """Exact nearest-neighbor distance from each query to the target cloud."""
    from_pts = _validate_cloud(from_pts, "query cloud")
    to_pts = _validate_cloud(to_pts, "target cloud")
    grid = _UniformGrid(to_pts)
    out = np.empty(len(from_pts))
    for i, q in enumerate(from_pts):
        out[i] = grid.nearest_sqdist(q)
    return np.sqrt(out)


def chamfer(cloud_a: np.ndarray, cloud_b: np.ndarray, power: int = 2) -> float:
    """Symmetric Chamfer distance: both directed mean NN distances, powered."""
    power = _check_power(power)
    da = nn_distances(cloud_a, cloud_b) ** power
    db = nn_distances(cloud_b, cloud_a) ** power
    return float(da.mean() + db.mean())


# ---------------------------------------------------------------------------
# Surface sampling and point-to-surface distance

def triangle_vertex_arrays(positions: np.ndarray, triangles: np.ndarray):
    tris = np.asarray(triangles, dtype=np.int64)
    v = np.asarray(positions, dtype=float)
    return v[tris[:, 0]], v[tris[:, 1]], v[tris[:, 2]]


def sample_surface(positions: np.ndarray, triangles: np.ndarray, n_points: int,
                   seed: int) -> np.ndarray:
    """Area-weighted uniform samples on the triangulated surface, seeded."""
    if n_points < 1:
        raise MetricError(f"n_points must be >= 1, got {n_points}")
    a, b, c = triangle_vertex_arrays(positions, triangles)
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)
    total = areas.sum()
    if total < _AREA_EPS:
        raise MetricError("degenerate surface: zero total area")
    rng = np.random.default_rng(seed)
    tri_idx = rng.choice(len(areas), size=n_points, p=areas / total)
    r1 = np.sqrt(rng.random(n_points))[:, None]
    r2 = rng.random(n_points)[:, None]
    return (a[tri_idx] * (1.0 - r1) + b[tri_idx] * (r1 * (1.0 - r2))
            + c[tri_idx] * (r1 * r2))


def point_triangle_sqdists(points: np.ndarray, a: np.ndarray, b: np.ndarray,
                           c: np.ndarray) -> np.ndarray:
    """Exact squared distances, (n_points, n_triangles), region-case method."""
    p = points[:, None, :]
    ab = (b - a)[None]
    ac = (c - a)[None]
    ap = p - a[None]
    d1 = np.sum(ab * ap, axis=-1)
    d2 = np.sum(ac * ap, axis=-1)
    bp = p - b[None]
    d3 = np.sum(ab * bp, axis=-1)
    d4 = np.sum(ac * bp, axis=-1)
    cp = p - c[None]
    d5 = np.sum(ab * cp, axis=-1)
    d6 = np.sum(ac * cp, axis=-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    def safe(x):
        return np.where(x != 0.0, x, 1.0)

    t_ab = (d1 / safe(d1 - d3))[..., None]
    t_ac = (d2 / safe(d2 - d6))[..., None]
    t_bc = ((d4 - d3) / safe((d4 - d3) + (d5 - d6)))[..., None]
    denom = (1.0 / safe(va + vb + vc))
    v = (vb * denom)[..., None]
    w = (vc * denom)[..., None]
    # conditions in the same priority order as the scalar region cascade; the
    # per-region closest-point expressions repeat the scalar reference's exact
    # operation order so accelerated and brute-force results agree to the bit
    conds = [
        (d1 <= 0.0) & (d2 <= 0.0),
        (d3 >= 0.0) & (d4 <= d3),
        (vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0),
        (d6 >= 0.0) & (d5 <= d6),
        (vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0),
        (va <= 0.0) & ((d4 - d3) >= 0.0) & ((d5 - d6) >= 0.0),
    ]
    a_b = a[None]
    b_b = np.broadcast_to(b[None], ap.shape)
    c_b = np.broadcast_to(c[None], ap.shape)
    cases = [
        np.broadcast_to(a_b, ap.shape),
        b_b,
        a_b + t_ab * ab,
        c_b,
        a_b + t_ac * ac,
        b_b + t_bc * (c - b)[None],
    ]
    q = np.select([m[..., None] & np.ones(3, dtype=bool) for m in conds],
                  cases, default=0.0)
    interior = ~np.logical_or.reduce(conds)
    if interior.any():
        q_int = a_b + ab * v + ac * w
        q = np.where(interior[..., None], q_int, q)
    return np.sum((p - q) ** 2, axis=-1)


def point_mesh_distances(points: np.ndarray, positions: np.ndarray,
                         triangles: np.ndarray) -> np.ndarray:
    """Exact distance of each point to the nearest triangle of the mesh."""
    points = _validate_cloud(points, "cloud")
    a, b, c = triangle_vertex_arrays(positions, triangles)
    if len(a) < 1:
        raise MetricError("empty triangle list")
    out = np.empty(len(points))
    for lo in range(0, len(points), _CHUNK):
        chunk = points[lo:lo + _CHUNK]
        out[lo:lo + _CHUNK] = np.sqrt(
            point_triangle_sqdists(chunk, a, b, c).min(axis=1))
    return out


def point_to_surface(cloud: np.ndarray, positions: np.ndarray,
                     triangles: np.ndarray, power: int = 2,
                     n_samples: int | None = None, seed: int = 0) -> float:
    """Symmetric point-to-surface distance.

    Cloud-to-mesh uses exact point-triangle distances; mesh-to-cloud draws
    area-weighted surface samples (as many as cloud points unless overridden)
    and takes their nearest-neighbor distances to the cloud.
    """
    power = _check_power(power)
    cloud = _validate_cloud(cloud, "cloud")
    d_cloud = point_mesh_distances(cloud, positions, triangles) ** power
    samples = sample_surface(positions, triangles,
                             n_samples if n_samples is not None else len(cloud),
                             seed)
    d_surf = nn_distances(samples, cloud) ** power
    return float(d_cloud.mean() + d_surf.mean())


# ---------------------------------------------------------------------------
# Depth error

def depth_error(depth_gt: np.ndarray, depth_r: np.ndarray) -> float:
    """Mean absolute difference where both depth maps are valid (finite)."""
    if depth_gt.shape != depth_r.shape:
        raise MetricError(f"depth shape mismatch: {depth_gt.shape} vs {depth_r.shape}")
    valid = np.isfinite(depth_gt) & np.isfinite(depth_r)
    if not valid.any():
        raise MetricError("empty region of interest: no pixel valid in both maps")
    return float(np.mean(np.abs(depth_gt[valid] - depth_r[valid])))


def depth_error_frames(depths_gt: np.ndarray, depths_r: np.ndarray) -> float:
    """Per-scene depth error: mean of per-frame values."""
    if depths_gt.shape != depths_r.shape:
        raise MetricError("depth stack shape mismatch")
    return float(np.mean([depth_error(g, r)
                          for g, r in zip(depths_gt, depths_r)]))
