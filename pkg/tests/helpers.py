"""Shared test oracles: finite differences and brute-force geometry queries.

These are kept independent of the library's internals on purpose; they are the
reference implementations the fast paths are checked against.
"""

from __future__ import annotations

import numpy as np


def fd_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def fd_scalar(f, x: float, h: float = 1e-6) -> float:
    """Central difference of scalar f w.r.t. a scalar argument."""
    return (f(x + h) - f(x - h)) / (2.0 * h)


def fd_jacobian(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of vector-valued f; returns (out_size, in_size)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x), dtype=float)
    jac = np.zeros((f0.size, x.size))
    flat = x.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = np.asarray(f(x), dtype=float).ravel()
        flat[k] = orig - h
        fm = np.asarray(f(x), dtype=float).ravel()
        flat[k] = orig
        jac[:, k] = (fp - fm) / (2.0 * h)
    return jac


def rel_err(a, b, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)


# ---------------------------------------------------------------------------
# Brute-force metric oracles

def brute_nn_dists(from_pts: np.ndarray, to_pts: np.ndarray) -> np.ndarray:
    """For each point in from_pts, the distance to its nearest point in to_pts."""
    d2 = np.sum((from_pts[:, None, :] - to_pts[None, :, :]) ** 2, axis=-1)
    return np.sqrt(d2.min(axis=1))


def brute_chamfer(a: np.ndarray, b: np.ndarray, power: int) -> float:
    da = brute_nn_dists(a, b) ** power
    db = brute_nn_dists(b, a) ** power
    return float(da.mean() + db.mean())


def _dot3(u, v):
    # plain multiply-then-sum, bit-compatible with the library's vectorized
    # reductions (BLAS dot may fuse multiply-adds and round differently)
    return np.sum(u * v)


def closest_point_on_triangle_ref(p, a, b, c) -> np.ndarray:
    """Reference closest point on triangle abc to point p (region-case method)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = _dot3(ab, ap)
    d2 = _dot3(ac, ap)
    if d1 <= 0.0 and d2 <= 0.0:
        return a
    bp = p - b
    d3 = _dot3(ab, bp)
    d4 = _dot3(ac, bp)
    if d3 >= 0.0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        return a + (d1 / (d1 - d3)) * ab
    cp = p - c
    d5 = _dot3(ab, cp)
    d6 = _dot3(ac, cp)
    if d6 >= 0.0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        return a + (d2 / (d2 - d6)) * ac
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + ab * v + ac * w


def brute_point_mesh_dists(points: np.ndarray, vertices: np.ndarray,
                           triangles: np.ndarray) -> np.ndarray:
    """Exact distance of each point to the nearest triangle, brute force."""
    out = np.empty(len(points))
    for i, p in enumerate(points):
        best = np.inf
        for tri in triangles:
            q = closest_point_on_triangle_ref(p, vertices[tri[0]], vertices[tri[1]],
                                              vertices[tri[2]])
            best = min(best, float(np.sqrt(np.sum((p - q) ** 2))))
        out[i] = best
    return out
