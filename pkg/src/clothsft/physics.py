"""Mass-spring cloth physics: energies, forces, Jacobians, implicit time stepping.

Energy model (homogeneous stiffnesses):
  stretch  E = 1/2 * Y * (|e| - L0)^2      per grid edge
  bend     E = 1/2 * B * (theta - theta0)^2  per straight edge pair
  shear    E = 1/2 * S * (phi - phi0)^2      per right-angle edge pair

Forces are F = -dE/dx; they depend on positions only, so dF/dv = 0 identically.

Time integration is backward Euler on velocities with post-solve damping:

  (M - dt^2 * dF/dx) v' = M v_n + dt * F_total(x_n)
  v_{n+1} = damping * v'
  x_{n+1} = x_n + dt * v_{n+1}

Pinned vertices keep their position: their rows and columns of the implicit
system are replaced by identity and their right-hand side by zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse

from .geometry import ClothMesh, RestQuantities

logger = logging.getLogger(__name__)

LEN_EPS = 1e-9   # degenerate-edge clamp for norms
DOT_EPS = 1e-18  # squared-length clamp

# Relative step for the directional derivative of the force Jacobian used in
# the adjoint (third-order energy term); cbrt(double eps) is the central
# difference sweet spot.
_JVP_REL_STEP = 6.0e-6


class SolverError(Exception):
    """Linear solve failed (non-convergence or singular system)."""


@dataclass
class ClothState:
    """Simulation state: positions and velocities, both (N, 3) float64."""

    positions: np.ndarray
    velocities: np.ndarray

    def copy(self) -> "ClothState":
        return ClothState(self.positions.copy(), self.velocities.copy())


@dataclass(frozen=True)
class Stiffness:
    """Homogeneous stiffness coefficients for the three energy terms."""

    stretch: float
    bend: float
    shear: float


@dataclass(frozen=True)
class SimParams:
    """Integrator settings: substep size, substeps per frame, velocity damping."""

    dt: float = 0.005
    substeps: int = 4
    damping: float = 0.9

    @property
    def frame_dt(self) -> float:
        return self.dt * self.substeps

    def validate(self) -> None:
        if self.dt <= 0 or self.substeps < 1 or not (0.0 < self.damping <= 1.0):
            raise ValueError(f"invalid SimParams {self}")


@dataclass(frozen=True)
class SolverConfig:
    """Implicit-system solver selection.

    "dense" uses an LU factorization; "pcg" a Jacobi-preconditioned conjugate
    gradient (rtol, max iterations 10 * 3N); "auto" picks dense for systems up
    to ``dense_limit`` vertices.
    """

    method: str = "auto"
    rtol: float = 1e-9
    dense_limit: int = 200

    def use_dense(self, n_vertices: int) -> bool:
        if self.method == "dense":
            return True
        if self.method == "pcg":
            return False
        return n_vertices <= self.dense_limit


# ---------------------------------------------------------------------------
# Energies

def _edge_context(positions: np.ndarray, rest: RestQuantities):
    e = positions[rest.edges[:, 1]] - positions[rest.edges[:, 0]]
    r = np.linalg.norm(e, axis=-1)
    r = np.maximum(r, LEN_EPS)
    return e, r, e / r[:, None], r - rest.rest_lengths


def _angle_context(positions: np.ndarray, triples: np.ndarray, rest_angles: np.ndarray):
    """Per-triple angle, gradient and Hessian blocks in (u, w) coordinates.

    u = x_i - x_j and w = x_k - x_j are the direction vectors from the middle
    vertex. Returns (theta - rest, gu, gw, Huu, Huw, Hwu, Hww); H blocks are
    (n, 3, 3). The cross-product norm is clamped so that exactly collinear
    configurations produce zero gradient instead of NaN (the energy itself is
    smooth there because theta - theta0 vanishes with the same order).
    """
    u = positions[triples[:, 0]] - positions[triples[:, 1]]
    w = positions[triples[:, 2]] - positions[triples[:, 1]]
    a2 = np.maximum(np.einsum("ij,ij->i", u, u), DOT_EPS)
    b2 = np.maximum(np.einsum("ij,ij->i", w, w), DOT_EPS)
    c = np.einsum("ij,ij->i", u, w)
    # theta must use the raw cross norm so it matches pair_angles bit for bit
    # (rest angles are measured there); only the 1/s factors are clamped.
    s_raw = np.linalg.norm(np.cross(u, w), axis=-1)
    theta = np.arctan2(s_raw, c)
    dq = theta - rest_angles
    s = np.maximum(s_raw, LEN_EPS)

    inv_s = 1.0 / s
    gu = (c[:, None] * u / a2[:, None] - w) * inv_s[:, None]
    gw = (c[:, None] * w / b2[:, None] - u) * inv_s[:, None]

    eye = np.eye(3)
    uu = np.einsum("ni,nj->nij", u, u)
    ww = np.einsum("ni,nj->nij", w, w)
    uw = np.einsum("ni,nj->nij", u, w)
    # ds/du = (b2*u - c*w)/s and ds/dw = (a2*w - c*u)/s
    dsu = (b2[:, None] * u - c[:, None] * w) * inv_s[:, None]
    dsw = (a2[:, None] * w - c[:, None] * u) * inv_s[:, None]

    huu = (inv_s[:, None, None]
           * ((uw + c[:, None, None] * eye) / a2[:, None, None]
              - 2.0 * c[:, None, None] * uu / (a2 ** 2)[:, None, None])
           - np.einsum("ni,nj->nij", gu, dsu) * inv_s[:, None, None])
    huw = (inv_s[:, None, None] * (uu / a2[:, None, None] - eye)
           - np.einsum("ni,nj->nij", gu, dsw) * inv_s[:, None, None])
    hwu = (inv_s[:, None, None] * (ww / b2[:, None, None] - eye)
           - np.einsum("ni,nj->nij", gw, dsu) * inv_s[:, None, None])
    hww = (inv_s[:, None, None]
           * ((np.einsum("ni,nj->nij", w, u) + c[:, None, None] * eye) / b2[:, None, None]
              - 2.0 * c[:, None, None] * ww / (b2 ** 2)[:, None, None])
           - np.einsum("ni,nj->nij", gw, dsw) * inv_s[:, None, None])
    return dq, gu, gw, huu, huw, hwu, hww


def stretch_energy(positions: np.ndarray, rest: RestQuantities, stiffness: float) -> float:
    _, _, _, ext = _edge_context(positions, rest)
    return 0.5 * stiffness * float(np.dot(ext, ext))


def _angle_energy(positions, triples, rest_angles, stiffness) -> float:
    from .geometry import pair_angles

    dq = pair_angles(positions, triples) - rest_angles
    return 0.5 * stiffness * float(np.dot(dq, dq))


def bend_energy(positions: np.ndarray, rest: RestQuantities, stiffness: float) -> float:
    return _angle_energy(positions, rest.bend_pairs, rest.rest_bend_angles, stiffness)


def shear_energy(positions: np.ndarray, rest: RestQuantities, stiffness: float) -> float:
    return _angle_energy(positions, rest.shear_pairs, rest.rest_shear_angles, stiffness)


def total_energy(positions: np.ndarray, rest: RestQuantities, stiff: Stiffness) -> float:
    return (stretch_energy(positions, rest, stiff.stretch)
            + bend_energy(positions, rest, stiff.bend)
            + shear_energy(positions, rest, stiff.shear))


def energy_parts(positions: np.ndarray, rest: RestQuantities) -> np.ndarray:
    """Unit-stiffness energies (stretch, bend, shear); total = parts . (Y, B, S)."""
    return np.array([
        stretch_energy(positions, rest, 1.0),
        bend_energy(positions, rest, 1.0),
        shear_energy(positions, rest, 1.0),
    ])


# ---------------------------------------------------------------------------
# Forces

def _scatter_angle_forces(out, triples, fu, fw) -> None:
    np.add.at(out, triples[:, 0], fu)
    np.add.at(out, triples[:, 2], fw)
    np.add.at(out, triples[:, 1], -(fu + fw))


def internal_forces(positions: np.ndarray, rest: RestQuantities, stiff: Stiffness) -> np.ndarray:
    """F = -dE/dx, (N, 3). Pinning is not applied here."""
    n = positions.shape[0]
    out = np.zeros((n, 3))
    _, _, ehat, ext = _edge_context(positions, rest)
    f_edge = (stiff.stretch * ext)[:, None] * ehat  # magnitude on vertex j is -Y*ext*ehat
    np.add.at(out, rest.edges[:, 0], f_edge)
    np.add.at(out, rest.edges[:, 1], -f_edge)

    for triples, rest_angles, k in ((rest.bend_pairs, rest.rest_bend_angles, stiff.bend),
                                    (rest.shear_pairs, rest.rest_shear_angles, stiff.shear)):
        if k == 0.0 or len(triples) == 0:
            continue
        dq, gu, gw, *_ = _angle_context(positions, triples, rest_angles)
        coef = (-k * dq)[:, None]
        _scatter_angle_forces(out, triples, coef * gu, coef * gw)
    return out


def force_stiffness_dots(positions: np.ndarray, rest: RestQuantities,
                         lam: np.ndarray) -> np.ndarray:
    """(lam . dF/dY, lam . dF/dB, lam . dF/dS) without assembling anything.

    F is linear in each stiffness, so these are dot products with the
    unit-stiffness force parts.
    """
    unit = Stiffness(1.0, 0.0, 0.0)
    dots = np.empty(3)
    dots[0] = float(np.vdot(internal_forces(positions, rest, unit), lam))
    dots[1] = float(np.vdot(internal_forces(positions, rest, Stiffness(0.0, 1.0, 0.0)), lam))
    dots[2] = float(np.vdot(internal_forces(positions, rest, Stiffness(0.0, 0.0, 1.0)), lam))
    return dots


# ---------------------------------------------------------------------------
# Force Jacobian dF/dx (dF/dv is identically zero)

def _stretch_blocks(positions, rest, k):
    """Per-edge energy-Hessian block K with J[jj] = J[ii] = -k*K, J[ij] = +k*K."""
    _, r, ehat, ext = _edge_context(positions, rest)
    outer = np.einsum("ni,nj->nij", ehat, ehat)
    proj = np.eye(3) - outer
    return k * (outer + (ext / r)[:, None, None] * proj)


def _angle_blocks(positions, triples, rest_angles, k):
    """Energy-Hessian blocks for angle units, mapped to vertex slots (i, j, k).

    Returns (Hii, Hij, Hik, Hji, Hjj, Hjk, Hki, Hkj, Hkk), each (n, 3, 3),
    for the energy 1/2*k*(theta-theta0)^2; the force Jacobian contribution is
    the negative of these.
    """
    dq, gu, gw, huu, huw, hwu, hww = _angle_context(positions, triples, rest_angles)
    d = dq[:, None, None]
    hii = d * huu
    hik = d * huw
    hki = d * hwu
    hkk = d * hww
    hij = -(hii + hik)
    hji = -(hii + hki)
    hkj = -(hki + hkk)
    hjk = -(hik + hkk)
    hjj = hii + hik + hki + hkk

    gi, gk = gu, gw
    gj = -(gu + gw)
    blocks = [hii, hij, hik, hji, hjj, hjk, hki, hkj, hkk]
    gs = [gi, gj, gk]
    out = []
    for a in range(3):
        for b in range(3):
            out.append(k * (blocks[3 * a + b] + np.einsum("ni,nj->nij", gs[a], gs[b])))
    return out


def _coo_from_blocks(rows_idx, cols_idx, blocks):
    """Flatten (n,3,3) blocks at vertex index pairs into COO triplets."""
    n = len(rows_idx)
    r = (3 * rows_idx[:, None, None] + np.arange(3)[None, :, None])
    c = (3 * cols_idx[:, None, None] + np.arange(3)[None, None, :])
    return (np.broadcast_to(r, (n, 3, 3)).ravel(),
            np.broadcast_to(c, (n, 3, 3)).ravel(),
            blocks.ravel())


def force_jacobian(positions: np.ndarray, rest: RestQuantities,
                   stiff: Stiffness) -> scipy.sparse.coo_matrix:
    """Assemble dF/dx as a sparse (3N, 3N) matrix (symmetric up to rounding)."""
    n = positions.shape[0]
    rows, cols, vals = [], [], []

    kk = _stretch_blocks(positions, rest, stiff.stretch)
    i, j = rest.edges[:, 0], rest.edges[:, 1]
    for ridx, cidx, sign in ((i, i, -1.0), (j, j, -1.0), (i, j, 1.0), (j, i, 1.0)):
        r, c, v = _coo_from_blocks(ridx, cidx, sign * kk)
        rows.append(r); cols.append(c); vals.append(v)

    for triples, rest_angles, k in ((rest.bend_pairs, rest.rest_bend_angles, stiff.bend),
                                    (rest.shear_pairs, rest.rest_shear_angles, stiff.shear)):
        if len(triples) == 0:
            continue
        blocks = _angle_blocks(positions, triples, rest_angles, k)
        slots = [triples[:, 0], triples[:, 1], triples[:, 2]]
        for a in range(3):
            for b in range(3):
                r, c, v = _coo_from_blocks(slots[a], slots[b], -blocks[3 * a + b])
                rows.append(r); cols.append(c); vals.append(v)

    return scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(3 * n, 3 * n))


def jacobian_matvec(positions: np.ndarray, rest: RestQuantities, stiff: Stiffness,
                    vec: np.ndarray) -> np.ndarray:
    """(dF/dx) @ vec for vec of shape (N, 3), without global assembly."""
    out = np.zeros_like(vec)

    kk = _stretch_blocks(positions, rest, stiff.stretch)
    i, j = rest.edges[:, 0], rest.edges[:, 1]
    d = vec[j] - vec[i]
    kd = np.einsum("nij,nj->ni", kk, d)
    np.add.at(out, j, -kd)
    np.add.at(out, i, kd)

    for triples, rest_angles, k in ((rest.bend_pairs, rest.rest_bend_angles, stiff.bend),
                                    (rest.shear_pairs, rest.rest_shear_angles, stiff.shear)):
        if k == 0.0 or len(triples) == 0:
            continue
        dq, gu, gw, huu, huw, hwu, hww = _angle_context(positions, triples, rest_angles)
        tu = vec[triples[:, 0]] - vec[triples[:, 1]]
        tw = vec[triples[:, 2]] - vec[triples[:, 1]]
        gamma = np.einsum("ni,ni->n", gu, tu) + np.einsum("ni,ni->n", gw, tw)
        ru = (dq[:, None] * (np.einsum("nij,nj->ni", huu, tu) + np.einsum("nij,nj->ni", huw, tw))
              + gamma[:, None] * gu)
        rw = (dq[:, None] * (np.einsum("nij,nj->ni", hwu, tu) + np.einsum("nij,nj->ni", hww, tw))
              + gamma[:, None] * gw)
        np.add.at(out, triples[:, 0], -k * ru)
        np.add.at(out, triples[:, 2], -k * rw)
        np.add.at(out, triples[:, 1], k * (ru + rw))
    return out


def jacobian_stiffness_quadforms(positions: np.ndarray, rest: RestQuantities,
                                 lam: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """(lam . (dJ/dY) vec, lam . (dJ/dB) vec, lam . (dJ/dS) vec).

    J is linear in each stiffness, so each term is the quadratic form of the
    corresponding unit-stiffness Jacobian part.
    """
    out = np.empty(3)
    for idx, unit in enumerate((Stiffness(1.0, 0.0, 0.0),
                                Stiffness(0.0, 1.0, 0.0),
                                Stiffness(0.0, 0.0, 1.0))):
        out[idx] = float(np.vdot(lam, jacobian_matvec(positions, rest, unit, vec)))
    return out


def jacobian_directional_matvec_grad(positions: np.ndarray, rest: RestQuantities,
                                     stiff: Stiffness, lam: np.ndarray,
                                     vec: np.ndarray, scale: float) -> np.ndarray:
    """grad_x of lam . (dF/dx) vec, by central differencing J(x) lam along vec.

    Exact up to ~1e-9 relative; this is the only non-closed-form piece of the
    step adjoint (it involves third derivatives of the angle energies).
    """
    nv = np.linalg.norm(vec)
    if nv == 0.0:
        return np.zeros_like(positions)
    direction = vec / nv
    h = _JVP_REL_STEP * max(scale, LEN_EPS)
    jp = jacobian_matvec(positions + h * direction, rest, stiff, lam)
    jm = jacobian_matvec(positions - h * direction, rest, stiff, lam)
    return (jp - jm) * (nv / (2.0 * h))


# ---------------------------------------------------------------------------
# Implicit step

@dataclass
class StepContext:
    """Saved forward quantities needed by step_vjp."""

    positions: np.ndarray
    velocities: np.ndarray
    v_solved: np.ndarray       # pre-damping solution v'
    stiff: Stiffness
    masses: np.ndarray
    free: np.ndarray           # (N,) bool
    dt: float
    damping: float
    rest: RestQuantities
    solver: SolverConfig
    lu: tuple | None = None    # dense factorization, reused by the adjoint solve
    a_csr: scipy.sparse.csr_matrix | None = None
    char_length: float = 1.0


def _assemble_system(positions, rest, stiff, masses, free, dt):
    """A = M - dt^2 J with pinned rows/columns replaced by identity."""
    n = positions.shape[0]
    jac = force_jacobian(positions, rest, stiff)
    a = (-dt * dt) * jac.tocsr()
    m3 = np.repeat(masses, 3)
    a = a + scipy.sparse.diags(m3)
    free3 = np.repeat(free, 3).astype(float)
    proj = scipy.sparse.diags(free3)
    a = proj @ a @ proj + scipy.sparse.diags(1.0 - free3)
    return a.tocsr()


def _pcg(a_csr, b, rtol, maxiter):
    """Jacobi-preconditioned CG with a fixed, deterministic reduction order."""
    diag = a_csr.diagonal()
    if np.any(diag == 0.0):
        raise SolverError("zero diagonal in implicit system")
    inv_diag = 1.0 / diag
    x = np.zeros_like(b)
    r = b.copy()
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return x
    z = inv_diag * r
    p = z.copy()
    rz = float(np.dot(r, z))
    for it in range(maxiter):
        if np.linalg.norm(r) <= rtol * b_norm:
            return x
        ap = a_csr @ p
        denom = float(np.dot(p, ap))
        if denom <= 0.0:
            raise SolverError(f"PCG breakdown at iteration {it} (p.Ap = {denom:.3e})")
        alpha = rz / denom
        x += alpha * p
        r -= alpha * ap
        z = inv_diag * r
        rz_new = float(np.dot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    if np.linalg.norm(r) <= rtol * b_norm:
        return x
    raise SolverError(
        f"PCG did not converge in {maxiter} iterations "
        f"(residual {np.linalg.norm(r) / b_norm:.3e}, rtol {rtol:.1e})")


def step_with_context(state: ClothState, mesh: ClothMesh, rest: RestQuantities,
                      stiff: Stiffness, external_forces: np.ndarray,
                      params: SimParams,
                      solver: SolverConfig = SolverConfig()) -> tuple[ClothState, StepContext]:
    """One backward-Euler substep; external_forces are total Newtons per vertex."""
    if mesh.masses is None:
        raise ValueError("mesh masses unset; call compute_masses first")
    x, v = state.positions, state.velocities
    masses = mesh.masses
    free = mesh.free_mask
    dt = params.dt

    f_total = internal_forces(x, rest, stiff) + external_forces
    b = (masses[:, None] * v + dt * f_total)
    b[~free] = 0.0
    b_flat = b.ravel()

    a_csr = _assemble_system(x, rest, stiff, masses, free, dt)
    lu = None
    if solver.use_dense(mesh.n_vertices):
        try:
            lu = scipy.linalg.lu_factor(a_csr.toarray())
        except scipy.linalg.LinAlgError as exc:
            raise SolverError(f"dense factorization failed: {exc}") from exc
        vp_flat = scipy.linalg.lu_solve(lu, b_flat)
    else:
        vp_flat = _pcg(a_csr, b_flat, solver.rtol, maxiter=10 * 3 * mesh.n_vertices)
    if not np.isfinite(vp_flat).all():
        raise SolverError("non-finite velocity solution")

    vp = vp_flat.reshape(-1, 3)
    v_next = params.damping * vp
    v_next[~free] = 0.0
    x_next = x + dt * v_next

    ctx = StepContext(positions=x, velocities=v, v_solved=vp, stiff=stiff,
                      masses=masses, free=free, dt=dt, damping=params.damping,
                      rest=rest, solver=solver, lu=lu, a_csr=a_csr,
                      char_length=float(np.mean(rest.rest_lengths)))
    return ClothState(x_next, v_next), ctx


def step(state: ClothState, mesh: ClothMesh, rest: RestQuantities, stiff: Stiffness,
         external_forces: np.ndarray, params: SimParams,
         solver: SolverConfig = SolverConfig()) -> ClothState:
    new_state, _ = step_with_context(state, mesh, rest, stiff, external_forces,
                                     params, solver)
    return new_state


def step_vjp(ctx: StepContext, grad_x_next: np.ndarray, grad_v_next: np.ndarray):
    """Adjoint of one substep.

    Given gradients w.r.t. (x_{n+1}, v_{n+1}), returns gradients w.r.t.
    (x_n, v_n, Y, B, S, external_forces). The linear solve is differentiated
    via its adjoint system A lam = grad_v'; A is symmetric so the stored
    factorization is reused.
    """
    free3 = np.repeat(ctx.free, 3)
    dt = ctx.dt

    gx = grad_x_next.copy()
    gv_next = grad_v_next + dt * grad_x_next
    gv_next = np.where(ctx.free[:, None], gv_next, 0.0)
    g_vp = ctx.damping * gv_next

    if ctx.lu is not None:
        lam_flat = scipy.linalg.lu_solve(ctx.lu, g_vp.ravel())
    else:
        lam_flat = _pcg(ctx.a_csr, g_vp.ravel(), ctx.solver.rtol,
                        maxiter=10 * len(g_vp.ravel()))
    lam_flat = np.where(free3, lam_flat, 0.0)
    lam = lam_flat.reshape(-1, 3)

    # b-path: b = M v + dt*(F_int(x) + F_ext) on free rows.
    gv = ctx.masses[:, None] * lam
    g_fext = dt * lam
    gx += dt * jacobian_matvec(ctx.positions, ctx.rest, ctx.stiff, lam)
    g_ybs = dt * force_stiffness_dots(ctx.positions, ctx.rest, lam)

    # A-path: A = M - dt^2 J(x); Abar = -lam v'^T restricted to free rows/cols.
    vp_free = np.where(ctx.free[:, None], ctx.v_solved, 0.0)
    g_ybs += dt * dt * jacobian_stiffness_quadforms(ctx.positions, ctx.rest, lam, vp_free)
    gx += dt * dt * jacobian_directional_matvec_grad(
        ctx.positions, ctx.rest, ctx.stiff, lam, vp_free, ctx.char_length)

    return gx, gv, g_ybs[0], g_ybs[1], g_ybs[2], g_fext


def simulate(mesh: ClothMesh, rest: RestQuantities, stiff: Stiffness,
             params: SimParams, external_per_frame: np.ndarray,
             initial: ClothState | None = None,
             solver: SolverConfig = SolverConfig()) -> np.ndarray:
    """Forward-simulate; returns trajectory (n_frames + 1, N, 3) incl. the initial state.

    external_per_frame has shape (n_frames, N, 3) in Newtons; each frame's
    forces are held constant across its substeps.
    """
    params.validate()
    if initial is None:
        initial = ClothState(mesh.rest_positions.copy(),
                             np.zeros_like(mesh.rest_positions))
    state = initial.copy()
    traj = [state.positions.copy()]
    for f_ext in external_per_frame:
        for _ in range(params.substeps):
            state = step(state, mesh, rest, stiff, f_ext, params, solver)
        traj.append(state.positions.copy())
    return np.stack(traj, axis=0)
