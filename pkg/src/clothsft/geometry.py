"""Quad-grid cloth templates: construction, rest quantities, mass lumping, serialization.

The template is a planar rows x cols grid of vertices connected by axis-aligned
edges. Vertex (i, j) has flat index i * cols + j; row 0 is the top row. The
canonical rest plane is z = 0 with x = j * spacing, y = -i * spacing, so the
cloth hangs downward in world coordinates (y up).

Each quad (i, j) with corners (i,j), (i,j+1), (i+1,j+1), (i+1,j) is split along
the (i,j)-(i+1,j+1) diagonal into two triangles; that triangulation is reused
for mass lumping, rendering and surface sampling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

logger = logging.getLogger(__name__)

AREA_EPS = 1e-12  # triangles below this area are degenerate


class MeshError(Exception):
    """Raised for invalid mesh construction or serialization input."""


@dataclass
class ClothMesh:
    """Cloth template: rest geometry, connectivity, UVs and optional lumped masses."""

    rows: int
    cols: int
    rest_positions: np.ndarray  # (N, 3) float64
    quads: np.ndarray           # (Q, 4) int, corners in (i,j),(i,j+1),(i+1,j+1),(i+1,j) order
    uvs: np.ndarray             # (N, 2) float64 in [0, 1]^2
    pinned: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    masses: np.ndarray | None = None  # (N,) float64, set by compute_masses

    @property
    def n_vertices(self) -> int:
        return self.rest_positions.shape[0]

    @property
    def triangles(self) -> np.ndarray:
        """(2Q, 3) triangle indices from the fixed diagonal split."""
        q = self.quads
        upper = q[:, [0, 1, 2]]
        lower = q[:, [0, 2, 3]]
        return np.concatenate([upper, lower], axis=0)

    @property
    def free_mask(self) -> np.ndarray:
        """(N,) bool, True for vertices not pinned."""
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self.pinned] = False
        return mask

    def validate(self) -> None:
        """Check structural invariants; raise MeshError on violation."""
        n = self.rows * self.cols
        if self.rows < 2 or self.cols < 2:
            raise MeshError(f"grid must be at least 2x2, got {self.rows}x{self.cols}")
        if self.rest_positions.shape != (n, 3):
            raise MeshError(f"rest_positions shape {self.rest_positions.shape} != ({n}, 3)")
        if self.uvs.shape != (n, 2):
            raise MeshError(f"uvs shape {self.uvs.shape} != ({n}, 2)")
        if self.quads.shape != ((self.rows - 1) * (self.cols - 1), 4):
            raise MeshError(f"quad count {self.quads.shape[0]} inconsistent with grid")
        if not np.isfinite(self.rest_positions).all():
            raise MeshError("non-finite rest positions")
        if self.quads.min(initial=0) < 0 or self.quads.max(initial=0) >= n:
            raise MeshError("quad index out of range")
        if self.uvs.min(initial=0.0) < 0.0 or self.uvs.max(initial=0.0) > 1.0:
            raise MeshError("uvs outside [0, 1]")
        if len(self.pinned) and (self.pinned.min() < 0 or self.pinned.max() >= n):
            raise MeshError("pinned index out of range")
        if len(np.unique(self.pinned)) != len(self.pinned):
            raise MeshError("duplicate pinned indices")
        if self.masses is not None:
            if self.masses.shape != (n,):
                raise MeshError(f"masses shape {self.masses.shape} != ({n},)")
            if not (self.masses > 0).all():
                raise MeshError("masses must be strictly positive")


def build_template(rows: int, cols: int, spacing: float,
                   pinned: np.ndarray | list[int] | None = None) -> ClothMesh:
    """Build a planar rows x cols template with the given edge spacing.

    UVs map grid corners to texture corners: u runs along columns, v along rows.
    Masses are unset until :func:`compute_masses`.
    """
    if rows < 2 or cols < 2:
        raise MeshError(f"grid must be at least 2x2, got {rows}x{cols}")
    if spacing <= 0:
        raise MeshError(f"spacing must be positive, got {spacing}")
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    pos = np.stack([jj * spacing, -ii * spacing, np.zeros_like(ii, dtype=np.float64)],
                   axis=-1).reshape(-1, 3).astype(np.float64)
    uvs = np.stack([jj / (cols - 1), ii / (rows - 1)], axis=-1).reshape(-1, 2).astype(np.float64)

    qi, qj = np.meshgrid(np.arange(rows - 1), np.arange(cols - 1), indexing="ij")
    v00 = (qi * cols + qj).ravel()
    quads = np.stack([v00, v00 + 1, v00 + cols + 1, v00 + cols], axis=-1).astype(np.int64)

    pin = np.zeros(0, dtype=np.int64) if pinned is None else \
        np.asarray(sorted(set(int(p) for p in pinned)), dtype=np.int64)
    mesh = ClothMesh(rows=rows, cols=cols, rest_positions=pos, quads=quads, uvs=uvs, pinned=pin)
    mesh.validate()
    return mesh


def top_row_indices(rows: int, cols: int) -> np.ndarray:
    return np.arange(cols, dtype=np.int64)


def triangle_areas(positions: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """(T,) triangle areas for the given vertex positions."""
    a = positions[triangles[:, 0]]
    b = positions[triangles[:, 1]]
    c = positions[triangles[:, 2]]
    cross = np.cross(b - a, c - a)
    return 0.5 * np.linalg.norm(cross, axis=1)


def compute_masses(mesh: ClothMesh, density: float) -> np.ndarray:
    """Lumped vertex masses: each triangle's mass (density * area) split in thirds.

    Raises MeshError on non-positive density or a degenerate (zero-area) triangle.
    """
    if density <= 0:
        raise MeshError(f"density must be positive, got {density}")
    tris = mesh.triangles
    areas = triangle_areas(mesh.rest_positions, tris)
    if (areas < AREA_EPS).any():
        bad = int(np.argmin(areas))
        raise MeshError(f"degenerate triangle {bad} (area {areas[bad]:.3e})")
    masses = np.zeros(mesh.n_vertices)
    np.add.at(masses, tris.ravel(), np.repeat(density * areas / 3.0, 3))
    return masses


@dataclass
class RestQuantities:
    """Connectivity units and their rest measurements for the three energies.

    edges:       (E, 2) vertex pairs (i, j), axis-aligned grid edges.
    bend_pairs:  (Nb, 3) triples (i, j, k) with middle vertex j; the edges
                 (i,j), (j,k) continue straight along a row or column.
    shear_pairs: (Ns, 3) triples (i, j, l) with middle vertex j; the edges
                 meet at a right angle at rest.
    Angles are measured between the direction vectors (x_i - x_j) and
    (x_k - x_j) in [0, pi]; a flat grid therefore has bend rest angle pi and
    shear rest angle pi/2.
    """

    edges: np.ndarray
    rest_lengths: np.ndarray
    bend_pairs: np.ndarray
    rest_bend_angles: np.ndarray
    shear_pairs: np.ndarray
    rest_shear_angles: np.ndarray


def pair_angles(positions: np.ndarray, triples: np.ndarray) -> np.ndarray:
    """Angles at the middle vertex of each (i, j, k) triple, in [0, pi]."""
    u = positions[triples[:, 0]] - positions[triples[:, 1]]
    w = positions[triples[:, 2]] - positions[triples[:, 1]]
    c = np.einsum("ij,ij->i", u, w)
    s = np.linalg.norm(np.cross(u, w), axis=-1)
    return np.arctan2(s, c)


def rest_quantities(mesh: ClothMesh) -> RestQuantities:
    """Enumerate edges, bend and shear pairs and measure them on the rest state.

    For an r x c grid: r*(c-1) + c*(r-1) edges, r*(c-2) + c*(r-2) bend pairs,
    4*(r-1)*(c-1) shear pairs.
    """
    r, c = mesh.rows, mesh.cols
    idx = np.arange(r * c).reshape(r, c)

    horiz = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=-1)
    vert = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=-1)
    edges = np.concatenate([horiz, vert], axis=0).astype(np.int64)

    # Straight-path triples (i, j, k): j is the shared middle vertex.
    bend_h = np.stack([idx[:, :-2].ravel(), idx[:, 1:-1].ravel(), idx[:, 2:].ravel()], axis=-1)
    bend_v = np.stack([idx[:-2, :].ravel(), idx[1:-1, :].ravel(), idx[2:, :].ravel()], axis=-1)
    bend = np.concatenate([bend_h, bend_v], axis=0).astype(np.int64)

    # Right-angle triples: one horizontal and one vertical edge per quad corner.
    q00 = idx[:-1, :-1]
    q01 = idx[:-1, 1:]
    q10 = idx[1:, :-1]
    q11 = idx[1:, 1:]
    shear = np.concatenate([
        np.stack([q01.ravel(), q00.ravel(), q10.ravel()], axis=-1),  # corner at (i, j)
        np.stack([q00.ravel(), q01.ravel(), q11.ravel()], axis=-1),  # corner at (i, j+1)
        np.stack([q11.ravel(), q10.ravel(), q00.ravel()], axis=-1),  # corner at (i+1, j)
        np.stack([q10.ravel(), q11.ravel(), q01.ravel()], axis=-1),  # corner at (i+1, j+1)
    ], axis=0).astype(np.int64)

    pos = mesh.rest_positions
    lengths = np.linalg.norm(pos[edges[:, 1]] - pos[edges[:, 0]], axis=-1)
    if (lengths < 1e-12).any():
        raise MeshError("zero-length rest edge")
    return RestQuantities(
        edges=edges,
        rest_lengths=lengths,
        bend_pairs=bend,
        rest_bend_angles=pair_angles(pos, bend),
        shear_pairs=shear,
        rest_shear_angles=pair_angles(pos, shear),
    )


# ---------------------------------------------------------------------------
# Plain-text serialization (see docs/mesh_format.md)

_FORMAT_TAG = "clothmesh 1"


def save_mesh(mesh: ClothMesh, path) -> None:
    """Write a mesh in the documented plain-text format."""
    mesh.validate()
    lines = [_FORMAT_TAG, f"grid {mesh.rows} {mesh.cols}"]
    lines.append(f"vertices {mesh.n_vertices}")
    for p, uv in zip(mesh.rest_positions, mesh.uvs):
        lines.append(" ".join(repr(float(t)) for t in (p[0], p[1], p[2], uv[0], uv[1])))
    lines.append(f"quads {len(mesh.quads)}")
    for q in mesh.quads:
        lines.append(f"{q[0]} {q[1]} {q[2]} {q[3]}")
    lines.append("pinned " + " ".join(str(int(p)) for p in mesh.pinned))
    if mesh.masses is not None:
        lines.append("masses " + " ".join(repr(float(m)) for m in mesh.masses))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_mesh(path) -> ClothMesh:
    """Read a mesh written by :func:`save_mesh`; validates invariants on read."""
    with open(path) as f:
        raw = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    if not raw or raw[0] != _FORMAT_TAG:
        raise MeshError(f"{path}: not a '{_FORMAT_TAG}' file")
    try:
        rows, cols = (int(t) for t in raw[1].split()[1:])
        n = int(raw[2].split()[1])
        body = raw[3:]
        vals = np.array([[float(t) for t in body[k].split()] for k in range(n)])
        body = body[n:]
        nq = int(body[0].split()[1])
        quads = np.array([[int(t) for t in body[1 + k].split()] for k in range(nq)],
                         dtype=np.int64).reshape(nq, 4)
        body = body[1 + nq:]
        pinned = np.zeros(0, dtype=np.int64)
        masses = None
        for ln in body:
            key, *rest = ln.split()
            if key == "pinned":
                pinned = np.array([int(t) for t in rest], dtype=np.int64)
            elif key == "masses":
                masses = np.array([float(t) for t in rest])
            else:
                raise MeshError(f"{path}: unknown section '{key}'")
    except (ValueError, IndexError) as exc:
        raise MeshError(f"{path}: malformed mesh file ({exc})") from exc
    mesh = ClothMesh(rows=rows, cols=cols, rest_positions=vals[:, :3],
                     quads=quads, uvs=vals[:, 3:5], pinned=pinned, masses=masses)
    mesh.validate()
    return mesh


def with_pinned(mesh: ClothMesh, pinned: np.ndarray | list[int]) -> ClothMesh:
    out = replace(mesh, pinned=np.asarray(sorted(set(int(p) for p in pinned)), dtype=np.int64))
    out.validate()
    return out
