"""Marching-cubes isosurface extraction, surface sampling and mesh export.

The input field is padded with a one-voxel zero border before extraction so
that solids touching the grid boundary still produce closed surfaces. Lattice
sample points are voxel centers. Vertices are created once per crossed
lattice edge (keyed by the edge's low corner and axis), which makes meshes of
padded solid fields watertight by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE
from .voxel import PointCloud, VoxelGrid

_DEGENERATE_AREA = 1e-18  # m^2; only exact duplicates fall below this


@dataclass
class Mesh:
    vertices: np.ndarray    # (v, 3) world positions
    triangles: np.ndarray   # (t, 3) vertex indices, outward-facing winding

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle indices out of range")

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def is_empty(self) -> bool:
        return self.triangles.shape[0] == 0

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def marching_cubes(grid: VoxelGrid, isolevel: float = 0.5) -> Mesh:
    """Extract the isolevel surface of a [0, 1] occupancy field.

    Standard 256-configuration tables with linear interpolation along lattice
    edges. An all-zero or all-one grid yields an empty mesh.
    """
    if not (0.0 < isolevel < 1.0):
        raise ValueError(f"isolevel must lie strictly inside (0, 1), got {isolevel}")
    r = grid.resolution
    field = np.zeros((r + 2,) * 3)
    field[1:-1, 1:-1, 1:-1] = grid.values
    # lattice point (i,j,k) sits at the center of padded voxel (i,j,k)
    base = grid.origin[:, None] + (np.arange(r + 2)[None, :] - 0.5) * grid.voxel_size

    inside = field > isolevel
    if not inside.any() or inside.all():
        return Mesh.empty()

    # per-cube case index from the 8 corner inside-bits
    n = r + 1
    case = np.zeros((n, n, n), dtype=np.int32)
    for bit, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        case |= inside[ox : ox + n, oy : oy + n, oz : oz + n].astype(np.int32) << bit
    edge_lut = np.asarray(EDGE_TABLE, dtype=np.int32)
    active = np.argwhere(edge_lut[case] != 0)

    vertices: list[np.ndarray] = []
    vertex_ids: dict[tuple, int] = {}
    triangles: list[tuple] = []

    def edge_vertex(cx: int, cy: int, cz: int, edge: int) -> int:
        a, b = EDGE_CORNERS[edge]
        pa = (cx + CORNER_OFFSETS[a][0], cy + CORNER_OFFSETS[a][1], cz + CORNER_OFFSETS[a][2])
        pb = (cx + CORNER_OFFSETS[b][0], cy + CORNER_OFFSETS[b][1], cz + CORNER_OFFSETS[b][2])
        if pb < pa:  # canonical low-to-high orientation so neighbors agree
            pa, pb = pb, pa
        axis = next(i for i in range(3) if pa[i] != pb[i])
        key = (pa, axis)
        vid = vertex_ids.get(key)
        if vid is not None:
            return vid
        va, vb = field[pa], field[pb]
        t = (isolevel - va) / (vb - va)
        pos = np.array([base[0, pa[0]], base[1, pa[1]], base[2, pa[2]]])
        pos[axis] += t * grid.voxel_size
        vid = len(vertices)
        vertices.append(pos)
        vertex_ids[key] = vid
        return vid

    for cx, cy, cz in active:
        tri_edges = TRI_TABLE[case[cx, cy, cz]]
        for s in range(0, len(tri_edges), 3):
            i0 = edge_vertex(cx, cy, cz, tri_edges[s])
            i1 = edge_vertex(cx, cy, cz, tri_edges[s + 1])
            i2 = edge_vertex(cx, cy, cz, tri_edges[s + 2])
            if i0 == i1 or i1 == i2 or i0 == i2:
                continue
            triangles.append((i0, i2, i1))

    if not triangles:
        return Mesh.empty()
    mesh = Mesh(np.array(vertices), np.array(triangles, dtype=np.int64))
    areas = mesh.triangle_areas()
    keep = areas > _DEGENERATE_AREA
    if not keep.all():
        mesh = Mesh(mesh.vertices, mesh.triangles[keep])
    return mesh


# ---------------------------------------------------------------------------
# mesh measurements
# ---------------------------------------------------------------------------


def mesh_volume(mesh: Mesh) -> float:
    """Signed enclosed volume via the divergence theorem (tetrahedra to origin)."""
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def edge_incidence(mesh: Mesh) -> dict[tuple[int, int], int]:
    """Count how many triangles share each undirected edge."""
    counts: dict[tuple[int, int], int] = {}
    for i0, i1, i2 in mesh.triangles:
        for u, v in ((i0, i1), (i1, i2), (i2, i0)):
            key = (u, v) if u < v else (v, u)
            counts[key] = counts.get(key, 0) + 1
    return counts


def euler_characteristic(mesh: Mesh) -> int:
    used = np.unique(mesh.triangles)
    return int(len(used) - len(edge_incidence(mesh)) + len(mesh.triangles))


def is_closed_manifold(mesh: Mesh) -> bool:
    """Every edge shared by exactly two triangles."""
    if mesh.is_empty():
        return False
    return all(c == 2 for c in edge_incidence(mesh).values())


# ---------------------------------------------------------------------------
# surface sampling and export
# ---------------------------------------------------------------------------


def sample_surface_points(mesh: Mesh, n: int, seed: int) -> PointCloud:
    """n area-uniform surface samples; deterministic under seed."""
    if mesh.is_empty():
        raise ValueError("cannot sample an empty mesh")
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    probs = areas / areas.sum()
    picks = rng.choice(len(areas), size=n, p=probs)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    a = mesh.vertices[mesh.triangles[picks, 0]]
    b = mesh.vertices[mesh.triangles[picks, 1]]
    c = mesh.vertices[mesh.triangles[picks, 2]]
    return PointCloud(a + u[:, None] * (b - a) + v[:, None] * (c - a))


def write_off(mesh: Mesh, path) -> None:
    """ASCII OFF export: header, counts, vertex lines, face lines '3 i j k'."""
    with open(path, "w") as f:
        f.write("OFF\n")
        f.write(f"{len(mesh.vertices)} {len(mesh.triangles)} 0\n")
        for x, y, z in mesh.vertices:
            f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
        for i, j, k in mesh.triangles:
            f.write(f"3 {i} {j} {k}\n")
