"""Regular grids, the five-tetrahedra cube split, and marching tetrahedra.

Crossing vertices are linear interpolants of the two edge densities, so each
output vertex carries the partial derivatives of its position with respect
to those densities.  :meth:`Mesh.density_vjp` pulls a loss gradient on vertex
positions back onto the grid points.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

# corner l of a cube sits at offset (l >> 2 & 1, l >> 1 & 1, l & 1)
CUBE_OFFSETS = np.array([[(l >> 2) & 1, (l >> 1) & 1, l & 1] for l in range(8)], dtype=np.int64)

# Two chiralities of the five-tet split.  Template 0 puts the central tet on
# the even-sum corners, template 1 on the odd-sum corners.  A cube whose
# integer coordinates sum to an even number uses template 0, so the central
# tet always sits on globally even lattice points and neighbouring cubes
# agree on every shared face diagonal.
_RAW_TEMPLATES = np.array(
    [
        [[0, 3, 5, 6], [1, 0, 3, 5], [2, 0, 3, 6], [4, 0, 5, 6], [7, 3, 5, 6]],
        [[1, 2, 4, 7], [0, 1, 2, 4], [3, 1, 2, 7], [5, 1, 4, 7], [6, 2, 4, 7]],
    ],
    dtype=np.int64,
)


def _orient_templates(raw: np.ndarray) -> np.ndarray:
    out = raw.copy()
    P = CUBE_OFFSETS.astype(float)
    for t in range(2):
        for k in range(5):
            a, b, c, d = P[out[t, k]]
            if np.dot(np.cross(b - a, c - a), d - a) < 0:
                out[t, k, [2, 3]] = out[t, k, [3, 2]]
    return out


TET_TEMPLATES = _orient_templates(_RAW_TEMPLATES)

# local edges of a tet (pairs of corner slots 0..3)
_TET_EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def _build_case_table():
    """For each of the 16 sign codes, triangles as triples of corner-slot pairs."""
    table = []
    for code in range(16):
        pos = [i for i in range(4) if (code >> i) & 1]
        neg = [i for i in range(4) if not (code >> i) & 1]
        tris = []
        if len(pos) in (1, 3):
            lone = pos[0] if len(pos) == 1 else neg[0]
            others = neg if len(pos) == 1 else pos
            tris.append([(lone, o) for o in others])
        elif len(pos) == 2:
            a, b = pos
            c, d = neg
            # quad (a,c)-(a,d)-(b,d)-(b,c), split along (a,c)-(b,d)
            tris.append([(a, c), (a, d), (b, d)])
            tris.append([(a, c), (b, d), (b, c)])
        table.append(tris)
    return table


CASE_TABLE = _build_case_table()


@dataclass
class RegularGrid:
    N: int
    b_min: np.ndarray
    b_max: np.ndarray
    points: np.ndarray  # (N^3, 3); index (i*N + j)*N + k
    densities: np.ndarray  # (N^3,)

    def index(self, i, j, k):
        return (np.asarray(i) * self.N + np.asarray(j)) * self.N + np.asarray(k)

    @property
    def cell(self) -> np.ndarray:
        return (self.b_max - self.b_min) / (self.N - 1)


def lattice_points(N: int, b_min, b_max) -> np.ndarray:
    b_min = np.asarray(b_min, dtype=np.float64)
    b_max = np.asarray(b_max, dtype=np.float64)
    idx = np.stack(np.meshgrid(*(np.arange(N),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    return b_min + idx / (N - 1) * (b_max - b_min)


def build_grid(field, N: int) -> RegularGrid:
    if N < 2:
        raise ValueError("grid resolution N must be at least 2")
    pts = lattice_points(N, field.b_min, field.b_max)
    return RegularGrid(N, field.b_min.copy(), field.b_max.copy(), pts, field.sigma(pts))


@dataclass
class TetSet:
    tets: np.ndarray  # (m, 4) point indices, positively oriented
    parity: np.ndarray  # (cubes,) template used per cube


def cube_tets(corner_ids: np.ndarray, parity: np.ndarray) -> np.ndarray:
    """Five tets per cube from (c, 8) corner ids and per-cube parity bits."""
    corner_ids = np.asarray(corner_ids, dtype=np.int64)
    tmpl = TET_TEMPLATES[np.asarray(parity, dtype=np.int64)]  # (c, 5, 4)
    return np.take_along_axis(corner_ids[:, None, :], tmpl.reshape(len(corner_ids), 20)[:, None, :], axis=2).reshape(-1, 4)


def _cube_corner_ids(N: int, ijk: np.ndarray) -> np.ndarray:
    c = ijk[:, None, :] + CUBE_OFFSETS[None, :, :]
    return (c[..., 0] * N + c[..., 1]) * N + c[..., 2]


def split_tets(grid: RegularGrid) -> TetSet:
    N = grid.N
    ijk = np.stack(np.meshgrid(*(np.arange(N - 1),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    parity = ijk.sum(axis=1) % 2
    return TetSet(cube_tets(_cube_corner_ids(N, ijk), parity), parity)


def classify(sigma, s: float = 0.0):
    """+1 where sigma > s, -1 where sigma <= s."""
    return np.where(np.asarray(sigma) > s, 1, -1)


def crossing(v_a, v_b, sigma_a: float, sigma_b: float, s: float = 0.0, return_partials: bool = False):
    """Zero crossing of the linear interpolant of ``sigma - s`` along a->b."""
    if classify(sigma_a, s) == classify(sigma_b, s):
        raise ValueError("crossing requires the endpoints to have different signs")
    pts, da, db, ok = _crossings(
        np.atleast_2d(v_a).astype(float), np.atleast_2d(v_b).astype(float),
        np.atleast_1d(float(sigma_a) - s), np.atleast_1d(float(sigma_b) - s),
    )
    if return_partials:
        return pts[0], da[0], db[0], bool(ok[0])
    return pts[0]


def _crossings(va, vb, sa, sb):
    """Vectorised crossing with partials; sa, sb are already shifted by s."""
    delta = sb - sa
    ok = np.abs(delta) >= 1e-12
    safe = np.where(ok, delta, 1.0)
    pts = (va * sb[:, None] - vb * sa[:, None]) / safe[:, None]
    pts = np.where(ok[:, None], pts, 0.5 * (va + vb))
    inv2 = np.where(ok, 1.0 / (safe * safe), 0.0)
    da = (va - vb) * (sb * inv2)[:, None]
    db = (vb - va) * (sa * inv2)[:, None]
    return pts, da, db, ok


@dataclass
class Mesh:
    """Triangle mesh.  Meshes produced by :func:`march` carry provenance:
    ``edges`` (grid-point pairs each vertex was interpolated on) and the
    partials of each vertex position w.r.t. those two densities."""

    P: np.ndarray
    F: np.ndarray
    edges: np.ndarray | None = None
    dP_da: np.ndarray | None = None
    dP_db: np.ndarray | None = None
    differentiable: np.ndarray | None = None
    diagnostics: dict = dc_field(default_factory=dict)

    def __post_init__(self) -> None:
        self.P = np.asarray(self.P, dtype=np.float64).reshape(-1, 3)
        self.F = np.asarray(self.F, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.P)

    @property
    def n_faces(self) -> int:
        return len(self.F)

    def is_empty(self) -> bool:
        return len(self.F) == 0

    def face_areas(self) -> np.ndarray:
        if len(self.F) == 0:
            return np.zeros(0)
        a, b, c = (self.P[self.F[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edge_counts(self) -> dict:
        """Undirected edge -> number of incident faces."""
        e = np.sort(np.concatenate([self.F[:, [0, 1]], self.F[:, [1, 2]], self.F[:, [2, 0]]]), axis=1)
        keys, counts = np.unique(e, axis=0, return_counts=True)
        return {tuple(k): int(c) for k, c in zip(keys, counts)}

    def boundary_edge_count(self) -> int:
        if len(self.F) == 0:
            return 0
        e = np.sort(np.concatenate([self.F[:, [0, 1]], self.F[:, [1, 2]], self.F[:, [2, 0]]]), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return int(np.sum(counts == 1))

    def is_watertight(self) -> bool:
        if len(self.F) == 0:
            return False
        e = np.sort(np.concatenate([self.F[:, [0, 1]], self.F[:, [1, 2]], self.F[:, [2, 0]]]), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def density_vjp(self, dL_dP: np.ndarray, n_points: int) -> np.ndarray:
        """Pull dL/dP back to dL/d(density) on the grid points."""
        if self.edges is None:
            raise ValueError("mesh has no marching provenance")
        g = np.zeros(n_points)
        w = np.asarray(dL_dP, dtype=np.float64).reshape(-1, 3)
        mask = self.differentiable if self.differentiable is not None else np.ones(len(w), bool)
        ga = np.where(mask, np.einsum("ij,ij->i", w, self.dP_da), 0.0)
        gb = np.where(mask, np.einsum("ij,ij->i", w, self.dP_db), 0.0)
        np.add.at(g, self.edges[:, 0], ga)
        np.add.at(g, self.edges[:, 1], gb)
        return g


def _empty_mesh() -> Mesh:
    z3 = np.zeros((0, 3))
    return Mesh(z3, np.zeros((0, 3), np.int64), np.zeros((0, 2), np.int64), z3, z3.copy(), np.zeros(0, bool))


def march(points: np.ndarray, tets: np.ndarray, densities: np.ndarray, s: float = 0.0) -> Mesh:
    """Marching tetrahedra over ``tets`` (m, 4) indexing ``points``.

    Inside is ``sigma <= s``; faces are wound so their normals point to the
    ``sigma > s`` side.  Crossing vertices on the same grid edge are shared.
    Vertices are numbered in order of first use (tet index ascending).
    """
    points = np.asarray(points, dtype=np.float64)
    tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
    dens = np.asarray(densities, dtype=np.float64)
    if len(tets) == 0:
        return _empty_mesh()
    pos = dens[tets] > s
    code = pos[:, 0] * 1 + pos[:, 1] * 2 + pos[:, 2] * 4 + pos[:, 3] * 8

    tri_tet: list[np.ndarray] = []
    tri_edges: list[np.ndarray] = []  # (t, 3, 2) global point pairs
    for c in range(1, 15):
        sel = np.nonzero(code == c)[0]
        if len(sel) == 0:
            continue
        for tri in CASE_TABLE[c]:
            slots = np.array(tri, dtype=np.int64)  # (3, 2)
            tri_tet.append(sel)
            tri_edges.append(tets[sel][:, slots])
    if not tri_tet:
        return _empty_mesh()
    order = np.argsort(np.concatenate(tri_tet), kind="stable")
    tet_of_tri = np.concatenate(tri_tet)[order]
    E = np.concatenate(tri_edges)[order]  # (T, 3, 2)
    E = np.sort(E, axis=2)

    n_pts = np.int64(len(points))
    keys = (E[..., 0] * n_pts + E[..., 1]).ravel()
    uniq, first, inv = np.unique(keys, return_index=True, return_inverse=True)
    rank_order = np.argsort(first, kind="stable")
    rank = np.empty_like(rank_order)
    rank[rank_order] = np.arange(len(rank_order))
    F = rank[inv].reshape(-1, 3)
    edges = np.stack([uniq // n_pts, uniq % n_pts], axis=1)[rank_order]

    a, b = edges[:, 0], edges[:, 1]
    P, dA, dB, ok = _crossings(points[a], points[b], dens[a] - s, dens[b] - s)

    # orientation: normal towards the positive (outside) corners of the source tet
    T = tets[tet_of_tri]
    sgn = np.where(dens[T] > s, 1.0, -1.0)
    npos = (sgn > 0).sum(axis=1, keepdims=True)
    wts = np.where(sgn > 0, 1.0 / npos, -1.0 / (4 - npos))
    ref = np.einsum("tk,tkc->tc", wts, points[T])
    n = np.cross(P[F[:, 1]] - P[F[:, 0]], P[F[:, 2]] - P[F[:, 0]])
    flip = np.einsum("ij,ij->i", n, ref) < 0
    F[flip] = F[flip][:, [0, 2, 1]]

    area = 0.5 * np.linalg.norm(n, axis=1)
    keep = area > 1e-12
    mesh = Mesh(P, F[keep], edges, dA, dB, ok)
    mesh.diagnostics["dropped_degenerate_faces"] = int((~keep).sum())
    mesh.diagnostics["nondifferentiable_vertices"] = int((~ok).sum())
    return mesh


def active_cubes(D: np.ndarray, s: float) -> np.ndarray:
    """(c, 3) indices of cubes of an (N, N, N) density block whose corners straddle s."""
    pos = D > s
    N = D.shape[0]
    anyp = np.zeros((N - 1,) * 3, bool)
    allp = np.ones((N - 1,) * 3, bool)
    for a, b, c in CUBE_OFFSETS:
        v = pos[a : a + N - 1, b : b + N - 1, c : c + N - 1]
        anyp |= v
        allp &= v
    return np.argwhere(anyp & ~allp)


def extract_grid_mesh(grid: RegularGrid, s: float = 0.0) -> Mesh:
    """March only the cubes that contain a sign change (same result as
    marching :func:`split_tets` in full)."""
    N = grid.N
    ijk = active_cubes(grid.densities.reshape(N, N, N), s)
    if len(ijk) == 0:
        return _empty_mesh()
    # keep cubes in the same (row-major) order split_tets uses
    tets = cube_tets(_cube_corner_ids(N, ijk), ijk.sum(axis=1) % 2)
    return march(grid.points, tets, grid.densities, s)


def extract_mesh(field, N: int, s: float = 0.0) -> Mesh:
    return extract_grid_mesh(build_grid(field, N), s)
