"""Adaptive octrees seeded by mesh vertices, and marching on their leaves.

Leaves are stored by depth and integer coordinates at that depth.  Leaf
corners are deduplicated on the integer lattice of the deepest level, which
is exact across depths (no float quantization needed).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tetra import CUBE_OFFSETS, Mesh, _empty_mesh, cube_tets, march

log = logging.getLogger(__name__)

EDIT_KINDS = ("add", "remove", "deform", "recolor")


@dataclass
class Octree:
    root_min: np.ndarray
    side: float
    K: int
    L_max: int
    leaf_depth: np.ndarray  # (l,)
    leaf_ijk: np.ndarray  # (l, 3) coordinates at the leaf's own depth
    leaf_count: np.ndarray  # (l,) seed vertices inside
    node_depth: np.ndarray  # internal (subdivided) nodes
    node_ijk: np.ndarray
    node_count: np.ndarray
    clamped: int = 0

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_depth)

    @property
    def max_depth(self) -> int:
        return int(self.leaf_depth.max()) if len(self.leaf_depth) else 0

    @property
    def root_center(self) -> np.ndarray:
        return self.root_min + 0.5 * self.side

    @property
    def finest_cell(self) -> float:
        return self.side / 2.0**self.max_depth

    def leaf_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        size = self.side / 2.0 ** self.leaf_depth
        lo = self.root_min + self.leaf_ijk * size[:, None]
        return lo, lo + size[:, None]

    def finest_coords(self, points: np.ndarray) -> np.ndarray:
        M = 1 << self.L_max
        q = np.floor((np.asarray(points, dtype=np.float64) - self.root_min) / self.side * M).astype(np.int64)
        return np.clip(q, 0, M - 1)

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Index of the leaf containing each point (-1 if none)."""
        q = self.finest_coords(points)
        out = np.full(len(q), -1, dtype=np.int64)
        for d in np.unique(self.leaf_depth):
            sel = np.nonzero(self.leaf_depth == d)[0]
            shift = self.L_max - int(d)
            M = np.int64(1) << int(d)
            keys = (self.leaf_ijk[sel, 0] * M + self.leaf_ijk[sel, 1]) * M + self.leaf_ijk[sel, 2]
            order = np.argsort(keys)
            qq = q >> shift
            pk = (qq[:, 0] * M + qq[:, 1]) * M + qq[:, 2]
            pos = np.searchsorted(keys[order], pk)
            pos = np.clip(pos, 0, len(keys) - 1)
            hit = keys[order][pos] == pk
            out[hit] = sel[order[pos[hit]]]
        return out


def root_cube(seed: np.ndarray, bbox=None) -> tuple[np.ndarray, float]:
    """Cube containing ``bbox`` (or the seeds' tight box inflated by 5%)."""
    if bbox is None:
        lo, hi = seed.min(axis=0), seed.max(axis=0)
        side = float(np.max(hi - lo)) * 1.05
        if side <= 0:
            side = 1e-3
    else:
        lo = np.asarray(bbox[0], dtype=np.float64)
        hi = np.asarray(bbox[1], dtype=np.float64)
        side = float(np.max(hi - lo))
    center = 0.5 * (lo + hi)
    return center - 0.5 * side, side


def morton_key(ijk: np.ndarray, bits: int) -> np.ndarray:
    ijk = np.asarray(ijk, dtype=np.int64)
    code = np.zeros(len(ijk), dtype=np.int64)
    for b in range(bits):
        code |= ((ijk[:, 0] >> b) & 1) << (3 * b + 2)
        code |= ((ijk[:, 1] >> b) & 1) << (3 * b + 1)
        code |= ((ijk[:, 2] >> b) & 1) << (3 * b)
    return code


def build_octree(seed, K: int, L_max: int, bbox=None) -> Octree:
    """Subdivide every node holding at least ``K`` seeds, down to depth ``L_max``.

    Subdivided nodes always get all eight children, so leaves partition the
    root cube.  Leaves come back in Morton order.
    """
    seed = np.asarray(seed, dtype=np.float64).reshape(-1, 3)
    if len(seed) == 0:
        raise ValueError("octree seed set is empty")
    if K < 1 or L_max < 0:
        raise ValueError("need K >= 1 and L_max >= 0")
    root_min, side = root_cube(seed, bbox)
    M = 1 << L_max
    rel = (seed - root_min) / side
    clamped = int(np.sum(np.any((rel < 0) | (rel > 1), axis=1)))
    if clamped:
        log.warning("octree: %d seed points outside the root cube were clamped", clamped)
    q = np.clip(np.floor(rel * M).astype(np.int64), 0, M - 1)

    leaves_d, leaves_ijk, leaves_n = [], [], []
    nodes_d, nodes_ijk, nodes_n = [], [], []
    cand = np.zeros((1, 3), dtype=np.int64)
    pts = q
    for d in range(L_max + 1):
        shift = L_max - d
        side_n = np.int64(1) << d
        ckeys = (cand[:, 0] * side_n + cand[:, 1]) * side_n + cand[:, 2]
        pq = pts >> shift
        pkeys = (pq[:, 0] * side_n + pq[:, 1]) * side_n + pq[:, 2]
        # every remaining point lies in exactly one candidate
        order = np.argsort(ckeys)
        slot = np.searchsorted(ckeys[order], pkeys)
        counts = np.empty(len(cand), dtype=np.int64)
        counts[order] = np.bincount(slot, minlength=len(cand))
        split = (counts >= K) & (d < L_max)
        leaves_d.append(np.full((~split).sum(), d))
        leaves_ijk.append(cand[~split])
        leaves_n.append(counts[~split])
        if not split.any():
            break
        nodes_d.append(np.full(split.sum(), d))
        nodes_ijk.append(cand[split])
        nodes_n.append(counts[split])
        parents = cand[split]
        cand = (parents[:, None, :] * 2 + CUBE_OFFSETS[None, :, :]).reshape(-1, 3)
        pts = pts[split[order][slot]]

    ld = np.concatenate(leaves_d).astype(np.int64)
    lijk = np.concatenate(leaves_ijk).astype(np.int64)
    ln = np.concatenate(leaves_n).astype(np.int64)
    mk = morton_key(lijk << (L_max - ld)[:, None], L_max)
    order = np.lexsort((ld, mk))
    empty = np.zeros(0, dtype=np.int64)
    return Octree(
        root_min=root_min,
        side=side,
        K=int(K),
        L_max=int(L_max),
        leaf_depth=ld[order],
        leaf_ijk=lijk[order],
        leaf_count=ln[order],
        node_depth=np.concatenate(nodes_d).astype(np.int64) if nodes_d else empty,
        node_ijk=np.concatenate(nodes_ijk).astype(np.int64) if nodes_ijk else empty.reshape(0, 3),
        node_count=np.concatenate(nodes_n).astype(np.int64) if nodes_n else empty,
        clamped=clamped,
    )


def seed_policy(kind: str, M_s: Mesh | None, M_t: Mesh | None) -> np.ndarray:
    """Seed vertices for the octree of an edit.

    add -> target vertices; remove -> source vertices; anything else -> both.
    """
    def need(m, name):
        if m is None or m.n_vertices == 0:
            raise ValueError(f"edit kind {kind!r} needs a non-empty {name} mesh")
        return m.P

    if kind == "add":
        return need(M_t, "target").copy()
    if kind == "remove":
        return need(M_s, "source").copy()
    return np.concatenate([need(M_s, "source"), need(M_t, "target")])


@dataclass
class IrregularGrid:
    octree: Octree
    lattice: np.ndarray  # (c, 3) integer corner coordinates at depth L_max
    points: np.ndarray  # (c, 3)
    densities: np.ndarray  # (c,)
    leaf_corners: np.ndarray  # (l, 8)
    parity: np.ndarray  # (l,)

    @property
    def n_corners(self) -> int:
        return len(self.points)

    @property
    def tets(self) -> np.ndarray:
        return cube_tets(self.leaf_corners, self.parity)

    def evaluate(self, field) -> None:
        self.densities = field.sigma(self.points)

    def active_leaves(self, s: float = 0.0) -> np.ndarray:
        pos = self.densities[self.leaf_corners] > s
        return np.nonzero(pos.any(axis=1) & ~pos.all(axis=1))[0]

    def march(self, s: float = 0.0) -> Mesh:
        act = self.active_leaves(s)
        if len(act) == 0:
            return _empty_mesh()
        tets = cube_tets(self.leaf_corners[act], self.parity[act])
        return march(self.points, tets, self.densities, s)


def leaves_to_grid(octree: Octree, field=None) -> IrregularGrid:
    """Unique leaf corners, evaluated once each when ``field`` is given."""
    L = octree.L_max
    shift = (L - octree.leaf_depth)[:, None, None]
    lat = (octree.leaf_ijk[:, None, :] + CUBE_OFFSETS[None, :, :]) << shift  # (l, 8, 3)
    R = np.int64((1 << L) + 1)
    keys = (lat[..., 0] * R + lat[..., 1]) * R + lat[..., 2]
    uk, inv = np.unique(keys.ravel(), return_inverse=True)
    lattice = np.stack([uk // (R * R), (uk // R) % R, uk % R], axis=1)
    points = octree.root_min + lattice * (octree.side / (1 << L))
    grid = IrregularGrid(
        octree=octree,
        lattice=lattice,
        points=points,
        densities=np.zeros(len(points)),
        leaf_corners=inv.reshape(-1, 8),
        parity=octree.leaf_ijk.sum(axis=1) % 2,
    )
    if field is not None:
        grid.evaluate(field)
    return grid


def summary_line(grid: IrregularGrid, mesh: Mesh | None = None) -> str:
    o = grid.octree
    crack = mesh.boundary_edge_count() if mesh is not None else 0
    return f"octree leaves={o.n_leaves} corners={grid.n_corners} crack_edges={crack} max_depth={o.max_depth}"


def extract_octree_mesh(field, octree: Octree, s: float = 0.0, grid: IrregularGrid | None = None) -> Mesh:
    """March the octree's leaf tets.  Hanging corners between leaves of
    different depth can leave hairline cracks; their count is reported as
    ``crack_edges`` in the diagnostics."""
    if grid is None:
        grid = leaves_to_grid(octree, field)
    mesh = grid.march(s)
    mesh.diagnostics.update(
        leaves=octree.n_leaves,
        corners=grid.n_corners,
        crack_edges=mesh.boundary_edge_count(),
        max_depth=octree.max_depth,
    )
    log.info(summary_line(grid, mesh))
    return mesh
