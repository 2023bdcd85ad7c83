"""Visibility-aware vertex colours from volume rendering.

For each camera a vertex must face the camera (normal test) and the field's
expected depth along the camera->vertex ray must agree with the vertex
distance (depth test).  Each visible (vertex, camera) ray yields the
weight-normalised radiance integral along it, and these are averaged per
vertex.  Density is treated as frozen here, so the ray
weights are computed once and only the radiance is re-evaluated;
:class:`ColorRays` keeps that state for repeated differentiable evaluation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .fields import ImplicitField, Ray, sample_rays
from .tetra import Mesh

log = logging.getLogger(__name__)

DEPTH_EPS = 0.2
MIN_OPACITY = 1e-3
PRUNE_WEIGHT = 1e-3


@dataclass
class Camera:
    origin: np.ndarray
    look_at: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    up: np.ndarray = dc_field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    fov_deg: float = 40.0
    resolution: tuple[int, int] = (64, 64)

    def __post_init__(self) -> None:
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        up = np.asarray(self.up, dtype=np.float64)
        self.up = up / np.linalg.norm(up)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))

    def outside(self, bbox) -> bool:
        lo, hi = bbox
        return bool(np.any(self.origin < lo) or np.any(self.origin > hi))

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        fwd = self.look_at - self.origin
        fwd = fwd / np.linalg.norm(fwd)
        up = self.up
        if np.linalg.norm(np.cross(fwd, up)) < 1e-6:
            up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        return fwd, right, np.cross(right, fwd)

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit directions through pixel centres, row-major from the top-left."""
        w, h = self.resolution
        fwd, right, up = self.basis()
        tan = np.tan(np.radians(self.fov_deg) / 2.0)
        xs = ((np.arange(w) + 0.5) / w * 2.0 - 1.0) * tan * (w / h)
        ys = (1.0 - (np.arange(h) + 0.5) / h * 2.0) * tan
        X, Y = np.meshgrid(xs, ys)
        d = fwd + X[..., None] * right + Y[..., None] * up
        d = d.reshape(-1, 3)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.broadcast_to(self.origin, d.shape).copy(), d

    def project(self, X: np.ndarray) -> np.ndarray:
        """Pixel coordinates (column, row) of world points, continuous."""
        w, h = self.resolution
        fwd, right, up = self.basis()
        tan = np.tan(np.radians(self.fov_deg) / 2.0)
        v = np.atleast_2d(X) - self.origin
        z = v @ fwd
        x = (v @ right) / z / (tan * w / h)
        y = (v @ up) / z / tan
        return np.stack([(x + 1.0) * 0.5 * w, (1.0 - y) * 0.5 * h], axis=1)


def fibonacci_directions(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def default_rig(bbox, n: int = 16, radius_scale: float = 1.5) -> list[Camera]:
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    c = 0.5 * (lo + hi)
    r = radius_scale * float(np.linalg.norm(hi - lo))
    return [Camera(c + r * d, c) for d in fibonacci_directions(n)]


@dataclass
class ColoredMesh:
    mesh: Mesh
    colors: np.ndarray
    visibility: np.ndarray
    fallback: np.ndarray
    edited_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        n = self.mesh.n_vertices
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.colors) != n:
            raise ValueError("one colour per vertex required")
        if self.edited_mask is None:
            self.edited_mask = np.zeros(n, dtype=bool)


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted vertex normals; vertices without faces get zero."""
    n = np.zeros((mesh.n_vertices, 3))
    if mesh.n_faces:
        P, F = mesh.P, mesh.F
        fn = np.cross(P[F[:, 1]] - P[F[:, 0]], P[F[:, 2]] - P[F[:, 0]])  # length = 2 * area
        for k in range(3):
            np.add.at(n, F[:, k], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def front_filter(P: np.ndarray, normals: np.ndarray, origin) -> np.ndarray:
    d = P - np.asarray(origin, dtype=np.float64)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.nonzero(np.einsum("ij,ij->i", normals, d) < 0)[0]


def expected_depths(field: ImplicitField, origin, targets: np.ndarray, n_samples: int = 64):
    """Weighted mean sample distance along origin->target rays (nan if empty)."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.atleast_2d(targets) - o
    rs = sample_rays(field, o, d, n_samples)
    tot = rs.weights.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(tot > MIN_OPACITY, (rs.weights * rs.t).sum(axis=1) / tot, np.nan)
    return depth, rs


def expected_depth(field: ImplicitField, ray: Ray, n_samples: int = 64) -> float | None:
    depth, _ = expected_depths(field, ray.origin, (ray.origin + ray.direction)[None], n_samples)
    return None if np.isnan(depth[0]) else float(depth[0])


def depth_filter(indices, P: np.ndarray, field: ImplicitField, origin, eps: float = DEPTH_EPS,
                 n_samples: int = 64) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        return indices
    depth, _ = expected_depths(field, origin, P[indices], n_samples)
    dist = np.linalg.norm(P[indices] - np.asarray(origin, dtype=np.float64), axis=1)
    keep = ~np.isnan(depth) & (np.abs(depth - dist) <= eps)
    return indices[keep]


class ColorRays:
    """Visible camera rays of a mesh with frozen density weights.

    ``pair_*`` arrays describe (vertex, camera) rays that passed both tests;
    ``sample_*`` arrays hold the quadrature samples of those rays whose
    normalised weight exceeds :data:`PRUNE_WEIGHT`.
    """

    def __init__(self, field: ImplicitField, mesh: Mesh, cameras, eps: float = DEPTH_EPS,
                 n_samples: int = 64, check_outside: bool = True):
        if len(cameras) == 0:
            raise ValueError("colour extraction needs at least one camera")
        self.n_vertices = mesh.n_vertices
        normals = vertex_normals(mesh)
        pv, pc = [], []
        sp, spos, sdir, sw = [], [], [], []
        n_pairs = 0
        for ci, cam in enumerate(cameras):
            o = cam.origin if isinstance(cam, Camera) else np.asarray(cam, dtype=np.float64)
            if check_outside and not (np.any(o < field.b_min) or np.any(o > field.b_max)):
                raise ValueError(f"camera {ci} origin lies inside the field bbox")
            front = front_filter(mesh.P, normals, o)
            if len(front) == 0:
                continue
            depth, rs = expected_depths(field, o, mesh.P[front], n_samples)
            dist = np.linalg.norm(mesh.P[front] - o, axis=1)
            ok = ~np.isnan(depth) & (np.abs(depth - dist) <= eps)
            vis = front[ok]
            if len(vis) == 0:
                continue
            # a vertex sits on the surface, so nothing lies behind it: use the
            # opacity-normalised integral rather than compositing a background
            W = rs.weights[ok]
            W = W / W.sum(axis=1, keepdims=True)
            # drop negligible samples, then renormalise what is left
            W = np.where(W > PRUNE_WEIGHT, W, 0.0)
            W /= W.sum(axis=1, keepdims=True)
            pv.append(vis)
            pc.append(np.full(len(vis), ci))
            r, k = np.nonzero(W > PRUNE_WEIGHT)
            sp.append(r + n_pairs)
            spos.append(rs.points[ok][r, k])
            sdir.append(rs.dirs[ok][r])
            sw.append(W[r, k])
            n_pairs += len(vis)
        cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)
        self.pair_vertex = cat(pv, (0,)).astype(np.int64)
        self.pair_camera = cat(pc, (0,)).astype(np.int64)
        self.sample_pair = cat(sp, (0,)).astype(np.int64)
        self.sample_pos = cat(spos, (0, 3))
        self.sample_dir = cat(sdir, (0, 3))
        self.sample_w = cat(sw, (0,))
        self.visibility = np.bincount(self.pair_vertex, minlength=self.n_vertices)

    def visible_vertices(self) -> np.ndarray:
        return np.nonzero(self.visibility > 0)[0]

    def _select(self, vertices):
        if vertices is None:
            pmask = np.ones(len(self.pair_vertex), bool)
        else:
            want = np.zeros(self.n_vertices, bool)
            want[np.asarray(vertices, dtype=np.int64)] = True
            pmask = want[self.pair_vertex]
        return pmask, pmask[self.sample_pair]

    def colors(self, field: ImplicitField, vertices=None) -> np.ndarray:
        """Mean rendered colour per vertex; rows of invisible/unselected vertices are zero."""
        pmask, smask = self._select(vertices)
        out = np.zeros((self.n_vertices, 3))
        if not pmask.any():
            return out
        c = field.radiance(self.sample_pos[smask], self.sample_dir[smask])
        n_pairs = len(self.pair_vertex)
        pair_rgb = np.zeros((n_pairs, 3))
        wc = self.sample_w[smask, None] * c
        for ch in range(3):
            pair_rgb[:, ch] = np.bincount(self.sample_pair[smask], weights=wc[:, ch], minlength=n_pairs)
        pv = self.pair_vertex[pmask]
        for ch in range(3):
            out[:, ch] = np.bincount(pv, weights=pair_rgb[pmask, ch], minlength=self.n_vertices)
        vis = np.maximum(self.visibility, 1)
        return out / vis[:, None]

    def colors_with_vjp(self, field: ImplicitField, vertices=None):
        """Like :meth:`colors`, plus ``vjp(seed)`` for the same vertices in one network pass."""
        pmask, smask = self._select(vertices)
        pos, dirs = self.sample_pos[smask], self.sample_dir[smask]
        c, net_vjp = field.radiance_model.forward_with_vjp(pos, dirs)
        vis = np.maximum(self.visibility, 1)
        pv = self.pair_vertex[self.sample_pair[smask]]
        scale = self.sample_w[smask] / vis[pv]
        out = np.zeros((self.n_vertices, 3))
        for ch in range(3):
            out[:, ch] = np.bincount(pv, weights=scale * c[:, ch], minlength=self.n_vertices)

        def vjp(seed):
            seed = np.asarray(seed, dtype=np.float64).reshape(-1, 3)
            return net_vjp(seed[pv] * scale[:, None])

        return out, vjp

    def radiance_vjp(self, field: ImplicitField, seed: np.ndarray, vertices=None) -> np.ndarray:
        """d(sum seed * colors)/d(radiance params)."""
        pmask, smask = self._select(vertices)
        seed = np.asarray(seed, dtype=np.float64).reshape(-1, 3)
        vis = np.maximum(self.visibility, 1)
        pv = self.pair_vertex[self.sample_pair[smask]]
        g = (seed[pv] / vis[pv, None]) * self.sample_w[smask, None]
        return field.radiance_model.vjp(self.sample_pos[smask], self.sample_dir[smask], g)


def fill_invisible(P: np.ndarray, colors: np.ndarray, visibility: np.ndarray):
    """Copy the colour of the nearest visible vertex into invisible ones."""
    colors = colors.copy()
    fallback = visibility == 0
    vis = np.nonzero(~fallback)[0]
    if fallback.any() and len(vis):
        _, nn = cKDTree(P[vis]).query(P[fallback])
        colors[fallback] = colors[vis[nn]]
    elif fallback.any():
        log.warning("no vertex is visible from any camera; colours left at zero")
    return colors, fallback


def extract_colors(field: ImplicitField, mesh: Mesh, cameras, eps: float = DEPTH_EPS,
                   n_samples: int = 64) -> ColoredMesh:
    rays = ColorRays(field, mesh, cameras, eps, n_samples)
    colors = rays.colors(field)
    colors, fallback = fill_invisible(mesh.P, colors, rays.visibility)
    return ColoredMesh(mesh, np.clip(colors, 0.0, 1.0), rays.visibility, fallback)
