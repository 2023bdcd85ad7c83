"""Two-step edit optimisation: geometry (Chamfer + Eikonal on an octree
extraction), then colour (L2 on extracted vertex colours).

Geometry steps update only the density parameters and colour steps only the
radiance parameters.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .colorx import Camera, ColoredMesh, ColorRays, default_rig
from .gradcore import Adam, stencil_points
from .octgrid import build_octree, leaves_to_grid, seed_policy
from .tetra import Mesh

log = logging.getLogger(__name__)

BRUTE_FORCE_BELOW = 256


class OptimizationAborted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration and task
# ---------------------------------------------------------------------------


@dataclass
class GeomConfig:
    levels: tuple = (7, 8, 9)
    steps_per_level: int = 300
    lr: float = 1e-3
    w_chamfer: float = 1.0
    w_eikonal: float = 1e-4
    samples_per_mesh: int = 4096
    K: int = 64
    s: float = 0.0
    eikonal_h: float | None = None  # default 1e-3 * bbox diagonal
    seed: int = 0

    def __post_init__(self) -> None:
        self.levels = tuple(int(l) for l in self.levels)
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("levels must be strictly increasing")
        if self.w_chamfer < 0 or self.w_eikonal < 0 or self.lr < 0:
            raise ValueError("weights and learning rate must be non-negative")


@dataclass
class ColorConfig:
    lr: float = 1e-3
    w_color: float = 0.2
    oversample_frac: float = 0.25
    n_aug_cameras: int = 30
    steps: int = 2000
    batch: int = 1024
    n_rig_cameras: int = 16
    depth_eps: float = 0.2
    n_samples: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.oversample_frac <= 1.0:
            raise ValueError("oversample_frac must lie in [0, 1]")
        if self.n_aug_cameras < 0:
            raise ValueError("n_aug_cameras must be non-negative")


def _mesh_of(m) -> Mesh:
    return m.mesh if isinstance(m, ColoredMesh) else m


@dataclass
class EditTask:
    source: Mesh | ColoredMesh
    target: Mesh | ColoredMesh
    kind: str = "deform"

    def __post_init__(self) -> None:
        if self.kind not in ("add", "remove", "deform", "recolor"):
            raise ValueError(f"unknown edit kind {self.kind!r}")

    @property
    def source_mesh(self) -> Mesh:
        return _mesh_of(self.source)

    @property
    def target_mesh(self) -> Mesh:
        return _mesh_of(self.target)

    def congruent(self, tol: float = 1e-9) -> bool:
        a, b = self.source_mesh, self.target_mesh
        return a.P.shape == b.P.shape and bool(np.all(np.abs(a.P - b.P) <= tol))

    def is_noop(self) -> bool:
        a, b = self.source_mesh, self.target_mesh
        same_geom = self.congruent() and np.array_equal(a.F, b.F)
        if not same_geom:
            return False
        if isinstance(self.source, ColoredMesh) and isinstance(self.target, ColoredMesh):
            return bool(np.allclose(self.source.colors, self.target.colors, atol=1e-9))
        return self.kind != "recolor"

    def validate(self) -> None:
        if self.kind == "recolor" and not self.congruent():
            raise ValueError("recolor edits need target positions equal to the source")


# ---------------------------------------------------------------------------
# sampling and losses
# ---------------------------------------------------------------------------


@dataclass
class SurfaceSamples:
    """Points on a mesh as (face, barycentric) pairs, so gradients on the
    points can be pushed back to the mesh vertices."""

    points: np.ndarray
    faces: np.ndarray | None
    bary: np.ndarray | None
    vertex_ids: np.ndarray | None = None  # degenerate case: samples are vertices

    def vertex_grad(self, g: np.ndarray, n_vertices: int) -> np.ndarray:
        out = np.zeros((n_vertices, 3))
        if self.vertex_ids is not None:
            np.add.at(out, self.vertex_ids, g)
            return out
        for k in range(3):
            np.add.at(out, self._F[:, k], self.bary[:, k, None] * g)
        return out

    _F: np.ndarray | None = dc_field(default=None, repr=False)


def sample_surface(mesh: Mesh, n: int, rng=None) -> SurfaceSamples:
    """Area-weighted uniform samples; a mesh without area yields its vertices."""
    if n < 1:
        raise ValueError("need at least one sample")
    if mesh.n_vertices == 0:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(rng)
    areas = mesh.face_areas()
    total = areas.sum() if len(areas) else 0.0
    if total <= 0.0:
        ids = np.arange(n) % mesh.n_vertices
        return SurfaceSamples(mesh.P[ids].copy(), None, None, ids)
    cdf = np.cumsum(areas) / total
    faces = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    F = mesh.F[faces]
    pts = np.einsum("nk,nkc->nc", bary, mesh.P[F])
    return SurfaceSamples(pts, faces, bary, None, F)


def resample_on(mesh: Mesh, samples: SurfaceSamples) -> SurfaceSamples:
    """Same (face, barycentric) draws placed on another mesh with equal faces."""
    if samples.vertex_ids is not None:
        return SurfaceSamples(mesh.P[samples.vertex_ids].copy(), None, None, samples.vertex_ids)
    F = mesh.F[samples.faces]
    pts = np.einsum("nk,nkc->nc", samples.bary, mesh.P[F])
    return SurfaceSamples(pts, samples.faces, samples.bary, None, F)


def _sq_dist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    dx = A[..., 0] - B[..., 0]
    dy = A[..., 1] - B[..., 1]
    dz = A[..., 2] - B[..., 2]
    return dx * dx + dy * dy + dz * dz


def nearest(query: np.ndarray, ref: np.ndarray, tree: cKDTree | None = None):
    """Nearest ``ref`` index and squared distance per query point.

    Ties go to the lower index.  Squared distances are always recomputed
    with the same expression so the brute-force and tree paths agree bitwise.
    """
    if len(ref) < BRUTE_FORCE_BELOW:
        d2 = _sq_dist(query[:, None, :], ref[None, :, :])
        idx = np.argmin(d2, axis=1)
        return idx, d2[np.arange(len(query)), idx]
    tree = tree if tree is not None else cKDTree(ref)
    k = min(4, len(ref))
    _, cand = tree.query(query, k=k)
    cand = cand.reshape(len(query), k)
    d2 = _sq_dist(query[:, None, :], ref[cand])
    # lexicographic (distance, index) minimum
    best = np.argmin(np.where(d2 == d2.min(axis=1, keepdims=True), cand, np.iinfo(np.int64).max), axis=1)
    rows = np.arange(len(query))
    return cand[rows, best], d2[rows, best]


def chamfer_terms(S1: np.ndarray, S2: np.ndarray):
    S1 = np.asarray(S1, dtype=np.float64).reshape(-1, 3)
    S2 = np.asarray(S2, dtype=np.float64).reshape(-1, 3)
    if len(S1) == 0 or len(S2) == 0:
        raise ValueError("chamfer needs two non-empty point sets")
    nn12, d12 = nearest(S1, S2)
    nn21, d21 = nearest(S2, S1)
    return nn12, d12, nn21, d21


def chamfer(S1, S2) -> float:
    """Sum of squared nearest-neighbour distances in both directions."""
    _, d12, _, d21 = chamfer_terms(S1, S2)
    return math.fsum(d12) + math.fsum(d21)


def chamfer_with_grad(S1, S2):
    """Chamfer value and its gradients w.r.t. both point sets."""
    S1 = np.asarray(S1, dtype=np.float64).reshape(-1, 3)
    S2 = np.asarray(S2, dtype=np.float64).reshape(-1, 3)
    nn12, d12, nn21, d21 = chamfer_terms(S1, S2)
    g1 = np.zeros_like(S1)
    g2 = np.zeros_like(S2)
    diff12 = S1 - S2[nn12]
    g1 += 2.0 * diff12
    np.add.at(g2, nn12, -2.0 * diff12)
    diff21 = S2 - S1[nn21]
    g2 += 2.0 * diff21
    np.add.at(g1, nn21, -2.0 * diff21)
    return math.fsum(d12) + math.fsum(d21), g1, g2


def chamfer_param_grad(density, corners, mesh: Mesh, target_pts, samples: SurfaceSamples, weight: float = 1.0):
    """Chamfer between ``target_pts`` and ``samples`` (drawn on ``mesh``) and
    the gradient of ``weight * chamfer`` w.r.t. the density parameters.

    The chain runs samples -> mesh vertices -> corner densities -> params;
    ``corners`` are the grid points the mesh was marched from.
    """
    cd, _, g_cur = chamfer_with_grad(target_pts, samples.points)
    dP = samples.vertex_grad(weight * g_cur, mesh.n_vertices)
    dsig = mesh.density_vjp(dP, len(corners))
    nz = np.nonzero(dsig)[0]
    if len(nz) == 0:
        return cd, np.zeros_like(density.params)
    return cd, density.vjp(corners[nz], dsig[nz])


def eikonal(sigma, points, h: float) -> float:
    """Mean of (|grad sigma| - 1)^2 with a central-difference gradient."""
    P = stencil_points(points, h)
    vals = np.asarray(sigma(P.reshape(-1, 3)), dtype=np.float64).reshape(-1, 6)
    g = (vals[:, 0::2] - vals[:, 1::2]) / (2.0 * h)
    return float(np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2))


def eikonal_with_grad(density, points, h: float):
    """Eikonal mean and its gradient w.r.t. the density parameters."""
    P = stencil_points(points, h).reshape(-1, 3)
    vals = np.asarray(density(P), dtype=np.float64).reshape(-1, 6)
    g = (vals[:, 0::2] - vals[:, 1::2]) / (2.0 * h)
    norm = np.linalg.norm(g, axis=1)
    n = len(norm)
    value = float(np.mean((norm - 1.0) ** 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        dg = np.where(norm[:, None] > 0, (2.0 / n) * ((norm - 1.0) / norm)[:, None] * g, 0.0)
    seed = np.zeros((n, 6))
    seed[:, 0::2] = dg / (2.0 * h)
    seed[:, 1::2] = -dg / (2.0 * h)
    return value, density.vjp(P, seed.ravel())


def color_l2(T_t, T_s) -> float:
    """Mean over vertices of the channel-summed squared difference."""
    T_t = np.asarray(T_t, dtype=np.float64).reshape(-1, 3)
    T_s = np.asarray(T_s, dtype=np.float64).reshape(-1, 3)
    if T_t.shape != T_s.shape:
        raise ValueError("colour arrays differ in length")
    if len(T_t) == 0:
        return 0.0
    return float(np.mean(np.sum((T_t - T_s) ** 2, axis=1)))


def oversample_edited(indices, edited_mask, batch: int, frac: float = 0.25, rng=None) -> np.ndarray:
    """Batch in which edited entries fill at least ceil(frac * batch) slots."""
    if batch < 4:
        raise ValueError("batch must be at least 4")
    rng = np.random.default_rng(rng)
    indices = np.asarray(indices)
    edited = indices[np.asarray(edited_mask, dtype=bool)]
    if len(edited) == 0:
        log.warning("no edited vertices; drawing a plain uniform batch")
        return rng.choice(indices, size=batch, replace=True)
    n_edit = int(math.ceil(frac * batch))
    return np.concatenate([
        rng.choice(edited, size=n_edit, replace=True),
        rng.choice(indices, size=batch - n_edit, replace=True),
    ])


def augment_cameras(centroid, bbox, n: int = 30, rng=None) -> list[Camera]:
    """``n`` cameras looking at ``centroid`` from random directions at
    1.2-2.0 bbox diagonals away."""
    if n < 0:
        raise ValueError("camera count must be non-negative")
    rng = np.random.default_rng(rng)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    diag = float(np.linalg.norm(hi - lo))
    c = np.asarray(centroid, dtype=np.float64)
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = rng.uniform(1.2, 2.0, size=n) * diag
    return [Camera(c + r * d, c) for r, d in zip(radii, dirs)]


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


@dataclass
class GeomResult:
    history: list = dc_field(default_factory=list)
    final_mesh: Mesh | None = None
    grid: object = None


def optimize_geometry(field, task: EditTask, cfg: GeomConfig = GeomConfig(), callback=None) -> GeomResult:
    """Fit the density so the octree extraction matches the target mesh.

    Per level: octree from the edit's seed vertices, then ``steps_per_level``
    Adam steps on ``w_chamfer * chamfer + w_eikonal * sum_x (|grad|-1)^2``.
    The Eikonal term is summed over the samples (not averaged) so its scale
    tracks the summed Chamfer term.
    """
    if task.kind not in ("add", "remove", "deform"):
        raise ValueError("geometry editing handles add/remove/deform edits")
    density = field.density
    if not hasattr(density, "params"):
        raise ValueError("field density is not trainable")
    rng = np.random.default_rng(cfg.seed)
    h = cfg.eikonal_h if cfg.eikonal_h is not None else 1e-3 * field.bbox_diag
    opt = Adam(density.params.size, lr=cfg.lr)
    M_t = task.target_mesh
    seeds = seed_policy(task.kind, task.source_mesh, M_t)
    result = GeomResult()
    empty_run = 0
    for level in cfg.levels:
        octree = build_octree(seeds, cfg.K, level)
        grid = leaves_to_grid(octree)
        result.grid = grid
        log.info("level=%d leaves=%d corners=%d", level, octree.n_leaves, grid.n_corners)
        for step in range(cfg.steps_per_level):
            grid.evaluate(field)
            mesh = grid.march(cfg.s)
            if mesh.is_empty():
                empty_run += 1
                log.warning("level=%d step=%d empty extraction", level, step)
                if empty_run >= 3:
                    raise OptimizationAborted("extraction empty for 3 consecutive steps (field collapsed)")
                continue
            empty_run = 0
            S_t = sample_surface(M_t, cfg.samples_per_mesh, rng)
            S_c = sample_surface(mesh, cfg.samples_per_mesh, rng)
            cd, grad = chamfer_param_grad(density, grid.points, mesh, S_t.points, S_c, cfg.w_chamfer)
            eik = 0.0
            if cfg.w_eikonal > 0:
                eik, g_eik = eikonal_with_grad(density, S_c.points, h)
                grad += cfg.w_eikonal * len(S_c.points) * g_eik
            else:
                eik = eikonal(density, S_c.points, h)
            total = cfg.w_chamfer * cd + cfg.w_eikonal * len(S_c.points) * eik
            opt.step(density.params, grad)
            rec = dict(level=level, step=step, chamfer=cd, eikonal=eik, total=total)
            result.history.append(rec)
            log.info("level=%d step=%d chamfer=%.6g eikonal=%.6g total=%.6g", level, step, cd, eik, total)
            if callback is not None:
                callback(rec)
    grid = result.grid
    grid.evaluate(field)
    result.final_mesh = grid.march(cfg.s)
    return result


# ---------------------------------------------------------------------------
# colour
# ---------------------------------------------------------------------------


@dataclass
class ColorResult:
    history: list = dc_field(default_factory=list)
    cameras: list = dc_field(default_factory=list)
    n_augmented: int = 0
    edited_slots: int = 0
    total_slots: int = 0
    rays: ColorRays | None = None
    edited: np.ndarray | None = None

    @property
    def edited_fraction(self) -> float:
        return self.edited_slots / self.total_slots if self.total_slots else 0.0


def edited_vertices(task: EditTask, tol: float = 1e-6) -> np.ndarray:
    tgt = task.target
    if isinstance(tgt, ColoredMesh) and tgt.edited_mask is not None and tgt.edited_mask.any():
        return tgt.edited_mask.copy()
    if not isinstance(task.source, ColoredMesh) or not isinstance(tgt, ColoredMesh):
        raise ValueError("colour editing needs coloured source and target meshes")
    return np.any(np.abs(tgt.colors - task.source.colors) > tol, axis=1)


def optimize_color(field, task: EditTask, cfg: ColorConfig = ColorConfig(), callback=None) -> ColorResult:
    """Fit the radiance so extracted vertex colours match the painted target."""
    if task.kind != "recolor":
        raise ValueError("colour editing handles recolor edits")
    task.validate()
    radiance = field.radiance_model
    if not hasattr(radiance, "params"):
        raise ValueError("field radiance is not trainable")
    rng = np.random.default_rng(cfg.seed)
    mesh = task.source_mesh
    T_t = task.target.colors
    edited = edited_vertices(task)
    centroid = mesh.P[edited].mean(axis=0) if edited.any() else field.center
    cams = default_rig(field.bbox, cfg.n_rig_cameras)
    aug = augment_cameras(centroid, field.bbox, cfg.n_aug_cameras, rng)
    rays = ColorRays(field, mesh, cams + aug, cfg.depth_eps, cfg.n_samples)
    visible = rays.visibility > 0
    if not (edited & visible).any() and edited.any():
        raise OptimizationAborted("no edited vertex is visible from any camera")
    cand = np.nonzero(visible)[0]
    cand_edited = edited[cand]
    result = ColorResult(cameras=cams + aug, n_augmented=len(aug), rays=rays, edited=edited)
    opt = Adam(radiance.params.size, lr=cfg.lr)
    for step in range(cfg.steps):
        batch = oversample_edited(cand, cand_edited, cfg.batch, cfg.oversample_frac, rng)
        result.edited_slots += int(edited[batch].sum())
        result.total_slots += len(batch)
        uniq = np.unique(batch)
        T_s, vjp = rays.colors_with_vjp(field, uniq)
        diff = T_s[batch] - T_t[batch]
        loss = cfg.w_color * float(np.mean(np.sum(diff * diff, axis=1)))
        seed = np.zeros((mesh.n_vertices, 3))
        np.add.at(seed, batch, (2.0 * cfg.w_color / len(batch)) * diff)
        grad = vjp(seed)
        opt.step(radiance.params, grad)
        rec = dict(step=step, loss=loss)
        result.history.append(rec)
        log.info("step=%d color_loss=%.6g", step, loss)
        if callback is not None:
            callback(rec)
    return result
