"""Implicit fields and volume rendering along rays.

A field pairs a density model (signed-distance-like, negative inside) with a
radiance model (rgb in [0, 1] as a function of position and view direction).
Analytic SDF primitives serve as test oracles; MLP-backed models are the
trainable ones.  Trainable models expose a flat ``params`` array that an
optimizer may update in place, and ``vjp`` for reverse-mode gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import gradcore
from .gradcore import MlpNet

DEFAULT_BBOX = (np.full(3, -1.5), np.full(3, 1.5))
S_LOGISTIC = 64.0
N_FREQS = 6


def positional_encoding(X: np.ndarray, n_freqs: int = N_FREQS) -> np.ndarray:
    """``[x, sin(2^k x), cos(2^k x)]`` for k < n_freqs, per coordinate."""
    X = np.asarray(X, dtype=np.float64)
    feats = [X]
    s, c = np.sin(X), np.cos(X)
    for k in range(n_freqs):
        if k:
            # double-angle step: frequency 2^k from 2^(k-1)
            s, c = 2.0 * s * c, 1.0 - 2.0 * s * s
        feats.append(s)
        feats.append(c)
    return np.concatenate(feats, axis=-1)


def encoded_dim(n_freqs: int = N_FREQS) -> int:
    return 3 + 6 * n_freqs


def _pe_input_grad(X: np.ndarray, G: np.ndarray, n_freqs: int) -> np.ndarray:
    # chain rule back through positional_encoding
    out = G[:, :3].copy()
    col = 3
    for k in range(n_freqs):
        f = 2.0**k
        out += G[:, col : col + 3] * f * np.cos(f * X)
        out -= G[:, col + 3 : col + 6] * f * np.sin(f * X)
        col += 6
    return out


# ---------------------------------------------------------------------------
# density models
# ---------------------------------------------------------------------------


class SphereSDF:
    def __init__(self, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
        if radius <= 0:
            raise ValueError("sphere radius must be positive")
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=np.float64)

    def __call__(self, X):
        X = np.asarray(X, dtype=np.float64)
        return np.linalg.norm(X - self.center, axis=-1) - self.radius


class BoxSDF:
    def __init__(self, half_extents=(0.5, 0.5, 0.5), center=(0.0, 0.0, 0.0)):
        self.half = np.asarray(half_extents, dtype=np.float64)
        if np.any(self.half <= 0):
            raise ValueError("box half extents must be positive")
        self.center = np.asarray(center, dtype=np.float64)

    def __call__(self, X):
        q = np.abs(np.asarray(X, dtype=np.float64) - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


class TorusSDF:
    """Torus around the z axis."""

    def __init__(self, major: float = 1.0, minor: float = 0.25, center=(0.0, 0.0, 0.0)):
        if major <= 0 or minor <= 0:
            raise ValueError("torus radii must be positive")
        self.major = float(major)
        self.minor = float(minor)
        self.center = np.asarray(center, dtype=np.float64)

    def __call__(self, X):
        p = np.asarray(X, dtype=np.float64) - self.center
        q = np.hypot(p[..., 0], p[..., 1]) - self.major
        return np.hypot(q, p[..., 2]) - self.minor


class PlaneSDF:
    """``n . x - d`` with unit normal ``n``; negative behind the plane."""

    def __init__(self, normal=(0.0, 0.0, 1.0), offset: float = 0.0):
        n = np.asarray(normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("plane normal must be non-zero")
        self.normal = n / norm
        self.offset = float(offset)

    def __call__(self, X):
        return np.asarray(X, dtype=np.float64) @ self.normal - self.offset


class UnionSDF:
    def __init__(self, a, b):
        self.a, self.b = a, b

    def __call__(self, X):
        return np.minimum(self.a(X), self.b(X))


class DifferenceSDF:
    """``a`` with ``b`` carved out."""

    def __init__(self, a, b):
        self.a, self.b = a, b

    def __call__(self, X):
        return np.maximum(self.a(X), -self.b(X))


class ScaledDensity:
    def __init__(self, base, factor: float):
        self.base = base
        self.factor = float(factor)

    def __call__(self, X):
        return self.factor * self.base(X)


class TranslatedDensity:
    def __init__(self, base, offset):
        self.base = base
        self.offset = np.asarray(offset, dtype=np.float64)

    def __call__(self, X):
        return self.base(np.asarray(X, dtype=np.float64) - self.offset)


class MlpDensity:
    """Density MLP on positionally encoded coordinates."""

    def __init__(self, net: MlpNet, n_freqs: int = N_FREQS):
        if net.in_dim != encoded_dim(n_freqs) or net.out_dim != 1:
            raise ValueError("density net must map encoded positions to one value")
        self.net = net
        self.n_freqs = n_freqs

    @classmethod
    def create(cls, hidden: Sequence[int] = (64, 64, 64, 64), n_freqs: int = N_FREQS, seed=0):
        dims = [encoded_dim(n_freqs), *hidden, 1]
        acts = ["softplus"] * len(hidden) + ["linear"]
        return cls(MlpNet.init(dims, acts, seed), n_freqs)

    @property
    def params(self) -> np.ndarray:
        return self.net.theta

    def __call__(self, X):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        return self.net(positional_encoding(X, self.n_freqs))[:, 0]

    def vjp(self, X, seed) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        _, cache = self.net.forward_batch(positional_encoding(X, self.n_freqs))
        return self.net.backward_batch(cache, np.asarray(seed, dtype=np.float64).reshape(-1, 1))

    def input_gradient(self, X) -> np.ndarray:
        """Exact spatial gradient (used as an oracle for the stencil)."""
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        _, cache = self.net.forward_batch(positional_encoding(X, self.n_freqs))
        _, gin = self.net.backward_batch(cache, np.ones((len(X), 1)), want_input=True)
        return _pe_input_grad(X, gin, self.n_freqs)


class TapeDensity:
    """Density written as ``fn(p, theta)`` with gradcore scalar ops.

    ``fn`` receives ``p`` as an (x, y, z) triple and ``theta`` as a sequence;
    with plain arrays it evaluates vectorised, with :class:`gradcore.Var`
    parameters it records a tape per point.
    """

    def __init__(self, fn: Callable, params: Sequence[float]):
        self.fn = fn
        self.params = np.array(params, dtype=np.float64)

    def __call__(self, X):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        th = [float(t) for t in self.params]
        out = self.fn((X[:, 0], X[:, 1], X[:, 2]), th)
        return np.broadcast_to(np.asarray(out, dtype=np.float64), (len(X),)).copy()

    def vjp(self, X, seed) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        seed = np.asarray(seed, dtype=np.float64).ravel()
        grad = np.zeros_like(self.params)
        for p, s in zip(X, seed):
            if s == 0.0:
                continue
            tape = gradcore.Tape()
            th = [tape.var(t) for t in self.params]
            out = self.fn((float(p[0]), float(p[1]), float(p[2])), th)
            if isinstance(out, gradcore.Var):
                grad += s * tape.grad(out, th)
        return grad


def sphere_tape_density(cx: float = 0.0, cy: float = 0.0, radius: float = 1.0) -> TapeDensity:
    """Sphere centred at (cx, cy, 0); the three parameters are trainable."""

    def fn(p, th):
        x, y, z = p
        return gradcore.sqrt((x - th[0]) ** 2 + (y - th[1]) ** 2 + z * z) - th[2]

    return TapeDensity(fn, [cx, cy, radius])


# ---------------------------------------------------------------------------
# radiance models
# ---------------------------------------------------------------------------


class ConstantRadiance:
    def __init__(self, rgb=(0.8, 0.8, 0.8)):
        self.rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)

    def __call__(self, X, D):
        n = np.asarray(X).reshape(-1, 3).shape[0]
        return np.broadcast_to(self.rgb, (n, 3)).copy()


class CheckerRadiance:
    """Smooth 3-D checker: blend of two colours by ``sin(fx) sin(fy) sin(fz)``."""

    def __init__(self, color_a=(0.9, 0.9, 0.2), color_b=(0.2, 0.6, 0.2), frequency: float = 2.0):
        self.a = np.asarray(color_a, dtype=np.float64)
        self.b = np.asarray(color_b, dtype=np.float64)
        self.frequency = float(frequency)

    def __call__(self, X, D):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        k = 0.5 + 0.5 * np.prod(np.sin(self.frequency * X), axis=-1)
        return self.a + k[:, None] * (self.b - self.a)


class FunctionRadiance:
    """Wraps ``fn(X, D) -> (n, 3)``; output is clipped to [0, 1]."""

    def __init__(self, fn: Callable):
        self.fn = fn

    def __call__(self, X, D):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        D = np.asarray(D, dtype=np.float64).reshape(-1, 3)
        return np.clip(np.asarray(self.fn(X, D), dtype=np.float64).reshape(-1, 3), 0.0, 1.0)


class MlpRadiance:
    """Radiance MLP on (encoded position, raw view direction); sigmoid output."""

    def __init__(self, net: MlpNet, n_freqs: int = N_FREQS):
        if net.in_dim != encoded_dim(n_freqs) + 3 or net.out_dim != 3:
            raise ValueError("radiance net must map (encoded position, direction) to rgb")
        if net.activations[-1] != "sigmoid":
            raise ValueError("radiance net must end in a sigmoid")
        self.net = net
        self.n_freqs = n_freqs

    @classmethod
    def create(cls, hidden: Sequence[int] = (64, 64, 64), n_freqs: int = N_FREQS, seed=1):
        dims = [encoded_dim(n_freqs) + 3, *hidden, 3]
        acts = ["softplus"] * len(hidden) + ["sigmoid"]
        return cls(MlpNet.init(dims, acts, seed), n_freqs)

    @property
    def params(self) -> np.ndarray:
        return self.net.theta

    def _inputs(self, X, D):
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        D = np.asarray(D, dtype=np.float64).reshape(-1, 3)
        return np.concatenate([positional_encoding(X, self.n_freqs), D], axis=1)

    def __call__(self, X, D):
        return self.net(self._inputs(X, D))

    def vjp(self, X, D, seed) -> np.ndarray:
        _, cache = self.net.forward_batch(self._inputs(X, D))
        return self.net.backward_batch(cache, np.asarray(seed, dtype=np.float64).reshape(-1, 3))

    def forward_with_vjp(self, X, D):
        """Colours plus a closure mapping an output seed to the parameter gradient."""
        rgb, cache = self.net.forward_batch(self._inputs(X, D))
        return rgb, lambda seed: self.net.backward_batch(cache, np.asarray(seed, dtype=np.float64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# field container
# ---------------------------------------------------------------------------


class ImplicitField:
    """Density + radiance over an axis-aligned bounding box.

    ``sigma_evals`` counts density evaluations (number of points queried).
    """

    def __init__(self, density, radiance=None, bbox=DEFAULT_BBOX, background=(0.0, 0.0, 0.0)):
        self.density = density
        self.radiance_model = radiance if radiance is not None else ConstantRadiance()
        b_min = np.asarray(bbox[0], dtype=np.float64)
        b_max = np.asarray(bbox[1], dtype=np.float64)
        if b_min.shape != (3,) or b_max.shape != (3,) or np.any(b_min >= b_max):
            raise ValueError("bbox must satisfy b_min < b_max componentwise")
        self.b_min, self.b_max = b_min, b_max
        self.background = np.asarray(background, dtype=np.float64)
        self.sigma_evals = 0

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.b_min, self.b_max

    @property
    def bbox_diag(self) -> float:
        return float(np.linalg.norm(self.b_max - self.b_min))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.b_min + self.b_max)

    @property
    def trainable(self) -> bool:
        return hasattr(self.density, "params") or hasattr(self.radiance_model, "params")

    def sigma(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        self.sigma_evals += len(X)
        return np.asarray(self.density(X), dtype=np.float64).reshape(-1)

    def radiance(self, X, D) -> np.ndarray:
        return np.asarray(self.radiance_model(X, D), dtype=np.float64).reshape(-1, 3)

    def with_density(self, density) -> "ImplicitField":
        return ImplicitField(density, self.radiance_model, self.bbox, self.background)

    def with_radiance(self, radiance) -> "ImplicitField":
        return ImplicitField(self.density, radiance, self.bbox, self.background)


def sdf_primitive(kind: str, radiance=None, bbox=DEFAULT_BBOX, background=(0.0, 0.0, 0.0), **params) -> ImplicitField:
    """Build an analytic field.

    Kinds: ``sphere`` (radius, center), ``box`` (half_extents, center),
    ``torus`` (major, minor, center), ``plane`` (normal, offset),
    ``union`` / ``difference`` (a, b: fields or density callables).
    """
    if kind == "sphere":
        dens = SphereSDF(params.get("radius", 1.0), params.get("center", (0, 0, 0)))
    elif kind == "box":
        dens = BoxSDF(params.get("half_extents", (0.5, 0.5, 0.5)), params.get("center", (0, 0, 0)))
    elif kind == "torus":
        dens = TorusSDF(params.get("major", 1.0), params.get("minor", 0.25), params.get("center", (0, 0, 0)))
    elif kind == "plane":
        dens = PlaneSDF(params.get("normal", (0, 0, 1)), params.get("offset", 0.0))
    elif kind in ("union", "difference"):
        a, b = params["a"], params["b"]
        a = a.density if isinstance(a, ImplicitField) else a
        b = b.density if isinstance(b, ImplicitField) else b
        dens = UnionSDF(a, b) if kind == "union" else DifferenceSDF(a, b)
    else:
        raise ValueError(f"unknown primitive kind {kind!r}")
    return ImplicitField(dens, radiance, bbox, background)


# ---------------------------------------------------------------------------
# rays and quadrature
# ---------------------------------------------------------------------------


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = math.inf

    def __post_init__(self) -> None:
        self.origin = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("ray direction must be non-zero")
        if abs(n - 1.0) > 1e-9:
            d = d / n
        self.direction = d
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be below t_far")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass
class QuadratureWeights:
    t: np.ndarray  # bin midpoints
    weights: np.ndarray
    transmittance: np.ndarray

    @property
    def total(self) -> float:
        return float(self.weights.sum())


def ray_box(origins, dirs, b_min, b_max, t_near=0.0, t_far=np.inf):
    """Slab test.  Returns (tn, tf, hit) clipped to [t_near, t_far]."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (b_min - origins) * inv
        t1 = (b_max - origins) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    tn = np.maximum(lo.max(axis=1), t_near)
    tf = np.minimum(hi.min(axis=1), t_far)
    return tn, tf, tf > tn


def logistic_alpha(sig_edges: np.ndarray, s: float = S_LOGISTIC) -> np.ndarray:
    """Opacity per bin from density at bin edges (last axis has n+1 entries)."""
    phi = gradcore.sigmoid(s * sig_edges)
    prev, nxt = phi[..., :-1], phi[..., 1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(prev > 0, (prev - nxt) / prev, 0.0)
    return np.clip(alpha, 0.0, 1.0)


def composite(alpha: np.ndarray):
    """Transmittance before each bin and the resulting weights."""
    trans = np.cumprod(np.concatenate([np.ones_like(alpha[..., :1]), 1.0 - alpha[..., :-1]], axis=-1), axis=-1)
    return trans, trans * alpha


@dataclass
class RaySamples:
    """Batched quadrature for many rays; rows that miss the bbox are all-zero."""

    t: np.ndarray  # (m, n) bin midpoints
    points: np.ndarray  # (m, n, 3) midpoint positions (after any warp)
    dirs: np.ndarray  # (m, 3)
    weights: np.ndarray  # (m, n)
    transmittance: np.ndarray  # (m, n)
    hit: np.ndarray  # (m,)

    @property
    def opacity(self) -> np.ndarray:
        return self.weights.sum(axis=1)


def sample_rays(field: ImplicitField, origins, dirs, n_samples: int = 64, s: float = S_LOGISTIC,
                warp: Callable | None = None) -> RaySamples:
    """Deterministic stratified quadrature (bin midpoints) inside the bbox.

    ``warp`` maps sample positions to the positions at which the field is
    queried (used for deformed-space rendering).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(origins, dirs.shape)
    m = len(dirs)
    tn, tf, hit = ray_box(origins, dirs, field.b_min, field.b_max)
    weights = np.zeros((m, n_samples))
    trans = np.ones((m, n_samples))
    t_mid = np.zeros((m, n_samples))
    points = np.zeros((m, n_samples, 3))
    if hit.any():
        o, d = origins[hit], dirs[hit]
        u = np.linspace(0.0, 1.0, n_samples + 1)
        edges = tn[hit, None] + (tf[hit] - tn[hit])[:, None] * u[None, :]
        mids = 0.5 * (edges[:, :-1] + edges[:, 1:])
        pe = o[:, None, :] + edges[..., None] * d[:, None, :]
        pm = o[:, None, :] + mids[..., None] * d[:, None, :]
        if warp is not None:
            pe = warp(pe.reshape(-1, 3)).reshape(pe.shape)
            pm = warp(pm.reshape(-1, 3)).reshape(pm.shape)
        sig = field.sigma(pe.reshape(-1, 3)).reshape(len(o), n_samples + 1)
        alpha = logistic_alpha(sig, s)
        T, w = composite(alpha)
        weights[hit] = w
        trans[hit] = T
        t_mid[hit] = mids
        points[hit] = pm
    return RaySamples(t_mid, points, dirs, weights, trans, hit)


def shade(field: ImplicitField, rs: RaySamples, background=None) -> np.ndarray:
    """Sum of w_i c_i plus background times residual transmittance."""
    bg = field.background if background is None else np.asarray(background, dtype=np.float64)
    m, n = rs.weights.shape
    rgb = np.zeros((m, 3))
    if rs.hit.any():
        idx = np.nonzero(rs.hit)[0]
        P = rs.points[idx].reshape(-1, 3)
        D = np.repeat(rs.dirs[idx], n, axis=0)
        c = field.radiance(P, D).reshape(len(idx), n, 3)
        rgb[idx] = np.einsum("rn,rnc->rc", rs.weights[idx], c)
    rgb += (1.0 - rs.opacity)[:, None] * bg
    return rgb


def ray_weights(field: ImplicitField, ray: Ray, n_samples: int = 64) -> QuadratureWeights:
    rs = sample_rays(field, ray.origin, ray.direction, n_samples)
    _clip_ray(rs, ray)
    return QuadratureWeights(rs.t[0], rs.weights[0], rs.transmittance[0])


def _clip_ray(rs: RaySamples, ray: Ray) -> None:
    # honour the ray's own [t_near, t_far] on top of the bbox
    if ray.t_near > 0.0 or np.isfinite(ray.t_far):
        outside = (rs.t < ray.t_near) | (rs.t > ray.t_far)
        rs.weights[outside] = 0.0


def render_ray(field: ImplicitField, ray: Ray, n_samples: int = 64, background=None) -> np.ndarray:
    rs = sample_rays(field, ray.origin, ray.direction, n_samples)
    _clip_ray(rs, ray)
    return shade(field, rs, background)[0]


def render_rays(field: ImplicitField, origins, dirs, n_samples: int = 64, background=None) -> np.ndarray:
    return shade(field, sample_rays(field, origins, dirs, n_samples), background)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_field(field: ImplicitField, path) -> None:
    """Density net record followed by the radiance net record."""
    dens, rad = field.density, field.radiance_model
    if not isinstance(dens, MlpDensity) or not isinstance(rad, MlpRadiance):
        raise ValueError("only MLP-backed fields can be checkpointed")
    with open(path, "wb") as f:
        gradcore.write_net(dens.net, f)
        gradcore.write_net(rad.net, f)


def load_field(path, bbox=DEFAULT_BBOX, background=(0.0, 0.0, 0.0)) -> ImplicitField:
    with open(path, "rb") as f:
        dens = MlpDensity(gradcore.read_net(f))
        rad = MlpRadiance(gradcore.read_net(f))
        if f.read(1):
            raise ValueError("trailing bytes after the radiance record")
    return ImplicitField(dens, rad, bbox, background)
