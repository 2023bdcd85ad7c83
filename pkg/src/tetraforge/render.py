"""Pinhole rendering of fields, plus warp-field rendering of deformed copies.

A warp is built from a source mesh and an edited copy with the same faces.
Per-vertex translations are spread into space by inverse-distance weighting
over the nearest source vertices; a deformed-space sample ``x`` is pulled
back to ``x - t(x)`` before the field is queried.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .colorx import Camera
from .fields import ImplicitField, sample_rays, shade
from .tetra import Mesh

CHUNK = 4096


@dataclass
class Image:
    width: int
    height: int
    pixels: np.ndarray  # (h, w, 3) linear rgb, row 0 at the top
    alpha: np.ndarray | None = None  # (h, w) accumulated opacity

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(self.height, self.width, 3)

    def to_srgb8(self) -> np.ndarray:
        c = np.clip(self.pixels, 0.0, 1.0)
        s = np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(c, 1.0 / 2.4) - 0.055)
        return np.round(s * 255.0).astype(np.uint8)

    def save_png(self, path: str | Path) -> None:
        from PIL import Image as PILImage

        PILImage.fromarray(self.to_srgb8(), mode="RGB").save(path, format="PNG")

    def silhouette_centroid(self, threshold: float = 0.5):
        """(column, row) centroid of pixels with opacity above ``threshold``."""
        if self.alpha is None:
            raise ValueError("image carries no opacity")
        rows, cols = np.nonzero(self.alpha > threshold)
        if len(rows) == 0:
            return None
        return np.array([cols.mean() + 0.5, rows.mean() + 0.5])


def _render(field: ImplicitField, camera: Camera, n_samples: int, warp=None, background=None) -> Image:
    origins, dirs = camera.pixel_rays()
    rgb = np.empty((len(dirs), 3))
    alpha = np.empty(len(dirs))
    for a in range(0, len(dirs), CHUNK):
        b = a + CHUNK
        rs = sample_rays(field, origins[a:b], dirs[a:b], n_samples, warp=warp)
        rgb[a:b] = shade(field, rs, background)
        alpha[a:b] = rs.opacity
    w, h = camera.resolution
    return Image(w, h, rgb, alpha.reshape(h, w))


def render_image(field: ImplicitField, camera: Camera, n_samples: int = 64, background=None) -> Image:
    return _render(field, camera, n_samples, None, background)


class WarpField:
    """Displacement field interpolated from per-vertex translations."""

    def __init__(self, source: np.ndarray, translation: np.ndarray, k: int = 8, cutoff: float | None = None):
        self.source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
        self.translation = np.asarray(translation, dtype=np.float64).reshape(-1, 3)
        if len(self.source) == 0 or self.source.shape != self.translation.shape:
            raise ValueError("warp needs one translation per source vertex")
        self.k = min(k, len(self.source))
        if cutoff is None:
            cutoff = 0.1 * float(np.linalg.norm(self.source.max(axis=0) - self.source.min(axis=0)))
        self.cutoff = cutoff
        self.tree = cKDTree(self.source)
        self.identity = not np.any(self.translation)

    def displacement(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        out = np.zeros_like(X)
        if self.identity or len(X) == 0:
            return out
        dist, idx = self.tree.query(X, k=self.k)
        dist = dist.reshape(len(X), self.k)
        idx = idx.reshape(len(X), self.k)
        near = dist[:, 0] <= self.cutoff
        exact = dist[:, 0] == 0.0
        d, i = dist[near & ~exact], idx[near & ~exact]
        w = 1.0 / d
        out[near & ~exact] = np.einsum("nk,nkc->nc", w, self.translation[i]) / w.sum(axis=1, keepdims=True)
        out[exact] = self.translation[idx[exact, 0]]
        return out

    def forward(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        return X + self.displacement(X)

    __call__ = forward

    def inverse(self, X: np.ndarray) -> np.ndarray:
        """Approximate pull-back: subtract the translation queried at ``X``."""
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        if self.identity:
            return X
        return X - self.displacement(X)


def build_warp(M_s: Mesh, M_t: Mesh, bbox=None, k: int = 8) -> WarpField:
    """Warp from source to edited target; the two meshes must share topology.

    Displacement is zero farther than 10% of the ``bbox`` diagonal (the
    source mesh's own bbox when not given) from every source vertex.
    """
    if M_s.n_vertices != M_t.n_vertices or not np.array_equal(M_s.F, M_t.F):
        raise ValueError("warp needs meshes with identical vertex count and faces")
    cutoff = None
    if bbox is not None:
        cutoff = 0.1 * float(np.linalg.norm(np.asarray(bbox[1], float) - np.asarray(bbox[0], float)))
    return WarpField(M_s.P, M_t.P - M_s.P, k, cutoff)


def render_warped(field: ImplicitField, warp: WarpField, camera: Camera, n_samples: int = 64,
                  background=None) -> Image:
    """Render the deformed scene: every sample is pulled back through ``warp``."""
    return _render(field, camera, n_samples, warp.inverse, background)
