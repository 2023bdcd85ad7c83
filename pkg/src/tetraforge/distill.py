"""Fit MLP-backed fields to analytic ones.

Stands in for a pretrained neural scene: the analytic field supplies density
and radiance targets, sampled uniformly in the bbox and densely near its
surface.
"""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from .fields import ImplicitField, MlpDensity, MlpRadiance
from .gradcore import Adam
from .tetra import extract_mesh

log = logging.getLogger(__name__)


def neural_field(bbox, density_hidden: Sequence[int] = (64, 64, 64, 64),
                 radiance_hidden: Sequence[int] = (64, 64, 64), seed: int = 0,
                 background=(0.0, 0.0, 0.0)) -> ImplicitField:
    dens = MlpDensity.create(density_hidden, seed=seed)
    rad = MlpRadiance.create(radiance_hidden, seed=seed + 1)
    return ImplicitField(dens, rad, bbox, background)


def _surface_points(target: ImplicitField, n: int, rng, N: int = 48) -> np.ndarray:
    mesh = extract_mesh(target, N)
    if mesh.is_empty():
        return rng.uniform(target.b_min, target.b_max, size=(n, 3))
    areas = mesh.face_areas()
    f = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    return np.einsum("nk,nkc->nc", bary, mesh.P[mesh.F[f]])


def fit_density(net_field: ImplicitField, target: ImplicitField, steps: int = 2000, batch: int = 1024,
                lr: float = 1e-3, seed: int = 0, band: float = 0.05) -> list[float]:
    """Regress the MLP density onto the target's signed distance."""
    rng = np.random.default_rng(seed)
    dens = net_field.density
    surf = _surface_points(target, 20000, rng)
    opt = Adam(dens.params.size, lr=lr)
    losses = []
    for step in range(steps):
        half = batch // 2
        near = surf[rng.integers(0, len(surf), half)] + rng.normal(scale=band, size=(half, 3))
        uni = rng.uniform(target.b_min, target.b_max, size=(batch - half, 3))
        X = np.concatenate([near, uni])
        y = target.density(X)
        pred = dens(X)
        r = pred - y
        losses.append(float(np.mean(r * r)))
        opt.step(dens.params, dens.vjp(X, 2.0 * r / len(r)))
        if step % 500 == 0:
            log.info("fit_density step=%d mse=%.3g", step, losses[-1])
    return losses


def fit_radiance(net_field: ImplicitField, target: ImplicitField, steps: int = 2000, batch: int = 1024,
                 lr: float = 1e-3, seed: int = 0, band: float = 0.05) -> list[float]:
    """Regress the MLP radiance onto the target's near the surface, random views."""
    rng = np.random.default_rng(seed + 7)
    rad = net_field.radiance_model
    surf = _surface_points(target, 20000, rng)
    opt = Adam(rad.params.size, lr=lr)
    losses = []
    for step in range(steps):
        X = surf[rng.integers(0, len(surf), batch)] + rng.normal(scale=band, size=(batch, 3))
        D = rng.normal(size=(batch, 3))
        D /= np.linalg.norm(D, axis=1, keepdims=True)
        y = target.radiance(X, D)
        r = rad(X, D) - y
        losses.append(float(np.mean(np.sum(r * r, axis=1))))
        opt.step(rad.params, rad.vjp(X, D, 2.0 * r / len(r)))
        if step % 500 == 0:
            log.info("fit_radiance step=%d mse=%.3g", step, losses[-1])
    return losses


def distill(target: ImplicitField, density_steps: int = 2000, radiance_steps: int = 2000,
            seed: int = 0, **kw) -> ImplicitField:
    """Neural field approximating ``target`` (same bbox and background)."""
    net = neural_field(target.bbox, seed=seed, background=target.background, **kw)
    if density_steps:
        fit_density(net, target, density_steps, seed=seed)
    if radiance_steps:
        fit_radiance(net, target, radiance_steps, seed=seed)
    return net
