"""Command-line pipeline: extract, colorize, edit-geom, edit-color, render, fit.

Progress goes to stderr, a one-line JSON summary to stdout.  Exit codes:
0 success, 2 usage or input error, 3 optimisation abort.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import fields, meshio
from .colorx import Camera, ColoredMesh, default_rig, extract_colors
from .editor import ColorConfig, EditTask, GeomConfig, OptimizationAborted, optimize_color, optimize_geometry
from .octgrid import build_octree, extract_octree_mesh, seed_policy
from .render import build_warp, render_image, render_warped
from .tetra import extract_mesh

log = logging.getLogger("tetraforge")

SCHEMA_VERSION = 1

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "scene": {
        "checkpoint": None,
        "analytic": {"kind": "sphere", "radius": 1.0, "center": [0.0, 0.0, 0.0]},
        "radiance": {"kind": "constant", "rgb": [0.8, 0.8, 0.8]},
    },
    "bbox": [[-1.5, -1.5, -1.5], [1.5, 1.5, 1.5]],
    "grid": {"N": 64},
    "extract": {"mode": "grid", "s": 0.0},
    "octree": {"K": 64, "L_max": 6, "levels": [7, 8, 9]},
    "geometry": {"lr": 1e-3, "w_chamfer": 1.0, "w_eikonal": 1e-4, "steps_per_level": 300,
                 "samples": 4096, "kind": "deform"},
    "color": {"lr": 1e-3, "w_color": 0.2, "oversample_frac": 0.25, "n_aug_cameras": 30, "steps": 2000,
              "batch": 1024, "n_cameras": 16, "depth_eps": 0.2, "n_samples": 64},
    "render": {"resolution": [128, 128], "n_samples": 64, "background": [0.0, 0.0, 0.0],
               "camera": {"origin": [0.0, -5.0, 0.0], "look_at": [0.0, 0.0, 0.0],
                          "up": [0.0, 0.0, 1.0], "fov_deg": 40.0}},
    "fit": {"density_steps": 2000, "radiance_steps": 2000},
    "seed": 0,
}

# sub-dicts whose contents are free-form (primitive parameters)
_OPEN = {("scene", "analytic"), ("scene", "radiance")}


class InputError(Exception):
    pass


def _merge(base: dict, over: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        here = path + (k,)
        if k not in base:
            raise InputError(f"unknown config key {'.'.join(here)!r}")
        if isinstance(base[k], dict) and here not in _OPEN:
            if not isinstance(v, dict):
                raise InputError(f"config key {'.'.join(here)!r} must be an object")
            out[k] = _merge(base[k], v, here)
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    """Defaults overlaid with the JSON file; unknown keys are rejected by name."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise InputError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise InputError("config must be a JSON object")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise InputError(f"unsupported schema_version {version!r}")
    return _merge(DEFAULTS, raw)


# ---------------------------------------------------------------------------
# scene construction
# ---------------------------------------------------------------------------


def _radiance(spec: dict):
    kind = spec.get("kind", "constant")
    if kind == "constant":
        return fields.ConstantRadiance(spec.get("rgb", (0.8, 0.8, 0.8)))
    if kind == "checker":
        return fields.CheckerRadiance(spec.get("color_a", (0.9, 0.9, 0.2)), spec.get("color_b", (0.2, 0.6, 0.2)),
                                      spec.get("frequency", 2.0))
    raise InputError(f"unknown radiance kind {kind!r}")


def _analytic(spec: dict, radiance, bbox, background):
    spec = dict(spec)
    kind = spec.pop("kind", "sphere")
    if kind in ("union", "difference"):
        a = _analytic(spec.pop("a"), radiance, bbox, background)
        b = _analytic(spec.pop("b"), radiance, bbox, background)
        spec.update(a=a, b=b)
    try:
        return fields.sdf_primitive(kind, radiance, bbox, background, **spec)
    except (TypeError, ValueError, KeyError) as e:
        raise InputError(f"bad analytic scene: {e}") from None


def make_field(cfg: dict, ckpt: str | None = None) -> fields.ImplicitField:
    bbox = tuple(np.asarray(b, dtype=np.float64) for b in cfg["bbox"])
    bg = cfg["render"]["background"]
    path = ckpt or cfg["scene"]["checkpoint"]
    if path:
        try:
            return fields.load_field(path, bbox, bg)
        except (OSError, ValueError) as e:
            raise InputError(f"cannot load checkpoint {path}: {e}") from None
    return _analytic(cfg["scene"]["analytic"], _radiance(cfg["scene"]["radiance"]), bbox, bg)


def source_mesh(field, cfg: dict):
    s = cfg["extract"]["s"]
    if cfg["extract"]["mode"] == "octree":
        seed = extract_mesh(field, cfg["grid"]["N"], s)
        if seed.is_empty():
            return seed
        oc = build_octree(seed.P, cfg["octree"]["K"], cfg["octree"]["L_max"])
        return extract_octree_mesh(field, oc, s)
    if cfg["extract"]["mode"] != "grid":
        raise InputError("extract.mode must be 'grid' or 'octree'")
    return extract_mesh(field, cfg["grid"]["N"], s)


def _read_mesh(path: str | None, what: str):
    if not path:
        raise InputError(f"missing {what} mesh path")
    try:
        return meshio.read_mesh(path)
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read {what} mesh {path}: {e}") from None


def _camera(cfg: dict) -> Camera:
    c = cfg["render"]["camera"]
    return Camera(c["origin"], c["look_at"], c["up"], c["fov_deg"], tuple(cfg["render"]["resolution"]))


def _need_out(args):
    if not args.out:
        raise InputError("--out is required")
    return args.out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_extract(args, cfg) -> dict:
    out = _need_out(args)
    field = make_field(cfg, args.ckpt)
    mesh = source_mesh(field, cfg)
    if mesh.is_empty():
        log.warning("empty mesh")
    meshio.write_mesh(out, mesh)
    return {"vertices": mesh.n_vertices, "faces": mesh.n_faces,
            "watertight": mesh.is_watertight(), "out": out}


def cmd_colorize(args, cfg) -> dict:
    out = _need_out(args)
    field = make_field(cfg, args.ckpt)
    mesh, _ = _read_mesh(args.mesh, "input")
    cc = cfg["color"]
    if cc["n_cameras"] < 1:
        raise InputError("colour extraction needs at least one camera")
    cams = default_rig(field.bbox, cc["n_cameras"])
    cm = extract_colors(field, mesh, cams, cc["depth_eps"], cc["n_samples"])
    meshio.write_mesh(out, mesh, cm.colors)
    stats = {
        "cameras": len(cams),
        "visibility": cm.visibility.tolist(),
        "fallback": int(cm.fallback.sum()),
    }
    stats_path = str(out) + ".stats.json"
    Path(stats_path).write_text(json.dumps(stats) + "\n", encoding="utf-8")
    return {"vertices": mesh.n_vertices, "visible": int((cm.visibility > 0).sum()),
            "fallback": stats["fallback"], "out": out, "stats": stats_path}


def _geom_config(cfg: dict, seed: int) -> GeomConfig:
    g, o = cfg["geometry"], cfg["octree"]
    return GeomConfig(levels=tuple(o["levels"]), steps_per_level=g["steps_per_level"], lr=g["lr"],
                      w_chamfer=g["w_chamfer"], w_eikonal=g["w_eikonal"], samples_per_mesh=g["samples"],
                      K=o["K"], s=cfg["extract"]["s"], seed=seed)


def cmd_edit_geom(args, cfg) -> dict:
    out = _need_out(args)
    target, _ = _read_mesh(args.target, "target")
    field = make_field(cfg, args.ckpt)
    if args.mesh:
        src, _ = _read_mesh(args.mesh, "source")
    else:
        src = source_mesh(field, cfg)
    task = EditTask(src, target, cfg["geometry"]["kind"])
    if task.is_noop():
        log.info("no-op edit: target equals the extracted source")
        fields.save_field(field, out)
        return {"noop": True, "out": out}
    res = optimize_geometry(field, task, _geom_config(cfg, args.seed))
    fields.save_field(field, out)
    hist = res.history
    return {"noop": False, "steps": len(hist), "initial_chamfer": hist[0]["chamfer"] if hist else None,
            "final_chamfer": hist[-1]["chamfer"] if hist else None, "out": out}


def _color_config(cfg: dict, seed: int) -> ColorConfig:
    c = cfg["color"]
    return ColorConfig(lr=c["lr"], w_color=c["w_color"], oversample_frac=c["oversample_frac"],
                       n_aug_cameras=c["n_aug_cameras"], steps=c["steps"], batch=c["batch"],
                       n_rig_cameras=c["n_cameras"], depth_eps=c["depth_eps"], n_samples=c["n_samples"],
                       seed=seed)


def cmd_edit_color(args, cfg) -> dict:
    out = _need_out(args)
    target, t_colors = _read_mesh(args.target, "target")
    if t_colors is None:
        raise InputError("target mesh carries no vertex colours")
    field = make_field(cfg, args.ckpt)
    cc = cfg["color"]
    if cc["n_cameras"] < 1:
        raise InputError("colour extraction needs at least one camera")
    src_mesh = _read_mesh(args.mesh, "source")[0] if args.mesh else target
    source = extract_colors(field, src_mesh, default_rig(field.bbox, cc["n_cameras"]), cc["depth_eps"],
                            cc["n_samples"])
    tgt = ColoredMesh(target, t_colors, source.visibility, source.fallback)
    task = EditTask(source, tgt, "recolor")
    try:
        task.validate()
    except ValueError as e:
        raise InputError(str(e)) from None
    if task.is_noop() or np.allclose(source.colors, t_colors, atol=0.5 / 255):
        log.info("no-op edit: target colours equal the extracted source")
        fields.save_field(field, out)
        return {"noop": True, "out": out}
    res = optimize_color(field, task, _color_config(cfg, args.seed))
    fields.save_field(field, out)
    return {"noop": False, "steps": len(res.history), "initial_loss": res.history[0]["loss"],
            "final_loss": res.history[-1]["loss"], "edited_fraction": res.edited_fraction, "out": out}


def cmd_render(args, cfg) -> dict:
    out = _need_out(args)
    field = make_field(cfg, args.ckpt)
    cam = _camera(cfg)
    if not cam.outside(field.bbox):
        raise InputError("camera origin must lie outside the bbox")
    n = cfg["render"]["n_samples"]
    if args.warp:
        src, _ = _read_mesh(args.warp[0], "warp source")
        tgt, _ = _read_mesh(args.warp[1], "warp target")
        try:
            warp = build_warp(src, tgt, field.bbox)
        except ValueError as e:
            raise InputError(str(e)) from None
        img = render_warped(field, warp, cam, n)
    else:
        img = render_image(field, cam, n)
    img.save_png(out)
    centroid = img.silhouette_centroid()
    return {"width": img.width, "height": img.height, "out": out,
            "silhouette_centroid": None if centroid is None else centroid.tolist()}


def cmd_fit(args, cfg) -> dict:
    """Distil the configured analytic scene into an MLP checkpoint."""
    from .distill import distill

    out = _need_out(args)
    cfg = copy.deepcopy(cfg)
    cfg["scene"]["checkpoint"] = None
    target = make_field(cfg)
    net = distill(target, cfg["fit"]["density_steps"], cfg["fit"]["radiance_steps"], seed=args.seed)
    fields.save_field(net, out)
    return {"out": out}


COMMANDS = {
    "extract": cmd_extract,
    "colorize": cmd_colorize,
    "edit-geom": cmd_edit_geom,
    "edit-color": cmd_edit_color,
    "render": cmd_render,
    "fit": cmd_fit,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tetraforge", description="Mesh-guided editing of implicit fields.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", help="output path (mesh, checkpoint or PNG)")
    p.add_argument("--ckpt", help="input field checkpoint (overrides scene.checkpoint)")
    p.add_argument("--mesh", help="input mesh (colorize) or source mesh (edits)")
    p.add_argument("--target", help="user-edited target mesh")
    p.add_argument("--warp", nargs=2, metavar=("SRC", "TGT"), help="render the deformation SRC -> TGT")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _limit_threads():
    n = os.environ.get("TETRAFORGE_THREADS")
    if not n:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("TETRAFORGE_THREADS set but threadpoolctl is unavailable")
        return None
    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s %(levelname)s %(message)s")
    _limiter = _limit_threads()
    try:
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = int(cfg["seed"])
        summary = COMMANDS[args.command](args, cfg)
    except InputError as e:
        print(f"tetraforge: error: {e}", file=sys.stderr)
        return 2
    except OptimizationAborted as e:
        print(f"tetraforge: aborted: {e}", file=sys.stderr)
        return 3
    summary = {"command": args.command, **summary}
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
