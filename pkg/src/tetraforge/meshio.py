"""OBJ and ASCII PLY reading/writing with optional per-vertex colours.

OBJ colours use the common ``v x y z r g b`` extension with components in
[0, 1].  Polygons are fan-triangulated on read.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .tetra import Mesh


class MeshFormatError(ValueError):
    pass


def _fan(poly: list[int]) -> list[tuple[int, int, int]]:
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def write_obj(path: str | Path, mesh: Mesh, colors=None) -> None:
    """Positions are written with 17 significant digits so they read back exactly."""
    lines = []
    if colors is not None:
        colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        if len(colors) != mesh.n_vertices:
            raise ValueError("one colour per vertex required")
        for p, c in zip(mesh.P, colors):
            lines.append("v %.17g %.17g %.17g %.6f %.6f %.6f" % (*p, *c))
    else:
        for p in mesh.P:
            lines.append("v %.17g %.17g %.17g" % tuple(p))
    for f in mesh.F + 1:
        lines.append("f %d %d %d" % tuple(f))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_obj(path: str | Path) -> tuple[Mesh, np.ndarray | None]:
    verts, cols, faces = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    nums = [float(x) for x in parts[1:]]
                    if len(nums) not in (3, 4, 6, 7):
                        raise MeshFormatError(f"{path}:{lineno}: bad vertex line")
                    verts.append(nums[:3])
                    # 4 -> x y z w; 6/7 -> x y z r g b [a]
                    cols.append(nums[3:6] if len(nums) >= 6 else None)
                elif tag == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    if len(idx) < 3:
                        raise MeshFormatError(f"{path}:{lineno}: face with fewer than 3 vertices")
                    faces.extend(_fan(idx))
            except ValueError as e:
                if isinstance(e, MeshFormatError):
                    raise
                raise MeshFormatError(f"{path}:{lineno}: {e}") from None
    P = np.array(verts, dtype=np.float64).reshape(-1, 3)
    F = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(F) and (F.min() < 0 or F.max() >= len(P)):
        raise MeshFormatError(f"{path}: face index out of range")
    colors = None
    if cols and all(c is not None for c in cols):
        colors = np.array(cols, dtype=np.float64)
    return Mesh(P, F), colors


def read_ply(path: str | Path) -> tuple[Mesh, np.ndarray | None]:
    """ASCII PLY with ``vertex`` (x, y, z, optional red/green/blue) and ``face`` elements."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshFormatError(f"{path}: not a PLY file")
    elements: list[list] = []  # [name, count, [(prop, type, is_list)]]
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if parts[1] != "ascii":
                raise MeshFormatError(f"{path}: only ascii PLY is supported")
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], parts[3], True))
            else:
                elements[-1][2].append((parts[2], parts[1], False))
        elif parts[0] == "end_header":
            break
    body = iter(lines[i:])
    P = np.zeros((0, 3))
    colors = None
    faces: list = []
    for name, count, props in elements:
        rows = [next(body).split() for _ in range(count)]
        if name == "vertex":
            names = [p[0] for p in props]
            data = np.array(rows, dtype=np.float64).reshape(count, len(props))
            P = data[:, [names.index(a) for a in ("x", "y", "z")]]
            if all(c in names for c in ("red", "green", "blue")):
                ci = [names.index(c) for c in ("red", "green", "blue")]
                ctype = props[ci[0]][1]
                colors = data[:, ci]
                if ctype in ("uchar", "uint8", "char", "int8"):
                    colors = colors / 255.0
        elif name == "face":
            for r in rows:
                n = int(r[0])
                faces.extend(_fan([int(x) for x in r[1 : 1 + n]]))
    F = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(F) and (F.min() < 0 or F.max() >= len(P)):
        raise MeshFormatError(f"{path}: face index out of range")
    return Mesh(P, F), colors


def write_ply(path: str | Path, mesh: Mesh, colors=None) -> None:
    head = ["ply", "format ascii 1.0", f"element vertex {mesh.n_vertices}",
            "property double x", "property double y", "property double z"]
    if colors is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head += [f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"]
    out = head
    if colors is not None:
        c8 = np.round(np.clip(colors, 0, 1) * 255).astype(int)
        out += ["%.17g %.17g %.17g %d %d %d" % (*p, *c) for p, c in zip(mesh.P, c8)]
    else:
        out += ["%.17g %.17g %.17g" % tuple(p) for p in mesh.P]
    out += ["3 %d %d %d" % tuple(f) for f in mesh.F]
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def read_mesh(path: str | Path) -> tuple[Mesh, np.ndarray | None]:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise MeshFormatError(f"{path}: unsupported mesh format {suffix!r}")


def write_mesh(path: str | Path, mesh: Mesh, colors=None) -> None:
    if Path(path).suffix.lower() == ".ply":
        write_ply(path, mesh, colors)
    else:
        write_obj(path, mesh, colors)
