"""Read colours off a field onto mesh vertices.

Each vertex is looked at from a ring of cameras.  A camera only contributes
if the vertex faces it and nothing sits in front of it, and the per-camera
colours are averaged.
"""
import sys
from pathlib import Path

import numpy as np

from tetraforge import colorx, fields, meshio, tetra

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

field = fields.sdf_primitive("sphere", radius=0.8, radiance=fields.CheckerRadiance())
mesh = tetra.extract_mesh(field, 40)
rig = colorx.default_rig(field.bbox, 16)

cm = colorx.extract_colors(field, mesh, rig)
truth = field.radiance(mesh.P, np.zeros_like(mesh.P))
err = np.abs(cm.colors - truth).max(axis=1)
print(f"{mesh.n_vertices} vertices, seen by {cm.visibility.mean():.1f} cameras on average")
print(f"colour error vs the radiance at the vertex: median {np.median(err):.4f}, max {err.max():.4f}")
meshio.write_obj(out / "checker_sphere.obj", mesh, cm.colors)

# with a single camera most of the sphere is hidden; those vertices borrow
# the colour of their nearest visible neighbour
one = colorx.extract_colors(field, mesh, rig[:1])
print(f"one camera: {one.fallback.sum()} of {mesh.n_vertices} vertices fallback-filled")
