"""Move a neural sphere by editing its mesh.

A small MLP is fitted to a sphere, its mesh is extracted, the mesh is
shifted by 0.3 along x, and the density network is then fine-tuned until
its own extracted surface matches the shifted mesh.  Takes a few minutes.
"""
import sys
from pathlib import Path

import numpy as np

from tetraforge import distill, editor, fields, meshio, tetra

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

target_field = fields.sdf_primitive("sphere", radius=0.8, radiance=fields.CheckerRadiance())
print("fitting an MLP to the sphere ...")
net = distill.distill(target_field, density_steps=1500, radiance_steps=0, seed=0)

source = tetra.extract_mesh(net, 32)
edited = tetra.Mesh(source.P + [0.3, 0.0, 0.0], source.F)
meshio.write_obj(out / "edit_target.obj", edited)

S = lambda m: editor.sample_surface(m, 4096, np.random.default_rng(5)).points
before = editor.chamfer(S(edited), S(source))

cfg = editor.GeomConfig(levels=(4, 5, 6), steps_per_level=100, K=8, samples_per_mesh=2048)
log_every = lambda r: r["step"] % 50 == 0 and print(f"  level {r['level']} step {r['step']:3d} chamfer {r['chamfer']:.3f}")
editor.optimize_geometry(net, editor.EditTask(source, edited, "deform"), cfg, callback=log_every)

after_mesh = tetra.extract_mesh(net, 32)
after = editor.chamfer(S(edited), S(after_mesh))
print(f"chamfer to the edited mesh: {before:.2f} -> {after:.3f}")
print("mesh centre moved from", source.P.mean(0).round(3), "to", after_mesh.P.mean(0).round(3))
fields.save_field(net, out / "moved_sphere.ckpt")
