import json
import subprocess
import sys

import numpy as np
import pytest

from tetraforge import cli, fields, meshio, tetra


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    summary = json.loads(out.out) if code == 0 else None
    return code, summary, out.err


def write_cfg(tmp_path, name="cfg.json", **over):
    p = tmp_path / name
    p.write_text(json.dumps(over))
    return p


def red_cfg(tmp_path, **extra):
    return write_cfg(tmp_path, scene={"radiance": {"kind": "constant", "rgb": [1, 0, 0]},
                                      "analytic": {"kind": "sphere", "radius": 0.8}}, **extra)


def test_defaults_materialised_and_unknown_key_named(tmp_path):
    cfg = cli.load_config(None)
    assert cfg["color"]["n_aug_cameras"] == 30 and cfg["geometry"]["w_eikonal"] == 1e-4
    bad = write_cfg(tmp_path, geometry={"learning_rate": 0.1})
    with pytest.raises(cli.InputError, match="geometry.learning_rate"):
        cli.load_config(str(bad))


def test_unknown_key_exit_2(tmp_path, capsys):
    bad = write_cfg(tmp_path, colour={})
    code, _, err = run(capsys, "extract", "--config", bad, "--out", tmp_path / "m.obj")
    assert code == 2 and "colour" in err


def test_bad_command_exit_2(capsys):
    assert cli.main(["explode"]) == 2


def test_extract_sphere_watertight_and_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.obj", tmp_path / "b.obj"
    code, s, _ = run(capsys, "extract", "--out", a)
    assert code == 0 and s["vertices"] > 1000 and s["watertight"]
    run(capsys, "extract", "--out", b)
    assert a.read_bytes() == b.read_bytes()
    m, _ = meshio.read_obj(a)
    ref = tetra.extract_mesh(fields.sdf_primitive("sphere"), 64)
    assert m.n_vertices == ref.n_vertices == s["vertices"] and m.n_faces == ref.n_faces


def test_extract_empty_mesh_warns(tmp_path, capsys, caplog):
    cfg = write_cfg(tmp_path, grid={"N": 2}, scene={"analytic": {"kind": "sphere", "radius": 0.1,
                                                                  "center": [0.7, 0.7, 0.7]}})
    code, s, _ = run(capsys, "extract", "--config", cfg, "--out", tmp_path / "e.obj")
    assert code == 0 and s["vertices"] == 0 and "empty mesh" in caplog.text


def test_extract_octree_mode(tmp_path, capsys):
    cfg = write_cfg(tmp_path, extract={"mode": "octree"}, octree={"K": 8, "L_max": 5})
    code, s, _ = run(capsys, "extract", "--config", cfg, "--out", tmp_path / "o.obj")
    assert code == 0 and s["vertices"] > 0


def test_missing_checkpoint_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "extract", "--ckpt", tmp_path / "nope.ckpt", "--out", tmp_path / "m.obj")
    assert code == 2 and "checkpoint" in err


def test_colorize_red_with_sidecar(tmp_path, capsys):
    cfg = red_cfg(tmp_path, grid={"N": 24})
    mesh = tmp_path / "m.obj"
    run(capsys, "extract", "--config", cfg, "--out", mesh)
    out = tmp_path / "c.obj"
    code, s, _ = run(capsys, "colorize", "--config", cfg, "--mesh", mesh, "--out", out)
    assert code == 0
    _, cols = meshio.read_obj(out)
    stats = json.loads((tmp_path / "c.obj.stats.json").read_text())
    vis = np.array(stats["visibility"]) > 0
    assert vis.mean() > 0.95
    assert np.allclose(cols[vis], [1, 0, 0], atol=1e-2)
    lines = [l for l in out.read_text().splitlines() if l.startswith("v ")]
    assert all(l.split()[4:] == ["1.000000", "0.000000", "0.000000"] for l, v in zip(lines, vis) if v)


def test_colorize_zero_cameras_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, color={"n_cameras": 0}, grid={"N": 12})
    mesh = tmp_path / "m.obj"
    run(capsys, "extract", "--config", cfg, "--out", mesh)
    code, _, _ = run(capsys, "colorize", "--config", cfg, "--mesh", mesh, "--out", tmp_path / "c.obj")
    assert code == 2


def test_render_centre_pixel_and_determinism(tmp_path, capsys):
    from PIL import Image

    cfg = red_cfg(tmp_path, render={"resolution": [33, 33]})
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    code, s, _ = run(capsys, "render", "--config", cfg, "--out", a)
    run(capsys, "render", "--config", cfg, "--out", b)
    assert code == 0 and a.read_bytes() == b.read_bytes()
    px = np.asarray(Image.open(a))
    assert px[16, 16].tolist() == [255, 0, 0]
    assert np.allclose(s["silhouette_centroid"], [16.5, 16.5], atol=1e-9)


def test_render_identity_warp_equals_plain(tmp_path, capsys):
    cfg = red_cfg(tmp_path, render={"resolution": [24, 24]}, grid={"N": 16})
    mesh = tmp_path / "m.obj"
    run(capsys, "extract", "--config", cfg, "--out", mesh)
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    run(capsys, "render", "--config", cfg, "--out", a)
    code, _, _ = run(capsys, "render", "--config", cfg, "--warp", mesh, mesh, "--out", b)
    assert code == 0 and a.read_bytes() == b.read_bytes()


def test_render_camera_inside_bbox_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, render={"camera": {"origin": [0, 0, 0.5]}})
    assert run(capsys, "render", "--config", cfg, "--out", tmp_path / "x.png")[0] == 2


@pytest.fixture
def sphere_ckpt(tmp_path, trained_sphere):
    p = tmp_path / "sphere.ckpt"
    fields.save_field(trained_sphere, p)
    return p


def test_edit_geom_missing_target_exit_2(tmp_path, capsys, sphere_ckpt):
    code, _, err = run(capsys, "edit-geom", "--ckpt", sphere_ckpt, "--target", tmp_path / "none.obj",
                       "--out", tmp_path / "o.ckpt")
    assert code == 2 and "target" in err


def test_edit_geom_noop(tmp_path, capsys, caplog, sphere_ckpt):
    cfg = write_cfg(tmp_path, grid={"N": 24})
    src = tmp_path / "src.obj"
    run(capsys, "extract", "--config", cfg, "--ckpt", sphere_ckpt, "--out", src)
    out = tmp_path / "o.ckpt"
    caplog.set_level("INFO", logger="tetraforge")
    code, s, _ = run(capsys, "edit-geom", "--config", cfg, "--ckpt", sphere_ckpt, "--target", src,
                     "--out", out)
    assert code == 0 and s["noop"] and "no-op edit" in caplog.text
    assert out.read_bytes() == sphere_ckpt.read_bytes()


def test_edit_geom_translated_sphere(tmp_path, capsys, sphere_ckpt):
    target = tetra.extract_mesh(fields.sdf_primitive("sphere", radius=0.8, center=(0.3, 0, 0)), 32)
    tpath = tmp_path / "t.obj"
    meshio.write_obj(tpath, target)
    cfg = write_cfg(tmp_path, grid={"N": 32}, octree={"K": 8, "levels": [4, 5, 6]},
                    geometry={"steps_per_level": 100, "samples": 2048})
    out = tmp_path / "o.ckpt"
    code, s, _ = run(capsys, "edit-geom", "--config", cfg, "--ckpt", sphere_ckpt, "--target", tpath,
                     "--out", out)
    assert code == 0 and not s["noop"]
    assert s["final_chamfer"] < 0.05 * s["initial_chamfer"]
    edited = fields.load_field(out)
    orig = fields.load_field(sphere_ckpt)
    assert np.array_equal(edited.radiance_model.params, orig.radiance_model.params)


def test_edit_color_paths(tmp_path, capsys, sphere_ckpt):
    cfg = write_cfg(tmp_path, grid={"N": 16},
                    color={"steps": 60, "batch": 128, "n_aug_cameras": 6, "n_cameras": 8, "lr": 0.01})
    mesh = tmp_path / "m.obj"
    run(capsys, "extract", "--config", cfg, "--ckpt", sphere_ckpt, "--out", mesh)
    src = tmp_path / "src.obj"
    run(capsys, "colorize", "--config", cfg, "--ckpt", sphere_ckpt, "--mesh", mesh, "--out", src)
    # unchanged colours -> no-op
    code, s, _ = run(capsys, "edit-color", "--config", cfg, "--ckpt", sphere_ckpt, "--target", src,
                     "--out", tmp_path / "n.ckpt")
    assert code == 0 and s["noop"]
    # uncoloured target -> input error
    assert run(capsys, "edit-color", "--config", cfg, "--ckpt", sphere_ckpt, "--target", mesh,
               "--out", tmp_path / "x.ckpt")[0] == 2
    # paint the +x half blue
    m, cols = meshio.read_obj(src)
    cols[m.P[:, 0] > 0] = [0, 0, 1]
    tgt = tmp_path / "blue.obj"
    meshio.write_obj(tgt, m, cols)
    out = tmp_path / "c.ckpt"
    code, s, _ = run(capsys, "edit-color", "--config", cfg, "--ckpt", sphere_ckpt, "--target", tgt,
                     "--out", out)
    assert code == 0 and not s["noop"]
    assert s["final_loss"] < 0.5 * s["initial_loss"]
    assert s["edited_fraction"] >= 0.25
    a, b = fields.load_field(out), fields.load_field(sphere_ckpt)
    assert np.array_equal(a.density.params, b.density.params)


def test_console_script_runs(tmp_path):
    out = tmp_path / "m.obj"
    cfg = write_cfg(tmp_path, grid={"N": 8})
    r = subprocess.run([sys.executable, "-m", "tetraforge.cli", "extract", "--config", str(cfg),
                        "--out", str(out)], capture_output=True, text=True, env={"TETRAFORGE_THREADS": "1",
                                                                                 "PATH": ""})
    assert r.returncode == 0, r.stderr
    assert json.loads(r.stdout)["command"] == "extract" and out.exists()
