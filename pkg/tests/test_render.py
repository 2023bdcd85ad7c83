import numpy as np
import pytest
from PIL import Image as PILImage

from tetraforge import fields, render, tetra
from tetraforge.colorx import Camera


def red_sphere(**kw):
    return fields.sdf_primitive("sphere", radiance=fields.ConstantRadiance((1, 0, 0)), radius=0.8, **kw)


def cam(res=32):
    return Camera([0, -5.0, 0], fov_deg=40.0, resolution=(res, res))


def test_centre_pixel_is_red_and_corner_background():
    img = render.render_image(red_sphere(background=(0, 0, 1)), cam(33))
    assert np.allclose(img.pixels[16, 16], [1, 0, 0], atol=1e-2)
    assert np.allclose(img.pixels[0, 0], [0, 0, 1], atol=1e-6)


def test_render_deterministic():
    a = render.render_image(red_sphere(), cam())
    b = render.render_image(red_sphere(), cam())
    assert np.array_equal(a.pixels, b.pixels)


def test_png_written(tmp_path):
    img = render.render_image(red_sphere(), cam(16))
    p = tmp_path / "x.png"
    img.save_png(p)
    back = np.asarray(PILImage.open(p))
    assert back.shape == (16, 16, 3) and np.array_equal(back, img.to_srgb8())


def test_srgb_encoding_endpoints():
    img = render.Image(2, 1, np.array([[[0, 0, 0], [1, 1, 1]]], float))
    assert img.to_srgb8().tolist() == [[[0, 0, 0], [255, 255, 255]]]


def test_silhouette_centroid_symmetric():
    img = render.render_image(red_sphere(), cam(32))
    assert np.allclose(img.silhouette_centroid(), [16, 16], atol=1e-9)


def test_warp_displacement_properties(rng):
    src = rng.uniform(-1, 1, (50, 3))
    t = rng.normal(scale=0.1, size=(50, 3))
    w = render.WarpField(src, t, k=4, cutoff=0.3)
    # exact at the vertices
    assert np.array_equal(w.displacement(src), t)
    # zero far away
    assert np.all(w.displacement(np.full((1, 3), 10.0)) == 0)
    # inverse-distance weights form a convex combination of neighbour translations
    X = src[:10] + 0.01
    d = w.displacement(X)
    _, idx = w.tree.query(X, k=4)
    for row, nb in zip(d, idx):
        assert np.all(row >= t[nb].min(axis=0) - 1e-12) and np.all(row <= t[nb].max(axis=0) + 1e-12)


def test_build_warp_requires_same_topology():
    a = tetra.extract_mesh(fields.sdf_primitive("sphere", radius=0.8), 10)
    b = tetra.extract_mesh(fields.sdf_primitive("sphere", radius=0.5), 10)
    with pytest.raises(ValueError):
        render.build_warp(a, b)


def test_identity_warp_bit_identical():
    f = red_sphere()
    m = tetra.extract_mesh(f, 16)
    w = render.build_warp(m, m, f.bbox)
    assert w.identity
    assert np.array_equal(render.render_warped(f, w, cam()).pixels, render.render_image(f, cam()).pixels)


def test_translation_warp_moves_silhouette():
    f = red_sphere()
    m = tetra.extract_mesh(f, 32)
    shifted = tetra.Mesh(m.P + [0.3, 0, 0], m.F)
    c = cam(64)
    img = render.render_warped(f, render.build_warp(m, shifted, f.bbox), c)
    moved = img.silhouette_centroid() - render.render_image(f, c).silhouette_centroid()
    expect = c.project(np.array([[0.3, 0, 0]]))[0] - c.project(np.zeros((1, 3)))[0]
    assert np.linalg.norm(moved - expect) < 1.0
