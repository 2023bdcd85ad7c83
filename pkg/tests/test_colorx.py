import numpy as np
import pytest

from tetraforge import colorx, fields, tetra
from tetraforge.colorx import Camera
from tetraforge.fields import Ray


def quad():
    P = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    return tetra.Mesh(P, np.array([[0, 1, 2], [0, 2, 3]]))


def sphere_field(radiance=None, r=1.0):
    return fields.sdf_primitive("sphere", radiance=radiance, radius=r)


def ring(n=8, radius=4.0):
    a = 2 * np.pi * np.arange(n) / n
    return [Camera([radius * np.cos(t), radius * np.sin(t), 0.3]) for t in a]


@pytest.fixture(scope="module")
def sphere_mesh():
    return tetra.extract_mesh(sphere_field(), 32)


def test_quad_normals_and_isolated_vertex():
    m = quad()
    assert np.allclose(colorx.vertex_normals(m), [0, 0, 1])
    m2 = tetra.Mesh(np.vstack([m.P, [[5, 5, 5]]]), m.F)
    assert np.all(colorx.vertex_normals(m2)[4] == 0)


def test_sphere_normals_radial(sphere_mesh):
    n = colorx.vertex_normals(sphere_mesh)
    r = sphere_mesh.P / np.linalg.norm(sphere_mesh.P, axis=1, keepdims=True)
    assert np.all(np.einsum("ij,ij->i", n, r) > 0.99)


def test_front_filter_quad():
    m = quad()
    n = colorx.vertex_normals(m)
    assert len(colorx.front_filter(m.P, n, [0.5, 0.5, 3])) == 4
    assert len(colorx.front_filter(m.P, n, [0.5, 0.5, -3])) == 0


def test_front_filter_sphere_hemisphere(sphere_mesh):
    kept = colorx.front_filter(sphere_mesh.P, colorx.vertex_normals(sphere_mesh), [0, 0, 3])
    cell = 3.0 / 31
    assert np.all(sphere_mesh.P[kept, 2] > -cell)
    assert len(kept) > 0.3 * sphere_mesh.n_vertices


def test_expected_depth_wall_and_sphere():
    wall = fields.sdf_primitive("plane", normal=(0, 0, -1), offset=-1.0)  # solid for z > 1
    ray = Ray([0, 0, -1.0], [0, 0, 1])
    spacing = wall.bbox_diag / 64
    assert abs(colorx.expected_depth(wall, ray) - 2.0) <= spacing
    d = colorx.expected_depth(sphere_field(), Ray([0, 0, 3.0], [0, 0, -1]))
    assert abs(d - 2.0) <= 3.0 / 64
    assert colorx.expected_depth(sphere_field(r=0.2), Ray([1.0, 1.0, 3], [0, 0, -1])) is None


def test_depth_filter_unoccluded_plane_keeps_all():
    f = fields.sdf_primitive("plane", normal=(0, 0, -1), offset=0.0)
    m = tetra.extract_mesh(f, 16)
    o = np.array([0.2, 0.1, -3.0])
    front = colorx.front_filter(m.P, colorx.vertex_normals(m), o)
    assert len(front) == m.n_vertices
    kept = colorx.depth_filter(front, m.P, f, o)
    assert np.array_equal(kept, front)


def test_filters_only_remove(sphere_mesh):
    f = sphere_field()
    for cam in colorx.default_rig(f.bbox, 4):
        front = colorx.front_filter(sphere_mesh.P, colorx.vertex_normals(sphere_mesh), cam.origin)
        kept = colorx.depth_filter(front, sphere_mesh.P, f, cam.origin)
        assert set(kept) <= set(front)


def test_default_rig_outside_bbox():
    f = sphere_field()
    rig = colorx.default_rig(f.bbox)
    assert len(rig) == 16 and all(c.outside(f.bbox) for c in rig)


def test_camera_inside_bbox_rejected(sphere_mesh):
    with pytest.raises(ValueError):
        colorx.extract_colors(sphere_field(), sphere_mesh, [Camera([0, 0, 1.2])])
    with pytest.raises(ValueError):
        colorx.extract_colors(sphere_field(), sphere_mesh, [])


def test_constant_red(sphere_mesh):
    f = sphere_field(fields.ConstantRadiance((1, 0, 0)))
    cm = colorx.extract_colors(f, sphere_mesh, colorx.default_rig(f.bbox))
    vis = cm.visibility > 0
    assert vis.mean() > 0.95
    assert np.allclose(cm.colors[vis], [1, 0, 0], atol=1e-2)


def test_view_dependent_two_cameras_mean(sphere_mesh):
    rad = fields.FunctionRadiance(lambda X, D: 0.5 + 0.4 * D)
    f = sphere_field(rad)
    cams = [Camera([0.3, -4.0, 0.2]), Camera([-0.3, 4.0, -0.2])]
    rays = colorx.ColorRays(f, sphere_mesh, cams)
    got = rays.colors(f)
    expect = np.zeros_like(got)
    for v, c in zip(rays.pair_vertex, rays.pair_camera):
        d = sphere_mesh.P[v] - cams[c].origin
        expect[v] += 0.5 + 0.4 * d / np.linalg.norm(d)
    expect /= np.maximum(rays.visibility, 1)[:, None]
    assert np.allclose(got, expect, atol=1e-12)


def test_checkered_sphere_matches_surface_radiance(sphere_mesh):
    rad = fields.CheckerRadiance()
    f = sphere_field(rad)
    cm = colorx.extract_colors(f, sphere_mesh, ring())
    vis = cm.visibility > 0
    truth = rad(sphere_mesh.P, np.zeros_like(sphere_mesh.P))
    assert np.max(np.abs(cm.colors[vis] - truth[vis])) < 3e-2


def test_invisible_vertices_get_fallback(sphere_mesh):
    f = sphere_field(fields.CheckerRadiance())
    cm = colorx.extract_colors(f, sphere_mesh, [Camera([0, 0, 4.0])])
    assert np.array_equal(cm.fallback, cm.visibility == 0)
    assert cm.fallback.any() and not cm.fallback.all()
    assert np.all((cm.colors >= 0) & (cm.colors <= 1))


def test_extra_blind_camera_changes_nothing():
    # a camera looking at a ball that hides every vertex of a second, occluded ball
    big = fields.sdf_primitive("sphere", radius=0.6, center=(0, 0, 0.7))
    small = fields.sdf_primitive("sphere", radius=0.3, center=(0, 0, -0.8))
    f = fields.sdf_primitive("union", a=big, b=small, radiance=fields.CheckerRadiance())
    m = tetra.extract_mesh(small, 24)
    rig = [Camera([0, -4.0, -0.8]), Camera([4.0, 0, -0.8])]
    blind = Camera([0, 0, 4.0])  # the big ball sits between it and the small one
    a = colorx.extract_colors(f, m, rig)
    assert colorx.ColorRays(f, m, [blind]).visibility.sum() == 0
    b = colorx.extract_colors(f, m, rig + [blind])
    assert np.array_equal(a.colors, b.colors) and np.array_equal(a.visibility, b.visibility)


def test_colour_gradient_matches_fd(rng):
    from tetraforge.distill import neural_field

    f = neural_field(fields.DEFAULT_BBOX, (16, 16), (16,), seed=2)
    f.density = fields.SphereSDF(radius=1.0)
    m = tetra.extract_mesh(sphere_field(), 12)
    rays = colorx.ColorRays(f, m, colorx.default_rig(f.bbox, 4))
    seed = rng.normal(size=(m.n_vertices, 3))
    c0, vjp = rays.colors_with_vjp(f)
    g = vjp(seed)
    assert np.allclose(g, rays.radiance_vjp(f, seed), rtol=1e-12, atol=1e-12)
    theta = f.radiance_model.params
    for k in rng.choice(theta.size, 8, replace=False):
        old = theta[k]
        theta[k] = old + 1e-6
        fp = np.sum(seed * rays.colors(f))
        theta[k] = old - 1e-6
        fm = np.sum(seed * rays.colors(f))
        theta[k] = old
        fd = (fp - fm) / 2e-6
        assert abs(g[k] - fd) <= 1e-3 * abs(fd) + 1e-9
