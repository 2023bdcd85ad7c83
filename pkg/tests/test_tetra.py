import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tetraforge import fields, tetra
from tetraforge.editor import sample_surface


def unit_sphere():
    return fields.sdf_primitive("sphere", radius=1.0)


def tet_volume(P, t):
    a, b, c, d = P[t]
    return np.dot(np.cross(b - a, c - a), d - a) / 6.0


def radial_hausdorff(mesh, n=20000):
    # mesh -> sphere distance over vertices and dense surface samples
    pts = np.concatenate([mesh.P, sample_surface(mesh, n, 0).points])
    return np.max(np.abs(np.linalg.norm(pts, axis=1) - 1.0))


# --------------------------------------------------------------------- grid


def test_build_grid_corners():
    f = unit_sphere()
    g = tetra.build_grid(f, 2)
    assert len(g.points) == 8
    corners = {tuple(p) for p in itertools.product(*zip(f.b_min, f.b_max))}
    assert {tuple(p) for p in g.points} == corners


def test_grid_positions_and_densities_exact():
    f = unit_sphere()
    g = tetra.build_grid(f, 64)
    assert g.densities[0] == f.sigma(f.b_min[None])[0]
    i, j, k = 5, 17, 63
    expect = f.b_min + np.array([i, j, k]) / 63 * (f.b_max - f.b_min)
    assert np.array_equal(g.points[g.index(i, j, k)], expect)


def test_grid_rejects_small_n():
    with pytest.raises(ValueError):
        tetra.build_grid(unit_sphere(), 1)


def test_grid_reevaluation_bit_identical():
    from tetraforge.distill import neural_field
    from tetraforge.gradcore import Adam

    f = neural_field(fields.DEFAULT_BBOX, (16, 16), (8,), seed=0)
    a = tetra.build_grid(f, 12).densities
    Adam(f.density.params.size).step(f.density.params, np.zeros(f.density.params.size))
    b = tetra.build_grid(f, 12).densities
    assert np.array_equal(a, b)


# ------------------------------------------------------------------- split


def test_split_counts():
    f = unit_sphere()
    assert len(tetra.split_tets(tetra.build_grid(f, 2)).tets) == 5
    assert len(tetra.split_tets(tetra.build_grid(f, 3)).tets) == 40


def test_tets_positive_and_partition_cube():
    g = tetra.build_grid(unit_sphere(), 3)
    ts = tetra.split_tets(g)
    vols = np.array([tet_volume(g.points, t) for t in ts.tets])
    assert np.all(vols > 0)
    cell = np.prod(g.cell)
    assert np.allclose(vols.reshape(-1, 5).sum(axis=1), cell, rtol=1e-12)


def test_shared_face_diagonals_agree():
    N = 4
    g = tetra.build_grid(unit_sphere(), N)
    ts = tetra.split_tets(g)
    # every face of every tet that lies on a cube face must also be a face of
    # the neighbouring cube's tets (same diagonal); exhaustive scan
    ijk = np.stack(np.meshgrid(*(np.arange(N),) * 3, indexing="ij"), -1).reshape(-1, 3)
    faces_by_cube = {}
    for c, tets in enumerate(ts.tets.reshape(-1, 5, 4)):
        fs = set()
        for t in tets:
            for tri in itertools.combinations(t, 3):
                fs.add(tuple(sorted(tri)))
        faces_by_cube[c] = fs
    n_checked = 0
    cube_ijk = np.stack(np.meshgrid(*(np.arange(N - 1),) * 3, indexing="ij"), -1).reshape(-1, 3)
    index = {tuple(v): i for i, v in enumerate(cube_ijk)}
    for c, pos in enumerate(cube_ijk):
        for axis in range(3):
            nb = pos.copy()
            nb[axis] += 1
            if tuple(nb) not in index:
                continue
            # the shared face: corners with coordinate pos[axis]+1 along axis
            def on_face(tri):
                return all(ijk[v][axis] == pos[axis] + 1 for v in tri)

            mine = {f for f in faces_by_cube[c] if on_face(f)}
            theirs = {f for f in faces_by_cube[index[tuple(nb)]] if on_face(f)}
            assert len(mine) == 2 and mine == theirs
            n_checked += 1
    assert n_checked == 3 * (N - 1) ** 2 * (N - 2)


# ----------------------------------------------------------- sign, crossing


def test_classify_rule():
    assert tetra.classify(0.6, 0.5) == 1
    assert tetra.classify(0.5, 0.5) == -1
    assert tetra.classify(-3.0, 0.0) == -1


def test_crossing_examples():
    a, b = [0, 0, 0], [1, 0, 0]
    assert np.allclose(tetra.crossing(a, b, -1, 1), [0.5, 0, 0])
    assert np.allclose(tetra.crossing(a, b, -1, 3), [0.25, 0, 0])
    assert np.allclose(tetra.crossing(a, b, 0, 1, s=0.5), [0.5, 0, 0])


def test_crossing_contract_violation():
    with pytest.raises(ValueError):
        tetra.crossing([0, 0, 0], [1, 0, 0], 1.0, 2.0)


def test_crossing_midpoint_fallback():
    p, _, _, ok = tetra.crossing([0, 0, 0], [2, 0, 0], 0.0, 1e-13, return_partials=True)
    assert not ok and np.allclose(p, [1, 0, 0])


@settings(max_examples=100, deadline=None)
@given(sa=st.floats(-2, -0.05), sb=st.floats(0.05, 2), s=st.floats(-0.5, 0.5))
def test_crossing_partials_match_fd(sa, sb, s):
    va, vb = np.array([0.1, -0.3, 0.7]), np.array([0.9, 0.4, -0.2])
    sa, sb = sa + s, sb + s
    _, da, db, _ = tetra.crossing(va, vb, sa, sb, s, return_partials=True)
    h = 1e-6
    fa = (tetra.crossing(va, vb, sa + h, sb, s) - tetra.crossing(va, vb, sa - h, sb, s)) / (2 * h)
    fb = (tetra.crossing(va, vb, sa, sb + h, s) - tetra.crossing(va, vb, sa, sb - h, s)) / (2 * h)
    assert np.linalg.norm(da - fa) <= 1e-4 * np.linalg.norm(fa)
    assert np.linalg.norm(db - fb) <= 1e-4 * np.linalg.norm(fb)


# --------------------------------------------------------------------- march


def one_tet():
    P = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    return P, np.array([[0, 1, 2, 3]])


def test_march_all_positive_empty():
    P, T = one_tet()
    assert tetra.march(P, T, np.ones(4), 0.0).is_empty()


def test_march_case_counts():
    P, T = one_tet()
    for code in range(16):
        d = np.array([1.0 if (code >> i) & 1 else -1.0 for i in range(4)])
        m = tetra.march(P, T, d)
        npos = bin(code).count("1")
        expect = {0: 0, 4: 0, 1: 1, 3: 1, 2: 2}[npos]
        assert m.n_faces == expect, code


def test_single_negative_corner_triangle_orientation():
    P, T = one_tet()
    m = tetra.march(P, T, np.array([-1.0, 1, 1, 1]))
    assert m.n_faces == 1
    a, b, c = m.P[m.F[0]]
    n = np.cross(b - a, c - a)
    # outward = away from the inside (negative) corner at the origin
    assert np.dot(n, a - P[0]) > 0


def test_sphere_n64_within_two_cell_diagonals_and_resolution_trend():
    f = unit_sphere()
    m64 = tetra.extract_mesh(f, 64)
    m128 = tetra.extract_mesh(f, 128)
    cell_diag = np.linalg.norm((f.b_max - f.b_min) / 63)
    assert np.max(np.abs(np.linalg.norm(m64.P, axis=1) - 1)) < 2 * cell_diag
    assert radial_hausdorff(m128) <= 0.55 * radial_hausdorff(m64)


def test_sphere_watertight_and_outward():
    m = tetra.extract_mesh(unit_sphere(), 32)
    assert m.is_watertight()
    assert m.n_faces == len({tuple(sorted(f)) for f in m.F})
    c = m.P[m.F].mean(axis=1)
    n = np.cross(m.P[m.F[:, 1]] - m.P[m.F[:, 0]], m.P[m.F[:, 2]] - m.P[m.F[:, 0]])
    assert np.all(np.einsum("ij,ij->i", n, c) > 0)


def test_face_indices_valid_and_no_tiny_faces():
    m = tetra.extract_mesh(fields.sdf_primitive("torus", major=0.9, minor=0.35), 40)
    assert m.F.max() < m.n_vertices and m.F.min() >= 0
    assert np.all(m.face_areas() > 1e-12)
    assert m.edges.shape == (m.n_vertices, 2)


def test_active_cube_march_equals_full_march():
    g = tetra.build_grid(fields.sdf_primitive("box", half_extents=(0.7, 0.5, 0.3)), 20)
    full = tetra.march(g.points, tetra.split_tets(g).tets, g.densities)
    fast = tetra.extract_grid_mesh(g)
    assert np.array_equal(full.P, fast.P) and np.array_equal(full.F, fast.F)


def test_march_shift_invariance():
    g = tetra.build_grid(unit_sphere(), 24)
    tets = tetra.split_tets(g).tets
    # densities on a 2^-20 grid, so adding a dyadic delta is exact
    dens = np.round(g.densities * 2.0**20) / 2.0**20
    a = tetra.march(g.points, tets, dens, 0.0)
    for delta in (0.5, -0.25, 2.0):
        b = tetra.march(g.points, tets, dens + delta, delta)
        assert np.array_equal(a.P, b.P) and np.array_equal(a.F, b.F)
    # arbitrary delta: same topology, positions equal up to rounding
    a = tetra.march(g.points, tets, g.densities, 0.0)
    b = tetra.march(g.points, tets, g.densities + 0.1, 0.1)
    assert np.array_equal(a.F, b.F) and np.allclose(a.P, b.P, rtol=0, atol=1e-12)


def test_march_deterministic():
    g = tetra.build_grid(fields.sdf_primitive("torus"), 30)
    a = tetra.extract_grid_mesh(g)
    b = tetra.extract_grid_mesh(g)
    assert np.array_equal(a.P, b.P) and np.array_equal(a.F, b.F)


def test_vertex_density_jacobian_matches_fd(rng):
    g = tetra.build_grid(unit_sphere(), 10)
    tets = tetra.split_tets(g).tets
    dens = g.densities + rng.normal(scale=0.01, size=g.densities.shape)
    m = tetra.march(g.points, tets, dens)
    W = rng.normal(size=m.P.shape)
    grad = m.density_vjp(W, len(dens))
    h = 1e-6
    for k in np.nonzero(grad)[0][:25]:
        dp, dm = dens.copy(), dens.copy()
        dp[k] += h
        dm[k] -= h
        mp, mm = tetra.march(g.points, tets, dp), tetra.march(g.points, tets, dm)
        assert np.array_equal(mp.F, m.F)  # topology fixed
        fd = np.sum(W * (mp.P - mm.P)) / (2 * h)
        assert grad[k] == pytest.approx(fd, rel=1e-4, abs=1e-10)
