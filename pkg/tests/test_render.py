import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reid3d.errors import RenderError
from reid3d.geometry import Camera, Mesh
from reid3d.render import (BACKGROUND, bilinear, distance_transform, rasterize, read_mask, read_rgb,
                           write_mask, write_rgb)

from oracles import brute_coverage, brute_dt, flat_mesh


CAM = Camera(1.0, (0.0, 0.0), [0, 0, 1.0])


class TestCoverage:
    def test_empty_mesh(self):
        buf = rasterize(Mesh(np.zeros((0, 3)), np.zeros((0, 3), int), np.zeros((0, 2)), []), CAM, (8, 6))
        assert buf.coverage == 0
        assert np.all(buf.face_id == BACKGROUND)
        assert np.all(np.isinf(buf.depth))

    def test_single_triangle_matches_brute_force(self):
        xy = np.array([[1.2, 0.7], [14.6, 3.3], [5.1, 11.9]])
        buf = rasterize(flat_mesh(xy, [[0, 1, 2]], 5.0), CAM, (16, 14))
        np.testing.assert_array_equal(buf.silhouette, brute_coverage(xy, [[0, 1, 2]], 16, 14)[0])

    def test_random_meshes_match_brute_force(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            nv = rng.integers(3, 30)
            xy = rng.uniform(-2, 26, (nv, 2))
            # snap some vertices to the pixel grid to exercise edge ties
            snap = rng.random(nv) < 0.3
            xy[snap] = np.round(xy[snap] * 2) / 2
            faces = rng.integers(0, nv, (rng.integers(1, 40), 3))
            faces = faces[(faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])]
            if len(faces) == 0:
                continue
            z = rng.uniform(3, 9, nv)
            buf = rasterize(flat_mesh(xy, faces, z), CAM, (24, 20))
            cov = brute_coverage(xy, faces, 24, 20)
            np.testing.assert_array_equal(buf.silhouette, cov.any(axis=0))
            fg = buf.silhouette
            assert np.all(cov[buf.face_id[fg], np.nonzero(fg)[0], np.nonzero(fg)[1]])

    def test_shared_edge_partition(self):
        # a grid of quads split into triangles: every pixel covered exactly once
        n = 6
        g = np.array([[x * 3.0, y * 3.0] for y in range(n + 1) for x in range(n + 1)])
        faces = []
        for y in range(n):
            for x in range(n):
                a = y * (n + 1) + x
                faces += [[a, a + 1, a + n + 2], [a, a + n + 2, a + n + 1]]
        cov = brute_coverage(g, faces, 18, 18)
        assert np.all(cov.sum(axis=0) == 1)
        buf = rasterize(flat_mesh(g, faces, 4.0), CAM, (18, 18))
        assert buf.silhouette.all()

    def test_winding_independent(self):
        xy = np.array([[1.0, 1.0], [9.0, 2.0], [3.0, 8.0]])
        a = rasterize(flat_mesh(xy, [[0, 1, 2]], 5.0), CAM, (12, 12))
        b = rasterize(flat_mesh(xy, [[0, 2, 1]], 5.0), CAM, (12, 12))
        np.testing.assert_array_equal(a.silhouette, b.silhouette)

    def test_degenerate_triangle_covers_nothing(self):
        xy = np.array([[1.0, 1.0], [5.0, 5.0], [9.0, 9.0]])
        assert rasterize(flat_mesh(xy, [[0, 1, 2]], 5.0), CAM, (12, 12)).coverage == 0

    def test_behind_camera(self):
        mesh = Mesh([[0, 0, -3.0], [1, 0, 1], [0, 1, 1]], [[0, 1, 2]], np.zeros((3, 2)), [])
        with pytest.raises(RenderError):
            rasterize(mesh, CAM, (4, 4))


class TestDepth:
    def test_nearer_face_wins(self):
        xy = np.array([[0.0, 0.0], [10, 0], [0, 10], [2, 2], [12, 2], [2, 12]])
        z = np.array([10, 10, 10, 5, 5, 5.0])
        buf = rasterize(flat_mesh(xy, [[0, 1, 2], [3, 4, 5]], z), CAM, (12, 12))
        assert buf.face_id[3, 3] == 1
        assert buf.depth[3, 3] == pytest.approx(5.0)
        assert buf.face_id[0, 0] == 0

    def test_face_order_independent(self):
        rng = np.random.default_rng(3)
        xy = rng.uniform(0, 16, (30, 2))
        faces = rng.choice(30, (25, 3), replace=True)
        faces = faces[(faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])]
        z = rng.uniform(2, 6, 30)
        a = rasterize(flat_mesh(xy, faces, z), CAM, (16, 16))
        perm = rng.permutation(len(faces))
        b = rasterize(flat_mesh(xy, faces[perm], z), CAM, (16, 16))
        np.testing.assert_array_equal(a.depth, b.depth)
        fg = a.silhouette
        np.testing.assert_array_equal(perm[b.face_id[fg]], a.face_id[fg])

    def test_barycentrics(self, model):
        from reid3d.geometry import Pose, posed_mesh

        mesh = posed_mesh(model, Pose.zero(model.n_joints), np.zeros(40))
        buf = rasterize(mesh, Camera(500, (64, 64), [0, 0, 9]), (128, 128))
        fg = buf.silhouette
        b = buf.bary[fg]
        assert b.min() >= -1e-9
        np.testing.assert_allclose(b.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_array_equal(fg, buf.face_id != BACKGROUND)

    def test_perspective_correct_uv(self):
        # a quad receding in depth: uv at the projected midpoint is not the 3D midpoint's uv
        verts = np.array([[-1, -1, 2.0], [1, -1, 2.0], [1, 1, 8.0], [-1, 1, 8.0]])
        uv = np.array([[0, 0], [1, 0], [1, 1], [0, 1.0]])
        mesh = Mesh(verts, [[0, 1, 2], [0, 2, 3]], uv, [])
        cam = Camera(40.0, (32.0, 32.0), [0, 0, 0.5])
        buf = rasterize(mesh, cam, (64, 64))
        col = 32
        rows = np.nonzero(buf.silhouette[:, col])[0]
        for r in rows[::5]:
            # invert the ray through the pixel centre onto the plane to get the exact v
            yc = (r + 0.5 - 32) / 40.0
            # plane: y = -1 + 2 t, z = 2.5 + 6 t (camera frame), ray y = yc * z
            t = (yc * 2.5 + 1) / (2 - 6 * yc)
            assert buf.uv[r, col, 1] == pytest.approx(t, abs=1e-9)


class TestShading:
    def test_unlit_texture_lookup(self):
        xy = np.array([[0.0, 0.0], [16, 0], [0, 16], [16, 16]])
        mesh = flat_mesh(xy, [[0, 1, 2], [1, 3, 2]], 4.0)
        tex = np.zeros((4, 4, 3))
        tex[..., 0] = np.arange(4)[None, :] * 60
        buf = rasterize(mesh, CAM, (16, 16), texture=tex)
        # uv = xy / 16 here, so column blocks of 4 pixels map to texel columns
        assert buf.color[5, 1, 0] == 0 and buf.color[5, 13, 0] == 180

    def test_lambert_plus_ambient(self):
        xy = np.array([[0.0, 0.0], [8, 0], [0, 8]])
        mesh = flat_mesh(xy, [[0, 1, 2]], 4.0)
        tex = np.full((2, 2, 3), 100.0)
        buf = rasterize(mesh, CAM, (8, 8), texture=tex, light=[0, 0, -1.0])
        assert buf.color[1, 1, 0] == 120  # 100 * (1 + 0.2)
        buf = rasterize(mesh, CAM, (8, 8), texture=tex, light=[0, 0, 1.0])
        assert buf.color[1, 1, 0] == 20  # back-lit: ambient only
        bright = rasterize(mesh, CAM, (8, 8), texture=np.full((2, 2, 3), 250.0), light=[0, 0, -1.0])
        assert bright.color[1, 1, 0] == 255


class TestDistanceTransform:
    def test_hand_value(self):
        m = np.zeros((10, 10), bool)
        m[2, 1] = True
        dt = distance_transform(m)
        assert dt[2, 1] == 0
        assert dt[6, 4] == 5.0

    def test_empty(self):
        assert np.all(np.isinf(distance_transform(np.zeros((5, 5), bool))))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(9)
        for density in (0.001, 0.01, 0.1, 0.5):
            m = rng.random((64, 64)) < density
            np.testing.assert_array_equal(distance_transform(m), brute_dt(m))

    def test_bilinear_at_centres(self):
        f = np.arange(12.0).reshape(3, 4)
        np.testing.assert_allclose(bilinear(f, [[0.5, 0.5], [3.5, 2.5], [1.0, 0.5]]), [0, 11, 0.5])


class TestPng:
    def test_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, (9, 7, 3)).astype(np.uint8)
        write_rgb(tmp_path / "a.png", img)
        np.testing.assert_array_equal(read_rgb(tmp_path / "a.png"), img)
        m = rng.random((9, 7)) > 0.5
        write_mask(tmp_path / "m.png", m)
        np.testing.assert_array_equal(read_mask(tmp_path / "m.png"), m)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_coverage_property(seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-3, 15, (3, 2))
    cov = brute_coverage(xy, [[0, 1, 2]], 12, 12)[0]
    buf = rasterize(flat_mesh(xy, [[0, 1, 2]], 3.0), CAM, (12, 12))
    np.testing.assert_array_equal(buf.silhouette, cov)
