import numpy as np
import pytest

from cmreg.projection import _azimuth_step_matrix, render_views, write_pgm_views


class TestRasterize:
    def test_single_center_point(self):
        stack = render_views(np.array([[0.0, 0.0, 0.5]]), v_count=1, resolution=8)
        img = stack.views[0]
        assert img[4, 4] == pytest.approx(0.75)
        assert np.count_nonzero(img) == 1

    def test_zbuffer_keeps_nearest(self):
        pts = np.array([[0.0, 0.0, 0.2], [0.0, 0.0, 0.6], [0.0, 0.0, -0.4]])
        stack = render_views(pts, v_count=1, resolution=8)
        assert stack.views[0][4, 4] == pytest.approx(0.8)

    def test_cube_corners(self):
        c = 0.9
        pts = np.array([[sx, sy, sz] for sx in (-c, c) for sy in (-c, c) for sz in (-c, c)])
        img = render_views(pts, v_count=1, resolution=8).views[0]
        occupied = {(0, 0), (0, 7), (7, 0), (7, 7)}
        for py in range(8):
            for px in range(8):
                if (py, px) in occupied:
                    assert img[py, px] == pytest.approx(0.95)  # front face wins
                else:
                    assert img[py, px] == 0.0

    def test_occupancy_bounded_by_point_count(self):
        pts = np.random.default_rng(3).uniform(-1, 1, size=(40, 3))
        stack = render_views(pts, v_count=4, resolution=16)
        for img in stack.views:
            assert np.count_nonzero(img) <= 40

    def test_values_in_unit_interval(self):
        pts = np.random.default_rng(4).uniform(-1, 1, size=(100, 3))
        stack = render_views(pts, v_count=4, resolution=32)
        assert stack.views.min() >= 0.0 and stack.views.max() <= 1.0


class TestViewStack:
    def test_shapes_and_angles(self):
        pts = np.random.default_rng(0).normal(size=(30, 3))
        stack = render_views(pts, v_count=4, resolution=16)
        assert stack.views.shape == (4, 16, 16)
        assert stack.view_angles.tolist() == [0.0, 90.0, 180.0, 270.0]

    def test_prerotation_shifts_stack_bitwise(self):
        pts = np.random.default_rng(1).uniform(-0.8, 0.8, size=(50, 3))
        step = _azimuth_step_matrix(4)
        base = render_views(pts, v_count=4, resolution=16)
        shifted = render_views(pts @ step.T, v_count=4, resolution=16)
        for v in range(3):
            assert np.array_equal(shifted.views[v], base.views[v + 1])

    def test_azimuth_about_vertical_axis(self):
        # a point on the y axis is fixed by every azimuth step
        pts = np.array([[0.0, 0.7, 0.0]])
        stack = render_views(pts, v_count=8, resolution=16)
        assert np.array_equal(stack.views, np.repeat(stack.views[:1], 8, axis=0))

    def test_rejects_bad_args(self):
        pts = np.zeros((5, 3))
        with pytest.raises(ValueError):
            render_views(np.zeros((0, 3)), 4, 16)
        with pytest.raises(ValueError):
            render_views(pts, 0, 16)
        with pytest.raises(ValueError):
            render_views(pts, 4, 2)


class TestPgm:
    def test_round_trip(self, tmp_path):
        pts = np.random.default_rng(2).uniform(-1, 1, size=(20, 3))
        stack = render_views(pts, v_count=2, resolution=8)
        paths = write_pgm_views(stack, tmp_path, prefix="v")
        assert len(paths) == 2
        for v, path in enumerate(paths):
            lines = open(path).read().split()
            assert lines[0] == "P2"
            width, height, maxval = int(lines[1]), int(lines[2]), int(lines[3])
            assert (width, height, maxval) == (8, 8, 255)
            vals = np.array(lines[4:], dtype=int).reshape(8, 8)
            assert np.array_equal(vals, np.round(stack.views[v] * 255).astype(int))
