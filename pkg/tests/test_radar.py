"""Projection and RVP rasterization contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slimfuse.radar import (
    Calibration,
    CalibrationError,
    RadarPoint,
    project,
    rasterize,
    unproject,
)


def toy_calib(fx=100.0, fy=100.0, cx=32.0, cy=24.0):
    k = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
    return Calibration(k, np.eye(4))


def rotated_calib():
    theta = 0.3
    rot = np.array([
        [np.cos(theta), -np.sin(theta), 0],
        [np.sin(theta), np.cos(theta), 0],
        [0, 0, 1.0],
    ])
    e = np.eye(4)
    e[:3, :3] = rot
    e[:3, 3] = [0.5, -0.2, 0.1]
    return Calibration(np.array([[90.0, 0, 30.0], [0, 85.0, 20.0], [0, 0, 1.0]]), e)


class TestCalibration:
    def test_rejects_non_orthonormal_rotation(self):
        e = np.eye(4)
        e[0, 1] = 0.01
        with pytest.raises(CalibrationError, match="orthonormal"):
            Calibration(np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1]]), e)

    def test_rejects_lower_triangular_intrinsic(self):
        k = np.array([[1.0, 0, 0], [0.5, 1, 0], [0, 0, 1]])
        with pytest.raises(CalibrationError, match="upper-triangular"):
            Calibration(k, np.eye(4))

    def test_rejects_negative_focal(self):
        k = np.array([[-1.0, 0, 0], [0, 1, 0], [0, 0, 1]])
        with pytest.raises(CalibrationError, match="focal"):
            Calibration(k, np.eye(4))

    def test_json_roundtrip(self):
        calib = rotated_calib()
        back = Calibration.from_json(calib.to_json())
        np.testing.assert_array_equal(back.intrinsic, calib.intrinsic)
        np.testing.assert_array_equal(back.extrinsic, calib.extrinsic)


class TestProject:
    def test_optical_axis_hits_principal_point(self):
        calib = toy_calib(cx=32.0, cy=24.0)
        out = project(RadarPoint(0, 0, 5.0, 0, 0), calib, image_size=(48, 64))
        assert out is not None
        u, v, rng = out
        assert (u, v) == (32.0, 24.0)
        assert rng == 5.0

    def test_point_behind_camera_absent(self):
        calib = toy_calib()
        assert project(RadarPoint(0.0, 0.0, -1.0, 0, 0), calib) is None

    def test_out_of_frame_absent(self):
        calib = toy_calib()
        assert project(RadarPoint(10.0, 0.0, 1.0, 0, 0), calib, image_size=(48, 64)) is None

    def test_matches_homogeneous_matrix_oracle(self):
        calib = rotated_calib()
        p34 = calib.intrinsic @ calib.extrinsic[:3, :]
        rng = np.random.default_rng(0)
        checked = 0
        for _ in range(200):
            xyz = rng.uniform(-5, 5, 3) + np.array([0, 0, 8.0])
            pt = RadarPoint(*xyz, 0.0, 0.0)
            got = project(pt, calib)
            hom = p34 @ np.append(xyz, 1.0)
            cam = calib.extrinsic[:3, :3] @ xyz + calib.extrinsic[:3, 3]
            if cam[2] <= 0:
                assert got is None
                continue
            u, v = hom[0] / hom[2], hom[1] / hom[2]
            assert got is not None
            np.testing.assert_allclose(got[:2], (u, v), atol=1e-9)
            np.testing.assert_allclose(got[2], np.linalg.norm(cam), atol=1e-9)
            checked += 1
        assert checked > 150

    def test_unproject_roundtrip(self):
        calib = rotated_calib()
        pt = unproject(21.5, 17.25, 12.0, calib, velocity=-1.0, power=9.0)
        got = project(pt, calib)
        assert got is not None
        np.testing.assert_allclose(got, (21.5, 17.25, 12.0), atol=1e-9)


class TestRasterize:
    def test_empty_point_list(self):
        out = rasterize([], toy_calib(), 48, 64)
        assert not out.occupancy.any()
        assert not out.channels.any()

    def test_lone_point_single_pixel(self):
        calib = toy_calib()
        pt = RadarPoint(0, 0, 5.0, -2.0, 11.0)
        out = rasterize([pt], calib, 48, 64, dilation=0)
        assert out.occupancy.sum() == 1
        assert out.channels[0, 24, 32] == 5.0
        assert out.channels[1, 24, 32] == -2.0
        assert out.channels[2, 24, 32] == 11.0

    def test_collision_nearest_range_wins(self):
        calib = toy_calib()
        near = unproject(32.0, 24.0, 7.0, calib, velocity=1.0, power=3.0)
        far = unproject(32.0, 24.0, 10.0, calib, velocity=-4.0, power=8.0)
        for order in ([near, far], [far, near]):
            out = rasterize(order, calib, 48, 64, dilation=0)
            np.testing.assert_allclose(out.channels[:, 24, 32], [7.0, 1.0, 3.0], atol=1e-9)

    def test_roundtrip_range_matches_project(self):
        calib = rotated_calib()
        pt = RadarPoint(1.0, 0.5, 9.0, 0.0, 5.0)
        got = project(pt, calib, image_size=(40, 60))
        assert got is not None
        u, v, rng = got
        out = rasterize([pt], calib, 40, 60, dilation=0)
        assert abs(out.channels[0, int(v), int(u)] - rng) < 1e-6

    def test_dilation_paints_neighborhood(self):
        calib = toy_calib()
        pt = unproject(32.0, 24.0, 6.0, calib)
        out = rasterize([pt], calib, 48, 64, dilation=2)
        assert out.occupancy.sum() == 25
        assert out.occupancy[22:27, 30:35].all()

    def test_occupancy_bound(self):
        calib = toy_calib()
        rng = np.random.default_rng(1)
        pts = [unproject(rng.uniform(0, 63), rng.uniform(0, 47), rng.uniform(3, 40), calib)
               for _ in range(17)]
        for r in (0, 1, 2):
            out = rasterize(pts, calib, 48, 64, dilation=r)
            assert out.occupancy.sum() <= 17 * (2 * r + 1) ** 2

    def test_unoccupied_pixels_all_zero_and_range_positive(self):
        calib = toy_calib()
        rng = np.random.default_rng(2)
        pts = [unproject(rng.uniform(0, 63), rng.uniform(0, 47), rng.uniform(3, 40), calib,
                         velocity=rng.normal(), power=rng.uniform(0, 30))
               for _ in range(9)]
        out = rasterize(pts, calib, 48, 64, dilation=1)
        free = ~out.occupancy
        assert not out.channels[:, free].any()
        assert (out.channels[0, out.occupancy] > 0).all()

    @given(st.integers(min_value=0, max_value=10**6))
    @settings(max_examples=20, deadline=None)
    def test_permutation_invariance(self, seed):
        calib = toy_calib()
        rng = np.random.default_rng(seed)
        pts = [unproject(rng.uniform(0, 63), rng.uniform(0, 47), rng.uniform(3, 40), calib,
                         velocity=rng.normal(), power=rng.uniform(0, 30))
               for _ in range(8)]
        base = rasterize(pts, calib, 48, 64, dilation=2)
        perm = list(pts)
        rng.shuffle(perm)
        other = rasterize(perm, calib, 48, 64, dilation=2)
        np.testing.assert_array_equal(base.channels, other.channels)
        np.testing.assert_array_equal(base.occupancy, other.occupancy)
