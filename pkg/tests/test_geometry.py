import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdnx import geometry as geo
from mdnx.geometry import Box3D, CameraCalib


def make_calib(f=700.0, cx=600.0, cy=180.0, size=(1242, 375)):
    P = np.array([[f, 0.0, cx, 0.0], [0.0, f, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
    return CameraCalib(P=P, image_size=size)


def random_box(rng, spread=6.0) -> Box3D:
    return Box3D(
        location=(rng.uniform(-spread, spread), rng.uniform(-1, 3), rng.uniform(4, 4 + 2 * spread)),
        dimensions=(rng.uniform(0.8, 2.2), rng.uniform(0.8, 2.4), rng.uniform(1.5, 5.0)),
        yaw=rng.uniform(-math.pi, math.pi),
    )


def mc_bev_iou(a: Box3D, b: Box3D, n: int, seed: int) -> float:
    """Monte-Carlo IoU of the two footprints by uniform point sampling."""
    rng = np.random.default_rng(seed)
    pts_a, pts_b = geo.bev_footprint(a), geo.bev_footprint(b)
    lo = np.minimum(pts_a.min(0), pts_b.min(0))
    hi = np.maximum(pts_a.max(0), pts_b.max(0))
    samples = rng.uniform(lo, hi, size=(n, 2))
    in_a = _in_footprint(samples, a)
    in_b = _in_footprint(samples, b)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def _in_footprint(pts: np.ndarray, box: Box3D) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = pts[:, 0] - box.location[0]
    dz = pts[:, 1] - box.location[2]
    local_x = c * dx - s * dz
    local_z = s * dx + c * dz
    _, w, l = box.dimensions
    return (np.abs(local_x) <= l / 2) & (np.abs(local_z) <= w / 2)


def mc_iou_3d(a: Box3D, b: Box3D, n: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    ca, cb = geo.box3d_corners(a), geo.box3d_corners(b)
    lo = np.minimum(ca.min(0), cb.min(0))
    hi = np.maximum(ca.max(0), cb.max(0))
    samples = rng.uniform(lo, hi, size=(n, 3))

    def inside(box):
        planar = _in_footprint(samples[:, [0, 2]], box)
        y0, y1 = box.location[1] - box.dimensions[0], box.location[1]
        return planar & (samples[:, 1] >= y0) & (samples[:, 1] <= y1)

    in_a, in_b = inside(a), inside(b)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


class TestProjection:
    def test_center_on_optical_axis_hits_principal_point(self):
        calib = make_calib()
        box = Box3D(location=(0.0, 0.75, 10.0), dimensions=(1.5, 1.6, 3.9), yaw=0.3)
        # geometric center sits at (0, 0, 10), on the axis
        assert geo.project_center(box, calib) == (600.0, 180.0)

    def test_doubling_depth_halves_offset(self):
        calib = make_calib()
        near = geo.project_point((2.0, 1.0, 10.0), calib)
        far = geo.project_point((2.0, 1.0, 20.0), calib)
        assert abs((far[0] - 600.0) * 2 - (near[0] - 600.0)) < 1e-9
        assert abs((far[1] - 180.0) * 2 - (near[1] - 180.0)) < 1e-9

    def test_matches_direct_homogeneous_multiply(self):
        rng = np.random.default_rng(0)
        P = np.array([[650.0, 0.0, 610.0, 44.8], [0.0, 650.0, 170.0, 0.1], [0.0, 0.0, 1.0, 0.003]])
        calib = CameraCalib(P=P, image_size=(1242, 375))
        for _ in range(20):
            box = random_box(rng)
            got = geo.project_center(box, calib)
            hom = P @ np.append(box.center(), 1.0)
            np.testing.assert_allclose(got, hom[:2] / hom[2], rtol=1e-9)

    def test_behind_camera_rejected(self):
        box = Box3D(location=(0.0, 0.0, -5.0), dimensions=(1.0, 1.0, 1.0), yaw=0.0)
        with pytest.raises(geo.ProjectionError):
            geo.project_center(box, make_calib())

    def test_back_project_inverts_projection(self):
        P = np.array([[650.0, 0.0, 610.0, 44.8], [0.0, 650.0, 170.0, 0.1], [0.0, 0.0, 1.0, 0.003]])
        calib = CameraCalib(P=P, image_size=(1242, 375))
        rng = np.random.default_rng(1)
        for _ in range(20):
            pt = np.array([rng.uniform(-5, 5), rng.uniform(-2, 2), rng.uniform(3, 40)])
            u, v = geo.project_point(pt, calib)
            back = geo.back_project(u, v, pt[2], calib)
            np.testing.assert_allclose(back, pt, rtol=1e-9, atol=1e-9)


class TestCorners:
    def test_axis_aligned_unit_cube(self):
        box = Box3D(location=(0.0, 0.5, 5.0), dimensions=(1.0, 1.0, 1.0), yaw=0.0)
        corners = geo.box3d_corners(box)
        assert set(np.round(corners[:, 0], 9)) == {-0.5, 0.5}
        assert set(np.round(corners[:, 1], 9)) == {-0.5, 0.5}
        assert set(np.round(corners[:, 2], 9)) == {4.5, 5.5}

    def test_quarter_turn_swaps_footprint_extents(self):
        box = Box3D(location=(0.0, 0.0, 10.0), dimensions=(1.0, 2.0, 4.0), yaw=0.0)
        turned = Box3D(location=(0.0, 0.0, 10.0), dimensions=(1.0, 2.0, 4.0), yaw=math.pi / 2)
        c0, c1 = geo.box3d_corners(box), geo.box3d_corners(turned)
        ext0 = c0.max(0) - c0.min(0)
        ext1 = c1.max(0) - c1.min(0)
        np.testing.assert_allclose(ext1[[2, 1, 0]], ext0, atol=1e-12)

    def test_pairwise_distances_invariant_under_yaw(self):
        rng = np.random.default_rng(2)
        box = random_box(rng)
        ref = geo.box3d_corners(Box3D(box.location, box.dimensions, 0.0))
        ref_d = np.linalg.norm(ref[:, None] - ref[None, :], axis=-1)
        for yaw in rng.uniform(-math.pi, math.pi, size=8):
            c = geo.box3d_corners(Box3D(box.location, box.dimensions, yaw))
            d = np.linalg.norm(c[:, None] - c[None, :], axis=-1)
            np.testing.assert_allclose(d, ref_d, atol=1e-9)

    def test_bottom_face_at_location_height(self):
        box = Box3D(location=(1.0, 1.65, 8.0), dimensions=(1.5, 1.6, 3.9), yaw=0.7)
        corners = geo.box3d_corners(box)
        np.testing.assert_allclose(corners[:4, 1], 1.65, atol=1e-12)
        np.testing.assert_allclose(corners[4:, 1], 1.65 - 1.5, atol=1e-12)


class TestBevIoU:
    def test_identical_boxes(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            box = random_box(rng)
            assert geo.bev_iou(box, box) == 1.0

    def test_disjoint_boxes(self):
        a = Box3D(location=(0.0, 0.0, 5.0), dimensions=(1.0, 1.0, 1.0), yaw=0.2)
        b = Box3D(location=(10.0, 0.0, 5.0), dimensions=(1.0, 1.0, 1.0), yaw=1.0)
        assert geo.bev_iou(a, b) == 0.0

    def test_half_offset_squares_give_one_third(self):
        # unit squares offset by 0.5: intersection 0.5, union 1.5
        a = Box3D(location=(0.0, 0.0, 5.0), dimensions=(1.0, 1.0, 1.0), yaw=0.0)
        b = Box3D(location=(0.5, 0.0, 5.0), dimensions=(1.0, 1.0, 1.0), yaw=0.0)
        assert abs(geo.bev_iou(a, b) - 1.0 / 3.0) < 1e-12

    def test_against_monte_carlo_oracle(self):
        rng = np.random.default_rng(4)
        for trial in range(12):
            a = random_box(rng, spread=2.0)
            b = Box3D(
                location=(a.location[0] + rng.uniform(-2, 2), 0.0, a.location[2] + rng.uniform(-2, 2)),
                dimensions=(rng.uniform(0.8, 2.0), rng.uniform(0.8, 2.4), rng.uniform(1.5, 4.0)),
                yaw=rng.uniform(-math.pi, math.pi),
            )
            exact = geo.bev_iou(a, b)
            approx = mc_bev_iou(a, b, n=200_000, seed=trial)
            assert abs(exact - approx) < 8e-3

    def test_symmetry_exact(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            assert geo.bev_iou(a, b) == geo.bev_iou(b, a)

    def test_yaw_invariance_of_pairs(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            a = random_box(rng, spread=2.0)
            b = random_box(rng, spread=2.0)
            base = geo.bev_iou(a, b)
            theta = rng.uniform(-math.pi, math.pi)
            c, s = math.cos(theta), math.sin(theta)

            def rotate(box):
                x, y, z = box.location
                return Box3D(
                    location=(c * x + s * z, y, -s * x + c * z),
                    dimensions=box.dimensions,
                    yaw=geo.wrap_angle(box.yaw + theta),
                )

            assert abs(geo.bev_iou(rotate(a), rotate(b)) - base) < 1e-9


class TestIou3D:
    def test_identical(self):
        box = random_box(np.random.default_rng(7))
        assert geo.iou_3d(box, box) == 1.0

    def test_touching_faces_zero(self):
        a = Box3D(location=(0.0, 0.0, 5.0), dimensions=(2.0, 1.0, 1.0), yaw=0.0)
        b = Box3D(location=(0.0, 2.0, 5.0), dimensions=(2.0, 1.0, 1.0), yaw=0.0)
        assert geo.iou_3d(a, b) == 0.0

    def test_half_vertical_overlap_gives_one_third(self):
        # same footprint, overlap h/2: inter v/2, union 3v/2
        a = Box3D(location=(0.0, 0.0, 5.0), dimensions=(2.0, 1.0, 1.0), yaw=0.4)
        b = Box3D(location=(0.0, 1.0, 5.0), dimensions=(2.0, 1.0, 1.0), yaw=0.4)
        assert abs(geo.iou_3d(a, b) - 1.0 / 3.0) < 1e-12

    def test_against_monte_carlo_oracle(self):
        rng = np.random.default_rng(8)
        for trial in range(8):
            a = random_box(rng, spread=1.5)
            b = Box3D(
                location=(
                    a.location[0] + rng.uniform(-1.5, 1.5),
                    a.location[1] + rng.uniform(-0.8, 0.8),
                    a.location[2] + rng.uniform(-1.5, 1.5),
                ),
                dimensions=(rng.uniform(0.8, 2.0), rng.uniform(0.8, 2.4), rng.uniform(1.5, 4.0)),
                yaw=rng.uniform(-math.pi, math.pi),
            )
            exact = geo.iou_3d(a, b)
            approx = mc_iou_3d(a, b, n=200_000, seed=trial)
            assert abs(exact - approx) < 1e-2

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            v = geo.iou_3d(a, b)
            assert v == geo.iou_3d(b, a)
            assert 0.0 <= v <= 1.0


class TestClipPolygon:
    def test_full_containment(self):
        small = np.array([[0.2, 0.2], [0.8, 0.2], [0.8, 0.8], [0.2, 0.8]])
        big = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        out = geo.clip_polygon(small, big)
        assert abs(abs(geo.polygon_area(out)) - 0.36) < 1e-12

    def test_no_overlap_empty(self):
        a = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        b = a + 5.0
        assert geo.clip_polygon(a, b).size == 0

    def test_area_matches_monte_carlo_within_3_sigma(self):
        rng = np.random.default_rng(10)
        a = random_box(rng, spread=1.0)
        b = random_box(rng, spread=1.0)
        inter = geo.clip_polygon(geo.bev_footprint(a), geo.bev_footprint(b))
        exact = abs(geo.polygon_area(inter))

        n = 400_000
        pts_a, pts_b = geo.bev_footprint(a), geo.bev_footprint(b)
        lo = np.minimum(pts_a.min(0), pts_b.min(0))
        hi = np.maximum(pts_a.max(0), pts_b.max(0))
        area_box = float(np.prod(hi - lo))
        samples = rng.uniform(lo, hi, size=(n, 2))
        hits = _in_footprint(samples, a) & _in_footprint(samples, b)
        p = np.count_nonzero(hits) / n
        estimate = p * area_box
        sigma = area_box * math.sqrt(max(p * (1 - p), 1e-12) / n)
        assert abs(exact - estimate) <= 3 * sigma + 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_iou_range_property(seed):
    rng = np.random.default_rng(seed)
    a, b = random_box(rng, spread=2.0), random_box(rng, spread=2.0)
    for fn in (geo.bev_iou, geo.iou_3d):
        v = fn(a, b)
        assert 0.0 <= v <= 1.0


def test_wrap_angle():
    assert geo.wrap_angle(math.pi) == pytest.approx(math.pi)
    assert geo.wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert geo.wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert geo.wrap_angle(0.3) == pytest.approx(0.3)
