import math

import numpy as np
import pytest

from driftplan.track import (
    FootprintCircles,
    FoldOverError,
    OutOfCorridorError,
    Track,
    load_track,
    mixed_circuit,
    save_track,
)


@pytest.fixture(scope="module")
def straight():
    return Track.straight(100.0, width=10.0)


@pytest.fixture(scope="module")
def circle():
    return Track.circle(30.0, width=10.0)


@pytest.fixture(scope="module")
def s_curve():
    return Track.from_segments(
        [("straight", 20.0), ("arc", 25.0, 0.8), ("arc", 25.0, -0.8), ("straight", 20.0)],
        width=10.0)


class TestCartToFrenet:
    def test_straight_axis_aligned(self, straight):
        f = straight.cart_to_frenet(37.2, 1.5)
        assert f.s == pytest.approx(37.2, abs=1e-9)
        assert f.d == pytest.approx(1.5, abs=1e-9)

    def test_circle_closed_form(self, circle):
        R = 30.0
        theta = 1.1
        d0 = 2.0
        # point on radius R - d0 (left of travel for a CCW circle)
        x = (R - d0) * math.sin(theta)
        y = R - (R - d0) * math.cos(theta)
        f = circle.cart_to_frenet(x, y)
        assert f.s == pytest.approx(R * theta, abs=0.05)
        assert f.d == pytest.approx(d0, abs=0.01)

    def test_out_of_corridor(self, straight):
        with pytest.raises(OutOfCorridorError):
            straight.cart_to_frenet(50.0, 40.0)

    @pytest.mark.parametrize("fixture", ["straight", "circle", "s_curve"])
    def test_round_trip(self, fixture, request):
        track = request.getfixturevalue(fixture)
        rng = np.random.default_rng(17)
        for _ in range(1000):
            s = rng.uniform(0.5, track.length - 0.5)
            d = rng.uniform(-4.0, 4.0)
            x, y, _ = track.frenet_to_cart(s, d)
            f = track.cart_to_frenet(x, y)
            ds = f.s - s
            if track.closed:
                ds = (ds + track.length / 2) % track.length - track.length / 2
            assert math.hypot(ds, f.d - d) < 1e-6

    def test_closed_track_wrap(self, circle):
        f = circle.cart_to_frenet(0.0, 0.0)
        assert f.s == pytest.approx(0.0, abs=1e-6) or f.s == pytest.approx(circle.length, abs=1e-6)


class TestFrenetToCart:
    def test_centerline_identity(self, straight):
        x, y, psi = straight.frenet_to_cart(25.0, 0.0)
        assert (x, y) == pytest.approx((25.0, 0.0))
        assert psi == pytest.approx(0.0)

    def test_straight_offset(self, straight):
        x, y, _ = straight.frenet_to_cart(10.0, 3.0)
        assert (x, y) == pytest.approx((10.0, 3.0))

    def test_fold_over(self, circle):
        with pytest.raises(FoldOverError):
            circle.frenet_to_cart(10.0, 31.0)


class TestRoadHeading:
    def test_straight_constant(self, straight):
        assert straight.road_heading(50.0) == pytest.approx(0.0)

    def test_circle_full_turn(self, circle):
        h0 = circle.road_heading(0.0)
        h_end = circle.road_heading(circle.length - 1e-9)
        assert h_end - h0 == pytest.approx(2 * math.pi, abs=0.01)

    def test_matches_finite_difference(self, s_curve):
        for s in np.linspace(1.0, s_curve.length - 1.0, 40):
            x1, y1, _ = s_curve.frenet_to_cart(s - 0.2, 0.0)
            x2, y2, _ = s_curve.frenet_to_cart(s + 0.2, 0.0)
            fd = math.atan2(y2 - y1, x2 - x1)
            h = float(s_curve.road_heading(s)) % (2 * math.pi)
            diff = (h - fd + math.pi) % (2 * math.pi) - math.pi
            assert abs(diff) < 1e-3


class TestOnRoad:
    def test_centered_margin(self, straight):
        ok, margin = straight.on_road(50.0, 0.0, 0.0, FootprintCircles((0.0,), 1.0))
        assert ok and margin == pytest.approx(4.0, abs=1e-9)

    def test_single_circle_violation(self, straight):
        ok, margin = straight.on_road(50.0, 4.1, 0.0, FootprintCircles((0.0,), 1.0))
        assert not ok
        assert margin == pytest.approx(5.0 - 1.0 - 4.1, abs=1e-9)

    def test_yawed_footprint_fails_where_aligned_passes(self, straight):
        circles = FootprintCircles((-1.3, 1.3), 1.0)
        # road-aligned near the edge: both circles stay at d = 3.5
        ok_aligned, _ = straight.on_road(50.0, 3.5, 0.0, circles)
        # 90 deg yaw pushes one circle to d = 4.8 > 4.0
        ok_yawed, _ = straight.on_road(50.0, 3.5, math.pi / 2, circles)
        assert ok_aligned and not ok_yawed
        # oracle: per-circle interval arithmetic
        for off in circles.offsets:
            assert abs(3.5 + off) <= 5.0 - 1.0 or not ok_yawed

    def test_monotone_in_radius(self, s_curve):
        rng = np.random.default_rng(23)
        for _ in range(100):
            s = rng.uniform(1, s_curve.length - 1)
            d = rng.uniform(-5, 5)
            psi = rng.uniform(0, 2 * math.pi)
            try:
                x, y, _ = s_curve.frenet_to_cart(s, d)
            except FoldOverError:
                continue
            ok_big, _ = s_curve.on_road(x, y, psi, FootprintCircles((-1.3, 0.0, 1.3), 1.0))
            ok_small, _ = s_curve.on_road(x, y, psi, FootprintCircles((-1.3, 0.0, 1.3), 0.4))
            if ok_big:
                assert ok_small

    def test_batch_matches_scalar(self, s_curve):
        circles = FootprintCircles()
        rng = np.random.default_rng(29)
        xs = rng.uniform(5, 30, 50)
        ys = rng.uniform(-6, 6, 50)
        psis = rng.uniform(0, 2 * math.pi, 50)
        ok_b, m_b = s_curve.on_road_batch(xs, ys, psis, circles)
        for i in range(50):
            ok, m = s_curve.on_road(xs[i], ys[i], psis[i], circles)
            assert ok == ok_b[i]
            assert m == pytest.approx(m_b[i]) or (math.isinf(m) and math.isinf(m_b[i]))


class TestMixedCircuit:
    def test_properties(self):
        t = mixed_circuit()
        assert t.closed
        assert t.width == 10.0
        # tightest curvature is the 15 m U-turn
        assert 1.0 / np.abs(t.curvature).max() == pytest.approx(15.0, rel=0.05)
        # contains both left and right curves
        assert t.curvature.max() > 0.01 and t.curvature.min() < -0.01
        # closure
        assert np.linalg.norm(t.xy[0] - t.xy[-1]) < 1e-9

    def test_round_trip_on_circuit(self):
        t = mixed_circuit()
        rng = np.random.default_rng(31)
        for _ in range(200):
            s = rng.uniform(0, t.length)
            d = rng.uniform(-4, 4)
            x, y, _ = t.frenet_to_cart(s, d)
            f = t.cart_to_frenet(x, y)
            ds = (f.s - s + t.length / 2) % t.length - t.length / 2
            assert abs(ds) < 1e-6 and abs(f.d - d) < 1e-6


class TestPersistence:
    def test_json_round_trip(self, tmp_path, s_curve):
        f = tmp_path / "t.json"
        save_track(s_curve, f)
        t2 = load_track(f)
        assert t2.width == s_curve.width
        assert t2.length == pytest.approx(s_curve.length)

    def test_csv_import(self, tmp_path):
        f = tmp_path / "t.csv"
        f.write_text("x,y\n" + "\n".join(f"{x:.2f},0.0" for x in np.arange(0, 50, 0.5)))
        t = load_track(f)
        assert t.length == pytest.approx(49.5, abs=0.01)

    def test_csv_needs_header(self, tmp_path):
        f = tmp_path / "t.csv"
        f.write_text("0,0\n1,0\n")
        with pytest.raises(ValueError):
            load_track(f)
