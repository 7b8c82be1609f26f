import math

import numpy as np
import pytest

from driftplan.esm import (
    EPS_EQ,
    EquilibriumPoint,
    ManifoldError,
    SamplePattern,
    build_manifold,
    export_points_csv,
    load_manifold,
    residual,
    save_manifold,
    solve_equilibria,
)
from driftplan.params import TireParams, VehicleParams

VEH = VehicleParams()
TIRES = TireParams()


class TestSolveEquilibria:
    @pytest.fixture(scope="class")
    def sols_r10(self):
        return solve_equilibria(10.0, VEH, TIRES)

    def test_radius_floor(self):
        with pytest.raises(ValueError):
            solve_equilibria(5.0, VEH, TIRES)

    def test_drift_solution_exists(self, sols_r10):
        # independent grid-scan oracle confirmed a deep-drift branch at
        # Rc = 10 m on gravel; the solver must recover it
        assert any(abs(p.beta) > 0.3 for p in sols_r10)

    def test_circular_motion_identity(self, sols_r10):
        for p in sols_r10:
            assert p.psidot == pytest.approx(p.v / p.Rc, rel=1e-9)

    def test_residuals(self, sols_r10):
        for p in sols_r10:
            assert residual(p.v, p.beta, p.psidot, p.delta, p.lam, VEH, TIRES) < EPS_EQ

    def test_sign_filter(self, sols_r10):
        for p in sols_r10:
            assert p.beta * p.psidot <= 0.0

    def test_mirrored_radius(self, sols_r10):
        mirrored = solve_equilibria(-10.0, VEH, TIRES)
        assert len(mirrored) == len(sols_r10)
        for p, q in zip(sols_r10, mirrored):
            assert q.v == p.v and q.beta == -p.beta and q.delta == -p.delta
            assert q.lam == p.lam

    def test_straight_limit_residual(self):
        # the trivial straight-coasting equilibrium has exactly zero residual
        assert residual(12.0, 0.0, 0.0, 0.0, 0.0, VEH, TIRES) == 0.0


class TestManifold:
    def test_requires_three_radii(self):
        with pytest.raises(ManifoldError):
            build_manifold([10.0, 20.0], VEH, TIRES)

    def test_mask_excludes_same_sign_quadrants(self, manifold):
        BB, PP = np.meshgrid(manifold.beta_axis, manifold.psidot_axis, indexing="ij")
        assert not np.any(manifold.mask & (BB * PP > 0.0))

    def test_symmetry_of_layers(self, manifold):
        flip = (slice(None, None, -1), slice(None, None, -1))
        assert np.array_equal(manifold.mask, manifold.mask[flip])
        assert np.allclose(manifold.v_map, manifold.v_map[flip])
        assert np.allclose(manifold.delta_map, -manifold.delta_map[flip])
        assert np.allclose(manifold.lam_map, manifold.lam_map[flip])

    def test_stored_points_residual_invariant(self, manifold):
        for p in manifold.points:
            assert residual(p.v, p.beta, p.psidot, p.delta, p.lam, VEH, TIRES) < EPS_EQ
            assert p.psidot == pytest.approx(p.v / p.Rc, rel=1e-9)

    def test_interpolation_reproduces_held_out_points(self, manifold, vehicle, tires):
        # radius 12 m was not used to build the session manifold; its
        # equilibria act as held-out ground truth for the lattice
        m = manifold
        held_out = solve_equilibria(12.0, vehicle, tires)
        checked = 0
        for p in held_out:
            if m.contains(p.beta, p.psidot):
                v, _, _ = m.interpolate(p.beta, p.psidot)
                assert v == pytest.approx(p.v, rel=0.02)
                checked += 1
        assert checked > 0

    def test_mirrored_queries(self, manifold):
        rng = np.random.default_rng(3)
        n = 0
        while n < 1000:
            b = rng.uniform(-1, 1)
            p = rng.uniform(-1.5, 1.5)
            if not manifold.contains(b, p):
                continue
            v1, d1, l1 = manifold.interpolate(b, p)
            v2, d2, l2 = manifold.interpolate(-b, -p)
            assert v1 == pytest.approx(v2, rel=1e-9, abs=1e-9)
            assert d1 == pytest.approx(-d2, rel=1e-9, abs=1e-9)
            assert l1 == pytest.approx(l2, rel=1e-9, abs=1e-9)
            n += 1


class TestProjection:
    def test_identity_on_lattice_vertex(self, manifold):
        i, j = np.argwhere(manifold.mask)[50]
        # interior vertex whose whole neighborhood is masked-in
        idx = np.argwhere(manifold.mask)
        for i, j in idx:
            if manifold.mask[i - 1:i + 2, j - 1:j + 2].all():
                break
        b, p = manifold.beta_axis[i], manifold.psidot_axis[j]
        q = manifold.project(b, p)
        assert q.beta == b and q.psidot == p
        assert q.v == pytest.approx(manifold.v_map[i, j])

    def test_outside_query_matches_brute_force(self, manifold):
        rng = np.random.default_rng(11)
        idx = np.argwhere(manifold.mask)
        cand = np.column_stack([manifold.beta_axis[idx[:, 0]] / manifold.beta_scale,
                                manifold.psidot_axis[idx[:, 1]] / manifold.psidot_scale])
        for _ in range(50):
            b = rng.uniform(-1.2, 1.2)
            p = rng.uniform(-1.8, 1.8)
            if manifold.contains(b, p):
                continue
            q = manifold.project(b, p)
            d2 = (cand[:, 0] - b / manifold.beta_scale) ** 2 + \
                 (cand[:, 1] - p / manifold.psidot_scale) ** 2
            got = ((q.beta - b) / manifold.beta_scale) ** 2 + \
                  ((q.psidot - p) / manifold.psidot_scale) ** 2
            assert got == pytest.approx(float(d2.min()), rel=1e-9, abs=1e-12)

    def test_mirrored_projection(self, manifold):
        q1 = manifold.project(0.8, -1.0)
        q2 = manifold.project(-0.8, 1.0)
        assert q1.v == pytest.approx(q2.v)
        assert q1.beta == pytest.approx(-q2.beta)
        assert q1.delta == pytest.approx(-q2.delta)


class TestSampling:
    def test_zero_radius_returns_center(self, manifold):
        center = manifold.project(0.4, -0.4)
        pat = SamplePattern(ring_radii=(0.0,), ring_counts=(8,))
        assert manifold.sample_neighborhood(center, pat) == [center]

    def test_rate_caps_hold(self, manifold):
        rng = np.random.default_rng(5)
        pat = SamplePattern()
        for _ in range(30):
            b = rng.uniform(-1, 1)
            p = rng.uniform(-1.5, 1.5)
            if not manifold.contains(b, p):
                continue
            center = manifold.project(b, p)
            for s in manifold.sample_neighborhood(center, pat):
                if s is center:
                    continue
                assert abs(s.v - center.v) <= pat.dv_max
                assert abs(s.beta - center.beta) <= pat.dbeta_max
                assert abs(s.psidot - center.psidot) <= pat.dpsidot_max
                assert abs(s.v - center.v) / pat.Ts < pat.a_max

    def test_fewer_samples_near_boundary(self, manifold):
        # compare against direct mask lookup of the ring points
        pat = SamplePattern(ring_radii=(0.05, 0.12, 0.25), ring_counts=(8, 8, 4),
                            dv_max=1e9, dbeta_max=1e9, dpsidot_max=1e9, a_max=1e9)
        total = sum(pat.ring_counts)
        idx = np.argwhere(manifold.mask)
        # deep interior vertex: all ring points masked-in
        best, best_cnt = None, -1
        for i, j in idx[:: max(1, len(idx) // 200)]:
            b, p = manifold.beta_axis[i], manifold.psidot_axis[j]
            cnt = self._ring_mask_count(manifold, b, p, pat)
            if cnt > best_cnt:
                best, best_cnt = (b, p), cnt
        c_deep = manifold.project(*best)
        n_deep = len(manifold.sample_neighborhood(c_deep, pat))
        assert n_deep == best_cnt <= total
        # boundary vertex keeps fewer
        worst, worst_cnt = None, total + 1
        for i, j in idx[:: max(1, len(idx) // 200)]:
            b, p = manifold.beta_axis[i], manifold.psidot_axis[j]
            cnt = self._ring_mask_count(manifold, b, p, pat)
            if 0 < cnt < worst_cnt:
                worst, worst_cnt = (b, p), cnt
        c_edge = manifold.project(*worst)
        n_edge = len(manifold.sample_neighborhood(c_edge, pat))
        assert n_edge == worst_cnt < n_deep

    @staticmethod
    def _ring_mask_count(manifold, b, p, pat):
        cnt = 0
        for r, k in zip(pat.ring_radii, pat.ring_counts):
            ang = 2 * np.pi * np.arange(k) / k
            bb = b + r * manifold.beta_scale * np.cos(ang)
            pp = p + r * manifold.psidot_scale * np.sin(ang)
            cnt += int(np.sum(manifold.contains(bb, pp)))
        return cnt

    def test_density_invariant_enforced(self):
        with pytest.raises(ValueError):
            SamplePattern(ring_radii=(0.05, 0.2), ring_counts=(4, 100))


class TestPersistence:
    def test_roundtrip_and_determinism(self, manifold, tmp_path):
        f1, f2 = tmp_path / "a.json", tmp_path / "b.json"
        save_manifold(manifold, f1)
        save_manifold(manifold, f2)
        assert f1.read_bytes() == f2.read_bytes()
        m2 = load_manifold(f1)
        assert np.array_equal(m2.mask, manifold.mask)
        assert np.array_equal(m2.v_map, manifold.v_map)
        assert m2.param_hash == manifold.param_hash

    def test_hash_mismatch(self, manifold, tmp_path):
        from driftplan.esm import HashMismatchError
        f = tmp_path / "m.json"
        save_manifold(manifold, f)
        with pytest.raises(HashMismatchError):
            load_manifold(f, expected_hash="deadbeef")

    def test_csv_export(self, manifold, tmp_path):
        f = tmp_path / "pts.csv"
        export_points_csv(manifold, f)
        rows = f.read_text().strip().splitlines()
        assert rows[0] == "beta,psidot,v,delta,lam,Rc"
        assert len(rows) == len(manifold.points) + 1
