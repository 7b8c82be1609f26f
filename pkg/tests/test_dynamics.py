import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftplan.dynamics import (
    DegenerateSpeedError,
    DomainError,
    ValidityError,
    axle_slips,
    bicycle_derivatives,
    fit_bicycle_params,
    integrate_primitive,
    mu_combined,
    nonlinear_derivatives,
    normal_loads,
)
from driftplan.params import TireParams, VehicleParams

TIRES = TireParams()
VEH = VehicleParams()


class TestMuCombined:
    def test_zero_slip(self):
        assert mu_combined(0.0, 0.0, TIRES) == (0.0, 0.0)

    def test_pure_longitudinal_golden(self):
        # frozen from a direct scripted evaluation of the closed-form formulas
        mux, muy = mu_combined(0.1, 0.0, TIRES)
        assert mux == pytest.approx(0.09052247582206292, abs=1e-15)
        assert muy == 0.0

    def test_combined_golden(self):
        mux, muy = mu_combined(0.05, 0.1, TIRES)
        assert mux == pytest.approx(0.04733745698023886, abs=1e-15)
        assert muy == pytest.approx(0.09499176446942777, abs=1e-15)

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            mu_combined(-1.0, 0.0, TIRES)
        with pytest.raises(DomainError):
            mu_combined(0.0, math.pi / 2, TIRES)

    @given(lam=st.floats(-0.9, 2.0), alpha=st.floats(-1.5, 1.5))
    @settings(max_examples=200)
    def test_peak_bound_and_isotropy(self, lam, alpha):
        mux, muy = mu_combined(lam, alpha, TIRES)
        total = math.hypot(mux, muy)
        assert total <= TIRES.D + 1e-12
        # the vector magnitude must equal the scalar magic-formula value
        sx = lam / (1 + lam)
        sy = math.tan(alpha) / (1 + lam)
        sigma = math.hypot(sx, sy)
        sB = sigma * TIRES.B
        mu = abs(TIRES.D * math.sin(TIRES.C * math.atan(sB - TIRES.E * (sB - math.atan(sB)))))
        assert total == pytest.approx(mu, rel=1e-12, abs=1e-15)


class TestAxleSlips:
    def test_straight(self):
        assert axle_slips(10.0, 0.0, 0.0, 0.0, VEH) == (0.0, 0.0)

    def test_steering_offset(self):
        af, ar = axle_slips(10.0, 0.0, 0.0, 0.1, VEH)
        assert af == pytest.approx(-0.1)
        assert ar == 0.0

    def test_golden(self):
        af, ar = axle_slips(10.0, 0.3, 0.5, 0.2, VEH)
        assert af == pytest.approx(0.16085132527808038, abs=1e-14)
        assert ar == pytest.approx(0.23677135458353057, abs=1e-14)

    def test_speed_floor(self):
        with pytest.raises(DegenerateSpeedError):
            axle_slips(0.1, 0.0, 0.0, 0.0, VEH)


class TestNormalLoads:
    def test_static_split(self):
        Fzf, Fzr = normal_loads(VEH, 0.0)
        L = VEH.lf + VEH.lr
        assert Fzf == pytest.approx(VEH.m * VEH.g * VEH.lr / L)
        assert Fzr == pytest.approx(VEH.m * VEH.g * VEH.lf / L)

    def test_golden_transfer(self):
        Fzf, Fzr = normal_loads(VEH, 3.0)
        assert Fzf == pytest.approx(5626.5)
        assert Fzr == pytest.approx(7126.5)

    @given(ax=st.floats(-8.0, 8.0))
    def test_force_balance(self, ax):
        Fzf, Fzr = normal_loads(VEH, ax, check=False)
        assert Fzf + Fzr == pytest.approx(VEH.m * VEH.g, rel=1e-12)


class TestNonlinearDerivatives:
    def test_straight_coasting_equilibrium(self):
        assert nonlinear_derivatives(10.0, 0.0, 0.0, 0.0, 0.0, VEH, TIRES) == (0.0, 0.0, 0.0)

    def test_steering_sign(self):
        _, _, psiddot = nonlinear_derivatives(10.0, 0.0, 0.0, 0.1, 0.0, VEH, TIRES)
        assert psiddot > 0.0

    def test_golden_full_evaluation(self):
        # frozen from an independent step-by-step evaluation of the force
        # chain with a single fixed-point pass on the weight transfer
        vdot, betadot, psiddot = nonlinear_derivatives(12.0, 0.2, 0.6, 0.15, 0.05, VEH, TIRES)
        assert vdot == pytest.approx(1.673302681348056, rel=1e-12)
        assert betadot == pytest.approx(-0.6986138408412301, rel=1e-12)
        assert psiddot == pytest.approx(0.07953802912001715, rel=1e-12)

    def test_exact_variant_close_for_small_angles(self):
        a = nonlinear_derivatives(15.0, 0.02, 0.1, 0.03, 0.02, VEH, TIRES)
        b = nonlinear_derivatives(15.0, 0.02, 0.1, 0.03, 0.02, VEH, TIRES, exact=True)
        assert np.allclose(a, b, atol=0.05)


class TestBicycleDerivatives:
    BIKE = fit_bicycle_params(VEH, TIRES)

    def test_straight(self):
        assert bicycle_derivatives(10.0, 0.0, 0.0, 0.0, 0.0, VEH, self.BIKE) == (0.0, 0.0, 0.0)

    def test_force_linearity_in_delta(self):
        base = bicycle_derivatives(10.0, 0.02, 0.1, 0.0, 0.0, VEH, self.BIKE)
        one = bicycle_derivatives(10.0, 0.02, 0.1, 0.05, 0.0, VEH, self.BIKE)
        two = bicycle_derivatives(10.0, 0.02, 0.1, 0.10, 0.0, VEH, self.BIKE)
        d1 = np.subtract(one, base)
        d2 = np.subtract(two, base)
        assert np.allclose(d2, 2 * d1, rtol=1e-9)

    def test_validity_box(self):
        with pytest.raises(ValidityError):
            bicycle_derivatives(10.0, 0.5, 0.0, 0.0, 0.0, VEH, self.BIKE)

    def test_agreement_with_nonlinear_inside_box(self):
        # 15% relative tolerance with a 0.05 absolute floor: components of
        # the derivative triple can nearly cancel, where relative error is
        # meaningless at the fit's accuracy
        rng = np.random.default_rng(7)
        bad = 0
        for _ in range(100):
            v = rng.uniform(5.0, 20.0)
            beta = rng.uniform(-0.5, 0.5) * self.BIKE.beta_lin / 2
            pd = rng.uniform(-0.5, 0.5) * self.BIKE.psidot_lin / 2
            delta = rng.uniform(-0.05, 0.05)
            lam = rng.uniform(-0.05, 0.05)
            lin = bicycle_derivatives(v, beta, pd, delta, lam, VEH, self.BIKE)
            non = nonlinear_derivatives(v, beta, pd, delta, lam, VEH, TIRES)
            for a, b in zip(lin, non):
                if abs(a - b) > max(0.15 * abs(b), 0.05):
                    bad += 1
        assert bad == 0


class TestIntegratePrimitive:
    def test_straight_line(self):
        n = 100
        x, y, psi = integrate_primitive(
            0.0, 0.0, 0.0,
            np.full(n, 10.0), np.zeros(n), np.zeros(n), dt=1.0 / n)
        assert x[-1] == pytest.approx(10.0)
        assert y[-1] == pytest.approx(0.0, abs=1e-12)
        assert psi[-1] == 0.0

    def test_circular_arc(self):
        v, pd = 10.0, 0.5
        R = v / pd
        n = 20000
        T = 2.0
        x, y, psi = integrate_primitive(
            0.0, 0.0, 0.0,
            np.full(n, v), np.zeros(n), np.full(n, pd), dt=T / n)
        # closed-form circle centered at (0, R)
        ang = pd * T
        assert x[-1] == pytest.approx(R * math.sin(ang), abs=2e-3)
        assert y[-1] == pytest.approx(R * (1 - math.cos(ang)), abs=2e-3)

    def test_pure_lateral_slide(self):
        n = 50
        x, y, _ = integrate_primitive(
            0.0, 0.0, 0.0,
            np.full(n, 5.0), np.full(n, math.pi / 2), np.zeros(n), dt=0.01)
        assert x[-1] == pytest.approx(0.0, abs=1e-12)
        assert y[-1] == pytest.approx(5.0 * 0.5)

    def test_first_order_convergence(self):
        def endpoint(n):
            T = 1.0
            t = (np.arange(n) + 0.0) / n * T
            v = 8.0 + 2.0 * t
            beta = 0.2 * np.sin(2 * t)
            pd = 0.6 * np.cos(t)
            x, y, _ = integrate_primitive(0.0, 0.0, 0.3, v, beta, pd, dt=T / n)
            return np.array([x[-1], y[-1]])

        e1 = np.linalg.norm(endpoint(100) - endpoint(12800))
        e2 = np.linalg.norm(endpoint(200) - endpoint(12800))
        ratio = e1 / e2
        assert 1.6 < ratio < 2.4   # O(dt) halving behavior

    def test_batched_matches_scalar(self):
        n = 10
        v = np.linspace(5, 10, n)
        beta = np.linspace(-0.1, 0.1, n)
        pd = np.linspace(0.0, 0.5, n)
        xs, ys, ps = integrate_primitive(1.0, 2.0, 0.5, v, beta, pd, 0.05)
        xb, yb, pb = integrate_primitive(
            1.0, 2.0, 0.5, np.stack([v, v]), np.stack([beta, beta]), np.stack([pd, pd]), 0.05)
        assert np.allclose(xb[1], xs) and np.allclose(yb[0], ys) and np.allclose(pb[1], ps)
