import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drivetransfer import dynamics
from drivetransfer.dynamics import (DegenerateSpeedError, VehicleParams,
                                    VehicleState)

import _oracles

NOMINAL = VehicleParams()


class TestTireForce:
    # Frozen from the 50-digit oracle in _oracles.magic_formula_hp.
    CASES = [
        (0.1, "front", 7106.63572895148),
        (0.1, "rear", 9771.62412730829),
        (0.02, "front", 2691.59958380278),
        (-0.35, "front", -7274.35453062364),
    ]

    @pytest.mark.parametrize("alpha,axle,expected", CASES)
    def test_frozen_values(self, alpha, axle, expected):
        got = dynamics.tire_force(alpha, NOMINAL, axle)
        assert got == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("alpha,axle,expected", CASES)
    def test_against_live_oracle(self, alpha, axle, expected):
        hp = float(_oracles.magic_formula_hp(alpha, NOMINAL, axle))
        assert hp == pytest.approx(expected, rel=1e-12)

    def test_front_peak_coefficient(self):
        # mu*m*g*a/(a+b) for the nominal car.
        peak_f, peak_r = dynamics._axle_peaks(NOMINAL.as_array())
        assert peak_f == pytest.approx(7434.94736842105, rel=1e-11)
        assert peak_f + peak_r == pytest.approx(NOMINAL.mass * 9.81, rel=1e-12)

    @given(st.floats(-1.5, 1.5))
    def test_odd_symmetry(self, alpha):
        f_pos = dynamics.tire_force(alpha, NOMINAL, "front")
        f_neg = dynamics.tire_force(-alpha, NOMINAL, "front")
        assert f_pos == pytest.approx(-f_neg, abs=1e-9)

    @given(st.floats(-1.5, 1.5))
    def test_bounded_by_peak(self, alpha):
        peak_f, _ = dynamics._axle_peaks(NOMINAL.as_array())
        assert abs(dynamics.tire_force(alpha, NOMINAL, "front")) <= peak_f * (1 + 1e-12)

    def test_unknown_axle(self):
        with pytest.raises(ValueError):
            dynamics.tire_force(0.1, NOMINAL, "middle")


class TestSlipAngles:
    def test_frozen_values(self):
        s = VehicleState(vx=20.0, vy=1.0, yaw_rate=0.1)
        af, ar = dynamics.slip_angles(s, NOMINAL)
        assert af == pytest.approx(-0.055941571233561, rel=1e-12)
        assert ar == pytest.approx(-0.0417257677181933, rel=1e-12)

    def test_steer_shifts_front_only(self):
        s0 = VehicleState(vx=18.0, vy=0.4, yaw_rate=0.05)
        s1 = s0._replace(steer=0.2)
        af0, ar0 = dynamics.slip_angles(s0, NOMINAL)
        af1, ar1 = dynamics.slip_angles(s1, NOMINAL)
        assert af1 - af0 == pytest.approx(0.2, rel=1e-12)
        assert ar1 == ar0

    def test_degenerate_speed_raises(self):
        with pytest.raises(DegenerateSpeedError):
            dynamics.slip_angles(VehicleState(vx=dynamics.VX_FLOOR), NOMINAL)


class TestDerivatives:
    def test_side_force_enters_lateral_not_yaw(self):
        s = VehicleState(vx=20.0)
        base = dynamics.derivatives(s, (0.0, 0.0), NOMINAL)
        pushed = dynamics.derivatives(s, (0.0, 0.0), NOMINAL, side_force=5000.0)
        assert pushed[dynamics.IVY] - base[dynamics.IVY] == pytest.approx(5000.0 / 1800.0, rel=1e-12)
        assert pushed[dynamics.IWZ] == base[dynamics.IWZ]  # acts at the CG
        assert pushed[dynamics.IVX] == base[dynamics.IVX]  # yaw = 0

    def test_side_force_rotates_with_yaw(self):
        s = VehicleState(vx=20.0, yaw=math.pi / 2)
        base = dynamics.derivatives(s, (0.0, 0.0), NOMINAL)
        pushed = dynamics.derivatives(s, (0.0, 0.0), NOMINAL, side_force=5000.0)
        assert pushed[dynamics.IVX] - base[dynamics.IVX] == pytest.approx(-5000.0 / 1800.0, rel=1e-12)
        assert pushed[dynamics.IVY] == pytest.approx(base[dynamics.IVY], abs=1e-12)

    def test_matches_independent_reimplementation(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            s = np.array([rng.uniform(5, 30), rng.uniform(-3, 3),
                          rng.uniform(-0.5, 0.5), rng.uniform(-50, 50),
                          rng.uniform(-50, 50), rng.uniform(-3, 3),
                          rng.uniform(-0.4, 0.4)])
            ax, dd = rng.uniform(-4, 4), rng.uniform(-0.8, 0.8)
            fy = rng.uniform(-5000, 5000)
            got = dynamics.derivatives(VehicleState.from_array(s), (ax, dd),
                                       NOMINAL, side_force=fy)
            want = _oracles.derivs_reference(s, ax, dd, NOMINAL, fy)
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


class TestStep:
    def test_frozen_step(self):
        # Frozen from a 50-digit Euler step of the same model.
        s = VehicleState(vx=20.0, vy=1.0, yaw_rate=0.1, x=5.0, y=-2.0,
                         yaw=0.05, steer=0.02)
        out = dynamics.step(s, (1.0, 0.1), NOMINAL, side_force=500.0)
        expected = [20.019722337948496, 0.84217039963794483,
                    0.13551167165303237, 5.3985005207725729,
                    -1.9600333270838293, 0.052, 0.022]
        np.testing.assert_allclose(out.as_array(), expected, rtol=1e-14)

    def test_halving_dt_quarters_single_step_error(self):
        """Explicit Euler is first order: local error drops ~4x when dt halves."""
        rng = np.random.default_rng(42)
        ratios = []
        for _ in range(1000):
            s = np.array([rng.uniform(5, 30), rng.uniform(-3, 3),
                          rng.uniform(-0.5, 0.5), rng.uniform(-20, 20),
                          rng.uniform(-20, 20), rng.uniform(-3, 3),
                          rng.uniform(-0.4, 0.4)])
            ax, dd = rng.uniform(-4, 4), rng.uniform(-0.8, 0.8)
            fy = rng.uniform(-5000, 5000)
            state = VehicleState.from_array(s)
            errs = []
            for dt in (0.02, 0.01):
                p = VehicleParams(dt=dt)
                coarse = dynamics.step(state, (ax, dd), p, side_force=fy).as_array()
                ref = _oracles.rk4_step(s, ax, dd, p, fy, dt)
                errs.append(np.linalg.norm(coarse - ref))
            if errs[1] > 1e-13:
                ratios.append(errs[0] / errs[1])
        ratios = np.array(ratios)
        assert len(ratios) > 900
        assert 3.0 < np.median(ratios) < 5.0
        assert 3.0 < np.mean(ratios) < 5.0

    @given(st.floats(-50, 50), st.floats(-50, 50))
    @settings(max_examples=50)
    def test_action_clamp_equivalence(self, ax, dd):
        s = VehicleState(vx=15.0, vy=0.2, yaw_rate=0.02, steer=0.01)
        raw = dynamics.step(s, (ax, dd), NOMINAL)
        clamped = dynamics.step(
            s, (np.clip(ax, -5.0, 5.0), np.clip(dd, -0.927, 0.927)), NOMINAL)
        assert raw == clamped

    @given(st.floats(-0.573, 0.573), st.floats(-10, 10))
    @settings(max_examples=50)
    def test_steer_stays_within_limit(self, steer0, dd):
        s = VehicleState(vx=15.0, steer=steer0)
        out = dynamics.step(s, (0.0, dd), NOMINAL)
        assert abs(out.steer) <= NOMINAL.delta_max

    def test_step_at_floor_raises(self):
        with pytest.raises(DegenerateSpeedError):
            dynamics.step(VehicleState(vx=0.5), (1.0, 0.0), NOMINAL)


class TestParams:
    def test_positive_validation(self):
        with pytest.raises(ValueError, match="mass"):
            VehicleParams(mass=0.0)
        with pytest.raises(ValueError, match="dt"):
            VehicleParams(dt=-0.02)

    def test_scaled(self):
        p = NOMINAL.scaled(mass=1.2, dist_front=0.8)
        assert p.mass == pytest.approx(1800.0 * 1.2)
        assert p.dist_front == pytest.approx(1.2 * 0.8)
        assert p.inertia_z == NOMINAL.inertia_z

    def test_array_roundtrip_order(self):
        arr = NOMINAL.as_array()
        assert arr[dynamics.P_IZ] == NOMINAL.inertia_z
        assert arr[dynamics.P_MU] == NOMINAL.friction
        assert arr[dynamics.P_DT] == NOMINAL.dt
        assert len(arr) == 12
