"""Rational z-domain algebra: construction, arithmetic, analysis, filtering."""
import numpy as np
import pytest
import scipy.signal

from drivetransfer.ztf import DiscreteTransferFunction, TfFilter

DT = 0.02


def tf(num, den):
    return DiscreteTransferFunction(num, den, DT)


def random_z(rng, n):
    """Sample points away from the unit circle and origin."""
    return (0.3 + rng.uniform(0.2, 2.0, n)) * np.exp(1j * rng.uniform(0, 2 * np.pi, n))


# -- construction ------------------------------------------------------------

def test_normalization():
    g = tf([2.0, 4.0], [2.0, -1.0])
    assert np.allclose(g.num, [1.0, 2.0])
    assert np.allclose(g.den, [1.0, -0.5])


def test_trailing_zeros_trimmed():
    g = tf([1.0, 0.0, 0.0], [1.0, 0.5, 0.0])
    assert len(g.num) == 1
    assert len(g.den) == 2


def test_zero_leading_denominator_rejected():
    with pytest.raises(ValueError):
        tf([1.0], [0.0, 1.0])


def test_constructors():
    c = DiscreteTransferFunction.constant(3.5, DT)
    assert c.evaluate(2.0 + 1.0j) == pytest.approx(3.5)
    d = DiscreteTransferFunction.delay(3, DT)
    z = 1.3 + 0.4j
    assert d.evaluate(z) == pytest.approx(z ** -3)
    i = DiscreteTransferFunction.integrator(DT)
    assert np.allclose(i.num, [0.0, DT])
    assert np.allclose(i.den, [1.0, -1.0])


# -- algebra -----------------------------------------------------------------

def test_series_of_delays():
    d2 = DiscreteTransferFunction.delay(1, DT) * DiscreteTransferFunction.delay(1, DT)
    assert d2.coeffs_allclose(DiscreteTransferFunction.delay(2, DT), 0.0)


def test_arithmetic_matches_pointwise():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a = tf(rng.normal(size=3), np.concatenate([[1.0], 0.3 * rng.normal(size=2)]))
        b = tf(rng.normal(size=2), np.concatenate([[1.0], 0.3 * rng.normal(size=3)]))
        for z in random_z(rng, 4):
            va, vb = a.evaluate(z), b.evaluate(z)
            assert (a * b).evaluate(z) == pytest.approx(va * vb, rel=1e-10)
            assert (a + b).evaluate(z) == pytest.approx(va + vb, rel=1e-9, abs=1e-12)
            assert (a - b).evaluate(z) == pytest.approx(va - vb, rel=1e-9, abs=1e-12)
            assert (a / b).evaluate(z) == pytest.approx(va / vb, rel=1e-10)


def test_scalar_coercion():
    g = tf([0.0, 1.0], [1.0, -0.5])
    z = 1.7 - 0.2j
    assert (2.0 * g).evaluate(z) == pytest.approx(2.0 * g.evaluate(z))
    assert (g + 1.0).evaluate(z) == pytest.approx(g.evaluate(z) + 1.0)
    assert (1.0 - g).evaluate(z) == pytest.approx(1.0 - g.evaluate(z))


def test_zero_short_circuits_keep_operands_exact():
    g = tf([0.0, 1.0, 0.5], [1.0, -0.3, 0.1])
    zero = DiscreteTransferFunction.constant(0.0, DT)
    left = zero + g
    assert np.array_equal(left.num, g.num) and np.array_equal(left.den, g.den)
    assert (g - g).is_zero
    assert (zero * g).is_zero


def test_sample_time_mismatch_rejected():
    g = tf([1.0], [1.0, -0.5])
    h = DiscreteTransferFunction([1.0], [1.0, -0.5], 0.01)
    with pytest.raises(ValueError):
        g + h


def test_acausal_division_rejected():
    one = DiscreteTransferFunction.constant(1.0, DT)
    with pytest.raises(ValueError):
        one / DiscreteTransferFunction.delay(1, DT)


def test_division_by_zero_tf_rejected():
    g = tf([1.0], [1.0, -0.5])
    with pytest.raises(ZeroDivisionError):
        g / DiscreteTransferFunction.constant(0.0, DT)


def test_delay_cancellation_in_division():
    d1 = DiscreteTransferFunction.delay(1, DT)
    d3 = DiscreteTransferFunction.delay(3, DT)
    q = d3 / d1
    assert q.coeffs_allclose(DiscreteTransferFunction.delay(2, DT), 0.0)


def test_feedback():
    rng = np.random.default_rng(11)
    g = tf([0.0, 0.8], [1.0, -0.9])
    k = tf([0.5], [1.0, 0.2])
    closed = g.feedback(k)
    for z in random_z(rng, 6):
        expect = g.evaluate(z) / (1.0 + g.evaluate(z) * k.evaluate(z))
        assert closed.evaluate(z) == pytest.approx(expect, rel=1e-10)


# -- analysis ----------------------------------------------------------------

def test_evaluate_against_polyval():
    rng = np.random.default_rng(2)
    g = tf(rng.normal(size=4), np.concatenate([[1.0], 0.4 * rng.normal(size=3)]))
    for z in random_z(rng, 8):
        w = 1.0 / z
        expect = (np.polyval(g.num[::-1], w) / np.polyval(g.den[::-1], w))
        assert g.evaluate(z) == pytest.approx(expect, rel=1e-12)


def test_singularity_surfaces_at_evaluation_only():
    g = DiscreteTransferFunction.integrator(DT)  # pole at z=1
    with pytest.raises(ZeroDivisionError):
        g.evaluate(1.0 + 0.0j)


def test_frequency_response_conjugate_symmetry():
    g = tf([0.0, 1.0, 0.3], [1.0, -1.2, 0.5])
    w = np.array([0.7, 3.0, 11.0])
    fw = g.frequency_response(w)
    bw = g.frequency_response(-w)
    assert np.allclose(fw, np.conj(bw))


def test_dc_gain():
    g = tf([0.5, 0.25], [1.0, -0.5])
    assert g.dc_gain() == pytest.approx(1.5)


def test_poles_and_zeros():
    # (1 - 0.5 z^-1) / ((1 - 0.9 z^-1)(1 + 0.3 z^-1))
    g = tf([1.0, -0.5], np.convolve([1.0, -0.9], [1.0, 0.3]))
    assert sorted(np.real(g.poles())) == pytest.approx([-0.3, 0.9])
    # denominator excess contributes a zero at the origin
    assert sorted(np.abs(g.zeros())) == pytest.approx([0.0, 0.5])


def test_excess_delay_adds_origin_poles():
    g = tf([0.0, 0.0, 1.0], [1.0, -0.5])
    p = sorted(np.abs(g.poles()))
    assert p == pytest.approx([0.0, 0.5])


def test_is_stable_margin():
    g = tf([1.0], [1.0, -0.999])
    assert g.is_stable()
    assert not g.is_stable(margin=1e-2)
    assert not tf([1.0], [1.0, -1.0]).is_stable()


def test_delay_steps():
    assert tf([0.0, 0.0, 1.0, 0.5], [1.0, -0.5]).delay_steps() == 2
    assert tf([1.0], [1.0]).delay_steps() == 0
    # below-tolerance leading dirt counts as delay
    assert tf([1e-16, 1.0], [1.0, -0.5]).delay_steps() == 1


def test_shift_roundtrip():
    g = tf([0.0, 0.0, 1.0, 0.5], [1.0, -0.5])
    back = g.shifted(-2).shifted(2)
    assert back.coeffs_allclose(g, 0.0)
    with pytest.raises(ValueError):
        g.shifted(-3)


def test_reduced_cancels_common_factor():
    num = np.convolve([1.0, -0.4], [1.0, -0.7])
    den = np.convolve([1.0, -0.4], [1.0, 0.2])
    g = tf(num, den)
    r = g.reduced()
    assert r.coeffs_allclose(tf([1.0, -0.7], [1.0, 0.2]), 1e-9)


def test_reduced_repeated_roots():
    # triple pole against a double zero at the same spot; numerical roots of
    # repeated factors scatter, so the matching tolerance must absorb that
    num = np.array([0.02, -0.04, 0.02])
    den = np.array([1.0, -3.0, 3.0, -1.0])
    r = tf(num, den).reduced(tol=1e-4)
    assert len(r.num) == 1
    assert r.num[0] == pytest.approx(0.02)
    assert len(r.den) == 2
    assert r.den[1] == pytest.approx(-1.0, abs=1e-4)


# -- time domain -------------------------------------------------------------

def test_integrator_step_response_is_ramp():
    g = DiscreteTransferFunction.integrator(DT)
    y = g.step_response(6)
    assert np.allclose(y, DT * np.arange(6))


def test_simulate_matches_lfilter():
    rng = np.random.default_rng(9)
    for _ in range(10):
        num = rng.normal(size=rng.integers(1, 5))
        den = np.concatenate([[1.0], 0.4 * rng.normal(size=rng.integers(0, 4))])
        g = tf(num, den)
        u = rng.normal(size=50)
        mine = g.simulate(u)
        ref = scipy.signal.lfilter(g.num, g.den, u)
        # random denominators may be unstable; compare relatively
        assert np.allclose(mine, ref, rtol=1e-9, atol=1e-9)


def test_filter_linearity_and_reset():
    g = tf([0.2, 0.4], [1.0, -0.8, 0.15])
    rng = np.random.default_rng(4)
    u1, u2 = rng.normal(size=30), rng.normal(size=30)
    y1, y2 = g.simulate(u1), g.simulate(u2)
    y12 = g.simulate(u1 + 2.0 * u2)
    assert np.allclose(y12, y1 + 2.0 * y2, atol=1e-12)
    f = TfFilter(g)
    a = [f.step(u) for u in u1]
    f.reset()
    b = [f.step(u) for u in u1]
    assert np.allclose(a, b, atol=0.0)
