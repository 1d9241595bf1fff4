"""Rational discrete transfer functions in the delay operator z^-1.

Coefficients are stored ascending in z^-1 (index k multiplies z^-k) with the
leading denominator coefficient normalized to one.  The algebra here is just
dense polynomial arithmetic; nothing is reduced automatically, call
``reduced()`` when pole/zero cancellations are wanted.
"""
from __future__ import annotations

import cmath
import math

import numpy as np


def _trim(coeffs: np.ndarray) -> np.ndarray:
    """Drop trailing exact zeros, always keeping at least one coefficient."""
    n = len(coeffs)
    while n > 1 and coeffs[n - 1] == 0.0:
        n -= 1
    return coeffs[:n]


def _polyadd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = max(len(a), len(b))
    out = np.zeros(n)
    out[:len(a)] += a
    out[:len(b)] += b
    return out


class DiscreteTransferFunction:
    """num(z^-1)/den(z^-1) at a fixed sample time."""

    __slots__ = ("num", "den", "dt")

    def __init__(self, num, den, dt: float):
        num = _trim(np.atleast_1d(np.asarray(num, dtype=np.float64)).copy())
        den = _trim(np.atleast_1d(np.asarray(den, dtype=np.float64)).copy())
        if den[0] == 0.0:
            raise ValueError("denominator leading coefficient must be nonzero")
        self.num = num / den[0]
        self.den = den / den[0]
        self.dt = float(dt)

    # -- constructors -------------------------------------------------------

    @classmethod
    def constant(cls, value: float, dt: float) -> "DiscreteTransferFunction":
        return cls([value], [1.0], dt)

    @classmethod
    def delay(cls, steps: int, dt: float) -> "DiscreteTransferFunction":
        num = np.zeros(steps + 1)
        num[steps] = 1.0
        return cls(num, [1.0], dt)

    @classmethod
    def integrator(cls, dt: float) -> "DiscreteTransferFunction":
        """Forward-Euler accumulator dt*z^-1/(1 - z^-1)."""
        return cls([0.0, dt], [1.0, -1.0], dt)

    # -- algebra ------------------------------------------------------------

    def _coerce(self, other) -> "DiscreteTransferFunction":
        if isinstance(other, DiscreteTransferFunction):
            if other.dt != self.dt:
                raise ValueError("sample time mismatch")
            return other
        return DiscreteTransferFunction.constant(float(other), self.dt)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.num)

    def __mul__(self, other):
        other = self._coerce(other)
        if self.is_zero or other.is_zero:
            return DiscreteTransferFunction.constant(0.0, self.dt)
        return DiscreteTransferFunction(np.convolve(self.num, other.num),
                                        np.convolve(self.den, other.den),
                                        self.dt)

    __rmul__ = __mul__

    def __add__(self, other):
        other = self._coerce(other)
        # Exact-zero operands keep identities exact instead of multiplying
        # denominators through; matched-plant expressions rely on this.
        if self.is_zero:
            return other
        if other.is_zero:
            return self
        num = _polyadd(np.convolve(self.num, other.den),
                       np.convolve(other.num, self.den))
        return DiscreteTransferFunction(num, np.convolve(self.den, other.den),
                                        self.dt)

    __radd__ = __add__

    def __neg__(self):
        return DiscreteTransferFunction(-self.num, self.den, self.dt)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __truediv__(self, other):
        other = self._coerce(other)
        if other.is_zero:
            raise ZeroDivisionError("division by a zero transfer function")
        num = np.convolve(self.num, other.den)
        den = np.convolve(self.den, other.num)
        lead = np.argmax(den != 0.0)
        if lead > 0:
            # A delay-deficient divisor would make the quotient acausal;
            # shift only if the numerator carries matching delay.
            num_lead = np.argmax(num != 0.0) if np.any(num) else len(num)
            if num_lead < lead:
                raise ValueError("division would produce an acausal system")
            num = num[lead:]
            den = den[lead:]
        return DiscreteTransferFunction(num, den, self.dt)

    def inverse(self) -> "DiscreteTransferFunction":
        return DiscreteTransferFunction.constant(1.0, self.dt) / self

    def feedback(self, other=1.0) -> "DiscreteTransferFunction":
        """Negative feedback loop self/(1 + self*other)."""
        other = self._coerce(other)
        open_num = np.convolve(self.num, other.num)
        open_den = np.convolve(self.den, other.den)
        num = np.convolve(self.num, other.den)
        return DiscreteTransferFunction(num, _polyadd(open_den, open_num),
                                        self.dt)

    # -- analysis -----------------------------------------------------------

    def evaluate(self, z: complex) -> complex:
        w = 1.0 / z
        num = 0.0 + 0.0j
        for c in self.num[::-1]:
            num = num * w + c
        den = 0.0 + 0.0j
        for c in self.den[::-1]:
            den = den * w + c
        return num / den

    def frequency_response(self, omegas) -> np.ndarray:
        """Response at angular frequencies (rad/s) up to Nyquist."""
        return np.array([self.evaluate(cmath.exp(1j * w * self.dt))
                         for w in np.atleast_1d(omegas)])

    def dc_gain(self) -> float:
        return float(np.real(self.evaluate(1.0 + 0.0j)))

    def poles(self) -> np.ndarray:
        roots = np.roots(self.den) if len(self.den) > 1 else np.zeros(0)
        excess = len(self.num) - len(self.den)
        if excess > 0:
            roots = np.concatenate([roots, np.zeros(excess, dtype=complex)])
        return roots

    def zeros(self) -> np.ndarray:
        if self.is_zero:
            return np.zeros(0)
        roots = np.roots(self.num) if len(self.num) > 1 else np.zeros(0)
        excess = len(self.den) - len(self.num)
        if excess > 0:
            roots = np.concatenate([roots, np.zeros(excess, dtype=complex)])
        return roots

    def max_pole_radius(self) -> float:
        p = self.poles()
        return float(np.max(np.abs(p))) if len(p) else 0.0

    def is_stable(self, margin: float = 0.0) -> bool:
        return self.max_pole_radius() < 1.0 - margin

    def delay_steps(self, rtol: float = 1e-12) -> int:
        """Number of whole-sample delays carried by the numerator."""
        if self.is_zero:
            return len(self.num)
        scale = np.max(np.abs(self.num))
        k = 0
        while k < len(self.num) and abs(self.num[k]) <= rtol * scale:
            k += 1
        return k

    def shifted(self, steps: int) -> "DiscreteTransferFunction":
        """Multiply by z^-steps (steps may be negative if delay allows)."""
        if steps >= 0:
            return DiscreteTransferFunction(
                np.concatenate([np.zeros(steps), self.num]), self.den, self.dt)
        if self.delay_steps() < -steps:
            raise ValueError("cannot advance past the first numerator tap")
        num = self.num[-steps:].copy()
        return DiscreteTransferFunction(num, self.den, self.dt)

    def reduced(self, tol: float = 1e-9) -> "DiscreteTransferFunction":
        """Cancel matching pole/zero pairs (within tol in the z plane)."""
        if self.is_zero:
            return DiscreteTransferFunction.constant(0.0, self.dt)
        lead_zeros = self.delay_steps()
        zs = list(np.roots(self.num))
        ps = list(np.roots(self.den))
        gain_num = self.num[lead_zeros]
        gain_den = self.den[0]
        for z in list(zs):
            hit = None
            for i, p in enumerate(ps):
                if abs(z - p) < tol:
                    hit = i
                    break
            if hit is not None:
                ps.pop(hit)
                zs.remove(z)
        num = np.real(np.poly(zs)) * gain_num if zs else np.array([gain_num])
        den = np.real(np.poly(ps)) * gain_den if ps else np.array([gain_den])
        num = np.concatenate([np.zeros(lead_zeros), num])
        return DiscreteTransferFunction(num, den, self.dt)

    def coeffs_allclose(self, other, tol: float = 1e-10) -> bool:
        other = self._coerce(other)
        num_a = _polyadd(self.num, np.zeros(len(other.num)))
        num_b = _polyadd(other.num, np.zeros(len(self.num)))
        den_a = _polyadd(self.den, np.zeros(len(other.den)))
        den_b = _polyadd(other.den, np.zeros(len(self.den)))
        return (np.allclose(num_a, num_b, atol=tol, rtol=tol)
                and np.allclose(den_a, den_b, atol=tol, rtol=tol))

    # -- time domain --------------------------------------------------------

    def simulate(self, inputs) -> np.ndarray:
        filt = TfFilter(self)
        return np.array([filt.step(float(u)) for u in np.atleast_1d(inputs)])

    def step_response(self, n: int) -> np.ndarray:
        return self.simulate(np.ones(n))

    def __repr__(self):
        return (f"DiscreteTransferFunction(num={np.array2string(self.num, precision=6)}, "
                f"den={np.array2string(self.den, precision=6)}, dt={self.dt})")


class TfFilter:
    """Streaming direct form II transposed realization of a transfer function."""

    def __init__(self, tf: DiscreteTransferFunction):
        n = max(len(tf.num), len(tf.den))
        self._b = np.zeros(n)
        self._a = np.zeros(n)
        self._b[:len(tf.num)] = tf.num
        self._a[:len(tf.den)] = tf.den
        self._state = np.zeros(n - 1) if n > 1 else np.zeros(0)

    def step(self, u: float) -> float:
        if len(self._state) == 0:
            return self._b[0] * u
        y = self._b[0] * u + self._state[0]
        for i in range(len(self._state) - 1):
            self._state[i] = self._b[i + 1] * u + self._state[i + 1] - self._a[i + 1] * y
        self._state[-1] = self._b[-1] * u - self._a[-1] * y
        return y

    def reset(self):
        self._state[:] = 0.0
