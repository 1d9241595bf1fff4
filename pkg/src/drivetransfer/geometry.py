"""Planar curve helpers: sinusoidal lane centerlines and sampled polylines.

Lanes are graphs y = A*sin(w*x) + offset over the global x axis.  Reference
trajectories are short polylines produced by the planner.  Both support the
same queries: closest-point projection, arc-length advance, tangent heading
and signed curvature.  Sign convention: offsets are positive to the left of
the curve tangent, curvature is positive for left turns.
"""
from __future__ import annotations

import math

import numpy as np

from .accel import njit

# Projections farther than this from the curve are considered invalid use.
PROJECTION_CUTOFF = 50.0


class ProjectionError(ValueError):
    """Raised when a point cannot be sensibly projected onto a curve."""


@njit
def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return math.pi - (math.pi - a) % (2.0 * math.pi)


@njit
def sine_y(x, amp, om, off):
    return amp * math.sin(om * x) + off


@njit
def sine_slope(x, amp, om):
    return amp * om * math.cos(om * x)


@njit
def sine_heading(x, amp, om):
    return math.atan(amp * om * math.cos(om * x))


@njit
def sine_curvature(x, amp, om):
    yp = amp * om * math.cos(om * x)
    ypp = -amp * om * om * math.sin(om * x)
    return ypp / (1.0 + yp * yp) ** 1.5


@njit
def sine_project(px, py, amp, om, off):
    """Abscissa of the closest curve point (Newton on the normal equation)."""
    s = px
    for _ in range(60):
        f = sine_y(s, amp, om, off)
        fp = sine_slope(s, amp, om)
        fpp = -amp * om * om * math.sin(om * s)
        g = (s - px) + (f - py) * fp
        gp = 1.0 + fp * fp + (f - py) * fpp
        if gp < 0.25:
            gp = 0.25  # keep the iteration contractive near degenerate spots
        move = g / gp
        s -= move
        if abs(move) < 1e-12:
            break
    return s


@njit
def _sine_arclen(x0, x1, amp, om):
    # Composite Simpson on sqrt(1 + y'^2); panel count grows with the span
    # so long gap queries stay accurate without taxing short ones.
    n = 8 + 2 * int(abs(x1 - x0) / 5.0)
    if n > 64:
        n = 64
    h = (x1 - x0) / n
    total = math.sqrt(1.0 + sine_slope(x0, amp, om) ** 2)
    total += math.sqrt(1.0 + sine_slope(x1, amp, om) ** 2)
    for i in range(1, n):
        w = 4.0 if i % 2 == 1 else 2.0
        total += w * math.sqrt(1.0 + sine_slope(x0 + i * h, amp, om) ** 2)
    return total * h / 3.0


@njit
def sine_advance(x0, dist, amp, om):
    """Abscissa after walking dist (signed) along the curve from x0."""
    x1 = x0 + dist / math.sqrt(1.0 + sine_slope(x0, amp, om) ** 2)
    for _ in range(12):
        err = _sine_arclen(x0, x1, amp, om) - dist
        move = err / math.sqrt(1.0 + sine_slope(x1, amp, om) ** 2)
        x1 -= move
        if abs(move) < 1e-12:
            break
    return x1


@njit
def polyline_project(px, py, xs, ys):
    """Closest point on a polyline; returns (segment index, fraction, dist2)."""
    best_d2 = 1e300
    best_i = 0
    best_u = 0.0
    for i in range(len(xs) - 1):
        ax = xs[i]
        ay = ys[i]
        bx = xs[i + 1] - ax
        by = ys[i + 1] - ay
        seg2 = bx * bx + by * by
        if seg2 <= 0.0:
            u = 0.0
        else:
            u = ((px - ax) * bx + (py - ay) * by) / seg2
            if u < 0.0:
                u = 0.0
            elif u > 1.0:
                u = 1.0
        cx = ax + u * bx - px
        cy = ay + u * by - py
        d2 = cx * cx + cy * cy
        if d2 < best_d2:
            best_d2 = d2
            best_i = i
            best_u = u
    return best_i, best_u, best_d2


@njit
def polyline_point(xs, ys, i, u):
    return (xs[i] + u * (xs[i + 1] - xs[i]),
            ys[i] + u * (ys[i + 1] - ys[i]))


@njit
def polyline_heading(psis, i, u):
    # Interpolated stored heading; clamped at the ends so extrapolated
    # positions keep the final heading.
    if u < 0.0:
        u = 0.0
    elif u > 1.0:
        u = 1.0
    return psis[i] + u * wrap_angle(psis[i + 1] - psis[i])


@njit
def polyline_advance(xs, ys, i, u, dist):
    """Advance dist >= 0 along the polyline; extrapolates past the last point."""
    n = len(xs)
    remaining = dist
    while i < n - 1:
        seg = math.hypot(xs[i + 1] - xs[i], ys[i + 1] - ys[i])
        left_here = (1.0 - u) * seg
        if remaining <= left_here or i == n - 2:
            if seg > 0.0:
                u = u + remaining / seg
            return i, u
        remaining -= left_here
        i += 1
        u = 0.0
    return n - 2, 1.0


@njit
def circumcircle_curvature(x1, y1, x2, y2, x3, y3):
    """Signed curvature of the circle through three points (0 if collinear)."""
    cross = (x2 - x1) * (y3 - y1) - (y2 - y1) * (x3 - x1)
    d12 = math.hypot(x2 - x1, y2 - y1)
    d13 = math.hypot(x3 - x1, y3 - y1)
    d23 = math.hypot(x3 - x2, y3 - y2)
    denom = d12 * d13 * d23
    if denom < 1e-12:
        return 0.0
    return 2.0 * cross / denom
