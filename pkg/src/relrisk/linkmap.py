"""Bivariate link between (theta, phi) and the arm-specific risks (p0, p1).

``theta`` is the log relative risk (RR) or the arctanh of the risk difference
(RD); ``phi`` is the log odds product

    phi = log[p0 p1 / ((1 - p0)(1 - p1))].

The map (theta, phi) -> (p0, p1) is a smooth bijection of R^2 onto the open
unit square. Its inverse solves a quadratic; here the root is written in the
rationalized (conjugate) form, which has no removable singularity at phi = 0
and is rearranged so that no intermediate quantity overflows.

All functions are vectorized over numpy arrays.
"""

from __future__ import annotations

import enum

import numpy as np
import pandas as pd
from scipy.special import expit

from .exceptions import DomainError, SpecError

_ARCTANH_GUARD = 1e-15
# Risks are reported inside [tiny, 1 - 2**-53]; values closer to 0 or 1 are not
# representable. Complements from inverse_full keep their full precision.
_TINY = np.finfo(float).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)


class Measure(str, enum.Enum):
    RR = "rr"
    RD = "rd"

    @classmethod
    def coerce(cls, value) -> "Measure":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise SpecError(f"unknown measure {value!r}; expected 'rr' or 'rd'") from None


def _check_finite(*arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise DomainError("non-finite input to link map")


def forward(p0, p1, measure):
    """(p0, p1) -> (theta, phi). Probabilities must lie strictly inside (0, 1)."""
    measure = Measure.coerce(measure)
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    if not (np.all((p0 > 0) & (p0 < 1)) and np.all((p1 > 0) & (p1 < 1))):
        raise DomainError("probabilities must lie strictly inside (0, 1)")
    phi = np.log(p0) - np.log1p(-p0) + np.log(p1) - np.log1p(-p1)
    if measure is Measure.RR:
        theta = np.log(p1) - np.log(p0)
    else:
        rd = np.clip(p1 - p0, -1 + _ARCTANH_GUARD, 1 - _ARCTANH_GUARD)
        theta = np.arctanh(rd)
    return theta, phi


def _rr_core(theta, phi):
    # Larger of (p0, p1) is g(c) with c = -|theta| - phi, smaller is exp(-|theta|) g(c), where
    # g(c) = 2 / [(1 + u) + sqrt((1 - u)^2 + 4 e^c)],  u = exp(-|theta|).
    at = np.abs(theta)
    u = np.exp(-at)
    om = -np.expm1(-at)  # 1 - u
    c = -at - phi
    lo = c <= 0
    cn = np.where(lo, c, 0.0)
    cp = np.where(lo, 0.0, c)
    # c <= 0
    ec = np.exp(cn)
    sq = np.sqrt(om * om + 4.0 * ec)
    g_lo = 2.0 / ((1.0 + u) + sq)
    gc_lo = 4.0 * ec / ((sq + om) * ((1.0 + u) + sq))
    # c > 0: scale numerator and denominator by exp(-c/2)
    h = np.exp(-0.5 * cp)
    sq2 = np.sqrt(om * om * h * h + 4.0)
    g_hi = 2.0 * h / ((1.0 + u) * h + sq2)
    gc_hi = 4.0 / ((sq2 + om * h) * ((1.0 + u) * h + sq2))
    big = np.where(lo, g_lo, g_hi)
    big_c = np.where(lo, gc_lo, gc_hi)
    small = u * big
    small_c = big_c + big * om
    pos = theta >= 0
    p0 = np.where(pos, small, big)
    p1 = np.where(pos, big, small)
    q0 = np.where(pos, small_c, big_c)
    q1 = np.where(pos, big_c, small_c)
    return p0, p1, q0, q1


def _rd_core(theta, phi):
    # Reduce to theta >= 0, phi <= 0 via the symmetries
    #   (p0, p1) -> (p1, p0):         theta -> -theta, phi unchanged
    #   (p0, p1) -> (1 - p1, 1 - p0): theta unchanged, phi -> -phi
    at = np.abs(theta)
    nphi = -np.abs(phi)
    s = np.exp(nphi)
    oms = -np.expm1(nphi)  # 1 - s
    rho = np.tanh(at)
    omr = 2.0 * expit(-2.0 * at)  # 1 - rho without cancellation
    b = s * (1.0 + omr) + rho
    disc = b * b + 4.0 * s * omr * oms
    p0 = 2.0 * s * omr / (b + np.sqrt(disc))
    p1 = p0 + rho
    q0 = 1.0 - p0
    q1 = omr - p0
    flip = phi > 0
    p0, p1, q0, q1 = (np.where(flip, q1, p0), np.where(flip, q0, p1),
                      np.where(flip, p1, q0), np.where(flip, p0, q1))
    neg = theta < 0
    p0, p1, q0, q1 = (np.where(neg, p1, p0), np.where(neg, p0, p1),
                      np.where(neg, q1, q0), np.where(neg, q0, q1))
    return p0, p1, q0, q1


def inverse_full(theta, phi, measure):
    """Return ``(p0, p1, 1 - p0, 1 - p1)``, the complements computed without cancellation."""
    measure = Measure.coerce(measure)
    theta, phi = np.broadcast_arrays(np.asarray(theta, dtype=float), np.asarray(phi, dtype=float))
    _check_finite(theta, phi)
    core = _rr_core if measure is Measure.RR else _rd_core
    return tuple(np.clip(x, _TINY, _ONE_MINUS) for x in core(theta, phi))


def inverse(theta, phi, measure):
    """(theta, phi) -> (p0, p1), both strictly inside (0, 1)."""
    p0, p1, _, _ = inverse_full(theta, phi, measure)
    return p0, p1


def partials_from_probs(p0, p1, q0, q1, measure):
    """Partial derivatives of the inverse map, written in terms of the risks.

    Obtained by inverting the 2x2 Jacobian of :func:`forward`; returns
    ``(dp0/dtheta, dp0/dphi, dp1/dtheta, dp1/dphi)``.
    """
    measure = Measure.coerce(measure)
    if measure is Measure.RR:
        s = q0 + q1
        return -p0 * q0 / s, p0 * q0 * q1 / s, p1 * q1 / s, p1 * q0 * q1 / s
    v0 = p0 * q0
    v1 = p1 * q1
    s = v0 + v1
    # 1 - rho^2 = (1 - rho)(1 + rho) with rho = p1 - p0
    k = (q0 + p1) * (q1 + p0)
    dphi = v0 * v1 / s
    return -k * v0 / s, dphi, k * v1 / s, dphi


def inverse_partials(theta, phi, measure):
    """``(dp0/dtheta, dp0/dphi, dp1/dtheta, dp1/dphi)`` at (theta, phi)."""
    p0, p1, q0, q1 = inverse_full(theta, phi, measure)
    return partials_from_probs(p0, p1, q0, q1, measure)


def h_transform(y, a, theta, measure):
    """Exposure-removed outcome: ``y exp(-a theta)`` (RR) or ``y - a tanh(theta)`` (RD)."""
    measure = Measure.coerce(measure)
    theta = np.asarray(theta, dtype=float)
    _check_finite(theta)
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    if measure is Measure.RR:
        return y * np.exp(-a * theta)
    return y - a * np.tanh(theta)


def emit_curves(measure, theta_grid, phi_grid) -> pd.DataFrame:
    """Tabulate the inverse map on a grid; theta varies slowest."""
    theta_grid = np.asarray(theta_grid, dtype=float).ravel()
    phi_grid = np.asarray(phi_grid, dtype=float).ravel()
    if theta_grid.size == 0 or phi_grid.size == 0:
        raise SpecError("curve grids must be non-empty")
    tt, pp = np.meshgrid(theta_grid, phi_grid, indexing="ij")
    p0, p1 = inverse(tt.ravel(), pp.ravel(), measure)
    return pd.DataFrame({"theta": tt.ravel(), "phi": pp.ravel(), "p0": p0, "p1": p1})
