"""Quasi-periodic SL(2,R) cocycles: construction, iteration, hyperbolicity.

A cocycle is a pair (alpha, A) with alpha a torus translation vector and
A a matrix-valued function on the torus.  The n-th iterate is the ordered
product A(theta + (n-1) alpha) ... A(theta); negative iterates invert the
forward product started at the shifted phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import mat2
from .errors import DegreeError
from .qpcore import FourierSeries, Frequency, cosine_polynomial

__all__ = [
    "Cocycle",
    "HyperbolicityVerdict",
    "constant_cocycle",
    "rotation_cocycle",
    "schrodinger_cocycle",
    "iterate",
    "uniform_hyperbolicity_test",
]

_DET_TOL = 1e-9
_RENORM_EVERY = 64


@dataclass(frozen=True)
class Cocycle:
    """Immutable pair of a frequency and an SL(2,R)-valued series."""

    freq: Frequency
    map_series: FourierSeries
    is_schrodinger: bool = False

    def __post_init__(self):
        if not self.map_series.is_matrix:
            raise ValueError("cocycle map must be matrix-valued")
        if self.map_series.dim != self.freq.dim:
            raise ValueError("frequency and map dimension mismatch")
        vals = self.map_series.evaluate(self.map_series.grid_points())
        defect = np.abs(mat2.det2(vals) - 1.0).max()
        if defect > _DET_TOL:
            raise ValueError(f"det deviates from 1 by {defect:.3e} on grid")

    def matrix(self, theta):
        """Evaluate the map at one phase or an array of phases."""
        return self.map_series.evaluate(theta)

    def orbit_matrices(self, theta0, n):
        """Map values along theta0, theta0+alpha, ..., theta0+(n-1)alpha."""
        theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
        steps = np.arange(n, dtype=float)[:, None]
        pts = theta0[None, :] + steps * np.asarray(self.freq.vec)[None, :]
        return self.map_series.evaluate(pts)


def constant_cocycle(freq: Frequency, a) -> Cocycle:
    a = np.asarray(a, dtype=float)
    zero = tuple([0] * freq.dim)
    return Cocycle(freq, FourierSeries(freq.dim, 0, {zero: a.astype(complex)}))


def rotation_cocycle(freq: Frequency, phi: float) -> Cocycle:
    return constant_cocycle(freq, mat2.rotation(phi))


def schrodinger_cocycle(V: FourierSeries, E: float, freq: Frequency) -> Cocycle:
    """Transfer-matrix cocycle [[E - V(theta), -1], [1, 0]]."""
    if V.is_matrix:
        raise ValueError("potential must be scalar-valued")
    if V.dim != freq.dim:
        raise ValueError("potential and frequency dimension mismatch")
    if V.period != 1:
        raise ValueError("potential must be a full-period series")
    coeffs = {}
    for n, c in V.coeffs.items():
        m = np.zeros((2, 2), dtype=complex)
        m[0, 0] = -c
        coeffs[n] = m
    zero = tuple([0] * V.dim)
    base = coeffs.setdefault(zero, np.zeros((2, 2), dtype=complex))
    base[0, 0] += E
    base[0, 1] = -1.0
    base[1, 0] = 1.0
    series = FourierSeries(V.dim, max(V.radius, 0), coeffs)
    return Cocycle(freq, series, is_schrodinger=True)


def _ordered_product(mats):
    """Product mats[n-1] ... mats[0] with periodic det renormalization."""
    prod = np.eye(2)
    for k in range(mats.shape[0]):
        prod = mats[k] @ prod
        if (k + 1) % _RENORM_EVERY == 0:
            det = mat2.det2(prod)
            # once norms pass ~1e8 the det is lost to cancellation; leave
            # the product alone rather than divide by noise
            if det > 0 and mat2.norm2(prod) < 1e8:
                prod = prod / math.sqrt(det)
    return prod


def iterate(c: Cocycle, theta, n: int):
    """n-th cocycle iterate at theta; identity at n = 0, inverse chain for n < 0."""
    n = int(n)
    if n == 0:
        return np.eye(2)
    if n > 0:
        return _ordered_product(c.orbit_matrices(theta, n))
    theta0 = np.atleast_1d(np.asarray(theta, dtype=float))
    shifted = theta0 + n * np.asarray(c.freq.vec)
    return mat2.inv2(_ordered_product(c.orbit_matrices(shifted, -n)))


# ---------------------------------------------------------------------------
# finite-orbit hyperbolicity verdict

_CONE_SLOPE = 2.0
_WINDING_THRESHOLD = 4.0 * math.pi


@dataclass(frozen=True)
class HyperbolicityVerdict:
    verdict: str  # uniformly_hyperbolic | not_uniform | inconclusive
    orbit_length: int
    growth_exponent: float
    cone_margin: float


def _phase_samples(dim: int, count: int):
    """Deterministic low-discrepancy phases on the torus."""
    if dim == 1:
        return np.arange(count, dtype=float)[:, None] / count
    gens = np.array([math.sqrt(p) % 1.0 for p in (2, 3, 5)][:dim])
    return (np.arange(1, count + 1, dtype=float)[:, None] * gens[None, :]) % 1.0


def _cone_image_margin(prod):
    """Margin of M(cone) inside the cone, or -inf when the image wraps.

    The cone is |slope| <= 2 for directions (1, slope).  M acts on slopes by
    the Moebius map s -> (c + d s)/(a + b s); the image of the slope interval
    is an interval unless the pole -a/b lies inside, in which case the image
    passes through the vertical direction and the test fails.
    """
    a, b = prod[0, 0], prod[0, 1]
    c, d = prod[1, 0], prod[1, 1]
    lo = a - _CONE_SLOPE * b
    hi = a + _CONE_SLOPE * b
    if lo == 0.0 or hi == 0.0 or (lo > 0) != (hi > 0):
        return -math.inf
    s_lo = (c - _CONE_SLOPE * d) / lo
    s_hi = (c + _CONE_SLOPE * d) / hi
    return _CONE_SLOPE - max(abs(s_lo), abs(s_hi))


def uniform_hyperbolicity_test(c: Cocycle, phases: int, orbit: int,
                               margin: float = 0.05) -> HyperbolicityVerdict:
    """Cone-field certificate with a projective-winding fallback.

    The fixed cone |slope| <= 2 must map strictly inside itself, with the
    given margin, under the orbit-length product from every sampled phase.
    Sustained projective rotation instead yields not_uniform.  Everything
    else is reported as inconclusive; in particular the certificate cannot
    see hyperbolicity inside gaps whose invariant directions wind around
    projective space, and energies just past a spectral edge resolve only
    once the expanding/contracting directions separate beyond the cone.
    """
    if phases < 1:
        raise ValueError("phases >= 1 required")
    if orbit < 10:
        raise ValueError("orbit >= 10 required")
    theta = _phase_samples(c.freq.dim, phases)
    alpha = np.asarray(c.freq.vec)

    prod = np.broadcast_to(np.eye(2), (phases, 2, 2)).copy()
    log_scale = np.zeros(phases)
    v = np.zeros((phases, 2))
    v[:, 0] = 1.0
    winding = np.zeros(phases)

    for k in range(orbit):
        a_k = c.matrix(theta + k * alpha[None, :])
        w = np.einsum("pij,pj->pi", a_k, v)
        cross = v[:, 0] * w[:, 1] - v[:, 1] * w[:, 0]
        dot = v[:, 0] * w[:, 0] + v[:, 1] * w[:, 1]
        winding += np.arctan2(cross, dot)
        v = w / np.linalg.norm(w, axis=1, keepdims=True)
        prod = np.einsum("pij,pjk->pik", a_k, prod)
        if (k + 1) % _RENORM_EVERY == 0 or k == orbit - 1:
            scale = mat2.norm2(prod)
            prod = prod / scale[:, None, None]
            log_scale += np.log(scale)

    growth = float(np.min(log_scale) / orbit)
    cone_margin = min(_cone_image_margin(prod[p]) for p in range(phases))

    if cone_margin >= margin:
        verdict = "uniformly_hyperbolic"
    elif np.abs(winding).max() >= _WINDING_THRESHOLD:
        verdict = "not_uniform"
    else:
        verdict = "inconclusive"
    return HyperbolicityVerdict(verdict, orbit, growth, cone_margin)
