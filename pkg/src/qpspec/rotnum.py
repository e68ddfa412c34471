"""Fibered rotation numbers, conjugacy degrees, and the conjugation shift rule.

The rotation number of a cocycle homotopic to the identity is the average
angular advance of the projective action along a single orbit; unique
ergodicity of the torus translation makes the orbit average independent of
the starting phase.  Conjugacies on the doubled torus shift the rotation
number by half the frequency pairing with their winding degree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import mat2
from .cocycle import Cocycle
from .errors import DegreeError
from .qpcore import FourierSeries, Frequency, dist_to_int

__all__ = [
    "RotationEstimate",
    "rotation_number",
    "rotation_from_orbit",
    "schrodinger_rotation_grid",
    "rotation_series",
    "degree",
    "conjugated_rotation",
    "rotation_perturbation_bound_check",
]

_TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class RotationEstimate:
    rho: float
    iterations: int
    error: float


def _track_winding(mats, transfer: bool):
    """Total lifted angle along the orbit, with the half-orbit subtotal.

    mats has shape (n, 2, 2) or (n, L, 2, 2) for L independent lanes.
    Branch choice: transfer matrices advance the vector angle within
    (-pi/2, 3pi/2) (forward rotation in the elliptic zone, a near-pi flip
    below the spectrum), so a branch window shifted by +pi/2 never slips.
    General cocycles instead unwrap against a running mean advance, which
    handles conjugated cocycles whose steps drift by a constant angle.
    """
    laned = mats.ndim == 4
    if not laned:
        mats = mats[:, None, :, :]
    n, lanes = mats.shape[0], mats.shape[1]
    v = np.zeros((lanes, 2))
    v[:, 0] = 1.0
    total = np.zeros(lanes)
    half_total = np.zeros(lanes)
    half_at = n // 2
    mean = np.zeros(lanes)
    warmup = min(64, n)
    for k in range(n):
        w = np.einsum("lij,lj->li", mats[k], v)
        cross = v[:, 0] * w[:, 1] - v[:, 1] * w[:, 0]
        dot = (v * w).sum(axis=1)
        delta = np.arctan2(cross, dot)
        if transfer:
            delta = np.where(delta <= -0.5 * math.pi, delta + _TWO_PI, delta)
        elif k >= warmup:
            delta = delta + _TWO_PI * np.round((mean - delta) / _TWO_PI)
        if k < warmup:
            mean += (delta - mean) / (k + 1)
        else:
            mean += 0.02 * (delta - mean)
        total += delta
        v = w / np.linalg.norm(w, axis=1, keepdims=True)
        if k + 1 == half_at:
            half_total[:] = total
    if laned:
        return total, half_total, half_at
    return total[0], half_total[0], half_at


def _estimate(total, half_total, n, half_at, fold):
    rho = (total / (_TWO_PI * n)) % 1.0
    rho_half = (half_total / (_TWO_PI * half_at)) % 1.0
    err = float(dist_to_int(rho - rho_half))
    rho = float(rho)
    if fold:
        rho = min(rho, 1.0 - rho)
    return RotationEstimate(rho, n, err)


def rotation_from_orbit(mats, schrodinger: bool = False) -> RotationEstimate:
    """Rotation estimate from precomputed orbit matrices of shape (n, 2, 2)."""
    n = mats.shape[0]
    total, half_total, half_at = _track_winding(np.asarray(mats, dtype=float),
                                                transfer=schrodinger)
    return _estimate(total, half_total, n, half_at, schrodinger)


def rotation_number(c: Cocycle, theta0, n_iters: int) -> RotationEstimate:
    """Average projective-angle advance along one orbit, mod Z.

    Schrodinger cocycles are folded into [0, 1/2]; general cocycles report
    the representative in [0, 1).
    """
    if n_iters < 1000:
        raise ValueError("n_iters >= 1000 required")
    mats = c.orbit_matrices(theta0, n_iters)
    return rotation_from_orbit(mats, schrodinger=c.is_schrodinger)


def schrodinger_rotation_grid(V: FourierSeries, freq: Frequency, energies,
                              theta0=0.0, n_iters: int = 20000):
    """Folded rotation numbers for a grid of energies via lane tracking.

    The potential is sampled once along the orbit; the transfer-matrix
    action on each lane reduces to scalar arithmetic, so the cost is one
    pass of length n_iters regardless of the number of energies.
    """
    energies = np.asarray(energies, dtype=float)
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    steps = np.arange(n_iters, dtype=float)[:, None]
    pts = theta0[None, :] + steps * np.asarray(freq.vec)[None, :]
    v_orbit = V.evaluate(pts)

    lanes = energies.shape[0]
    v1 = np.ones(lanes)
    v2 = np.zeros(lanes)
    total = np.zeros(lanes)
    half_total = np.zeros(lanes)
    half_at = n_iters // 2
    for k in range(n_iters):
        w1 = (energies - v_orbit[k]) * v1 - v2
        w2 = v1
        cross = v1 * w2 - v2 * w1
        dot = v1 * w1 + v2 * w2
        delta = np.arctan2(cross, dot)
        total += np.where(delta <= -0.5 * math.pi, delta + _TWO_PI, delta)
        norm = np.hypot(w1, w2)
        v1 = w1 / norm
        v2 = w2 / norm
        if k + 1 == half_at:
            half_total[:] = total
    rho = (total / (_TWO_PI * n_iters)) % 1.0
    rho_half = (half_total / (_TWO_PI * half_at)) % 1.0
    err = dist_to_int(rho - rho_half)
    return np.minimum(rho, 1.0 - rho), err


def rotation_series(n_vec, dim: int = None) -> FourierSeries:
    """Matrix series of theta -> R_{<n, theta>/2} on the doubled torus."""
    n_vec = tuple(int(x) for x in np.atleast_1d(n_vec))
    if dim is None:
        dim = len(n_vec)
    plus = 0.5 * np.array([[1.0, 1j], [-1j, 1.0]])
    if all(x == 0 for x in n_vec):
        return FourierSeries(dim, 0, {n_vec: np.eye(2, dtype=complex)},
                             period=2)
    minus_vec = tuple(-x for x in n_vec)
    coeffs = {n_vec: plus, minus_vec: np.conj(plus)}
    return FourierSeries(dim, max(abs(x) for x in n_vec), coeffs, period=2)


def degree(B: FourierSeries, freq: Frequency):
    """Winding degree of a conjugacy on the doubled torus.

    Returns the integer vector n such that B is homotopic to
    R_{<n, theta>/2}: the first column of B winds n_i half-turns as
    theta_i crosses one period of the doubled cover.
    """
    if not B.is_matrix:
        raise ValueError("degree needs a matrix-valued series")
    dim = B.dim
    span = float(B.period)
    grid_n = max(256, 8 * B.radius + 1)
    degs = []
    for axis in range(dim):
        pts = np.zeros((grid_n + 1, dim))
        pts[:, axis] = np.linspace(0.0, span, grid_n + 1)
        vals = B.evaluate(pts)
        col = vals[:, :, 0]
        norms = np.hypot(col[:, 0], col[:, 1])
        if norms.min() < 1e-8:
            raise DegreeError("first column of the conjugacy degenerates "
                              f"along axis {axis}")
        ang = np.arctan2(col[:, 1], col[:, 0])
        dps = np.diff(ang)
        dps = (dps + math.pi) % (2.0 * math.pi) - math.pi
        total = dps.sum() * (2.0 / span)
        deg = round(total / _TWO_PI)
        if abs(total / _TWO_PI - deg) > 0.25:
            raise DegreeError(f"winding {total / _TWO_PI:.3f} along axis "
                              f"{axis} is not close to an integer")
        degs.append(int(deg))
    return tuple(degs)


def conjugated_rotation(rho_in: float, B_degree, freq: Frequency) -> float:
    """Rotation number after conjugating by a degree-n map: shift by <n,a>/2."""
    shift = 0.5 * float(np.dot(np.atleast_1d(B_degree),
                               np.asarray(freq.vec)))
    return (rho_in - shift) % 1.0


def rotation_perturbation_bound_check(A: FourierSeries, phi: float,
                                      freq: Frequency, n_iters: int = 100000,
                                      theta0=0.0) -> dict:
    """Measure |rho(A) - phi| against the sup distance of A from R_phi.

    A need not have exactly unit determinant (perturbations of a rotation
    are accepted), but the projective action must preserve orientation.
    """
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    steps = np.arange(n_iters, dtype=float)[:, None]
    pts = theta0[None, :] + steps * np.asarray(freq.vec)[None, :]
    mats = A.evaluate(pts)
    dets = mats[:, 0, 0] * mats[:, 1, 1] - mats[:, 0, 1] * mats[:, 1, 0]
    if dets.min() <= 0:
        raise ValueError("orientation-reversing map has no rotation number")
    est = rotation_from_orbit(mats, schrodinger=False)

    grid = A.grid_points()
    diff = A.evaluate(grid) - mat2.rotation(phi)
    sup = float(mat2.norm2(diff).max())
    lhs = float(dist_to_int(est.rho - phi))
    return {
        "rho": est.rho,
        "phi": phi,
        "lhs": lhs,
        "rhs": sup,
        "slack": sup - lhs,
        "holds": bool(lhs <= sup + 1e-9),
        "iterations": n_iters,
        "rho_error": est.error,
    }
