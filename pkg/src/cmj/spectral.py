"""Perron-Frobenius structure of the discounted reproduction matrix."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelSpec, is_irreducible


class SpectralError(RuntimeError):
    pass


class NotSupercriticalError(SpectralError):
    pass


def repro_matrix(spec: ModelSpec, theta: float) -> np.ndarray:
    """Entry ``(i, j)``: expected discounted number of type-``j`` children of a type-``i`` parent."""
    if theta < 0:
        raise ValueError(f"theta must be >= 0, got {theta}")
    M = np.zeros((spec.p, spec.p))
    for i, law in enumerate(spec.laws):
        for clutch in law.clutches:
            for e in clutch.entries:
                M[i, e.child_type - 1] += clutch.weight * e.count * e.displacement.laplace(theta)
    return M


def repro_matrix_derivative(spec: ModelSpec, theta: float) -> np.ndarray:
    """Entrywise ``d/dθ`` of :func:`repro_matrix` (nonpositive)."""
    if theta < 0:
        raise ValueError(f"theta must be >= 0, got {theta}")
    D = np.zeros((spec.p, spec.p))
    for i, law in enumerate(spec.laws):
        for clutch in law.clutches:
            for e in clutch.entries:
                D[i, e.child_type - 1] += clutch.weight * e.count * e.displacement.laplace_derivative(theta)
    return D


def _power(B: np.ndarray, tol: float, max_iter: int) -> tuple[float, np.ndarray]:
    p = B.shape[0]
    x = np.full(p, 1.0 / p)
    lam = 0.0
    diff = math.inf
    for _ in range(max_iter):
        y = B @ x
        lam_new = y.sum()
        if lam_new <= 0:
            raise SpectralError("power iteration collapsed to zero")
        y /= lam_new
        diff = float(np.abs(y - x).sum())
        converged = abs(lam_new - lam) <= tol * lam_new and diff <= 1e-12
        x, lam = y, lam_new
        if converged:
            return lam, x
    raise SpectralError(
        f"power iteration did not converge after {max_iter} iterations (last residual {diff:.3e})"
    )


def pf_eigen(
    M: np.ndarray, tol: float = 1e-13, max_iter: int = 100_000
) -> tuple[float, np.ndarray, np.ndarray]:
    """Perron root and eigenvectors of a nonnegative irreducible matrix.

    Returns ``(rho, u, v)`` with ``u`` the left and ``v`` the right
    eigenvector, scaled so that ``sum(v) == 1`` and ``u @ v == 1``.

    Power iteration runs on ``M + s I`` with ``s`` the mean row sum; the shift
    makes an irreducible but periodic ``M`` primitive without moving the
    eigenvectors.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("expected a square matrix")
    if (M < 0).any() or not np.isfinite(M).all():
        raise ValueError("matrix must be nonnegative and finite")
    if not M.any():
        raise SpectralError("zero matrix has no Perron-Frobenius eigenvector")
    p = M.shape[0]
    shift = M.sum() / p
    B = M + shift * np.eye(p)
    _, v = _power(B, tol, max_iter)
    _, u = _power(B.T, tol, max_iter)
    # Rayleigh quotient refinement with both eigenvectors
    rho = float(u @ M @ v) / float(u @ v)
    v = v / v.sum()
    u = u / float(u @ v)
    return rho, u, v


@dataclass(frozen=True)
class SpectralData:
    alpha: float
    rho0: float
    u: np.ndarray
    v: np.ndarray
    mprime: np.ndarray  # (-^i m_j)'(alpha), entrywise >= 0
    m_alpha: np.ndarray

    @property
    def p(self) -> int:
        return len(self.v)

    @property
    def pi(self) -> np.ndarray:
        """Stationary law of the spine type chain."""
        return self.u * self.v

    @property
    def denominator(self) -> float:
        """``sum_{j,k} u_j v_k (-^j m_k)'(alpha)``, the limit-constant denominator."""
        return float(self.u @ self.mprime @ self.v)

    def embedded_mprime_for(self, i: int) -> float:
        """``-m'(alpha)`` of the embedded single-type process of type ``i`` (1-based)."""
        return self.denominator / float(self.u[i - 1] * self.v[i - 1])

    @property
    def embedded_mprime(self) -> float:
        return self.embedded_mprime_for(1)

    def residuals(self) -> tuple[float, float]:
        left = float(np.abs(self.u @ self.m_alpha - self.u).max())
        right = float(np.abs(self.m_alpha @ self.v - self.v).max())
        return left, right

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "rho0": self.rho0,
            "u": self.u.tolist(),
            "v": self.v.tolist(),
            "mprime": (self.mprime + 0.0).tolist(),  # no negative zeros
            "embedded_mprime": self.embedded_mprime,
        }


def rho_of_theta(spec: ModelSpec, theta: float) -> float:
    return pf_eigen(repro_matrix(spec, theta))[0]


def _rho_and_slope(spec: ModelSpec, theta: float) -> tuple[float, float]:
    M = repro_matrix(spec, theta)
    rho, u, v = pf_eigen(M)
    slope = float(u @ repro_matrix_derivative(spec, theta) @ v) / float(u @ v)
    return rho, slope


def malthusian(spec: ModelSpec) -> SpectralData:
    """Solve ``rho(M(alpha)) = 1`` and collect the quantities built on ``alpha``."""
    if not is_irreducible(spec):
        raise SpectralError("M(0) is reducible")
    rho0 = rho_of_theta(spec, 0.0)
    if abs(rho0 - 1.0) <= 1e-12:
        raise NotSupercriticalError(f"critical: rho(0) = {rho0!r}")
    if rho0 < 1.0:
        raise NotSupercriticalError(f"not supercritical: rho(0) = {rho0!r} < 1")

    lo, hi = 0.0, 1.0
    while rho_of_theta(spec, hi) >= 1.0:
        lo = hi
        hi *= 2.0
        if hi > 1e8:
            raise SpectralError("no Malthusian parameter: rho(theta) stays >= 1")
    while hi - lo > 1e-14 * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if rho_of_theta(spec, mid) >= 1.0:
            lo = mid
        else:
            hi = mid
    alpha = 0.5 * (lo + hi)
    for _ in range(3):
        rho, slope = _rho_and_slope(spec, alpha)
        if slope >= 0:
            break
        step = alpha - (rho - 1.0) / slope
        if not lo <= step <= hi:
            break
        alpha = step
    M = repro_matrix(spec, alpha)
    rho, u, v = pf_eigen(M)
    if abs(rho - 1.0) > 1e-12:
        raise SpectralError(f"Malthusian solve stalled: |rho(alpha) - 1| = {abs(rho - 1.0):.3e}")
    mprime = -repro_matrix_derivative(spec, alpha)
    return SpectralData(alpha=alpha, rho0=rho0, u=u, v=v, mprime=mprime, m_alpha=M)
