"""Nonlinear operators of the convective Brinkman-Forchheimer system.

Convection ``B(u, v) = P[(u . grad) v]`` is evaluated pseudo-spectrally in
convective form with two-thirds dealiasing.  The damping ``C(u) = P(|u|^(r-1) u)``
and its Gateaux derivatives are pointwise in physical space; their outputs
are truncated to the same retained modes so every field stays band-limited.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .grid import (
    Grid,
    SpectralField,
    finish_nonlinear,
    gradient_phys,
    inner,
    inv,
    stokes_apply,
)

# Pointwise |u| below this fraction of max|u| is treated as u = 0.
ZERO_THRESHOLD = 1e-14


class RegimeError(ValueError):
    """Parameters outside the well-posedness regime (d = 3 with r < 3)."""


@dataclass(frozen=True)
class PhysParams:
    """Physical coefficients.

    ``mu`` viscosity, ``alpha`` Darcy and ``beta`` Forchheimer coefficients,
    ``r`` absorption exponent, ``sigma`` multiplicative-noise intensity.
    """

    mu: float = 1e-2
    alpha: float = 0.1
    beta: float = 1.0
    r: float = 3.0
    sigma: float = 0.0

    def __post_init__(self) -> None:
        for name in ("mu", "alpha", "beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.r >= 1:
            raise ValueError(f"r must be >= 1, got {self.r}")

    def check_regime(self, d: int, unsafe: bool = False) -> None:
        """Enforce the admissible (d, r) regime.

        d = 2 admits every r >= 1; d = 3 needs r >= 3, and d = r = 3 warns
        unless ``2 beta mu >= 1``.
        """
        if d == 3 and self.r < 3 and not unsafe:
            raise RegimeError(
                f"d=3 with r={self.r} < 3 is outside the well-posed regime "
                "(pass unsafe=True / --unsafe-regime to run anyway)"
            )
        if d == 3 and self.r == 3 and 2 * self.beta * self.mu < 1:
            warnings.warn(
                f"d=r=3 with 2*beta*mu = {2 * self.beta * self.mu:.3g} < 1; "
                "uniqueness results do not cover this case",
                stacklevel=2,
            )

    def derived(self, grid: Grid) -> "DerivedConstants":
        return DerivedConstants.from_params(self, grid)


@dataclass(frozen=True)
class DerivedConstants:
    lambda1: float
    vartheta: float

    @classmethod
    def from_params(cls, p: PhysParams, grid: Grid) -> "DerivedConstants":
        if p.r > 3:
            vt = (p.r - 3) / (p.r - 1) * (4.0 / (p.beta * p.mu * (p.r - 1))) ** (2.0 / (p.r - 3))
        else:
            vt = 0.0
        return cls(lambda1=grid.lambda1, vartheta=vt)


# --------------------------------------------------------------------------
# pointwise helpers


def _mag(u: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(u * u, axis=0))


def _safe_pow(mag: np.ndarray, e: float) -> np.ndarray:
    """``mag**e`` with the u = 0 branch returning 0 for negative exponents."""
    if e >= 0:
        return np.power(mag, e)
    thr = ZERO_THRESHOLD * (np.max(mag) if mag.size else 0.0)
    out = np.zeros_like(mag)
    nz = mag > thr
    out[nz] = np.power(mag[nz], e)
    return out


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=0)


def _convective(grid: Grid, u_phys: np.ndarray, v_coeffs: np.ndarray) -> np.ndarray:
    """``(u . grad) v`` sampled on the grid."""
    grad = gradient_phys(grid, v_coeffs)
    return np.einsum("i...,ij...->j...", u_phys, grad)


def damping_pointwise(u: np.ndarray, r: float) -> np.ndarray:
    if r == 1:
        return u.copy()
    return np.power(_mag(u), r - 1) * u


def c1_pointwise(u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    if r == 1:
        return v.copy()
    mag = _mag(u)
    out = np.power(mag, r - 1) * v
    out += (r - 1) * _safe_pow(mag, r - 3) * _dot(u, v) * u
    return out


def c2_pointwise(u: np.ndarray, v: np.ndarray, w: np.ndarray, r: float) -> np.ndarray:
    mag = _mag(u)
    uv, uw, vw = _dot(u, v), _dot(u, w), _dot(v, w)
    out = (r - 1) * _safe_pow(mag, r - 3) * (uw * v + uv * w + vw * u)
    if r != 3:
        out += (r - 1) * (r - 3) * _safe_pow(mag, r - 5) * uv * uw * u
    return out


def _same_grid(*fields: SpectralField) -> Grid:
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid != g:
            raise ValueError("fields live on different grids")
    return g


# --------------------------------------------------------------------------
# convection


def bilinear_B(u: SpectralField, v: SpectralField) -> SpectralField:
    """``B(u, v) = P[(u . grad) v]``, dealiased."""
    g = _same_grid(u, v)
    conv = _convective(g, inv(g, u.coeffs), v.coeffs)
    return SpectralField(g, finish_nonlinear(g, conv))


def convection(u: SpectralField) -> SpectralField:
    return bilinear_B(u, u)


def trilinear_b(u: SpectralField, v: SpectralField, w: SpectralField) -> float:
    """``b(u, v, w) = int (u . grad) v . w dx`` by collocation quadrature."""
    g = _same_grid(u, v, w)
    conv = _convective(g, inv(g, u.coeffs), v.coeffs)
    return float(np.sum(conv * inv(g, w.coeffs)) * g.cell_volume)


def linearized_B(u: SpectralField, v: SpectralField) -> SpectralField:
    """``B'(u) v = B(u, v) + B(v, u)``."""
    g = _same_grid(u, v)
    up, vp = inv(g, u.coeffs), inv(g, v.coeffs)
    conv = _convective(g, up, v.coeffs) + _convective(g, vp, u.coeffs)
    return SpectralField(g, finish_nonlinear(g, conv))


def adjoint_linearized_B(u: SpectralField, z: SpectralField) -> SpectralField:
    """``(B'(u))^* z`` defined by ``((B'(u))^* z, w) = (z, B'(u) w)``.

    Using the antisymmetry of ``b`` this is ``-B(u, z) + P[(grad u)^T z]``
    with ``[(grad u)^T z]_i = sum_j (d_i u_j) z_j``.
    """
    g = _same_grid(u, z)
    zp = inv(g, z.coeffs)
    grad_u = gradient_phys(g, u.coeffs)
    transport = np.einsum("ij...,j...->i...", grad_u, zp)
    conv = _convective(g, inv(g, u.coeffs), z.coeffs)
    return SpectralField(g, finish_nonlinear(g, transport - conv))


# --------------------------------------------------------------------------
# damping


def damping_C(u: SpectralField, r: float) -> SpectralField:
    """``C(u) = P(|u|^(r-1) u)`` evaluated pointwise and projected."""
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    g = u.grid
    return SpectralField(g, finish_nonlinear(g, damping_pointwise(inv(g, u.coeffs), r)))


def gateaux_C1(u: SpectralField, v: SpectralField, r: float) -> SpectralField:
    """First Gateaux derivative ``C'(u) v``."""
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    g = _same_grid(u, v)
    vals = c1_pointwise(inv(g, u.coeffs), inv(g, v.coeffs), r)
    return SpectralField(g, finish_nonlinear(g, vals))


def gateaux_C2(u: SpectralField, v: SpectralField, w: SpectralField, r: float) -> SpectralField:
    """Second Gateaux derivative ``C''(u)(v (x) w)``; requires ``r >= 3``."""
    if r < 3:
        raise ValueError(f"second derivative of C needs r >= 3, got {r}")
    g = _same_grid(u, v, w)
    vals = c2_pointwise(inv(g, u.coeffs), inv(g, v.coeffs), inv(g, w.coeffs), r)
    return SpectralField(g, finish_nonlinear(g, vals))


def monotonicity_gap(u: SpectralField, v: SpectralField, r: float) -> tuple[float, float, float]:
    """Terms of the monotonicity chain for ``C``.

    Returns ``(lhs, rhs1, rhs2)`` with ``lhs = <C(u) - C(v), u - v>``,
    ``rhs1 = 1/2 || |u|^((r-1)/2) (u-v) ||^2 + 1/2 || |v|^((r-1)/2) (u-v) ||^2``
    and ``rhs2 = 2^(1-r) ||u - v||_{L^(r+1)}^(r+1)``.  Expect
    ``lhs >= rhs1 >= rhs2 >= 0``.
    """
    g = _same_grid(u, v)
    up, vp = inv(g, u.coeffs), inv(g, v.coeffs)
    w = up - vp
    dw = _mag(w)
    lhs = inner(damping_C(u, r) - damping_C(v, r), u - v)
    rhs1 = 0.5 * np.sum((np.power(_mag(up), r - 1) + np.power(_mag(vp), r - 1)) * dw**2)
    rhs2 = 2.0 ** (1 - r) * np.sum(dw ** (r + 1))
    return lhs, float(rhs1 * g.cell_volume), float(rhs2 * g.cell_volume)


# --------------------------------------------------------------------------
# identity checks


def torus_identity_check(y: SpectralField, r: float) -> tuple[float, float, float]:
    """Terms of ``int (-Lap y) . |y|^(r-1) y = T1 + T2`` on the torus.

    ``T1 = int |grad y|^2 |y|^(r-1)`` and
    ``T2 = 4 (r-1)/(r+1)^2 int |grad |y|^((r+1)/2)|^2``.  ``T2`` is evaluated
    through the chain rule ``|grad |y|^p|^2 = p^2 |y|^(2p-4) |(grad y) y|^2``,
    which avoids differentiating the non-smooth ``|y|^p`` spectrally.
    """
    g = y.grid
    yp = inv(g, y.coeffs)
    lap = inv(g, -stokes_apply(y).coeffs)
    grad = gradient_phys(g, y.coeffs)
    mag = _mag(yp)
    w = np.power(mag, r - 1)
    lhs = np.sum(-lap * w * yp)
    term1 = np.sum(np.sum(grad**2, axis=(0, 1)) * w)
    if r == 1:
        term2 = 0.0
    else:
        gy = np.einsum("ij...,j...->i...", grad, yp)  # grad(|y|^2) / 2
        term2 = (r - 1) * np.sum(_safe_pow(mag, r - 3) * np.sum(gy**2, axis=0))
    cv = g.cell_volume
    return float(lhs * cv), float(term1 * cv), float(term2 * cv)


def sobolev_embedding_ratio(u: SpectralField, r: float) -> float:
    """``||u||_{L^(3(r+1))}^(r+1) / int |grad u|^2 |u|^(r-1)``.

    Reported as an empirical constant; never asserted against a value.
    """
    g = u.grid
    up = inv(g, u.coeffs)
    mag = _mag(up)
    grad = gradient_phys(g, u.coeffs)
    den = np.sum(np.sum(grad**2, axis=(0, 1)) * np.power(mag, r - 1)) * g.cell_volume
    num = (np.sum(mag ** (3 * (r + 1))) * g.cell_volume) ** (1.0 / 3.0)
    return float(num / den) if den > 0 else math.nan
