"""Torus geometry, Fourier transforms and the linear spectral operators.

Fields are stored as full complex Fourier coefficient arrays of shape
``(d, N, ..., N)`` normalised so that

    u(x) = sum_k c_k exp(i kappa_k . x),   kappa_k = 2 pi k / L.

With this convention ``||u||_H^2 = L^d sum_k |c_k|^2`` and the Stokes
operator acts as multiplication by ``|kappa_k|^2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


class HermitianSymmetryError(ValueError):
    """Raised when coefficients do not describe a real-valued field."""


@dataclass(frozen=True)
class Grid:
    """Uniform collocation grid on the torus ``(R / L Z)^d``.

    Parameters
    ----------
    d : int
        Spatial dimension, 2 or 3.
    L : float
        Period length.
    N : int
        Collocation points (and Fourier modes) per axis; even and >= 8.
    """

    d: int
    L: float
    N: int

    def __post_init__(self) -> None:
        if self.d not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.d}")
        if self.N < 8 or self.N % 2:
            raise ValueError(f"N must be even and >= 8, got {self.N}")
        if not self.L > 0:
            raise ValueError(f"period length must be positive, got {self.L}")
        object.__setattr__(self, "L", float(self.L))

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def field_shape(self) -> tuple[int, ...]:
        return (self.d,) + self.shape

    @property
    def axes(self) -> tuple[int, ...]:
        """Spatial axes of a vector-valued coefficient array."""
        return tuple(range(1, self.d + 1))

    @property
    def cell_volume(self) -> float:
        return (self.L / self.N) ** self.d

    @property
    def volume(self) -> float:
        return self.L**self.d

    @property
    def lambda1(self) -> float:
        """First Stokes eigenvalue ``4 pi^2 / L^2``."""
        return 4.0 * np.pi**2 / self.L**2

    @cached_property
    def k(self) -> np.ndarray:
        """Integer lattice vectors, shape ``(d, N, ..., N)``."""
        m = np.rint(np.fft.fftfreq(self.N, d=1.0 / self.N)).astype(np.int64)
        return np.array(np.meshgrid(*([m] * self.d), indexing="ij"))

    @cached_property
    def kappa(self) -> np.ndarray:
        """Physical wave vectors ``2 pi k / L``."""
        return (2.0 * np.pi / self.L) * self.k

    @cached_property
    def k2(self) -> np.ndarray:
        """``|kappa|^2``, the Stokes symbol."""
        return np.sum(self.kappa**2, axis=0)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Two-thirds rule: keep modes with every ``|k_i| < N/3``.

        The zero mode is also removed since all fields have zero mean.
        """
        keep = np.all(3 * np.abs(self.k) < self.N, axis=0)
        keep[(0,) * self.d] = False
        return keep

    @cached_property
    def x(self) -> np.ndarray:
        """Collocation points, shape ``(d, N, ..., N)``."""
        x1 = np.arange(self.N) * (self.L / self.N)
        return np.array(np.meshgrid(*([x1] * self.d), indexing="ij"))

    @cached_property
    def _leray_inv_k2(self) -> np.ndarray:
        inv = np.zeros(self.shape)
        nz = self.k2 > 0
        inv[nz] = 1.0 / self.k2[nz]
        return inv

    def zeros(self) -> "SpectralField":
        return SpectralField(self, np.zeros(self.field_shape, dtype=complex))


@dataclass(frozen=True)
class WaveVector:
    k: tuple[int, ...]
    L: float

    @property
    def kappa(self) -> np.ndarray:
        return 2.0 * np.pi * np.asarray(self.k, dtype=float) / self.L


class SpectralField:
    """Zero-mean vector field held as Fourier coefficients on a :class:`Grid`."""

    __slots__ = ("grid", "coeffs")

    def __init__(self, grid: Grid, coeffs: np.ndarray) -> None:
        coeffs = np.asarray(coeffs, dtype=complex)
        if coeffs.shape != grid.field_shape:
            raise ValueError(
                f"coefficient shape {coeffs.shape} does not match grid {grid.field_shape}"
            )
        self.grid = grid
        self.coeffs = coeffs

    def _check(self, other: "SpectralField") -> None:
        if other.grid != self.grid:
            raise ValueError("fields live on different grids")

    def __add__(self, other: "SpectralField") -> "SpectralField":
        self._check(other)
        return SpectralField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        self._check(other)
        return SpectralField(self.grid, self.coeffs - other.coeffs)

    def __neg__(self) -> "SpectralField":
        return SpectralField(self.grid, -self.coeffs)

    def __mul__(self, a: float) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs * a)

    __rmul__ = __mul__

    def __truediv__(self, a: float) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs / a)

    def copy(self) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs.copy())

    def norm(self, s: float = 0.0) -> float:
        return sobolev_norm(self, s)

    def physical(self) -> np.ndarray:
        return to_physical(self)

    def __repr__(self) -> str:
        g = self.grid
        return f"SpectralField(d={g.d}, N={g.N}, L={g.L}, H-norm={self.norm():.6g})"


# --------------------------------------------------------------------------
# coefficient-array kernels (used directly by the time steppers)


def conj_reflect(c: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    """Return ``conj(c(-k))`` for a coefficient array."""
    r = np.flip(c, axis=axes)
    r = np.roll(r, 1, axis=axes)
    return np.conj(r)


def hermitian_repair(c: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    """Project coefficients onto the Hermitian-symmetric (real field) subspace."""
    return 0.5 * (c + conj_reflect(c, axes))


def hermitian_defect(c: np.ndarray, axes: tuple[int, ...]) -> float:
    scale = np.max(np.abs(c)) if c.size else 0.0
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(c - conj_reflect(c, axes))) / scale)


def fwd(grid: Grid, values: np.ndarray) -> np.ndarray:
    """Physical samples ``(d, N, ...)`` to normalised coefficients."""
    return np.fft.fftn(values, axes=grid.axes) / grid.N**grid.d


def inv(grid: Grid, c: np.ndarray) -> np.ndarray:
    """Normalised coefficients to real physical samples (no symmetry check)."""
    return np.fft.ifftn(c, axes=grid.axes).real * grid.N**grid.d


def fwd_scalar(grid: Grid, values: np.ndarray) -> np.ndarray:
    return np.fft.fftn(values) / grid.N**grid.d


def inv_scalar(grid: Grid, c: np.ndarray) -> np.ndarray:
    return np.fft.ifftn(c).real * grid.N**grid.d


def leray_coeffs(grid: Grid, c: np.ndarray) -> np.ndarray:
    """Mode-wise ``(I - kappa kappa^T / |kappa|^2) c``; zero mode cleared."""
    kappa = grid.kappa
    div = np.sum(kappa * c, axis=0)
    out = c - kappa * (div * grid._leray_inv_k2)
    out[(slice(None),) + (0,) * grid.d] = 0.0
    return out


def gradient_phys(grid: Grid, c: np.ndarray) -> np.ndarray:
    """``grad[i, j] = d v_j / d x_i`` sampled on the grid, shape ``(d, d, N, ...)``."""
    kappa = grid.kappa
    return np.array([inv(grid, 1j * kappa[i] * c) for i in range(grid.d)])


def finish_nonlinear(grid: Grid, values: np.ndarray) -> np.ndarray:
    """Transform a pointwise product, dealias, Leray-project and repair symmetry."""
    c = fwd(grid, values)
    c *= grid.dealias_mask
    c = leray_coeffs(grid, c)
    return hermitian_repair(c, grid.axes)


def inner_coeffs(grid: Grid, a: np.ndarray, b: np.ndarray) -> float:
    """H inner product ``(a, b)`` computed from coefficients."""
    return float(grid.volume * np.sum((np.conj(a) * b).real))


# --------------------------------------------------------------------------
# public field-level operations


def to_physical(f: SpectralField, check: bool = True, tol: float = 1e-10) -> np.ndarray:
    """Sample ``f`` on the collocation grid.

    Raises
    ------
    HermitianSymmetryError
        If ``check`` and the coefficients are not Hermitian to ``tol``.
    """
    if check:
        defect = hermitian_defect(f.coeffs, f.grid.axes)
        if defect > tol:
            raise HermitianSymmetryError(
                f"coefficients violate Hermitian symmetry (relative defect {defect:.3e})"
            )
    return inv(f.grid, f.coeffs)


def to_spectral(grid: Grid, values: np.ndarray) -> SpectralField:
    """Coefficients of real samples ``values`` of shape ``(d, N, ..., N)``."""
    values = np.asarray(values, dtype=float)
    if values.shape != grid.field_shape:
        raise ValueError(f"expected samples of shape {grid.field_shape}, got {values.shape}")
    return SpectralField(grid, hermitian_repair(fwd(grid, values), grid.axes))


def leray_project(f: SpectralField) -> SpectralField:
    return SpectralField(f.grid, leray_coeffs(f.grid, f.coeffs))


def divergence(f: SpectralField) -> np.ndarray:
    """Fourier coefficients of ``div f`` (scalar array)."""
    return np.sum(1j * f.grid.kappa * f.coeffs, axis=0)


def stokes_apply(u: SpectralField) -> SpectralField:
    """``A u = -Laplacian u`` for solenoidal ``u``."""
    return SpectralField(u.grid, u.grid.k2 * u.coeffs)


def fractional_stokes_apply(u: SpectralField, s: float) -> SpectralField:
    """Apply ``A^s`` mode-wise, scaling by ``|kappa|^(2 s)``.

    The zero mode must vanish when ``s < 0``.
    """
    g = u.grid
    zero = (slice(None),) + (0,) * g.d
    if s < 0 and np.any(u.coeffs[zero] != 0):
        raise ValueError("negative powers of A need a zero-mean field")
    sym = np.zeros(g.shape)
    nz = g.k2 > 0
    sym[nz] = g.k2[nz] ** s
    if s == 0:
        sym[~nz] = 1.0
    return SpectralField(g, sym * u.coeffs)


def inner(f: SpectralField, g: SpectralField) -> float:
    """H inner product ``(f, g)``."""
    f._check(g)
    return inner_coeffs(f.grid, f.coeffs, g.coeffs)


def sobolev_norm(u: SpectralField, s: float = 0.0) -> float:
    """Fourier Sobolev norm ``(L^d sum |kappa|^(2s) |c_k|^2)^(1/2)``.

    ``s = 0`` is the H norm and ``s = 1`` the V norm.
    """
    g = u.grid
    p = np.sum(np.abs(u.coeffs) ** 2, axis=0)
    if s == 0:
        return float(np.sqrt(g.volume * np.sum(p)))
    nz = g.k2 > 0
    return float(np.sqrt(g.volume * np.sum(g.k2[nz] ** s * p[nz])))


def lebesgue_norm(u: SpectralField, p: float) -> float:
    """Collocation-quadrature ``L^p`` norm of ``|u|``.

    Spectrally accurate only when ``|u|^p`` is band-limited on the grid
    (always exact for ``p = 2``).
    """
    if p < 1 or not np.isfinite(p):
        raise ValueError(f"p must be finite and >= 1, got {p}")
    mag = np.sqrt(np.sum(to_physical(u, check=False) ** 2, axis=0))
    return float((np.sum(mag**p) * u.grid.cell_volume) ** (1.0 / p))


def dealias(f: SpectralField) -> SpectralField:
    return SpectralField(f.grid, f.coeffs * f.grid.dealias_mask)


# --------------------------------------------------------------------------
# Stokes eigenstructure


@dataclass(frozen=True)
class StokesSpectrum:
    """Stokes eigenvalues over the retained (dealiased) modes.

    Each entry is a conjugate pair ``{k, -k}`` of lattice vectors; it carries
    ``multiplicity = 2 (d - 1)`` real eigenfunctions sharing the eigenvalue
    ``4 pi^2 |k|^2 / L^2``.  Entries are sorted by ``|k|^2`` and ties are
    broken by lexicographic order of the representative ``k`` (first nonzero
    component positive).
    """

    grid: Grid
    reps: np.ndarray  # (n_pairs, d) integer representatives
    eigenvalues: np.ndarray  # (n_pairs,)
    rank: np.ndarray  # grid-shaped: sorted index of each mode's pair, -1 if not retained

    @property
    def multiplicity(self) -> int:
        return 2 * (self.grid.d - 1)

    def __len__(self) -> int:
        return len(self.eigenvalues)

    def lambda_(self, n: int) -> float:
        """1-based eigenvalue ``lambda_n``."""
        return float(self.eigenvalues[n - 1])

    def with_multiplicity(self) -> np.ndarray:
        return np.repeat(self.eigenvalues, self.multiplicity)

    def pn_mask(self, n: int) -> np.ndarray:
        if not 0 <= n <= len(self):
            raise ValueError(f"n must lie in [0, {len(self)}], got {n}")
        return (self.rank >= 0) & (self.rank < n)


def _canonical(k: np.ndarray) -> np.ndarray:
    """Flip sign of lattice vectors (rows) whose first nonzero entry is negative."""
    k = k.copy()
    first = np.zeros(len(k), dtype=np.int64)
    found = np.zeros(len(k), dtype=bool)
    for i in range(k.shape[1]):
        take = ~found & (k[:, i] != 0)
        first[take] = k[take, i]
        found |= take
    k[first < 0] *= -1
    return k


def stokes_spectrum(grid: Grid) -> StokesSpectrum:
    kflat = grid.k.reshape(grid.d, -1).T
    keep = grid.dealias_mask.ravel()
    canon = _canonical(kflat)
    base = 2 * grid.N + 1
    codes = np.zeros(len(canon), dtype=np.int64)
    for i in range(grid.d):
        codes = codes * base + (canon[:, i] + grid.N)
    reps_codes, first_idx = np.unique(codes[keep], return_index=True)
    reps = canon[keep][first_idx]
    k2 = np.sum(reps**2, axis=1)
    order = np.lexsort(tuple(reps[:, i] for i in range(grid.d - 1, -1, -1)) + (k2,))
    reps = reps[order]
    reps_codes = reps_codes[order]
    eig = grid.lambda1 * k2[order].astype(float)
    # rank lookup: position of each grid mode's pair in the sorted list
    sorter = np.argsort(reps_codes)
    pos = np.searchsorted(reps_codes, codes, sorter=sorter)
    pos = np.clip(pos, 0, len(reps_codes) - 1)
    hit = reps_codes[sorter[pos]] == codes
    rank = np.where(hit & keep, sorter[pos], -1).reshape(grid.shape)
    return StokesSpectrum(grid, reps, eig, rank)


# --------------------------------------------------------------------------
# field constructors


def random_field(
    grid: Grid,
    rng: np.random.Generator,
    *,
    kmax: float | None = None,
    slope: float = 2.0,
    h_norm: float | None = 1.0,
    solenoidal: bool = True,
) -> SpectralField:
    """Random real, dealiased, zero-mean field.

    Coefficient amplitudes decay like ``(1 + |k|^2)^(-slope/2)``; modes with
    ``|k|_inf > kmax`` are removed.  The result is rescaled to ``h_norm``
    unless that is ``None``.
    """
    shape = grid.field_shape
    c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    kk = np.sum(grid.k**2, axis=0)
    c *= (1.0 + kk) ** (-slope / 2.0)
    keep = grid.dealias_mask.copy()
    if kmax is not None:
        keep &= np.max(np.abs(grid.k), axis=0) <= kmax
    c *= keep
    c = hermitian_repair(c, grid.axes)
    if solenoidal:
        c = leray_coeffs(grid, c)
    f = SpectralField(grid, c)
    if h_norm is not None:
        nrm = f.norm()
        if nrm > 0:
            f = f * (h_norm / nrm)
    return f


def taylor_green(grid: Grid, amplitude: float = 1.0, wavenumber: int = 1) -> SpectralField:
    """Taylor-Green-type cellular vortex field.

    In 2D ``(sin(a x) cos(a y), -cos(a x) sin(a y))``; in 3D the classical
    ``(sin x cos y cos z, -cos x sin y cos z, 0)`` pattern, with
    ``a = 2 pi wavenumber / L``.
    """
    a = 2.0 * np.pi * wavenumber / grid.L
    x = grid.x
    if grid.d == 2:
        u = np.array([np.sin(a * x[0]) * np.cos(a * x[1]), -np.cos(a * x[0]) * np.sin(a * x[1])])
    else:
        u = np.array(
            [
                np.sin(a * x[0]) * np.cos(a * x[1]) * np.cos(a * x[2]),
                -np.cos(a * x[0]) * np.sin(a * x[1]) * np.cos(a * x[2]),
                np.zeros(grid.shape),
            ]
        )
    f = to_spectral(grid, amplitude * u)
    return SpectralField(grid, leray_coeffs(grid, f.coeffs * grid.dealias_mask))


def shear_field(grid: Grid, amplitude: float = 1.0, wavenumber: int = 1, kind: str = "cos") -> SpectralField:
    """Unidirectional shear ``(A g(2 pi m x_2 / L), 0, ...)`` with ``g`` = cos or sin."""
    a = 2.0 * np.pi * wavenumber / grid.L
    g = np.cos if kind == "cos" else np.sin
    u = np.zeros(grid.field_shape)
    u[0] = amplitude * g(a * grid.x[1])
    return to_spectral(grid, u)
