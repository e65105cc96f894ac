"""Attractor-side constructions: spectral projections, sampling, deviation scales."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diagnostics import LogLipschitzReport
from .grid import Grid, SpectralField, StokesSpectrum, random_field, sobolev_norm, stokes_spectrum
from .integrators import ForcingSpec, TimeGrid, iterate_cbf
from .operators import PhysParams


# --------------------------------------------------------------------------
# projections


def project_Pn_Qn(
    u: SpectralField, n: int, spectrum: StokesSpectrum | None = None
) -> tuple[SpectralField, SpectralField]:
    """Split ``u`` into its component on the first ``n`` eigenpairs and the rest.

    Eigenpairs are counted as conjugate pairs ``{k, -k}`` in the order of
    :class:`StokesSpectrum` (by ``|k|^2``, ties lexicographic), so ``P_n``
    is deterministic and maps real fields to real fields.
    """
    spec = spectrum or stokes_spectrum(u.grid)
    mask = spec.pn_mask(n)
    p = u.coeffs * mask
    return SpectralField(u.grid, p), SpectralField(u.grid, u.coeffs - p)


def tail_inequality_gap(w: SpectralField, n: int, spectrum: StokesSpectrum | None = None) -> tuple[float, float]:
    """``(lambda_{n+1} ||Q_n w||^2, ||A^(1/2) w||^2)``; the first never exceeds the second."""
    spec = spectrum or stokes_spectrum(w.grid)
    if not 0 <= n < len(spec):
        raise ValueError(f"n must lie in [0, {len(spec) - 1}], got {n}")
    _, q = project_Pn_Qn(w, n, spec)
    return spec.lambda_(n + 1) * sobolev_norm(q) ** 2, sobolev_norm(w, 1) ** 2


# --------------------------------------------------------------------------
# sampling


@dataclass
class AttractorSample:
    """Snapshots taken after a burn-in from several initial conditions.

    ``radius`` is the absorbing-ball bound
    ``||f|| / (mu lambda_1 + alpha) + exp(-(mu lambda_1 + alpha) burn_in) max ||x||``
    implied by the energy inequality; ``drift`` holds, per initial
    condition, the relative spread of ``||u||_H`` over the last quarter of
    the burn-in (see :func:`relative_drift`).
    """

    points: list
    burn_in: float
    forcing_id: str
    seeds: list
    radius: float
    drift: list = field(default_factory=list)
    source: list = field(default_factory=list)  # initial-condition index per point
    times: list = field(default_factory=list)

    @property
    def stationary(self) -> bool:
        return all(d < 0.01 for d in self.drift)

    def __len__(self) -> int:
        return len(self.points)


def relative_drift(series: np.ndarray) -> float:
    """Change of the least-squares linear trend across the window, over the window mean.

    Insensitive to zero-mean fluctuations, so chaotic but statistically
    stationary signals score low.
    """
    if len(series) < 2:
        return 0.0
    mean = float(np.mean(series))
    if mean == 0:
        return 0.0
    slope = np.polyfit(np.arange(len(series), dtype=float), series, 1)[0]
    return float(abs(slope) * (len(series) - 1) / mean)


def kolmogorov_forcing(grid: Grid, amplitude: float = 1.0, wavenumber: int = 4) -> ForcingSpec:
    """Steady shear forcing ``(F sin(2 pi m x_2 / L), 0, ...)``."""
    from .grid import shear_field

    return ForcingSpec.steady(shear_field(grid, amplitude, wavenumber, kind="sin"), hypothesis="H (steady)")


def sample_attractor(
    grid: Grid,
    params: PhysParams,
    forcing: ForcingSpec,
    dt: float,
    n_initial: int = 8,
    burn_in: float | None = None,
    n_snapshots: int = 4,
    spacing: float = 1.0,
    seed: int = 0,
    initial_norm: float = 1.0,
    forcing_id: str = "steady",
) -> AttractorSample:
    """Run ``n_initial`` seeded initial conditions past ``burn_in`` (default ``10 / alpha``)
    and collect ``n_snapshots`` states from each, ``spacing`` time units apart."""
    if n_initial < 1:
        raise ValueError("need at least one initial condition")
    burn = 10.0 / params.alpha if burn_in is None else burn_in
    horizon = burn + spacing * (n_snapshots - 1)
    steps = int(round(horizon / dt))
    tg = TimeGrid(0.0, steps * dt, dt)
    burn_steps = int(round(burn / dt))
    every = max(1, int(round(spacing / dt)))
    quarter = burn_steps - burn_steps // 4
    gamma = params.mu * grid.lambda1 + params.alpha
    fnorm = sobolev_norm(forcing.at(grid, 0.0))
    rng_seeds = np.random.SeedSequence(seed).generate_state(n_initial)
    points, source, times, drift, xnorms = [], [], [], [], []
    for j, s in enumerate(rng_seeds):
        x = random_field(grid, np.random.default_rng(int(s)), h_norm=initial_norm, kmax=grid.N // 4)
        xnorms.append(sobolev_norm(x))
        hist = []
        taken = 0
        for i, t, u in iterate_cbf(x, tg, params, forcing):
            if quarter <= i <= burn_steps:
                hist.append(sobolev_norm(u))
            if i >= burn_steps and (i - burn_steps) % every == 0 and taken < n_snapshots:
                taken += 1
                points.append(u)
                source.append(j)
                times.append(t)
        drift.append(relative_drift(np.asarray(hist)))
    radius = fnorm / gamma + math.exp(-gamma * burn) * max(xnorms)
    return AttractorSample(
        points=points,
        burn_in=burn,
        forcing_id=forcing_id,
        seeds=[int(s) for s in rng_seeds],
        radius=radius,
        drift=drift,
        source=source,
        times=times,
    )


def sample_pairs(sample: AttractorSample, min_separation: float = 0.0) -> list:
    """All index pairs ``(i, j)``, ``i < j``, whose H-distance exceeds ``min_separation``."""
    out = []
    pts = sample.points
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            if sobolev_norm(pts[i] - pts[j]) > min_separation:
                out.append((i, j))
    return out


# --------------------------------------------------------------------------
# maximal set and deviation scale


def maximal_set_363(points, n: int, spectrum: StokesSpectrum | None = None) -> list[int]:
    """Greedy subset with ``||Q_n (x - y)|| <= ||P_n (x - y)||`` for all pairs.

    Points are visited in the given order and kept when compatible with
    every point kept so far.  The result is maximal with respect to
    insertion (no rejected point can be added), not globally maximal.
    Returns the kept indices.
    """
    pts = list(points.points if isinstance(points, AttractorSample) else points)
    if not pts:
        return []
    spec = spectrum or stokes_spectrum(pts[0].grid)
    kept: list[int] = []
    for i, x in enumerate(pts):
        ok = True
        for j in kept:
            p, q = project_Pn_Qn(x - pts[j], n, spec)
            if sobolev_norm(q) > sobolev_norm(p):
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


@dataclass(frozen=True)
class DeviationScale:
    """Graph-approximation scale at cutoff ``n``.

    ``epsilon_n = 2 M0 exp(-lambda_{n+1} / (2 C0))``.  Following the tail
    chain with ``||w|| <= 2 ||Q_n w||`` gives the guaranteed bound
    ``||Q_n w|| <= M0 exp(-lambda_{n+1} / (8 C0))`` for pairs violating the
    maximal-set relation; ``half_bound_rigorous`` stores it.
    """

    n: int
    lambda_next: float
    C0: float
    M0: float
    epsilon_n: float
    half_bound_rigorous: float
    trend: np.ndarray  # log(n) / lambda_n for n = 1..len(spectrum)


def epsilon_n(M0: float, C0: float, lambda_next: float) -> float:
    return 2.0 * M0 * math.exp(-lambda_next / (2.0 * C0))


def fitted_C0(report: LogLipschitzReport, margin: float = 0.10) -> float:
    return (1.0 + margin) * report.ratio_360


def deviation_scale(
    report: LogLipschitzReport | None,
    spectrum: StokesSpectrum,
    n: int,
    C0: float | None = None,
    M0: float | None = None,
) -> DeviationScale:
    """Deviation scale from a log-Lipschitz report (``C0 = 1.1 * ratio_360``) or explicit constants."""
    if C0 is None:
        if report is None:
            raise ValueError("need a report or an explicit C0")
        C0 = fitted_C0(report)
    if M0 is None:
        if report is None:
            raise ValueError("need a report or an explicit M0")
        M0 = report.M0
    if not C0 > 0:
        raise ValueError(f"C0 must be positive, got {C0}")
    if not 0 <= n < len(spectrum):
        raise ValueError(f"n must lie in [0, {len(spectrum) - 1}], got {n}")
    lam = spectrum.lambda_(n + 1)
    idx = np.arange(1, len(spectrum) + 1)
    return DeviationScale(
        n=n,
        lambda_next=lam,
        C0=float(C0),
        M0=float(M0),
        epsilon_n=epsilon_n(M0, C0, lam),
        half_bound_rigorous=M0 * math.exp(-lam / (8.0 * C0)),
        trend=np.log(idx) / spectrum.eigenvalues,
    )


def check_deviation(points, kept: list[int], n: int, scale: DeviationScale, spectrum: StokesSpectrum | None = None) -> dict:
    """For each point outside ``kept``, the largest ``||Q_n (x - y)||`` over kept ``y``
    violating the relation, compared with both bounds."""
    pts = list(points.points if isinstance(points, AttractorSample) else points)
    spec = spectrum or stokes_spectrum(pts[0].grid)
    worst = 0.0
    for i, x in enumerate(pts):
        if i in kept:
            continue
        for j in kept:
            p, q = project_Pn_Qn(x - pts[j], n, spec)
            qn = sobolev_norm(q)
            if qn >= sobolev_norm(p):
                worst = max(worst, qn)
    return {
        "max_Qn_violating": worst,
        "half_epsilon": 0.5 * scale.epsilon_n,
        "half_bound_rigorous": scale.half_bound_rigorous,
        "within_epsilon": worst <= 0.5 * scale.epsilon_n,
        "within_rigorous": worst <= scale.half_bound_rigorous,
    }


def weyl_trend(spectrum: StokesSpectrum) -> dict:
    """Growth of ``lambda_n`` and the ratio ``log(n) / lambda_n``.

    Only levels inside the largest ball contained in the retained
    (cubic) mode set are used, since counting beyond it is truncated.
    ``growth_exponent`` is the least-squares slope of ``log lambda_n``
    against ``log n`` over the upper half of those levels; lattice counting
    predicts ``2 / d`` (``expected_exponent``), and ``alt_exponent`` is the
    ``d / 2`` rate sometimes quoted for the same count.  The ratio
    is sampled at the first level reaching each ``n = 2^j``;
    ``eventually_decreasing`` checks it is non-increasing after its maximum
    and ends strictly lower (single-level lattice jumps make consecutive
    levels unreliable).
    """
    g = spectrum.grid
    lam = spectrum.eigenvalues
    kmax = int(np.max(np.abs(spectrum.reps)))
    inside = lam <= g.lambda1 * kmax**2
    lam_in = lam[inside]
    last = np.r_[np.nonzero(np.diff(lam_in))[0], len(lam_in) - 1]
    n = last + 1
    lev = lam_in[last]
    ratio = np.log(n) / lev
    half = slice(len(n) // 2, None)
    slope = float(np.polyfit(np.log(n[half]), np.log(lev[half]), 1)[0])
    dyadic_n, dyadic_r = [], []
    j = 1
    while 2**j <= n[-1]:
        i = int(np.searchsorted(n, 2**j))
        if not dyadic_n or dyadic_n[-1] != int(n[i]):
            dyadic_n.append(int(n[i]))
            dyadic_r.append(float(ratio[i]))
        j += 1
    dyadic_r = np.asarray(dyadic_r)
    k = int(np.argmax(dyadic_r)) if len(dyadic_r) else 0
    tail = dyadic_r[k:]
    decreasing = bool(len(tail) > 1 and np.all(np.diff(tail) <= 0) and tail[-1] < tail[0])
    return {
        "levels": n,
        "ratio": ratio,
        "dyadic_n": dyadic_n,
        "dyadic_ratio": dyadic_r,
        "eventually_decreasing": decreasing,
        "growth_exponent": slope,
        "expected_exponent": 2.0 / g.d,
        "alt_exponent": g.d / 2.0,
    }


def save_sample(sample: AttractorSample, directory, params: PhysParams, extra: dict | None = None) -> Path:
    """Write each point as a checkpoint plus ``manifest.json``."""
    from .io import dump_json, write_checkpoint

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (u, t) in enumerate(zip(sample.points, sample.times)):
        name = f"point_{i:04d}.cbf"
        write_checkpoint(out / name, u, params, t)
        files.append(name)
    payload = {
        "burn_in": sample.burn_in,
        "forcing": sample.forcing_id,
        "seeds": sample.seeds,
        "radius": sample.radius,
        "drift": sample.drift,
        "stationary": sample.stationary,
        "source": sample.source,
        "times": sample.times,
        "files": files,
    }
    if extra:
        payload.update(extra)
    dump_json(out / "manifest.json", payload)
    return out
