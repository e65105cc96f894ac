"""Scalar monitors: norms, energy residuals, Dirichlet-type quotients.

Also hosts the two-solution backward-uniqueness experiment and the
log-Lipschitz ratios evaluated over sampled pairs of states.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.integrate import cumulative_simpson, cumulative_trapezoid

from .grid import SpectralField, inner, lebesgue_norm, sobolev_norm, stokes_apply
from .integrators import ForcingSpec, TimeGrid, Trajectory, iterate_cbf
from .operators import PhysParams, bilinear_B, damping_C

EPS = np.finfo(float).eps


class QuotientUndefined(ValueError):
    """Quotient requested for coincident (or numerically coincident) states."""


class DegenerateSeparation(RuntimeError):
    """Separation of two solutions reached exact floating-point zero."""


# --------------------------------------------------------------------------
# norms and energy budget


def field_norms(u: SpectralField, r: float) -> tuple[float, float, float]:
    """``(||u||_H, ||u||_V, ||u||_{L^(r+1)})``."""
    return sobolev_norm(u, 0), sobolev_norm(u, 1), lebesgue_norm(u, r + 1)


def _cumulative(y: np.ndarray, t: np.ndarray, quadrature: str) -> np.ndarray:
    if quadrature == "trapezoid" or len(t) < 3:
        return cumulative_trapezoid(y, t, initial=0.0)
    if quadrature == "simpson":
        return cumulative_simpson(y, x=t, initial=0.0)
    raise ValueError(f"unknown quadrature {quadrature!r}")


def energy_residual(
    trajectory: Trajectory,
    params: PhysParams | None = None,
    forcing: ForcingSpec | None = None,
    quadrature: str = "simpson",
    relative: bool = True,
) -> np.ndarray:
    """Cumulative defect of the energy equality along a run.

    ``R(t) = ||u(t)||^2 + 2 int (mu ||u||_V^2 + alpha ||u||^2 + beta ||u||_{L^(r+1)}^(r+1))
    - ||x||^2 - 2 int <f, u>``, divided by ``||x||^2`` when ``relative`` and
    ``x != 0``.

    The integrands come from the per-step budget recorded by the solver.
    Time integrals use composite Simpson quadrature by default; trapezoid
    quadrature is available but its own O(dt^2) error dominates the defect
    of the time stepper.

    Parameters
    ----------
    trajectory : Trajectory
        A deterministic run (the budget must cover every step).
    params : PhysParams, optional
        Defaults to the parameters stored on the trajectory.
    forcing : ForcingSpec, optional
        Unused when the budget already carries ``<f, u>``; kept for callers
        that build budgets by hand.
    """
    p = params or trajectory.params
    b = {k: np.asarray(v, dtype=float) for k, v in trajectory.budget.items()}
    t = b["t"]
    if len(t) == 0:
        raise ValueError("trajectory carries no energy budget")
    integrand = 2.0 * (p.mu * b["v2"] + p.alpha * b["h2"] + p.beta * b["lr"] - b["fu"])
    res = b["h2"] + _cumulative(integrand, t, quadrature) - b["h2"][0]
    if relative and b["h2"][0] > 0:
        res = res / b["h2"][0]
    return res


# --------------------------------------------------------------------------
# quotients


def _difference(u1: SpectralField, u2: SpectralField) -> tuple[SpectralField, float]:
    u = u1 - u2
    sep = sobolev_norm(u)
    floor = 1e3 * EPS * max(sobolev_norm(u1), sobolev_norm(u2))
    if sep == 0.0 or sep < floor:
        raise QuotientUndefined(f"separation {sep:.3e} below floor {floor:.3e}")
    return u, sep


def quotient_Lambda(u1: SpectralField, u2: SpectralField, params: PhysParams) -> float:
    """Dirichlet quotient ``<mu A u + alpha u + beta (C(u1) - C(u2)), u> / ||u||^2``, ``u = u1 - u2``."""
    u, sep = _difference(u1, u2)
    dC = damping_C(u1, params.r) - damping_C(u2, params.r)
    num = params.mu * sobolev_norm(u, 1) ** 2 + params.alpha * sep**2 + params.beta * inner(dC, u)
    return num / sep**2


def _linear_quotient(u1, u2, mu, shift) -> float:
    u, sep = _difference(u1, u2)
    return (mu * sobolev_norm(u, 1) ** 2 + shift * sep**2) / sep**2


def quotient_LambdaTilde(u1: SpectralField, u2: SpectralField, params: PhysParams) -> float:
    """``(mu ||u||_V^2 + alpha ||u||^2) / ||u||^2``."""
    return _linear_quotient(u1, u2, params.mu, params.alpha)


def quotient_LambdaHat(v1: SpectralField, v2: SpectralField, params: PhysParams) -> float:
    """``(mu ||v||_V^2 + (alpha + sigma^2/2) ||v||^2) / ||v||^2`` for the transformed system."""
    return _linear_quotient(v1, v2, params.mu, params.alpha + 0.5 * params.sigma**2)


def check_M0(M0: float, *states: SpectralField) -> None:
    worst = max(sobolev_norm(s) for s in states)
    if not M0 >= 4 * worst:
        raise ValueError(f"M0 = {M0:.6g} must be >= 4 * max ||u||_H = {4 * worst:.6g}")


def quotient_Qtilde(u1: SpectralField, u2: SpectralField, params: PhysParams, M0: float) -> float:
    """Log-Dirichlet quotient ``Lambda~ / log(M0^2 / ||u1 - u2||^2)``."""
    check_M0(M0, u1, u2)
    lt = quotient_LambdaTilde(u1, u2, params)
    sep = sobolev_norm(u1 - u2)
    return lt / math.log(M0**2 / sep**2)


def default_M0(norms) -> float:
    """``4 * max(norms)`` rounded up to the next power of two."""
    m = 4.0 * float(np.max(np.asarray(norms, dtype=float)))
    if m <= 0:
        return 1.0
    return float(2.0 ** math.ceil(math.log2(m)))


# --------------------------------------------------------------------------
# per-snapshot record and CSV


@dataclass
class DiagnosticsRecord:
    t: float
    H_norm: float
    V_norm: float
    Lr1_norm: float
    energy_residual: float = math.nan
    Lambda: float = math.nan
    LambdaTilde: float = math.nan
    LambdaHat: float = math.nan
    Qtilde: float = math.nan
    separation: float = math.nan


RECORD_FIELDS = tuple(f.name for f in fields(DiagnosticsRecord))


def records_from_trajectory(
    trajectory: Trajectory,
    quadrature: str = "simpson",
) -> list[DiagnosticsRecord]:
    """Single-solution records at every budget node (energy residual included)."""
    b = trajectory.budget
    res = energy_residual(trajectory, quadrature=quadrature)
    r = trajectory.params.r
    out = []
    for i, t in enumerate(b["t"]):
        out.append(
            DiagnosticsRecord(
                t=t,
                H_norm=math.sqrt(b["h2"][i]),
                V_norm=math.sqrt(b["v2"][i]),
                Lr1_norm=b["lr"][i] ** (1.0 / (r + 1)),
                energy_residual=float(res[i]),
            )
        )
    return out


def write_records_csv(records, path_or_buffer, comment: str | None = None) -> None:
    """CSV with a header row and one row per record, columns in field order.

    ``comment`` is written first as a ``# ...`` line (used for the manifest
    reference).  Floats use ``repr`` so files are byte-reproducible.
    """
    own = isinstance(path_or_buffer, (str, bytes)) or hasattr(path_or_buffer, "__fspath__")
    fh = open(path_or_buffer, "w", newline="") if own else path_or_buffer
    try:
        if comment is not None:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for rec in records:
            w.writerow([repr(float(getattr(rec, k))) for k in RECORD_FIELDS])
    finally:
        if own:
            fh.close()


def records_to_csv_string(records, comment: str | None = None) -> str:
    buf = io.StringIO()
    write_records_csv(records, buf, comment)
    return buf.getvalue()


# --------------------------------------------------------------------------
# two-solution experiment


@dataclass
class BackwardUniquenessReport:
    times: np.ndarray
    separation: np.ndarray
    Lambda: np.ndarray
    LambdaTilde: np.ndarray
    rate_fd: np.ndarray  # -(d/dt) log ||u|| by finite differences
    rate_formula: np.ndarray  # Lambda - <h(u), u> / ||u||^2
    discrepancy: np.ndarray  # relative difference of the two rates
    min_separation: float
    max_Lambda: float
    Lambda_bound: float  # fitted bound: 1.1 * max Lambda
    max_discrepancy: float
    degenerate: bool
    M0: float = math.nan
    records: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {
            "min_separation": self.min_separation,
            "max_Lambda": self.max_Lambda,
            "Lambda_bound": self.Lambda_bound,
            "max_discrepancy": self.max_discrepancy,
            "degenerate": self.degenerate,
            "M0": self.M0,
            "n_times": int(len(self.times)),
        }


def backward_uniqueness_experiment(
    x1: SpectralField,
    x2: SpectralField,
    tg: TimeGrid,
    params: PhysParams,
    forcing: ForcingSpec | None = None,
    M0: float | None = None,
    skip_edges: int = 2,
) -> BackwardUniquenessReport:
    """Co-evolve two solutions and monitor their difference ``u = u1 - u2``.

    At each node the rate ``-(d/dt) log ||u||`` is evaluated twice: by a
    second-order finite difference of ``log ||u||`` and from the identity
    ``Lambda - <h(u), u> / ||u||^2`` with ``h(u) = -(B(u1, u) + B(u, u2))``.
    The discrepancy is measured relative to ``max(|rate|, mu lambda_1)``
    and reported over interior nodes (``skip_edges`` nodes dropped at each
    end, where the difference stencil is one-sided).

    Raises
    ------
    ValueError
        If ``x1`` and ``x2`` coincide.
    DegenerateSeparation
        If the separation becomes exactly zero in floating point.
    """
    if sobolev_norm(x1 - x2) == 0.0:
        raise ValueError("initial data coincide; the experiment needs x1 != x2")
    g = x1.grid
    mu_l1 = params.mu * g.lambda1
    if M0 is None:
        M0 = default_M0([sobolev_norm(x1), sobolev_norm(x2)])
    # Q~ is reported only while M0 >= 4 max ||u_i(t)||_H holds along the run
    n = tg.n_steps + 1
    times = np.empty(n)
    sep = np.empty(n)
    lam = np.empty(n)
    lamt = np.empty(n)
    conv = np.empty(n)
    records = []
    it1 = iterate_cbf(x1, tg, params, forcing)
    it2 = iterate_cbf(x2, tg, params, forcing)
    for (i, t, u1), (_, _, u2) in zip(it1, it2):
        u = u1 - u2
        s = sobolev_norm(u)
        if s == 0.0:
            raise DegenerateSeparation(f"separation is exactly zero at t={t} (step {i}); under-resolved run")
        times[i], sep[i] = t, s
        try:
            lam[i] = quotient_Lambda(u1, u2, params)
            lamt[i] = quotient_LambdaTilde(u1, u2, params)
        except QuotientUndefined:
            lam[i] = lamt[i] = math.nan
        h = -(bilinear_B(u1, u) + bilinear_B(u, u2))
        conv[i] = inner(h, u) / s**2
        h1, v1, l1 = field_norms(u1, params.r)
        qt = lamt[i] / math.log(M0**2 / s**2) if M0 >= 4 * max(h1, sobolev_norm(u2)) else math.nan
        records.append(DiagnosticsRecord(t, h1, v1, l1, math.nan, lam[i], lamt[i], math.nan, qt, s))
    rate_formula = lam - conv
    rate_fd = -np.gradient(np.log(sep), times, edge_order=2)
    disc = np.abs(rate_fd - rate_formula) / np.maximum(np.abs(rate_formula), mu_l1)
    interior = slice(skip_edges, n - skip_edges) if n > 2 * skip_edges else slice(None)
    max_lam = float(np.nanmax(lam))
    return BackwardUniquenessReport(
        times=times,
        separation=sep,
        Lambda=lam,
        LambdaTilde=lamt,
        rate_fd=rate_fd,
        rate_formula=rate_formula,
        discrepancy=disc,
        min_separation=float(np.min(sep)),
        max_Lambda=max_lam,
        Lambda_bound=1.1 * max_lam,
        max_discrepancy=float(np.max(disc[interior])),
        degenerate=False,
        M0=float(M0),
        records=records,
    )


# --------------------------------------------------------------------------
# log-Lipschitz ratios


@dataclass
class LogLipschitzReport:
    M0: float
    M0_hat: float
    M0_tilde: float
    ratio_360: float
    ratio_3p63: float
    ratio_unlogged: float
    argmax_360: int
    argmax_3p63: int
    per_pair_360: np.ndarray
    per_pair_3p63: np.ndarray
    per_pair_unlogged: np.ndarray
    C1_fitted: float
    chain_holds: bool
    n_pairs: int

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("per_pair_360", "per_pair_3p63", "per_pair_unlogged"):
            d[k] = [float(v) for v in d[k]]
        return d


def log_lipschitz_ratios(
    pairs,
    M0: float | None = None,
    M0_hat: float | None = None,
) -> LogLipschitzReport:
    """Log-Lipschitz ratios over sampled pairs of states.

    ``ratio_360 = ||w||_V^2 / (||w||^2 log(M0^2 / ||w||^2))`` and
    ``ratio_3p63 = ||A w|| / (||w|| log(M0_hat^2 / ||w||^2))`` with
    ``w = u1 - u2``.  ``ratio_unlogged = ||w||_V^2 / ||w||^2`` is reported
    without any claim.  ``C1_fitted`` is the sup over pairs of
    ``||A w||^2 / (||A^(1/2) w||^2 log(M0_tilde^2 / ||A^(1/2) w||^2))``;
    ``chain_holds`` records that the composed bound
    ``||A w||^2 <= C0 C1 ||w||^2 log(M0^2/||w||^2) log(M0_tilde^2 / (lambda_1 ||w||^2))``
    is satisfied on every pair with the fitted constants.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one pair")
    g = pairs[0][0].grid
    lam1 = g.lambda1
    hn = [sobolev_norm(u) for p in pairs for u in p]
    vn = [sobolev_norm(u, 1) for p in pairs for u in p]
    if M0 is None:
        M0 = default_M0(hn)
    M0_tilde = default_M0(vn)
    if M0_hat is None:
        M0_hat = max(M0, M0_tilde / math.sqrt(lam1), M0_tilde)
        M0_hat = float(2.0 ** math.ceil(math.log2(M0_hat)))
    if M0 < 4 * max(hn):
        raise ValueError(f"M0 = {M0} below 4 * sup ||x||_H = {4 * max(hn)}")
    if M0_hat < 4 * max(vn):
        raise ValueError(f"M0_hat = {M0_hat} below 4 * sup ||A^(1/2) x||_H = {4 * max(vn)}")
    r360, r363, unl, c1, logs0, logst, wh2, aw2 = ([] for _ in range(8))
    for u1, u2 in pairs:
        w = u1 - u2
        h = sobolev_norm(w)
        if h == 0:
            raise ValueError("pairs must be distinct")
        v = sobolev_norm(w, 1)
        a = sobolev_norm(stokes_apply(w))
        l0 = math.log(M0**2 / h**2)
        r360.append(v**2 / (h**2 * l0))
        r363.append(a / (h * math.log(M0_hat**2 / h**2)))
        unl.append(v**2 / h**2)
        c1.append(a**2 / (v**2 * math.log(M0_tilde**2 / v**2)) if v > 0 else 0.0)
        logs0.append(l0)
        logst.append(math.log(M0_tilde**2 / (lam1 * h**2)))
        wh2.append(h**2)
        aw2.append(a**2)
    r360, r363, unl = map(np.asarray, (r360, r363, unl))
    C0, C1 = float(np.max(r360)), float(np.max(c1))
    bound = C0 * C1 * np.asarray(wh2) * np.asarray(logs0) * np.asarray(logst)
    chain = bool(np.all(np.asarray(aw2) <= bound * (1 + 1e-12)))
    return LogLipschitzReport(
        M0=float(M0),
        M0_hat=float(M0_hat),
        M0_tilde=float(M0_tilde),
        ratio_360=C0,
        ratio_3p63=float(np.max(r363)),
        ratio_unlogged=float(np.max(unl)),
        argmax_360=int(np.argmax(r360)),
        argmax_3p63=int(np.argmax(r363)),
        per_pair_360=r360,
        per_pair_3p63=r363,
        per_pair_unlogged=unl,
        C1_fitted=C1,
        chain_holds=chain,
        n_pairs=len(pairs),
    )


# --------------------------------------------------------------------------
# pathwise energy bound for the transformed stochastic system


@dataclass
class StochasticEnergyBound:
    times: np.ndarray
    lhs: np.ndarray
    K_tilde: float
    holds: bool
    margin: float  # min over t > t0 of K_tilde - lhs
    two_mu_gap: np.ndarray  # lhs with 2 mu in the dissipation term, minus K_tilde


def dual_norm_sq(f: SpectralField) -> float:
    """``||f||_{V'}^2 = ||A^(-1/2) f||^2``."""
    g = f.grid
    p = np.sum(np.abs(f.coeffs) ** 2, axis=0)
    nz = g.k2 > 0
    return float(g.volume * np.sum(p[nz] / g.k2[nz]))


def stochastic_energy_bound(
    vtraj: Trajectory,
    z: np.ndarray,
    params: PhysParams,
    forcing: ForcingSpec | None = None,
    quadrature: str = "simpson",
) -> StochasticEnergyBound:
    """Evaluate the pathwise energy bound along a transformed run.

    ``LHS(t) = ||v(t)||^2 + mu int ||v||_V^2 + 2 (alpha + sigma^2/2) int ||v||^2
    + 2 beta int z^(1-r) ||v||_{L^(r+1)}^(r+1)`` against
    ``K~ = ||x||^2 + (1/mu) sup z^2 int_0^T ||f||_{V'}^2``.  The dissipation
    coefficient ``mu`` (rather than ``2 mu``) is what survives absorbing the
    forcing term by Young's inequality; ``two_mu_gap`` reports the
    variant with ``2 mu`` for comparison.
    """
    forcing = forcing or ForcingSpec.zero()
    b = {k: np.asarray(v, dtype=float) for k, v in vtraj.budget.items()}
    t = b["t"]
    z = np.asarray(z, dtype=float)
    if len(z) != len(t):
        raise ValueError("z must be sampled at the budget nodes")
    g = vtraj.grid
    a_eff = params.alpha + 0.5 * params.sigma**2
    base = 2 * a_eff * b["h2"] + 2 * params.beta * b["damp_w"] * b["lr"]
    visc = _cumulative(b["v2"], t, quadrature)
    rest = _cumulative(base, t, quadrature)
    lhs = b["h2"] + params.mu * visc + rest
    if forcing.is_zero:
        fint = 0.0
    else:
        fv = np.array([dual_norm_sq(forcing.at(g, float(s))) for s in t])
        fint = float(_cumulative(fv, t, quadrature)[-1])
    K = b["h2"][0] + float(np.max(z**2)) * fint / params.mu
    two_mu_gap = lhs + params.mu * visc - K
    return StochasticEnergyBound(
        times=t,
        lhs=lhs,
        K_tilde=K,
        holds=bool(np.all(lhs <= K)),
        margin=float(np.min((K - lhs)[1:])) if len(t) > 1 else 0.0,
        two_mu_gap=two_mu_gap,
    )
