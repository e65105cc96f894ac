"""Lagrangian particle paths ``X' = u(X, t)`` on the torus.

Velocities are evaluated by direct summation of the Fourier series at the
particle positions, which is exact for the band-limited solver fields and
free of interpolation artefacts.  Time stepping is classical RK4.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from .grid import Grid, SpectralField, sobolev_norm
from .integrators import ForcingSpec, TimeGrid, Trajectory, iterate_cbf
from .operators import PhysParams

MERGE_TOL = 1e-13  # pairs closer than MERGE_TOL * L count as merged


@dataclass
class ParticleSet:
    positions: np.ndarray  # (P, d), reduced mod L
    L: float = 1.0
    ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.positions = np.mod(np.atleast_2d(np.asarray(self.positions, dtype=float)), self.L)
        if self.ids is None:
            self.ids = np.arange(len(self.positions))
        self.ids = np.asarray(self.ids)
        if len(self.ids) != len(self.positions):
            raise ValueError("ids and positions differ in length")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def d(self) -> int:
        return self.positions.shape[1]


@dataclass
class ParticleTrajectory:
    times: np.ndarray
    positions: np.ndarray  # (n_times, P, d), reduced mod L
    ids: np.ndarray
    L: float

    def particle(self, p: int) -> np.ndarray:
        return self.positions[:, p, :]


# --------------------------------------------------------------------------
# velocity evaluation


def _phases(grid: Grid, x: np.ndarray, kmax: int | None) -> list[np.ndarray]:
    k1 = np.fft.fftfreq(grid.N, 1.0 / grid.N)
    keep = np.ones(grid.N, dtype=bool) if kmax is None else np.abs(k1) <= kmax
    kap = 2.0 * np.pi * k1 / grid.L
    return [np.where(keep, np.exp(1j * np.outer(x[:, j], kap)), 0.0) for j in range(grid.d)]


def eval_velocity(u: SpectralField, x, kmax: int | None = None) -> np.ndarray:
    """Evaluate ``u`` at arbitrary points by summing its Fourier series.

    Parameters
    ----------
    u : SpectralField
    x : array_like, shape (d,) or (P, d)
    kmax : int, optional
        Approximate fast path: keep only modes with ``|k_j| <= kmax``.

    Returns
    -------
    ndarray of shape (d,) or (P, d)
    """
    g = u.grid
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    ph = _phases(g, pts, kmax)
    if g.d == 2:
        val = np.einsum("ckl,pk,pl->pc", u.coeffs, ph[0], ph[1], optimize=True)
    else:
        val = np.einsum("cklm,pk,pl,pm->pc", u.coeffs, ph[0], ph[1], ph[2], optimize=True)
    out = val.real
    return out[0] if single else out


def _velocity_source(velocity, L: float) -> Callable[[float, np.ndarray], np.ndarray]:
    """Normalise a Trajectory, SpectralField or callable ``(t, X) -> V`` to a callable."""
    if callable(velocity) and not isinstance(velocity, (Trajectory, SpectralField)):
        return velocity
    if isinstance(velocity, SpectralField):
        return lambda t, X: eval_velocity(velocity, X)
    if isinstance(velocity, Trajectory):
        return lambda t, X: eval_velocity(velocity.at(t), X)
    raise TypeError(f"unsupported velocity source {type(velocity).__name__}")


# --------------------------------------------------------------------------
# advection


def rk4_step(f, t: float, X: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(t, X)
    k2 = f(t + 0.5 * dt, X + 0.5 * dt * k1)
    k3 = f(t + 0.5 * dt, X + 0.5 * dt * k2)
    k4 = f(t + dt, X + dt * k3)
    return X + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def advect(particles: ParticleSet, velocity, tg: TimeGrid) -> ParticleTrajectory:
    """RK4 advection over ``tg``.

    ``velocity`` is a callable ``(t, X) -> V``, a steady SpectralField or a
    solver Trajectory (linearly interpolated in time between snapshots;
    this limits the time accuracy to second order for unsteady fields).
    """
    f = _velocity_source(velocity, particles.L)
    L = particles.L
    X = particles.positions.copy()
    out = np.empty((tg.n_steps + 1,) + X.shape)
    out[0] = X
    for i, t in enumerate(tg.times[:-1]):
        X = np.mod(rk4_step(f, float(t), X, tg.dt), L)
        out[i + 1] = X
    return ParticleTrajectory(tg.times, out, particles.ids.copy(), L)


def advect_with_solver(
    particles: ParticleSet,
    initial: SpectralField,
    tg: TimeGrid,
    params: PhysParams,
    forcing: ForcingSpec | None = None,
    sobolev_s: float | None = None,
    unsafe_regime: bool = False,
) -> tuple[ParticleTrajectory, np.ndarray]:
    """Advance the flow and the particles together, without storing velocity fields.

    Within each step the velocity is the linear interpolant of the two
    node states.  Returns the particle trajectory and the per-node series
    ``||u(t)||_{H^s}`` (``s = d/2 + 1.5`` by default).
    """
    g = initial.grid
    s = g.d / 2 + 1.5 if sobolev_s is None else sobolev_s
    L = particles.L
    X = particles.positions.copy()
    out = np.empty((tg.n_steps + 1,) + X.shape)
    out[0] = X
    hs = np.empty(tg.n_steps + 1)
    prev = None
    for i, t, u in iterate_cbf(initial, tg, params, forcing, unsafe_regime=unsafe_regime):
        hs[i] = sobolev_norm(u, s)
        if prev is not None:
            ua, ta = prev
            mid = SpectralField(g, 0.5 * (ua.coeffs + u.coeffs))

            def f(tt, XX, ua=ua, ta=ta, u=u, mid=mid):
                w = (tt - ta) / tg.dt
                if w <= 1e-12:
                    return eval_velocity(ua, XX)
                if abs(w - 0.5) <= 1e-12:
                    return eval_velocity(mid, XX)
                if w >= 1 - 1e-12:
                    return eval_velocity(u, XX)
                return eval_velocity(ua * (1 - w) + u * w, XX)

            X = np.mod(rk4_step(f, ta, X, tg.dt), L)
            out[i] = X
        prev = (u, t)
    return ParticleTrajectory(tg.times, out, particles.ids.copy(), L), hs


# --------------------------------------------------------------------------
# separation


def torus_delta(a: np.ndarray, b: np.ndarray, L: float) -> np.ndarray:
    """Shortest displacement ``a - b`` over all lattice shifts (componentwise in ``[-L/2, L/2)``)."""
    return np.mod(np.asarray(a) - np.asarray(b) + 0.5 * L, L) - 0.5 * L


def torus_distance(a, b, L: float) -> np.ndarray:
    return np.sqrt(np.sum(torus_delta(a, b, L) ** 2, axis=-1))


def rigorous_gradient_constant(grid: Grid, s: float) -> float:
    """``C_s`` with ``sup |grad u| <= C_s ||u||_{H^s}`` for retained-mode fields, ``s > d/2 + 1``.

    From ``|grad u(x)| <= sum_k |kappa| |c_k|`` and Cauchy-Schwarz:
    ``C_s = (sum_{k != 0, retained} |kappa|^(2 - 2s))^(1/2) / L^(d/2)``.
    """
    k2 = grid.k2[grid.dealias_mask & (grid.k2 > 0)]
    return float(np.sqrt(np.sum(k2 ** (1.0 - s))) / grid.L ** (grid.d / 2))


@dataclass
class SeparationReport:
    times: np.ndarray
    distance: np.ndarray  # |W(t)| in the torus metric
    transformed: np.ndarray  # (-log |W|)^(1/2); nan once merged
    merged: np.ndarray  # bool per time
    merged_flag: bool
    log_change: np.ndarray  # |log |W(t)| - log |W(t0)||
    integral: np.ndarray | None = None  # int_{t0}^t ||u||_{H^s}
    C_rigorous: float | None = None
    C_fitted: float | None = None
    bound_holds: bool | None = None
    modulus: float | None = None  # empirical log-Lipschitz modulus / ||u||_{H^(d/2+1)}
    notes: list = field(default_factory=list)


def separation_monitor(
    Xa: np.ndarray,
    Xb: np.ndarray,
    times: np.ndarray,
    L: float,
    hs_norms: np.ndarray | None = None,
    grid: Grid | None = None,
    s: float | None = None,
) -> SeparationReport:
    """Separation series of two particle paths on the same time grid.

    With ``hs_norms`` (``||u(t)||_{H^s}`` at the nodes) and ``grid`` the
    discrete log-separation bound
    ``|log|W(t)| - log|W(t0)|| <= C int_{t0}^t ||u||_{H^s}`` is checked with
    the rigorous constant of :func:`rigorous_gradient_constant`; the
    smallest constant that works on the data is reported as ``C_fitted``.
    """
    Xa, Xb = np.asarray(Xa), np.asarray(Xb)
    if Xa.shape != Xb.shape or len(times) != len(Xa):
        raise ValueError("paths must share the time grid")
    dist = torus_distance(Xa, Xb, L)
    merged = dist < MERGE_TOL * L
    with np.errstate(divide="ignore", invalid="ignore"):
        logw = np.log(dist)
        trans = np.sqrt(-logw)
    trans = np.where(merged | (dist >= 1.0), np.nan, trans)
    notes = []
    if merged.any():
        first = int(np.argmax(merged))
        trans[first:] = np.nan
        notes.append(f"pair merged numerically at t={times[first]:.6g}")
    change = np.abs(logw - logw[0]) if not merged[0] else np.full(len(dist), np.nan)
    rep = SeparationReport(times, dist, trans, merged, bool(merged.any()), change, notes=notes)
    if hs_norms is not None and grid is not None and not merged.any():
        s = grid.d / 2 + 1.5 if s is None else s
        integ = cumulative_trapezoid(np.asarray(hs_norms), times, initial=0.0)
        C = rigorous_gradient_constant(grid, s)
        pos = integ > 0
        rep.integral = integ
        rep.C_rigorous = C
        rep.C_fitted = float(np.max(change[pos] / integ[pos])) if pos.any() else 0.0
        rep.bound_holds = bool(np.all(change <= C * integ + 1e-12))
    return rep


def log_lipschitz_modulus(u: SpectralField, X: np.ndarray, Y: np.ndarray) -> float:
    """``sup |u(X) - u(Y)| / (|X - Y| (-log |X - Y|)^(1/2))`` over given point pairs,
    divided by ``||u||_{H^(d/2+1)}``; pairs with ``|X - Y| >= 1`` are skipped."""
    g = u.grid
    dist = torus_distance(X, Y, g.L)
    ok = (dist > 0) & (dist < 1)
    if not ok.any():
        return math.nan
    du = np.linalg.norm(eval_velocity(u, X[ok]) - eval_velocity(u, Y[ok]), axis=-1)
    ratio = du / (dist[ok] * np.sqrt(-np.log(dist[ok])))
    nrm = sobolev_norm(u, g.d / 2 + 1)
    return float(np.max(ratio) / nrm) if nrm > 0 else 0.0


def flow_jacobian_proxy(center, h: float, velocity, tg: TimeGrid, L: float = 1.0) -> np.ndarray:
    """Determinant of the finite-difference flow-map Jacobian from ``d + 1`` particles.

    Stays close to 1 for solenoidal velocities (volume preservation),
    up to ``O(h)`` and time-stepping errors.
    """
    center = np.asarray(center, dtype=float)
    d = len(center)
    pts = np.vstack([center] + [center + h * np.eye(d)[j] for j in range(d)])
    traj = advect(ParticleSet(pts, L), velocity, tg)
    det = np.empty(len(traj.times))
    for i in range(len(traj.times)):
        P = traj.positions[i]
        J = np.stack([torus_delta(P[j + 1], P[0], L) for j in range(d)], axis=1) / h
        det[i] = np.linalg.det(J)
    return det


# --------------------------------------------------------------------------
# continuity with respect to Eulerian data


@dataclass
class ContinuityReport:
    ns: list
    data_distance: list  # ||x_n - x||_H
    deviation: list  # max_t max_p |X_n(t) - X(t)|
    monotone: bool
    hypothesis_series: dict = field(default_factory=dict)  # per n: int t ||u||^2_{H^(d/2+1)}

    def to_json(self) -> dict:
        return {
            "ns": list(self.ns),
            "data_distance": [float(v) for v in self.data_distance],
            "deviation": [float(v) for v in self.deviation],
            "monotone": self.monotone,
            "hypothesis_series": {str(k): float(v) for k, v in self.hypothesis_series.items()},
        }


def continuity_experiment(
    x: SpectralField,
    x_sequence: list,
    X0,
    tg: TimeGrid,
    params: PhysParams,
    forcing: ForcingSpec | None = None,
    labels: list | None = None,
    noise_floor: float = 1e-12,
    unsafe_regime: bool = False,
) -> ContinuityReport:
    """Particle-path deviations driven by approximations ``x_n`` of the initial data ``x``.

    For each ``x_n`` the flow and the particles ``X0`` are integrated and
    ``max_t max_p |X_n(t) - X(t)|`` is recorded.  ``monotone`` checks the
    deviations are non-increasing along the sequence, up to ``noise_floor``.
    """
    params.check_regime(x.grid.d, unsafe_regime)
    g = x.grid
    ps = ParticleSet(np.atleast_2d(X0), g.L)
    ref, _ = advect_with_solver(ps, x, tg, params, forcing, unsafe_regime=unsafe_regime)
    labels = list(labels) if labels is not None else list(range(len(x_sequence)))
    dists, devs, hyp = [], [], {}
    s_crit = g.d / 2 + 1
    for lab, xn in zip(labels, x_sequence):
        tr, hs = advect_with_solver(ps, xn, tg, params, forcing, sobolev_s=s_crit, unsafe_regime=unsafe_regime)
        dev = float(np.max(torus_distance(tr.positions, ref.positions, g.L)))
        dists.append(sobolev_norm(xn - x))
        devs.append(dev)
        # t ||u||^2_{H^(d/2+1)} integrated over the run (hypothesis class of the continuity theorem)
        hyp[lab] = float(trapezoid(tg.times * hs**2, tg.times))
    mono = bool(all(devs[i + 1] <= devs[i] + noise_floor for i in range(len(devs) - 1)))
    return ContinuityReport(labels, dists, devs, mono, hyp)
