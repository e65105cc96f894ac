"""Time integration of the projected CBF system and its companions.

All solvers share one integrating-factor scheme: the linear part
``mu A + alpha`` is integrated exactly per mode and the remaining terms are
advanced with the explicit trapezoidal (Heun) RK2 rule in the transformed
variable.  Applied backward in time to the dual system the same step is the
exact transpose of the tangent-linear step, so the discrete duality pairing
holds to round-off.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .grid import (
    Grid,
    SpectralField,
    finish_nonlinear,
    gradient_phys,
    hermitian_repair,
    inner_coeffs,
    inv,
    leray_coeffs,
)
from .operators import PhysParams, c1_pointwise, damping_pointwise

Hook = Callable[[int, float, SpectralField], None]


class BlowUpError(RuntimeError):
    """Non-finite coefficients; carries the step index and partial trajectory."""

    def __init__(self, message: str, step: int, trajectory: "Trajectory | None" = None):
        super().__init__(message)
        self.step = step
        self.trajectory = trajectory


class StabilityError(BlowUpError):
    """Explicit damping guard still violated after the allowed step halvings."""


class BaseTrajectoryError(ValueError):
    """Base trajectory cannot support the requested linearised integration."""


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    dt: float

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.T > self.t0:
            raise ValueError(f"need T > t0, got t0={self.t0}, T={self.T}")
        n = (self.T - self.t0) / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(f"(T - t0)/dt = {n} is not an integer")

    @property
    def n_steps(self) -> int:
        return int(round((self.T - self.t0) / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, self.dt / factor)


@dataclass
class ForcingSpec:
    """Body force ``f`` (already Leray-projected and zero-mean).

    ``kind`` is ``"zero"``, ``"steady_field"`` or ``"time_varying"``.  For the
    time-varying kind ``payload`` maps ``t`` to a field and ``f_t``
    optionally gives its time derivative.  ``hypothesis`` records the
    regularity class the run claims (e.g. ``"W^{1,2}(0,T;H)"``).
    """

    kind: str = "zero"
    payload: SpectralField | Callable[[float], SpectralField] | None = None
    f_t: Callable[[float], SpectralField] | None = None
    hypothesis: str = "L^2(0,T;H)"

    def __post_init__(self) -> None:
        if self.kind not in ("zero", "steady_field", "time_varying"):
            raise ValueError(f"unknown forcing kind {self.kind!r}")
        if self.kind == "steady_field":
            if not isinstance(self.payload, SpectralField):
                raise ValueError("steady forcing needs a SpectralField payload")
            g = self.payload.grid
            c = leray_coeffs(g, self.payload.coeffs * g.dealias_mask)
            self.payload = SpectralField(g, hermitian_repair(c, g.axes))
        if self.kind == "time_varying" and not callable(self.payload):
            raise ValueError("time-varying forcing needs a callable payload")

    @classmethod
    def zero(cls) -> "ForcingSpec":
        return cls("zero")

    @classmethod
    def steady(cls, f: SpectralField, hypothesis: str = "W^{1,2}(0,T;H)") -> "ForcingSpec":
        return cls("steady_field", f, hypothesis=hypothesis)

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero"

    def coeffs(self, grid: Grid, t: float) -> np.ndarray | None:
        if self.kind == "zero":
            return None
        if self.kind == "steady_field":
            return self.payload.coeffs
        f = self.payload(t)
        return leray_coeffs(grid, f.coeffs * grid.dealias_mask)

    def at(self, grid: Grid, t: float) -> SpectralField:
        c = self.coeffs(grid, t)
        return grid.zeros() if c is None else SpectralField(grid, c)


@dataclass
class BrownianPath:
    """Seeded scalar Wiener path on a time grid, with ``z = exp(-sigma W)``."""

    seed: int
    times: np.ndarray
    W: np.ndarray
    sigma: float

    @classmethod
    def sample(cls, seed: int, tg: TimeGrid, sigma: float) -> "BrownianPath":
        rng = np.random.default_rng(seed)
        dW = rng.standard_normal(tg.n_steps) * math.sqrt(tg.dt)
        W = np.concatenate([[0.0], np.cumsum(dW)])
        return cls(seed, tg.times, W, sigma)

    @property
    def z(self) -> np.ndarray:
        return np.exp(-self.sigma * self.W)

    def check_range(self) -> None:
        worst = float(np.max(np.abs(self.sigma * self.W)))
        if worst > 700:
            i = int(np.argmax(np.abs(self.sigma * self.W)))
            raise BlowUpError(
                f"z(t) = exp(-sigma W) under/overflows: |sigma W| = {worst:.1f} at t={self.times[i]:.6g}",
                i,
            )


class Trajectory:
    """Snapshots of a single run plus per-step energy-budget scalars.

    ``budget`` holds, for every step node, ``t``, ``h2 = ||u||_H^2``,
    ``v2 = ||u||_V^2``, ``lr = ||u||_{L^(r+1)}^(r+1)`` and ``fu = <f, u>``
    (weighted by ``z`` factors for pathwise runs, see
    :func:`solve_stochastic`).
    """

    def __init__(self, grid: Grid, params: PhysParams, dt: float, stride: int = 1):
        self.grid = grid
        self.params = params
        self.dt = dt
        self.stride = stride
        self.times: list[float] = []
        self.snapshots: list[np.ndarray] = []
        self.budget: dict[str, list[float]] = {k: [] for k in ("t", "h2", "v2", "lr", "fu", "damp_w")}
        self.completed = False
        self.repair_max = 0.0
        self.halvings = 0

    def __len__(self) -> int:
        return len(self.snapshots)

    def append(self, t: float, c: np.ndarray) -> None:
        self.times.append(float(t))
        self.snapshots.append(c.copy())

    def field(self, i: int) -> SpectralField:
        return SpectralField(self.grid, self.snapshots[i])

    @property
    def final(self) -> SpectralField:
        return self.field(-1)

    def max_gap(self) -> float:
        return float(np.max(np.diff(self.times))) if len(self.times) > 1 else math.inf

    def at(self, t: float) -> SpectralField:
        """Linear interpolation between stored snapshots."""
        times = np.asarray(self.times)
        tol = 1e-9 * max(1.0, abs(t))
        if t < times[0] - tol or t > times[-1] + tol:
            raise BaseTrajectoryError(f"t={t} outside stored range [{times[0]}, {times[-1]}]")
        j = int(np.searchsorted(times, t - tol))
        if j < len(times) and abs(times[j] - t) <= tol:
            return self.field(j)
        j = min(max(j, 1), len(times) - 1)
        t0, t1 = times[j - 1], times[j]
        w = (t - t0) / (t1 - t0)
        return SpectralField(self.grid, (1 - w) * self.snapshots[j - 1] + w * self.snapshots[j])

    def budget_array(self, key: str) -> np.ndarray:
        return np.asarray(self.budget[key])


# --------------------------------------------------------------------------
# core kernels


def _decay(grid: Grid, mu: float, alpha: float) -> np.ndarray:
    return mu * grid.k2 + alpha


def _nonlinear_rhs(
    grid: Grid,
    c: np.ndarray,
    r: float,
    conv_scale: float,
    damp_scale: float,
    f: np.ndarray | None,
    force_scale: float,
) -> np.ndarray:
    """``-conv_scale B(u) - damp_scale C(u) + force_scale f`` from coefficients."""
    up = inv(grid, c)
    grad = gradient_phys(grid, c)
    conv = np.einsum("i...,ij...->j...", up, grad)
    vals = -(conv_scale * conv) - damp_scale * damping_pointwise(up, r)
    out = finish_nonlinear(grid, vals)
    if f is not None:
        out = out + force_scale * f
    return out


def heun_if(c: np.ndarray, dt: float, E: np.ndarray, rhs_start, rhs_end) -> np.ndarray:
    """One integrating-factor Heun step of ``w' = -D w + N(w)`` with ``E = exp(-D dt)``."""
    k1 = rhs_start(c)
    pred = E * (c + dt * k1)
    k2 = rhs_end(pred)
    return E * (c + 0.5 * dt * k1) + 0.5 * dt * k2


def _repair(grid: Grid, c: np.ndarray) -> tuple[np.ndarray, float]:
    out = leray_coeffs(grid, c * grid.dealias_mask)
    out = hermitian_repair(out, grid.axes)
    nrm = np.linalg.norm(c)
    rel = float(np.linalg.norm(out - c) / nrm) if nrm > 0 else 0.0
    return out, rel


def _guard_value(grid: Grid, c: np.ndarray, r: float, damp_scale: float, dt: float) -> float:
    if r == 1:
        return dt * damp_scale
    umax = float(np.max(np.sqrt(np.sum(inv(grid, c) ** 2, axis=0))))
    return dt * damp_scale * umax ** (r - 1)


class _Stepper:
    """Nonlinear CBF step with the damping guard and automatic halving."""

    GUARD = 0.5

    def __init__(self, grid: Grid, params: PhysParams, alpha_eff: float, max_halvings: int = 8):
        self.grid = grid
        self.params = params
        self.decay = _decay(grid, params.mu, alpha_eff)
        self.max_halvings = max_halvings
        self._E: dict[float, np.ndarray] = {}
        self.halvings = 0

    def E(self, dt: float) -> np.ndarray:
        if dt not in self._E:
            self._E[dt] = np.exp(-self.decay * dt)
        return self._E[dt]

    def step(self, c, t, dt, forcing, scales, step_index, depth=0):
        conv_scale, damp_scale, force_scale = scales
        g, r = self.grid, self.params.r
        if _guard_value(g, c, r, damp_scale, dt) >= self.GUARD:
            if depth >= self.max_halvings:
                raise StabilityError(
                    f"damping guard dt*beta*max|u|^(r-1) < {self.GUARD} still violated after "
                    f"{depth} halvings at step {step_index} (dt={dt:.3e})",
                    step_index,
                )
            self.halvings += 1
            half = 0.5 * dt
            c = self.step(c, t, half, forcing, scales, step_index, depth + 1)
            return self.step(c, t + half, half, forcing, scales, step_index, depth + 1)
        f0 = forcing.coeffs(g, t)
        f1 = f0 if forcing.kind != "time_varying" else forcing.coeffs(g, t + dt)
        out = heun_if(
            c,
            dt,
            self.E(dt),
            lambda w: _nonlinear_rhs(g, w, r, conv_scale, damp_scale, f0, force_scale),
            lambda w: _nonlinear_rhs(g, w, r, conv_scale, damp_scale, f1, force_scale),
        )
        if not np.all(np.isfinite(out)):
            raise BlowUpError(f"non-finite coefficients at step {step_index}", step_index)
        return out


def _budget(grid: Grid, c: np.ndarray, r: float, f: np.ndarray | None) -> tuple[float, float, float, float]:
    vol = grid.volume
    p = np.sum(np.abs(c) ** 2, axis=0)
    h2 = vol * float(np.sum(p))
    v2 = vol * float(np.sum(grid.k2 * p))
    mag = np.sqrt(np.sum(inv(grid, c) ** 2, axis=0))
    lr = float(np.sum(mag ** (r + 1)) * grid.cell_volume)
    fu = inner_coeffs(grid, f, c) if f is not None else 0.0
    return h2, v2, lr, fu


def _prepare_initial(x: SpectralField) -> np.ndarray:
    g = x.grid
    c, _ = _repair(g, x.coeffs)
    return c


def _run(
    x: SpectralField,
    tg: TimeGrid,
    params: PhysParams,
    forcing: ForcingSpec,
    hooks: Iterable[Hook],
    stride: int,
    alpha_eff: float,
    scales_at: Callable[[int], tuple[float, float, float]],
    max_halvings: int,
    unsafe_regime: bool = False,
) -> Trajectory:
    g = x.grid
    params.check_regime(g.d, unsafe_regime)
    hooks = list(hooks)
    stepper = _Stepper(g, params, alpha_eff, max_halvings)
    traj = Trajectory(g, params, tg.dt, stride)
    c = _prepare_initial(x)
    times = tg.times
    n = tg.n_steps

    def record(i: int, c: np.ndarray) -> None:
        t = float(times[i])
        s = scales_at(i)
        f = forcing.coeffs(g, t)
        h2, v2, lr, fu = _budget(g, c, params.r, f)
        b = traj.budget
        b["t"].append(t)
        b["h2"].append(h2)
        b["v2"].append(v2)
        b["lr"].append(lr)
        b["fu"].append(s[2] * fu)
        b["damp_w"].append(s[1] / params.beta)
        if i % stride == 0 or i == n:
            traj.append(t, c)
        if hooks:
            field_ = SpectralField(g, c)
            for h in hooks:
                h(i, t, field_)

    record(0, c)
    for i in range(n):
        try:
            c = stepper.step(c, float(times[i]), tg.dt, forcing, scales_at(i), i)
        except BlowUpError as exc:
            exc.trajectory = traj
            traj.halvings = stepper.halvings
            raise
        c, rel = _repair(g, c)
        traj.repair_max = max(traj.repair_max, rel)
        record(i + 1, c)
    traj.completed = True
    traj.halvings = stepper.halvings
    return traj


# --------------------------------------------------------------------------
# public solvers


def step_cbf(
    state: SpectralField,
    t: float,
    dt: float,
    params: PhysParams,
    forcing: ForcingSpec | None = None,
    max_halvings: int = 8,
) -> SpectralField:
    """Advance the projected CBF system by one step of size ``dt``."""
    forcing = forcing or ForcingSpec.zero()
    g = state.grid
    stepper = _Stepper(g, params, params.alpha, max_halvings)
    c = stepper.step(_prepare_initial(state), t, dt, forcing, (1.0, params.beta, 1.0), 0)
    c, _ = _repair(g, c)
    return SpectralField(g, c)


def solve_cbf(
    initial: SpectralField,
    tg: TimeGrid,
    params: PhysParams,
    forcing: ForcingSpec | None = None,
    hooks: Iterable[Hook] = (),
    stride: int = 1,
    max_halvings: int = 8,
    unsafe_regime: bool = False,
) -> Trajectory:
    """Integrate the deterministic system from ``tg.t0`` to ``tg.T``.

    Raises
    ------
    BlowUpError
        With the partial trajectory attached as ``exc.trajectory``.
    """
    forcing = forcing or ForcingSpec.zero()
    scales = (1.0, params.beta, 1.0)
    return _run(initial, tg, params, forcing, hooks, stride, params.alpha, lambda i: scales, max_halvings, unsafe_regime)


def iterate_cbf(
    initial: SpectralField,
    tg: TimeGrid,
    params: PhysParams,
    forcing: ForcingSpec | None = None,
    max_halvings: int = 8,
    unsafe_regime: bool = False,
):
    """Yield ``(i, t, u)`` at every node without storing the trajectory.

    Uses exactly the stepper of :func:`solve_cbf`, so the yielded states are
    bitwise identical to the snapshots of a stride-1 run.
    """
    forcing = forcing or ForcingSpec.zero()
    g = initial.grid
    params.check_regime(g.d, unsafe_regime)
    stepper = _Stepper(g, params, params.alpha, max_halvings)
    scales = (1.0, params.beta, 1.0)
    times = tg.times
    c = _prepare_initial(initial)
    yield 0, float(times[0]), SpectralField(g, c)
    for i in range(tg.n_steps):
        c = stepper.step(c, float(times[i]), tg.dt, forcing, scales, i)
        c, _ = _repair(g, c)
        yield i + 1, float(times[i + 1]), SpectralField(g, c)


def solve_stochastic(
    initial: SpectralField,
    tg: TimeGrid,
    params: PhysParams,
    forcing: ForcingSpec | None,
    path: BrownianPath,
    hooks: Iterable[Hook] = (),
    stride: int = 1,
    max_halvings: int = 8,
    unsafe_regime: bool = False,
) -> tuple[Trajectory, Trajectory]:
    """Pathwise solve of the transformed random system for ``v = z u``.

    ``z`` is frozen at its left node value within each step.  Returns the
    ``v`` trajectory and the recovered ``u = v / z`` snapshots.  In the ``v``
    budget ``fu`` holds ``z <f, v>`` and ``damp_w`` holds ``z^(1-r)``.
    """
    forcing = forcing or ForcingSpec.zero()
    if len(path.times) != tg.n_steps + 1 or not np.allclose(path.times, tg.times):
        raise ValueError("Brownian path is not sampled on the run's time grid")
    path.check_range()
    z = path.z
    r = params.r
    sig = params.sigma

    def scales_at(i: int) -> tuple[float, float, float]:
        zi = float(z[i])
        return (1.0 / zi, params.beta * zi ** (1.0 - r), zi)

    alpha_eff = params.alpha + 0.5 * sig * sig
    vtraj = _run(initial, tg, params, forcing, hooks, stride, alpha_eff, scales_at, max_halvings, unsafe_regime)
    utraj = Trajectory(vtraj.grid, params, tg.dt, stride)
    n = tg.n_steps
    nodes = [i for i in range(n + 1) if i % stride == 0 or i == n]
    for i, t, c in zip(nodes, vtraj.times, vtraj.snapshots):
        utraj.append(t, c / float(z[i]))
    utraj.completed = vtraj.completed
    return vtraj, utraj


# --------------------------------------------------------------------------
# linearised and dual systems


class _BaseAccess:
    """Physical base velocity and gradient at the nodes of a time grid."""

    def __init__(self, base: Trajectory, tg: TimeGrid, max_gap: float | None):
        times = np.asarray(base.times)
        tol = 1e-9 * max(1.0, abs(tg.T))
        if times[0] > tg.t0 + tol or times[-1] < tg.T - tol:
            raise BaseTrajectoryError(
                f"base covers [{times[0]}, {times[-1]}], run needs [{tg.t0}, {tg.T}]"
            )
        allowed = tg.dt if max_gap is None else max_gap
        if base.max_gap() > allowed * (1 + 1e-9):
            raise BaseTrajectoryError(
                f"base snapshot gap {base.max_gap():.3e} exceeds allowed {allowed:.3e}"
            )
        self.base = base
        self.grid = base.grid
        self.times = tg.times
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __call__(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        if i not in self._cache:
            if len(self._cache) > 3:
                self._cache.pop(next(iter(self._cache)))
            c = self.base.at(float(self.times[i])).coeffs
            self._cache[i] = (inv(self.grid, c), gradient_phys(self.grid, c))
        return self._cache[i]


def _tangent_rhs(grid: Grid, base_node, beta: float, r: float, v: np.ndarray) -> np.ndarray:
    """``-(B'(u) v + beta C'(u) v)``."""
    up, gu = base_node
    vp = inv(grid, v)
    gv = gradient_phys(grid, v)
    conv = np.einsum("i...,ij...->j...", up, gv) + np.einsum("i...,ij...->j...", vp, gu)
    return finish_nonlinear(grid, -(conv + beta * c1_pointwise(up, vp, r)))


def _adjoint_rhs(grid: Grid, base_node, beta: float, r: float, z: np.ndarray) -> np.ndarray:
    """``-((B'(u))^* z + beta C'(u) z)``."""
    up, gu = base_node
    zp = inv(grid, z)
    gz = gradient_phys(grid, z)
    conv = np.einsum("i...,ij...->j...", up, gz)
    transport = np.einsum("ij...,j...->i...", gu, zp)
    return finish_nonlinear(grid, -(transport - conv + beta * c1_pointwise(up, zp, r)))


def solve_linearized(
    base: Trajectory,
    y: SpectralField,
    tg: TimeGrid,
    params: PhysParams,
    max_gap: float | None = None,
) -> Trajectory:
    """Tangent-linear solve ``v' + mu A v + B'(u) v + alpha v + beta C'(u) v = 0``.

    The base ``u`` is read at the nodes of ``tg`` (linear interpolation when
    the base was stored with a stride; gaps above ``max_gap``, default
    ``tg.dt``, are rejected).
    """
    g = y.grid
    acc = _BaseAccess(base, tg, max_gap)
    E = np.exp(-_decay(g, params.mu, params.alpha) * tg.dt)
    beta, r = params.beta, params.r
    traj = Trajectory(g, params, tg.dt)
    traj.stride = 1
    c = _prepare_initial(y)
    traj.append(tg.t0, c)
    for i in range(tg.n_steps):
        a, b = acc(i), acc(i + 1)
        c = heun_if(
            c,
            tg.dt,
            E,
            lambda w: _tangent_rhs(g, a, beta, r, w),
            lambda w: _tangent_rhs(g, b, beta, r, w),
        )
        if not np.all(np.isfinite(c)):
            raise BlowUpError(f"non-finite tangent state at step {i}", i, traj)
        c, _ = _repair(g, c)
        traj.append(tg.times[i + 1], c)
    traj.completed = True
    return traj


def solve_adjoint(
    base: Trajectory,
    p: SpectralField,
    tg: TimeGrid,
    params: PhysParams,
    max_gap: float | None = None,
) -> Trajectory:
    """Backward dual solve ``-z' + mu A z + (B'(u))^* z + alpha z + beta C'(u) z = 0``, ``z(T) = p``.

    Integrated in reversed time ``s = T - t`` with the forward stepper.
    Snapshots are returned in increasing ``t`` order.
    """
    g = p.grid
    acc = _BaseAccess(base, tg, max_gap)
    E = np.exp(-_decay(g, params.mu, params.alpha) * tg.dt)
    beta, r = params.beta, params.r
    n = tg.n_steps
    c = _prepare_initial(p)
    states = [c]
    for i in range(n, 0, -1):
        a, b = acc(i), acc(i - 1)
        c = heun_if(
            c,
            tg.dt,
            E,
            lambda w: _adjoint_rhs(g, a, beta, r, w),
            lambda w: _adjoint_rhs(g, b, beta, r, w),
        )
        if not np.all(np.isfinite(c)):
            raise BlowUpError(f"non-finite adjoint state at step {i}", i)
        c, _ = _repair(g, c)
        states.append(c)
    traj = Trajectory(g, params, tg.dt)
    for t, s in zip(tg.times, reversed(states)):
        traj.append(t, s)
    traj.completed = True
    return traj


def heat_flow(y: SpectralField, t: float, params: PhysParams) -> SpectralField:
    """Exact ``exp(-(mu A + alpha) t) y``."""
    g = y.grid
    return SpectralField(g, np.exp(-_decay(g, params.mu, params.alpha) * t) * y.coeffs)
