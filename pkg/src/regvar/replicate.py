"""Model-free replication of vanilla payoffs.

The value function v solves the backward heat equation at volatility sigma;
lifted to the window space it depends on the path only through its endpoint,
so its derivative measure is a pure atom at 0 and the hedge ratio is
xi_s = v_x(s, X_s).  The representation

    f(X_T) = v(0, X_0) + int_0^T xi_s d-X_s

only uses the quadratic variation sigma^2 t of the model, never its law:
the report is built over a zoo of models sharing that variation so the
residual statistics can be compared across them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .grid_paths import Grid, ProcessSpec, SamplePath, ensemble
from .regcalc import (
    EpsSchedule,
    QVTarget,
    forward_integral_curve_eps,
    lagged_diff,
    richardson_zero,
    v2psi_check,
)
from .chi_window import WindowPath

__all__ = [
    "VanillaPayoff",
    "VanillaSolution",
    "WindowValueFunction",
    "HedgeReport",
    "solve_vanilla",
    "lift_to_window",
    "hedge_process",
    "replicate_payoff",
    "condition_c_probe",
    "default_model_zoo",
]

_PATH_CHUNK = 16          # GH evaluation along paths is chunked to bound memory
_MIN_TAU = 1e-14
QV_GATE_TOL = 0.10


@dataclass
class VanillaPayoff:
    """Terminal payoff f with declared polynomial growth |f| <= C (1 + |x|^p)."""

    f: Callable[[np.ndarray], np.ndarray]
    sigma: float
    growth: tuple = (10.0, 4.0)
    df: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "payoff"

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    def check_growth(self, probe: Optional[np.ndarray] = None) -> bool:
        if probe is None:
            probe = np.linspace(-20.0, 20.0, 401)
        C, p = self.growth
        vals = np.abs(np.asarray(self.f(probe), dtype=float))
        return bool(np.all(vals <= C * (1.0 + np.abs(probe) ** p) + 1e-12))


@dataclass
class VanillaSolution:
    """v(t, x) = E f(x + sigma sqrt(T-t) Z) with Gauss-Hermite quadrature."""

    payoff: VanillaPayoff
    T: float
    gh_order: int
    t_grid: np.ndarray
    x_grid: np.ndarray
    v_grid: np.ndarray                   # (len(t_grid), len(x_grid))
    quad_converged: bool
    _z: np.ndarray = field(repr=False, default=None)
    _w: np.ndarray = field(repr=False, default=None)

    # pointwise evaluation -----------------------------------------------------
    def _mix(self, t, x, mode: str):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        tau = np.maximum(self.T - t, 0.0)
        sig = self.payoff.sigma
        if sig == 0.0 or np.all(tau <= _MIN_TAU):
            return self._degenerate(x, mode)
        spread = sig * np.sqrt(2.0 * np.maximum(tau, _MIN_TAU))
        pts = x[..., None] + spread[..., None] * self._z
        fv = np.asarray(self.payoff.f(pts), dtype=float)
        if mode == "v":
            weights = self._w
        elif mode == "vx":
            weights = self._w * np.sqrt(2.0) * self._z
            fv = fv / (sig * np.sqrt(np.maximum(tau, _MIN_TAU)))[..., None]
        elif mode == "vxx":
            weights = self._w * (2.0 * self._z ** 2 - 1.0)
            fv = fv / (sig ** 2 * np.maximum(tau, _MIN_TAU))[..., None]
        else:
            raise ValueError(mode)
        return (fv * weights).sum(axis=-1) / math.sqrt(math.pi)

    def _degenerate(self, x, mode):
        if mode == "v":
            return np.asarray(self.payoff.f(x), dtype=float)
        if mode == "vx":
            if self.payoff.df is not None:
                return np.asarray(self.payoff.df(x), dtype=float)
            h = 1e-5 * (1.0 + np.abs(x))
            return (np.asarray(self.payoff.f(x + h)) - np.asarray(self.payoff.f(x - h))) / (2 * h)
        h = 1e-4 * (1.0 + np.abs(x))
        return (np.asarray(self.payoff.f(x + h)) - 2 * np.asarray(self.payoff.f(x))
                + np.asarray(self.payoff.f(x - h))) / (h * h)

    def v(self, t, x):
        return self._mix(t, x, "v")

    def vx(self, t, x):
        return self._mix(t, x, "vx")

    def vxx(self, t, x):
        return self._mix(t, x, "vxx")

    def heat_residual(self) -> float:
        """Max |v_t + (sigma^2/2) v_xx| over interior grid nodes, v_t by differences."""
        if len(self.t_grid) < 3:
            return 0.0
        vt = np.gradient(self.v_grid, self.t_grid, axis=0)
        sig = self.payoff.sigma
        if sig == 0.0:
            return float(np.abs(vt[1:-1]).max())
        inner_t = self.t_grid[1:-1]
        vxx = np.stack([self.vxx(np.full_like(self.x_grid, t), self.x_grid)
                        for t in inner_t])
        return float(np.abs(vt[1:-1] + 0.5 * sig ** 2 * vxx).max())

    def dx_bounded_near_horizon(self, ratio: float = 10.0) -> bool:
        """Is v_x on the probe grid no wilder near T than in the bulk?"""
        far = np.abs(self.vx(np.full_like(self.x_grid, self.T * 0.5), self.x_grid)).max()
        tau_min = max(self.T * 1e-3, _MIN_TAU)
        near = np.abs(self.vx(np.full_like(self.x_grid, self.T - tau_min), self.x_grid)).max()
        return bool(near <= ratio * max(far, 1e-12))


def solve_vanilla(payoff: VanillaPayoff, T: float,
                  x_grid: Optional[np.ndarray] = None,
                  t_points: int = 33, gh_order: int = 64) -> VanillaSolution:
    """Backward-heat value function by Gauss-Hermite smoothing of f."""
    if x_grid is None:
        half = 5.0 * max(payoff.sigma, 1e-6) * math.sqrt(T)
        x_grid = np.linspace(-half, half, 129)
    z, w = np.polynomial.hermite.hermgauss(gh_order)
    t_grid = np.linspace(0.0, T, t_points)
    sol = VanillaSolution(
        payoff=payoff, T=T, gh_order=gh_order, t_grid=t_grid, x_grid=x_grid,
        v_grid=None, quad_converged=True, _z=z, _w=w,
    )
    sol.v_grid = np.stack([sol.v(np.full_like(x_grid, t), x_grid) for t in t_grid])

    # doubling the order should not move the values: flags oscillatory payoffs
    z2, w2 = np.polynomial.hermite.hermgauss(min(2 * gh_order, 180))
    probe_t = np.full_like(x_grid, 0.5 * T)
    ref = sol.v(probe_t, x_grid)
    sol._z, sol._w = z2, w2
    alt = sol.v(probe_t, x_grid)
    sol._z, sol._w = z, w
    scale = max(float(np.abs(ref).max()), 1e-12)
    sol.quad_converged = bool(np.abs(ref - alt).max() <= 1e-6 * scale)
    return sol


@dataclass
class WindowValueFunction:
    """The lift u(t, eta) = v(t, eta(0)): derivative measures are atoms at 0."""

    solution: VanillaSolution

    def u(self, t, eta_head):
        return self.solution.v(t, eta_head)

    def d_dirac(self, t, eta_head):
        return self.solution.vx(t, eta_head)

    def d2_atom(self, t, eta_head):
        return self.solution.vxx(t, eta_head)

    # D-perp of the lift vanishes identically
    def d_perp_density(self, t, eta: np.ndarray) -> np.ndarray:
        return np.zeros_like(eta)

    def evanilla_residual(self) -> float:
        """Residual of  u_t + (sigma^2/2) <D^2 u, 1_{diag}>  on the value grid.

        The second-derivative measure is the atom v_xx at the square's corner,
        which the diagonal indicator picks up whole, so the residual equals
        the one-dimensional heat residual.
        """
        return self.solution.heat_residual()


def lift_to_window(solution: VanillaSolution) -> WindowValueFunction:
    return WindowValueFunction(solution=solution)


def hedge_process(u: WindowValueFunction, X: SamplePath) -> np.ndarray:
    """xi_k = v_x(t_k, X_k) on nodes t_0 .. t_{n-1} (the derivative may blow at T)."""
    ts = X.grid.points[:-1]
    return np.asarray(u.d_dirac(ts, X.values[:-1]), dtype=float)


def _hedge_matrix(u: WindowValueFunction, ts: np.ndarray, paths: np.ndarray) -> np.ndarray:
    rows = []
    for start in range(0, paths.shape[0], _PATH_CHUNK):
        block = paths[start: start + _PATH_CHUNK]
        rows.append(u.d_dirac(np.broadcast_to(ts, block.shape), block))
    return np.vstack(rows)


@dataclass
class HedgeReport:
    model: str
    h: np.ndarray
    G0: float
    hedge_integral: np.ndarray
    residual: np.ndarray
    improper: bool
    qv_warning: bool
    eps_used: float

    @property
    def mean_abs_residual(self) -> float:
        return float(np.abs(self.residual).mean())

    @property
    def stderr_abs_residual(self) -> float:
        r = np.abs(self.residual)
        return float(r.std(ddof=1) / math.sqrt(len(r)))

    @property
    def mean_abs_payoff(self) -> float:
        return float(np.abs(self.h).mean())

    def rows(self):
        for i in range(len(self.h)):
            yield (self.model, i, float(self.h[i]), self.G0,
                   float(self.hedge_integral[i]), float(self.residual[i]))


def default_model_zoo(sigma: float = 1.0) -> dict:
    """Three laws sharing the quadratic variation sigma^2 t."""
    hk_h, hk_k = 0.625, 0.8  # H*K = 1/2: variation 2^{1-K} t before rescale
    return {
        "bm": ProcessSpec.brownian(sigma),
        "dirichlet": ProcessSpec.dirichlet(
            ProcessSpec.brownian(sigma), ProcessSpec.fractional(0.75), scale=0.5),
        "bifbm": ProcessSpec.bifractional(
            hk_h, hk_k, scale=sigma * 2.0 ** ((hk_k - 1.0) / 2.0)),
    }


def replicate_payoff(payoff: VanillaPayoff, model: ProcessSpec, grid: Grid,
                     schedule: EpsSchedule, m: int, master_seed: int,
                     solution: Union[VanillaSolution, "WindowValueFunction", None] = None,
                     tau_check: bool = True, threads: int = 1) -> HedgeReport:
    """Hedge m paths of `model` and report the replication residuals.

    The model declares variation sigma^2 t; a pre-flight pathwise check at
    10% tolerance raises the QV warning flag when the declared target is not
    met (the run still completes, the flag travels with the report).
    `solution` may be a ready value function or an already lifted window
    functional; by default the backward-heat solve is run in place.
    """
    ens = ensemble(model, grid, m, master_seed)
    paths = ens.matrix(threads=threads)
    if isinstance(solution, WindowValueFunction):
        u, solution = solution, solution.solution
    else:
        if solution is None:
            x0 = float(paths[0, 0])
            spread = 5.0 * max(payoff.sigma, 1e-6) * math.sqrt(grid.T)
            xg = np.linspace(x0 - spread, x0 + spread, 129)
            solution = solve_vanilla(payoff, grid.T, x_grid=xg)
        u = lift_to_window(solution)

    qv_warning = False
    if tau_check:
        psi = QVTarget.linear(payoff.sigma)
        window = WindowPath(SamplePath(grid, paths[0], label="probe"), grid.T).at(grid.T)
        ok, _, _ = v2psi_check(window, grid.dt, psi, QV_GATE_TOL)
        qv_warning = not ok

    ts = grid.points[:-1]
    xi = _hedge_matrix(u, ts, paths[:, :-1])
    lag = schedule.smallest_lag
    curve = forward_integral_curve_eps(xi, paths, lag)

    improper = not solution.dx_bounded_near_horizon()
    if improper:
        delta_lags = [d for d in (16, 8, 4, 2) if d < grid.n]
        deltas = np.array([d * grid.dt for d in delta_lags])
        vals = np.stack([curve[:, grid.n - d] for d in delta_lags], axis=-1)
        integral = richardson_zero(deltas, vals)
    else:
        integral = curve[:, grid.n]

    h = np.asarray(payoff.f(paths[:, -1]), dtype=float)
    G0 = float(solution.v(np.array(0.0), np.array(paths[0, 0])))
    residual = h - G0 - integral
    return HedgeReport(
        model=model.describe(), h=h, G0=G0, hedge_integral=integral,
        residual=residual, improper=improper, qv_warning=qv_warning,
        eps_used=lag * grid.dt,
    )


def condition_c_probe(density_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
                      eta: np.ndarray, dt: float,
                      lags: Sequence[int] = (64, 32, 16, 8, 4, 2),
                      t: Optional[float] = None,
                      bound: Optional[float] = None) -> dict:
    """Profile of I(t, eta, eps) = int_{-t}^0 density(x) (eta(x+eps)-eta(x))/eps dx.

    Reports the per-eps values of the orthogonal-derivative pairing and, when
    a bound is declared, whether the ladder sup exceeds it.  The probe cannot
    certify integrability, only exhibit the empirical sup.
    """
    eta = np.asarray(eta, dtype=float)
    w = len(eta) - 1
    x = (np.arange(w + 1) - w) * dt
    t_max = w * dt if t is None else t
    mask = x[:-1] >= -t_max - 1e-12
    dens = np.asarray(density_fn(x, eta), dtype=float)[:-1]
    values = []
    for lag in lags:
        d = lagged_diff(eta, lag)
        values.append(float((dens[mask] * d[mask]).sum() * dt / (lag * dt)))
    values = np.array(values)
    out = {
        "eps": np.array([j * dt for j in lags]),
        "values": values,
        "sup": float(np.abs(values).max()),
    }
    if bound is not None:
        out["exceeds_bound"] = bool(out["sup"] > bound)
    return out
