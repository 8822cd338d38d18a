"""Epsilon-regularization estimators.

Covariation, quadratic variation, forward and improper forward integrals of
grid-sampled paths, plus the deterministic calculus on an interval (the
2-regularization variation and the pointwise quadratic-variation membership
check).

Discretization conventions, fixed once and used everywhere:

* the smoothing width is an integer number of grid steps, eps = lag * dt,
  with lag >= 2 so the regularization error dominates the discretization;
* outer ds-integrals are left-endpoint Riemann sums over grid nodes;
* evaluation past the right end of the grid clamps to the final value,
  matching the boundary prolongation of the paths;
* limits eps -> 0 are produced by polynomial (iterated Richardson)
  extrapolation through the three smallest eps of the ladder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .grid_paths import Grid, SamplePath

__all__ = [
    "EpsSchedule",
    "EstimateSeries",
    "QVTarget",
    "lagged_diff",
    "covariation_eps",
    "covariation_curve_eps",
    "covariation",
    "quadratic_variation",
    "forward_integral_eps",
    "forward_integral_curve_eps",
    "forward_integral",
    "improper_forward_integral",
    "integration_by_parts_residual",
    "bvm_covariation_check",
    "two_var_norm",
    "TwoVarResult",
    "v2psi_check",
    "det_forward_integral",
    "richardson_zero",
]

DEFAULT_LAGS = (64, 32, 16, 8, 4, 2)

Integrand = Union[SamplePath, np.ndarray, Callable[[np.ndarray], np.ndarray], float]


@dataclass(frozen=True)
class EpsSchedule:
    """Descending ladder of smoothing widths, each an integer multiple of dt."""

    lags: tuple
    dt: float

    def __post_init__(self):
        lags = tuple(int(j) for j in self.lags)
        if len(lags) < 2:
            raise ValueError("schedule needs at least two eps values")
        if any(b >= a for a, b in zip(lags, lags[1:])):
            raise ValueError(f"lags must be strictly decreasing, got {lags}")
        if lags[-1] < 2:
            raise ValueError(
                "smallest eps must be at least 2*dt; a one-step eps conflates "
                "discretization with regularization"
            )
        object.__setattr__(self, "lags", lags)

    @staticmethod
    def for_grid(grid: Grid, lags: Sequence[int] = DEFAULT_LAGS) -> "EpsSchedule":
        return EpsSchedule(lags=tuple(lags), dt=grid.dt)

    @property
    def eps_values(self) -> np.ndarray:
        return np.array([j * self.dt for j in self.lags])

    @property
    def smallest_lag(self) -> int:
        return self.lags[-1]


@dataclass(frozen=True)
class QVTarget:
    """Target quadratic-variation function psi on [0, T], psi(0) = 0, nondecreasing."""

    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, t):
        return self.fn(np.asarray(t, dtype=float))

    @staticmethod
    def linear(sigma: float = 1.0) -> "QVTarget":
        return QVTarget(fn=lambda t: sigma ** 2 * t)

    @staticmethod
    def zero() -> "QVTarget":
        return QVTarget(fn=lambda t: np.zeros_like(np.asarray(t, dtype=float)))

    def validate(self, T: float, n_probe: int = 64) -> None:
        ts = np.linspace(0.0, T, n_probe)
        vals = self(ts)
        if abs(float(vals[0])) > 1e-12:
            raise ValueError("psi(0) must vanish")
        if np.any(np.diff(vals) < -1e-12):
            raise ValueError("psi must be nondecreasing")


# ---------------------------------------------------------------------------
# Extrapolation
# ---------------------------------------------------------------------------

def richardson_zero(eps: np.ndarray, values: np.ndarray, points: int = 3) -> np.ndarray:
    """Polynomial extrapolation to eps = 0 through the `points` smallest eps.

    Neville's scheme on the last (smallest) points; with three points this is
    second-level Richardson for a series v(eps) = a + b*eps + c*eps^2.
    `values` may carry leading ensemble axes; eps is the last axis.
    """
    order = np.argsort(eps)
    eps_asc = np.asarray(eps, dtype=float)[order]
    vals = np.asarray(values, dtype=float)[..., order]
    k = min(points, len(eps_asc))
    x = eps_asc[:k]
    p = vals[..., :k].copy()
    for level in range(1, k):
        for i in range(k - level):
            denom = x[i + level] - x[i]
            p[..., i] = p[..., i] + (p[..., i] - p[..., i + 1]) * x[i] / denom
    return p[..., 0]


@dataclass
class EstimateSeries:
    """Per-eps values of a regularized quantity plus the extrapolated limit."""

    eps: np.ndarray                     # descending, matches values' last axis
    values: np.ndarray                  # (K,) single path or (m, K) ensemble
    extrapolated: float
    per_path_extrapolated: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None   # per-eps ensemble mean
    stderr: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def at_smallest_eps(self):
        return self.values[..., -1]


def _diagnose(eps: np.ndarray, mean_vals: np.ndarray, values: np.ndarray) -> dict:
    diffs = np.diff(mean_vals)
    monotone = bool(np.all(diffs <= 0) or np.all(diffs >= 0))
    denom = max(abs(mean_vals[-1]), abs(mean_vals[-2]), 1e-300)
    last_rel_change = abs(mean_vals[-1] - mean_vals[-2]) / denom
    diag = {
        "monotone": monotone,
        "oscillating": not monotone,
        "last_rel_change": float(last_rel_change),
    }
    if values.ndim == 2 and values.shape[0] > 1:
        med = np.median(values, axis=0)
        diag["mad"] = np.median(np.abs(values - med), axis=0)
    return diag


def make_series(eps: np.ndarray, values: np.ndarray) -> EstimateSeries:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        extrap = float(richardson_zero(eps, values))
        mean = values
        return EstimateSeries(
            eps=eps, values=values, extrapolated=extrap,
            diagnostics=_diagnose(eps, mean, values),
        )
    per_path = richardson_zero(eps, values)
    mean = values.mean(axis=0)
    if values.shape[0] > 1:
        stderr = values.std(axis=0, ddof=1) / np.sqrt(values.shape[0])
    else:
        stderr = np.zeros_like(mean)
    return EstimateSeries(
        eps=eps,
        values=values,
        extrapolated=float(per_path.mean()),
        per_path_extrapolated=per_path,
        mean=mean,
        stderr=stderr,
        diagnostics=_diagnose(eps, mean, values),
    )


# ---------------------------------------------------------------------------
# Core kernels (arrays in, arrays out; leading axes broadcast over paths)
# ---------------------------------------------------------------------------

def lagged_diff(values: np.ndarray, lag: int) -> np.ndarray:
    """D_k = X_{t_k + lag*dt} - X_{t_k} for k = 0..n-1, clamping beyond T."""
    values = np.asarray(values, dtype=float)
    n = values.shape[-1] - 1
    idx = np.minimum(np.arange(n) + lag, n)
    return values[..., idx] - values[..., :n]


def _check_same_grid(X: SamplePath, Y: SamplePath) -> Grid:
    if X.grid != Y.grid:
        raise ValueError("paths must share a grid")
    return X.grid


def _lag_of(eps: float, grid: Grid) -> int:
    lag = int(round(eps / grid.dt))
    if lag < 1 or abs(lag * grid.dt - eps) > 1e-9 * grid.dt:
        raise ValueError(f"eps={eps} is not a positive integer multiple of dt={grid.dt}")
    return lag


def _integrand_nodes(Y: Integrand, grid: Grid) -> np.ndarray:
    """Left-endpoint integrand values on nodes t_0..t_{n-1}."""
    if isinstance(Y, SamplePath):
        if Y.grid != grid:
            raise ValueError("integrand path must share the integrator grid")
        return Y.values[:-1]
    if callable(Y):
        return np.asarray(Y(grid.points[:-1]), dtype=float)
    arr = np.asarray(Y, dtype=float)
    if arr.ndim == 0:
        return np.full(grid.n, float(arr))
    if arr.shape[-1] == grid.n + 1:
        return arr[..., :-1]
    if arr.shape[-1] == grid.n:
        return arr
    raise ValueError(f"integrand of length {arr.shape[-1]} does not fit grid n={grid.n}")


def covariation_curve_eps(xv: np.ndarray, yv: np.ndarray, lag: int, dt: float) -> np.ndarray:
    """Cumulative (1/eps) * int_0^{t_k} dX dY ds on nodes t_0..t_n."""
    prod = lagged_diff(xv, lag) * lagged_diff(yv, lag)
    out = np.zeros(prod.shape[:-1] + (prod.shape[-1] + 1,))
    np.cumsum(prod / lag, axis=-1, out=out[..., 1:])
    return out


def covariation_eps(X: SamplePath, Y: SamplePath, eps: float, t: float) -> float:
    """(1/eps) * int_0^t (X_{s+eps}-X_s)(Y_{s+eps}-Y_s) ds, left Riemann sum."""
    grid = _check_same_grid(X, Y)
    lag = _lag_of(eps, grid)
    m = grid.index_of(t)
    prod = lagged_diff(X.values, lag)[:m] * lagged_diff(Y.values, lag)[:m]
    return float(prod.sum() / lag)


def _series_over_schedule(xv, yv, schedule: EpsSchedule, m: int) -> np.ndarray:
    vals = []
    for lag in schedule.lags:
        prod = lagged_diff(xv, lag)[..., :m] * lagged_diff(yv, lag)[..., :m]
        vals.append(prod.sum(axis=-1) / lag)
    return np.stack(vals, axis=-1)


def covariation(X: SamplePath, Y: SamplePath, schedule: EpsSchedule, t: float) -> EstimateSeries:
    grid = _check_same_grid(X, Y)
    m = grid.index_of(t)
    vals = _series_over_schedule(X.values, Y.values, schedule, m)
    return make_series(schedule.eps_values, vals)


def quadratic_variation(X: SamplePath, schedule: EpsSchedule, t: float) -> EstimateSeries:
    return covariation(X, X, schedule, t)


def qv_ensemble(paths: np.ndarray, grid: Grid, schedule: EpsSchedule, t: float) -> EstimateSeries:
    """Quadratic variation series for a (m, n+1) matrix of paths."""
    m_idx = grid.index_of(t)
    vals = _series_over_schedule(paths, paths, schedule, m_idx)
    return make_series(schedule.eps_values, vals)


def covariation_ensemble(xm: np.ndarray, ym: np.ndarray, grid: Grid,
                         schedule: EpsSchedule, t: float) -> EstimateSeries:
    m_idx = grid.index_of(t)
    vals = _series_over_schedule(xm, ym, schedule, m_idx)
    return make_series(schedule.eps_values, vals)


# ---------------------------------------------------------------------------
# Forward integrals
# ---------------------------------------------------------------------------

def forward_integral_curve_eps(y_nodes: np.ndarray, xv: np.ndarray, lag: int) -> np.ndarray:
    """Cumulative (1/eps) * int_0^{t_k} Y_r (X_{r+eps}-X_r) dr on nodes."""
    prod = y_nodes * lagged_diff(xv, lag)
    out = np.zeros(prod.shape[:-1] + (prod.shape[-1] + 1,))
    np.cumsum(prod / lag, axis=-1, out=out[..., 1:])
    return out


def forward_integral_eps(Y: Integrand, X: SamplePath, eps: float, t: float) -> float:
    """(1/eps) * int_0^t Y_r (X_{r+eps}-X_r) dr; linear in Y and in X increments."""
    grid = X.grid
    lag = _lag_of(eps, grid)
    m = grid.index_of(t)
    y = _integrand_nodes(Y, grid)
    prod = y[..., :m] * lagged_diff(X.values, lag)[:m]
    return float(prod.sum() / lag)


def forward_integral(Y: Integrand, X: SamplePath, schedule: EpsSchedule, t: float) -> EstimateSeries:
    grid = X.grid
    m = grid.index_of(t)
    y = _integrand_nodes(Y, grid)
    vals = []
    for lag in schedule.lags:
        prod = y[..., :m] * lagged_diff(X.values, lag)[:m]
        vals.append(prod.sum(axis=-1) / lag)
    return make_series(schedule.eps_values, np.stack(vals, axis=-1))


def improper_forward_integral(Y: Integrand, X: SamplePath, schedule: EpsSchedule,
                              delta_lags: Sequence[int] = (16, 8, 4, 2)) -> EstimateSeries:
    """Forward integral up to T, taken as a limit t -> T.

    Evaluates the eps-smallest forward integral at t = T - delta for a
    decreasing delta ladder and extrapolates delta -> 0.  A divergence flag is
    raised when the ladder keeps growing instead of stabilizing.
    """
    grid = X.grid
    lag = schedule.smallest_lag
    y = _integrand_nodes(Y, grid)
    curve = forward_integral_curve_eps(y, X.values, lag)
    deltas = np.array([d * grid.dt for d in delta_lags])
    vals = np.array([curve[grid.n - d] for d in delta_lags], dtype=float)
    series = make_series(deltas, vals)
    series.diagnostics["divergence"] = ladder_diverges(vals)
    series.diagnostics["delta_ladder"] = True
    return series


def ladder_diverges(vals: np.ndarray) -> bool:
    """No stabilization along a refining ladder.

    Convergent ladders have dying differences; a monotone tail whose steps do
    not shrink (constant steps = log-type blowup) is flagged.
    """
    vals = np.asarray(vals, dtype=float)
    steps = np.abs(np.diff(vals))
    if len(steps) < 2:
        return False
    monotone = bool(np.all(np.diff(vals) > 0) or np.all(np.diff(vals) < 0))
    return bool(
        monotone
        and steps[-1] >= 0.8 * steps[0]
        and steps[-1] > 1e-3 * max(abs(vals[-1]), 1e-12)
    )


def integration_by_parts_residual(X: SamplePath, Y: SamplePath, eps: float, t: float) -> float:
    """Residual of Y_t X_t = Y_0 X_0 + int Y d-X + int X d-Y + [X,Y]_t at level eps.

    Each term on the right is the eps-level estimator; the left side is the
    true product increment, so the residual measures how far the smoothed
    objects are from closing the identity.  It vanishes as eps -> 0 whenever
    the limiting objects exist (and is exactly zero for constant X and Y).
    """
    grid = _check_same_grid(X, Y)
    m = grid.index_of(t)
    lhs = Y.values[m] * X.values[m] - Y.values[0] * X.values[0]
    fyx = forward_integral_eps(Y, X, eps, t)
    fxy = forward_integral_eps(X, Y, eps, t)
    cov = covariation_eps(X, Y, eps, t)
    return float(lhs - fyx - fxy - cov)


# ---------------------------------------------------------------------------
# C^{0,1} transported brackets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class C01Function:
    """A function (t, x) -> f(t, x) with its x-derivative, both vectorized."""

    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dx: Callable[[np.ndarray, np.ndarray], np.ndarray]


def bvm_covariation_check(f: C01Function, g: C01Function, X: SamplePath, Y: SamplePath,
                          schedule: EpsSchedule, t: float,
                          bracket: Optional[Callable[[np.ndarray], np.ndarray]] = None):
    """Check [f(.,X), g(.,Y)]_t against int_0^t f_x g_x d[X,Y].

    Returns (lhs EstimateSeries, rhs value).  The right side integrates the
    product of x-derivatives along the paths against the bracket measure:
    either the supplied curve `bracket`, or the eps-smallest estimated one.
    """
    grid = _check_same_grid(X, Y)
    m = grid.index_of(t)
    ts = grid.points
    fx = SamplePath(grid, f.f(ts, X.values), label="f(.,X)")
    gy = SamplePath(grid, g.f(ts, Y.values), label="g(.,Y)")
    lhs = covariation(fx, gy, schedule, t)

    weights = f.dx(ts[:m], X.values[:m]) * g.dx(ts[:m], Y.values[:m])
    if bracket is None:
        lag = schedule.smallest_lag
        dbracket = (lagged_diff(X.values, lag) * lagged_diff(Y.values, lag) / lag)[:m]
    else:
        curve = np.asarray(bracket(ts), dtype=float)
        dbracket = np.diff(curve)[:m]
    rhs = float((weights * dbracket).sum())
    return lhs, rhs


# ---------------------------------------------------------------------------
# Deterministic calculus on an interval
# ---------------------------------------------------------------------------

@dataclass
class TwoVarResult:
    two_var: float          # sup over the ladder of the eps-integrals
    v2_norm: float          # |g|_inf + |g|_{2,var}
    eps: np.ndarray
    per_eps: np.ndarray


def two_var_norm(values: np.ndarray, dt: float,
                 lags: Sequence[int] = DEFAULT_LAGS) -> TwoVarResult:
    """2-regularization variation of a function sampled on a uniform grid.

    sup over the eps ladder (intersected with (0,1)) of
    (1/eps) * int (g(s+eps) - g(s))^2 ds, with the right-end extension
    g(x) = g(end) past the last node.
    """
    values = np.asarray(values, dtype=float)
    usable = [j for j in lags if 0.0 < j * dt < 1.0]
    if not usable:
        raise ValueError("no eps of the ladder falls in (0,1); refine the grid")
    per = []
    for lag in usable:
        d = lagged_diff(values, lag)
        per.append(float((d * d).sum() * dt / (lag * dt)))
    per = np.array(per)
    sup = float(per.max())
    return TwoVarResult(
        two_var=sup,
        v2_norm=float(np.abs(values).max() + sup),
        eps=np.array([j * dt for j in usable]),
        per_eps=per,
    )


def v2psi_check(values: np.ndarray, dt: float, psi: QVTarget, tol: float,
                eps_lag: int = 2):
    """Does the sampled function have pointwise quadratic variation psi?

    For each window point x <= 0 the deviation profile is
        I(x) = (1/eps) * int_x^0 (g(r+eps)-g(r))^2 dr  -  psi(-x),
    evaluated at the smallest ladder eps.  Accepts when sup_x |I(x)| stays
    within `tol` relative to the target scale psi(-x_min) (absolute when the
    target is identically zero).
    """
    values = np.asarray(values, dtype=float)
    w = len(values) - 1
    d = lagged_diff(values, eps_lag)
    tail = np.concatenate(([0.0], np.cumsum((d * d)[::-1] / eps_lag)))[::-1]
    # tail[k] = sum_{j>=k} d_j^2/lag : QV accumulated on [x_k, 0]
    lengths = (w - np.arange(w + 1)) * dt
    profile = tail - psi(lengths)
    scale = float(psi(np.array([w * dt]))[0])
    threshold = tol * scale if scale > 0 else tol
    deviation = float(np.abs(profile).max())
    return deviation <= threshold, profile, deviation


def det_forward_integral(g_density: Union[np.ndarray, float], f_values: np.ndarray,
                         dt: float, eps_lag: int) -> float:
    """Deterministic forward integral int_{]a,b]} g(s) (f_J(s+eps)-f_J(s))/eps ds.

    Both functions are sampled on the same uniform grid over [a, b]; past b
    the integrand is frozen at f(b) (the cadlag prolongation f_J).
    """
    f_values = np.asarray(f_values, dtype=float)
    n = len(f_values) - 1
    g = np.asarray(g_density, dtype=float)
    if g.ndim == 0:
        g = np.full(n, float(g))
    elif len(g) == n + 1:
        g = g[:-1]
    elif len(g) != n:
        raise ValueError("density does not fit the grid")
    d = lagged_diff(f_values, eps_lag)
    return float((g * d).sum() / eps_lag)
