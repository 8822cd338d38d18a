"""Window processes and quadratic variation against square measures.

A window of width tau turns a scalar path X into the path segment
eta_t(u) = X_{t+u}, u in [-tau, 0].  Window Brownian motion has no scalar
quadratic variation, but it does have one against the measure-type test
space chi_0 on [-tau,0]^2, stored here componentwise:

    atom          lambda * delta_0 x delta_0
    prod_left     a(x) dx x delta_0
    prod_right    delta_0 x b(y) dy
    l2            rho(x,y) dx dy       (full grid or separable factors)
    diag          g(x) delta_y(dx) dy

The direct-sum storage makes the pairing against increment tensors exact
quadrature per component and keeps the representation unique.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .grid_paths import Grid, SamplePath
from .regcalc import EpsSchedule, EstimateSeries, make_series

__all__ = [
    "WindowPath",
    "window_at",
    "SquareMeasure",
    "pair_measure_with_square_increment",
    "chi_qv_eps",
    "chi_qv_series",
    "chi_qv_formula",
    "PointEval",
    "SquaredMean",
    "SquaredNorm",
    "functional_derivatives",
    "window_scalar_qv_diagnostic",
]

FULL_L2_MAX_WIDTH = 512  # dense rho(x,y) pairing is O(n w^2); demo scale only


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------

def _window_steps(grid: Grid, tau: float) -> int:
    w = int(round(tau / grid.dt))
    if w < 1 or abs(w * grid.dt - tau) > 1e-9 * grid.dt:
        raise ValueError(f"window width {tau} is not a positive multiple of dt")
    if w > grid.n:
        raise ValueError("window cannot be wider than the horizon")
    return w


@dataclass
class WindowPath:
    """The tau-memory of a scalar path: eta_t(u) = X_{t+u}, u in [-tau, 0]."""

    base: SamplePath
    tau: float

    def __post_init__(self):
        self.width_steps = _window_steps(self.base.grid, self.tau)

    @property
    def x_nodes(self) -> np.ndarray:
        w = self.width_steps
        return (np.arange(w + 1) - w) * self.base.grid.dt

    def at(self, t: float) -> np.ndarray:
        """Grid-sampled snapshot eta_t; uses the boundary prolongation for t+u < 0."""
        grid = self.base.grid
        r = grid.index_of(t)
        w = self.width_steps
        idx = np.clip(np.arange(r - w, r + 1), 0, grid.n)
        return self.base.values[idx]

    def quadrature_weights(self) -> np.ndarray:
        return _trapezoid_weights(self.width_steps, self.base.grid.dt)


def window_at(X: SamplePath, t: float, tau: Optional[float] = None) -> np.ndarray:
    if tau is None:
        tau = X.grid.T
    return WindowPath(base=X, tau=tau).at(t)


def _trapezoid_weights(w: int, dt: float) -> np.ndarray:
    weights = np.full(w + 1, dt)
    weights[0] = weights[-1] = 0.5 * dt
    return weights


# ---------------------------------------------------------------------------
# Square measures (elements of the chi_0 direct sum)
# ---------------------------------------------------------------------------

@dataclass
class SquareMeasure:
    """Componentwise element of chi_0; densities are sampled on the window grid."""

    atom: float = 0.0
    prod_left: Optional[np.ndarray] = None
    prod_right: Optional[np.ndarray] = None
    l2_factors: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    l2_full: Optional[np.ndarray] = None
    diag: Optional[np.ndarray] = None
    label: str = ""

    @staticmethod
    def dirac_atom(lam: float = 1.0) -> "SquareMeasure":
        return SquareMeasure(atom=lam, label=f"{lam:g}*delta0xdelta0")

    @staticmethod
    def diagonal(density, w: int) -> "SquareMeasure":
        return SquareMeasure(diag=_as_window_density(density, w), label="diag")

    @staticmethod
    def l2_constant(c: float, w: int) -> "SquareMeasure":
        ones = np.ones(w + 1)
        return SquareMeasure(l2_factors=[(c * ones, ones.copy())], label=f"l2(const {c:g})")

    def __add__(self, other: "SquareMeasure") -> "SquareMeasure":
        def add_opt(a, b):
            if a is None:
                return None if b is None else b.copy()
            if b is None:
                return a.copy()
            return a + b

        return SquareMeasure(
            atom=self.atom + other.atom,
            prod_left=add_opt(self.prod_left, other.prod_left),
            prod_right=add_opt(self.prod_right, other.prod_right),
            l2_factors=list(self.l2_factors) + list(other.l2_factors),
            l2_full=add_opt(self.l2_full, other.l2_full),
            diag=add_opt(self.diag, other.diag),
        )

    def __mul__(self, c: float) -> "SquareMeasure":
        scale = lambda a: None if a is None else c * a
        return SquareMeasure(
            atom=c * self.atom,
            prod_left=scale(self.prod_left),
            prod_right=scale(self.prod_right),
            l2_factors=[(c * u, v.copy()) for u, v in self.l2_factors],
            l2_full=scale(self.l2_full),
            diag=scale(self.diag),
        )

    __rmul__ = __mul__


def _as_window_density(density, w: int) -> np.ndarray:
    if np.isscalar(density):
        return np.full(w + 1, float(density))
    arr = np.asarray(density, dtype=float)
    if arr.shape != (w + 1,):
        raise ValueError(f"density of shape {arr.shape} does not fit window with {w} steps")
    if not np.all(np.isfinite(arr)):
        raise ValueError("measure densities must be finite")
    return arr


def pair_measure_with_square_increment(mu: SquareMeasure, g: np.ndarray,
                                       weights: np.ndarray) -> float:
    """<mu, g (x) g>: componentwise quadrature of the tensor-square pairing."""
    g = np.asarray(g, dtype=float)
    total = 0.0
    g0 = g[-1]
    if mu.atom:
        total += mu.atom * g0 * g0
    if mu.prod_left is not None:
        total += g0 * float((mu.prod_left * g * weights).sum())
    if mu.prod_right is not None:
        total += g0 * float((mu.prod_right * g * weights).sum())
    for u, v in mu.l2_factors:
        total += float((u * g * weights).sum()) * float((v * g * weights).sum())
    if mu.l2_full is not None:
        gw = g * weights
        total += float(gw @ mu.l2_full @ gw)
    if mu.diag is not None:
        total += float((mu.diag * g * g * weights).sum())
    return total


# ---------------------------------------------------------------------------
# chi-quadratic variation: direct estimator
# ---------------------------------------------------------------------------

def _fft_correlate_valid(a: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """out[r] = sum_i a[..., r+i] * kernel[i]; batched over leading axes."""
    la, lk = a.shape[-1], len(kernel)
    if lk <= 64:
        if a.ndim == 1:
            return np.correlate(a, kernel, mode="valid")
        return np.stack([np.correlate(row, kernel, mode="valid") for row in a])
    size = 1 << int(np.ceil(np.log2(la + lk)))
    fa = np.fft.rfft(a, size, axis=-1)
    fk = np.fft.rfft(kernel[::-1], size)
    out = np.fft.irfft(fa * fk, size, axis=-1)
    return out[..., lk - 1: la]


def _padded_increments(paths: np.ndarray, grid: Grid, w: int, lag: int) -> np.ndarray:
    """Window increments D[u] = X_{(u+lag) dt} - X_{u dt} for u = -w .. n-1, clamped."""
    n = grid.n
    u = np.arange(-w, n)
    iu = np.clip(u, 0, n)
    iv = np.clip(u + lag, 0, n)
    return paths[..., iv] - paths[..., iu]


def _chi_qv_nodes(mu: SquareMeasure, paths: np.ndarray, grid: Grid, w: int,
                  lag: int) -> np.ndarray:
    """Per-node pairing <mu, (window increment)^{(x)2}> along r = t_0..t_{n-1}."""
    n = grid.n
    weights = _trapezoid_weights(w, grid.dt)
    D = _padded_increments(paths, grid, w, lag)
    d_now = D[..., w:]                     # increment at the window's right end
    out = np.zeros(d_now.shape)
    if mu.atom:
        out += mu.atom * d_now * d_now
    if mu.prod_left is not None:
        out += d_now * _fft_correlate_valid(D, mu.prod_left * weights)[..., :n]
    if mu.prod_right is not None:
        out += d_now * _fft_correlate_valid(D, mu.prod_right * weights)[..., :n]
    for u_fac, v_fac in mu.l2_factors:
        cu = _fft_correlate_valid(D, u_fac * weights)[..., :n]
        cv = _fft_correlate_valid(D, v_fac * weights)[..., :n]
        out += cu * cv
    if mu.l2_full is not None:
        if w > FULL_L2_MAX_WIDTH:
            raise ValueError(
                f"dense rho(x,y) pairing limited to window width {FULL_L2_MAX_WIDTH}; "
                "use separable l2 factors at this scale"
            )
        P = mu.l2_full * np.outer(weights, weights)
        win = np.lib.stride_tricks.sliding_window_view(D, w + 1, axis=-1)[..., :n, :]
        out += np.einsum("...ri,ij,...rj->...r", win, P, win)
    if mu.diag is not None:
        out += _fft_correlate_valid(D * D, mu.diag * weights)[..., :n]
    return out


def chi_qv_eps(mu: SquareMeasure, X: SamplePath, eps: float, t: float,
               tau: Optional[float] = None) -> float:
    """(1/eps) * int_0^t <mu, (X_{r+eps}(.) - X_r(.))^{(x)2}> dr."""
    grid = X.grid
    tau = grid.T if tau is None else tau
    w = _window_steps(grid, tau)
    lag = int(round(eps / grid.dt))
    m = grid.index_of(t)
    nodes = _chi_qv_nodes(mu, X.values, grid, w, lag)
    return float(nodes[:m].sum() * grid.dt / (lag * grid.dt))


def chi_qv_series(mu: SquareMeasure, paths: np.ndarray, grid: Grid,
                  schedule: EpsSchedule, t: float,
                  tau: Optional[float] = None) -> EstimateSeries:
    """Ladder of chi-QV estimates; `paths` is one path or an (m, n+1) matrix."""
    tau = grid.T if tau is None else tau
    w = _window_steps(grid, tau)
    m_idx = grid.index_of(t)
    vals = []
    for lag in schedule.lags:
        nodes = _chi_qv_nodes(mu, paths, grid, w, lag)
        vals.append(nodes[..., :m_idx].sum(axis=-1) / lag)
    return make_series(schedule.eps_values, np.stack(vals, axis=-1))


# ---------------------------------------------------------------------------
# chi-quadratic variation: closed form via the diagonal trace of the measure
# ---------------------------------------------------------------------------

def chi_qv_formula(mu: SquareMeasure, qv: Callable[[np.ndarray], np.ndarray],
                   t: float, grid: Grid, tau: Optional[float] = None) -> float:
    """Diagonal integral of the measure against the accumulated variation.

    For the window of a finite-quadratic-variation process the chi-QV paired
    with mu only charges the diagonal of the square: the atom contributes
    [X]_t, the diagonal density g contributes int_{-t}^0 g(x) [X]_{t+x} dx
    (a window point at depth |x| has accumulated variation up to time t+x),
    and the L^2 and product components charge the diagonal with mass zero.
    """
    tau = grid.T if tau is None else tau
    w = _window_steps(grid, tau)
    total = 0.0
    if mu.atom:
        total += mu.atom * float(qv(np.array([t]))[0])
    if mu.diag is not None:
        x = (np.arange(w + 1) - w) * grid.dt
        mask = x >= -t - 1e-12
        xs = x[mask]
        vals = mu.diag[mask] * qv(t + xs)
        if len(xs) > 1:
            total += float(np.trapezoid(vals, dx=grid.dt))
    return total


# ---------------------------------------------------------------------------
# Elementary functionals on C([-tau, 0]) and their derivatives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointEval:
    """F(eta) = f(eta(0)) for a C^2 scalar function f."""

    f: Callable
    df: Callable
    d2f: Callable
    name: str = "point"

    def value(self, eta: np.ndarray, weights: np.ndarray) -> float:
        return float(self.f(eta[-1]))


@dataclass(frozen=True)
class SquaredMean:
    """F(eta) = (int eta)^2."""

    name: str = "sqmean"

    def value(self, eta: np.ndarray, weights: np.ndarray) -> float:
        return float((eta * weights).sum() ** 2)


@dataclass(frozen=True)
class SquaredNorm:
    """F(eta) = int eta^2."""

    name: str = "sqnorm"

    def value(self, eta: np.ndarray, weights: np.ndarray) -> float:
        return float((eta * eta * weights).sum())


ElementaryFunctional = (PointEval, SquaredMean, SquaredNorm)


def functional_derivatives(F, eta: np.ndarray, weights: np.ndarray):
    """(F(eta), first derivative measure, second derivative square measure).

    The first derivative is returned as (atom at 0, absolutely continuous
    density on the window grid); the second lands in the declared chi_0
    component of each functional family.
    """
    w = len(eta) - 1
    if isinstance(F, PointEval):
        val = float(F.f(eta[-1]))
        atom0 = float(F.df(eta[-1]))
        density = np.zeros(w + 1)
        d2 = SquareMeasure(atom=float(F.d2f(eta[-1])))
        return val, (atom0, density), d2
    if isinstance(F, SquaredMean):
        s = float((eta * weights).sum())
        density = np.full(w + 1, 2.0 * s)
        d2 = SquareMeasure.l2_constant(2.0, w)
        return s * s, (0.0, density), d2
    if isinstance(F, SquaredNorm):
        val = float((eta * eta * weights).sum())
        density = 2.0 * eta
        d2 = SquareMeasure.diagonal(2.0, w)
        return val, (0.0, density), d2
    raise TypeError(f"not an elementary functional: {F!r}")


# ---------------------------------------------------------------------------
# Diagnostic: the window has no scalar quadratic variation
# ---------------------------------------------------------------------------

def _sliding_max(a: np.ndarray, width: int) -> np.ndarray:
    """max over a[k : k+width] for each k (sparse-table doubling)."""
    out = a.copy()
    span = 1
    while span < width:
        step = min(span, width - span)
        shifted = out[..., step:]
        out = np.maximum(out[..., : shifted.shape[-1]], shifted)
        span += step
    return out


def window_scalar_qv_diagnostic(X: SamplePath, schedule: EpsSchedule, t: float,
                                tau: Optional[float] = None) -> EstimateSeries:
    """(1/eps) int_0^t sup_u |window increment|^2 dr: expected to blow up.

    The sup-norm tensor square of a Brownian window does not integrate to a
    finite limit; this series is exposed so the divergence is visible, never
    as an estimator of anything.
    """
    grid = X.grid
    tau = grid.T if tau is None else tau
    w = _window_steps(grid, tau)
    m_idx = grid.index_of(t)
    vals = []
    for lag in schedule.lags:
        D = np.abs(_padded_increments(X.values, grid, w, lag))
        sup = _sliding_max(D, w + 1)[: grid.n]
        vals.append(float((sup[:m_idx] ** 2).sum() / lag))
    series = make_series(schedule.eps_values, np.array(vals))
    series.diagnostics["diverging"] = bool(np.all(np.diff(series.values) > 0))
    return series
