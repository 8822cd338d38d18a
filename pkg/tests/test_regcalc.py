import numpy as np
import pytest

from regvar.grid_paths import Grid, ProcessSpec, SamplePath, ensemble, simulate
from regvar.regcalc import (
    C01Function,
    EpsSchedule,
    QVTarget,
    bvm_covariation_check,
    covariation,
    covariation_eps,
    det_forward_integral,
    forward_integral,
    forward_integral_eps,
    improper_forward_integral,
    integration_by_parts_residual,
    qv_ensemble,
    quadratic_variation,
    richardson_zero,
    two_var_norm,
    v2psi_check,
)


def brownian_matrix(n=1024, m=100, seed=1, T=1.0):
    g = Grid(T=T, n=n)
    return g, ensemble(ProcessSpec.brownian(1.0), g, m, seed).matrix()


# ---------------------------------------------------------------------------
# Schedule and extrapolation
# ---------------------------------------------------------------------------

def test_schedule_validation():
    with pytest.raises(ValueError):
        EpsSchedule((2, 4, 8), 0.01)       # increasing
    with pytest.raises(ValueError):
        EpsSchedule((8, 4, 1), 0.01)       # one-step smallest eps
    sch = EpsSchedule((8, 4, 2), 0.01)
    assert np.allclose(sch.eps_values, [0.08, 0.04, 0.02])
    assert sch.smallest_lag == 2


def test_richardson_exact_on_quadratics():
    eps = np.array([0.08, 0.04, 0.02])
    vals = 3.0 + 5.0 * eps - 7.0 * eps ** 2
    assert richardson_zero(eps, vals) == pytest.approx(3.0, abs=1e-12)
    # three equispaced-by-halving points reproduce the (8, -6, 1)/3 weights
    v = np.array([1.0, 2.0, 5.0])       # at eps 8a, 4a, 2a (descending storage)
    expect = (8 * 5.0 - 6 * 2.0 + 1.0) / 3.0
    assert richardson_zero(eps, v) == pytest.approx(expect, abs=1e-12)


# ---------------------------------------------------------------------------
# Covariation / quadratic variation
# ---------------------------------------------------------------------------

def test_covariation_constant_path_vanishes():
    g = Grid(T=1.0, n=64)
    c = SamplePath(g, np.full(65, 3.3))
    for eps in (2 * g.dt, 8 * g.dt):
        for t in (0.25, 1.0):
            assert covariation_eps(c, c, eps, t) == 0.0


def test_brownian_qv_is_time():
    g, mat = brownian_matrix(n=1024, m=100, seed=42)
    sch = EpsSchedule.for_grid(g)
    series = qv_ensemble(mat, g, sch, 1.0)
    assert abs(series.extrapolated - 1.0) < 0.05


def test_linear_path_covariation_closed_form():
    # brute-force evaluation of the Riemann sum for X_s = s
    g = Grid(T=1.0, n=128)
    x = SamplePath(g, g.points.copy())
    for lag in (2, 8):
        eps = lag * g.dt
        expected = 0.0
        for k in range(g.n):
            d = g.points[min(k + lag, g.n)] - g.points[k]
            expected += d * d / eps * g.dt
        got = covariation_eps(x, x, eps, 1.0)
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(eps, rel=0.1)  # eps-proportional, -> 0


def test_bounded_variation_qv_extrapolates_to_zero():
    g = Grid(T=1.0, n=256)
    x = SamplePath(g, g.points.copy())
    series = quadratic_variation(x, EpsSchedule.for_grid(g), 1.0)
    # the ladder values are quadratic in eps up to an exact dt^2/6 floor, so
    # the extrapolated limit is that floor: zero at vanishing mesh
    assert series.extrapolated == pytest.approx(g.dt ** 2 / 6.0, rel=1e-10)
    assert abs(series.extrapolated) < g.dt ** 2


def test_zero_qv_fractional():
    g = Grid(T=1.0, n=512)
    mat = ensemble(ProcessSpec.fractional(0.75), g, 30, 5).matrix()
    series = qv_ensemble(mat, g, EpsSchedule.for_grid(g), 1.0)
    assert series.extrapolated < 0.06


def test_bifractional_qv_scaling():
    H, K = 0.625, 0.8
    g = Grid(T=1.0, n=512)
    mat = ensemble(ProcessSpec.bifractional(H, K), g, 40, 9).matrix()
    series = qv_ensemble(mat, g, EpsSchedule.for_grid(g), 1.0)
    assert series.extrapolated == pytest.approx(2.0 ** (1 - K), rel=0.12)


def test_bilinearity_symmetry_positivity_scaling():
    g = Grid(T=1.0, n=128)
    rng = np.random.default_rng(0)
    xv, xv2, yv = rng.standard_normal((3, g.n + 1)).cumsum(axis=1) * np.sqrt(g.dt)
    X, X2, Y = (SamplePath(g, v) for v in (xv, xv2, yv))
    a, b = 2.25, -0.75
    comb = SamplePath(g, a * xv + b * xv2)
    for eps in (2 * g.dt, 16 * g.dt):
        for t in (0.5, 1.0):
            lhs = covariation_eps(comb, Y, eps, t)
            rhs = a * covariation_eps(X, Y, eps, t) + b * covariation_eps(X2, Y, eps, t)
            assert lhs == pytest.approx(rhs, abs=1e-12)
            assert covariation_eps(X, Y, eps, t) == covariation_eps(Y, X, eps, t)
            assert covariation_eps(X, X, eps, t) >= 0.0
            scaled = SamplePath(g, 3.0 * xv)
            assert covariation_eps(scaled, scaled, eps, t) == pytest.approx(
                9.0 * covariation_eps(X, X, eps, t), rel=1e-13)


def test_ensemble_spread_shrinks_along_ladder():
    # convergence in probability, operationalized: the median absolute
    # deviation of the per-path values shrinks with eps
    g, mat = brownian_matrix(n=2048, m=80, seed=51)
    series = qv_ensemble(mat, g, EpsSchedule.for_grid(g), 1.0)
    mad = series.diagnostics["mad"]
    assert mad[-1] < mad[0]
    assert series.stderr[-1] < series.stderr[0]


def test_mismatched_grids_rejected():
    a = SamplePath(Grid(T=1.0, n=64), np.zeros(65))
    b = SamplePath(Grid(T=1.0, n=32), np.zeros(33))
    with pytest.raises(ValueError):
        covariation_eps(a, b, 2 / 64, 1.0)


# ---------------------------------------------------------------------------
# Forward integrals
# ---------------------------------------------------------------------------

def test_forward_integral_of_one_telescopes():
    g = Grid(T=1.0, n=1024)
    w = simulate(ProcessSpec.brownian(1.0), g, 21)
    lag = 2
    got = forward_integral_eps(1.0, w, lag * g.dt, 1.0)
    # the lag-j telescoping leaves boundary averages: X_T minus the mean of
    # the first j values (the top average collapses onto the clamped X_T)
    expected = w.values[g.n] - w.values[:lag].mean()
    assert got == pytest.approx(expected, abs=1e-12)
    assert abs(got - (w.values[-1] - w.values[0])) < 0.2


def test_forward_integral_linear_case():
    # Y_r = r against X_r = r: Riemann-Stieltjes value t^2/2 in the limit
    g = Grid(T=1.0, n=512)
    x = SamplePath(g, g.points.copy())
    series = forward_integral(lambda t: t, x, EpsSchedule.for_grid(g), 1.0)
    # brute-force oracle at each eps
    for lag, got in zip((64, 32, 16, 8, 4, 2), series.values):
        expected = sum(
            g.points[k] * (g.points[min(k + lag, g.n)] - g.points[k])
            for k in range(g.n)
        ) / (lag * g.dt) * g.dt
        assert got == pytest.approx(expected, rel=1e-12)
    assert series.extrapolated == pytest.approx(0.5, abs=2e-3)


def test_forward_integral_against_ito_value():
    # int X d-X = (X_t^2 - X_0^2 - [X]_t)/2 exactly up to the boundary average
    g, mat = brownian_matrix(n=2048, m=60, seed=3)
    sch = EpsSchedule.for_grid(g)
    lag = sch.smallest_lag
    vals = []
    for row in mat:
        x = SamplePath(g, row)
        fi = forward_integral_eps(x, x, lag * g.dt, 1.0)
        vals.append(fi - (row[-1] ** 2 - 1.0) / 2.0)
    err = np.abs(np.mean(vals))
    assert err < 0.02


def test_improper_forward_integral_matches_proper_for_bounded_integrand():
    g = Grid(T=1.0, n=1024)
    w = simulate(ProcessSpec.brownian(1.0), g, 8)
    sch = EpsSchedule.for_grid(g)
    improper = improper_forward_integral(np.sin(w.values[:-1]), w, sch)
    proper = forward_integral_eps(np.sin(w.values[:-1]), w, 2 * g.dt, 1.0)
    assert improper.extrapolated == pytest.approx(proper, abs=0.05)
    assert not improper.diagnostics["divergence"]


def test_improper_forward_integral_zero_integrand():
    g = Grid(T=1.0, n=256)
    w = simulate(ProcessSpec.brownian(1.0), g, 8)
    series = improper_forward_integral(0.0, w, EpsSchedule.for_grid(g))
    assert series.extrapolated == 0.0
    assert not series.diagnostics["divergence"]


def test_improper_divergence_flag():
    g = Grid(T=1.0, n=1024)
    ramp = SamplePath(g, g.points.copy())
    y = 1.0 / (g.T - g.points[:-1])      # blows up at T, integral ~ -log(delta)
    series = improper_forward_integral(y, ramp, EpsSchedule.for_grid(g))
    assert series.diagnostics["divergence"]


# ---------------------------------------------------------------------------
# Integration by parts
# ---------------------------------------------------------------------------

def test_ibp_residual_constant_pair_exact():
    g = Grid(T=1.0, n=128)
    x = SamplePath(g, np.full(129, 2.0))
    y = SamplePath(g, np.full(129, -1.5))
    assert integration_by_parts_residual(x, y, 2 * g.dt, 1.0) == 0.0


def test_ibp_residual_shrinks_for_brownian_pair():
    g, mat = brownian_matrix(n=2048, m=40, seed=12)
    res = {}
    for lag in (64, 8):
        vals = []
        for i in range(0, 40, 2):
            x = SamplePath(g, mat[i])
            y = SamplePath(g, mat[i + 1])
            vals.append(abs(integration_by_parts_residual(x, y, lag * g.dt, 1.0)))
        res[lag] = np.median(vals)
    assert res[8] < res[64]
    assert res[8] < 0.05


def test_ibp_bv_case_against_stieltjes():
    # X_s = s has bounded variation: int X d-Y -> Y_t X_t - int Y ds
    g = Grid(T=1.0, n=2048)
    w = simulate(ProcessSpec.brownian(1.0), g, 4)
    x = SamplePath(g, g.points.copy())
    got = forward_integral_eps(x, w, 2 * g.dt, 1.0)
    stieltjes = w.values[-1] * 1.0 - np.trapezoid(w.values, dx=g.dt)
    assert got == pytest.approx(stieltjes, abs=0.06)
    resid = integration_by_parts_residual(x, w, 2 * g.dt, 1.0)
    assert abs(resid) < 0.06


def test_semimartingale_consistency():
    # forward integral of an adapted integrand vs the left-point Ito sum
    g, mat = brownian_matrix(n=2048, m=50, seed=33)
    gaps = {}
    for lag in (32, 2):
        diffs = []
        for row in mat:
            y = np.sin(row[:-1])
            ito = float((y * np.diff(row)).sum())
            x = SamplePath(g, row)
            diffs.append(abs(forward_integral_eps(y, x, lag * g.dt, 1.0) - ito))
        gaps[lag] = float(np.median(diffs))
    assert gaps[2] < gaps[32]
    assert gaps[2] < 3.0 * np.sqrt(2 * g.dt)


# ---------------------------------------------------------------------------
# Transported brackets
# ---------------------------------------------------------------------------

def test_bvm_identity_functions_reduce_to_covariation():
    g, mat = brownian_matrix(n=512, m=2, seed=6)
    X, Y = SamplePath(g, mat[0]), SamplePath(g, mat[1])
    ident = C01Function(f=lambda t, x: x, dx=lambda t, x: np.ones_like(x))
    sch = EpsSchedule.for_grid(g)
    lhs, rhs = bvm_covariation_check(ident, ident, X, Y, sch, 1.0)
    direct = covariation(X, Y, sch, 1.0)
    assert np.allclose(lhs.values, direct.values)
    assert rhs == pytest.approx(direct.values[-1], rel=1e-12)


def test_bvm_square_against_quadrature_oracle():
    g, mat = brownian_matrix(n=2048, m=30, seed=14)
    sq = C01Function(f=lambda t, x: x * x, dx=lambda t, x: 2.0 * x)
    sch = EpsSchedule.for_grid(g)
    rel_errs = []
    for row in mat[:10]:
        X = SamplePath(g, row)
        lhs, rhs = bvm_covariation_check(sq, sq, X, X, sch, 1.0)
        oracle = float((4.0 * row[:-1] ** 2).sum() * g.dt)
        rel_errs.append(abs(lhs.extrapolated - oracle) / max(oracle, 1e-12))
    assert np.median(rel_errs) < 0.15


def test_bvm_time_weighted_bracket_analytic():
    g, mat = brownian_matrix(n=512, m=1, seed=2)
    X = SamplePath(g, mat[0])
    f = C01Function(f=lambda t, x: t * x, dx=lambda t, x: t + 0.0 * x)
    ident = C01Function(f=lambda t, x: x, dx=lambda t, x: np.ones_like(x))
    sch = EpsSchedule.for_grid(g)
    _, rhs = bvm_covariation_check(f, ident, X, X, sch, 1.0,
                                   bracket=lambda s: s)
    m = g.n
    oracle = g.dt ** 2 * m * (m - 1) / 2.0   # discrete sum of t_k * dt
    assert rhs == pytest.approx(oracle, rel=1e-12)
    assert rhs == pytest.approx(0.5, abs=2 * g.dt)


# ---------------------------------------------------------------------------
# Deterministic calculus on the window interval
# ---------------------------------------------------------------------------

def test_two_var_norm_constant():
    res = two_var_norm(np.full(257, 4.0), 1.0 / 256)
    assert res.two_var == 0.0
    assert res.v2_norm == 4.0


def test_two_var_norm_linear_closed_form():
    # g(x) = x on [-1, 0]: brute-force the eps-integral with the frozen tail
    w = 256
    dt = 1.0 / w
    vals = np.arange(w + 1) * dt - 1.0
    res = two_var_norm(vals, dt)
    for eps, got in zip(res.eps, res.per_eps):
        lag = int(round(eps / dt))
        expected = 0.0
        for k in range(w):
            d = vals[min(k + lag, w)] - vals[k]
            expected += d * d * dt / eps
        assert got == pytest.approx(expected, rel=1e-12)
    assert res.two_var == res.per_eps.max()
    assert res.v2_norm == pytest.approx(1.0 + res.two_var)


def test_two_var_norm_brownian_path_is_finite():
    g = Grid(T=1.0, n=2048)
    w = simulate(ProcessSpec.brownian(1.0), g, 19)
    res = two_var_norm(w.values, g.dt)
    assert 0.2 < res.two_var < 5.0


def test_two_var_triangle_inequality():
    rng = np.random.default_rng(8)
    dt = 1.0 / 512
    for _ in range(5):
        f = rng.standard_normal(513).cumsum() * np.sqrt(dt)
        h = rng.standard_normal(513).cumsum() * np.sqrt(dt)
        lhs = two_var_norm(f + h, dt).two_var
        rhs = two_var_norm(f, dt).two_var + two_var_norm(h, dt).two_var
        # |.|_{2,var} is built from L2 norms per eps; allow sup-mixing slack
        assert lhs <= rhs * (1.0 + 1e-12) + 2 * np.sqrt(
            two_var_norm(f, dt).two_var * two_var_norm(h, dt).two_var)


def test_v2psi_constant_function_zero_target():
    ok, profile, dev = v2psi_check(np.full(129, 2.0), 1.0 / 128, QVTarget.zero(), 0.1)
    assert ok
    assert dev == 0.0


def test_v2psi_brownian_window_matches_length():
    g = Grid(T=1.0, n=4096)
    w = simulate(ProcessSpec.brownian(1.0), g, 77)
    ok, _, dev = v2psi_check(w.values, g.dt, QVTarget.linear(1.0), 0.10)
    assert ok, f"deviation {dev}"


def test_v2psi_rejects_zero_qv_path():
    g = Grid(T=1.0, n=2048)
    b = simulate(ProcessSpec.fractional(0.75), g, 5)
    ok, _, dev = v2psi_check(b.values, g.dt, QVTarget.linear(1.0), 0.10)
    assert not ok
    assert dev > 0.5


def test_det_forward_integral_bv_recovers_increment():
    # density 1 against a bounded variation f: f(b) - f(a) in the limit
    n = 1024
    a, b = -1.0, 0.0
    dt = (b - a) / n
    s = a + np.arange(n + 1) * dt
    f = np.sin(3.0 * s) + s
    got = det_forward_integral(1.0, f, dt, 2)
    assert got == pytest.approx(f[-1] - f[0], abs=5e-3)


def test_det_forward_integral_by_parts_oracle():
    # left-vanishing BV density g: limit equals g(b)f(b) - int f dg (Stieltjes)
    n = 2048
    a, b = -1.0, 0.0
    dt = (b - a) / n
    s = a + np.arange(n + 1) * dt
    g = (s - a) ** 2          # BV, g(a) = 0
    f = np.cos(2.0 * s)
    got = det_forward_integral(g[:-1], f, dt, 2)
    dg = np.diff(g)
    stieltjes = g[-1] * f[-1] - float((f[1:] * dg).sum())
    assert got == pytest.approx(stieltjes, abs=5e-3)


def test_det_forward_integral_constant_f():
    n = 128
    dt = 1.0 / n
    f = np.full(n + 1, 9.0)
    assert det_forward_integral(2.0, f, dt, 4) == 0.0
