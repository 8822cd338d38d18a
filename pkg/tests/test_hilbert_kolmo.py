import math

import numpy as np
import pytest

from regvar.hilbert_kolmo import (
    CoeffFns,
    GalerkinSpace,
    KolmoProblem,
    LinearQuadraticSolution,
    OperatorMat,
    check_coefficient_bounds,
    chi_qv_convolution,
    decomposition_check,
    functional_operator,
    hs_identity_check,
    integrate_operator_trace,
    kolmogorov_mc,
    martingale_bracket_Q_phi,
    mc_error_slope,
    pairing_trace,
    rank_one_tensor,
    simulate_convolution,
    simulate_q_wiener,
    tensor_operator,
    trace_and_bounds,
)


# ---------------------------------------------------------------------------
# Spectral truncation
# ---------------------------------------------------------------------------

def test_space_validation():
    with pytest.raises(ValueError):
        GalerkinSpace(a=np.array([-1.0, -2.0]), q=np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        GalerkinSpace(a=np.array([1.0, -2.0]), q=np.array([1.0, 0.5]))
    s = GalerkinSpace.heat(4)
    assert s.a[0] == pytest.approx(-np.pi ** 2)
    assert s.q[3] == pytest.approx(1.0 / 16.0)


def test_semigroup_law():
    s = GalerkinSpace.heat(8)
    t1, t2 = 0.13, 0.41
    assert np.allclose(s.semigroup(t1 + t2), s.semigroup(t1) * s.semigroup(t2),
                       rtol=1e-14)


# ---------------------------------------------------------------------------
# Trace algebra
# ---------------------------------------------------------------------------

def test_trace_and_bounds_identity():
    tr, l1, ok = trace_and_bounds(np.eye(3))
    assert tr == 3.0 and l1 == pytest.approx(3.0) and ok


def test_trace_and_bounds_signed_diagonal():
    tr, l1, ok = trace_and_bounds(np.diag([1.0, -2.0]))
    assert tr == -1.0
    assert l1 == pytest.approx(3.0)
    assert ok


def test_trace_bounds_against_svd_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        mat = rng.standard_normal((5, 5))
        tr, l1, ok = trace_and_bounds(mat)
        # independent decomposition: singular values via the Gram spectrum
        sv = np.sqrt(np.maximum(np.linalg.eigvalsh(mat.T @ mat), 0.0))
        assert l1 == pytest.approx(sv.sum(), rel=1e-10)
        assert abs(tr) <= l1 + 1e-10 * l1
        assert np.abs(np.diag(mat)).sum() <= l1 + 1e-10 * l1
        assert ok


def test_trace_role_enforced():
    with pytest.raises(ValueError):
        trace_and_bounds(OperatorMat(np.eye(2), role="bounded"))


def test_hs_identity():
    assert hs_identity_check(np.eye(4)) == 0.0
    u = np.array([1.0, -2.0, 0.5])
    v = np.array([0.3, 0.7, -1.1])
    mat = np.outer(u, v)
    # both sides equal |u|^2 |v|^2 for a rank-one map
    target = (u @ u) * (v @ v)
    assert (mat * mat).sum() == pytest.approx(target, rel=1e-13)
    assert hs_identity_check(mat) <= 1e-12 * target
    rng = np.random.default_rng(1)
    m = rng.standard_normal((12, 12))
    assert hs_identity_check(m) <= 1e-12 * (m * m).sum()


def test_rank_one_pairing():
    rng = np.random.default_rng(2)
    x, y, a, b = rng.standard_normal((4, 6))
    got = pairing_trace(tensor_operator(rank_one_tensor([x], [y])),
                        functional_operator(rank_one_tensor([a], [b])))
    assert got == pytest.approx((a @ x) * (b @ y), rel=1e-12)


def test_pairing_identity_functional_gives_trace():
    rng = np.random.default_rng(3)
    xs = rng.standard_normal((3, 5))
    ys = rng.standard_normal((3, 5))
    U = rank_one_tensor(xs, ys)
    got = pairing_trace(tensor_operator(U), functional_operator(np.eye(5)))
    assert got == pytest.approx(np.trace(U), rel=1e-12)


def test_pairing_against_brute_force():
    rng = np.random.default_rng(4)
    xs = rng.standard_normal((3, 7))
    ys = rng.standard_normal((3, 7))
    cs = rng.standard_normal((2, 7))
    ds = rng.standard_normal((2, 7))
    got = pairing_trace(tensor_operator(rank_one_tensor(xs, ys)),
                        functional_operator(rank_one_tensor(cs, ds)))
    brute = sum((c @ x) * (d @ y)
                for x, y in zip(xs, ys) for c, d in zip(cs, ds))
    assert got == pytest.approx(brute, rel=1e-12)


def test_integrate_operator_trace_constant_identity():
    d, K, T = 4, 16, 2.0
    nodes = np.broadcast_to(np.eye(d), (K, d, d))
    integral, residual, psd = integrate_operator_trace(nodes, T / K)
    assert np.trace(integral) == pytest.approx(d * T, rel=1e-14)
    assert residual <= 1e-12
    assert psd.all()


def test_integrate_operator_trace_linear_ramp():
    d, K, T = 3, 64, 1.0
    dt = T / K
    rs = np.arange(K) * dt
    nodes = rs[:, None, None] * np.eye(d)
    integral, residual, _ = integrate_operator_trace(nodes, dt)
    discrete = d * float((rs * dt).sum())
    assert np.trace(integral) == pytest.approx(discrete, rel=1e-13)
    assert np.trace(integral) == pytest.approx(d * T * T / 2.0, abs=d * dt)
    assert residual <= 1e-12


def test_integrate_operator_trace_flags_non_psd():
    nodes = np.stack([np.eye(2), -np.eye(2)])
    _, _, psd = integrate_operator_trace(nodes, 0.5)
    assert psd[0] and not psd[1]


def test_martingale_bracket():
    space = GalerkinSpace.heat(5)
    assert np.allclose(martingale_bracket_Q_phi(np.eye(5), space), np.diag(space.q))
    inv_root = np.diag(space.q ** -0.5)
    assert np.allclose(martingale_bracket_Q_phi(inv_root, space), np.eye(5))
    rng = np.random.default_rng(5)
    phi = rng.standard_normal((5, 5))
    qphi = martingale_bracket_Q_phi(phi, space)
    assert np.all(np.linalg.eigvalsh(qphi) >= -1e-12)
    hs2 = ((phi * np.sqrt(space.q)) ** 2).sum()
    assert np.trace(qphi) == pytest.approx(hs2, rel=1e-12)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def test_q_wiener_increment_law():
    space = GalerkinSpace.heat(6)
    dt = 0.01
    incs = simulate_q_wiener(space, 2000, dt, seed=8, m=5).reshape(-1, 6)
    n = incs.shape[0]
    for i in (0, 3, 5):
        var = incs[:, i].var(ddof=1)
        target = space.q[i] * dt
        assert abs(var - target) <= 4 * target * np.sqrt(2.0 / n)
    trace_emp = incs.var(axis=0, ddof=1).sum()
    assert trace_emp == pytest.approx(dt * space.q.sum(), rel=0.05)


def test_convolution_pure_drift():
    space = GalerkinSpace(a=np.zeros(3), q=np.ones(3))
    b_bar = np.array([1.0, -0.5, 2.0])
    coeffs = CoeffFns.constant(np.zeros((3, 3)), b_bar)
    path = simulate_convolution(space, coeffs, np.zeros(3), 64, 1.0 / 64, seed=0)
    assert np.allclose(path.X[0, -1], b_bar, atol=1e-12)
    assert np.allclose(path.X[0, 32], 0.5 * b_bar, atol=1e-12)


def test_convolution_pure_semigroup():
    space = GalerkinSpace.heat(4)
    x0 = np.array([1.0, 0.5, -0.25, 2.0])
    coeffs = CoeffFns.constant(np.zeros((4, 4)))
    path = simulate_convolution(space, coeffs, x0, 128, 0.25 / 128, seed=0)
    expect = x0 * np.exp(space.a * 0.25)
    assert np.allclose(path.X[0, -1], expect, rtol=1e-12)


def test_convolution_ou_variance_oracle():
    space = GalerkinSpace.ou(4, rate=2.0)
    coeffs = CoeffFns.constant(np.eye(4))
    n_steps, t = 512, 1.0
    dt = t / n_steps
    path = simulate_convolution(space, coeffs, np.zeros(4), n_steps, dt, seed=12,
                                m=3000, store_split=False)
    final = path.X[:, -1, :]
    for i in range(4):
        target = space.q[i] * (1.0 - math.exp(2 * space.a[i] * t)) / (-2 * space.a[i])
        var = final[:, i].var(ddof=1)
        se = target * np.sqrt(2.0 / 3000)
        scheme_bias = abs(space.a[i]) * dt * target
        assert abs(var - target) <= 4 * se + 2 * scheme_bias


def test_convolution_split_bookkeeping():
    space = GalerkinSpace.ou(3)
    coeffs = CoeffFns.constant(np.eye(3), np.array([0.5, 0.0, -0.2]))
    path = simulate_convolution(space, coeffs, np.ones(3), 256, 1.0 / 256, seed=4, m=2)
    assert path.split_residual() < 0.05
    tv = path.nu0_total_variation()
    assert tv.shape == (2,)
    assert np.all(tv > 0)


def test_chi_qv_convolution_noiseless():
    space = GalerkinSpace.heat(4)
    coeffs = CoeffFns.constant(np.zeros((4, 4)))
    path = simulate_convolution(space, coeffs, np.ones(4), 256, 0.5 / 256, seed=0)
    e0 = np.eye(4)[0]
    out = chi_qv_convolution(path, e0, e0, (8, 4, 2), 0.5,
                             sigma_bar=np.zeros((4, 4)))
    assert out["closed_form"] == 0.0
    # the smooth decay carries eps-variation proportional to eps
    vals = np.atleast_2d(out["estimator"].values)[0]
    assert vals[-1] == pytest.approx(vals[0] / 4.0, rel=0.15)
    assert abs(out["estimator"].extrapolated) < 0.05 * vals[-1]


def test_chi_qv_convolution_rank_one_closed_form():
    space = GalerkinSpace.heat(8)
    coeffs = CoeffFns.constant(np.eye(8))
    n_steps = 1024
    dt = 0.5 / n_steps
    path = simulate_convolution(space, coeffs, np.zeros(8), n_steps, dt, seed=3, m=60)
    e0 = np.eye(8)[0]
    out = chi_qv_convolution(path, e0, e0, (64, 32, 16, 8, 4, 2), 0.5,
                             sigma_bar=np.eye(8))
    assert out["closed_form"] == pytest.approx(0.5 * space.q[0])
    assert out["estimator"].extrapolated == pytest.approx(out["closed_form"], rel=0.08)
    a_vals = out["a_part"].mean
    assert a_vals[-1] < 0.1 * out["estimator"].mean[-1]
    assert np.all(np.diff(a_vals) < 0)  # shrinks along the eps ladder


# ---------------------------------------------------------------------------
# Kolmogorov value function
# ---------------------------------------------------------------------------

def test_kolmogorov_mc_degenerate():
    space = GalerkinSpace(a=np.zeros(3), q=np.ones(3))
    coeffs = CoeffFns.constant(np.zeros((3, 3)))
    eta = np.array([0.3, -1.0, 2.0])
    problem = KolmoProblem(space=space, coeffs=coeffs,
                           g=lambda x: (x ** 2).sum(axis=-1), s=0.7, eta=eta)
    res = kolmogorov_mc(problem, 500, seed=0, n_steps=32)
    assert res["value"] == pytest.approx(float((eta ** 2).sum()), rel=1e-12)
    assert res["stderr"] == 0.0


def test_kolmogorov_mc_ou_quadratic_oracle():
    space = GalerkinSpace.ou(6, rate=0.5)
    rng = np.random.default_rng(6)
    G = rng.standard_normal((6, 6))
    G = 0.2 * (G + G.T) + np.eye(6)
    c = rng.standard_normal(6) * 0.3
    lq = LinearQuadraticSolution(space=space, sigma_bar=np.eye(6), G=G, c=c)
    eta = np.full(6, 0.4)
    oracle = lq.value(0.5, eta)
    res = kolmogorov_mc(lq.problem(0.5, eta), 40000, seed=11, n_steps=256)
    assert abs(res["value"] - oracle) <= 5 * res["stderr"] + 0.01 * abs(oracle)


def test_kolmogorov_mc_linear_g_with_drift():
    # V = <c, e^{sA} eta + int_0^s e^{rA} b dr>: the noise integrates to zero
    d = 4
    space = GalerkinSpace.ou(d, rate=1.0)
    b_bar = np.array([0.5, -0.3, 0.2, 0.1])
    c = np.array([1.0, 2.0, -1.0, 0.5])
    coeffs = CoeffFns.constant(np.eye(d), b_bar)
    eta = np.full(d, 0.25)
    s = 0.6
    problem = KolmoProblem(space=space, coeffs=coeffs, g=lambda x: x @ c, s=s, eta=eta)
    res = kolmogorov_mc(problem, 60000, seed=13, n_steps=256)
    drift_int = b_bar * (np.exp(space.a * s) - 1.0) / space.a
    oracle = float(c @ (np.exp(space.a * s) * eta + drift_int))
    assert abs(res["value"] - oracle) <= 5 * res["stderr"] + 2e-3


def test_kolmogorov_mc_reproducible_and_counts_bad_draws():
    space = GalerkinSpace.ou(3)
    coeffs = CoeffFns.constant(np.eye(3))
    problem = KolmoProblem(space=space, coeffs=coeffs,
                           g=lambda x: (x ** 2).sum(axis=-1), s=0.5,
                           eta=np.zeros(3))
    a = kolmogorov_mc(problem, 5000, seed=21, n_steps=64)
    b = kolmogorov_mc(problem, 5000, seed=21, n_steps=64)
    assert a["value"] == b["value"]

    def spiky(x):
        g = (x ** 2).sum(axis=-1)
        g = np.where(x[:, 0] > 0.8, np.nan, g)
        return g

    bad = KolmoProblem(space=space, coeffs=coeffs, g=spiky, s=0.5, eta=np.zeros(3))
    res = kolmogorov_mc(bad, 5000, seed=21, n_steps=64)
    assert res["excluded"] > 0
    assert res["paths"] + res["excluded"] == 5000


def test_mc_error_slope_on_gaussian_pool():
    rng = np.random.default_rng(9)
    samples = 2.0 + rng.standard_normal(400_000)
    out = mc_error_slope(samples, 2.0, (100, 1000, 10000))
    assert -0.65 <= out["slope"] <= -0.35


# ---------------------------------------------------------------------------
# Decomposition of strong solutions
# ---------------------------------------------------------------------------

def test_decomposition_noiseless_flow_is_exact():
    space = GalerkinSpace.ou(4)
    lq = LinearQuadraticSolution(space=space, sigma_bar=np.zeros((4, 4)),
                                 G=np.eye(4), c=np.ones(4))
    res = decomposition_check(lq, 0.5, np.full(4, 0.7), m=100, n_steps=32, seed=1)
    assert abs(res["mean_R"]) < 1e-10
    assert res["var_R"] < 1e-20


def test_decomposition_ou_quadratic():
    space = GalerkinSpace.ou(6)
    lq = LinearQuadraticSolution(space=space, sigma_bar=np.eye(6),
                                 G=np.eye(6), c=np.zeros(6))
    eta = np.full(6, 0.5)
    coarse = decomposition_check(lq, 0.5, eta, m=40000, n_steps=32, seed=5)
    fine = decomposition_check(lq, 0.5, eta, m=40000, n_steps=64, seed=6)
    # pathwise identity: the mean defect scales like dt
    ratio = coarse["mean_R"] / fine["mean_R"]
    assert 1.4 <= ratio <= 2.6
    # martingale diagnostics
    assert abs(fine["mean_integral"]) <= 2.5 * fine["se_integral"]
    assert fine["var_integral"] == pytest.approx(fine["isometry_quadrature"], rel=0.1)


def test_coefficient_bound_check():
    space = GalerkinSpace.ou(4)
    ok = check_coefficient_bounds(CoeffFns.constant(np.eye(4)), space)
    assert ok["lipschitz_ok"] and ok["growth_ok"]
    rowdy = CoeffFns(b=lambda t, x: x ** 2, sigma=np.eye(4), lipschitz=0.5)
    out = check_coefficient_bounds(rowdy, space, n_samples=128)
    assert not (out["lipschitz_ok"] and out["growth_ok"])
