import numpy as np
import pytest

from regvar.grid_paths import (
    Grid,
    ProcessSpec,
    SamplePath,
    derived_seed,
    ensemble,
    ensemble_to_csv,
    eval_extended,
    fbm_covariance,
    bifbm_covariance,
    path_to_csv,
    simulate,
)


def test_grid_invariants():
    g = Grid(T=1.0, n=8)
    assert g.dt == pytest.approx(0.125)
    pts = g.points
    assert np.all(np.diff(pts) > 0)
    assert abs(pts[-1] - g.T) <= 4 * np.finfo(float).eps
    with pytest.raises(ValueError):
        Grid(T=1.0, n=1)
    with pytest.raises(ValueError):
        Grid(T=-1.0, n=8)


def test_eval_extended_constant_prolongation():
    g = Grid(T=1.0, n=4)
    c = 2.5
    path = SamplePath(g, np.full(5, c))
    assert eval_extended(path, -1.0) == c
    w = simulate(ProcessSpec.brownian(1.0), g, 3)
    assert eval_extended(w, g.T + 0.5) == w.values[-1]
    assert eval_extended(w, -0.3) == w.values[0]


def test_eval_extended_linear_interpolation():
    # midpoint between nodes sits halfway up a linear segment
    g = Grid(T=1.0, n=2)
    path = SamplePath(g, np.array([0.0, 1.0, 2.0]))
    assert eval_extended(path, g.dt / 2) == pytest.approx(0.5)
    # continuity at the boundary of the prolongation
    assert eval_extended(path, 0.0) == path.values[0]
    assert eval_extended(path, -1e-9) == path.values[0]


def test_deterministic_process():
    g = Grid(T=2.0, n=16)
    path = simulate(ProcessSpec.deterministic("const:3"), g, 0)
    assert np.all(path.values == 3.0)
    ramp = simulate(ProcessSpec.deterministic("linear:2"), g, 0)
    assert np.allclose(ramp.values, 2.0 * g.points)


def test_brownian_increment_law():
    # variance of increments matches dt within three standard errors
    g = Grid(T=1.0, n=8)
    m = 1250  # 10^4 increments in total
    mat = ensemble(ProcessSpec.brownian(1.0), g, m, 2024).matrix()
    incs = np.diff(mat, axis=1).ravel()
    n = len(incs)
    assert n == 10000
    var = incs.var(ddof=1)
    se = g.dt * np.sqrt(2.0 / n)
    assert abs(var - g.dt) <= 3 * se


def test_brownian_sigma_scaling_exact():
    g = Grid(T=1.0, n=64)
    seed = derived_seed(99, 0)
    base = simulate(ProcessSpec.brownian(1.0), g, seed)
    scaled = simulate(ProcessSpec.brownian(3.0), g, derived_seed(99, 0))
    assert np.array_equal(scaled.values, 3.0 * base.values)


def test_fbm_marginal_variance():
    g = Grid(T=1.0, n=64)
    H = 0.75
    m = 400
    mat = ensemble(ProcessSpec.fractional(H), g, m, 7).matrix()
    for k in (16, 32, 64):
        t = g.points[k]
        target = t ** (2 * H)
        sample = mat[:, k]
        var = sample.var(ddof=1)
        se = target * np.sqrt(2.0 / (m - 1))
        assert abs(var - target) <= 3 * se


def test_bifbm_covariance_is_psd():
    # direct factorization of the two-parameter covariance at desk scale
    g = Grid(T=1.0, n=512)
    times = g.points[1:]
    cov = bifbm_covariance(times, 0.625, 0.8)
    L = np.linalg.cholesky(cov + 1e-12 * np.eye(len(cov)))
    assert np.all(np.isfinite(L))
    eigs = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    assert eigs.min() >= -1e-10 * eigs.max()


def test_fbm_covariance_halves_to_brownian():
    times = np.linspace(0.25, 1.0, 4)
    cov = fbm_covariance(times, 0.5)
    expect = np.minimum(times[:, None], times[None, :])
    assert np.allclose(cov, expect, atol=1e-12)


def test_ensemble_single_path_matches_simulate():
    g = Grid(T=1.0, n=32)
    ens = ensemble(ProcessSpec.brownian(1.0), g, 1, 5)
    direct = simulate(ProcessSpec.brownian(1.0), g, derived_seed(5, 0))
    assert np.array_equal(ens.matrix()[0], direct.values)
    assert np.array_equal(ens.path(0).values, direct.values)


def test_ensemble_reproducible_and_order_free():
    g = Grid(T=1.0, n=32)
    spec = ProcessSpec.dirichlet(ProcessSpec.brownian(1.0),
                                 ProcessSpec.fractional(0.75), 0.5)
    a = ensemble(spec, g, 5, 11)
    b = ensemble(spec, g, 5, 11)
    # reading paths out of order does not change them
    assert np.array_equal(a.path(3).values, b.matrix()[3])
    assert ensemble_to_csv(a) == ensemble_to_csv(b)


def test_ensemble_matrix_independent_of_thread_count():
    g = Grid(T=1.0, n=64)
    spec = ProcessSpec.fractional(0.7)
    serial = ensemble(spec, g, 8, 77).matrix(threads=1)
    threaded = ensemble(spec, g, 8, 77).matrix(threads=4)
    assert np.array_equal(serial, threaded)


def test_ensemble_mean_clt_bound():
    g = Grid(T=1.0, n=64)
    m = 100
    mat = ensemble(ProcessSpec.brownian(1.0), g, m, 31).matrix()
    bound = 3.0 * np.sqrt(g.T) / np.sqrt(m)
    assert abs(mat[:, -1].mean()) <= bound


def test_dirichlet_sum_is_base_plus_scaled_perturbation():
    g = Grid(T=1.0, n=32)
    spec = ProcessSpec.dirichlet(ProcessSpec.brownian(1.0),
                                 ProcessSpec.fractional(0.75), 0.5)
    seed = derived_seed(13, 0)
    x = simulate(spec, g, seed)
    base_seed, pert_seed = derived_seed(13, 0).spawn(2)
    base = simulate(ProcessSpec.brownian(1.0), g, base_seed)
    pert = simulate(ProcessSpec.fractional(0.75), g, pert_seed)
    assert np.allclose(x.values, base.values + 0.5 * pert.values, atol=1e-14)


def test_bounded_variation_path_is_monotone():
    g = Grid(T=1.0, n=128)
    path = simulate(ProcessSpec.bounded_variation(), g, 17)
    assert np.all(np.diff(path.values) >= 0)


def test_parameter_validation():
    with pytest.raises(ValueError):
        ProcessSpec.fractional(1.5)
    with pytest.raises(ValueError):
        ProcessSpec.bifractional(0.5, 0.0)
    with pytest.raises(ValueError):
        ProcessSpec(kind="bm", sigma=-1.0)
    with pytest.raises(ValueError):
        ProcessSpec(kind="nope")


def test_cholesky_guard():
    g = Grid(T=1.0, n=2 ** 13 + 2)
    with pytest.raises(ValueError, match="dense-Cholesky guard"):
        simulate(ProcessSpec.fractional(0.6), g, 0)


def test_csv_dump_format():
    g = Grid(T=1.0, n=2)
    path = SamplePath(g, np.array([0.0, 1.0 / 3.0, 2.0]))
    text = path_to_csv(path)
    lines = text.strip().split("\n")
    assert lines[0] == "t,x"
    assert len(lines) == 4
    # 17 significant digits survive a round trip
    assert float(lines[1].split(",")[1]) == 0.0
    assert float(lines[2].split(",")[1]) == 1.0 / 3.0
