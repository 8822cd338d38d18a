"""Sample paths of the process zoo on uniform grids.

Gaussian kinds are drawn with their exact joint law on the grid (dense
Cholesky of the covariance matrix, cached per grid).  Every path is a
deterministic function of ``(master_seed, path_index)`` so ensembles are
reproducible bit-for-bit regardless of evaluation order or thread count.

Paths are prolonged outside ``[0, T]`` by freezing the boundary values:
``X_t = X_0`` for ``t <= 0`` and ``X_t = X_T`` for ``t >= T``.  Between grid
nodes evaluation is linear interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

__all__ = [
    "Grid",
    "SamplePath",
    "ProcessSpec",
    "PathEnsemble",
    "eval_extended",
    "simulate",
    "ensemble",
    "derived_seed",
    "path_to_csv",
    "ensemble_to_csv",
    "DETERMINISTIC_REGISTRY",
]

# Dense Cholesky guard: (n+1)^2 covariance factorizations beyond this need an
# explicit opt-in, they are expensive and desk-scale experiments stay below it.
MAX_CHOLESKY_N = 2 ** 13

_JITTER_STEPS = (1e-14, 1e-12, 1e-10)


@dataclass(frozen=True)
class Grid:
    """Uniform time grid t_k = k * dt on [0, T] with n steps."""

    T: float
    n: int

    def __post_init__(self):
        if not (self.T > 0.0):
            raise ValueError(f"horizon must be positive, got T={self.T}")
        if self.n < 2:
            raise ValueError(f"need at least 2 steps, got n={self.n}")

    @property
    def dt(self) -> float:
        return self.T / self.n

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.dt

    def index_of(self, t: float) -> int:
        """Nearest grid index for a time in [0, T]."""
        k = int(round(t / self.dt))
        return min(max(k, 0), self.n)


@dataclass
class SamplePath:
    """A real-valued trajectory sampled on a uniform grid."""

    grid: Grid
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n + 1,):
            raise ValueError(
                f"values shape {self.values.shape} does not match grid with n={self.grid.n}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("path values must be finite")

    def __call__(self, t) -> float:
        return eval_extended(self, t)


def eval_extended(path: SamplePath, t):
    """Evaluate a path at any real time.

    Constant extension outside [0, T] (left value X_0, right value X_T),
    linear interpolation between grid nodes inside.  Accepts scalars or
    arrays.
    """
    pts = path.grid.points
    return np.interp(t, pts, path.values)


# ---------------------------------------------------------------------------
# Process specifications
# ---------------------------------------------------------------------------

def _det_linear(slope: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda t: slope * t


DETERMINISTIC_REGISTRY: dict[str, Callable[[float], Callable]] = {
    # id prefix -> factory taking the (optional) numeric parameter
    "const": lambda c: (lambda t: np.full_like(np.asarray(t, dtype=float), c)),
    "linear": _det_linear,
    "sin": lambda w: (lambda t: np.sin(w * np.asarray(t, dtype=float))),
}


def _resolve_deterministic(fn_id: str) -> Callable:
    name, _, arg = fn_id.partition(":")
    if name not in DETERMINISTIC_REGISTRY:
        raise ValueError(f"unknown deterministic function id {fn_id!r}")
    value = float(arg) if arg else 1.0
    return DETERMINISTIC_REGISTRY[name](value)


@dataclass(frozen=True)
class ProcessSpec:
    """Declarative description of a process to simulate.

    kind is one of 'bm', 'fbm', 'bifbm', 'dirichlet', 'bv', 'det'.
    """

    kind: str
    sigma: float = 1.0
    hurst: float = 0.5
    kappa: float = 1.0          # second bifractional parameter K
    base: Optional["ProcessSpec"] = None
    perturbation: Optional["ProcessSpec"] = None
    scale: float = 1.0          # Dirichlet perturbation weight, or global rescale
    fn_id: str = "const:0"      # deterministic function id

    def __post_init__(self):
        if self.kind == "bm":
            if self.sigma < 0:
                raise ValueError("bm needs sigma >= 0")
        elif self.kind == "fbm":
            if not (0.0 < self.hurst < 1.0):
                raise ValueError(f"fbm needs H in (0,1), got {self.hurst}")
        elif self.kind == "bifbm":
            if not (0.0 < self.hurst < 1.0):
                raise ValueError(f"bifbm needs H in (0,1), got {self.hurst}")
            if not (0.0 < self.kappa <= 1.0):
                raise ValueError(f"bifbm needs K in (0,1], got {self.kappa}")
        elif self.kind == "dirichlet":
            if self.base is None or self.perturbation is None:
                raise ValueError("dirichlet needs base and perturbation specs")
        elif self.kind == "bv":
            pass
        elif self.kind == "det":
            _resolve_deterministic(self.fn_id)
        else:
            raise ValueError(f"unknown process kind {self.kind!r}")

    # convenience constructors -------------------------------------------------
    @staticmethod
    def brownian(sigma: float = 1.0) -> "ProcessSpec":
        return ProcessSpec(kind="bm", sigma=sigma)

    @staticmethod
    def fractional(hurst: float) -> "ProcessSpec":
        return ProcessSpec(kind="fbm", hurst=hurst)

    @staticmethod
    def bifractional(hurst: float, kappa: float, scale: float = 1.0) -> "ProcessSpec":
        return ProcessSpec(kind="bifbm", hurst=hurst, kappa=kappa, scale=scale)

    @staticmethod
    def dirichlet(base: "ProcessSpec", perturbation: "ProcessSpec", scale: float) -> "ProcessSpec":
        return ProcessSpec(kind="dirichlet", base=base, perturbation=perturbation, scale=scale)

    @staticmethod
    def zero_qv_default() -> "ProcessSpec":
        # fractional noise with H = 3/4 has vanishing quadratic variation,
        # the stock choice for the zero-QV part of a Dirichlet sum
        return ProcessSpec(kind="fbm", hurst=0.75)

    @staticmethod
    def deterministic(fn_id: str) -> "ProcessSpec":
        return ProcessSpec(kind="det", fn_id=fn_id)

    @staticmethod
    def bounded_variation() -> "ProcessSpec":
        return ProcessSpec(kind="bv")

    def describe(self) -> str:
        if self.kind == "bm":
            return f"bm(sigma={self.sigma:g})"
        if self.kind == "fbm":
            return f"fbm(h={self.hurst:g})"
        if self.kind == "bifbm":
            s = f"bifbm(h={self.hurst:g},k={self.kappa:g}"
            if self.scale != 1.0:
                s += f",scale={self.scale:g}"
            return s + ")"
        if self.kind == "dirichlet":
            return (
                f"dirichlet({self.base.describe()}+"
                f"{self.scale:g}*{self.perturbation.describe()})"
            )
        if self.kind == "bv":
            return "bv(runmax)"
        return f"det({self.fn_id})"


# ---------------------------------------------------------------------------
# Covariance factors (cached: the O(n^3) factorization amortizes over ensembles)
# ---------------------------------------------------------------------------

def _gap_powers(n_times: int, dt: float, exponent: float) -> np.ndarray:
    """|t_i - t_j|^exponent on a uniform grid via the one-dimensional profile."""
    prof = (np.arange(n_times) * dt) ** exponent
    i = np.arange(n_times)
    return prof[np.abs(i[:, None] - i[None, :])]


def fbm_covariance(times: np.ndarray, hurst: float) -> np.ndarray:
    h2 = 2.0 * hurst
    diag = np.abs(times) ** h2
    dt = times[1] - times[0] if len(times) > 1 else times[0]
    return 0.5 * (diag[:, None] + diag[None, :] - _gap_powers(len(times), dt, h2))


def bifbm_covariance(times: np.ndarray, hurst: float, kappa: float) -> np.ndarray:
    # standard two-parameter covariance from the literature:
    # R(s,t) = 2^{-K} ((s^{2H} + t^{2H})^K - |t-s|^{2HK})
    h2 = 2.0 * hurst
    diag = np.abs(times) ** h2
    dt = times[1] - times[0] if len(times) > 1 else times[0]
    return 2.0 ** (-kappa) * (
        (diag[:, None] + diag[None, :]) ** kappa
        - _gap_powers(len(times), dt, h2 * kappa)
    )


def _robust_cholesky(cov: np.ndarray) -> np.ndarray:
    """Cholesky factor with symmetrization and a bounded jitter ladder."""
    sym = 0.5 * (cov + cov.T)
    try:
        return np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        pass
    scale = float(np.abs(np.diag(sym)).max())
    for eps in _JITTER_STEPS:
        try:
            return np.linalg.cholesky(sym + eps * scale * np.eye(len(sym)))
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError(
        "covariance not positive definite even after symmetrization and jitter; "
        "check process parameters and grid"
    )


@lru_cache(maxsize=8)
def _gaussian_factor(kind: str, hurst: float, kappa: float, T: float, n: int) -> np.ndarray:
    if n > MAX_CHOLESKY_N:
        raise ValueError(
            f"n={n} exceeds the dense-Cholesky guard {MAX_CHOLESKY_N}; "
            "raise regvar.grid_paths.MAX_CHOLESKY_N explicitly if you mean it"
        )
    times = np.arange(1, n + 1) * (T / n)  # t_0 = 0 is handled separately, X_0 = 0
    if kind == "fbm":
        cov = fbm_covariance(times, hurst)
    elif kind == "bifbm":
        cov = bifbm_covariance(times, hurst, kappa)
    else:
        raise ValueError(kind)
    return _robust_cholesky(cov)


# ---------------------------------------------------------------------------
# Seeding and simulation
# ---------------------------------------------------------------------------

_STREAM_BASE = 0x5EED
_STREAM_PERT = 0xD1FF


def derived_seed(master_seed: int, index: int, stream: int = 0) -> np.random.SeedSequence:
    """Independent child seed for path `index` of a given logical stream."""
    return np.random.SeedSequence(entropy=(int(master_seed), int(stream), int(index)))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def simulate(spec: ProcessSpec, grid: Grid, seed) -> SamplePath:
    """Draw one path of `spec` on `grid`.

    Gaussian kinds use the exact joint law; Brownian motion uses the O(n)
    increment construction.  The draw is a pure function of the seed.
    """
    rng = _rng(seed)
    values = _simulate_values(spec, grid, rng, seed)
    return SamplePath(grid=grid, values=values, label=spec.describe())


def _simulate_values(spec: ProcessSpec, grid: Grid, rng: np.random.Generator, seed) -> np.ndarray:
    n = grid.n
    if spec.kind == "bm":
        z = rng.standard_normal(n)
        incs = math.sqrt(grid.dt) * z
        out = np.empty(n + 1)
        out[0] = 0.0
        np.cumsum(incs, out=out[1:])
        # sigma scaling applied last: sigma * simulate(bm(1)) holds exactly
        return spec.sigma * out
    if spec.kind in ("fbm", "bifbm"):
        L = _gaussian_factor(spec.kind, spec.hurst, spec.kappa, grid.T, n)
        z = rng.standard_normal(n)
        out = np.empty(n + 1)
        out[0] = 0.0
        out[1:] = L @ z
        return spec.scale * out
    if spec.kind == "dirichlet":
        if isinstance(seed, np.random.SeedSequence):
            base_seed, pert_seed = seed.spawn(2)
        else:
            base_seed = derived_seed(seed, 0, _STREAM_BASE)
            pert_seed = derived_seed(seed, 0, _STREAM_PERT)
        base = _simulate_values(spec.base, grid, _rng(base_seed), base_seed)
        pert = _simulate_values(spec.perturbation, grid, _rng(pert_seed), pert_seed)
        return base + spec.scale * pert
    if spec.kind == "bv":
        # random monotone construction: running maximum of a Brownian path
        z = rng.standard_normal(n)
        w = np.concatenate(([0.0], np.cumsum(math.sqrt(grid.dt) * z)))
        return np.maximum.accumulate(w)
    # deterministic
    fn = _resolve_deterministic(spec.fn_id)
    return np.asarray(fn(grid.points), dtype=float)


@dataclass
class PathEnsemble:
    """Lazy, reproducible family of paths: path i depends only on (master_seed, i)."""

    spec: ProcessSpec
    grid: Grid
    count: int
    master_seed: int
    _matrix: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("ensemble needs at least one path")

    def path(self, i: int) -> SamplePath:
        if not (0 <= i < self.count):
            raise IndexError(i)
        return simulate(self.spec, self.grid, derived_seed(self.master_seed, i))

    def __iter__(self):
        for i in range(self.count):
            yield self.path(i)

    def _row(self, i: int) -> np.ndarray:
        seed = derived_seed(self.master_seed, i)
        return _simulate_values(self.spec, self.grid, _rng(seed), seed)

    def matrix(self, threads: int = 1) -> np.ndarray:
        """(count, n+1) array of path values, cached.

        Path i is drawn from its own stream, so the result is identical for
        any thread count; threads only parallelize the materialization.
        """
        if self._matrix is None:
            if threads > 1 and self.count > 1:
                from concurrent.futures import ThreadPoolExecutor

                with ThreadPoolExecutor(max_workers=threads) as pool:
                    rows = list(pool.map(self._row, range(self.count)))
            else:
                rows = [self._row(i) for i in range(self.count)]
            self._matrix = np.vstack(rows)
        return self._matrix


def ensemble(spec: ProcessSpec, grid: Grid, m: int, master_seed: int) -> PathEnsemble:
    return PathEnsemble(spec=spec, grid=grid, count=m, master_seed=master_seed)


# ---------------------------------------------------------------------------
# CSV dumps
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def path_to_csv(path: SamplePath) -> str:
    lines = ["t,x"]
    for t, x in zip(path.grid.points, path.values):
        lines.append(f"{_fmt(t)},{_fmt(x)}")
    return "\n".join(lines) + "\n"


def ensemble_to_csv(ens: PathEnsemble) -> str:
    lines = ["path_id,t,x"]
    pts = ens.grid.points
    for i in range(ens.count):
        vals = ens.matrix()[i]
        for t, x in zip(pts, vals):
            lines.append(f"{i},{_fmt(t)},{_fmt(x)}")
    return "\n".join(lines) + "\n"
