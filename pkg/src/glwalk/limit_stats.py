"""Distances to Gaussian limits and rate fitting.

Wasserstein distances between one-dimensional laws, Kolmogorov distance to
a centered Gaussian, power-law rate scans, Marcinkiewicz-Zygmund and LIL
scale checks, the sup of the polygonal process against the reflection
principle, and a Monte Carlo check of von Bahr-Esseen type inequalities.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import optimize, special

from . import engine
from .errors import NumericalError
from .estimators import Calibration, _as_grid, _distinct, calibrate
from .geometry import ProjectivePoint
from .measures import MatrixMeasure
from .rng import purpose_tag, stream
from .samples import SampleSet

EXACT_OT_MAX = 2000
SIGMA2_FLOOR = 1e-20
GL_NODES = 16
GL_GRADE = 2
VBE_SLACK_Z = 3.0
GAP_TOL = 1e-9
# isometry walks carry ~1 ulp of log 1 per step; below this a quantile counts as 0
ZERO_TOL = 1e-12


def _values(a) -> np.ndarray:
    v = a.values if isinstance(a, SampleSet) else np.sort(np.asarray(a, dtype=float).ravel())
    if v.shape[0] == 0:
        raise ValueError("sample must be nonempty")
    return v


# -- Gaussian reference ---------------------------------------------------------------


@dataclass(frozen=True)
class GaussianLaw:
    """``N(mean, variance)``; variance 0 is the point mass at ``mean``.

    CDF and quantile use scipy's ``ndtr``/``ndtri`` (erfc-based, relative
    error near 1e-16 and 1e-15 respectively).
    """

    mean: float = 0.0
    variance: float = 1.0

    def __post_init__(self):
        if not self.variance >= 0 or not math.isfinite(self.variance):
            raise ValueError("variance must be finite and >= 0")

    @property
    def sd(self) -> float:
        return math.sqrt(self.variance)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.variance == 0:
            return (x >= self.mean).astype(float)
        return special.ndtr((x - self.mean) / self.sd)

    def sf(self, x):
        x = np.asarray(x, dtype=float)
        if self.variance == 0:
            return (x < self.mean).astype(float)
        return special.ndtr((self.mean - x) / self.sd)

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        if self.variance == 0:
            return np.full_like(u, self.mean)
        return self.mean + self.sd * special.ndtri(u)


# -- Wasserstein ----------------------------------------------------------------------


class TransportResult(NamedTuple):
    value: float
    exact: bool
    method: str


def _merged_quantiles(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Both generalized inverses on the merged breakpoint grid ``{i/m} U {j/k}``."""
    m, k = a.shape[0], b.shape[0]
    ticks = np.union1d(np.arange(1, m + 1, dtype=np.int64) * k, np.arange(1, k + 1, dtype=np.int64) * m)
    widths = np.diff(np.concatenate([[0], ticks])) / float(m * k)
    ia = -(-ticks // k) - 1
    ib = -(-ticks // m) - 1
    return a[ia], b[ib], widths


def wasserstein_empirical(a, b, r: float, interpolate: bool = False) -> TransportResult:
    """``W_r`` between two empirical laws on the line.

    For ``r >= 1`` the value is ``(min E|X - Y|^r)^{1/r}``, attained by the
    sorted coupling.  For ``0 < r < 1`` the cost ``|x - y|^r`` is itself a
    metric and the value is ``min E|X - Y|^r``; it is solved exactly by
    assignment up to 2000 points and otherwise replaced by the monotone
    coupling, which is an upper bound (``exact=False``).
    """
    if not r > 0:
        raise ValueError("r must be positive")
    x, y = _values(a), _values(b)
    m, k = x.shape[0], y.shape[0]
    if r >= 1:
        if m == k:
            cost = float(np.mean(np.abs(x - y) ** r))
        elif interpolate:
            qa, qb, w = _merged_quantiles(x, y)
            cost = float(np.sum(w * np.abs(qa - qb) ** r))
        else:
            raise ValueError("sample sizes differ; pass interpolate=True to use the merged quantile grid")
        return TransportResult(cost ** (1.0 / r), True, "sorted")
    if m == k:
        xs, ys = x, y
    else:
        lcm = m * k // math.gcd(m, k)
        xs, ys = np.repeat(x, lcm // m), np.repeat(y, lcm // k)
    if xs.shape[0] <= EXACT_OT_MAX:
        cost = np.abs(xs[:, None] - ys[None, :]) ** r
        rows, cols = optimize.linear_sum_assignment(cost)
        return TransportResult(float(cost[rows, cols].mean()), True, "assignment")
    return TransportResult(monotone_cost(x, y, r), False, "monotone-bound")


def monotone_cost(a, b, r: float) -> float:
    """``E|X - Y|^r`` under the sorted (quantile) coupling."""
    x, y = _values(a), _values(b)
    if x.shape[0] == y.shape[0]:
        return float(np.mean(np.abs(x - y) ** r))
    qa, qb, w = _merged_quantiles(x, y)
    return float(np.sum(w * np.abs(qa - qb) ** r))


@dataclass(frozen=True)
class GaussianTransport:
    value: float
    integral: float
    tail_bound: float
    r: float
    truncation: float


@dataclass
class _QuantileGrid:
    """Breakpoints of the staircase on ``[1/(2m), 1 - 1/(2m)]`` in Gaussian z-units."""

    m: int
    u: np.ndarray
    z: np.ndarray
    pdf: np.ndarray
    cdf: np.ndarray

    @classmethod
    def build(cls, m: int) -> "_QuantileGrid":
        eps = 0.5 / m
        u = np.arange(m + 1, dtype=float) / m
        u[0], u[-1] = eps, 1.0 - eps
        z = special.ndtri(u)
        return cls(m, u, z, np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi), u.copy())


_GRIDS: dict[int, _QuantileGrid] = {}


def _grid(m: int) -> _QuantileGrid:
    g = _GRIDS.get(m)
    if g is None:
        if len(_GRIDS) > 16:
            _GRIDS.clear()
        g = _GRIDS[m] = _QuantileGrid.build(m)
    return g


def _gauss_tail_moment(r: float, t: float) -> float:
    """``E[|Z|^r ; Z > t]`` for ``t >= 0``."""
    return 2.0 ** (r / 2.0) * special.gamma((r + 1.0) / 2.0) * special.gammaincc((r + 1.0) / 2.0, t * t / 2.0) \
        / (2.0 * math.sqrt(math.pi))


def _staircase_integral(a: np.ndarray, sd: float, r: float) -> float:
    """``sum_i int_{piece i} |a_(i) - sd z(u)|^r du`` over the truncated staircase."""
    g = _grid(a.shape[0])
    z0, z1 = g.z[:-1], g.z[1:]
    c0, c1 = g.cdf[:-1], g.cdf[1:]
    p0, p1 = g.pdf[:-1], g.pdf[1:]
    if r == 2.0:
        m1 = p0 - p1
        m2 = (c1 - c0) + z0 * p0 - z1 * p1
        return float(np.sum(a * a * (c1 - c0) - 2.0 * sd * a * m1 + sd * sd * m2))
    zs = np.clip(a / sd, z0, z1)
    cs = special.ndtr(zs)
    ps = np.exp(-0.5 * zs * zs) / math.sqrt(2.0 * math.pi)
    if r == 1.0:
        # F(z) = a Phi(z) + sd phi(z) is an antiderivative of (a - sd z) phi(z)
        return float(np.sum(2.0 * (a * cs + sd * ps) - (a * c0 + sd * p0) - (a * c1 + sd * p1)))
    return _gauss_legendre(a, sd, r, g.u[:-1], cs, g.u[1:])


def _gauss_legendre(a, sd, r, u0, us, u1) -> float:
    """Gauss-Legendre on each piece, split at the kink ``sd z(u) = a``.

    Nodes are graded toward the kink by ``u = kink +- h t^GL_GRADE``, which
    turns the ``|u - kink|^r`` behaviour there into a smooth power of ``t``.
    """
    x, w = np.polynomial.legendre.leggauss(GL_NODES)
    t, w = 0.5 * (x + 1.0), 0.5 * w
    tk = t ** GL_GRADE
    jac = GL_GRADE * t ** (GL_GRADE - 1) * w
    total = 0.0
    for end in (u0, u1):
        h = end - us
        nodes = us[:, None] + h[:, None] * tk[None, :]
        vals = np.abs(a[:, None] - sd * special.ndtri(nodes)) ** r
        total += float(np.sum(np.abs(h) * (vals @ jac)))
    return total


def wasserstein_vs_gaussian_detail(a, g: GaussianLaw, r: float, method: str = "auto") -> GaussianTransport:
    """Truncated quantile integral against ``g`` plus an analytic bound on the two tails.

    ``value`` is ``integral^{1/r}`` with the integral over
    ``u in [1/(2m), 1 - 1/(2m)]``; ``tail_bound`` bounds the omitted part.
    ``method='quadrature'`` forces Gauss-Legendre even where closed forms exist.
    """
    if not r >= 1:
        raise ValueError("r must be >= 1")
    x = _values(a) - g.mean
    m = x.shape[0]
    if g.variance == 0:
        integral = float(np.mean(np.abs(x) ** r))
        return GaussianTransport(integral ** (1.0 / r), integral, 0.0, r, 0.0)
    sd = g.sd
    if method == "quadrature":
        grid = _grid(m)
        zs = np.clip(x / sd, grid.z[:-1], grid.z[1:])
        integral = _gauss_legendre(x, sd, r, grid.u[:-1], special.ndtr(zs), grid.u[1:])
    else:
        integral = _staircase_integral(x, sd, r)
    integral = max(integral, 0.0)
    eps = 0.5 / m
    t = -float(special.ndtri(eps))
    c = 2.0 ** max(r - 1.0, 0.0)
    tail = c * (eps * (abs(x[0]) ** r + abs(x[-1]) ** r) + 2.0 * sd ** r * _gauss_tail_moment(r, t))
    return GaussianTransport(integral ** (1.0 / r), integral, tail, r, eps)


def wasserstein_vs_gaussian(a, g: GaussianLaw, r: float) -> float:
    return wasserstein_vs_gaussian_detail(a, g, r).value


# -- Kolmogorov distance -------------------------------------------------------------


def ks_distance(a, g: GaussianLaw) -> float:
    """``sup_t |F_a(t) - G(t)|`` using both one-sided limits at every jump.

    Gaps right of the mean are computed with upper tails, so negating the
    sample leaves the result bit-identical for a symmetric reference.
    """
    x = _values(a) - g.mean
    m = x.shape[0]
    vals, counts = np.unique(x, return_counts=True)
    after = np.cumsum(counts)
    before = after - counts
    if g.variance == 0:
        # reference jumps at 0; include it even when the sample misses it
        n_le0 = int(np.searchsorted(x, 0.0, side="right"))
        n_lt0 = int(np.searchsorted(x, 0.0, side="left"))
        ref_at = (vals >= 0).astype(float)
        ref_before = (vals > 0).astype(float)
        d = max(np.max(np.abs(after / m - ref_at)), np.max(np.abs(before / m - ref_before)),
                abs(n_le0 / m - 1.0), n_lt0 / m)
        return float(min(d, 1.0))
    zs = vals / g.sd
    low = special.ndtr(np.minimum(zs, 0.0))
    up = special.ndtr(-np.maximum(zs, 0.0))
    neg = zs < 0
    gap_after = np.where(neg, np.abs(after / m - low), np.abs((m - after) / m - up))
    gap_before = np.where(neg, np.abs(before / m - low), np.abs((m - before) / m - up))
    return float(min(max(gap_after.max(), gap_before.max()), 1.0))


def ks_against(a, cdf) -> float:
    """Kolmogorov distance between a sample and a continuous CDF."""
    x = _values(a)
    m = x.shape[0]
    vals, counts = np.unique(x, return_counts=True)
    after = np.cumsum(counts)
    f = np.asarray(cdf(vals), dtype=float)
    return float(max(np.max(np.abs(after / m - f)), np.max(np.abs((after - counts) / m - f))))


def brownian_sup_cdf(a):
    """``P(sup_{[0,1]} W <= a) = 2 Phi(a) - 1`` for ``a >= 0``, else 0."""
    a = np.asarray(a, dtype=float)
    return np.where(a >= 0, 1.0 - 2.0 * special.ndtr(-np.maximum(a, 0.0)), 0.0)


# -- rate fits --------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    exponent: float
    intercept: float
    r_squared: float
    loglog_exponent: float
    loglog_beta: float


def fit_rate(grid_n, distances) -> RateFit:
    """OLS of ``log distance`` on ``log n`` (distance ~ C n^-alpha) and on ``(log n, log log n)``."""
    n = np.asarray(grid_n, dtype=float)
    dist = np.asarray(distances, dtype=float)
    if n.shape[0] < 3 or np.any(np.diff(n) <= 0):
        raise ValueError("grid must be strictly increasing with at least 3 points")
    if np.any(~(dist > 0)) or not np.all(np.isfinite(dist)):
        nan = float("nan")
        return RateFit(nan, nan, nan, nan, nan)
    x, y = np.log(n), np.log(dist)
    design = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if sst == 0 else max(0.0, min(1.0, 1.0 - float(resid @ resid) / sst))
    design2 = np.column_stack([np.ones_like(x), x, np.log(x)])
    coef2, *_ = np.linalg.lstsq(design2, y, rcond=None)
    return RateFit(float(-coef[1]), float(coef[0]), r2, float(-coef2[1]), float(coef2[2]))


@dataclass(frozen=True)
class RateFitResult:
    exponent_hat: float
    intercept_hat: float
    r_squared: float
    grid_n: tuple[int, ...]
    distances: tuple[float, ...]
    distance_ci: tuple[tuple[float, float], ...]
    exponent_ci: tuple[float, float]
    loglog_exponent: float
    loglog_beta: float
    unreliable: bool
    degenerate: bool
    statistic: str
    r: float
    lambda_hat: float
    sigma_hat: float
    seed: int
    calibration_seed: int


def _distance(sample: np.ndarray, law: GaussianLaw, statistic: str, r: float) -> float:
    if statistic == "wasserstein":
        return wasserstein_vs_gaussian(sample, law, r)
    return ks_distance(sample, law)


def _check_grid(n_grid) -> list[int]:
    grid = [int(n) for n in n_grid]
    if len(grid) < 3 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("nGrid needs at least 3 strictly increasing points")
    if math.log10(grid[-1] / grid[0]) < 1.5:
        raise ValueError("nGrid must span at least 1.5 decades")
    return grid


def rate_scan(measure: MatrixMeasure, start: ProjectivePoint, statistic: str, r: float, n_grid,
              replicas: int, seed: int = 0, *, calibration: Calibration | None = None,
              calibration_seed: int | None = None, cal_n: int | None = None,
              cal_replicas: int | None = None, n_boot: int = 200,
              workers: int | None = None) -> RateFitResult:
    """Distance of ``(S_n - n lambda_hat) / sqrt(n)`` to ``N(0, sigma2_hat)`` along ``n_grid``.

    ``statistic`` is ``"wasserstein"`` (order ``r``) or ``"ks"``.  The
    centering and scale come from a calibration run on independent
    streams.  The exponent CI resamples replicas independently per ``n``.
    """
    if statistic not in ("wasserstein", "ks"):
        raise ValueError("statistic must be 'wasserstein' or 'ks'")
    grid = _check_grid(n_grid)
    cal_seed = seed if calibration_seed is None else calibration_seed
    if calibration is None:
        calibration = calibrate(measure, start, cal_n or grid[-1], cal_replicas or replicas,
                                cal_seed, workers)
    lam, s2 = calibration.lambda_hat, calibration.sigma2_hat
    degenerate = s2 <= SIGMA2_FLOOR
    law = GaussianLaw(0.0, 0.0 if degenerate else s2)
    samples = []
    for n in grid:
        ss = engine.run_ensemble(measure, start, n, replicas, "S", seed, tag=purpose_tag("rate-scan", n),
                                 workers=workers)
        samples.append((ss.values - n * lam) / math.sqrt(n))
    dists = [_distance(s, law, statistic, r) for s in samples]
    fit = fit_rate(grid, dists)
    gen = stream(seed, 0, purpose_tag("rate-scan-bootstrap"))
    boot_d = np.empty((n_boot, len(grid)))
    for b in range(n_boot):
        for j, s in enumerate(samples):
            boot_d[b, j] = _distance(np.sort(s[gen.integers(0, replicas, replicas)]), law, statistic, r)
    boot_alpha = np.array([fit_rate(grid, row).exponent for row in boot_d])
    ok = np.isfinite(boot_alpha)
    # basic bootstrap: resampled laws sit farther from the reference, so percentile
    # intervals are shifted toward flatter slopes; reflecting about the estimate cancels that
    if ok.any():
        lo, hi = np.quantile(boot_alpha[ok], [0.025, 0.975])
        exp_ci = (float(2 * fit.exponent - hi), float(2 * fit.exponent - lo))
    else:
        exp_ci = (float("nan"), float("nan"))
    d_ci = tuple((float(np.quantile(boot_d[:, j], 0.025)), float(np.quantile(boot_d[:, j], 0.975)))
                 for j in range(len(grid)))
    unreliable = bool(degenerate or not fit.r_squared >= 0.5)
    return RateFitResult(fit.exponent, fit.intercept, fit.r_squared, tuple(grid), tuple(dists), d_ci,
                         exp_ci, fit.loglog_exponent, fit.loglog_beta, unreliable, bool(degenerate),
                         statistic, float(r), lam, math.sqrt(max(s2, 0.0)), seed, cal_seed)


# -- Marcinkiewicz-Zygmund scale ------------------------------------------------------------


@dataclass(frozen=True)
class MzReport:
    p: float
    grid_n: tuple[int, ...]
    quantiles: np.ndarray
    q90_ci: tuple[tuple[float, float], ...]
    slope: float
    slope_ci: tuple[float, float]
    decay_asserted: bool
    all_zero: bool
    hypothesis_met: bool
    lambda_hat: float


MZ_LEVELS = (0.5, 0.9, 0.99)


def _log_slope(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xc = x - x.mean()
    return ((y - y.mean(axis=-1, keepdims=True)) @ xc) / (xc @ xc)


def mz_rate_check(measure: MatrixMeasure, start: ProjectivePoint, p: float, n_grid, replicas: int,
                  seed: int = 0, *, lambda_hat: float | None = None, cal_n: int | None = None,
                  cal_replicas: int | None = None, n_boot: int = 400,
                  workers: int | None = None) -> MzReport:
    """Quantiles of ``|S_n - n lambda_hat| / n^{1/p}`` along ``n_grid``.

    Decay is asserted only when the bootstrap CI of the slope of
    ``log q90`` against ``log n`` lies strictly below 0.
    """
    if not 1 < p < 2:
        raise ValueError("p must lie in (1, 2)")
    grid = [int(n) for n in n_grid]
    if len(grid) < 2 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("nGrid needs at least 2 strictly increasing points")
    met = measure.moment_order >= p
    if not met:
        warnings.warn(f"declared moment order {measure.moment_order} is below p = {p}", stacklevel=2)
    if lambda_hat is None:
        lambda_hat = calibrate(measure, start, cal_n or grid[-1], cal_replicas or replicas,
                               seed, workers).lambda_hat
    rec = engine.simulate(measure, start, grid[-1], replicas, seed, purpose_tag("mz"),
                          checkpoints=grid, workers=workers)
    ns = rec.steps.astype(float)
    stat = np.abs(rec.s - ns * lambda_hat) / ns ** (1.0 / p)
    qs = np.quantile(stat, MZ_LEVELS, axis=0).T
    all_zero = bool(np.all(qs <= ZERO_TOL))
    gen = stream(seed, 0, purpose_tag("mz-bootstrap"))
    boot = np.empty((n_boot, len(grid)))
    for b in range(n_boot):
        boot[b] = np.quantile(stat[gen.integers(0, replicas, replicas)], 0.9, axis=0)
    q90_ci = tuple((float(lo), float(hi)) for lo, hi in np.quantile(boot, [0.025, 0.975], axis=0).T)
    if all_zero or np.any(qs[:, 1] <= ZERO_TOL) or np.any(boot <= ZERO_TOL):
        slope, ci = float("nan"), (float("nan"), float("nan"))
        decay = False
    else:
        lx = np.log(ns)
        slope = float(_log_slope(lx, np.log(qs[:, 1])))
        bs = _log_slope(lx, np.log(boot))
        ci = (float(np.quantile(bs, 0.025)), float(np.quantile(bs, 0.975)))
        decay = ci[1] < 0
    return MzReport(p, tuple(grid), qs, q90_ci, slope, ci, bool(decay), all_zero, bool(met), float(lambda_hat))


# -- LIL scale ----------------------------------------------------------------------------


def lil_checkpoints(n_max: int) -> list[int]:
    """``floor(1.5^k) >= 16`` up to ``n_max``, plus ``n_max`` itself."""
    pts, k = set(), 0
    while True:
        n = int(math.floor(1.5 ** k))
        if n > n_max:
            break
        if n >= 16:
            pts.add(n)
        k += 1
    pts.add(int(n_max))
    return sorted(pts)


@dataclass(frozen=True)
class LilReport:
    checkpoints: tuple[int, ...]
    running_max: SampleSet
    median: float
    lambda_hat: float
    sigma2_hat: float


def _calibrated(measure, start, n, replicas, seed, calibration, cal_n, cal_replicas, workers) -> Calibration:
    if calibration is None:
        calibration = calibrate(measure, start, cal_n or n, cal_replicas or replicas, seed, workers)
    if calibration.sigma2_hat <= SIGMA2_FLOOR:
        raise NumericalError("sigma2_hat is 0: the measure is degenerate (point mass or isometries); "
                             "normalized fluctuation statistics are undefined")
    return calibration


def lil_statistic(measure: MatrixMeasure, start: ProjectivePoint, n_max: int, replicas: int,
                  seed: int = 0, *, calibration: Calibration | None = None, cal_n: int | None = None,
                  cal_replicas: int | None = None, workers: int | None = None) -> LilReport:
    """Per-replica max over geometric checkpoints of ``|S_n - n lambda| / sqrt(2 sigma2 n log log n)``."""
    if n_max < 10_000:
        raise ValueError("n_max must be >= 10^4")
    cal = _calibrated(measure, start, n_max, replicas, seed, calibration, cal_n, cal_replicas, workers)
    ck = lil_checkpoints(n_max)
    rec = engine.simulate(measure, start, n_max, replicas, seed, purpose_tag("lil"),
                          checkpoints=ck, workers=workers)
    ns = rec.steps.astype(float)
    norm = np.sqrt(2.0 * cal.sigma2_hat * ns * np.log(np.log(ns)))
    vals = (np.abs(rec.s - ns * cal.lambda_hat) / norm).max(axis=1)
    ss = SampleSet.of(vals, n=n_max, measure_digest=rec.measure_digest, statistic="lil", seed=seed)
    return LilReport(tuple(ck), ss, float(np.median(vals)), cal.lambda_hat, cal.sigma2_hat)


# -- functional CLT --------------------------------------------------------------------------


@dataclass(frozen=True)
class FunctionalSupReport:
    sample: SampleSet
    ks: float
    lambda_hat: float
    sigma_hat: float


def functional_sup_check(measure: MatrixMeasure, start: ProjectivePoint, n: int, replicas: int,
                         seed: int = 0, *, calibration: Calibration | None = None,
                         cal_n: int | None = None, cal_replicas: int | None = None,
                         workers: int | None = None) -> FunctionalSupReport:
    """KS distance between the law of ``sup_t B_n(t) / sigma_hat`` and ``2 Phi(a) - 1``.

    The supremum runs over every step (the polygon's vertices), so the
    result always reflects a stride-1 trace.
    """
    cal = _calibrated(measure, start, n, replicas, seed, calibration, cal_n, cal_replicas, workers)
    sd = math.sqrt(cal.sigma2_hat)
    ss = engine.run_ensemble(measure, start, n, replicas, "supPolygonal", seed, lambda_hat=cal.lambda_hat,
                             tag=purpose_tag("functional-sup"), workers=workers).map(lambda v: v / sd)
    return FunctionalSupReport(ss, ks_against(ss, brownian_sup_cdf), cal.lambda_hat, sd)


# -- von Bahr-Esseen ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VbeReport:
    r: float
    lhs: float
    rhs: float
    slack: float
    holds: bool
    max_lhs: float
    max_rhs: float
    max_slack: float
    max_holds: bool


def _paired(diff: np.ndarray) -> tuple[float, float]:
    m = diff.shape[0]
    sd = float(diff.std(ddof=1)) if m > 1 else 0.0
    return float(diff.mean()), VBE_SLACK_Z * sd / math.sqrt(m)


def vbe_inequality_check(increments, r: float, cond_term=None) -> VbeReport:
    """Monte Carlo check of both von Bahr-Esseen type bounds on replica x step increments.

    ``cond_term[:, i]`` is ``|E(T_n - T_i | F_i)|`` for ``i < n``; it is
    identically 0 for martingale differences, the default.  A bound holds
    when the paired mean of ``lhs - rhs`` is at most 3 standard errors.
    """
    if not 1 < r <= 2:
        raise ValueError("r must lie in (1, 2]")
    z = np.asarray(increments, dtype=float)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("increments must be a (replicas, steps) array with replicas >= 2")
    n = z.shape[1]
    az = np.abs(z)
    sum_r = np.sum(az ** r, axis=1)
    if cond_term is None:
        extra = np.zeros(z.shape[0])
    else:
        c = np.asarray(cond_term, dtype=float)
        extra = np.sum(az[:, :n - 1] ** (r - 1.0) * c[:, :n - 1], axis=1)
    t = np.cumsum(z, axis=1)
    lhs_i = np.abs(t[:, -1]) ** r
    rhs_i = 2.0 ** (2.0 - r) * (sum_r + r * extra)
    tmax = np.maximum(t.max(axis=1), 0.0)
    mlhs_i = tmax ** r
    mrhs_i = 4.0 / (r - 1.0) * sum_r + 6.0 * r / (r - 1.0) * extra
    d, slack = _paired(lhs_i - rhs_i)
    md, mslack = _paired(mlhs_i - mrhs_i)
    return VbeReport(r, float(lhs_i.mean()), float(rhs_i.mean()), slack, bool(d <= slack),
                     float(mlhs_i.mean()), float(mrhs_i.mean()), mslack, bool(md <= mslack))


MD_KINDS = ("rademacher", "gaussian", "exponential", "student", "volatility", "sign-scaled")


def martingale_differences(kind: str, replicas: int, n: int, gen: np.random.Generator) -> np.ndarray:
    """Replica x step martingale-difference arrays used as the inequality corpus.

    ``volatility`` scales a Rademacher sign by a function of the previous
    increment; ``sign-scaled`` scales it by the running sum.  Both are
    genuinely dependent martingale differences.
    """
    if kind == "rademacher":
        return gen.choice([-1.0, 1.0], size=(replicas, n))
    if kind == "gaussian":
        return gen.standard_normal((replicas, n))
    if kind == "exponential":
        return gen.exponential(1.0, (replicas, n)) - 1.0
    if kind == "student":
        return gen.standard_t(3.0, (replicas, n))
    eps = gen.choice([-1.0, 1.0], size=(replicas, n))
    z = np.empty((replicas, n))
    if kind == "volatility":
        prev = np.zeros(replicas)
        for i in range(n):
            z[:, i] = eps[:, i] * np.sqrt(0.5 + 0.5 * prev * prev)
            prev = z[:, i]
        return z
    if kind == "sign-scaled":
        s = np.zeros(replicas)
        for i in range(n):
            z[:, i] = eps[:, i] * (1.0 + (s > 0))
            s += z[:, i]
        return z
    raise ValueError(f"kind must be one of {MD_KINDS}")


# -- norm gaps -------------------------------------------------------------------------------------


@dataclass(frozen=True)
class NormGapReport:
    grid_n: tuple[int, ...]
    pair_gap: np.ndarray
    norm_gap: np.ndarray
    pair_slope_ci: tuple[float, float]
    norm_slope_ci: tuple[float, float]
    bounded: bool
    grid_digest: str


def norm_gap_boundedness(measure: MatrixMeasure, pairs, n_grid, replicas: int, seed: int = 0,
                         n_boot: int = 400, workers: int | None = None) -> NormGapReport:
    """``max_pairs E|log|A_n x| - log|A_n y||`` and ``E(log|A_n| - log|A_n x|)`` along ``n_grid``.

    Bounded means neither curve has a bootstrap slope against ``log n``,
    fitted over the upper half of the grid, whose CI lies strictly above 0.
    Both gaps converge from below, so the early grid points are excluded.
    """
    grid = [int(n) for n in n_grid]
    if len(grid) < 2 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("nGrid needs at least 2 strictly increasing points")
    if measure.moment_order < 2:
        warnings.warn("declared moment order is below 2", stacklevel=2)
    pg = _as_grid(pairs)
    distinct, _ = _distinct(pg)
    ns = np.array(grid, dtype=float)
    if distinct:
        prec = engine.simulate_pairs(measure, distinct, grid[-1], replicas, seed, stride=None,
                                     checkpoints=grid, workers=workers)
        pair_vals = np.abs(prec.cum)
    else:
        pair_vals = np.zeros((replicas, 1, len(grid)))
    start = pg.pairs[0][0]
    rec = engine.simulate(measure, start, grid[-1], replicas, seed, checkpoints=grid, track_matrix=True,
                          workers=workers)
    norm_vals = rec.logmat - rec.s
    pair_gap = pair_vals.mean(axis=0).max(axis=0)
    norm_gap = norm_vals.mean(axis=0)
    tail = slice(min(len(grid) // 2, len(grid) - 2), None)
    lx = np.log(ns[tail])
    pv, nv = pair_vals[:, :, tail], norm_vals[:, tail]
    gen = stream(seed, 0, purpose_tag("norm-gap-bootstrap"))
    bp, bn = np.empty(n_boot), np.empty(n_boot)
    for b in range(n_boot):
        idx = gen.integers(0, replicas, replicas)
        bp[b] = _log_slope(lx, pv[idx].mean(axis=0).max(axis=0))
        bn[b] = _log_slope(lx, nv[idx].mean(axis=0))
    # rounding-level slopes of converged curves count as flat
    pad_p = GAP_TOL * (1.0 + float(np.max(pair_gap)))
    pad_n = GAP_TOL * (1.0 + float(np.max(np.abs(norm_gap))))
    pci = (float(np.quantile(bp, 0.025)) - pad_p, float(np.quantile(bp, 0.975)) + pad_p)
    nci = (float(np.quantile(bn, 0.025)) - pad_n, float(np.quantile(bn, 0.975)) + pad_n)
    bounded = pci[0] <= 0 and nci[0] <= 0
    return NormGapReport(tuple(grid), pair_gap, norm_gap, pci, nci, bool(bounded), pg.digest)
