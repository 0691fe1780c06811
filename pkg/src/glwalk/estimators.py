"""Estimators for the walk's limit constants.

Lyapunov exponent, asymptotic variance, two-point contraction rate, and the
coupling-gap moments ``E|X_{k,x} - X_{k,y}|^q``.  Suprema over projective
space are replaced by maxima over a deterministic point grid, which only
gives a lower bound for the true supremum.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .geometry import ProjectivePoint, basis, canonicalize
from .measures import MatrixMeasure
from .rng import purpose_tag, stream

Z95 = 1.959963984540054
NUM_TOL = 1e-10
ELL_MIN = 1e-2

CALIBRATION_TAG = purpose_tag("calibration")
BOOTSTRAP_TAG = purpose_tag("bootstrap")


def _mean_sd(x: np.ndarray) -> tuple[float, float]:
    # shift by the first value: identical samples give exactly zero spread
    x = np.asarray(x, dtype=float)
    sh = x - x[0]
    mean = float(x[0] + sh.mean())
    sd = float(sh.std(ddof=1)) if x.shape[0] > 1 else 0.0
    return mean, sd


# -- Lyapunov exponent -----------------------------------------------------------


@dataclass(frozen=True)
class LyapunovEstimate:
    lambda_hat: float
    half_width: float
    n_used: int
    replicas_used: int
    matrix_lambda_hat: float
    matrix_half_width: float
    gap_q99: float
    tracks_consistent: bool


def estimate_lyapunov(measure: MatrixMeasure, start: ProjectivePoint, n: int, replicas: int,
                      seed: int = 0, tag=engine.WALK_TAG, workers: int | None = None) -> LyapunovEstimate:
    """Mean of ``S_n / n`` across replicas, with the matrix-norm track alongside.

    The two tracks differ by ``(log|A_n| - S_n) / n``, which must stay
    within the 99th percentile of that gap divided by ``n``.
    """
    if n < 100:
        raise ValueError("n must be >= 100")
    rec = engine.simulate(measure, start, n, replicas, seed, tag, track_matrix=True,
                          checkpoints=(n,), workers=workers)
    mean_s, sd_s = _mean_sd(rec.final_s)
    mean_m, sd_m = _mean_sd(rec.final_logmat)
    gap = rec.final_logmat - rec.final_s
    q99 = float(np.quantile(gap, 0.99))
    lam, lam_m = mean_s / n, mean_m / n
    consistent = abs(lam_m - lam) <= max(q99, 0.0) / n + NUM_TOL
    return LyapunovEstimate(lam, Z95 * sd_s / math.sqrt(replicas) / n, n, replicas,
                            lam_m, Z95 * sd_m / math.sqrt(replicas) / n, q99, bool(consistent))


# -- variance --------------------------------------------------------------------


@dataclass(frozen=True)
class VarianceEstimate:
    sigma2_hat: float
    method: str
    half_width: float
    clamped: bool = False
    lambda_hat: float | None = None


@dataclass(frozen=True)
class Calibration:
    """Centering and scale constants from a run independent of the one analysed."""

    lambda_hat: float
    lambda_half_width: float
    sigma2_hat: float
    sigma2_half_width: float
    n: int
    replicas: int
    seed: int


def calibrate(measure: MatrixMeasure, start: ProjectivePoint, n: int, replicas: int,
              seed: int = 0, workers: int | None = None) -> Calibration:
    """lambda-hat and sigma2-hat from the calibration stream family (never the analysis streams)."""
    rec = engine.simulate(measure, start, n, replicas, seed, CALIBRATION_TAG,
                          checkpoints=(n,), workers=workers)
    s = rec.final_s
    mean, sd = _mean_sd(s)
    v = _cross_replica(s, n)
    return Calibration(mean / n, Z95 * sd / math.sqrt(replicas) / n, v.sigma2_hat, v.half_width,
                       n, replicas, seed)


def _cross_replica(s: np.ndarray, n: int) -> VarianceEstimate:
    m = s.shape[0]
    dev = (s - s[0]) - (s - s[0]).mean()
    var = float(dev @ dev) / (m - 1)
    m4 = float(np.mean(dev ** 4))
    hw = Z95 * math.sqrt(max(m4 - var * var, 0.0) / m) / n
    return VarianceEstimate(var / n, "cross-replica", hw)


def estimate_sigma2(measure: MatrixMeasure, start: ProjectivePoint, n: int, replicas: int,
                    seed: int = 0, method: str = "cross-replica", lambda_hat: float | None = None,
                    workers: int | None = None) -> VarianceEstimate:
    """``Var(S_n) / n`` across replicas, or batch means on long runs.

    Batch means splits each run of length ``n`` into ``floor(sqrt(n))``
    batches and centers batch sums with ``lambda_hat``, which must come
    from an independent run (estimated here from the calibration streams
    when not given).
    """
    if method == "cross-replica":
        if replicas < 100:
            raise ValueError("cross-replica variance needs replicas >= 100")
        rec = engine.simulate(measure, start, n, replicas, seed, checkpoints=(n,), workers=workers)
        return _cross_replica(rec.final_s, n)
    if method != "batch-means":
        raise ValueError(f"unknown method {method!r}")
    if lambda_hat is None:
        lambda_hat = calibrate(measure, start, n, max(replicas, 16), seed, workers).lambda_hat
    nb = int(math.isqrt(n))
    blen = n // nb
    rec = engine.simulate(measure, start, nb * blen, replicas, seed, stride=blen, workers=workers)
    sums = np.diff(np.concatenate([np.zeros((replicas, 1)), rec.s], axis=1), axis=1)
    z = (sums - blen * lambda_hat).ravel()
    est = float(np.mean(z * z)) / blen
    clamped = False
    if est < 0:
        warnings.warn("negative variance estimate clamped to 0", stacklevel=2)
        est, clamped = 0.0, True
    hw = Z95 * est * math.sqrt(2.0 / z.shape[0])
    return VarianceEstimate(est, "batch-means", hw, clamped, lambda_hat)


# -- point grids -------------------------------------------------------------------


@dataclass(frozen=True)
class PairGrid:
    pairs: tuple[tuple[ProjectivePoint, ProjectivePoint], ...]
    digest: str


def grid_points(d: int, count: int = 64) -> list[ProjectivePoint]:
    """Deterministic, roughly uniform points of P_{d-1}(R)."""
    if d == 2:
        angles = np.pi * (np.arange(count) + 0.5) / count
        return [ProjectivePoint.of([math.cos(t), math.sin(t)]) for t in angles]
    gen = stream(0, 0, purpose_tag("grid", d, count))
    return [ProjectivePoint.of(v) for v in gen.standard_normal((count, d))]


def default_pair_grid(d: int, count: int = 64, near: int = 8, near_sep: float = 1e-6) -> PairGrid:
    """``count`` grid points paired at varied separations, plus near-coincident pairs."""
    pts = grid_points(d, count)
    spread = max(1, count // 2 - 1)
    pairs = [(pts[i], pts[(i + 1 + i % spread) % count]) for i in range(count)]
    for i in (range(0, count, max(1, count // near)) if near > 0 else ()):
        x = pts[i].rep
        t = np.zeros(d)
        t[np.argmin(np.abs(x))] = 1.0
        t -= (t @ x) * x
        t /= np.linalg.norm(t)
        pairs.append((pts[i], ProjectivePoint.of(x + near_sep * t)))
    return make_pair_grid(pairs)


def make_pair_grid(pairs) -> PairGrid:
    pairs = tuple((x, y) for x, y in pairs)
    h = hashlib.sha256()
    for x, y in pairs:
        h.update(x.rep.tobytes())
        h.update(y.rep.tobytes())
    return PairGrid(pairs, h.hexdigest()[:16])


def _as_grid(pairs) -> PairGrid:
    return pairs if isinstance(pairs, PairGrid) else make_pair_grid(pairs)


def _distinct(grid: PairGrid) -> tuple[list, list[int]]:
    keep, idx = [], []
    for i, (x, y) in enumerate(grid.pairs):
        if x != y:
            keep.append((x, y))
            idx.append(i)
    return keep, idx


# -- contraction ----------------------------------------------------------------------


def _slope(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least-squares slope of y (..., k) against x (k,), with y shifted to start at 0."""
    xc = x - x.mean()
    y0 = y - y[..., :1]
    yc = y0 - y0.mean(axis=-1, keepdims=True)
    return (yc @ xc) / (xc @ xc)


@dataclass(frozen=True)
class ContractionEstimate:
    rate_hat: float
    rate_ci: tuple[float, float]
    ell_hat: float
    tail_curve: tuple[tuple[int, float], ...]
    decays: bool
    worst_pair: int
    grid_digest: str
    mean_log_dist: np.ndarray = field(repr=False, default=None)


def estimate_contraction(measure: MatrixMeasure, pairs, n: int, replicas: int, seed: int = 0,
                         burn_fraction: float = 0.5, n_boot: int = 200,
                         workers: int | None = None) -> ContractionEstimate:
    """Slope of ``E log d(A_n x, A_n y)`` in ``n`` over the least contracting pair.

    The slope is fitted on the last ``1 - burn_fraction`` of the horizon.
    ``ell_hat = |rate_hat| / 2`` (floored at 1e-2 so that it stays
    positive) and the tail curve is ``P(log d_k >= -ell_hat k)``.
    """
    grid = _as_grid(pairs)
    distinct, _ = _distinct(grid)
    if len(distinct) != len(grid.pairs):
        raise ValueError("contraction pairs must be projectively distinct")
    rec = engine.simulate_pairs(measure, distinct, n, replicas, seed, stride=1, workers=workers)
    ks = rec.steps.astype(float)
    lo = min(int(burn_fraction * n), n - 2)
    mean_logd = rec.logd.mean(axis=0)
    slopes = _slope(ks[lo:], mean_logd[:, lo:])
    worst = int(np.argmax(slopes))
    rate = float(slopes[worst])
    gen = stream(seed, 0, BOOTSTRAP_TAG)
    paths = rec.logd[:, worst, lo:]
    boot = np.empty(n_boot)
    for b in range(n_boot):
        idx = gen.integers(0, replicas, replicas)
        boot[b] = _slope(ks[lo:], paths[idx].mean(axis=0))
    ci = (float(np.quantile(boot, 0.025)) - NUM_TOL, float(np.quantile(boot, 0.975)) + NUM_TOL)
    ell = max(abs(rate) / 2.0, ELL_MIN)
    tail = np.mean(rec.logd >= -ell * ks[None, None, :], axis=0).max(axis=0)
    tail_curve = tuple((int(k), float(p)) for k, p in zip(rec.steps, tail))
    return ContractionEstimate(rate, ci, ell, tail_curve, bool(ci[1] < 0), worst, grid.digest, mean_logd)


# -- coupling gaps ---------------------------------------------------------------------


@dataclass(frozen=True)
class CouplingDecay:
    ks: np.ndarray
    curve: np.ndarray
    stderr: np.ndarray
    q: float
    p: float | None
    partial_sums: np.ndarray | None
    grid_digest: str


def coupling_decay_curve(measure: MatrixMeasure, q: float, pairs, kmax: int, replicas: int,
                         seed: int = 0, p: float | None = None,
                         workers: int | None = None) -> CouplingDecay:
    """``max_pairs E|X_{k,x} - X_{k,y}|^q`` for ``k = 1..kmax``.

    When a moment order ``p`` is known (given, or declared finite on the
    measure) the partial sums of ``k^{p-q-1} curve(k)`` are returned for
    trend inspection; they are not a convergence verdict.
    """
    if not q > 0:
        raise ValueError("q must be positive")
    grid = _as_grid(pairs)
    distinct, _ = _distinct(grid)
    ks = np.arange(1, kmax + 1)
    if not distinct:
        zero = np.zeros(kmax)
        return CouplingDecay(ks, zero, zero, q, p, None, grid.digest)
    rec = engine.simulate_pairs(measure, distinct, kmax, replicas, seed, stride=None,
                                checkpoints=(kmax,), kmax=kmax, workers=workers)
    mom = np.abs(rec.inc) ** q
    means = mom.mean(axis=0)
    worst = np.argmax(means, axis=0)
    curve = means[worst, np.arange(kmax)]
    sds = mom.std(axis=0, ddof=1) if replicas > 1 else np.zeros_like(means)
    stderr = sds[worst, np.arange(kmax)] / math.sqrt(replicas)
    if p is None and math.isfinite(measure.moment_order):
        p = measure.moment_order
    partial = np.cumsum(ks ** (p - q - 1.0) * curve) if p is not None else None
    return CouplingDecay(ks, curve, stderr, q, p, partial, grid.digest)


@dataclass(frozen=True)
class DriftProbe:
    found: bool
    n0: int | None
    drift_hat: float | None
    upper: float | None
    curve: tuple[tuple[int, float, float], ...]


def two_point_drift_probe(measure: MatrixMeasure, pairs, n0_max: int, replicas: int,
                          seed: int = 0, workers: int | None = None) -> DriftProbe:
    """First ``n0`` with ``max_pairs E log(d(A_n0 x, A_n0 y) / d(x, y))`` surely negative."""
    if n0_max < 1:
        raise ValueError("n0_max must be >= 1")
    grid = _as_grid(pairs)
    distinct, _ = _distinct(grid)
    rec = engine.simulate_pairs(measure, distinct, n0_max, replicas, seed, stride=1, workers=workers)
    drift = rec.logd - rec.logd0[None, :, None]
    mean = drift.mean(axis=0)
    se = drift.std(axis=0, ddof=1) / math.sqrt(replicas) if replicas > 1 else np.zeros_like(mean)
    upper = mean + Z95 * se
    curve = []
    for j, n0 in enumerate(rec.steps):
        worst = int(np.argmax(upper[:, j]))
        curve.append((int(n0), float(mean[worst, j]), float(upper[worst, j])))
    for n0, m, up in curve:
        if up < -NUM_TOL:
            return DriftProbe(True, n0, m, up, tuple(curve))
    return DriftProbe(False, None, None, None, tuple(curve))


# -- stationary starts ------------------------------------------------------------------


def stationary_starts(measure: MatrixMeasure, replicas: int, seed: int = 0, rate: float | None = None,
                      burn: int | None = None, workers: int | None = None) -> np.ndarray:
    """Approximate draws from the invariant law: run ``10 / |rate|`` burn-in steps from e_1."""
    if burn is None:
        if rate is None or rate >= 0:
            raise ValueError("a negative contraction rate or an explicit burn is required")
        burn = int(math.ceil(10.0 / abs(rate)))
    rec = engine.simulate(measure, basis(measure.dim, 0), burn, replicas, seed,
                          purpose_tag("burn-in"), checkpoints=(burn,), workers=workers)
    return np.array([canonicalize(u) for u in rec.final_u])
