"""Acceptance criteria 1-16, each at its stated scale and tolerance.

Every test records one PASS/FAIL line, printed again in the terminal summary.
"""

import csv
import json
import math
import time
import warnings

import numpy as np
import pytest

from conftest import bernoulli_walk_measure, proximal_measure
from glwalk.cli import main
from glwalk.estimators import Z95, estimate_contraction, estimate_lyapunov, estimate_sigma2
from glwalk.geometry import ProjectivePoint, act_batch, basis, cocycle_batch, proj_metric_batch, coeff_delta_batch
from glwalk.engine import run_walk
from glwalk.limit_stats import (MD_KINDS, GaussianLaw, functional_sup_check, lil_statistic, martingale_differences,
                                monotone_cost, mz_rate_check, rate_scan, vbe_inequality_check,
                                wasserstein_empirical, wasserstein_vs_gaussian, wasserstein_vs_gaussian_detail)
from glwalk.measures import MatrixMeasure
from glwalk.rng import purpose_tag, stream
from helpers import replay_matrices

E1 = basis(2, 0)
RATE_GRID = [64, 256, 1024, 4096]
RATE_REPLICAS = 100_000


def random_matrices(gen, count, d):
    """Gaussian matrices mixed with badly conditioned U diag(e^L) V products."""
    g = gen.standard_normal((count, d, d)) * np.exp(gen.uniform(-3, 3, (count, 1, 1)))
    ill = gen.random(count) < 0.3
    k = int(ill.sum())
    if k:
        u, _ = np.linalg.qr(gen.standard_normal((k, d, d)))
        v, _ = np.linalg.qr(gen.standard_normal((k, d, d)))
        s = np.exp(gen.uniform(-6, 6, (k, d)))
        g[ill] = u @ (s[:, :, None] * v)
    return g


def size_batch(g):
    s = np.linalg.svd(g, compute_uv=False)
    return np.maximum(s[:, 0], 1.0 / s[:, -1])


def unit_rows(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# -- 1-4: geometry and engine ---------------------------------------------------------------


def test_criterion_01_geometry_exactness(record_criterion):
    t0 = time.perf_counter()
    worst_pair, worst_cocycle = 0.0, 0.0
    for d in (2, 3, 8):
        gen = stream(1, d, purpose_tag("acceptance-1"))
        x, y = gen.standard_normal((1_000_000, d)), gen.standard_normal((1_000_000, d))
        dm, dc = proj_metric_batch(x, y), coeff_delta_batch(x, y)
        worst_pair = max(worst_pair, float(np.max(np.abs(dm * dm + dc * dc - 1.0))))
        g, h = random_matrices(gen, 100_000, d), random_matrices(gen, 100_000, d)
        xs = unit_rows(gen.standard_normal((100_000, d)))
        lhs = cocycle_batch(g @ h, xs)
        rhs = cocycle_batch(g, act_batch(h, xs)) + cocycle_batch(h, xs)
        worst_cocycle = max(worst_cocycle, float(np.max(np.abs(lhs - rhs))))
    elapsed = time.perf_counter() - t0
    ok = worst_pair <= 1e-12 and worst_cocycle <= 1e-10 and elapsed < 30
    assert record_criterion(1, ok, f"max|d^2+delta^2-1| = {worst_pair:.2e}, max cocycle defect = "
                                   f"{worst_cocycle:.2e}, {elapsed:.1f} s")


def test_criterion_02_a_priori_cocycle_bound(record_criterion):
    gen = stream(2, 0, purpose_tag("acceptance-2"))
    worst, violations = -np.inf, 0
    for d in (2, 3, 5):
        g = random_matrices(gen, 100_000 // 3 + 1, d)
        xs = unit_rows(gen.standard_normal((g.shape[0], d)))
        excess = np.abs(cocycle_batch(g, xs)) - np.log(size_batch(g))
        violations += int(np.sum(excess > 1e-12))
        worst = max(worst, float(excess.max()))
    assert record_criterion(2, violations == 0, f"{violations} violations, max(|sigma| - log N) = {worst:.2e}")


def test_criterion_03_lipschitz_bound(record_criterion):
    gen = stream(3, 0, purpose_tag("acceptance-3"))
    violations, worst = 0, 0.0
    for d in (2, 3, 5):
        count = 100_000 // 3 + 1
        g = random_matrices(gen, count, d)
        x = unit_rows(gen.standard_normal((count, d)))
        # a third of the pairs are near-coincident
        sep = np.where(gen.random(count) < 1 / 3, 10.0 ** gen.uniform(-10, -2, count), 1.0)
        y = unit_rows(x + sep[:, None] * gen.standard_normal((count, d)))
        gap = np.abs(cocycle_batch(g, x) - cocycle_batch(g, y))
        bound = math.sqrt(2.0) * size_batch(g) ** 2 * proj_metric_batch(x, y)
        violations += int(np.sum(gap > bound))
        worst = max(worst, float(np.max(gap / bound)))
    assert record_criterion(3, violations == 0, f"{violations} violations over 1e5 triples, max gap/bound = "
                                                f"{worst:.3f}")


def test_criterion_04_engine_vs_dense_oracle(record_criterion):
    gen = np.random.default_rng(4)
    worst = 0.0
    for run in range(1000):
        d = int(gen.integers(2, 5))
        n = int(gen.integers(1, 51))
        kind = run % 3
        if kind == 0:
            atoms = [gen.standard_normal((d, d)) + 0.5 * np.eye(d) for _ in range(3)]
            m = MatrixMeasure.finite_support(atoms, [0.5, 0.3, 0.2])
        elif kind == 1:
            m = MatrixMeasure.heavy_log_tail(d, 2.5, scale=0.3)
        else:
            m = MatrixMeasure.rotation_dilation(d, dilation=1.3)
        x = unit_rows(gen.standard_normal((1, d)))[0]
        tr = run_walk(m, ProjectivePoint.of(x), n, seed=run)
        a = np.eye(d)
        for y in replay_matrices(m, n, seed=run):
            a = y @ a
        oracle = math.log(np.linalg.norm(a @ x))
        worst = max(worst, abs(tr.log_vec_norm - oracle) / max(1.0, abs(oracle)))
    assert record_criterion(4, worst <= 1e-8, f"max relative error {worst:.2e} over 1000 runs")


# -- 5-7: estimators ---------------------------------------------------------------------------


def test_criterion_05_lyapunov_closed_forms(record_criterion):
    t0 = time.perf_counter()
    pm = estimate_lyapunov(MatrixMeasure.point_mass(np.diag([2.0, 1.0])), E1, 10_000, 100)
    rot = estimate_lyapunov(MatrixMeasure.rotation_dilation(2), E1, 10_000, 100)
    bern = estimate_lyapunov(bernoulli_walk_measure(), E1, 10_000, 1000, seed=5)
    se = bern.half_width / Z95
    elapsed = time.perf_counter() - t0
    ok = (abs(pm.lambda_hat - math.log(2)) <= 4 * np.finfo(float).eps and pm.half_width == 0
          and abs(rot.lambda_hat) <= 1e-15 and abs(bern.lambda_hat) <= 4 * se and elapsed < 120)
    assert record_criterion(5, ok, f"point mass {pm.lambda_hat!r} (log 2 = {math.log(2)!r}), rotation "
                                   f"{rot.lambda_hat:.1e}, Bernoulli {bern.lambda_hat:.2e} = "
                                   f"{bern.lambda_hat / se:.2f} SE, {elapsed:.1f} s")


def test_criterion_06_variance_bernoulli(record_criterion):
    est = estimate_sigma2(bernoulli_walk_measure(), E1, 1000, 10_000, seed=6)
    ok = 0.95 <= est.sigma2_hat <= 1.05
    assert record_criterion(6, ok, f"sigma2_hat = {est.sigma2_hat:.4f} +- {est.half_width:.4f}")


def test_criterion_07_contraction(record_criterion):
    pair = [(ProjectivePoint.of([1.0, 1.0]), ProjectivePoint.of([1.0, -1.0]))]
    pm = estimate_contraction(MatrixMeasure.point_mass(np.diag([2.0, 1.0])), pair, 100, 4)
    rot = estimate_contraction(MatrixMeasure.rotation_dilation(2), pair, 200, 100, seed=7)
    ok = (-math.log(2) * 1.05 <= pm.rate_hat <= -math.log(2) * 0.95
          and rot.rate_ci[0] <= 0.0 <= rot.rate_ci[1])
    assert record_criterion(7, ok, f"point mass rate {pm.rate_hat:.6f} (-log 2 = {-math.log(2):.6f}), "
                                   f"rotation CI ({rot.rate_ci[0]:.1e}, {rot.rate_ci[1]:.1e})")


# -- 8 and 15: CLT rate on a proximal measure, through the CLI -------------------------------------


def clt_config():
    m = proximal_measure().to_config()
    return {"measure": m, "seed": 8,
            "experiment": {"kind": "clt-rate", "statistic": "wasserstein", "r": 2.0, "nGrid": RATE_GRID,
                           "replicas": RATE_REPLICAS, "bootstrap": 200}}


@pytest.fixture(scope="module")
def clt_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("clt")
    cfg = root / "clt.json"
    cfg.write_text(json.dumps(clt_config()))
    t0 = time.perf_counter()
    code = main(["run", str(cfg), "--workers", "1", "--out-dir", str(root / "w1")])
    return root, cfg, code, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_08_clt_rate_proximal(record_criterion, clt_run):
    root, _, code, elapsed = clt_run
    assert code == 0
    s = next(csv.DictReader(open(root / "w1" / "clt-rate-summary.csv")))
    alpha, lo, hi = float(s["exponentHat"]), float(s["exponentLo"]), float(s["exponentHi"])
    dists = [float(r["distance"]) for r in csv.DictReader(open(root / "w1" / "clt-rate.csv"))]
    half = (hi - lo) / 2
    ok = 0.10 <= alpha <= 0.40 and half <= 0.15
    assert record_criterion(8, ok, f"alpha_hat = {alpha:.3f} CI ({lo:.3f}, {hi:.3f}) half-width {half:.3f}, "
                                   f"R^2 = {float(s['rSquared']):.3f}, W2 = "
                                   f"{', '.join(f'{d:.4f}' for d in dists)}, {elapsed:.0f} s")


@pytest.mark.slow
def test_criterion_15_determinism_across_workers(record_criterion, clt_run):
    root, cfg, code, _ = clt_run
    assert code == 0
    assert main(["run", str(cfg), "--workers", "8", "--out-dir", str(root / "w8")]) == 0
    same = all((root / "w1" / f).read_bytes() == (root / "w8" / f).read_bytes()
               for f in ("clt-rate.csv", "clt-rate-summary.csv"))
    assert record_criterion(15, same, "workers 1 vs 8 CSV " + ("byte-identical" if same else "DIFFER"))


# -- 9-12: iid-reduction measure ---------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_09_w1_rate_iid_reduction(record_criterion):
    res = rate_scan(bernoulli_walk_measure(), E1, "wasserstein", 1.0, RATE_GRID, RATE_REPLICAS, seed=9)
    ok = 0.35 <= res.exponent_hat <= 0.65
    assert record_criterion(9, ok, f"alpha_hat = {res.exponent_hat:.3f} CI ({res.exponent_ci[0]:.3f}, "
                                   f"{res.exponent_ci[1]:.3f}), log-model alpha = {res.loglog_exponent:.3f}")


@pytest.mark.slow
def test_criterion_10_berry_esseen_ks(record_criterion):
    res = rate_scan(bernoulli_walk_measure(), E1, "ks", 1.0, RATE_GRID, RATE_REPLICAS, seed=10)
    ks_last = res.distances[-1]
    # slope of log KS on log n is -alpha; its CI lies below 0 when alpha's lies above 0
    ok = ks_last < 0.02 and res.exponent_ci[0] > 0
    assert record_criterion(10, ok, f"KS(n=4096) = {ks_last:.4f}, slope CI ({-res.exponent_ci[1]:.3f}, "
                                    f"{-res.exponent_ci[0]:.3f})")


def test_criterion_11_functional_clt(record_criterion):
    rep = functional_sup_check(bernoulli_walk_measure(), E1, 10_000, 10_000, seed=11)
    assert record_criterion(11, rep.ks <= 0.03, f"KS = {rep.ks:.4f}, sigma_hat = {rep.sigma_hat:.4f}")


@pytest.mark.slow
def test_criterion_12_lil(record_criterion):
    rep = lil_statistic(bernoulli_walk_measure(), E1, 1_000_000, 200, seed=12)
    ok = 0.8 <= rep.median <= 1.5
    assert record_criterion(12, ok, f"median running max = {rep.median:.3f}, sigma2_hat = {rep.sigma2_hat:.3f}")


# -- 13-14: inequality corpus and hypothesis violation --------------------------------------------------


def test_criterion_13_von_bahr_esseen(record_criterion):
    orders = (1.25, 1.5, 2.0)
    violations = 0
    for i in range(50):
        kind, r = MD_KINDS[i % len(MD_KINDS)], orders[i % len(orders)]
        z = martingale_differences(kind, 4000, 100, stream(13, i, purpose_tag("vbe")))
        rep = vbe_inequality_check(z, r)
        violations += (not rep.holds) + (not rep.max_holds)
    assert record_criterion(13, violations == 0, f"{violations} violations over 50 configurations x 2 bounds")


@pytest.mark.slow
def test_criterion_14_mz_violation_detection(record_criterion):
    grid = [100, 1000, 10_000, 100_000]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        below = mz_rate_check(MatrixMeasure.heavy_log_tail(2, 1.2), E1, 1.5, grid, 1000, seed=14,
                              cal_replicas=200)
    above = mz_rate_check(MatrixMeasure.heavy_log_tail(2, 1.8), E1, 1.5, grid, 1000, seed=14,
                          cal_replicas=200)
    ok = not below.decay_asserted and above.decay_asserted
    assert record_criterion(14, ok, f"tail 1.2 < p: slope {below.slope:+.3f} decay={below.decay_asserted}; "
                                    f"tail 1.8 > p: slope {above.slope:+.3f} CI ({above.slope_ci[0]:+.3f}, "
                                    f"{above.slope_ci[1]:+.3f}) decay={above.decay_asserted}")


# -- 16: transport kernels -------------------------------------------------------------------------------


def test_criterion_16_wasserstein_kernels(record_criterion):
    gen = np.random.default_rng(16)
    a = gen.standard_normal(100)
    checks = {
        "a=b": all(wasserstein_empirical(a, a, r).value == 0.0 for r in (0.5, 1.0, 2.0)),
        "unit shift": wasserstein_empirical(np.zeros(7), np.ones(7), 1.0).value == 1.0,
        "two points": wasserstein_empirical([0.0, 1.0], [0.5, 1.5], 1.0).value == 0.5,
    }
    grid = GaussianLaw().quantile((np.arange(1, 10_001) - 0.5) / 10_000)
    checks["quantile grid"] = wasserstein_vs_gaussian(grid, GaussianLaw(), 1.0) < 2e-3
    det = wasserstein_vs_gaussian_detail(np.zeros(1000), GaussianLaw(), 1.0)
    checks["E|Z|"] = math.sqrt(2 / math.pi) - det.tail_bound <= det.value <= math.sqrt(2 / math.pi)
    checks["degenerate"] = wasserstein_vs_gaussian(np.zeros(5), GaussianLaw(0.0, 0.0), 1.0) == 0.0
    bad = 0
    for _ in range(1000):
        m = int(gen.integers(2, 30))
        x, y = gen.standard_normal(m), gen.standard_normal(m) * 2 + 0.3
        r = float(gen.uniform(0.05, 0.95))
        bad += wasserstein_empirical(x, y, r).value > monotone_cost(x, y, r) + 1e-12
    checks["exact <= monotone"] = bad == 0
    failed = [k for k, v in checks.items() if not v]
    assert record_criterion(16, not failed, "all examples reproduce" if not failed else f"failed: {failed}")
