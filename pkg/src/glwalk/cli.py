"""Command-line harness: ``glwalk run|describe <config.json>``.

Exit codes: 0 success, 2 invalid config or plan, 3 numerical failure.
Outputs are written with ``repr``-exact floats and carry the run digest
(a hash of the config with its seed, independent of the worker count), so
reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import platform
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Annotated, Any, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import engine, estimators, limit_stats
from .errors import ConfigError, NumericalError
from .geometry import ProjectivePoint, basis
from .measures import MatrixMeasure
from .rng import purpose_tag, stream

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
BYTES_PER_REPLICA_STEP = 8


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)


class PointGrid(_Strict):
    points: int = Field(64, ge=2)
    near: int = Field(8, ge=0)
    near_sep: float = Field(1e-6, alias="nearSep", gt=0, lt=1)
    pairs: list[tuple[list[float], list[float]]] | None = None


class _Base(_Strict):
    start: list[float] | None = None


class Lyapunov(_Base):
    kind: Literal["lyapunov"]
    n: int = Field(ge=100)
    replicas: int = Field(ge=2)


class Sigma2(_Base):
    kind: Literal["sigma2"]
    n: int = Field(ge=1)
    replicas: int = Field(ge=1)
    method: Literal["cross-replica", "batch-means"] = "cross-replica"


class Contraction(_Base):
    kind: Literal["contraction"]
    n: int = Field(ge=4)
    replicas: int = Field(ge=2)
    point_grid: PointGrid = Field(default_factory=PointGrid, alias="pointGrid")
    bootstrap: int = Field(200, ge=10)


class CouplingDecayCfg(_Base):
    kind: Literal["coupling-decay"]
    q: float = Field(gt=0)
    k_max: int = Field(alias="kMax", ge=1)
    replicas: int = Field(ge=2)
    p: float | None = Field(None, gt=0)
    point_grid: PointGrid = Field(default_factory=PointGrid, alias="pointGrid")


class _Calibrated(_Base):
    cal_n: int | None = Field(None, alias="calN", ge=1)
    cal_replicas: int | None = Field(None, alias="calReplicas", ge=2)


class CltRate(_Calibrated):
    kind: Literal["clt-rate"]
    statistic: Literal["wasserstein", "ks"] = "wasserstein"
    r: float = Field(1.0, ge=1)
    n_grid: list[int] = Field(alias="nGrid")
    replicas: int = Field(ge=2)
    bootstrap: int = Field(200, ge=10)


class MzRate(_Calibrated):
    kind: Literal["mz-rate"]
    p: float = Field(gt=1, lt=2)
    n_grid: list[int] = Field(alias="nGrid")
    replicas: int = Field(ge=2)
    bootstrap: int = Field(400, ge=10)


class Lil(_Calibrated):
    kind: Literal["lil"]
    n_max: int = Field(alias="nMax", ge=1)
    replicas: int = Field(ge=2)
    stride: int = Field(1, ge=1)


class FunctionalSup(_Calibrated):
    kind: Literal["functional-sup"]
    n: int = Field(ge=1)
    replicas: int = Field(ge=2)
    stride: int = Field(1, ge=1)


class Vbe(_Strict):
    kind: Literal["vbe"]
    configs: int = Field(50, ge=1)
    r: list[float] = Field(default_factory=lambda: [1.25, 1.5, 2.0])
    steps: int = Field(100, ge=1)
    replicas: int = Field(ge=2)


class NormGap(_Base):
    kind: Literal["norm-gap"]
    n_grid: list[int] = Field(alias="nGrid")
    replicas: int = Field(ge=2)
    point_grid: PointGrid = Field(default_factory=PointGrid, alias="pointGrid")
    bootstrap: int = Field(400, ge=10)


Experiment = Annotated[Union[Lyapunov, Sigma2, Contraction, CouplingDecayCfg, CltRate, MzRate, Lil,
                             FunctionalSup, Vbe, NormGap], Field(discriminator="kind")]


class ExperimentConfig(_Strict):
    measure: dict[str, Any] | None = None
    experiment: Experiment
    seed: int = Field(0, ge=0, lt=2 ** 64)
    workers: int | None = Field(None, ge=1)
    output: str | None = None
    format: Literal["csv", "json"] = "csv"


class PlanError(ConfigError):
    pass


# -- loading and planning -----------------------------------------------------------------


def load_config(path: str | os.PathLike, seed: int | None = None) -> tuple[ExperimentConfig, MatrixMeasure | None]:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    if seed is not None:
        raw["seed"] = seed
    cfg = ExperimentConfig.model_validate(raw)
    measure = None
    if cfg.experiment.kind != "vbe":
        if cfg.measure is None:
            raise ConfigError("measure", "required for this experiment kind")
        try:
            measure = MatrixMeasure.from_config(cfg.measure)
        except ConfigError as exc:
            raise ConfigError(f"measure.{exc.key}", str(exc).split(": ", 1)[-1]) from None
    return cfg, measure


def run_digest(cfg: ExperimentConfig) -> str:
    """Hash of everything that determines the results (not workers or output paths)."""
    body = cfg.model_dump(mode="json", by_alias=True, exclude={"workers", "output", "format"})
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def _start(exp, measure: MatrixMeasure) -> ProjectivePoint:
    if getattr(exp, "start", None) is None:
        return basis(measure.dim, 0)
    if len(exp.start) != measure.dim:
        raise PlanError("experiment.start", f"needs {measure.dim} coordinates")
    try:
        return ProjectivePoint.of(exp.start)
    except ValueError as exc:
        raise PlanError("experiment.start", str(exc)) from None


def _pair_grid(pg: PointGrid, d: int) -> estimators.PairGrid:
    if pg.pairs is not None:
        pairs = []
        for i, (x, y) in enumerate(pg.pairs):
            if len(x) != d or len(y) != d:
                raise PlanError("experiment.pointGrid.pairs", f"pair {i} must have {d} coordinates")
            pairs.append((ProjectivePoint.of(x), ProjectivePoint.of(y)))
        return estimators.make_pair_grid(pairs)
    return estimators.default_pair_grid(d, pg.points, pg.near, pg.near_sep)


def _increasing(grid: list[int], key: str, minimum: int) -> None:
    if len(grid) < minimum:
        raise PlanError(key, f"at least {minimum} points are required, got {len(grid)}")
    if any(n < 1 for n in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise PlanError(key, "must be positive and strictly increasing")


def plan(cfg: ExperimentConfig, measure: MatrixMeasure | None) -> list[tuple[str, int]]:
    """Validate preconditions and list (stage, matrix draws) without sampling."""
    e = cfg.experiment
    k = e.kind
    if measure is not None:
        _start(e, measure)
    if k == "lyapunov":
        return [("ensemble S_n and log|A_n|", e.n * e.replicas), ("reduce mean and CI", 0)]
    if k == "sigma2":
        if e.method == "cross-replica" and e.replicas < 100:
            raise PlanError("experiment.replicas", "cross-replica variance needs replicas >= 100")
        stages = [("ensemble S_n", e.n * e.replicas)]
        if e.method == "batch-means":
            stages.insert(0, ("calibration lambda_hat", e.n * max(e.replicas, 16)))
        return stages + [("reduce variance", 0)]
    if k in ("contraction", "coupling-decay", "norm-gap"):
        grid = _pair_grid(e.point_grid, measure.dim)
        npairs = len(grid.pairs)
        if k == "contraction":
            if any(x == y for x, y in grid.pairs):
                raise PlanError("experiment.pointGrid", "contraction pairs must be distinct")
            return [("coupled pair walks", e.n * e.replicas), (f"{npairs} pairs tracked per replica", 0),
                    ("slope fit and bootstrap", 0)]
        if k == "coupling-decay":
            return [("coupled pair walks", e.k_max * e.replicas), (f"{npairs} pairs tracked per replica", 0),
                    ("max over grid", 0)]
        _increasing(e.n_grid, "experiment.nGrid", 2)
        return [("coupled pair walks", e.n_grid[-1] * e.replicas), ("ensemble log|A_n|", e.n_grid[-1] * e.replicas),
                ("bootstrap trend", 0)]
    if k == "clt-rate":
        _increasing(e.n_grid, "experiment.nGrid", 3)
        if math.log10(e.n_grid[-1] / e.n_grid[0]) < 1.5:
            raise PlanError("experiment.nGrid", "must span at least 1.5 decades")
        cal = (e.cal_n or e.n_grid[-1]) * (e.cal_replicas or e.replicas)
        return [("calibration lambda_hat, sigma2_hat", cal)] + \
            [(f"ensemble n={n}", n * e.replicas) for n in e.n_grid] + [("distances, fit, bootstrap", 0)]
    if k == "mz-rate":
        _increasing(e.n_grid, "experiment.nGrid", 2)
        cal = (e.cal_n or e.n_grid[-1]) * (e.cal_replicas or e.replicas)
        return [("calibration lambda_hat", cal), ("ensemble with checkpoints", e.n_grid[-1] * e.replicas),
                ("quantiles and bootstrap slope", 0)]
    if k == "lil":
        if e.stride != 1:
            raise PlanError("experiment.stride", "lil needs stride 1 traces")
        if e.n_max < 10_000:
            raise PlanError("experiment.nMax", "must be >= 10^4")
        cal = (e.cal_n or e.n_max) * (e.cal_replicas or e.replicas)
        return [("calibration lambda_hat, sigma2_hat", cal), ("ensemble with geometric checkpoints",
                                                                e.n_max * e.replicas), ("running max", 0)]
    if k == "functional-sup":
        if e.stride != 1:
            raise PlanError("experiment.stride", "functional-sup needs stride 1 traces")
        cal = (e.cal_n or e.n) * (e.cal_replicas or e.replicas)
        return [("calibration lambda_hat, sigma2_hat", cal), ("ensemble running sup", e.n * e.replicas),
                ("KS against 2 Phi(a) - 1", 0)]
    if any(not 1 < r <= 2 for r in e.r):
        raise PlanError("experiment.r", "every r must lie in (1, 2]")
    return [("martingale-difference corpus", 0), (f"{e.configs} inequality checks", 0)]


def _memory_estimate(cfg: ExperimentConfig) -> int:
    e = cfg.experiment
    reps = getattr(e, "replicas", 0)
    width = len(getattr(e, "n_grid", [])) or 1
    if e.kind == "vbe":
        return e.replicas * e.steps * 8 * 4
    if e.kind in ("contraction", "coupling-decay", "norm-gap"):
        npairs = e.point_grid.points + e.point_grid.near if e.point_grid.pairs is None else len(e.point_grid.pairs)
        length = {"contraction": getattr(e, "n", 0), "coupling-decay": getattr(e, "k_max", 0)}.get(e.kind, width)
        return reps * npairs * length * BYTES_PER_REPLICA_STEP * 3
    return reps * (width + 8) * BYTES_PER_REPLICA_STEP * 4


# -- experiments ---------------------------------------------------------------------------


def _run(cfg: ExperimentConfig, measure: MatrixMeasure | None, workers: int | None) -> tuple[dict, list[dict]]:
    e = cfg.experiment
    seed = cfg.seed
    k = e.kind
    if k == "lyapunov":
        r = estimators.estimate_lyapunov(measure, _start(e, measure), e.n, e.replicas, seed, workers=workers)
        return {"lambdaHat": r.lambda_hat, "halfWidth": r.half_width, "matrixLambdaHat": r.matrix_lambda_hat,
                "matrixHalfWidth": r.matrix_half_width, "gapQ99": r.gap_q99,
                "tracksConsistent": r.tracks_consistent, "nUsed": r.n_used, "replicasUsed": r.replicas_used}, []
    if k == "sigma2":
        r = estimators.estimate_sigma2(measure, _start(e, measure), e.n, e.replicas, seed, e.method,
                                       workers=workers)
        return {"sigma2Hat": r.sigma2_hat, "halfWidth": r.half_width, "method": r.method,
                "clamped": r.clamped, "lambdaHat": r.lambda_hat}, []
    if k == "contraction":
        grid = _pair_grid(e.point_grid, measure.dim)
        r = estimators.estimate_contraction(measure, grid, e.n, e.replicas, seed, n_boot=e.bootstrap,
                                            workers=workers)
        rows = [{"n": n, "tailProb": p} for n, p in r.tail_curve]
        return {"rateHat": r.rate_hat, "rateLo": r.rate_ci[0], "rateHi": r.rate_ci[1], "ellHat": r.ell_hat,
                "decays": r.decays, "worstPair": r.worst_pair, "gridDigest": r.grid_digest}, rows
    if k == "coupling-decay":
        grid = _pair_grid(e.point_grid, measure.dim)
        r = estimators.coupling_decay_curve(measure, e.q, grid, e.k_max, e.replicas, seed, e.p, workers=workers)
        rows = [{"k": int(kk), "moment": float(c), "stderr": float(s),
                 "partialSum": None if r.partial_sums is None else float(ps)}
                for kk, c, s, ps in zip(r.ks, r.curve, r.stderr,
                                        r.partial_sums if r.partial_sums is not None else r.ks)]
        return {"q": r.q, "p": r.p, "gridDigest": r.grid_digest, "supIsGridMax": True}, rows
    if k == "clt-rate":
        r = limit_stats.rate_scan(measure, _start(e, measure), e.statistic, e.r, e.n_grid, e.replicas, seed,
                                  cal_n=e.cal_n, cal_replicas=e.cal_replicas, n_boot=e.bootstrap,
                                  workers=workers)
        rows = [{"n": n, "distance": d, "distance_lo": lo, "distance_hi": hi}
                for n, d, (lo, hi) in zip(r.grid_n, r.distances, r.distance_ci)]
        return {"exponentHat": r.exponent_hat, "exponentLo": r.exponent_ci[0], "exponentHi": r.exponent_ci[1],
                "interceptHat": r.intercept_hat, "rSquared": r.r_squared, "loglogExponent": r.loglog_exponent,
                "loglogBeta": r.loglog_beta, "unreliable": r.unreliable, "degenerate": r.degenerate,
                "lambdaHat": r.lambda_hat, "sigmaHat": r.sigma_hat, "statistic": r.statistic, "r": r.r,
                "seed": r.seed, "calibrationSeed": r.calibration_seed}, rows
    if k == "mz-rate":
        r = limit_stats.mz_rate_check(measure, _start(e, measure), e.p, e.n_grid, e.replicas, seed,
                                      cal_n=e.cal_n, cal_replicas=e.cal_replicas, n_boot=e.bootstrap,
                                      workers=workers)
        rows = [{"n": n, "q50": float(q[0]), "q90": float(q[1]), "q99": float(q[2]), "q90_lo": lo, "q90_hi": hi}
                for n, q, (lo, hi) in zip(r.grid_n, r.quantiles, r.q90_ci)]
        return {"p": r.p, "slope": r.slope, "slopeLo": r.slope_ci[0], "slopeHi": r.slope_ci[1],
                "decayAsserted": r.decay_asserted, "allZero": r.all_zero, "hypothesisMet": r.hypothesis_met,
                "lambdaHat": r.lambda_hat}, rows
    if k == "lil":
        r = limit_stats.lil_statistic(measure, _start(e, measure), e.n_max, e.replicas, seed,
                                      cal_n=e.cal_n, cal_replicas=e.cal_replicas, workers=workers)
        return {"median": r.median, "lambdaHat": r.lambda_hat, "sigma2Hat": r.sigma2_hat,
                "checkpoints": len(r.checkpoints)}, [{"runningMax": float(v)} for v in r.running_max.values]
    if k == "functional-sup":
        r = limit_stats.functional_sup_check(measure, _start(e, measure), e.n, e.replicas, seed,
                                             cal_n=e.cal_n, cal_replicas=e.cal_replicas, workers=workers)
        return {"ks": r.ks, "lambdaHat": r.lambda_hat, "sigmaHat": r.sigma_hat}, \
            [{"supOverSigma": float(v)} for v in r.sample.values]
    if k == "norm-gap":
        grid = _pair_grid(e.point_grid, measure.dim)
        r = limit_stats.norm_gap_boundedness(measure, grid, e.n_grid, e.replicas, seed, e.bootstrap,
                                             workers=workers)
        rows = [{"n": n, "pairGap": float(p), "normGap": float(g)}
                for n, p, g in zip(r.grid_n, r.pair_gap, r.norm_gap)]
        return {"bounded": r.bounded, "pairSlopeLo": r.pair_slope_ci[0], "pairSlopeHi": r.pair_slope_ci[1],
                "normSlopeLo": r.norm_slope_ci[0], "normSlopeHi": r.norm_slope_ci[1],
                "gridDigest": r.grid_digest}, rows
    rows = []
    for i in range(e.configs):
        kind = limit_stats.MD_KINDS[i % len(limit_stats.MD_KINDS)]
        r_ord = e.r[i % len(e.r)]
        z = limit_stats.martingale_differences(kind, e.replicas, e.steps, stream(seed, i, purpose_tag("vbe")))
        v = limit_stats.vbe_inequality_check(z, r_ord)
        rows.append({"config": i, "kind": kind, "r": r_ord, "lhs": v.lhs, "rhs": v.rhs, "slack": v.slack,
                     "holds": v.holds, "maxLhs": v.max_lhs, "maxRhs": v.max_rhs, "maxHolds": v.max_holds})
    violations = sum((not row["holds"]) + (not row["maxHolds"]) for row in rows)
    return {"configs": e.configs, "violations": violations}, rows


# -- output ----------------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return engine._fmt(float(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _csv_text(rows: list[dict], digest: str) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    cols = ["run_digest", *rows[0].keys()]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([digest, *(_fmt(row[c]) for c in cols[1:])])
    return buf.getvalue()


def write_outputs(out_dir: Path, fmt: str, kind: str, digest: str, summary: dict, rows: list[dict]) -> list[str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    if fmt == "csv":
        (out_dir / f"{kind}-summary.csv").write_text(_csv_text([summary], digest))
        files.append(f"{kind}-summary.csv")
        if rows:
            (out_dir / f"{kind}.csv").write_text(_csv_text(rows, digest))
            files.append(f"{kind}.csv")
    else:
        body = {"run_digest": digest, "summary": _jsonable(summary), "rows": _jsonable(rows)}
        (out_dir / f"{kind}.json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
        files.append(f"{kind}.json")
    return files


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "numba", "pydantic"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


# -- commands --------------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg, measure = load_config(args.config, args.seed)
    plan(cfg, measure)
    workers = args.workers or cfg.workers or engine.default_workers()
    out_dir = Path(args.out_dir or cfg.output or ".")
    fmt = args.format or cfg.format
    digest = run_digest(cfg)
    t0 = time.perf_counter()
    summary, rows = _run(cfg, measure, workers)
    wall = time.perf_counter() - t0
    files = write_outputs(out_dir, fmt, cfg.experiment.kind, digest, summary, rows)
    manifest = {
        "runDigest": digest,
        "configDigest": hashlib.sha256(Path(args.config).read_bytes()).hexdigest()[:16],
        "seed": cfg.seed,
        "experiment": cfg.experiment.kind,
        "measureDigest": measure.digest() if measure is not None else None,
        "workers": workers,
        "versions": _versions(),
        "wallTimeSeconds": wall,
        "outputs": files,
        "summary": _jsonable(summary),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(json.dumps(_jsonable(summary), sort_keys=True))
    return EXIT_OK


def cmd_describe(args) -> int:
    cfg, measure = load_config(args.config, args.seed)
    stages = plan(cfg, measure)
    e = cfg.experiment
    print(f"experiment: {e.kind}  seed: {cfg.seed}  run digest: {run_digest(cfg)}")
    if measure is not None:
        print(f"measure: {measure.kind} dim={measure.dim} digest={measure.digest()}")
    total = 0
    for i, (stage, draws) in enumerate(stages):
        arrow = "  -> " if i else "     "
        extra = f"  ({draws:,} matrix draws)" if draws else ""
        print(f"{arrow}{stage}{extra}")
        total += draws
    print(f"total matrix draws: {total:,}")
    print(f"memory estimate: {_memory_estimate(cfg) / 2 ** 20:.1f} MiB")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glwalk", description="Random matrix product experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (("run", cmd_run, "run an experiment config"),
                            ("describe", cmd_describe, "validate a config and print the plan")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="path to a JSON experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--workers", type=int, default=None,
                        help="worker threads (default: config, then $GLWALK_WORKERS, then 1)")
        sp.add_argument("--out-dir", default=None, help="output directory (default: config 'output' or .)")
        sp.add_argument("--format", choices=("csv", "json"), default=None)
        sp.set_defaults(func=fn)
    return p


def _validation_message(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"])
        lines.append(f"{loc}: {err['msg']}")
    return "\n".join(lines)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers is not None and args.workers < 1:
        print("error: --workers: must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"invalid config:\n{_validation_message(exc)}", file=sys.stderr)
        return EXIT_INVALID
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
