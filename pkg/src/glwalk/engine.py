"""The left random walk A_n = Y_n ... Y_1 in log-stabilized form.

The vector track keeps ``u_n = A_n x / |A_n x|`` and accumulates
``S_n = sum_k log |Y_k u_{k-1}|`` with compensated summation.  The matrix
track carries ``A_n / s_n`` renormalized to unit Frobenius norm each step
with ``log s_n`` on the side; ``log |A_n|`` is read off at checkpoints.

Ensembles give each replica its own Philox stream and process replicas in
fixed-size chunks, so results do not depend on the number of workers.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import NumericalError
from .geometry import ProjectivePoint, proj_metric
from .measures import MatrixMeasure
from .rng import purpose_tag, stream
from .samples import SampleSet

CHUNK = 256
WALK_TAG = purpose_tag("walk")
MAGIC = b"MWK1"


def block_size(dim: int) -> int:
    """Steps drawn per stream call; depends on the dimension only."""
    return max(64, 8192 // (dim * dim))


def default_workers() -> int:
    return max(1, int(os.environ.get("GLWALK_WORKERS", "1")))


def _start_vectors(start, replicas: int, dim: int) -> np.ndarray:
    if isinstance(start, ProjectivePoint):
        return np.tile(start.rep, (replicas, 1))
    arr = np.asarray(start, dtype=float)
    if arr.shape == (dim,):
        return np.tile(arr / np.linalg.norm(arr), (replicas, 1))
    if arr.shape != (replicas, dim):
        raise ValueError(f"start must be a point or a ({replicas}, {dim}) array")
    return arr / np.linalg.norm(arr, axis=1, keepdims=True)


def _checkpoints(n: int, stride: int | None, extra=()) -> np.ndarray:
    steps = set(int(k) for k in extra if 1 <= k <= n)
    if stride:
        steps.update(range(stride, n + 1, stride))
        steps.add(n)
    return np.array(sorted(steps), dtype=np.int64)


def _draw_block(measure: MatrixMeasure, gens, mats, scale):
    count = mats.shape[1]
    for i, gen in enumerate(gens):
        dr = measure.draw(gen, count)
        mats[i] = dr.mats
        if dr.logscale is not None:
            scale[i] = dr.logscale


# -- ensembles of vector walks -----------------------------------------------------


@dataclass
class EnsembleRecord:
    """Per-replica results of an ensemble, indexed by replica."""

    n: int
    seed: int
    measure_digest: str
    final_s: np.ndarray
    final_u: np.ndarray
    final_logmat: np.ndarray | None
    steps: np.ndarray
    s: np.ndarray
    logmat: np.ndarray | None
    logcoeff: np.ndarray | None
    coeff_floor: np.ndarray | None
    extremes: np.ndarray | None
    points: np.ndarray | None = None

    @property
    def replicas(self) -> int:
        return self.final_s.shape[0]


def simulate(measure: MatrixMeasure, start, n: int, replicas: int, seed: int,
             tag=WALK_TAG, *, stride: int | None = None, checkpoints=(),
             track_matrix: bool = False, target: ProjectivePoint | None = None,
             center: float | None = None, record_points: bool = False,
             first_replica: int = 0, workers: int | None = None) -> EnsembleRecord:
    """Run ``replicas`` independent walks of length ``n``.

    Checkpoint values are recorded at multiples of ``stride`` (plus ``n``)
    and at the explicit ``checkpoints``.  With ``center`` set, the running
    max/min of ``S_k - k * center`` over ``0 <= k <= n`` is kept.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    d = measure.dim
    ck = _checkpoints(n, stride, checkpoints)
    nck = ck.shape[0]
    u0 = _start_vectors(start, replicas, d)
    out = EnsembleRecord(
        n=n, seed=seed, measure_digest=measure.digest(),
        final_s=np.empty(replicas), final_u=np.empty((replicas, d)),
        final_logmat=np.empty(replicas) if track_matrix else None,
        steps=ck, s=np.empty((replicas, nck)),
        logmat=np.empty((replicas, nck)) if track_matrix else None,
        logcoeff=np.empty((replicas, nck)) if target is not None else None,
        coeff_floor=np.zeros((replicas, nck), dtype=np.int8) if target is not None else None,
        extremes=np.empty((replicas, 2)) if center is not None else None,
        points=np.empty((replicas, nck, d)) if record_points else None,
    )
    bs = block_size(d)
    tgt = target.rep.copy() if target is not None else np.zeros(d)

    def run_chunk(lo: int):
        hi = min(lo + CHUNK, replicas)
        m = hi - lo
        gens = [stream(seed, first_replica + r, tag) for r in range(lo, hi)]
        u = u0[lo:hi].copy()
        s = np.zeros((m, 2))
        bmat = np.tile(np.eye(d) / math.sqrt(d), (m, 1, 1))
        logb = np.full(m, 0.5 * math.log(d))
        ext = np.zeros((m, 2))
        o_s = np.zeros((m, nck))
        o_m = np.zeros((m, nck))
        o_c = np.zeros((m, nck))
        o_f = np.zeros((m, nck), dtype=np.int8)
        o_p = np.zeros((m, nck if record_points else 0, d))
        mats = np.empty((m, bs, d, d))
        scale = np.zeros((m, bs))
        has_scale = measure.kind == "heavy-log-tail"
        step = 0
        while step < n:
            nsteps = min(bs, n - step)
            _draw_block(measure, gens, mats, scale)
            kp0 = int(np.searchsorted(ck, step, side="right"))
            err = _kernels.vector_block(
                mats, scale, has_scale, nsteps, step, u, s, track_matrix, bmat, logb,
                ck, kp0, tgt, target is not None, 0.0 if center is None else float(center),
                center is not None, ext, o_s, o_m, o_c, o_f, record_points, o_p)
            if err >= 0:
                raise NumericalError("non-finite walk state", step=int(err))
            step += nsteps
        out.final_s[lo:hi] = s[:, 0] + s[:, 1]
        out.final_u[lo:hi] = u
        if track_matrix:
            out.final_logmat[lo:hi] = logb + np.log([_kernels._opnorm(b) for b in bmat])
            out.logmat[lo:hi] = o_m
        out.s[lo:hi] = o_s
        if target is not None:
            out.logcoeff[lo:hi] = o_c
            out.coeff_floor[lo:hi] = o_f
        if center is not None:
            out.extremes[lo:hi] = ext
        if record_points:
            out.points[lo:hi] = o_p

    _run_chunks(run_chunk, replicas, workers)
    return out


def _run_chunks(fn, replicas: int, workers: int | None) -> None:
    workers = default_workers() if workers is None else max(1, int(workers))
    starts = range(0, replicas, CHUNK)
    if workers == 1 or len(starts) == 1:
        for lo in starts:
            fn(lo)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for f in [pool.submit(fn, lo) for lo in starts]:
            f.result()


# -- single walks ------------------------------------------------------------------


@dataclass
class WalkTrace:
    n: int
    log_vec_norm: float
    point: ProjectivePoint
    log_mat_norm: float
    log_coeff: float | None
    coeff_floor: bool
    steps: np.ndarray
    s: np.ndarray
    logmat: np.ndarray
    logcoeff: np.ndarray | None
    points: np.ndarray
    stride: int


def run_walk(measure: MatrixMeasure, start: ProjectivePoint, n: int, stride: int = 1,
             target: ProjectivePoint | None = None, seed: int = 0, replica: int = 0,
             tag=WALK_TAG) -> WalkTrace:
    """One walk with checkpoints every ``stride`` steps (step 0 included)."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    rec = _single(measure, start, n, seed, replica, tag, stride, target)
    d = measure.dim
    steps = np.concatenate([[0], rec.steps])
    s = np.concatenate([[0.0], rec.s[0]])
    logmat = np.concatenate([[0.0], rec.logmat[0]])
    pts = np.concatenate([start.rep[None, :], rec.points[0]])
    logcoeff = None
    log_coeff = None
    floor = False
    if target is not None:
        c0 = math.log(max(abs(float(start.rep @ target.rep)), _kernels.COEFF_FLOOR))
        logcoeff = np.concatenate([[c0], rec.logcoeff[0]])
        log_coeff = float(logcoeff[-1])
        floor = bool(rec.coeff_floor[0, -1])
    assert pts.shape[1] == d
    return WalkTrace(n=n, log_vec_norm=float(rec.final_s[0]), point=ProjectivePoint.of(rec.final_u[0]),
                     log_mat_norm=float(rec.final_logmat[0]), log_coeff=log_coeff, coeff_floor=floor,
                     steps=steps, s=s, logmat=logmat, logcoeff=logcoeff, points=pts, stride=stride)


def _single(measure, start, n, seed, replica, tag, stride, target) -> EnsembleRecord:
    # the replica-r walk is exactly member r of an ensemble with the same seed
    return simulate(measure, start, n, 1, seed, tag, stride=stride, track_matrix=True,
                    target=target, record_points=True, first_replica=replica, workers=1)


# -- coupled two-point walks ---------------------------------------------------------


@dataclass
class PairRecord:
    n: int
    steps: np.ndarray
    logd0: np.ndarray
    logd: np.ndarray
    cum: np.ndarray
    sx: np.ndarray
    inc: np.ndarray
    final_ux: np.ndarray
    final_w: np.ndarray
    final_a: np.ndarray
    final_logd: np.ndarray


def _pair_frames(pairs) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    ux, w, a, logd = [], [], [], []
    for x, y in pairs:
        xr, yr = x.rep, y.rep
        c = float(xr @ yr)
        rej = yr - c * xr
        rej = rej - float(xr @ rej) * xr
        b = float(np.linalg.norm(rej))
        if b == 0.0:
            raise ValueError("coupled walk needs two distinct projective points")
        ux.append(xr)
        w.append(rej / b)
        a.append(c / math.hypot(c, b))
        logd.append(math.log(b / math.hypot(c, b)))
    return np.array(ux), np.array(w), np.array(a), np.array(logd)


def simulate_pairs(measure: MatrixMeasure, pairs, n: int, replicas: int, seed: int,
                   tag=WALK_TAG, *, stride: int | None = 1, checkpoints=(), kmax: int = 0,
                   workers: int | None = None) -> PairRecord:
    """Coupled walks: every pair in a replica sees the same matrices Y_k.

    Using the same ``(seed, tag)`` as :func:`simulate` gives the same
    matrices, so pair and vector statistics can be combined.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("at least one pair is required")
    d = measure.dim
    ux0, w0, a0, logd0 = _pair_frames(pairs)
    npair = len(pairs)
    ck = _checkpoints(n, stride, checkpoints)
    nck = ck.shape[0]
    kmax = min(int(kmax), n)
    rec = PairRecord(n=n, steps=ck, logd0=logd0,
                     logd=np.empty((replicas, npair, nck)), cum=np.empty((replicas, npair, nck)),
                     sx=np.empty((replicas, npair, nck)), inc=np.empty((replicas, npair, kmax)),
                     final_ux=np.empty((replicas, npair, d)), final_w=np.empty((replicas, npair, d)),
                     final_a=np.empty((replicas, npair)), final_logd=np.empty((replicas, npair)))
    bs = block_size(d)
    has_scale = measure.kind == "heavy-log-tail"

    def run_chunk(lo: int):
        hi = min(lo + CHUNK, replicas)
        m = hi - lo
        gens = [stream(seed, r, tag) for r in range(lo, hi)]
        ux = np.tile(ux0, (m, 1, 1))
        w = np.tile(w0, (m, 1, 1))
        a = np.tile(a0, (m, 1))
        logd = np.tile(logd0, (m, 1))
        sx = np.zeros((m, npair, 2))
        cum = np.zeros((m, npair, 2))
        o_l = np.zeros((m, npair, nck))
        o_c = np.zeros((m, npair, nck))
        o_s = np.zeros((m, npair, nck))
        o_i = np.zeros((m, npair, kmax))
        mats = np.empty((m, bs, d, d))
        scale = np.zeros((m, bs))
        step = 0
        while step < n:
            nsteps = min(bs, n - step)
            _draw_block(measure, gens, mats, scale)
            kp0 = int(np.searchsorted(ck, step, side="right"))
            err = _kernels.pair_block(mats, scale, has_scale, nsteps, step, ux, w, a, logd, sx, cum,
                                      ck, kp0, o_l, o_c, o_s, kmax, o_i)
            if err >= 0:
                raise NumericalError("non-finite coupled state", step=int(err))
            step += nsteps
        rec.logd[lo:hi] = o_l
        rec.cum[lo:hi] = o_c
        rec.sx[lo:hi] = o_s
        rec.inc[lo:hi] = o_i
        rec.final_ux[lo:hi] = ux
        rec.final_w[lo:hi] = w
        rec.final_a[lo:hi] = a
        rec.final_logd[lo:hi] = logd

    _run_chunks(run_chunk, replicas, workers)
    return rec


@dataclass
class CouplingTrace:
    n: int
    point_x: ProjectivePoint
    point_y: ProjectivePoint
    log_dist: float
    cum_gap: float
    steps: np.ndarray
    log_dists: np.ndarray
    cum_gaps: np.ndarray
    increment_gaps: np.ndarray


def run_coupled_walk(measure: MatrixMeasure, x: ProjectivePoint, y: ProjectivePoint, n: int,
                     stride: int = 1, seed: int = 0, tag=WALK_TAG) -> CouplingTrace:
    """Orbits of x and y under the same matrices; log d kept exactly in log scale."""
    if proj_metric(x, y) == 0.0 and x == y:
        raise ValueError("x and y are the same projective point")
    rec = simulate_pairs(measure, [(x, y)], n, 1, seed, tag, stride=stride, kmax=n, workers=1)
    ux, w = rec.final_ux[0, 0], rec.final_w[0, 0]
    a, logd = rec.final_a[0, 0], rec.final_logd[0, 0]
    yv = a * ux + math.exp(logd) * w
    steps = np.concatenate([[0], rec.steps])
    return CouplingTrace(
        n=n, point_x=ProjectivePoint.of(ux), point_y=ProjectivePoint.of(yv),
        log_dist=float(logd), cum_gap=float(rec.cum[0, 0, -1]), steps=steps,
        log_dists=np.concatenate([[rec.logd0[0]], rec.logd[0, 0]]),
        cum_gaps=np.concatenate([[0.0], rec.cum[0, 0]]), increment_gaps=rec.inc[0, 0].copy())


# -- polygonal process -----------------------------------------------------------------


@dataclass
class PolygonalProcess:
    n: int
    grid_values: np.ndarray

    def __call__(self, t):
        return np.interp(t, np.arange(self.n + 1) / self.n, self.grid_values)

    def sup(self) -> float:
        return float(self.grid_values.max())


def build_polygonal(trace: WalkTrace, lambda_hat: float) -> PolygonalProcess:
    """B_n at t = k/n: (S_k - k * lambda_hat) / sqrt(n); linear in between."""
    if trace.stride != 1:
        raise ValueError("the polygonal process needs a stride-1 trace")
    n = trace.n
    k = np.arange(n + 1)
    vals = (trace.s - k * lambda_hat) / math.sqrt(n)
    vals[0] = 0.0
    return PolygonalProcess(n, vals)


# -- ensembles -> sample sets ----------------------------------------------------------

STATISTICS = ("S", "logMatNorm", "logCoeff", "normGap", "supPolygonal")


def run_ensemble(measure: MatrixMeasure, start: ProjectivePoint, n: int, replicas: int,
                 statistic: str = "S", seed: int = 0, *, target: ProjectivePoint | None = None,
                 lambda_hat: float | None = None, tag=WALK_TAG,
                 workers: int | None = None) -> SampleSet:
    """Terminal statistic of ``replicas`` independent walks as a sorted sample.

    ``normGap`` is ``log|A_n| - log|A_n x|``; ``supPolygonal`` is
    ``sup_t B_n(t)`` and needs ``lambda_hat``.
    """
    if statistic not in STATISTICS:
        raise ValueError(f"statistic must be one of {STATISTICS}")
    if statistic == "supPolygonal" and lambda_hat is None:
        raise ValueError("supPolygonal needs lambda_hat")
    if statistic == "logCoeff" and target is None:
        raise ValueError("logCoeff needs a target point")
    rec = simulate(measure, start, n, replicas, seed, tag,
                   track_matrix=statistic in ("logMatNorm", "normGap"),
                   target=target if statistic == "logCoeff" else None,
                   center=lambda_hat if statistic == "supPolygonal" else None,
                   checkpoints=(n,), workers=workers)
    if statistic == "S":
        vals = rec.final_s
    elif statistic == "logMatNorm":
        vals = rec.final_logmat
    elif statistic == "normGap":
        vals = rec.final_logmat - rec.final_s
    elif statistic == "logCoeff":
        vals = rec.logcoeff[:, -1]
    else:
        vals = rec.extremes[:, 0] / math.sqrt(n)
    return SampleSet.of(vals, n=n, measure_digest=rec.measure_digest, statistic=statistic, seed=seed)


# -- CSV and binary checkpoint I/O ------------------------------------------------------

TRACE_COLUMNS = ("replica", "n", "S_n", "logMatNorm", "logCoeff", "logDist")


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_trace_csv(fh, rec: EnsembleRecord, log_dist: np.ndarray | None = None) -> None:
    """Checkpoint rows ``(replica, n, S_n, logMatNorm, logCoeff, logDist)``."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for r in range(rec.replicas):
        for j, step in enumerate(rec.steps):
            writer.writerow([
                _fmt(int(r)), _fmt(int(step)), _fmt(rec.s[r, j]),
                _fmt(rec.logmat[r, j]) if rec.logmat is not None else "",
                _fmt(rec.logcoeff[r, j]) if rec.logcoeff is not None else "",
                _fmt(log_dist[r, j]) if log_dist is not None else "",
            ])


def trace_csv_text(rec: EnsembleRecord) -> str:
    buf = io.StringIO()
    write_trace_csv(buf, rec)
    return buf.getvalue()


@dataclass
class WalkState:
    """Resumable state of one walk, saved at a draw-block boundary."""

    step: int
    u: np.ndarray
    s: np.ndarray
    bmat: np.ndarray
    logb: float
    rng_state: dict
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        header = json.dumps({
            "version": 1, "step": self.step, "dim": int(self.u.shape[0]), "logb": self.logb,
            "rng_state": _jsonable(self.rng_state), "meta": self.meta,
        }, sort_keys=True).encode()
        arrays = np.concatenate([self.u, self.s, self.bmat.ravel()]).astype("<f8").tobytes()
        return MAGIC + struct.pack("<I", len(header)) + header + arrays

    @classmethod
    def from_bytes(cls, blob: bytes) -> "WalkState":
        if blob[:4] != MAGIC:
            raise ValueError("not a walk checkpoint (bad magic)")
        (hlen,) = struct.unpack("<I", blob[4:8])
        header = json.loads(blob[8:8 + hlen])
        if header.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        d = header["dim"]
        arr = np.frombuffer(blob[8 + hlen:], dtype="<f8")
        if arr.shape[0] != d + 2 + d * d:
            raise ValueError("truncated checkpoint")
        return cls(step=header["step"], u=arr[:d].copy(), s=arr[d:d + 2].copy(),
                   bmat=arr[d + 2:].reshape(d, d).copy(), logb=header["logb"],
                   rng_state=_unjson(header["rng_state"]), meta=header["meta"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _unjson(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["__array__"], dtype=obj["dtype"])
        return {k: _unjson(v) for k, v in obj.items()}
    return obj


def start_walk(measure: MatrixMeasure, start: ProjectivePoint, seed: int = 0, replica: int = 0,
               tag=WALK_TAG) -> WalkState:
    d = measure.dim
    gen = stream(seed, replica, tag)
    return WalkState(step=0, u=start.rep.copy(), s=np.zeros(2), bmat=np.eye(d) / math.sqrt(d),
                     logb=0.5 * math.log(d), rng_state=gen.bit_generator.state,
                     meta={"seed": seed, "replica": replica, "measure": measure.digest()})


def advance_walk(state: WalkState, measure: MatrixMeasure, steps: int) -> WalkState:
    """Advance by ``steps``; must be a multiple of the block size unless it is the last call."""
    d = measure.dim
    bs = block_size(d)
    gen = np.random.Generator(np.random.Philox())
    gen.bit_generator.state = state.rng_state
    u = state.u[None, :].copy()
    s = state.s[None, :].copy()
    bmat = state.bmat[None, :, :].copy()
    logb = np.array([state.logb])
    mats = np.empty((1, bs, d, d))
    scale = np.zeros((1, bs))
    empty = np.zeros((1, 0))
    done = 0
    while done < steps:
        nsteps = min(bs, steps - done)
        _draw_block(measure, [gen], mats, scale)
        err = _kernels.vector_block(
            mats, scale, measure.kind == "heavy-log-tail", nsteps, state.step + done, u, s, True,
            bmat, logb, np.zeros(0, dtype=np.int64), 0, np.zeros(d), False, 0.0, False,
            np.zeros((1, 2)), empty, empty, empty, empty.astype(np.int8), False, np.zeros((1, 0, d)))
        if err >= 0:
            raise NumericalError("non-finite walk state", step=int(err))
        done += nsteps
    return WalkState(step=state.step + steps, u=u[0], s=s[0], bmat=bmat[0], logb=float(logb[0]),
                     rng_state=gen.bit_generator.state, meta=dict(state.meta))


def walk_state_summary(state: WalkState) -> tuple[float, float]:
    """(S_n, log |A_n|) of a walk state."""
    return float(state.s[0] + state.s[1]), state.logb + math.log(_kernels._opnorm(state.bmat))
