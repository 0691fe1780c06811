"""Matrix laws on GL_d(R) and their sampling.

Four kinds are built in:

``point-mass``
    a single matrix, no randomness.
``finite-support``
    finitely many atoms with probabilities; log N is bounded so every
    moment is finite.
``rotation-dilation``
    ``K diag(s, 1, ..., 1, 1/s)`` with ``K`` a fixed planar rotation or a
    Haar orthogonal matrix; ``s = 1`` gives an isometry-valued law.
``heavy-log-tail``
    ``K diag(e^L, 1, ..., 1, e^-L)`` with ``L`` Lomax distributed with shape
    ``tailIndex``; ``log N(g) = L`` so ``E[(log N)^q]`` is finite exactly
    when ``q < tailIndex``.

Heavy-tailed draws are carried as ``exp(logscale) * mats`` so that ``e^L``
never has to be formed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np

from . import linalg
from .errors import ConfigError, NumericalError
from .rng import purpose_tag, stream

KINDS = ("finite-support", "rotation-dilation", "heavy-log-tail", "point-mass")
DET_GUARD = 1e-300
MAX_RESAMPLE = 100
PROB_TOL = 1e-12
PROXIMAL_GAP = 1e-6


@dataclass(frozen=True, eq=False)
class InvertibleMatrix:
    """A d x d invertible real matrix with its size ``N(g) = max(|g|, |g^-1|)``."""

    entries: np.ndarray
    size_n: float

    @classmethod
    def from_array(cls, a) -> "InvertibleMatrix":
        a = np.array(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 2:
            raise ConfigError("matrix", f"expected a square matrix of size >= 2, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ConfigError("matrix", "entries must be finite")
        if abs(np.linalg.det(a)) <= DET_GUARD:
            raise ConfigError("matrix", "matrix is not invertible (|det| <= 1e-300)")
        a.setflags(write=False)
        return cls(a, size_of(a))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def log_size(self) -> float:
        return math.log(self.size_n)

    def inverse(self) -> "InvertibleMatrix":
        return InvertibleMatrix.from_array(np.linalg.inv(self.entries))

    def __matmul__(self, other: "InvertibleMatrix") -> "InvertibleMatrix":
        return InvertibleMatrix.from_array(self.entries @ other.entries)


def size_of(a: np.ndarray) -> float:
    smax, smin = linalg.singular_extremes(a)
    return max(smax, 1.0 / smin)


class Draws(NamedTuple):
    """A block of sampled matrices; the true matrix k is ``exp(logscale[k]) * mats[k]``."""

    mats: np.ndarray
    logscale: np.ndarray | None
    log_size: np.ndarray


@dataclass(frozen=True, eq=False)
class MatrixMeasure:
    dim: int
    kind: str
    atoms: tuple[InvertibleMatrix, ...] = ()
    probs: np.ndarray | None = None
    tail_index: float | None = None
    angle: float | None = None
    dilation: float = 1.0
    scale: float = 1.0
    strongly_irreducible: bool = False
    proximal: bool = False
    moment_order: float = math.inf
    _cum: np.ndarray | None = field(default=None, repr=False)
    _stack: np.ndarray | None = field(default=None, repr=False)
    _atom_log_size: np.ndarray | None = field(default=None, repr=False)

    # -- constructors -----------------------------------------------------

    @classmethod
    def point_mass(cls, matrix, **flags) -> "MatrixMeasure":
        m = matrix if isinstance(matrix, InvertibleMatrix) else InvertibleMatrix.from_array(matrix)
        return cls._with_atoms("point-mass", [m], np.array([1.0]), flags)

    @classmethod
    def finite_support(cls, atoms, probs, **flags) -> "MatrixMeasure":
        mats = [a if isinstance(a, InvertibleMatrix) else InvertibleMatrix.from_array(a) for a in atoms]
        return cls._with_atoms("finite-support", mats, np.asarray(probs, dtype=float), flags)

    @classmethod
    def rotation_dilation(cls, dim: int = 2, angle: float | None = None, dilation: float = 1.0,
                          **flags) -> "MatrixMeasure":
        _check_dim(dim)
        if angle is not None and dim != 2:
            raise ConfigError("angle", "a fixed angle is only defined for dim = 2")
        if not (dilation >= 1.0 and math.isfinite(dilation)):
            raise ConfigError("dilation", "must be a finite real >= 1")
        flags.setdefault("strongly_irreducible", angle is None)
        flags.setdefault("proximal", dilation > 1.0)
        return cls(dim=dim, kind="rotation-dilation", angle=angle, dilation=float(dilation), **flags)

    @classmethod
    def heavy_log_tail(cls, dim: int = 2, tail_index: float = 2.5, angle: float | None = None,
                       scale: float = 1.0, **flags) -> "MatrixMeasure":
        _check_dim(dim)
        if not (tail_index > 0 and math.isfinite(tail_index)):
            raise ConfigError("tailIndex", "must be a finite positive real")
        if not scale > 0:
            raise ConfigError("scale", "must be positive")
        if angle is not None and dim != 2:
            raise ConfigError("angle", "a fixed angle is only defined for dim = 2")
        flags.setdefault("strongly_irreducible", angle is None)
        flags.setdefault("proximal", True)
        flags.setdefault("moment_order", float(tail_index))
        return cls(dim=dim, kind="heavy-log-tail", tail_index=float(tail_index), angle=angle,
                   scale=float(scale), **flags)

    @classmethod
    def _with_atoms(cls, kind, mats, probs, flags) -> "MatrixMeasure":
        if not mats:
            raise ConfigError("atoms", "at least one atom is required")
        dim = mats[0].dim
        _check_dim(dim)
        if any(m.dim != dim for m in mats):
            raise ConfigError("atoms", "all atoms must share the same dimension")
        if probs.shape != (len(mats),):
            raise ConfigError("atoms", "one probability per atom is required")
        if np.any(~np.isfinite(probs)) or np.any(probs <= 0):
            raise ConfigError("atoms", "probabilities must be positive")
        if abs(probs.sum() - 1.0) > PROB_TOL:
            raise ConfigError("atoms", f"probabilities sum to {float(probs.sum())!r}, not 1")
        cum = np.cumsum(probs)
        cum[-1] = 1.0
        stack = np.stack([m.entries for m in mats])
        stack.setflags(write=False)
        log_size = np.array([m.log_size for m in mats])
        return cls(dim=dim, kind=kind, atoms=tuple(mats), probs=probs, _cum=cum, _stack=stack,
                   _atom_log_size=log_size, **flags)

    # -- config round trip ------------------------------------------------

    @classmethod
    def from_config(cls, cfg: dict[str, Any]) -> "MatrixMeasure":
        cfg = dict(cfg)
        kind = cfg.pop("kind", None)
        if kind not in KINDS:
            raise ConfigError("kind", f"must be one of {KINDS}, got {kind!r}")
        dim = cfg.pop("dim", None)
        if not isinstance(dim, int) or isinstance(dim, bool):
            raise ConfigError("dim", "an integer >= 2 is required")
        flags = {}
        for key, name in (("stronglyIrreducible", "strongly_irreducible"), ("proximal", "proximal"),
                          ("momentOrder", "moment_order")):
            if key in cfg:
                flags[name] = cfg.pop(key)
        if "moment_order" in flags:
            mo = flags["moment_order"]
            flags["moment_order"] = math.inf if mo is None else float(mo)
        allowed = {
            "point-mass": {"atoms"},
            "finite-support": {"atoms"},
            "rotation-dilation": {"angle", "dilation"},
            "heavy-log-tail": {"tailIndex", "angle", "scale"},
        }[kind]
        unknown = set(cfg) - allowed
        if unknown:
            raise ConfigError(sorted(unknown)[0], f"unknown key for kind {kind!r}")
        if kind in ("point-mass", "finite-support"):
            atoms = cfg.get("atoms")
            if not isinstance(atoms, list) or not atoms:
                raise ConfigError("atoms", "a non-empty list of {matrix, prob} objects is required")
            mats, probs = [], []
            for i, atom in enumerate(atoms):
                if not isinstance(atom, dict) or set(atom) - {"matrix", "prob"} or "matrix" not in atom:
                    raise ConfigError("atoms", f"atom {i} must be an object with keys 'matrix' and 'prob'")
                try:
                    mats.append(InvertibleMatrix.from_array(atom["matrix"]))
                except (ConfigError, ValueError) as exc:
                    raise ConfigError("atoms", f"atom {i}: {exc}") from None
                probs.append(atom.get("prob", 1.0))
            if mats[0].dim != dim:
                raise ConfigError("dim", f"dim = {dim} but atoms are {mats[0].dim} x {mats[0].dim}")
            if kind == "point-mass":
                if len(mats) != 1:
                    raise ConfigError("atoms", "point-mass takes exactly one atom")
                if probs[0] != 1.0:
                    raise ConfigError("atoms", f"point-mass probability must be 1, got {float(probs[0])!r}")
                return cls.point_mass(mats[0], **flags)
            return cls.finite_support(mats, probs, **flags)
        if kind == "rotation-dilation":
            return cls.rotation_dilation(dim, cfg.get("angle"), float(cfg.get("dilation", 1.0)), **flags)
        if "tailIndex" not in cfg:
            raise ConfigError("tailIndex", "required for heavy-log-tail")
        return cls.heavy_log_tail(dim, float(cfg["tailIndex"]), cfg.get("angle"),
                                  float(cfg.get("scale", 1.0)), **flags)

    def to_config(self) -> dict[str, Any]:
        cfg: dict[str, Any] = {"dim": self.dim, "kind": self.kind}
        if self.atoms:
            cfg["atoms"] = [{"matrix": a.entries.tolist(), "prob": float(p)}
                            for a, p in zip(self.atoms, self.probs)]
        if self.kind == "rotation-dilation":
            cfg["angle"] = self.angle
            cfg["dilation"] = self.dilation
        if self.kind == "heavy-log-tail":
            cfg["tailIndex"] = self.tail_index
            cfg["angle"] = self.angle
            cfg["scale"] = self.scale
        cfg["stronglyIrreducible"] = self.strongly_irreducible
        cfg["proximal"] = self.proximal
        cfg["momentOrder"] = None if math.isinf(self.moment_order) else self.moment_order
        return cfg

    def digest(self) -> str:
        blob = json.dumps(self.to_config(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- sampling ---------------------------------------------------------

    @property
    def is_deterministic(self) -> bool:
        return self.kind == "point-mass" or (
            self.kind == "rotation-dilation" and self.angle is not None)

    def draw(self, gen: np.random.Generator, count: int) -> Draws:
        """Sample ``count`` matrices from ``gen``; consumes the stream sequentially."""
        if self.atoms:
            # atoms were validated at construction
            return self._draw_raw(gen, count)
        for _ in range(MAX_RESAMPLE):
            draws = self._draw_raw(gen, count)
            bad = ~np.all(np.isfinite(draws.mats), axis=(1, 2))
            if draws.logscale is not None:
                bad |= ~np.isfinite(draws.logscale)
            if not bad.any():
                return draws
            # redraw only the failing slots, keeping the others in place
            fix = self._draw_raw(gen, int(bad.sum()))
            draws.mats[bad] = fix.mats
            draws.log_size[bad] = fix.log_size
            if draws.logscale is not None:
                draws.logscale[bad] = fix.logscale
            if np.all(np.isfinite(draws.mats)) and (
                    draws.logscale is None or np.all(np.isfinite(draws.logscale))):
                return draws
        raise NumericalError(f"measure {self.kind!r} produced non-invertible draws {MAX_RESAMPLE} times")

    def _draw_raw(self, gen: np.random.Generator, count: int) -> Draws:
        d = self.dim
        if self.kind == "point-mass":
            mats = np.broadcast_to(self._stack[0], (count, d, d)).copy()
            return Draws(mats, None, np.full(count, self._atom_log_size[0]))
        if self.kind == "finite-support":
            idx = np.searchsorted(self._cum, gen.random(count), side="right")
            np.minimum(idx, len(self.atoms) - 1, out=idx)
            return Draws(self._stack[idx], None, self._atom_log_size[idx])
        k = self._orthogonal_part(gen, count)
        if self.kind == "rotation-dilation":
            s = self.dilation
            diag = np.ones(d)
            diag[0], diag[-1] = s, 1.0 / s
            return Draws(k * diag[None, None, :], None, np.full(count, math.log(s)))
        ell = self.scale * gen.pareto(self.tail_index, count)
        diag = np.empty((count, d))
        diag[:, 0] = 1.0
        diag[:, 1:-1] = np.exp(-ell)[:, None]
        diag[:, -1] = np.exp(-2.0 * ell)
        return Draws(k * diag[:, None, :], ell, ell.copy())

    def _orthogonal_part(self, gen: np.random.Generator, count: int) -> np.ndarray:
        if self.angle is not None:
            return np.broadcast_to(linalg.rotation(self.angle), (count, 2, 2)).copy()
        return linalg.haar_orthogonal(gen, count, self.dim)


def _check_dim(dim) -> None:
    if not isinstance(dim, (int, np.integer)) or dim < 2:
        raise ConfigError("dim", "must be an integer >= 2")


# -- operations ---------------------------------------------------------------


def sample(measure: MatrixMeasure, gen: np.random.Generator) -> InvertibleMatrix:
    """One draw from ``measure`` as an :class:`InvertibleMatrix`."""
    for _ in range(MAX_RESAMPLE):
        draws = measure.draw(gen, 1)
        a = draws.mats[0]
        if draws.logscale is not None:
            if draws.logscale[0] > 700.0:
                continue
            a = a * math.exp(draws.logscale[0])
        try:
            return InvertibleMatrix.from_array(a)
        except ConfigError:
            continue
    raise NumericalError(f"measure {measure.kind!r} failed the invertibility guard {MAX_RESAMPLE} times")


@dataclass(frozen=True)
class LogMomentEstimate:
    mean: float
    half_width: float
    n_samples: int
    diverging: bool
    tail_index_hat: float
    running_means: tuple[tuple[int, float], ...]


def hill_tail_index(x: np.ndarray) -> float:
    """Hill estimate of the tail index from the top ``sqrt(n)`` order statistics (inf if bounded)."""
    x = np.sort(np.asarray(x, dtype=float))
    k = max(int(math.sqrt(x.shape[0])), 2)
    thr = x[-k - 1]
    if not thr > 0:
        return math.inf
    spread = float(np.mean(np.log(x[-k:] / thr)))
    return math.inf if spread <= 0 else 1.0 / spread


def estimate_log_moment(measure: MatrixMeasure, q: float, n_samples: int, seed: int = 0,
                        z: float = 1.96) -> LogMomentEstimate:
    """Monte Carlo estimate of ``E[(log N(g))^q]`` with a normal half-width.

    ``diverging`` is raised when ``q`` reaches the Hill estimate of the tail
    index of ``log N``; running means at doubling sample sizes are kept for
    inspection.  Both are heuristics: no finite sample proves a moment infinite.
    """
    if not q > 0:
        raise ValueError("q must be positive")
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    gen = stream(seed, 0, purpose_tag("log-moment"))
    logn = measure.draw(gen, n_samples).log_size
    vals = logn ** q
    shifted = vals - vals[0]
    mean = float(vals[0] + shifted.mean())
    sd = float(shifted.std(ddof=1))
    hw = z * sd / math.sqrt(n_samples)
    cums = np.cumsum(shifted)
    marks = [n_samples >> k for k in range(4, -1, -1) if n_samples >> k >= 10]
    running = tuple((m, float(vals[0] + cums[m - 1] / m)) for m in marks)
    alpha = hill_tail_index(logn)
    return LogMomentEstimate(mean, hw, n_samples, bool(q >= alpha), alpha, running)


@dataclass(frozen=True)
class ProximalityReport:
    found: bool
    witness_length: int | None
    gap: float
    trials: int
    horizon: int


def relative_eigen_gap(a: np.ndarray) -> float:
    mods = np.sort(np.abs(np.linalg.eigvals(a)))[::-1]
    return float((mods[0] - mods[1]) / mods[0]) if mods[0] > 0 else 0.0


def proximality_probe(measure: MatrixMeasure, horizon: int, trials: int, seed: int = 0) -> ProximalityReport:
    """Search random products of length <= ``horizon`` for a proximal element.

    A product counts when its top eigenvalue modulus beats the second by a
    relative gap above ``1e-6``.  Finding one is a certificate; not finding
    one is only evidence.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    best = 0.0
    for t in range(trials):
        gen = stream(seed, t, purpose_tag("proximality"))
        draws = measure.draw(gen, horizon)
        prod = np.eye(measure.dim)
        for length in range(1, horizon + 1):
            prod = draws.mats[length - 1] @ prod
            prod /= np.abs(prod).max()
            gap = relative_eigen_gap(prod)
            best = max(best, gap)
            if gap > PROXIMAL_GAP:
                return ProximalityReport(True, length, gap, t + 1, horizon)
    return ProximalityReport(False, None, best, trials, horizon)
