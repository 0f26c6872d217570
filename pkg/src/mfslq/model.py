"""Problem definition for mean-field stochastic LQ control with jumps.

The state equation is

    dX = (A X + A1 E[X] + B u + B1 E[u]) dt
       + (C X + C1 E[X] + D u + D1 E[u]) dW
       + sum_j (alpha_j X + alpha1_j E[X] + beta_j u + beta1_j E[u]) (dN_j - nu_j dt)

and the cost is

    J = E[ X(T)' G X(T) + int_0^T X'QX + E[X]'Q1 E[X] + u'Ru + E[u]'R1 E[u] dt ].

The jump measure lives on a finite set of marks z_1..z_K, so every
integral against nu(dz) is a finite sum (see ``jump_integral``).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (DimensionMismatch, IndexOutOfRange, ModeUnsupported,
                     NotPSD, RBelowDelta, ShapeMismatch, InputError)

PLAIN = ("A", "A1", "B", "B1", "C", "C1", "D", "D1", "Q", "Q1", "R", "R1")
PER_MARK = ("alpha", "alpha1", "beta", "beta1")
SYMMETRIC = ("Q", "Q1", "R", "R1", "G")
PSD_REQUIRED = ("Q", "Q1", "G")
MEAN_FIELD = ("A1", "B1", "C1", "D1", "Q1", "R1", "alpha1", "beta1")

PSD_TOL = 1e-12


def coefficient_shape(name: str, n: int, m: int) -> tuple[int, int]:
    if name in ("A", "A1", "C", "C1", "Q", "Q1", "G", "alpha", "alpha1"):
        return (n, n)
    if name in ("B", "B1", "D", "D1", "beta", "beta1"):
        return (n, m)
    if name in ("R", "R1"):
        return (m, m)
    raise KeyError(name)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k*dt on [0, T]."""

    T: float
    n_steps: int
    t0: float = 0.0

    def __post_init__(self):
        if self.t0 != 0.0:
            raise InputError("time grid must start at t0 = 0")
        if not (np.isfinite(self.T) and self.T > 0):
            raise InputError(f"horizon T must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InputError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "T", float(self.T))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        return t

    @property
    def mids(self) -> np.ndarray:
        return (np.arange(self.n_steps) + 0.5) * self.dt

    def with_steps(self, n_steps: int) -> "TimeGrid":
        return TimeGrid(self.T, n_steps)


@dataclass(frozen=True)
class JumpModel:
    """Finite mark set with constant intensities nu_j (per unit time)."""

    marks: tuple = ()
    intensities: tuple = ()

    def __post_init__(self):
        marks = tuple(str(z) for z in self.marks)
        nu = tuple(float(v) for v in self.intensities)
        if len(marks) != len(nu):
            raise InputError(f"{len(marks)} marks but {len(nu)} intensities")
        if len(set(marks)) != len(marks):
            raise InputError("duplicate mark labels")
        for z, v in zip(marks, nu):
            if not np.isfinite(v) or v < 0:
                raise InputError(f"intensity of mark {z!r} must be finite and >= 0, got {v}")
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "intensities", nu)

    @property
    def K(self) -> int:
        return len(self.marks)

    @property
    def nu(self) -> np.ndarray:
        return np.asarray(self.intensities, dtype=float)

    @property
    def total(self) -> float:
        return float(sum(self.intensities))


class Coefficient:
    """Matrix valued function of time, optionally affine in W(t).

    kinds: "constant", "table" (piecewise constant, each entry holds on
    [t_i, t_{i+1})), "nodes" (one matrix per grid node, held constant on
    each step), "function" (callable f(t, w)). Any kind may carry a
    ``w_slope`` giving value(t) + w_slope(t) * W(t).
    """

    def __init__(self, kind, value=None, times=None, values=None, func=None,
                 shape=None, w_slope=None):
        self.kind = kind
        self.value = None if value is None else np.array(value, dtype=float)
        self.times = None if times is None else np.array(times, dtype=float)
        self.values = None if values is None else np.array(values, dtype=float)
        self.func = func
        self.w_slope = w_slope
        if kind == "constant":
            self.shape = self.value.shape
        elif kind in ("table", "nodes"):
            self.shape = self.values.shape[1:]
        elif kind == "function":
            if shape is None:
                raise InputError("function coefficient needs an explicit shape")
            self.shape = tuple(shape)
        else:
            raise ValueError(kind)
        if kind == "table":
            if self.times.ndim != 1 or len(self.times) != len(self.values):
                raise InputError("time table needs one matrix per time")
            if len(self.times) == 0 or abs(self.times[0]) > 1e-12:
                raise InputError("time table must start at t = 0")
            if np.any(np.diff(self.times) <= 0):
                raise InputError("time table times must be strictly increasing")

    # constructors
    @classmethod
    def constant(cls, M):
        return cls("constant", value=np.atleast_2d(np.asarray(M, dtype=float)))

    @classmethod
    def table(cls, times, mats):
        return cls("table", times=times, values=[np.atleast_2d(np.asarray(M, dtype=float)) for M in mats])

    @classmethod
    def per_node(cls, arr):
        return cls("nodes", values=np.asarray(arr, dtype=float))

    @classmethod
    def function(cls, f, shape):
        return cls("function", func=f, shape=shape)

    @classmethod
    def coerce(cls, obj):
        if obj is None or isinstance(obj, Coefficient):
            return obj
        if callable(obj):
            raise InputError("callable coefficients need Coefficient.function(f, shape)")
        return cls.constant(obj)

    def with_slope(self, slope) -> "Coefficient":
        c = Coefficient(self.kind, value=self.value, times=self.times, values=self.values,
                        func=self.func, shape=self.shape)
        c.w_slope = Coefficient.coerce(slope)
        return c

    @property
    def path_dependent(self) -> bool:
        return self.kind == "function" or self.w_slope is not None

    def mapped(self, fn) -> "Coefficient":
        """Apply ``fn`` to every stored matrix (used for symmetrization)."""
        if self.kind == "constant":
            c = Coefficient("constant", value=fn(self.value))
        elif self.kind in ("table", "nodes"):
            c = Coefficient(self.kind, times=self.times, values=np.array([fn(v) for v in self.values]))
        else:
            f0 = self.func
            c = Coefficient("function", func=lambda t, w: fn(np.asarray(f0(t, w), dtype=float)), shape=self.shape)
        if self.w_slope is not None:
            c.w_slope = self.w_slope.mapped(fn)
        return c

    def sample(self, t, grid: TimeGrid | None = None, w=None) -> np.ndarray:
        """Values at times ``t`` (1-d array). Returns (len(t), r, c), or
        (len(t), P, r, c) when ``w`` is an array of P path values per time."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.kind == "constant":
            out = np.broadcast_to(self.value, (len(t),) + self.shape).copy()
        elif self.kind == "table":
            eps = 1e-9 * max(1.0, float(t.max(initial=0.0)))
            idx = np.searchsorted(self.times, t + eps, side="right") - 1
            out = self.values[np.clip(idx, 0, len(self.times) - 1)]
        elif self.kind == "nodes":
            if grid is None:
                raise InputError("per-node coefficient needs the grid")
            if len(self.values) != grid.n_steps + 1:
                raise DimensionMismatch(
                    f"per-node table has {len(self.values)} entries, grid has {grid.n_steps + 1} nodes")
            k = np.floor(t / grid.dt + 1e-9).astype(int)
            out = self.values[np.clip(k, 0, grid.n_steps)]
        else:
            rows = []
            for i, tt in enumerate(t):
                if w is None:
                    rows.append(np.asarray(self.func(tt, 0.0), dtype=float).reshape(self.shape))
                else:
                    wi = np.asarray(w, dtype=float)[i]
                    v = np.asarray(self.func(tt, wi), dtype=float)
                    rows.append(np.broadcast_to(v, wi.shape + self.shape))
            out = np.array(rows)
            if w is not None:
                return out if self.w_slope is None else out + self._slope_term(t, grid, np.asarray(w, dtype=float))
        if w is not None:
            w = np.asarray(w, dtype=float)
            out = np.broadcast_to(out[:, None], (len(t), w.shape[-1]) + self.shape).copy()
            if self.w_slope is not None:
                out = out + self._slope_term(t, grid, w)
        return out

    def _slope_term(self, t, grid, w):
        s = self.w_slope.sample(t, grid)
        return s[:, None] * w.reshape(len(t), -1)[:, :, None, None]

    def __repr__(self):
        return f"Coefficient({self.kind}, shape={self.shape}{', path' if self.path_dependent else ''})"


@dataclass
class CoefficientSet:
    """All coefficients; missing ones are zero. Per-mark coefficients are
    lists with one entry per mark."""

    A: object = None
    A1: object = None
    B: object = None
    B1: object = None
    C: object = None
    C1: object = None
    D: object = None
    D1: object = None
    Q: object = None
    Q1: object = None
    R: object = None
    R1: object = None
    G: object = None
    alpha: Sequence | None = None
    alpha1: Sequence | None = None
    beta: Sequence | None = None
    beta1: Sequence | None = None
    delta: float = 0.0

    def get(self, name):
        return getattr(self, name)


@dataclass(frozen=True)
class ProblemSpec:
    n: int
    m: int
    x0: object
    grid: TimeGrid
    coeffs: CoefficientSet
    jumps: JumpModel = field(default_factory=JumpModel)
    coefficient_mode: str = "deterministic"
    name: str = ""


@dataclass
class CoefficientSnapshot:
    """Coefficient values; arrays may carry leading (time, path) axes.

    Per-mark arrays have the mark axis third from the end: (..., K, r, c).
    """

    A: np.ndarray
    A1: np.ndarray
    B: np.ndarray
    B1: np.ndarray
    C: np.ndarray
    C1: np.ndarray
    D: np.ndarray
    D1: np.ndarray
    Q: np.ndarray
    Q1: np.ndarray
    R: np.ndarray
    R1: np.ndarray
    alpha: np.ndarray
    alpha1: np.ndarray
    beta: np.ndarray
    beta1: np.ndarray
    G: np.ndarray
    nu: np.ndarray

    def index(self, k) -> "CoefficientSnapshot":
        kw = {name: getattr(self, name)[k] for name in PLAIN + PER_MARK}
        return CoefficientSnapshot(G=self.G, nu=self.nu, **kw)


@dataclass(frozen=True, eq=False)
class ValidatedProblem:
    """Immutable validated problem. In deterministic mode coefficient
    arrays are precomputed at grid nodes (``nodes``) and step midpoints
    (``mids``)."""

    spec: ProblemSpec
    symmetrization: dict
    nodes: CoefficientSnapshot | None
    mids: CoefficientSnapshot | None

    @property
    def n(self):
        return self.spec.n

    @property
    def m(self):
        return self.spec.m

    @property
    def K(self):
        return self.spec.jumps.K

    @property
    def nu(self):
        return self.spec.jumps.nu

    @property
    def grid(self):
        return self.spec.grid

    @property
    def dt(self):
        return self.spec.grid.dt

    @property
    def N(self):
        return self.spec.grid.n_steps

    @property
    def x0(self):
        return np.asarray(self.spec.x0, dtype=float)

    @property
    def G(self):
        return _matrix_G(self.spec)

    @property
    def deterministic(self):
        return self.spec.coefficient_mode == "deterministic"

    @property
    def has_mean_field(self) -> bool:
        if self.nodes is None:
            return True
        return any(np.any(getattr(self.nodes, name) != 0) for name in MEAN_FIELD)

    def coef(self, name):
        return self.spec.coeffs.get(name)

    def sample_at(self, t, w=None) -> CoefficientSnapshot:
        """Evaluate all coefficients at times t, optionally per path (w: (len(t), P))."""
        spec = self.spec
        t = np.atleast_1d(np.asarray(t, dtype=float))
        kw = {}
        for name in PLAIN:
            kw[name] = _coef(spec, name).sample(t, spec.grid, w)
        for name in PER_MARK:
            cs = _mark_coefs(spec, name)
            shape = (len(t),) + (() if w is None else (np.asarray(w).shape[-1],))
            if cs:
                kw[name] = np.stack([c.sample(t, spec.grid, w) for c in cs], axis=-3)
            else:
                kw[name] = np.zeros(shape + (0,) + coefficient_shape(name, spec.n, spec.m))
        return CoefficientSnapshot(G=_matrix_G(spec), nu=spec.jumps.nu, **kw)

    def with_grid(self, n_steps: int) -> "ValidatedProblem":
        return validate_problem(replace(self.spec, grid=self.spec.grid.with_steps(n_steps)))

    def with_x0(self, x0) -> "ValidatedProblem":
        return ValidatedProblem(replace(self.spec, x0=np.asarray(x0, dtype=float)),
                                self.symmetrization, self.nodes, self.mids)


def _zero(name, n, m):
    return Coefficient.constant(np.zeros(coefficient_shape(name, n, m)))


def _coef(spec: ProblemSpec, name: str) -> Coefficient:
    c = Coefficient.coerce(spec.coeffs.get(name))
    return _zero(name, spec.n, spec.m) if c is None else c


def _mark_coefs(spec: ProblemSpec, name: str) -> list:
    cs = spec.coeffs.get(name)
    K = spec.jumps.K
    if cs is None:
        return [_zero(name, spec.n, spec.m) for _ in range(K)]
    if isinstance(cs, Mapping):
        cs = [cs.get(z) for z in spec.jumps.marks]
    cs = [Coefficient.coerce(c) for c in cs]
    return [(_zero(name, spec.n, spec.m) if c is None else c) for c in cs]


def _matrix_G(spec):
    G = spec.coeffs.G
    if G is None:
        return np.zeros((spec.n, spec.n))
    if isinstance(G, Coefficient):
        if G.kind != "constant" or G.path_dependent:
            raise InputError("G must be a constant matrix")
        return G.value
    return np.atleast_2d(np.asarray(G, dtype=float))


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def validate_problem(spec) -> ValidatedProblem:
    """Check dimensions, symmetry, positivity and finiteness at every node.

    Weighting matrices are symmetrized first; the size of the correction
    is recorded in ``symmetrization``.
    """
    if isinstance(spec, ValidatedProblem):
        spec = spec.spec
    n, m = int(spec.n), int(spec.m)
    if n < 1 or m < 1:
        raise DimensionMismatch(f"dimensions must be positive, got n={n}, m={m}")
    if spec.coefficient_mode not in ("deterministic", "path-dependent"):
        raise ModeUnsupported(f"unknown coefficient mode {spec.coefficient_mode!r}")
    x0 = np.atleast_1d(np.asarray(spec.x0, dtype=float))
    if x0.shape != (n,):
        raise DimensionMismatch(f"x0: expected shape {(n,)}, found {x0.shape}", coefficient="x0")
    if not np.all(np.isfinite(x0)):
        raise InputError("x0 has non-finite entries")
    delta = float(spec.coeffs.delta)
    if not delta > 0:
        raise RBelowDelta(f"positivity margin delta must be > 0, got {delta}", node=0, value=delta)

    K = spec.jumps.K
    grid = spec.grid
    coeffs = replace(spec.coeffs)
    sym_record = {}

    # shapes
    for name in PLAIN + ("G",):
        c = coeffs.get(name)
        if c is None:
            continue
        c = Coefficient.coerce(c)
        want = coefficient_shape(name, n, m)
        if tuple(c.shape) != want:
            raise DimensionMismatch(f"coefficient {name}: expected shape {want}, found {tuple(c.shape)}",
                                    coefficient=name, expected=str(want), found=str(tuple(c.shape)))
        if c.w_slope is not None and tuple(c.w_slope.shape) != want:
            raise DimensionMismatch(f"coefficient {name} (w_slope): expected shape {want}, found {tuple(c.w_slope.shape)}",
                                    coefficient=name)
        setattr(coeffs, name, c)
    for name in PER_MARK:
        cs = coeffs.get(name)
        if cs is None:
            continue
        if isinstance(cs, Mapping):
            unknown = set(cs) - set(spec.jumps.marks)
            if unknown:
                raise DimensionMismatch(f"coefficient {name}: unknown marks {sorted(unknown)}", coefficient=name)
            cs = [cs.get(z) for z in spec.jumps.marks]
        cs = list(cs)
        if len(cs) != K:
            raise DimensionMismatch(f"coefficient {name}: expected {K} per-mark entries, found {len(cs)}",
                                    coefficient=name, expected=K, found=len(cs))
        want = coefficient_shape(name, n, m)
        cs = [Coefficient.coerce(c) for c in cs]
        for j, c in enumerate(cs):
            if c is not None and tuple(c.shape) != want:
                raise DimensionMismatch(f"coefficient {name}[{spec.jumps.marks[j]}]: expected shape {want}, "
                                        f"found {tuple(c.shape)}", coefficient=name)
        setattr(coeffs, name, cs)

    if spec.coefficient_mode == "deterministic":
        for name in PLAIN:
            c = coeffs.get(name)
            if c is not None and c.path_dependent:
                raise ModeUnsupported(f"coefficient {name} is path dependent; set coefficient_mode = "
                                      f"'path-dependent'", coefficient=name)
        for name in PER_MARK:
            for c in coeffs.get(name) or []:
                if c is not None and c.path_dependent:
                    raise ModeUnsupported(f"coefficient {name} is path dependent", coefficient=name)

    # symmetrize weights
    for name in SYMMETRIC:
        c = coeffs.get(name)
        if c is None:
            continue
        if name == "G":
            G = np.atleast_2d(np.asarray(c.value if isinstance(c, Coefficient) else c, dtype=float))
            sym_record[name] = float(np.max(np.abs(G - _sym(G)), initial=0.0))
            coeffs.G = _sym(G)
            continue
        if c.kind == "constant":
            vals = c.value[None]
        elif c.kind in ("table", "nodes"):
            vals = c.values
        else:
            vals = c.sample(grid.nodes, grid)
        sym_record[name] = float(np.max(np.abs(vals - _sym(vals)), initial=0.0))
        setattr(coeffs, name, c.mapped(_sym))

    vspec = replace(spec, coeffs=coeffs, x0=x0, n=n, m=m)
    t_all = np.concatenate([grid.nodes, grid.mids])
    probe = ValidatedProblem(vspec, sym_record, None, None)
    snap = probe.sample_at(t_all)
    N1 = grid.n_steps + 1

    for name in PLAIN + PER_MARK:
        arr = getattr(snap, name)
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr.reshape(len(t_all), -1)))[0][0]
            raise InputError(f"coefficient {name} has non-finite entries at t = {t_all[bad]:g}",
                             coefficient=name)
    if not np.all(np.isfinite(snap.G)):
        raise InputError("coefficient G has non-finite entries", coefficient="G")

    for name in PSD_REQUIRED:
        arr = snap.G[None] if name == "G" else getattr(snap, name)
        eig = np.linalg.eigvalsh(arr)[..., 0]
        scale = np.maximum(1.0, np.abs(arr).max(axis=(-1, -2)))
        bad = np.nonzero(eig < -PSD_TOL * scale)[0]
        if bad.size:
            k = int(bad[0])
            node = k if k < N1 else k - N1
            where = "node" if k < N1 else "midpoint of step"
            raise NotPSD(f"coefficient {name} is not PSD at {where} {node}: most negative eigenvalue {eig[k]:.6g}",
                         coefficient=name, node=node, eigenvalue=float(eig[k]))
    eigR = np.linalg.eigvalsh(snap.R)[..., 0]
    bad = np.nonzero(eigR - delta < -PSD_TOL * max(1.0, delta))[0]
    if bad.size:
        k = int(bad[0])
        node = k if k < N1 else k - N1
        raise RBelowDelta(f"R falls below delta*I at node {node}: lambda_min(R) - delta = {eigR[k] - delta:.6g}",
                          coefficient="R", node=node, value=float(eigR[k] - delta))

    if spec.coefficient_mode == "deterministic":
        nodes = snap.index(slice(0, N1))
        mids = snap.index(slice(N1, None))
        return ValidatedProblem(vspec, sym_record, nodes, mids)
    return ValidatedProblem(vspec, sym_record, None, None)


def eval_coefficients(prob: ValidatedProblem, k: int, w=None) -> CoefficientSnapshot:
    """All coefficients at node t_k. ``w`` (array of W(t_k) values, one per
    path) is needed for path-dependent coefficients."""
    if not (0 <= int(k) <= prob.N) or int(k) != k:
        raise IndexOutOfRange(f"node index {k} outside 0..{prob.N}", k=k)
    k = int(k)
    if prob.nodes is not None and w is None:
        return prob.nodes.index(k)
    t = prob.grid.nodes[k:k + 1]
    ww = None if w is None else np.atleast_1d(np.asarray(w, dtype=float))[None]
    return prob.sample_at(t, ww).index(0)


def jump_integral(f, jumps: JumpModel, shape=None) -> np.ndarray:
    """Sum_j f(z_j) nu_j over the finite mark set.

    ``f`` may be a callable of the mark label, a sequence of per-mark
    arrays, or an array whose third-from-last axis indexes marks.
    """
    nu = jumps.nu
    if isinstance(f, np.ndarray) and f.ndim >= 3 and f.shape[-3] == len(nu):
        return np.einsum("k,...kij->...ij", nu, f)
    if callable(f):
        vals = [np.asarray(f(z), dtype=float) for z in jumps.marks]
    else:
        vals = [np.asarray(v, dtype=float) for v in f]
        if len(vals) != len(nu):
            raise ShapeMismatch(f"{len(vals)} per-mark values for {len(nu)} marks")
    if not vals:
        return np.zeros(() if shape is None else shape)
    s0 = vals[0].shape
    for z, v in zip(jumps.marks, vals):
        if v.shape != s0:
            raise ShapeMismatch(f"mark {z!r} has shape {v.shape}, expected {s0}")
    out = np.zeros(s0)
    for v, w in zip(vals, nu):
        out = out + w * v
    return out
