"""Noise generation, Euler scheme for the controlled state, Monte Carlo costs.

Reproducibility: paths are grouped in fixed blocks of ``BLOCK`` paths.
Block b draws from a Philox generator whose key comes from the seed and
whose counter starts at (0, 0, b, 0), so path p always receives the same
increments (block p // BLOCK, lane p % BLOCK) no matter how many paths
are requested or how blocks are scheduled across workers.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch, InputError, MissingMeanClosure, NonFiniteState
from .model import JumpModel, TimeGrid, ValidatedProblem, eval_coefficients

BLOCK = 1024
DEFAULT_SEED = 20240607


def worker_count(threads=None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("MFSLQ_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, os.cpu_count() or 1)


def pmap(fn, items, threads=None):
    """Ordered map over items, threaded when more than one worker."""
    items = list(items)
    w = min(worker_count(threads), len(items)) if items else 1
    if w <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=w) as ex:
        return list(ex.map(fn, items))


def pairwise_mean(arr, axis=0):
    """Mean along ``axis`` with numpy's pairwise summation (the reduced axis
    is made contiguous first)."""
    a = np.moveaxis(np.asarray(arr, dtype=float), axis, -1)
    a = np.ascontiguousarray(a)
    return np.add.reduce(a, axis=-1) / a.shape[-1]


def _key(seed):
    return np.random.SeedSequence(int(seed) % (1 << 64)).generate_state(2, np.uint64)


class NoiseBundle:
    """Brownian increments and Poisson counts, generated lazily per block."""

    def __init__(self, grid: TimeGrid, jumps: JumpModel, n_paths: int, seed: int = DEFAULT_SEED):
        if int(n_paths) < 1:
            raise InputError(f"n_paths must be >= 1, got {n_paths}")
        self.grid = grid
        self.jumps = jumps
        self.n_paths = int(n_paths)
        self.seed = int(seed)
        self._key = _key(seed)
        self._cache = {}

    @property
    def n_blocks(self):
        return -(-self.n_paths // BLOCK)

    def substream(self, path_id: int):
        return divmod(int(path_id), BLOCK)

    def block(self, b: int):
        """(dW, dN) for a full block: shapes (n_steps, BLOCK), (n_steps, BLOCK, K)."""
        if b in self._cache:
            return self._cache[b]
        gen = np.random.Generator(np.random.Philox(key=self._key, counter=[0, 0, int(b), 0]))
        Nst, dt = self.grid.n_steps, self.grid.dt
        dW = gen.standard_normal((Nst, BLOCK)) * np.sqrt(dt)
        K = self.jumps.K
        dN = np.zeros((Nst, BLOCK, K))
        for j, nu in enumerate(self.jumps.intensities):
            dN[:, :, j] = gen.poisson(nu * dt, (Nst, BLOCK))
        if len(self._cache) < 8:
            self._cache[b] = (dW, dN)
        return dW, dN

    def increments(self, start: int = 0, stop: int | None = None):
        """(dW, dN) for paths start..stop-1, shapes (n_steps, P), (n_steps, P, K)."""
        stop = self.n_paths if stop is None else min(stop, self.n_paths)
        if not (0 <= start < stop):
            raise InputError(f"bad path range {start}:{stop}")
        parts_w, parts_n = [], []
        for b in range(start // BLOCK, (stop - 1) // BLOCK + 1):
            dW, dN = self.block(b)
            lo = max(start, b * BLOCK) - b * BLOCK
            hi = min(stop, (b + 1) * BLOCK) - b * BLOCK
            parts_w.append(dW[:, lo:hi])
            parts_n.append(dN[:, lo:hi])
        return np.concatenate(parts_w, axis=1), np.concatenate(parts_n, axis=1)

    def brownian(self, start=0, stop=None):
        """W at nodes, shape (n_steps + 1, P)."""
        dW, _ = self.increments(start, stop)
        return np.vstack([np.zeros((1, dW.shape[1])), np.cumsum(dW, axis=0)])

    def block_ranges(self):
        return [(b * BLOCK, min(self.n_paths, (b + 1) * BLOCK)) for b in range(self.n_blocks)]


def sample_noise(grid: TimeGrid, jumps: JumpModel, n_paths: int, seed: int = DEFAULT_SEED) -> NoiseBundle:
    return NoiseBundle(grid, jumps, n_paths, seed)


@dataclass
class FeedbackLaw:
    """u = gain @ X + offset node-wise. ``mean_state``/``mean_control`` are
    the deterministic expectations of X and u under the law (when known)."""

    gain: np.ndarray            # (N+1, m, n)
    offset: np.ndarray          # (N+1, m)
    mean_state: np.ndarray | None = None
    mean_control: np.ndarray | None = None


@dataclass
class ControlPath:
    kind: str                          # "feedback" | "open-loop"
    law: FeedbackLaw | None = None
    u: np.ndarray | None = None        # open loop: (P, N+1, m) or (N+1, m)
    extra: np.ndarray | None = None    # deterministic offsets added to a feedback law

    @classmethod
    def feedback(cls, law: FeedbackLaw, extra=None):
        return cls("feedback", law=law, extra=None if extra is None else np.asarray(extra, dtype=float))

    @classmethod
    def open_loop(cls, u):
        return cls("open-loop", u=np.asarray(u, dtype=float))


@dataclass
class PathBundle:
    t: np.ndarray
    X: np.ndarray                 # (P, N+1, n)
    u: np.ndarray                 # (P, N+1, m)
    noise: NoiseBundle
    start: int                    # first path id
    closure: str                  # "inputs" | "deterministic" | "sample" | "none"
    mean_state: np.ndarray        # E[X] substitute used in the dynamics
    mean_control: np.ndarray
    expected_state: np.ndarray    # deterministic E[X] when known, else sample mean
    expected_control: np.ndarray

    @property
    def n_paths(self):
        return self.X.shape[0]


@dataclass
class CostEstimate:
    value: float
    std_error: float
    n_paths: int
    per_path: np.ndarray | None = field(default=None, repr=False)


def _check_grid(prob, noise):
    if noise.grid.n_steps != prob.N or abs(noise.grid.T - prob.grid.T) > 1e-12 * prob.grid.T:
        raise GridMismatch(f"noise grid ({noise.grid.n_steps} steps, T={noise.grid.T}) does not match "
                           f"problem grid ({prob.N} steps, T={prob.grid.T})")
    if noise.jumps.K != prob.K:
        raise GridMismatch(f"noise has {noise.jumps.K} marks, problem has {prob.K}")


def feedback_mean(prob: ValidatedProblem, law: FeedbackLaw, mean_inputs=None):
    """Deterministic E[X], E[u] under a feedback law by RK4 on the mean ODE
    (gain and offset interpolated linearly at half steps)."""
    c0, cm = prob.nodes, prob.mids
    h, Nst = prob.dt, prob.N
    Kg, k0 = law.gain, law.offset
    Km, km = 0.5 * (Kg[:-1] + Kg[1:]), 0.5 * (k0[:-1] + k0[1:])
    if mean_inputs is not None:
        a, b = (np.asarray(v, dtype=float) for v in mean_inputs)
        am, bm = 0.5 * (a[:-1] + a[1:]), 0.5 * (b[:-1] + b[1:])

    def f(c, k, K_, off, x, mid):
        u = K_ @ x + off
        if mean_inputs is None:
            return (c.A[k] + c.A1[k]) @ x + (c.B[k] + c.B1[k]) @ u
        aa, bb = (am[k], bm[k]) if mid else (a[k], b[k])
        return c.A[k] @ x + c.A1[k] @ aa + c.B[k] @ u + c.B1[k] @ bb

    X = np.empty((Nst + 1, prob.n))
    X[0] = prob.x0
    for k in range(Nst):
        x = X[k]
        k1 = f(c0, k, Kg[k], k0[k], x, False)
        k2 = f(cm, k, Km[k], km[k], x + 0.5 * h * k1, True)
        k3 = f(cm, k, Km[k], km[k], x + 0.5 * h * k2, True)
        k4 = f(c0, k + 1, Kg[k + 1], k0[k + 1], x + h * k3, False)
        X[k + 1] = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    U = np.einsum("kij,kj->ki", Kg, X) + k0
    return X, U


def simulate_state(prob: ValidatedProblem, control: ControlPath, noise: NoiseBundle,
                   mean_inputs=None, start: int = 0, stop: int | None = None) -> PathBundle:
    """Euler scheme for the state equation on paths start..stop-1.

    Mean closure: ``mean_inputs`` (a, b) if given; else the deterministic
    means for feedback laws; else the cross-path sample mean (open loop).
    """
    _check_grid(prob, noise)
    stop = noise.n_paths if stop is None else min(stop, noise.n_paths)
    Pn = stop - start
    Nst, n, m, dt = prob.N, prob.n, prob.m, prob.dt
    nu = prob.nu
    dW, dN = noise.increments(start, stop)
    dNc = dN - nu * dt                                    # compensated counts (N, P, K)
    det = prob.nodes is not None
    W = None if det else np.vstack([np.zeros((1, Pn)), np.cumsum(dW, axis=0)])

    mf = prob.has_mean_field
    if mean_inputs is not None:
        a, b = (np.asarray(v, dtype=float).reshape(Nst + 1, -1) for v in mean_inputs)
        if a.shape != (Nst + 1, n) or b.shape != (Nst + 1, m):
            raise GridMismatch("mean inputs do not match the grid")
        closure = "inputs"
    elif control.kind == "feedback" and (mf or control.law.mean_state is not None):
        law = control.law
        if law.mean_state is None:
            a, b = feedback_mean(prob, law)
        else:
            a, b = law.mean_state, law.mean_control
        if control.extra is not None:
            # extra deterministic offsets shift the means; recompute
            shifted = FeedbackLaw(law.gain, law.offset + control.extra)
            a, b = feedback_mean(prob, shifted)
        closure = "deterministic"
    elif mf:
        if Pn == 1 and noise.n_paths == 1:
            raise MissingMeanClosure("open-loop control with mean-field coefficients needs n_paths > 1 "
                                     "(sample-mean closure) or explicit mean inputs")
        a = np.zeros((Nst + 1, n))
        b = np.zeros((Nst + 1, m))
        closure = "sample"
    else:
        a = np.zeros((Nst + 1, n))
        b = np.zeros((Nst + 1, m))
        closure = "none"

    X = np.empty((Pn, Nst + 1, n))
    U = np.empty((Pn, Nst + 1, m))
    X[:, 0] = prob.x0
    if control.kind == "open-loop":
        uo = control.u
        if uo.ndim == 2:
            uo = np.broadcast_to(uo, (Pn,) + uo.shape)
        elif uo.shape[0] == noise.n_paths and Pn != noise.n_paths:
            uo = uo[start:stop]
        if uo.shape != (Pn, Nst + 1, m):
            raise GridMismatch(f"open-loop control has shape {uo.shape}, expected {(Pn, Nst + 1, m)}")
    else:
        law = control.law
        if law.gain.shape != (Nst + 1, m, n):
            raise GridMismatch(f"feedback gain has shape {law.gain.shape}, expected {(Nst + 1, m, n)}")
        off = law.offset if control.extra is None else law.offset + control.extra

    if closure == "sample":
        a = a.copy()
        b = b.copy()
    for k in range(Nst + 1):
        x = X[:, k]
        if control.kind == "open-loop":
            u = uo[:, k]
        else:
            u = x @ law.gain[k].T + off[k]
        U[:, k] = u
        if k == Nst:
            break
        if closure == "sample":
            a[k] = pairwise_mean(x, 0)
            b[k] = pairwise_mean(u, 0)
        c = prob.nodes.index(k) if det else eval_coefficients(prob, k, W[k])
        ak, bk = a[k], b[k]
        if det:
            drift = x @ c.A.T + ak @ c.A1.T + u @ c.B.T + bk @ c.B1.T
            diff = x @ c.C.T + ak @ c.C1.T + u @ c.D.T + bk @ c.D1.T
        else:
            drift = (np.einsum("pij,pj->pi", c.A, x) + np.einsum("pij,j->pi", c.A1, ak)
                     + np.einsum("pij,pj->pi", c.B, u) + np.einsum("pij,j->pi", c.B1, bk))
            diff = (np.einsum("pij,pj->pi", c.C, x) + np.einsum("pij,j->pi", c.C1, ak)
                    + np.einsum("pij,pj->pi", c.D, u) + np.einsum("pij,j->pi", c.D1, bk))
        xn = x + drift * dt + diff * dW[k][:, None]
        for j in range(prob.K):
            if det:
                jump = x @ c.alpha[j].T + ak @ c.alpha1[j].T + u @ c.beta[j].T + bk @ c.beta1[j].T
            else:
                jump = (np.einsum("pij,pj->pi", c.alpha[:, j], x) + np.einsum("pij,j->pi", c.alpha1[:, j], ak)
                        + np.einsum("pij,pj->pi", c.beta[:, j], u) + np.einsum("pij,j->pi", c.beta1[:, j], bk))
            xn = xn + jump * dNc[k, :, j][:, None]
        if not np.all(np.isfinite(xn)):
            p = int(np.argwhere(~np.isfinite(xn))[0][0])
            raise NonFiniteState(f"state became non-finite on path {start + p} at step {k}",
                                 path=start + p, step=k)
        X[:, k + 1] = xn
    if closure == "sample":
        a[Nst] = pairwise_mean(X[:, Nst], 0)
        b[Nst] = pairwise_mean(U[:, Nst], 0)

    if control.kind == "feedback" and closure in ("deterministic",):
        ex, eu = a, b
    elif control.kind == "feedback" and closure == "inputs" and control.law.mean_state is not None:
        ex, eu = control.law.mean_state, control.law.mean_control
    elif control.kind == "feedback" and closure == "none" and control.law.mean_state is not None:
        ex, eu = control.law.mean_state, control.law.mean_control
    else:
        ex, eu = pairwise_mean(X, 0), pairwise_mean(U, 0)
    return PathBundle(t=prob.grid.nodes, X=X, u=U, noise=noise, start=start, closure=closure,
                      mean_state=a, mean_control=b, expected_state=ex, expected_control=eu)


def per_path_cost(prob: ValidatedProblem, paths: PathBundle, mean_inputs=None, multipliers=None):
    """Per-path cost with left-endpoint quadrature (and the deterministic
    mean-field and multiplier terms added to every path)."""
    Nst, dt = prob.N, prob.dt
    if paths.X.shape[1] != Nst + 1:
        raise GridMismatch(f"paths have {paths.X.shape[1]} nodes, problem grid has {Nst + 1}")
    c = prob.nodes if prob.nodes is not None else None
    X, U = paths.X, paths.u
    if c is not None:
        Q, R, Q1, R1 = c.Q, c.R, c.Q1, c.R1
    else:
        s = prob.sample_at(prob.grid.nodes)
        Q, R, Q1, R1 = s.Q, s.R, s.Q1, s.R1
    Xl, Ul = X[:, :-1], U[:, :-1]
    run = np.einsum("pki,kij,pkj->p", Xl, Q[:-1], Xl) + np.einsum("pki,kij,pkj->p", Ul, R[:-1], Ul)
    XT = X[:, -1]
    cost = run * dt + np.einsum("pi,ij,pj->p", XT, prob.G, XT)
    if mean_inputs is not None:
        a, b = (np.asarray(v, dtype=float).reshape(Nst + 1, -1) for v in mean_inputs)
    else:
        a, b = paths.mean_state, paths.mean_control
    det = dt * (np.einsum("ki,kij,kj->", a[:-1], Q1[:-1], a[:-1]) + np.einsum("ki,kij,kj->", b[:-1], R1[:-1], b[:-1]))
    if multipliers is not None:
        if mean_inputs is None:
            raise InputError("multiplier penalty needs the mean inputs (a, b)")
        lam, gam = (np.asarray(v, dtype=float).reshape(Nst + 1, -1) for v in multipliers)
        ex, eu = paths.expected_state, paths.expected_control
        det += 2 * dt * (np.sum(lam[:-1] * (ex[:-1] - a[:-1])) + np.sum(gam[:-1] * (eu[:-1] - b[:-1])))
    return cost + det


def summarize(per_path) -> CostEstimate:
    per_path = np.asarray(per_path, dtype=float)
    n = per_path.size
    val = float(pairwise_mean(per_path))
    se = float(np.std(per_path, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    if not np.isfinite(val):
        raise NonFiniteState("cost estimate is not finite")
    return CostEstimate(val, se, n, per_path)


def evaluate_cost(prob: ValidatedProblem, paths: PathBundle, mean_inputs=None, multipliers=None) -> CostEstimate:
    return summarize(per_path_cost(prob, paths, mean_inputs, multipliers))


def estimate_mean_trajectory(paths: PathBundle):
    """Cross-path sample mean of X per node and its standard error."""
    X = paths.X
    mean = pairwise_mean(X, 0)
    if X.shape[0] < 2:
        return mean, np.zeros_like(mean)
    se = np.std(X, axis=0, ddof=1) / np.sqrt(X.shape[0])
    return mean, se


@dataclass
class StreamSummary:
    cost: CostEstimate
    mean_state: np.ndarray
    se_state: np.ndarray
    mean_control: np.ndarray
    se_control: np.ndarray


def simulate_blocks(prob: ValidatedProblem, control: ControlPath, noise: NoiseBundle, fn,
                    mean_inputs=None, threads=None):
    """Apply ``fn(PathBundle)`` block by block (feedback controls only, or
    explicit mean inputs); results come back in block order."""
    if control.kind == "open-loop" and mean_inputs is None and prob.has_mean_field:
        raise InputError("open-loop sample-mean closure cannot be streamed; simulate all paths at once")

    def run(rng):
        return fn(simulate_state(prob, control, noise, mean_inputs, rng[0], rng[1]))

    return pmap(run, noise.block_ranges(), threads)


def monte_carlo(prob: ValidatedProblem, control: ControlPath, noise: NoiseBundle, mean_inputs=None,
                multipliers=None, threads=None) -> StreamSummary:
    """Streamed cost and mean estimates over all paths of ``noise``."""

    def stats(pb):
        X, U = pb.X, pb.u
        return (per_path_cost(prob, pb, mean_inputs, multipliers),
                X.sum(axis=0), (X ** 2).sum(axis=0), U.sum(axis=0), (U ** 2).sum(axis=0), X.shape[0])

    parts = simulate_blocks(prob, control, noise, stats, mean_inputs, threads)
    costs = np.concatenate([p[0] for p in parts])
    n = sum(p[5] for p in parts)

    def moments(i):
        s1 = np.add.reduce(np.stack([p[i] for p in parts]), axis=0)
        s2 = np.add.reduce(np.stack([p[i + 1] for p in parts]), axis=0)
        mean = s1 / n
        var = np.maximum(s2 / n - mean ** 2, 0.0) * n / max(n - 1, 1)
        return mean, np.sqrt(var / n)

    mx, sx = moments(1)
    mu, su = moments(3)
    return StreamSummary(summarize(costs), mx, sx, mu, su)
