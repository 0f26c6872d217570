"""Closed-loop means, discretized operators, multipliers and the outer
mean-field problem.

Grid functions are flattened node-major: entry k*d + i is component i at
node k. The operators act on these vectors:

    E[X] = L0 x + L1 a + L2 b + L3 lam + L4 gam
    E[u] = Lt0 x + Lt1 a + Lt2 b + Lt3 lam + Lt4 gam

and are built column by column from impulse inputs.

Outer problem. For v = (a, b) the mean constraints E[X] = a, E[u] = b can
only hold when (a, b) is attainable, i.e. da/dt = (A+A1)a + (B+B1)b with
a(0) = x. The quadratic form J(v) also charges (a, b) directly through
Q1, R1, so it is minimized over the attainable set, parametrized by b:
v = v0 x + Z b (from solving the constraint equations with lam = 0).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, cg, gmres

from .bsde import PhiSolution, _grid_fn, _mid, assemble_offset_M, solve_phi_deterministic, solve_phi_meanfield
from .errors import CGNoConvergence, ConstraintResidualTooLarge, ModeUnsupported
from .model import ValidatedProblem
from .riccati import (GainAssembly, RiccatiSolution, _T, assemble_gains, cost_to_go_split,
                      solve_riccati_deterministic)
from .simulate import FeedbackLaw

CHANNELS = ("x", "a", "b", "lam", "gam")


@dataclass
class MeanFieldPair:
    a: np.ndarray
    b: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@dataclass
class Multipliers:
    lam: np.ndarray
    gam: np.ndarray
    residual: float
    rank: int
    smallest_singular_value: float
    min_norm: bool = True


def _require(prob):
    if not prob.deterministic or prob.nodes is None:
        raise ModeUnsupported("the mean-field pipeline needs deterministic coefficients")


def _mean_response(prob, gains, phi, a, b, gam, x0):
    """Closed-loop means for batched inputs of shape (N+1, d, c).

    dE[X]/dt = A_hat E[X] + A1_hat a + B1_hat b + B Theta^{-1}(B'phi + gam),
    E[u] = K E[X] + Theta^{-1} M. The combination B'phi + gam is
    interpolated linearly at half steps, like the other inputs.
    Returns E[X], E[u], sigma, rho (rho: (N+1, K, n, c)).
    """
    c, cm = prob.nodes, prob.mids
    g, gm = gains, gains.mid
    h, Nst = prob.dt, prob.N
    mvec = _T(c.B) @ phi + gam
    BTi, BTi_m = c.B @ g.Theta_inv, cm.B @ gm.Theta_inv
    src = g.A1_hat @ a + g.B1_hat @ b + BTi @ mvec
    src_m = gm.A1_hat @ _mid(a) + gm.B1_hat @ _mid(b) + BTi_m @ _mid(mvec)
    Ah, Ahm = g.A_hat, gm.A_hat
    X = np.empty(src.shape)
    X[0] = x0
    for k in range(Nst):
        x = X[k]
        k1 = Ah[k] @ x + src[k]
        k2 = Ahm[k] @ (x + 0.5 * h * k1) + src_m[k]
        k3 = Ahm[k] @ (x + 0.5 * h * k2) + src_m[k]
        k4 = Ah[k + 1] @ (x + h * k3) + src[k + 1]
        X[k + 1] = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    M = mvec + g.Wa @ a + g.Wb @ b
    U = g.K @ X + g.Theta_inv @ M
    sigma = c.C @ X + c.C1 @ a + c.D @ U + c.D1 @ b
    rho = (c.alpha @ X[:, None] + c.alpha1 @ a[:, None] + c.beta @ U[:, None] + c.beta1 @ b[:, None])
    return X, U, sigma, rho


def closed_loop_mean(prob: ValidatedProblem, gains: GainAssembly, ric: RiccatiSolution, phi: PhiSolution,
                     a=None, b=None, lam=None, gam=None, x0=None):
    """E[X] and E[u] of the closed loop driven by (a, b, lam, gam) through phi."""
    _require(prob)
    N1, n, m = prob.N + 1, prob.n, prob.m
    a = phi.a if a is None else a
    b = phi.b if b is None else b
    gam = phi.gam if gam is None else gam
    p, cols = _grid_fn(phi.phi, N1, n, "phi")
    a, _ = _grid_fn(a, N1, n, "a")
    b, _ = _grid_fn(b, N1, m, "b")
    gam, _ = _grid_fn(gam, N1, m, "gamma")
    x0 = prob.x0 if x0 is None else np.asarray(x0, dtype=float)
    x0 = x0[:, None] if x0.ndim == 1 else x0
    X, U, _, _ = _mean_response(prob, gains, p, a, b, gam, x0)
    if cols:
        return X, U
    return X[..., 0], U[..., 0]


@dataclass
class OperatorMatrices:
    """Discretized operators; images[ch][q] maps channel ch to output q in
    ("X", "u", "sigma", "rho")."""

    n: int
    m: int
    K: int
    n_nodes: int
    images: dict
    weights: np.ndarray
    prob: ValidatedProblem = field(repr=False, default=None)
    gains: GainAssembly = field(repr=False, default=None)
    ric: RiccatiSolution = field(repr=False, default=None)
    _svd: tuple | None = field(repr=False, default=None)
    composed: dict | None = field(repr=False, default=None)

    def L(self, i):
        return self.images[CHANNELS[i]]["X"]

    def Lt(self, i):
        return self.images[CHANNELS[i]]["u"]

    @property
    def F(self):
        return np.block([[self.L(3), self.L(4)], [self.Lt(3), self.Lt(4)]])

    def svd(self):
        if self._svd is None:
            U, s, Vt = np.linalg.svd(self.F, full_matrices=False)
            tol = max(self.F.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
            r = int(np.sum(s > tol))
            self._svd = (U, s, Vt, r)
        return self._svd

    def pinv_apply(self, rhs):
        U, s, Vt, r = self.svd()
        return Vt[:r].T @ ((U[:, :r].T @ rhs) / (s[:r][:, None] if rhs.ndim == 2 else s[:r]))

    def sizes(self):
        return {f"{ch}->{q}": list(M.shape) for ch, d in self.images.items() for q, M in d.items()}


def trapezoid_weights(N1, h):
    w = np.full(N1, h)
    w[0] = w[-1] = 0.5 * h
    return w


def build_operator_matrices(prob: ValidatedProblem, gains: GainAssembly, ric: RiccatiSolution,
                            compose: bool = True, form: str = "completed") -> OperatorMatrices:
    """Impulse-column construction of the L, Lt operators (and the sigma,
    rho loadings needed by the quadratic form); optionally composes the
    T, P blocks through the multiplier solve."""
    _require(prob)
    N1, n, m, K = prob.N + 1, prob.n, prob.m, prob.K
    dims = {"x": n, "a": n, "b": m, "lam": n, "gam": m}
    images = {}
    for ch in CHANNELS:
        d = dims[ch]
        if ch == "x":
            ncol = n
            x0 = np.eye(n)
            zero_n = np.zeros((N1, n, ncol))
            zero_m = np.zeros((N1, m, ncol))
            ins = dict(a=zero_n, b=zero_m, lam=zero_n, gam=zero_m)
        else:
            ncol = N1 * d
            imp = np.eye(ncol).reshape(N1, d, ncol)
            x0 = np.zeros((n, ncol))
            ins = dict(a=np.zeros((N1, n, ncol)), b=np.zeros((N1, m, ncol)),
                       lam=np.zeros((N1, n, ncol)), gam=np.zeros((N1, m, ncol)))
            ins[ch] = imp
        phi = solve_phi_deterministic(prob, gains, **ins)
        X, U, S, R = _mean_response(prob, gains, phi.phi, ins["a"], ins["b"], ins["gam"], x0)
        M = _T(prob.nodes.B) @ phi.phi + gains.Wa @ ins["a"] + gains.Wb @ ins["b"] + ins["gam"]
        images[ch] = {"X": X.reshape(N1 * n, ncol), "u": U.reshape(N1 * m, ncol),
                      "sigma": S.reshape(N1 * n, ncol), "rho": R.reshape(N1 * K * n, ncol),
                      "M": M.reshape(N1 * m, ncol)}
    ops = OperatorMatrices(n=n, m=m, K=K, n_nodes=N1, images=images,
                           weights=trapezoid_weights(N1, prob.dt), prob=prob, gains=gains, ric=ric)
    if compose:
        compose_operators(ops, form)
    return ops


def solve_multipliers(prob: ValidatedProblem, ops: OperatorMatrices, x0, a, b) -> Multipliers:
    """Minimum-norm least-squares (lam, gam) for the constraint equations
    E[X] = a, E[u] = b."""
    N1, n, m = ops.n_nodes, ops.n, ops.m
    x0 = np.asarray(x0, dtype=float)
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    rhs = np.concatenate([
        a - ops.L(0) @ x0 - ops.L(1) @ a - ops.L(2) @ b,
        b - ops.Lt(0) @ x0 - ops.Lt(1) @ a - ops.Lt(2) @ b,
    ])
    sol = ops.pinv_apply(rhs)
    res = ops.F @ sol - rhs
    _, s, _, r = ops.svd()
    lam = sol[:N1 * n].reshape(N1, n)
    gam = sol[N1 * n:].reshape(N1, m)
    return Multipliers(lam=lam, gam=gam, residual=float(np.abs(res).max(initial=0.0)), rank=r,
                       smallest_singular_value=float(s[r - 1]) if r else 0.0)


def _stack_outputs(ops, ch, form):
    """Per-node stacked outputs z_k for channel ch: (N1, d, ncol)."""
    N1, n, m, K = ops.n_nodes, ops.n, ops.m, ops.K
    im = ops.images[ch]
    ncol = im["X"].shape[1]
    parts = [im["X"].reshape(N1, n, ncol), im["u"].reshape(N1, m, ncol)]
    if ch == "a":
        sel_a = np.eye(N1 * n).reshape(N1, n, ncol)
    else:
        sel_a = np.zeros((N1, n, ncol))
    if ch == "b":
        sel_b = np.eye(N1 * m).reshape(N1, m, ncol)
    else:
        sel_b = np.zeros((N1, m, ncol))
    parts += [sel_a, sel_b, im["sigma"].reshape(N1, n, ncol), im["rho"].reshape(N1, K * n, ncol)]
    return np.concatenate(parts, axis=1)


def node_weights(prob, ric, gains, form):
    """Weight matrices W_k of the integrand z_k' W_k z_k, with
    z = (E[X], E[u], a, b, sigma, rho_1..rho_K)."""
    c = prob.nodes
    N1, n, m, K = prob.N + 1, prob.n, prob.m, prob.K
    d = 3 * n + 2 * m + K * n
    W = np.zeros((N1, d, d))
    iX, iU, iA, iB, iS = 0, n, n + m, 2 * n + m, 2 * n + 2 * m
    iR = 3 * n + 2 * m
    P = ric.P
    W[:, iU:iU + m, iU:iU + m] = c.R
    W[:, iA:iA + n, iA:iA + n] = c.Q1
    W[:, iB:iB + m, iB:iB + m] = c.R1
    if form == "completed":
        V = P
        W[:, iX:iX + n, iX:iX + n] = c.Q + ric.Pdot + P @ c.A + _T(c.A) @ P
        PB, PA1, PB1 = P @ c.B, P @ c.A1, P @ c.B1
        W[:, iX:iX + n, iU:iU + m] = PB
        W[:, iU:iU + m, iX:iX + n] = _T(PB)
        W[:, iX:iX + n, iA:iA + n] = PA1
        W[:, iA:iA + n, iX:iX + n] = _T(PA1)
        W[:, iX:iX + n, iB:iB + m] = PB1
        W[:, iB:iB + m, iX:iX + n] = _T(PB1)
    elif form == "plain":
        VQ, VR, VG = cost_to_go_split(prob, gains)
        V = VQ + VR + VG
        W[:, iX:iX + n, iX:iX + n] = c.Q
    else:
        raise ValueError(f"unknown quadratic form {form!r}")
    W[:, iS:iS + n, iS:iS + n] = V
    for j in range(K):
        W[:, iR + j * n:iR + (j + 1) * n, iR + j * n:iR + (j + 1) * n] = prob.nu[j] * V
    return W


def compose_operators(ops: OperatorMatrices, form: str = "completed"):
    """T and P blocks through the multiplier map, the attainable-set
    parametrization and the quadratic form J(v) = v'Hv + 2 x'Gv' v + x'C x."""
    prob, gains, ric = ops.prob, ops.gains, ops.ric
    N1, n, m = ops.n_nodes, ops.n, ops.m
    Vn = N1 * (n + m)
    L, Lt = ops.L, ops.Lt
    # multiplier map (lam, gam) = ML_x x + ML_v v
    Ev = np.block([[np.eye(N1 * n) - L(1), -L(2)], [-Lt(1), np.eye(N1 * m) - Lt(2)]])
    Ex = np.vstack([-L(0), -Lt(0)])
    ML_v = ops.pinv_apply(Ev)
    ML_x = ops.pinv_apply(Ex)
    # attainable set: solve E[X] = a, E[u] = b for (a, gam) given (x, b), lam = 0
    S = np.block([[L(1) - np.eye(N1 * n), L(4)], [Lt(1), Lt(4)]])
    rhs_x = np.vstack([-L(0), -Lt(0)])
    rhs_b = np.vstack([-L(2), np.eye(N1 * m) - Lt(2)])
    try:
        lu = sla.lu_factor(S)
        sol_x = sla.lu_solve(lu, rhs_x)
        sol_b = sla.lu_solve(lu, rhs_b)
    except (sla.LinAlgError, ValueError):
        sol_x = np.linalg.lstsq(S, rhs_x, rcond=None)[0]
        sol_b = np.linalg.lstsq(S, rhs_b, rcond=None)[0]
    Z = np.vstack([sol_b[:N1 * n], np.eye(N1 * m)])
    V0 = np.vstack([sol_x[:N1 * n], np.zeros((N1 * m, n))])

    # stacked outputs z_k as affine maps of (x, v)
    Zx = _stack_outputs(ops, "x", form)
    Zv = np.concatenate([_stack_outputs(ops, "a", form), _stack_outputs(ops, "b", form)], axis=2)
    Zl = np.concatenate([_stack_outputs(ops, "lam", form), _stack_outputs(ops, "gam", form)], axis=2)
    # the multiplier channels enter only through E[X], E[u], sigma, rho (not the a, b selectors)
    d = Zv.shape[1]
    Zl2 = Zl.reshape(N1 * d, -1)
    Tz = Zv + (Zl2 @ ML_v).reshape(N1, d, Vn)
    Pz = Zx + (Zl2 @ ML_x).reshape(N1, d, n)

    W = node_weights(prob, ric, gains, form) * ops.weights[:, None, None]
    WT = W @ Tz
    H = Tz.reshape(N1 * d, Vn).T @ WT.reshape(N1 * d, Vn)
    Gx = (W @ Pz).reshape(N1 * d, n).T @ Tz.reshape(N1 * d, Vn)       # (n, Vn)
    Cx = Pz.reshape(N1 * d, n).T @ (W @ Pz).reshape(N1 * d, n)
    T2 = Tz[:, :n]
    P2 = Pz[:, :n]
    T1 = Tz[:, n:n + m]
    P1 = Pz[:, n:n + m]
    T3, P3 = T2[-1], P2[-1]
    if form == "completed":
        Cx = Cx + ric.P[0]
    else:
        G = prob.G
        H = H + T3.T @ G @ T3
        Gx = Gx + P3.T @ G @ T3
        Cx = Cx + P3.T @ G @ P3
    H = 0.5 * (H + H.T)
    ops.composed = dict(form=form, H=H, Gx=Gx, Cx=Cx, Z=Z, V0=V0, ML_v=ML_v, ML_x=ML_x,
                        Za_b=sol_b[:N1 * n], Za_x=sol_x[:N1 * n], Zg_b=sol_b[N1 * n:], Zg_x=sol_x[N1 * n:],
                        T1=T1.reshape(N1 * m, Vn), P1=P1.reshape(N1 * m, n),
                        T2=T2.reshape(N1 * n, Vn), P2=P2.reshape(N1 * n, n), T3=T3, P3=P3,
                        Tz=Tz, Pz=Pz, W=W)
    return ops


def quadratic_value(ops: OperatorMatrices, x0, v):
    """J(v) = v'Hv + 2 x'Gx v + x'Cx x."""
    C = ops.composed
    x0 = np.asarray(x0, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(v @ C["H"] @ v + 2 * x0 @ C["Gx"] @ v + x0 @ C["Cx"] @ x0)


def cab_operator(ops: OperatorMatrices):
    """Matrix of T1*RT1 + L + T2*QT2 + T3*GT3 with adjoints in the
    quadrature-weighted products: Wv^{-1} H."""
    N1, n, m = ops.n_nodes, ops.n, ops.m
    wv = np.concatenate([np.repeat(ops.weights, n), np.repeat(ops.weights, m)])
    return ops.composed["H"] / wv[:, None]


def _pcg(A, rhs, tol, maxiter):
    diag = np.diag(A).copy()
    diag[diag <= 0] = 1.0
    Minv = LinearOperator(A.shape, matvec=lambda x: x / diag, dtype=float)
    it = [0]

    def cb(_):
        it[0] += 1

    x, info = cg(A, rhs, rtol=tol, atol=0.0, maxiter=maxiter, M=Minv, callback=cb)
    res = float(np.linalg.norm(A @ x - rhs) / max(np.linalg.norm(rhs), 1e-300))
    return x, info, it[0], res


def _gmres(A, rhs, x0, tol):
    nrm = np.linalg.norm(rhs)
    if nrm == 0:
        return np.zeros_like(rhs), 0, 0.0
    diag = np.diag(A).copy()
    diag[diag == 0] = 1.0
    Minv = LinearOperator(A.shape, matvec=lambda x: x / diag, dtype=float)
    x, info = gmres(A, rhs, x0=x0, rtol=tol, atol=0.0, restart=min(200, A.shape[0]),
                    maxiter=50, M=Minv)
    res = float(np.linalg.norm(A @ x - rhs) / nrm)
    if res > 1e-10:
        x = np.linalg.solve(A, rhs)
        res = float(np.linalg.norm(A @ x - rhs) / nrm)
        info = -1
    return x, info, res


def solve_mean_field(prob: ValidatedProblem, ops: OperatorMatrices, tol: float = 1e-13,
                     maxiter: int | None = None, method: str = "stationarity") -> MeanFieldPair:
    """Minimize J over attainable (a, b).

    method="cg": preconditioned CG on the reduced normal system of the
    discretized quadratic form, Z'HZ w = -Z'(H v0 + Gx' x). Its minimizer
    carries an O(dt) error at the two end nodes (the discrete gradient is
    only first-order consistent there).
    method="stationarity" (default): the CG solution warm-starts GMRES on
    the continuous normal equation r(b) = 0 (see stationarity_system),
    which is consistent to O(dt^2) at every node.
    """
    if ops.composed is None:
        compose_operators(ops)
    C = ops.composed
    N1, n, m = ops.n_nodes, ops.n, ops.m
    x0 = prob.x0
    H, Z = C["H"], C["Z"]
    v0 = C["V0"] @ x0
    Hr = Z.T @ H @ Z
    Hr = 0.5 * (Hr + Hr.T)
    gr = Z.T @ (H @ v0 + C["Gx"].T @ x0)
    maxiter = maxiter or 10 * Hr.shape[0]
    diag = {"cg_dim": Hr.shape[0], "tikhonov": 0.0}
    if np.linalg.norm(gr) == 0:
        w, info, its, res = np.zeros_like(gr), 0, 0, 0.0
    else:
        w, info, its, res = _pcg(Hr, -gr, tol, maxiter)
        if info != 0 and res > 1e-10:
            eps = 1e-10 * np.trace(Hr) / Hr.shape[0]
            diag["tikhonov"] = float(eps)
            w, info, its2, res = _pcg(Hr + eps * np.eye(Hr.shape[0]), -gr, tol, maxiter)
            its += its2
            if info != 0 and res > 1e-8:
                raise CGNoConvergence(f"CG did not converge in {maxiter} iterations "
                                      f"(relative residual {res:.3g})", iterations=its, residual=res)
    diag.update(cg_iterations=int(its), cg_relative_residual=float(res), method=method)
    if method == "stationarity":
        Rb, Rx = stationarity_system(ops)
        rhs = -Rx @ x0
        w, info, res = _gmres(Rb, rhs, w, tol)
        diag.update(gmres_info=int(info), gmres_relative_residual=res)
    elif method != "cg":
        raise ValueError(f"unknown method {method!r}")
    v = v0 + Z @ w
    return MeanFieldPair(a=v[:N1 * n].reshape(N1, n), b=v[N1 * n:].reshape(N1, m), diagnostics=diag)


@dataclass
class MfslqSolution:
    prob: ValidatedProblem = field(repr=False)
    ric: RiccatiSolution = field(repr=False)
    gains: GainAssembly = field(repr=False)
    phi: PhiSolution = field(repr=False)
    pair: MeanFieldPair
    multipliers: Multipliers
    gain: np.ndarray          # Theta^{-1} N   (N+1, m, n)
    offset: np.ndarray        # Theta^{-1} M   (N+1, m)
    M: np.ndarray
    mean_state: np.ndarray
    mean_control: np.ndarray
    J: float
    diagnostics: dict
    ops: OperatorMatrices | None = field(repr=False, default=None)

    @property
    def a(self):
        return self.pair.a

    @property
    def b(self):
        return self.pair.b

    @property
    def lam(self):
        return self.multipliers.lam

    @property
    def gam(self):
        return self.multipliers.gam

    def feedback_law(self) -> FeedbackLaw:
        return FeedbackLaw(self.gain, self.offset, self.mean_state, self.mean_control)

    @property
    def valid(self):
        return bool(self.diagnostics.get("valid", False))


def meanfield_stationarity(prob, ric, gains, mean_x, mean_u, offset, M):
    """Deterministic residual of the full mean-field stationarity condition
    along the feedback u = K X + offset (identical on every path):
    B'phi_mf + Wa E[X] + Wb E[u] + E-term - M. Accepts column batches
    (N+1, d, c)."""
    c = prob.nodes
    P = ric.P
    N1 = prob.N + 1
    a, cols = _grid_fn(mean_x, N1, prob.n, "mean_x")
    b, _ = _grid_fn(mean_u, N1, prob.m, "mean_u")
    Mv, _ = _grid_fn(M, N1, prob.m, "M")
    phi_mf = solve_phi_meanfield(prob, ric, gains, a, b, _grid_fn(offset, N1, prob.m, "offset")[0])
    sigma = (c.C + c.C1) @ a + (c.D + c.D1) @ b
    eterm = _T(c.B1) @ (P @ a + phi_mf) + _T(c.D1) @ P @ sigma + c.R1 @ b
    for j in range(prob.K):
        rho = (c.alpha[:, j] + c.alpha1[:, j]) @ a + (c.beta[:, j] + c.beta1[:, j]) @ b
        eterm = eterm + prob.nu[j] * _T(c.beta1[:, j]) @ P @ rho
    r = _T(c.B) @ phi_mf + gains.Wa @ a + gains.Wb @ b + eterm - Mv
    if cols:
        return r, phi_mf
    return r[..., 0], phi_mf[..., 0]


def stationarity_system(ops: OperatorMatrices):
    """Affine map b -> r(b) of the mean-field stationarity residual on the
    attainable set (E[X] = a, E[u] = b): returns (Rb, Rx) with
    r = Rb b + Rx x, flattened node-major.

    On the attainable set r is the L2 gradient of J with respect to b, so
    r = 0 is the continuous normal equation of the outer problem."""
    C = ops.composed
    prob, gains, ric = ops.prob, ops.gains, ops.ric
    N1, n, m = ops.n_nodes, ops.n, ops.m
    out = []
    for ncol, Za, Zg, bsel, xsel in (
            (N1 * m, C["Za_b"], C["Zg_b"], np.eye(N1 * m), None),
            (n, C["Za_x"], C["Zg_x"], np.zeros((N1 * m, n)), np.eye(n))):
        M = ops.images["a"]["M"] @ Za + ops.images["b"]["M"] @ bsel + ops.images["gam"]["M"] @ Zg
        if xsel is not None:
            M = M + ops.images["x"]["M"]
        a = Za.reshape(N1, n, ncol)
        b = bsel.reshape(N1, m, ncol)
        M = M.reshape(N1, m, ncol)
        offset = gains.Theta_inv @ M
        r, _ = meanfield_stationarity(prob, ric, gains, a, b, offset, M)
        out.append(r.reshape(N1 * m, ncol))
    return out[0], out[1]


def solve_mfslq(prob: ValidatedProblem, form: str = "completed", constraint_tol: float = 1e-6,
                keep_operators: bool = True, method: str = "stationarity") -> MfslqSolution:
    """Riccati -> gains -> operators -> (a*, b*) -> multipliers -> phi -> M."""
    _require(prob)
    ric = solve_riccati_deterministic(prob)
    gains = assemble_gains(prob, ric)
    ops = build_operator_matrices(prob, gains, ric, compose=True, form=form)
    pair = solve_mean_field(prob, ops, method=method)
    mult = solve_multipliers(prob, ops, prob.x0, pair.a, pair.b)
    phi = solve_phi_deterministic(prob, gains, pair.a, pair.b, mult.lam, mult.gam)
    M = assemble_offset_M(prob, gains, ric, phi)
    X, U = closed_loop_mean(prob, gains, ric, phi)
    rx = np.abs(X - pair.a).max(axis=1)
    ru = np.abs(U - pair.b).max(axis=1)
    offset = np.einsum("kij,kj->ki", gains.Theta_inv, M)
    v = np.concatenate([pair.a.ravel(), pair.b.ravel()])
    J = quadratic_value(ops, prob.x0, v)
    r_mf, _ = meanfield_stationarity(prob, ric, gains, X, U, offset, M)
    Ru = np.einsum("kij,kj->ki", prob.nodes.R, U)
    _, s, _, rank = ops.svd()
    diag = dict(pair.diagnostics)
    diag.update(
        constraint_residual_state=float(rx.max()), constraint_residual_control=float(ru.max()),
        multiplier_ls_residual=mult.residual, multiplier_rank=mult.rank,
        multiplier_system_size=int(ops.F.shape[1]),
        smallest_retained_singular_value=mult.smallest_singular_value,
        meanfield_stationarity_abs=float(np.abs(r_mf).max()),
        riccati_positivity=ric.positivity, min_eig_P=ric.min_eig_P,
        symmetrization=dict(prob.symmetrization), quadratic_form=form,
        operator_sizes=ops.sizes(),
    )
    scale = float(np.abs(Ru).max())
    diag["meanfield_stationarity_normalized"] = float(np.abs(r_mf).max() / scale) if scale > 0 else float(np.abs(r_mf).max())
    ok = rx.max() <= constraint_tol and ru.max() <= constraint_tol
    diag["valid"] = bool(ok)
    sol = MfslqSolution(prob=prob, ric=ric, gains=gains, phi=phi, pair=pair, multipliers=mult,
                        gain=gains.K, offset=offset, M=M, mean_state=X, mean_control=U, J=J,
                        diagnostics=diag, ops=ops if keep_operators else None)
    if not ok:
        raise ConstraintResidualTooLarge(
            f"mean constraints violated: max|E[X]-a| = {rx.max():.3g}, max|E[u]-b| = {ru.max():.3g}",
            state_profile=rx.tolist(), control_profile=ru.tolist())
    return sol


def mean_riccati(prob: ValidatedProblem, ric: RiccatiSolution | None = None):
    """Riccati equation of the mean part, an independent value oracle for
    deterministic coefficients: the optimal cost is x' Pi(0) x with

        -dPi/dt = Pi Ah + Ah'Pi + Ch'P Ch + sum nu ah'P ah + Q + Q1
                  - S' (R + R1 + Dh'P Dh + sum nu bh'P bh)^{-1} S,   Pi(T) = G,
        S = Bh'Pi + Dh'P Ch + sum nu bh'P ah,

    where Ah = A + A1, Bh = B + B1 and so on, and P is the fluctuation Riccati
    solution. RK4 on the Riccati grid (P at half steps from the Hermite
    interpolant)."""
    _require(prob)
    ric = ric or solve_riccati_deterministic(prob)
    nu, h = prob.nu, prob.dt

    def parts(c):
        Ah, Bh, Ch, Dh = c.A + c.A1, c.B + c.B1, c.C + c.C1, c.D + c.D1
        ah, bh = c.alpha + c.alpha1, c.beta + c.beta1
        return Ah, Bh, Ch, Dh, ah, bh, c.Q + c.Q1, c.R + c.R1

    def rhs(Pi, P, pc):
        Ah, Bh, Ch, Dh, ah, bh, Qh, Rh = pc
        Pj = P[None]
        F = Pi @ Ah + Ah.T @ Pi + Ch.T @ P @ Ch + Qh
        S = Bh.T @ Pi + Dh.T @ P @ Ch
        Rt = Rh + Dh.T @ P @ Dh
        if prob.K:
            F = F + np.einsum("j,jki,jkl->il", nu, ah, Pj @ ah)
            S = S + np.einsum("j,jki,jkl->il", nu, bh, Pj @ ah)
            Rt = Rt + np.einsum("j,jki,jkl->il", nu, bh, Pj @ bh)
        out = F - S.T @ np.linalg.solve(Rt, S)
        return 0.5 * (out + out.T)

    c, cm = prob.nodes, prob.mids
    pn, pm = parts(c), parts(cm)
    N = prob.N
    Pi = np.empty(ric.P.shape)
    Pi[N] = prob.G
    for k in range(N - 1, -1, -1):
        p = Pi[k + 1]
        cn1, cmk, cn0 = [x[k + 1] for x in pn], [x[k] for x in pm], [x[k] for x in pn]
        k1 = rhs(p, ric.P[k + 1], cn1)
        k2 = rhs(p + 0.5 * h * k1, ric.P_mid[k], cmk)
        k3 = rhs(p + 0.5 * h * k2, ric.P_mid[k], cmk)
        k4 = rhs(p + h * k3, ric.P[k], cn0)
        Pi[k] = p + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        Pi[k] = 0.5 * (Pi[k] + Pi[k].T)
    return Pi
