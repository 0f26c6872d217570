"""Riccati equation with jumps and the derived feedback gains.

Deterministic tier (Lambda = Gamma = 0):

    -dP/dt = A'P + PA + C'PC + Q + N' Theta^{-1} N + sum_j nu_j alpha_j' P alpha_j,
    P(T) = G,

with Theta = -(D'PD + sum_j nu_j beta_j' P beta_j + R) and
N = B'P + D'PC + sum_j nu_j beta_j' P alpha_j. The general formulas with
Lambda, Gamma are kept so the regression tier reuses the same algebra.

All functions broadcast over leading (time, path) axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (ModeUnsupported, NonFinite, PositivityLost, ThetaSingular,
                     GridMismatch)
from .model import CoefficientSnapshot, ValidatedProblem

THETA_COND_MAX = 1e12


def _T(M):
    return np.swapaxes(M, -1, -2)


def _sym(M):
    return 0.5 * (M + _T(M))


def _jsum(nu, F):
    """sum_j nu_j F[..., j, :, :]"""
    if F.shape[-3] == 0:
        return np.zeros(F.shape[:-3] + F.shape[-2:])
    return np.einsum("k,...kij->...ij", nu, F)


def _bk(M):
    """Insert a mark axis so M broadcasts against (..., K, r, c)."""
    return M[..., None, :, :]


@dataclass
class RiccatiSolution:
    tier: str
    t: np.ndarray
    P: np.ndarray                      # (N+1, n, n)
    Lam: np.ndarray                    # (N+1, n, n)
    Gam: np.ndarray                    # (N+1, K, n, n)
    P_mid: np.ndarray | None = None    # (N, n, n), deterministic tier
    Pdot: np.ndarray | None = None     # (N+1, n, n)
    positivity: float = np.nan         # min over nodes of lambda_min(-Theta)
    min_eig_P: float = np.nan
    diagnostics: dict = field(default_factory=dict)
    paths: dict | None = None          # regressed tier: per-path arrays

    @property
    def n_steps(self):
        return len(self.t) - 1

    def gain_table(self, gains: "GainAssembly"):
        return gains.K


def theta_inverse(Theta, where="node", index_offset=0, checks=True):
    """Invert Theta through a Cholesky factor of -Theta.

    Returns (Theta^{-1}, lambda_min(-Theta), cond(-Theta)). With
    ``checks=False`` the eigenvalue diagnostics are skipped unless the
    factorization fails (used inside RK4 stages).
    """
    S = -_sym(Theta)
    if not checks:
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            return theta_inverse(Theta, where, index_offset, checks=True)
        Li = np.linalg.inv(L)
        return -_sym(_T(Li) @ Li), None, None
    eig = np.linalg.eigvalsh(S)
    lo, hi = eig[..., 0], eig[..., -1]
    if np.any(~np.isfinite(eig)):
        raise NonFinite("non-finite Theta encountered")
    if np.any(lo <= 0):
        k = np.unravel_index(np.argmin(lo), lo.shape)
        raise PositivityLost(f"-Theta lost positivity at {where} {k[0] + index_offset if k else 0}: "
                             f"lambda_min = {lo[k]:.6g}", node=int(k[0] + index_offset) if k else 0,
                             lambda_min=float(lo[k]))
    cond = hi / lo
    if np.any(cond > THETA_COND_MAX):
        k = np.unravel_index(np.argmax(cond), cond.shape)
        raise ThetaSingular(f"Theta is ill conditioned at {where} {k[0] + index_offset if k else 0}: "
                            f"cond = {cond[k]:.3g}", cond=float(cond[k]))
    L = np.linalg.cholesky(S)
    Li = np.linalg.inv(L)
    Sinv = _T(Li) @ Li
    return -_sym(Sinv), lo, cond


def theta_N_H(c: CoefficientSnapshot, P, Lam=None, Gam=None):
    """Theta (m x m), N (m x n), H (n x m) at the given coefficient values."""
    nu = c.nu
    PG = _bk(P) if Gam is None else _bk(P) + Gam
    BT, DT = _T(c.B), _T(c.D)
    betaT = _T(c.beta)
    Theta = -(DT @ P @ c.D + _jsum(nu, betaT @ PG @ c.beta) + c.R)
    N = BT @ P + DT @ P @ c.C + _jsum(nu, betaT @ PG @ c.alpha)
    H = _T(c.C) @ P @ c.D + P @ c.B + _jsum(nu, _T(c.alpha) @ PG @ c.beta)
    if Lam is not None:
        N = N + DT @ Lam
        H = H + Lam @ c.D
    if Gam is not None:
        N = N + _jsum(nu, betaT @ Gam)
        H = H + _jsum(nu, Gam @ c.beta)
    return Theta, N, H


def riccati_rhs(c: CoefficientSnapshot, P, Lam=None, Gam=None, where="node", index_offset=0,
                checks=True):
    """dP/dt from the Riccati equation (the negative of its driver)."""
    Theta, N, H = theta_N_H(c, P, Lam, Gam)
    Ti, _, _ = theta_inverse(Theta, where, index_offset, checks)
    AT, CT = _T(c.A), _T(c.C)
    nu = c.nu
    F = AT @ P + P @ c.A + CT @ P @ c.C + c.Q + _T(N) @ Ti @ N
    PG = _bk(P) if Gam is None else _bk(P) + Gam
    F = F + _jsum(nu, _T(c.alpha) @ PG @ c.alpha)
    if Lam is not None:
        F = F + CT @ Lam + Lam @ c.C
    if Gam is not None:
        F = F + _jsum(nu, _T(c.alpha) @ Gam + Gam @ c.alpha)
    return -F


def _require_deterministic(prob):
    if not prob.deterministic or prob.nodes is None:
        raise ModeUnsupported("this operation needs coefficient_mode = 'deterministic'")


class _Stages:
    """Coefficient arrays for the RK4 stages, transposes precomputed."""

    def __init__(self, c):
        self.c = c
        self.AT, self.CT, self.BT, self.DT = _T(c.A), _T(c.C), _T(c.B), _T(c.D)
        self.K = c.alpha.shape[-3]
        if self.K:
            self.nbT = c.nu[:, None, None] * _T(c.beta)          # nu_j beta_j'
            self.naT = c.nu[:, None, None] * _T(c.alpha)

    def rhs(self, k, P, where_k):
        c = self.c
        PD, PC = P @ c.D[k], P @ c.C[k]
        S = self.DT[k] @ PD + c.R[k]
        N = self.BT[k] @ P + self.DT[k] @ PC
        F = self.AT[k] @ P + P @ c.A[k] + self.CT[k] @ PC + c.Q[k]
        if self.K:
            Pb, Pa = P @ c.beta[k], P @ c.alpha[k]
            S = S + np.einsum("jab,jbc->ac", self.nbT[k], Pb)
            N = N + np.einsum("jab,jbc->ac", self.nbT[k], Pa)
            F = F + np.einsum("jab,jbc->ac", self.naT[k], Pa)
        try:
            L = np.linalg.cholesky(0.5 * (S + S.T))
        except np.linalg.LinAlgError:
            theta_inverse(-S, index_offset=where_k)             # raises with diagnostics
            raise
        Y = np.linalg.solve(L, N)
        return -(F - Y.T @ Y)


def solve_riccati_deterministic(prob: ValidatedProblem) -> RiccatiSolution:
    """Backward RK4 on the grid from P(T) = G, symmetrizing every step."""
    _require_deterministic(prob)
    Nst, h, n = prob.N, prob.dt, prob.n
    nodes, mids = prob.nodes, prob.mids
    sn, sm = _Stages(nodes), _Stages(mids)
    P = np.empty((Nst + 1, n, n))
    P[Nst] = prob.G
    for k in range(Nst - 1, -1, -1):
        P1 = P[k + 1]
        k1 = sn.rhs(k + 1, P1, k + 1)
        k2 = sm.rhs(k, P1 - 0.5 * h * k1, k)
        k3 = sm.rhs(k, P1 - 0.5 * h * k2, k)
        k4 = sn.rhs(k, P1 - h * k3, k)
        Pk = P1 - h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        Pk = 0.5 * (Pk + Pk.T)
        if not np.all(np.isfinite(Pk)):
            raise NonFinite(f"Riccati solution blew up at node {k}", node=k)
        P[k] = Pk
    Pdot = riccati_rhs(nodes, P)
    # cubic Hermite midpoint values, fourth order accurate
    P_mid = _sym(0.5 * (P[:-1] + P[1:]) + h / 8.0 * (Pdot[:-1] - Pdot[1:]))
    eigP = np.linalg.eigvalsh(P)[:, 0]
    tol = 1e-10 * np.maximum(1.0, np.abs(P).max(axis=(1, 2)))
    bad = np.nonzero(eigP < -tol)[0]
    if bad.size:
        k = int(bad[-1])
        raise PositivityLost(f"P lost positive semidefiniteness at node {k}: lambda_min = {eigP[k]:.6g}",
                             node=k, lambda_min=float(eigP[k]))
    Theta, _, _ = theta_N_H(nodes, P)
    _, lo, _ = theta_inverse(Theta)
    return RiccatiSolution(
        tier="deterministic", t=prob.grid.nodes, P=P,
        Lam=np.zeros_like(P), Gam=np.zeros((Nst + 1, prob.K, n, n)),
        P_mid=P_mid, Pdot=Pdot, positivity=float(lo.min()), min_eig_P=float(eigP.min()),
    )


@dataclass
class GainAssembly:
    """Feedback quantities at grid nodes; ``mid`` holds the same at step
    midpoints (used by the RK4 stages downstream)."""

    Theta: np.ndarray
    Theta_inv: np.ndarray
    N: np.ndarray
    H: np.ndarray
    K: np.ndarray          # feedback gain Theta^{-1} N
    Wa: np.ndarray         # D'PC1 + sum nu beta'(P+Gam)alpha1   (m x n)
    Wb: np.ndarray         # D'PD1 + sum nu beta'(P+Gam)beta1    (m x m)
    A_hat: np.ndarray
    A1_hat: np.ndarray
    B1_hat: np.ndarray
    C_hat: np.ndarray
    C1_hat: np.ndarray
    D1_hat: np.ndarray
    alpha_hat: np.ndarray
    alpha1_hat: np.ndarray
    beta1_hat: np.ndarray
    M_hat: np.ndarray
    N_hat: np.ndarray
    K_hat: np.ndarray
    L_hat: np.ndarray
    Q_hat: np.ndarray
    min_eig: np.ndarray
    cond: np.ndarray
    mid: "GainAssembly | None" = None


def compute_gains(c: CoefficientSnapshot, P, Lam=None, Gam=None, index_offset=0) -> GainAssembly:
    """Literal evaluation of the gain and hat-coefficient formulas."""
    nu = c.nu
    Theta, N, H = theta_N_H(c, P, Lam, Gam)
    Ti, lo, cond = theta_inverse(Theta, index_offset=index_offset)
    PG = _bk(P) if Gam is None else _bk(P) + Gam
    betaT = _T(c.beta)
    DT = _T(c.D)
    Wa = DT @ P @ c.C1 + _jsum(nu, betaT @ PG @ c.alpha1)
    Wb = DT @ P @ c.D1 + _jsum(nu, betaT @ PG @ c.beta1)
    K = Ti @ N
    TiWa, TiWb = Ti @ Wa, Ti @ Wb
    HTi = H @ Ti
    L_hat = _T(c.C) @ P @ c.C1 + P @ c.A1 + _jsum(nu, _T(c.alpha) @ PG @ c.alpha1) + HTi @ Wa
    Q_hat = _T(c.C) @ P @ c.D1 + P @ c.B1 + _jsum(nu, _T(c.alpha) @ PG @ c.beta1) + HTi @ Wb
    if Lam is not None:
        L_hat = L_hat + Lam @ c.C1
        Q_hat = Q_hat + Lam @ c.D1
    if Gam is not None:
        L_hat = L_hat + _jsum(nu, Gam @ c.alpha1)
        Q_hat = Q_hat + _jsum(nu, Gam @ c.beta1)
    return GainAssembly(
        Theta=Theta, Theta_inv=Ti, N=N, H=H, K=K, Wa=Wa, Wb=Wb,
        A_hat=c.A + c.B @ K,
        A1_hat=c.A1 + c.B @ TiWa,
        B1_hat=c.B1 + c.B @ TiWb,
        C_hat=c.C + c.D @ K,
        C1_hat=c.C1 + c.D @ TiWa,
        D1_hat=c.D1 + c.D @ TiWb,
        alpha_hat=c.alpha + c.beta @ _bk(K),
        alpha1_hat=c.alpha1 + c.beta @ _bk(TiWa),
        beta1_hat=c.beta1 + c.beta @ _bk(TiWb),
        M_hat=_T(c.A) + HTi @ _T(c.B),
        N_hat=_T(c.C) + HTi @ DT,
        K_hat=_T(c.alpha) + _bk(HTi) @ betaT,
        L_hat=L_hat, Q_hat=Q_hat, min_eig=lo, cond=cond,
    )


def assemble_gains(prob: ValidatedProblem, ric: RiccatiSolution) -> GainAssembly:
    _require_deterministic(prob)
    if ric.P.shape[0] != prob.N + 1:
        raise GridMismatch(f"Riccati solution has {ric.P.shape[0]} nodes, problem grid has {prob.N + 1}")
    g = compute_gains(prob.nodes, ric.P)
    if ric.P_mid is not None:
        g.mid = compute_gains(prob.mids, ric.P_mid)
    return g


def riccati_residual(prob: ValidatedProblem, ric: RiccatiSolution) -> np.ndarray:
    """Max-norm residual of the Riccati equation at interior nodes, with
    dP/dt from central differences."""
    _require_deterministic(prob)
    P, h = ric.P, prob.dt
    if len(P) < 3:
        return np.zeros(0)
    cd = (P[2:] - P[:-2]) / (2 * h)
    rhs = riccati_rhs(prob.nodes.index(slice(1, -1)), P[1:-1])
    return np.abs(cd - rhs).max(axis=(1, 2))


def backward_lyapunov(prob: ValidatedProblem, gains: GainAssembly, source, terminal):
    """Solve -dV/dt = A_hat'V + V A_hat + C_hat'V C_hat + sum nu alpha_hat'V alpha_hat + S,
    V(T) = terminal, by backward RK4. ``source`` is a callable
    (gains_like, is_mid) -> S array with leading node/mid axis."""
    nu = prob.nu
    h = prob.dt
    S_nodes = source(gains, False)
    S_mids = source(gains.mid, True)

    def rhs(g, k, V, S):
        Ah, Ch, ah = g.A_hat[k], g.C_hat[k], g.alpha_hat[k]
        F = _T(Ah) @ V + V @ Ah + _T(Ch) @ V @ Ch + _jsum(nu, _T(ah) @ V @ ah) + S
        return -F

    Nst = prob.N
    V = np.empty((Nst + 1,) + np.shape(terminal))
    V[Nst] = terminal
    for k in range(Nst - 1, -1, -1):
        V1 = V[k + 1]
        k1 = rhs(gains, k + 1, V1, S_nodes[k + 1])
        k2 = rhs(gains.mid, k, V1 - 0.5 * h * k1, S_mids[k])
        k3 = rhs(gains.mid, k, V1 - 0.5 * h * k2, S_mids[k])
        k4 = rhs(gains, k, V1 - h * k3, S_nodes[k])
        V[k] = _sym(V1 - h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
    return V


def cost_to_go_split(prob: ValidatedProblem, gains: GainAssembly):
    """Split the closed-loop cost-to-go of fluctuations into the parts
    charged by Q, by R (through the gain) and by G. Their sum is P."""
    n = prob.n
    zeros = np.zeros((n, n))

    def src_Q(g, mid):
        return prob.mids.Q if mid else prob.nodes.Q

    def src_R(g, mid):
        R = prob.mids.R if mid else prob.nodes.R
        return _T(g.K) @ R @ g.K

    def src_0(g, mid):
        return np.zeros_like(prob.mids.Q if mid else prob.nodes.Q)

    VQ = backward_lyapunov(prob, gains, src_Q, zeros)
    VR = backward_lyapunov(prob, gains, src_R, zeros)
    VG = backward_lyapunov(prob, gains, src_0, prob.G)
    return VQ, VR, VG


def solve_riccati_lsmc(prob: ValidatedProblem, basis=None, n_paths: int = 2000, seed: int | None = None,
                       threads=None) -> RiccatiSolution:
    """Regression (least-squares Monte Carlo) tier. Experimental."""
    from .lsmc import riccati_lsmc
    from .simulate import DEFAULT_SEED
    return riccati_lsmc(prob, basis=basis, n_paths=n_paths, seed=DEFAULT_SEED if seed is None else seed,
                        threads=threads)


def write_riccati_csv(path, ric: RiccatiSolution, gains: GainAssembly | None = None, header=None):
    """CSV of (t, vec(P)) and, if gains given, (t, vec(Theta^{-1} N))."""
    from .io import write_table
    n = ric.P.shape[-1]
    cols = ["t"] + [f"P_{i}{j}" for i in range(n) for j in range(n)]
    data = [ric.t[:, None], ric.P.reshape(len(ric.t), -1)]
    if gains is not None:
        m = gains.K.shape[-2]
        cols += [f"K_{i}{j}" for i in range(m) for j in range(n)]
        data.append(gains.K.reshape(len(ric.t), -1))
    write_table(path, cols, np.hstack(data), header)
