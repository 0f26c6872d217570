"""Offset equation for phi, the affine offset M and the adjoint triple.

Deterministic tier (psi = theta = 0):

    -dphi/dt = M_hat phi + L_hat a + Q_hat b + lam + H Theta^{-1} gam,  phi(T) = 0,
    M = B'phi + Wa a + Wb b + gam,

with Wa = D'PC1 + sum nu beta'P alpha1 and Wb = D'PD1 + sum nu beta'P beta1.
The adjoint is recovered from the decoupling Y = PX + phi,
Z = P(CX + C1 a + Du + D1 b), K_j = P(alpha_j X + alpha1_j a + beta_j u + beta1_j b).

Grid functions have shape (N+1, n); a trailing column axis (N+1, n, c)
solves c right-hand sides at once.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridMismatch, ModeUnsupported
from .model import ValidatedProblem
from .riccati import GainAssembly, RiccatiSolution, _T, _jsum


@dataclass
class PhiSolution:
    t: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    theta: np.ndarray
    a: np.ndarray
    b: np.ndarray
    lam: np.ndarray
    gam: np.ndarray


@dataclass
class AdjointPath:
    Y: np.ndarray       # (P, N+1, n)
    Z: np.ndarray       # (P, N+1, n)
    K: np.ndarray       # (P, N+1, K, n)


def _grid_fn(x, N1, d, name):
    """Coerce to (N+1, d, c); returns (array, had_columns)."""
    if x is None:
        return np.zeros((N1, d, 1)), False
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = np.full((N1, d), float(x))
    if x.ndim == 1 and d == 1 and x.shape[0] == N1:
        x = x[:, None]
    if x.ndim == 2:
        if x.shape != (N1, d):
            raise GridMismatch(f"{name}: expected shape {(N1, d)}, found {x.shape}")
        return x[:, :, None], False
    if x.ndim != 3 or x.shape[:2] != (N1, d):
        raise GridMismatch(f"{name}: expected shape {(N1, d)} (+ columns), found {x.shape}")
    return x, True


def _mid(x):
    return 0.5 * (x[:-1] + x[1:])


def _broadcast_cols(*arrs):
    c = max(a.shape[-1] for a in arrs)
    return [np.broadcast_to(a, a.shape[:-1] + (c,)) for a in arrs]


def backward_linear(Mh_nodes, Mh_mids, s_nodes, s_mids, h):
    """RK4 for -dphi/dt = Mh phi + s backward from phi(T) = 0."""
    N1 = s_nodes.shape[0]
    phi = np.zeros(s_nodes.shape)
    for k in range(N1 - 2, -1, -1):
        p = phi[k + 1]
        k1 = Mh_nodes[k + 1] @ p + s_nodes[k + 1]
        k2 = Mh_mids[k] @ (p + 0.5 * h * k1) + s_mids[k]
        k3 = Mh_mids[k] @ (p + 0.5 * h * k2) + s_mids[k]
        k4 = Mh_nodes[k] @ (p + h * k3) + s_nodes[k]
        phi[k] = p + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return phi


def solve_phi_deterministic(prob: ValidatedProblem, gains: GainAssembly, a=None, b=None, lam=None,
                            gam=None) -> PhiSolution:
    if not prob.deterministic:
        raise ModeUnsupported("solve_phi_deterministic needs deterministic coefficients")
    if gains.K.shape[0] != prob.N + 1:
        raise GridMismatch("gain assembly does not match the problem grid")
    N1, n, m, h = prob.N + 1, prob.n, prob.m, prob.dt
    a, ca = _grid_fn(a, N1, n, "a")
    b, cb = _grid_fn(b, N1, m, "b")
    lam, cl = _grid_fn(lam, N1, n, "lambda")
    gam, cg = _grid_fn(gam, N1, m, "gamma")
    a, b, lam, gam = _broadcast_cols(a, b, lam, gam)
    g, gm = gains, gains.mid
    HTi = g.H @ g.Theta_inv
    HTi_m = gm.H @ gm.Theta_inv
    s_nodes = g.L_hat @ a + g.Q_hat @ b + lam + HTi @ gam
    s_mids = gm.L_hat @ _mid(a) + gm.Q_hat @ _mid(b) + _mid(lam) + HTi_m @ _mid(gam)
    phi = backward_linear(g.M_hat, gm.M_hat, s_nodes, s_mids, h)
    cols = ca or cb or cl or cg
    sq = (lambda x: x) if cols else (lambda x: x[..., 0])
    return PhiSolution(t=prob.grid.nodes, phi=sq(phi), psi=sq(np.zeros_like(phi)),
                       theta=np.zeros((N1, prob.K, n) + ((phi.shape[-1],) if cols else ())),
                       a=sq(a), b=sq(b), lam=sq(lam), gam=sq(gam))


def assemble_offset_M(prob: ValidatedProblem, gains: GainAssembly, ric: RiccatiSolution,
                      phi: PhiSolution, a=None, b=None, gam=None):
    """M = B'phi + D'psi + sum nu beta'theta + Wa a + Wb b + gam, node-wise."""
    N1, n, m = prob.N + 1, prob.n, prob.m
    if gains.K.shape[0] != N1 or ric.P.shape[0] != N1 or phi.phi.shape[0] != N1:
        raise GridMismatch("inputs are not on the problem grid")
    a = phi.a if a is None else a
    b = phi.b if b is None else b
    gam = phi.gam if gam is None else gam
    p, pc = _grid_fn(phi.phi, N1, n, "phi")
    a, _ = _grid_fn(a, N1, n, "a")
    b, _ = _grid_fn(b, N1, m, "b")
    gam, _ = _grid_fn(gam, N1, m, "gamma")
    c = prob.nodes
    M = _T(c.B) @ p + gains.Wa @ a + gains.Wb @ b + gam
    psi, _ = _grid_fn(phi.psi, N1, n, "psi")
    M = M + _T(c.D) @ psi
    if prob.K:
        th = np.asarray(phi.theta)
        if th.ndim == 3:
            th = th[..., None]
        M = M + np.einsum("k,tkji,tkjc->tic", prob.nu, c.beta, th)
    return M if pc else M[..., 0]


def reconstruct_adjoint(prob: ValidatedProblem, ric: RiccatiSolution, gains: GainAssembly,
                        phi: PhiSolution, paths, u=None, a=None, b=None) -> AdjointPath:
    """Y, Z, K per path and node from the decoupling identities; ``u`` is
    the realized control (default: the one stored in ``paths``)."""
    N1 = prob.N + 1
    X = paths.X
    u = paths.u if u is None else u
    if X.shape[1] != N1 or ric.P.shape[0] != N1 or phi.phi.shape[0] != N1:
        raise GridMismatch("paths, Riccati and phi solutions must share the problem grid")
    a = phi.a if a is None else np.asarray(a, dtype=float)
    b = phi.b if b is None else np.asarray(b, dtype=float)
    c = prob.nodes
    P, Lam, Gam = ric.P, ric.Lam, ric.Gam
    Y = np.einsum("kij,pkj->pki", P, X) + phi.phi[None]
    inner = (np.einsum("kij,pkj->pki", c.C, X) + np.einsum("kij,kj->ki", c.C1, a)[None]
             + np.einsum("kij,pkj->pki", c.D, u) + np.einsum("kij,kj->ki", c.D1, b)[None])
    Z = np.einsum("kij,pkj->pki", P, inner) + np.einsum("kij,pkj->pki", Lam, X) + phi.psi[None]
    Kp = np.zeros(X.shape[:2] + (prob.K, prob.n))
    for j in range(prob.K):
        inner = (np.einsum("kij,pkj->pki", c.alpha[:, j], X) + np.einsum("kij,kj->ki", c.alpha1[:, j], a)[None]
                 + np.einsum("kij,pkj->pki", c.beta[:, j], u) + np.einsum("kij,kj->ki", c.beta1[:, j], b)[None])
        PG = P + Gam[:, j]
        Kp[:, :, j] = (np.einsum("kij,pkj->pki", PG, inner) + np.einsum("kij,pkj->pki", Gam[:, j], X)
                       + phi.theta[None, :, j])
    return AdjointPath(Y=Y, Z=Z, K=Kp)


def stationarity_terms(prob: ValidatedProblem, adj: AdjointPath, u):
    """B'Y + D'Z + sum nu beta'K + R u per path/node (without the gamma or
    mean-field expectation term)."""
    c = prob.nodes
    S = np.einsum("kji,pkj->pki", c.B, adj.Y) + np.einsum("kji,pkj->pki", c.D, adj.Z)
    if prob.K:
        S = S + np.einsum("j,tjki,ptjk->pti", prob.nu, c.beta, adj.K)
    return S + np.einsum("kij,pkj->pki", c.R, u)


def solve_phi_meanfield(prob: ValidatedProblem, ric: RiccatiSolution, gains: GainAssembly,
                        mean_x, mean_u, offset_k):
    """Offset of the full mean-field adjoint Y = PX + phi along a feedback
    u = K X + k with E[X] = mean_x, E[u] = mean_u:

        -dphi/dt = (A + A1)'phi + (P A1 + C'P C1 + sum nu alpha'P alpha1) a
                   + (P B1 + C'P D1 + sum nu alpha'P beta1) b + H k
                   + A1'P a + C1'P sigma + sum nu alpha1'P rho + Q1 a,

    where sigma = (C+C1)a + (D+D1)b and rho_j = (alpha_j+alpha1_j)a + (beta_j+beta1_j)b.
    Linear interpolation of the source at half steps.
    """
    c, cm = prob.nodes, prob.mids
    nu = prob.nu
    P = ric.P
    N1 = prob.N + 1
    a, cols = _grid_fn(mean_x, N1, prob.n, "mean_x")
    b, _ = _grid_fn(mean_u, N1, prob.m, "mean_u")
    k, _ = _grid_fn(offset_k, N1, prob.m, "offset")
    a, b, k = _broadcast_cols(a, b, k)
    CT, aT = _T(c.C), _T(c.alpha)
    Wa = P @ c.A1 + CT @ P @ c.C1 + _jsum(nu, aT @ P[:, None] @ c.alpha1)
    Wb = P @ c.B1 + CT @ P @ c.D1 + _jsum(nu, aT @ P[:, None] @ c.beta1)
    sigma = (c.C + c.C1) @ a + (c.D + c.D1) @ b
    s = Wa @ a + Wb @ b + gains.H @ k + _T(c.A1) @ P @ a + _T(c.C1) @ P @ sigma + c.Q1 @ a
    for j in range(prob.K):
        rho = (c.alpha[:, j] + c.alpha1[:, j]) @ a + (c.beta[:, j] + c.beta1[:, j]) @ b
        s = s + nu[j] * _T(c.alpha1[:, j]) @ P @ rho
    Mh = _T(c.A + c.A1)
    Mh_m = _T(cm.A + cm.A1)
    phi = backward_linear(Mh, Mh_m, s, _mid(s), prob.dt)
    return phi if cols else phi[..., 0]


def write_phi_csv(path, phi: PhiSolution, header=None):
    from .io import write_table
    n = phi.phi.shape[1]
    write_table(path, ["t"] + [f"phi_{i + 1}" for i in range(n)],
                np.hstack([phi.t[:, None], phi.phi]), header)
