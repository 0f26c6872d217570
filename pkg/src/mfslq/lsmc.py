"""Least-squares Monte Carlo tier for coefficients that depend on W(t).

Experimental. Backward in time, per step k:

    E_k Y   ~ projection of Y = P(t_{k+1}) on the basis at W(t_k)
    Lam_k   ~ projection of (Y - E_k Y) dW_k / h
    Gam_k,j ~ projection of (Y - E_k Y) dN~_k,j / (nu_j h)

then one RK4 step of the Riccati equation from E_k Y with Lam, Gam and the
path value W(t_k) frozen over the step. With coefficients that do not
depend on W every regression reproduces a constant, so the scheme collapses
to the deterministic RK4 up to rounding.
"""
from __future__ import annotations

import numpy as np

from .errors import RegressionIllConditioned
from .model import ValidatedProblem
from .riccati import RiccatiSolution, _sym, compute_gains, riccati_rhs, theta_N_H
from .simulate import DEFAULT_SEED, NoiseBundle

GRAM_COND_MAX = 1e12


def poly_basis(degree=2):
    def f(t, w):
        return np.stack([w ** p for p in range(degree + 1)], axis=-1)
    f.labels = [f"W^{p}" for p in range(degree + 1)]
    return f


def make_basis(spec):
    """None -> (1, W, W^2); int -> polynomial degree; callable (t, w) -> (P, q)."""
    if spec is None:
        return poly_basis(2)
    if isinstance(spec, (int, np.integer)):
        return poly_basis(int(spec))
    if callable(spec):
        return spec
    raise ValueError(f"unsupported basis spec {spec!r}")


class Regressor:
    """Least squares on a fixed design, reused for every target at one step.

    Columns with zero spread (W(0) = 0, so W and W^2 vanish at the first
    node) are dropped; the constant column is kept.
    """

    def __init__(self, Phi, where=0):
        Phi = np.asarray(Phi, dtype=float)
        spread = Phi.std(axis=0)
        keep = (spread > 1e-12 * np.maximum(1.0, np.abs(Phi).max(axis=0)))
        const = np.all(Phi == Phi[:1], axis=0) & (np.abs(Phi[0]) > 0)
        if np.any(const):
            keep[np.argmax(const)] = True
        self.keep = keep
        X = Phi[:, keep]
        scale = np.sqrt((X ** 2).mean(axis=0))
        scale[scale == 0] = 1.0
        X = X / scale
        self.X = X
        s = np.linalg.svd(X, compute_uv=False)
        cond = float((s[0] / s[-1]) ** 2) if s[-1] > 0 else np.inf
        self.cond = cond
        if cond > GRAM_COND_MAX:
            raise RegressionIllConditioned(f"basis Gram matrix is ill conditioned at node {where}: "
                                           f"cond = {cond:.3g}", node=where, cond=cond)
        self.Q, self.R = np.linalg.qr(X)

    def fit(self, Y):
        """Fitted values of Y (P, ...) on the design."""
        shp = Y.shape
        Y2 = Y.reshape(shp[0], -1)
        return (self.Q @ (self.Q.T @ Y2)).reshape(shp)


def _paths(prob, n_paths, seed):
    noise = NoiseBundle(prob.grid, prob.spec.jumps, n_paths, seed)
    dW, dN = noise.increments()
    W = np.vstack([np.zeros((1, n_paths)), np.cumsum(dW, axis=0)])
    return noise, W, dW, dN - prob.nu * prob.dt


def _snap(prob, t, w):
    """Coefficients at time t for each path value w (P,)."""
    return prob.sample_at(np.array([t]), np.asarray(w, dtype=float)[None]).index(0)


def riccati_lsmc(prob: ValidatedProblem, basis=None, n_paths: int = 2000, seed: int = DEFAULT_SEED,
                 threads=None) -> RiccatiSolution:
    """Regressed Riccati tier (experimental; residual reported, not certified)."""
    f = make_basis(basis)
    Nst, h, n, K = prob.N, prob.dt, prob.n, prob.K
    nu = prob.nu
    t = prob.grid.nodes
    _, W, dW, dNc = _paths(prob, n_paths, seed)
    Pp = np.empty((Nst + 1, n_paths, n, n))
    Lp = np.zeros((Nst + 1, n_paths, n, n))
    Gp = np.zeros((Nst + 1, n_paths, K, n, n))
    Pp[Nst] = prob.G
    conds = np.zeros(Nst)
    for k in range(Nst - 1, -1, -1):
        reg = Regressor(f(t[k], W[k]), where=k)
        conds[k] = reg.cond
        Y = Pp[k + 1]
        EY = _sym(reg.fit(Y))
        dev = Y - EY
        Lam = _sym(reg.fit(dev * dW[k][:, None, None]) / h)
        Gam = np.zeros((n_paths, K, n, n))
        for j in range(K):
            Gam[:, j] = _sym(reg.fit(dev * dNc[k, :, j][:, None, None]) / (nu[j] * h))
        c1, cm, c0 = _snap(prob, t[k + 1], W[k]), _snap(prob, 0.5 * (t[k] + t[k + 1]), W[k]), _snap(prob, t[k], W[k])
        k1 = riccati_rhs(c1, EY, Lam, Gam, index_offset=k, checks=False)
        k2 = riccati_rhs(cm, EY - 0.5 * h * k1, Lam, Gam, index_offset=k, checks=False)
        k3 = riccati_rhs(cm, EY - 0.5 * h * k2, Lam, Gam, index_offset=k, checks=False)
        k4 = riccati_rhs(c0, EY - h * k3, Lam, Gam, index_offset=k, checks=False)
        Pp[k] = _sym(EY - h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        Lp[k], Gp[k] = Lam, Gam
    # diagnostics: positivity and the step-consistency residual
    eigP = np.linalg.eigvalsh(Pp)[..., 0]
    pos = np.inf
    resid = np.zeros(Nst)
    for k in range(Nst):
        c = _snap(prob, t[k], W[k])
        Theta, _, _ = theta_N_H(c, Pp[k], Lp[k], Gp[k])
        pos = min(pos, float(np.linalg.eigvalsh(-_sym(Theta))[..., 0].min()))
        drift = riccati_rhs(c, Pp[k], Lp[k], Gp[k], checks=False)
        mart = Lp[k] * dW[k][:, None, None] + np.einsum("pjab,pj->pab", Gp[k], dNc[k])
        e = Pp[k + 1] - Pp[k] - drift * h - mart
        resid[k] = float(np.sqrt((e ** 2).sum(axis=(1, 2)).mean() / h))
    return RiccatiSolution(
        tier="regressed", t=t, P=Pp.mean(axis=1), Lam=Lp.mean(axis=1), Gam=Gp.mean(axis=1),
        positivity=pos, min_eig_P=float(eigP.min()),
        diagnostics=dict(n_paths=n_paths, seed=seed, gram_cond_max=float(conds.max(initial=0.0)),
                         step_residual=resid, step_residual_max=float(resid.max(initial=0.0)),
                         P_spread=float(np.abs(Pp - Pp.mean(axis=1, keepdims=True)).max())),
        paths=dict(W=W, P=Pp, Lam=Lp, Gam=Gp, dW=dW, dNc=dNc),
    )


def solve_phi_lsmc(prob: ValidatedProblem, ric: RiccatiSolution, a=None, b=None, lam=None, gam=None,
                   basis=None):
    """Offset equation in the regressed tier, on the paths stored in ``ric``
    (explicit backward Euler with regressed psi, theta). Experimental.

        -dphi = (M_hat phi + N_hat psi + sum nu K_hat theta + L_hat a + Q_hat b
                 + lam + H Theta^{-1} gam) dt - psi dW - theta dN~

    Returns per-path arrays phi (N+1, P, n), psi, theta (N+1, P, K, n).
    """
    if ric.paths is None:
        raise ValueError("solve_phi_lsmc needs a regressed Riccati solution")
    f = make_basis(basis)
    Nst, h, n, m, K = prob.N, prob.dt, prob.n, prob.m, prob.K
    nu = prob.nu
    t = prob.grid.nodes
    W, dW, dNc = ric.paths["W"], ric.paths["dW"], ric.paths["dNc"]
    Pn = W.shape[1]

    def grid(x, d):
        x = 0.0 if x is None else np.asarray(x, dtype=float)
        return np.broadcast_to(x, (Nst + 1, d)) if np.ndim(x) == 0 else x.reshape(Nst + 1, d)

    a, b, lam, gam = grid(a, n), grid(b, m), grid(lam, n), grid(gam, m)
    phi = np.zeros((Nst + 1, Pn, n))
    psi = np.zeros((Nst + 1, Pn, n))
    theta = np.zeros((Nst + 1, Pn, K, n))
    for k in range(Nst - 1, -1, -1):
        reg = Regressor(f(t[k], W[k]), where=k)
        Y = phi[k + 1]
        EY = reg.fit(Y)
        dev = Y - EY
        ps = reg.fit(dev * dW[k][:, None]) / h
        th = np.zeros((Pn, K, n))
        for j in range(K):
            th[:, j] = reg.fit(dev * dNc[k, :, j][:, None]) / (nu[j] * h)
        c = _snap(prob, t[k], W[k])
        g = compute_gains(c, ric.paths["P"][k], ric.paths["Lam"][k], ric.paths["Gam"][k])
        drv = (g.M_hat @ EY[..., None] + g.N_hat @ ps[..., None] + g.L_hat @ a[k][:, None]
               + g.Q_hat @ b[k][:, None] + lam[k][:, None] + g.H @ g.Theta_inv @ gam[k][:, None])[..., 0]
        if K:
            drv = drv + np.einsum("j,pjab,pjb->pa", nu, g.K_hat, th)
        phi[k] = EY + h * drv
        psi[k], theta[k] = ps, th
    return phi, psi, theta
