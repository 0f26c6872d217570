"""Certificates for a computed solution.

  stationarity   path-wise first-order condition through the decoupled adjoint
  perturbation   J(u* + eps v) - J(u*) under common random numbers
  dual           the dual-value expansion against the primal cost
  constraints    E[X] = a*, E[u] = b* from the mean ODE and from Monte Carlo
  oracle         exact optimum of the Euler scheme on a finite scenario tree

Thresholds live in DEFAULT_THRESHOLDS and are copied into every report.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, onenormest, splu

from .bsde import PhiSolution, reconstruct_adjoint, solve_phi_deterministic, solve_phi_meanfield, stationarity_terms, assemble_offset_M
from .errors import DiscretizationMismatch, GridMismatch, InputError, ModeUnsupported, TreeTooLarge
from .model import ProblemSpec, ValidatedProblem, validate_problem
from .riccati import _T, assemble_gains, solve_riccati_deterministic
from .simulate import (DEFAULT_SEED, ControlPath, FeedbackLaw, NoiseBundle, feedback_mean, monte_carlo,
                       pairwise_mean, per_path_cost, simulate_state, summarize)

MAX_SCENARIOS = 4 ** 8
ORACLE_LADDER = (4, 8, 16)

DEFAULT_THRESHOLDS = {
    "stationarity_plain": 1e-6,        # no mean-field terms
    "stationarity_meanfield": 1e-4,
    "perturbation_se_mult": 3.0,
    "dual_se_mult": 3.0,
    "dual_dt_mult": 10.0,
    "constraint_ode": 1e-6,
    "constraint_mc_se_mult": 3.0,
    "oracle_gap_max": 0.05,
    "oracle_gap_ratio_min": 1.5,
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    thresholds: dict
    values: dict

    def to_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "thresholds": self.thresholds,
                "values": self.values}


@dataclass
class VerificationReport:
    checks: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c.passed for c in self.checks.values())

    def add(self, res: CheckResult):
        self.checks[res.name] = res
        return res

    def to_dict(self):
        return {"passed": self.passed, "checks": {k: v.to_dict() for k, v in self.checks.items()}}

    def summary_lines(self):
        out = []
        for name, c in self.checks.items():
            key = c.values.get("headline")
            val = "" if key is None else f"  {key[0]} = {key[1]:.3e} (limit {key[2]:.3e})"
            out.append(f"{name:<14} {'PASS' if c.passed else 'FAIL'}{val}")
        return out


def _norm_ratio(num, den):
    if den > 0:
        return num / den
    return 0.0 if num == 0 else float(num)


# ---------------------------------------------------------------- stationarity

def stationarity_residual(prob: ValidatedProblem, sol, paths, form: str = "both"):
    """Residual of the first-order condition along simulated paths.

    form "sub1": B'Y + D'Z + sum nu beta'K + gamma* + R u with the adjoint
    of the multiplier problem (Y = PX + phi(a*, b*, lam*, gam*)).
    form "meanfield": B'Y + D'Z + sum nu beta'K + R u + E[B1'Y + D1'Z +
    sum nu beta1'K + R1 u] with the mean-field adjoint Y = PX + phi_mf.
    Normalized by max |R u|.
    """
    N1 = prob.N + 1
    if paths.X.shape[1] != N1:
        raise GridMismatch(f"paths have {paths.X.shape[1]} nodes, problem grid has {N1}")
    ric, gains = sol.ric, sol.gains
    c = prob.nodes
    u = paths.u
    Ru = np.einsum("kij,pkj->pki", c.R, u)
    scale = float(np.abs(Ru).max())
    out = {"scale_Ru": scale}
    forms = ("sub1", "meanfield") if form == "both" else (form,)
    for f in forms:
        if f == "sub1":
            adj = reconstruct_adjoint(prob, ric, gains, sol.phi, paths)
            S = stationarity_terms(prob, adj, u) + sol.gam[None]
        else:
            ex, eu = sol.mean_state, sol.mean_control
            phi_mf = solve_phi_meanfield(prob, ric, gains, ex, eu, sol.offset)
            zero_n, zero_m = np.zeros_like(ex), np.zeros_like(eu)
            ph = PhiSolution(t=prob.grid.nodes, phi=phi_mf, psi=zero_n, theta=np.zeros((N1, prob.K, prob.n)),
                             a=ex, b=eu, lam=zero_n, gam=zero_m)
            adj = reconstruct_adjoint(prob, ric, gains, ph, paths, a=ex, b=eu)
            P = ric.P
            sig = (c.C + c.C1) @ ex[..., None] + (c.D + c.D1) @ eu[..., None]
            E = _T(c.B1) @ (P @ ex[..., None] + phi_mf[..., None]) + _T(c.D1) @ P @ sig + c.R1 @ eu[..., None]
            for j in range(prob.K):
                rho = ((c.alpha[:, j] + c.alpha1[:, j]) @ ex[..., None]
                       + (c.beta[:, j] + c.beta1[:, j]) @ eu[..., None])
                E = E + prob.nu[j] * _T(c.beta1[:, j]) @ P @ rho
            S = stationarity_terms(prob, adj, u) + E[None, ..., 0]
        absS = np.abs(S).max(axis=2)
        out[f] = {
            "max_abs": float(absS.max()),
            "normalized_max": _norm_ratio(float(absS.max()), scale),
            "per_node_max": absS.max(axis=0),
            "per_node_mean": absS.mean(axis=0),
        }
    return out


# ---------------------------------------------------------------- perturbation

def _bilinear(prob, X1, U1, X2, U2, m1, m2):
    """Per-path symmetric bilinear form of the cost (left-endpoint rule)
    plus the deterministic mean terms built from m1 = (xbar1, ubar1)."""
    c, h = prob.nodes, prob.dt
    v = (np.einsum("pki,kij,pkj->p", X1[:, :-1], c.Q[:-1], X2[:, :-1])
         + np.einsum("pki,kij,pkj->p", U1[:, :-1], c.R[:-1], U2[:, :-1])) * h
    v = v + np.einsum("pi,ij,pj->p", X1[:, -1], prob.G, X2[:, -1])
    (a1, b1), (a2, b2) = m1, m2
    det = h * (np.einsum("ki,kij,kj->", a1[:-1], c.Q1[:-1], a2[:-1])
               + np.einsum("ki,kij,kj->", b1[:-1], c.R1[:-1], b2[:-1]))
    mag = (np.einsum("pki,kij,pkj->p", np.abs(X1[:, :-1]), np.abs(c.Q[:-1]), np.abs(X2[:, :-1]))
           + np.einsum("pki,kij,pkj->p", np.abs(U1[:, :-1]), np.abs(c.R[:-1]), np.abs(U2[:, :-1]))) * h
    return v + det, mag


def random_direction(prob, W, j, seed=DEFAULT_SEED):
    """Bounded adapted direction v = d(t) + e(t) tanh(W(t)); d, e are random
    low-frequency cosine series. W: (N+1, P). Returns (P, N+1, m)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919, int(j)]))
    s = prob.grid.nodes / prob.grid.T
    F = np.cos(np.pi * np.outer(s, np.arange(3))) / (1.0 + np.arange(3))     # (N+1, 3)
    d = F @ rng.standard_normal((3, prob.m))
    e = F @ rng.standard_normal((3, prob.m))
    return d[None] + e[None] * np.tanh(W.T)[..., None]


def perturbation_gap(prob: ValidatedProblem, sol, n_directions: int = 20,
                     epsilons=(0.1, -0.1, 0.01, -0.01), noise: NoiseBundle | None = None,
                     n_paths: int = 10000, seed: int = DEFAULT_SEED, se_mult: float = 3.0,
                     directions=None):
    """Perturbation table. The base control u* is the realized feedback
    control on ``noise``; the perturbed controls u* + eps v are open loop
    with the sample-mean closure, so every cell uses the same paths.

    J(u* + eps v) - J(u*) = eps c + eps^2 a holds exactly per path because
    the scheme is linear in the control, so the cells are computed from the
    response dX to v (simulated once per direction) instead of differencing
    two costs of size O(1). One cell is replayed directly as a check.
    """
    noise = noise or NoiseBundle(prob.grid, prob.spec.jumps, n_paths, seed)
    law = sol.feedback_law()
    base = simulate_state(prob, ControlPath.feedback(law), noise)
    ustar = base.u
    replay = simulate_state(prob, ControlPath.open_loop(ustar), noise)
    W = noise.brownian()
    prob0 = prob.with_x0(np.zeros(prob.n))
    X0, U0 = replay.X, replay.u
    m0 = (replay.mean_state, replay.mean_control)
    eps = np.asarray(epsilons, dtype=float)
    Pn = X0.shape[0]
    fp_eps = np.finfo(float).eps * np.sqrt(prob.N + 1)
    rows, fits = [], []
    ok = True
    for j in range(n_directions):
        v = random_direction(prob, W, j, seed) if directions is None else directions[j]
        resp = simulate_state(prob0, ControlPath.open_loop(v), noise)
        m1 = (resp.mean_state, resp.mean_control)
        cross, mag_c = _bilinear(prob, X0, U0, resp.X, resp.u, m0, m1)
        quad, mag_q = _bilinear(prob, resp.X, resp.u, resp.X, resp.u, m1, m1)
        ci, ai = 2 * cross, quad
        c_hat = float(pairwise_mean(ci))
        a_hat = float(pairwise_mean(ai))
        se_c_mc = float(np.std(ci, ddof=1) / np.sqrt(Pn)) if Pn > 1 else 0.0
        se_c_fp = float(8 * fp_eps * pairwise_mean(2 * mag_c))
        se_c = float(np.hypot(se_c_mc, se_c_fp))
        for e in eps:
            dj = e * ci + e * e * ai
            est = summarize(dj)
            se_fp = float(8 * fp_eps * pairwise_mean(abs(e) * 2 * mag_c + e * e * mag_q))
            se = float(np.hypot(est.std_error, se_fp))
            cell_ok = est.value >= -se_mult * se
            ok &= bool(cell_ok)
            rows.append({"direction": j, "eps": float(e), "dJ": est.value, "se": se, "passed": bool(cell_ok)})
        # least-squares fit of the cell means on (eps^2, eps)
        means = np.array([r["dJ"] for r in rows[-len(eps):]])
        coef, *_ = np.linalg.lstsq(np.stack([eps ** 2, eps], axis=1), means, rcond=None)
        c_ok = abs(coef[1]) <= se_mult * se_c
        ok &= bool(c_ok) and bool(coef[0] >= -se_mult * float(np.std(ai, ddof=1) / np.sqrt(Pn)) if Pn > 1 else True)
        fits.append({"direction": j, "a": float(coef[0]), "c": float(coef[1]), "se_c": se_c,
                     "se_c_mc": se_c_mc, "se_c_fp": se_c_fp, "a_pathwise": a_hat, "c_pathwise": c_hat,
                     "passed": bool(c_ok)})
    # direct replay of one cell
    v0 = random_direction(prob, W, 0, seed) if directions is None else directions[0]
    e0 = float(eps[0])
    pert = simulate_state(prob, ControlPath.open_loop(ustar + e0 * v0), noise)
    J1 = per_path_cost(prob, pert)
    J0 = per_path_cost(prob, replay)
    direct = float(pairwise_mean(J1 - J0))
    linear = next(r["dJ"] for r in rows if r["direction"] == 0 and r["eps"] == e0)
    return {
        "passed": bool(ok), "cells": rows, "fits": fits, "n_paths": Pn, "se_mult": se_mult,
        "replay_check": {"direct": direct, "linear_response": linear, "abs_diff": abs(direct - linear)},
        "J_base": float(pairwise_mean(J0)),
    }


# ---------------------------------------------------------------- dual value

def dual_value_check(prob: ValidatedProblem, ops=None, x0=None, a=0.0, b=0.0, lam=0.0, gam=0.0,
                     n_paths: int = 100000, seed: int = DEFAULT_SEED, ric=None, gains=None,
                     se_mult: float = 3.0, dt_mult: float = 10.0):
    """Compare the multiplier-problem cost at its feedback minimizer (i) with
    the dual expansion (ii):

      G X_T.X_T + int [ QX.X + Q1 a.a + R1 b.b + 2 lam.(X - a) - 2 gam.b
                        - gam'R^{-1}gam + S'R^{-1}S ],  S = B'Y + D'Z + sum nu beta'K,

    evaluated per path with (Y, Z, K) from the decoupling. (i) charges the
    multipliers against the ODE means. Both use the left-endpoint rule on
    the same paths.
    """
    if not prob.deterministic:
        raise ModeUnsupported("dual_value_check needs deterministic coefficients")
    if ops is not None:
        ric, gains = ops.ric, ops.gains
    if x0 is not None:
        prob = prob.with_x0(x0)
    ric = ric or solve_riccati_deterministic(prob)
    gains = gains or assemble_gains(prob, ric)
    N1, n, m, h = prob.N + 1, prob.n, prob.m, prob.dt

    def grid(v, d):
        v = np.asarray(v, dtype=float)
        return np.broadcast_to(v, (N1, d)).copy() if v.ndim == 0 else v.reshape(N1, d)

    a, b, lam, gam = grid(a, n), grid(b, m), grid(lam, n), grid(gam, m)
    phi = solve_phi_deterministic(prob, gains, a, b, lam, gam)
    M = assemble_offset_M(prob, gains, ric, phi)
    offset = np.einsum("kij,kj->ki", gains.Theta_inv, M)
    law0 = FeedbackLaw(gains.K, offset)
    ex, eu = feedback_mean(prob, law0, (a, b))
    law = FeedbackLaw(gains.K, offset, ex, eu)
    noise = NoiseBundle(prob.grid, prob.spec.jumps, n_paths, seed)
    c = prob.nodes
    Rinv = np.linalg.inv(c.R)

    def block(pb):
        Ji = per_path_cost(prob, pb, (a, b), (lam, gam))
        adj = reconstruct_adjoint(prob, ric, gains, phi, pb)
        S = stationarity_terms(prob, adj, np.zeros_like(pb.u))       # without R u
        X = pb.X
        v = np.einsum("pki,kij,pkj->p", X[:, :-1], c.Q[:-1], X[:, :-1])
        v += np.einsum("pki,kij,pkj->p", S[:, :-1], Rinv[:-1], S[:, :-1])
        v += 2 * np.einsum("ki,pki->p", lam[:-1], X[:, :-1] - a[None, :-1])
        det = (np.einsum("ki,kij,kj->", a[:-1], c.Q1[:-1], a[:-1]) + np.einsum("ki,kij,kj->", b[:-1], c.R1[:-1], b[:-1])
               - 2 * np.sum(gam[:-1] * b[:-1]) - np.einsum("ki,kij,kj->", gam[:-1], Rinv[:-1], gam[:-1]))
        Jii = h * (v + det) + np.einsum("pi,ij,pj->p", X[:, -1], prob.G, X[:, -1])
        return Ji, Jii

    from .simulate import simulate_blocks
    parts = simulate_blocks(prob, ControlPath.feedback(law), noise, block, mean_inputs=(a, b))
    Ji = np.concatenate([p[0] for p in parts])
    Jii = np.concatenate([p[1] for p in parts])
    e1, e2 = summarize(Ji), summarize(Jii)
    gap = abs(e1.value - e2.value)
    se = float(np.hypot(e1.std_error, e2.std_error))
    scale = max(1.0, abs(e1.value))
    limit = se_mult * se + dt_mult * h * scale
    return {"primal": e1.value, "primal_se": e1.std_error, "dual": e2.value, "dual_se": e2.std_error,
            "gap": gap, "combined_se": se, "limit": limit, "passed": bool(gap <= limit),
            "paired_diff_se": float(summarize(Ji - Jii).std_error), "n_paths": n_paths}


# ---------------------------------------------------------------- constraints

def constraint_check(prob: ValidatedProblem, sol, n_paths: int = 100000, seed: int = DEFAULT_SEED,
                     ode_tol: float = 1e-6, se_mult: float = 3.0, threads=None):
    """Mean constraints at the solution: recomputed ODE means (same scheme as
    the solver, from a freshly solved phi), an independent RK4 of the
    closed-loop mean ODE with interpolated gain/offset, and Monte Carlo."""
    from .meanfield import closed_loop_mean
    phi = solve_phi_deterministic(prob, sol.gains, sol.a, sol.b, sol.lam, sol.gam)
    X, U = closed_loop_mean(prob, sol.gains, sol.ric, phi)
    rx = float(np.abs(X - sol.a).max())
    ru = float(np.abs(U - sol.b).max())
    Xf, Uf = feedback_mean(prob, FeedbackLaw(sol.gain, sol.offset))
    alt = float(max(np.abs(Xf - sol.a).max(), np.abs(Uf - sol.b).max()))
    out = {"ode_state": rx, "ode_control": ru, "ode_tol": ode_tol,
           "matches_solver": float(max(abs(rx - sol.diagnostics.get("constraint_residual_state", rx)),
                                       abs(ru - sol.diagnostics.get("constraint_residual_control", ru)))),
           "interpolated_feedback_ode": alt}
    ok = rx <= ode_tol and ru <= ode_tol
    if n_paths:
        noise = NoiseBundle(prob.grid, prob.spec.jumps, n_paths, seed)
        st = monte_carlo(prob, ControlPath.feedback(sol.feedback_law()), noise, threads=threads)
        zx = np.abs(st.mean_state - sol.a) / np.maximum(st.se_state, 1e-300)
        zu = np.abs(st.mean_control - sol.b) / np.maximum(st.se_control, 1e-300)
        # nodes with zero spread (t = 0) compare exactly
        zx[st.se_state == 0] = np.where(np.abs(st.mean_state - sol.a)[st.se_state == 0] > 1e-9, np.inf, 0.0)
        zu[st.se_control == 0] = np.where(np.abs(st.mean_control - sol.b)[st.se_control == 0] > 1e-9, np.inf, 0.0)
        out.update(mc_n_paths=n_paths, mc_max_z_state=float(zx.max()), mc_max_z_control=float(zu.max()),
                   mc_se_mult=se_mult, mc_cost=st.cost.value, mc_cost_se=st.cost.std_error)
        ok = ok and zx.max() <= se_mult and zu.max() <= se_mult
    out["passed"] = bool(ok)
    return out


# ---------------------------------------------------------------- scenario tree

class ScenarioTree:
    """Euler scheme on a recombination-free tree: per step the Brownian
    increment is +-sqrt(h) and (at most one mark) a jump happens with
    probability nu h. Nodes at depth d are numbered 0..b^d - 1 and child
    o of node i is i*b + o."""

    def __init__(self, prob: ValidatedProblem, n_steps: int):
        if not prob.deterministic:
            raise ModeUnsupported("the scenario-tree oracle needs deterministic coefficients")
        if prob.K > 1:
            raise ModeUnsupported(f"the scenario-tree oracle supports at most one mark, got {prob.K}")
        n_steps = int(n_steps)
        if n_steps < 1:
            raise InputError("n_steps must be >= 1")
        self.prob = prob.with_grid(n_steps) if prob.N != n_steps else prob
        p = self.prob
        h = p.dt
        outs = [(s * np.sqrt(h), 0.0, 0.5) for s in (1.0, -1.0)]
        if p.K:
            q = float(p.nu[0] * h)
            if q > 1:
                raise InputError(f"jump probability nu*dt = {q:.3g} exceeds 1; use more steps")
            outs = [(w, jmp - q, pw * (q if jmp else 1 - q)) for (w, _, pw) in outs for jmp in (0.0, 1.0)]
        self.outcomes = outs
        self.b = len(outs)
        self.n_steps = n_steps
        self.scenarios = self.b ** n_steps
        if self.scenarios > MAX_SCENARIOS:
            raise TreeTooLarge(f"scenario tree with {n_steps} steps has {self.scenarios} scenarios "
                               f"(limit {MAX_SCENARIOS})", scenarios=self.scenarios, limit=MAX_SCENARIOS)
        self.q = np.array([o[2] for o in outs])
        self.dw = np.array([o[0] for o in outs])
        self.dn = np.array([o[1] for o in outs])
        self.probs = [np.ones(1)]
        for d in range(n_steps):
            self.probs.append(np.outer(self.probs[-1], self.q).ravel())

    def describe(self):
        return {"n_steps": self.n_steps, "branching": self.b, "scenarios": self.scenarios,
                "brownian": "+-sqrt(dt), prob 1/2 each", "jump_outcomes_per_step": 2 if self.prob.K else 0,
                "outcomes": [{"dW": float(w), "dN_compensated": float(dn), "prob": float(q)}
                             for w, dn, q in self.outcomes]}

    def step_maps(self, d):
        """Per outcome o: X_child = FX[o] X + Fu[o] u + Fa[o] abar + Fb[o] bbar."""
        c = self.prob.nodes.index(d)
        h = self.prob.dt
        n = self.prob.n
        FX, Fu, Fa, Fb = [], [], [], []
        for w, dn, _ in self.outcomes:
            fx = np.eye(n) + h * c.A + w * c.C
            fu = h * c.B + w * c.D
            fa = h * c.A1 + w * c.C1
            fb = h * c.B1 + w * c.D1
            if self.prob.K:
                fx = fx + dn * c.alpha[0]
                fu = fu + dn * c.beta[0]
                fa = fa + dn * c.alpha1[0]
                fb = fb + dn * c.beta1[0]
            FX.append(fx), Fu.append(fu), Fa.append(fa), Fb.append(fb)
        return np.array(FX), np.array(Fu), np.array(Fa), np.array(Fb)

    def forward(self, control):
        """Exact tree expectation of the cost for a control given as
        control(d, X_d) -> u_d (node arrays). Returns (cost, X list, u list)."""
        p = self.prob
        c, h = p.nodes, p.dt
        X = [p.x0[None].copy()]
        U = []
        cost = 0.0
        for d in range(self.n_steps):
            x = X[d]
            u = np.asarray(control(d, x), dtype=float).reshape(len(x), p.m)
            U.append(u)
            pr = self.probs[d]
            abar, bbar = pr @ x, pr @ u
            cost += h * (pr @ np.einsum("ni,ij,nj->n", x, c.Q[d], x) + pr @ np.einsum("ni,ij,nj->n", u, c.R[d], u)
                         + abar @ c.Q1[d] @ abar + bbar @ c.R1[d] @ bbar)
            FX, Fu, Fa, Fb = self.step_maps(d)
            child = (np.einsum("oij,nj->noi", FX, x) + np.einsum("oij,nj->noi", Fu, u)
                     + (Fa @ abar + Fb @ bbar)[None])
            X.append(child.reshape(-1, p.n))
        xT = X[-1]
        cost += self.probs[-1] @ np.einsum("ni,ij,nj->n", xT, p.G, xT)
        return float(cost), X, U


@dataclass
class OracleResult:
    cost: float
    controls: list            # per depth: (b^d, m)
    states: list              # per depth: (b^d, n)
    tree: dict
    condition: float
    n_variables: int
    runtime: float
    method: str = "sparse-kkt"


def _kkt(tree: ScenarioTree):
    """Sparse KKT system in probability-scaled variables xs = sqrt(p) X,
    us = sqrt(p) u (keeps every block O(1)); means abar, bbar unscaled."""
    p = tree.prob
    c, h = p.nodes, p.dt
    n, m, k, bb = p.n, p.m, tree.n_steps, tree.b
    sizes = [bb ** d for d in range(k + 1)]
    # variable offsets
    off, pos = {}, 0
    for d in range(k + 1):
        off[("x", d)] = pos
        pos += sizes[d] * n
    for d in range(k):
        off[("u", d)] = pos
        pos += sizes[d] * m
    for d in range(k):
        off[("a", d)] = pos
        pos += n
        off[("b", d)] = pos
        pos += m
    nv = pos
    # objective z'Hz
    Hb = []

    def put(blocks, r0, c0, M, rows_list):
        M = sp.coo_matrix(M)
        rows_list.append((M.row + r0, M.col + c0, M.data))

    hb = []
    for d in range(k):
        Id = sp.identity(sizes[d], format="csr")
        put(None, off[("x", d)], off[("x", d)], sp.kron(Id, h * c.Q[d]), hb)
        put(None, off[("u", d)], off[("u", d)], sp.kron(Id, h * c.R[d]), hb)
        put(None, off[("a", d)], off[("a", d)], h * c.Q1[d], hb)
        put(None, off[("b", d)], off[("b", d)], h * c.R1[d], hb)
    put(None, off[("x", k)], off[("x", k)], sp.kron(sp.identity(sizes[k]), p.G), hb)
    r = np.concatenate([t[0] for t in hb])
    cc = np.concatenate([t[1] for t in hb])
    v = np.concatenate([t[2] for t in hb])
    H = sp.csr_matrix((v, (r, cc)), shape=(nv, nv))
    # constraints
    eq, rhs, row = [], [], 0
    mrows = []
    put(None, 0, off[("x", 0)], np.eye(n), eq)
    rhs.append(p.x0)
    row += n
    for d in range(k):
        FX, Fu, Fa, Fb = tree.step_maps(d)
        sq = np.sqrt(tree.q)
        pc = np.sqrt(tree.probs[d + 1])
        nd = sizes[d]
        # child rows: xs_c - sqrt(q_o)(FX xs_i + Fu us_i) - sqrt(p_c)(Fa abar + Fb bbar) = 0
        ch0 = off[("x", d + 1)]
        put(None, row, ch0, sp.identity(nd * bb * n), eq)
        blkX = sp.kron(sp.identity(nd), sp.vstack([sq[o] * sp.csr_matrix(FX[o]) for o in range(bb)]))
        blkU = sp.kron(sp.identity(nd), sp.vstack([sq[o] * sp.csr_matrix(Fu[o]) for o in range(bb)]))
        put(None, row, off[("x", d)], -blkX, eq)
        put(None, row, off[("u", d)], -blkU, eq)
        pcn = np.repeat(pc, n)
        FaS = np.vstack([Fa[o] for o in range(bb)] * nd)       # rows ordered (node, outcome, comp)
        FbS = np.vstack([Fb[o] for o in range(bb)] * nd)
        put(None, row, off[("a", d)], -pcn[:, None] * FaS, eq)
        put(None, row, off[("b", d)], -pcn[:, None] * FbS, eq)
        rhs.append(np.zeros(nd * bb * n))
        row += nd * bb * n
        # mean rows: abar - sum sqrt(p_i) xs_i = 0
        sp_d = np.sqrt(tree.probs[d])
        mrows.extend(range(row, row + n + m))
        put(None, row, off[("a", d)], np.eye(n), eq)
        put(None, row, off[("x", d)], -sp.kron(sp.csr_matrix(sp_d[None]), sp.identity(n)), eq)
        rhs.append(np.zeros(n))
        row += n
        put(None, row, off[("b", d)], np.eye(m), eq)
        put(None, row, off[("u", d)], -sp.kron(sp.csr_matrix(sp_d[None]), sp.identity(m)), eq)
        rhs.append(np.zeros(m))
        row += m
    r = np.concatenate([t[0] for t in eq])
    cc = np.concatenate([t[1] for t in eq])
    v = np.concatenate([t[2] for t in eq])
    E = sp.csr_matrix((v, (r, cc)), shape=(row, nv))
    KKT = sp.bmat([[2 * H, E.T], [E, None]], format="csc")
    b = np.concatenate([np.zeros(nv), np.concatenate(rhs)])
    mvars = np.concatenate([np.arange(off[(s_, d)], off[(s_, d)] + w) for d in range(k)
                            for s_, w in (("a", n), ("b", m))]) if k else np.zeros(0, int)
    small = np.concatenate([mvars, nv + np.asarray(mrows, dtype=int)])
    return KKT, b, H, off, sizes, nv, small


class _BlockSolver:
    """Solve the KKT system by eliminating the tree-local unknowns first.

    The mean variables and their defining rows couple every node of a depth
    and wreck the fill of a direct factorization; without them the system
    is tree structured. The remaining Schur complement has O(k (n + m))
    unknowns and is solved densely.
    """

    def __init__(self, KKT, small):
        n = KKT.shape[0]
        mask = np.ones(n, bool)
        mask[small] = False
        self.big = np.flatnonzero(mask)
        self.small = np.asarray(small)
        self.shape = KKT.shape
        K = KKT.tocsc()
        K0 = K[self.big][:, self.big].tocsc()
        self.C = K[self.big][:, self.small].toarray()
        self.Ct = K[self.small][:, self.big].toarray()
        Dm = K[self.small][:, self.small].toarray()
        self.lu = splu(K0)
        self.K0iC = self.lu.solve(self.C) if self.C.size else self.C
        self.S = Dm - self.Ct @ self.K0iC
        self.Slu = scipy.linalg.lu_factor(self.S) if self.S.size else None

    def solve(self, r, trans="N"):
        if trans != "N":                                   # the KKT matrix is symmetric
            return self.solve(r)
        r = np.asarray(r, dtype=float)
        rb, rs = r[self.big], r[self.small]
        y0 = self.lu.solve(rb)
        ys = scipy.linalg.lu_solve(self.Slu, rs - self.Ct @ y0) if self.Slu is not None else rs[:0]
        out = np.empty_like(r)
        out[self.big] = y0 - self.K0iC @ ys
        out[self.small] = ys
        return out


def dp_oracle(problem, n_steps: int | None = None) -> OracleResult:
    """Exact minimizer of the Euler-discretized cost over all adapted
    controls on the scenario tree (one control per tree node)."""
    prob = validate_problem(problem) if isinstance(problem, ProblemSpec) else problem
    t0 = time.perf_counter()
    tree = ScenarioTree(prob, n_steps or prob.N)
    KKT, rhs, H, off, sizes, nv, small = _kkt(tree)
    lu = _BlockSolver(KKT, small)
    z = lu.solve(rhs)
    try:
        inv = LinearOperator(KKT.shape, matvec=lu.solve, rmatvec=lambda y: lu.solve(y, trans="T"), dtype=float)
        cond = float(onenormest(KKT) * onenormest(inv))
    except Exception:                                      # estimate only
        cond = float("nan")
    x = z[:nv]
    J = float(x @ (H @ x))
    p = tree.prob
    U, X = [], []
    for d in range(tree.n_steps + 1):
        sq = np.sqrt(tree.probs[d])
        xs = x[off[("x", d)]:off[("x", d)] + sizes[d] * p.n].reshape(sizes[d], p.n)
        X.append(xs / sq[:, None])
        if d < tree.n_steps:
            us = x[off[("u", d)]:off[("u", d)] + sizes[d] * p.m].reshape(sizes[d], p.m)
            U.append(us / sq[:, None])
    return OracleResult(cost=J, controls=U, states=X, tree=tree.describe(), condition=cond,
                        n_variables=int(nv), runtime=time.perf_counter() - t0)


def dp_oracle_dense(problem, n_steps: int | None = None) -> OracleResult:
    """Brute-force variant for tiny trees: states as explicit affine maps of
    all controls, cost assembled as a dense quadratic, normal equations
    solved directly. Used to cross-check the sparse KKT."""
    prob = validate_problem(problem) if isinstance(problem, ProblemSpec) else problem
    t0 = time.perf_counter()
    tree = ScenarioTree(prob, n_steps or prob.N)
    p = tree.prob
    n, m, k = p.n, p.m, tree.n_steps
    nu_ = sum(len(tree.probs[d]) for d in range(k)) * m
    if nu_ > 4000:
        raise TreeTooLarge(f"dense oracle limited to 4000 controls, tree has {nu_}", scenarios=tree.scenarios)
    starts = np.cumsum([0] + [len(tree.probs[d]) * m for d in range(k)])
    # affine maps X = Xc + XL z, per depth
    Xc = [p.x0[None].copy()]
    XL = [np.zeros((1, n, nu_))]
    J2 = np.zeros((nu_, nu_))
    J1 = np.zeros(nu_)
    J0 = 0.0
    c, h = p.nodes, p.dt

    def acc(W, pc, Lc, LL, pr=None):
        nonlocal J0, J1, J2
        # sum_i pr_i (Lc_i + LL_i z)' W (Lc_i + LL_i z)
        pr = np.ones(len(Lc)) if pr is None else pr
        J0 += pc * np.einsum("n,ni,ij,nj->", pr, Lc, W, Lc)
        J1 += 2 * pc * np.einsum("n,ni,ij,njz->z", pr, Lc, W, LL)
        J2 += pc * np.einsum("n,niy,ij,njz->yz", pr, LL, W, LL)

    for d in range(k):
        nd = len(tree.probs[d])
        pr = tree.probs[d]
        uL = np.zeros((nd, m, nu_))
        for i in range(nd):
            for j in range(m):
                uL[i, j, starts[d] + i * m + j] = 1.0
        uc = np.zeros((nd, m))
        acc(c.Q[d], h, Xc[d], XL[d], pr)
        acc(c.R[d], h, uc, uL, pr)
        ac, aL = pr @ Xc[d], np.einsum("n,niz->iz", pr, XL[d])
        bc, bL = pr @ uc, np.einsum("n,niz->iz", pr, uL)
        acc(c.Q1[d], h, ac[None], aL[None])
        acc(c.R1[d], h, bc[None], bL[None])
        FX, Fu, Fa, Fb = tree.step_maps(d)
        cc = (np.einsum("oij,nj->noi", FX, Xc[d]) + np.einsum("oij,nj->noi", Fu, uc)
              + (Fa @ ac + Fb @ bc)[None])
        LL = (np.einsum("oij,njz->noiz", FX, XL[d]) + np.einsum("oij,njz->noiz", Fu, uL)
              + (np.einsum("oij,jz->oiz", Fa, aL) + np.einsum("oij,jz->oiz", Fb, bL))[None])
        Xc.append(cc.reshape(-1, n))
        XL.append(LL.reshape(-1, n, nu_))
    acc(p.G, 1.0, Xc[k], XL[k], tree.probs[k])
    J2 = 0.5 * (J2 + J2.T)
    z = np.linalg.solve(J2, -0.5 * J1)
    J = float(z @ J2 @ z + J1 @ z + J0)
    U = [z[starts[d]:starts[d + 1]].reshape(-1, m) for d in range(k)]
    X = [Xc[d] + XL[d] @ z for d in range(k + 1)]
    return OracleResult(cost=J, controls=U, states=X, tree=tree.describe(), condition=float(np.linalg.cond(J2)),
                        n_variables=int(nu_), runtime=time.perf_counter() - t0, method="dense")


def tree_cost_of_controls(prob: ValidatedProblem, n_steps: int, controls):
    """Tree cost of given per-node controls (list per depth)."""
    tree = ScenarioTree(prob, n_steps)
    return tree.forward(lambda d, x: controls[d])[0]


def feedback_in_tree(prob: ValidatedProblem, law: FeedbackLaw, n_steps: int, solver_steps: int | None = None):
    """Exact tree cost of the affine feedback u = K x + k sampled at the tree
    times. The law's grid must refine the tree grid."""
    Ns = law.gain.shape[0] - 1 if solver_steps is None else solver_steps
    if Ns % n_steps:
        raise DiscretizationMismatch(f"solver grid ({Ns} steps) does not refine the tree grid ({n_steps} steps)",
                                     solver_steps=Ns, tree_steps=n_steps)
    r = Ns // n_steps
    tree = ScenarioTree(prob, n_steps)
    return tree.forward(lambda d, x: x @ law.gain[d * r].T + law.offset[d * r])[0]


def compare_with_oracle(prob: ValidatedProblem, sol, ladder=ORACLE_LADDER, oracle: OracleResult | None = None,
                        gap_max: float = 0.05, ratio_min: float = 1.5):
    """Feedback-in-tree cost against the oracle optimum across a dt ladder."""
    law = sol.feedback_law()
    levels = []
    for k in ladder:
        tree = ScenarioTree(prob, k)            # raises TreeTooLarge early
        orc = oracle if (oracle is not None and oracle.tree["n_steps"] == k) else dp_oracle(prob, k)
        fb = feedback_in_tree(prob, law, k)
        gap = fb - orc.cost
        levels.append({"n_steps": k, "dt": prob.grid.T / k, "oracle_cost": orc.cost, "feedback_cost": fb,
                       "gap": gap, "relative_gap": gap / abs(orc.cost) if orc.cost else gap,
                       "oracle_runtime": orc.runtime, "condition": orc.condition, "scenarios": tree.scenarios})
    ratios = [levels[i]["gap"] / levels[i + 1]["gap"] if levels[i + 1]["gap"] > 0 else np.inf
              for i in range(len(levels) - 1)]
    positive = all(l["gap"] > 0 for l in levels)
    last_ok = levels[-1]["relative_gap"] <= gap_max if levels else True
    ratio_ok = all(r >= ratio_min for r in ratios)
    return {"levels": levels, "gap_ratios": ratios, "positive": positive,
            "passed": bool(positive and last_ok and ratio_ok),
            "thresholds": {"gap_max": gap_max, "ratio_min": ratio_min},
            "solver_J": sol.J}


# ---------------------------------------------------------------- battery

ALL_CHECKS = ("stationarity", "perturbation", "dual", "constraints")


def run_checks(prob: ValidatedProblem, sol, checks=ALL_CHECKS, thresholds=None, n_paths: int = 2000,
               seed: int = DEFAULT_SEED, perturbation_paths: int = 10000, dual_paths: int = 100000,
               constraint_paths: int = 100000, threads=None) -> VerificationReport:
    th = dict(DEFAULT_THRESHOLDS)
    th.update(thresholds or {})
    rep = VerificationReport()
    if "stationarity" in checks:
        noise = NoiseBundle(prob.grid, prob.spec.jumps, n_paths, seed)
        paths = simulate_state(prob, ControlPath.feedback(sol.feedback_law()), noise)
        res = stationarity_residual(prob, sol, paths)
        lim = th["stationarity_meanfield"] if prob.has_mean_field else th["stationarity_plain"]
        worst = max(res["sub1"]["normalized_max"], res["meanfield"]["normalized_max"])
        vals = {"sub1_normalized_max": res["sub1"]["normalized_max"],
                "meanfield_normalized_max": res["meanfield"]["normalized_max"],
                "scale_Ru": res["scale_Ru"], "n_paths": n_paths,
                "per_node_max_meanfield": res["meanfield"]["per_node_max"],
                "headline": ("normalized_max", worst, lim)}
        rep.add(CheckResult("stationarity", worst <= lim, {"normalized_max": lim}, vals))
    if "perturbation" in checks:
        res = perturbation_gap(prob, sol, n_paths=perturbation_paths, seed=seed, se_mult=th["perturbation_se_mult"])
        worst = max(abs(f["c"]) / f["se_c"] if f["se_c"] > 0 else (0.0 if f["c"] == 0 else np.inf) for f in res["fits"])
        res["headline"] = ("max |c|/SE(c)", worst, th["perturbation_se_mult"])
        rep.add(CheckResult("perturbation", res["passed"], {"se_mult": th["perturbation_se_mult"]}, res))
    if "dual" in checks:
        res = dual_value_check(prob, None, a=0.0, b=0.0, lam=1.0, gam=0.0, n_paths=dual_paths, seed=seed,
                               ric=sol.ric, gains=sol.gains, se_mult=th["dual_se_mult"], dt_mult=th["dual_dt_mult"])
        res["headline"] = ("gap", res["gap"], res["limit"])
        rep.add(CheckResult("dual", res["passed"], {"se_mult": th["dual_se_mult"], "dt_mult": th["dual_dt_mult"],
                                                    "probe": "lambda=1, gamma=0, a=b=0"}, res))
    if "constraints" in checks:
        res = constraint_check(prob, sol, n_paths=constraint_paths, seed=seed, ode_tol=th["constraint_ode"],
                               se_mult=th["constraint_mc_se_mult"], threads=threads)
        res["headline"] = ("ode_residual", max(res["ode_state"], res["ode_control"]), th["constraint_ode"])
        rep.add(CheckResult("constraints", res["passed"],
                            {"ode": th["constraint_ode"], "mc_se_mult": th["constraint_mc_se_mult"]}, res))
    return rep
