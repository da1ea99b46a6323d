"""
Primal-dual interior point with filter line search for `NlpProblem`.

Inequalities g(x) = G x + g0 ≥ 0 get slacks s ≥ 0 and the barrier −μ Σ ln s; each Newton
step solves the reduced symmetric system

    [ W + Gᵀ Σ G + δ_w I    Jᵀ     ] [ dx  ]   [ −r_d − Gᵀ (z − μ/s + Σ r_g) ]
    [ J                    −δ_c I  ] [ −dλ ] = [ −c                           ]

with Σ = S⁻¹Z, factorised by sparse LU.
"""
import time
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np
from numpy.linalg import norm
from rich import print as rprint
from scipy import sparse
from scipy.sparse.linalg import splu

from core.nlp_core import KktSolution, NlpProblem
from core.utils.config_utils import load_key_or
from core.utils.errors import SolverError


@dataclass
class SolverSettings:
    tol_eq: float = 1e-8
    tol_ineq: float = 1e-8
    tol_stat: float = 1e-6
    tol_comp: float = 1e-6
    max_iter: int = 300
    mu0: float = 0.1
    scaling: bool = True
    verbose: bool = False

    @classmethod
    def resolve(cls, overrides: Optional[dict] = None) -> "SolverSettings":
        """Scenario overrides > `solver.*` in the global config > defaults."""
        values = {}
        for f in fields(cls):
            values[f.name] = load_key_or(f"solver.{f.name}", f.default)
        for k, v in (overrides or {}).items():
            if v is not None and k in values:
                values[k] = v
        return cls(**{k: type(getattr(cls, k))(v) for k, v in values.items()})


class InteriorPointSolver:

    def __init__(self, settings: Optional[SolverSettings] = None):
        self.settings = settings or SolverSettings()

        self.k_mu = 0.2
        self.theta_mu = 1.5
        self.tau_min = 0.99
        self.k_sigma = 1e10
        self.k_eps = 10.0
        self.gamma_theta = 1e-5
        self.gamma_phi = 1e-5
        self.gamma_alpha = 0.05
        self.delta = 1.0
        self.s_theta = 1.1
        self.s_phi = 2.3
        self.eta_phi = 1e-4
        self.kappa_1 = 1e-2
        self.kappa_curv = 1e-10

        self.delta_wmin = 1e-20
        self.delta_w0_bar = 1e-4
        self.delta_wmax = 1e10
        self.delta_c_bar = 1e-8
        self.k_wmin = 1.0 / 3.0
        self.k_wmax = 8.0
        self.k_wmax_bar = 100.0
        self.k_c = 0.25
        self.max_soft_restorations = 8

    # ------------------------------
    # scaling
    # ------------------------------

    def _scale(self, problem: NlpProblem, x0: np.ndarray):
        st = self.settings
        D = problem.layout.scale if st.scaling else np.ones(problem.n)
        D = np.where(D > 0, D, 1.0)
        G = problem.ineq_matrix @ sparse.diags(D)
        row_max = np.asarray(abs(G).max(axis=1).todense()).ravel() if G.shape[0] else np.zeros(0)
        S_g = 1.0 / np.where(row_max > 0, row_max, 1.0)
        if st.scaling and problem.m_eq:
            J = problem.equality_jacobian(x0) @ sparse.diags(D)
            j_max = np.asarray(abs(J).max(axis=1).todense()).ravel()
            S_r = np.minimum(1.0, 100.0 / np.where(j_max > 0, j_max, 1.0))
        else:
            S_r = np.ones(problem.m_eq)
        grad = np.abs(problem.objective_gradient(x0) * D)
        sigma = min(1.0, 100.0 / grad.max()) if st.scaling and grad.size and grad.max() > 0 else 1.0
        return D, S_r, S_g, sigma

    # ------------------------------
    # main loop
    # ------------------------------

    def solve(self, problem: NlpProblem, warm_start: Optional[KktSolution] = None) -> KktSolution:
        st = self.settings
        start = time.perf_counter()
        n, m, p = problem.n, problem.m_eq, problem.m_ineq

        x_orig = problem.x0.copy() if warm_start is None else warm_start.x.copy()
        if x_orig.shape[0] != n:
            raise SolverError(f"warm start has {x_orig.shape[0]} variables, problem has {n}")
        D, S_r, S_g, sigma = self._scale(problem, x_orig)
        Gs = (sparse.diags(S_g) @ problem.ineq_matrix @ sparse.diags(D)).tocsr()
        g0s = S_g * problem.ineq_const

        def unscale(xt):
            return D * xt

        def f_eval(xt):
            return sigma * problem.objective_value(unscale(xt))

        def grad_eval(xt):
            return sigma * problem.objective_gradient(unscale(xt)) * D

        def c_eval(xt):
            return S_r * problem.equality_residual(unscale(xt))

        def jac_eval(xt):
            return (sparse.diags(S_r) @ problem.equality_jacobian(unscale(xt)) @ sparse.diags(D)).tocsr()

        def hess_eval(xt, lam):
            # L = σ f − λᵀ S_r c  →  ∇²L = D (σ Q − Σ (S_r λ)_i ∇²c_i) D
            H = problem.lagrangian_hessian(unscale(xt), S_r * lam / sigma) * sigma
            return (sparse.diags(D) @ H @ sparse.diags(D)).tocsr()

        def g_eval(xt):
            return Gs @ xt + g0s

        x = x_orig / D
        if warm_start is None:
            lam = np.zeros(m)
            s = np.maximum(g_eval(x), self.kappa_1)
            mu = st.mu0
            z = mu / s
        else:
            lam = warm_start.lam / S_r * sigma
            s = np.maximum(warm_start.s * S_g, 1e-12)
            z = np.maximum(warm_start.z / S_g * sigma, 1e-12)
            mu = float(np.clip(np.mean(s * z) if p else st.tol_comp / 10, st.tol_comp / 10, st.mu0))
            if lam.shape[0] != m or s.shape[0] != p:
                raise SolverError("warm start multipliers do not match the problem dimensions")
        tau = max(self.tau_min, 1.0 - mu)

        def barrier_phi(xt, st_):
            return f_eval(xt) - mu * np.sum(np.log(st_)) if p else f_eval(xt)

        def theta_of(xt, st_):
            return norm(c_eval(xt), 1) + (norm(g_eval(xt) - st_, 1) if p else 0.0)

        def errors(xt, lam_, z_, s_, mu_):
            c = c_eval(xt)
            J = jac_eval(xt)
            r_d = grad_eval(xt) - J.T @ lam_ - (Gs.T @ z_ if p else 0.0)
            s_d = max(100.0, (norm(lam_, 1) + norm(z_, 1)) / max(1, m + p)) / 100.0
            inf_du = norm(r_d, np.inf) / s_d if n else 0.0
            inf_eq = norm(c, np.inf) if m else 0.0
            g_true = g_eval(xt)
            inf_in = max(0.0, -g_true.min()) if p else 0.0
            inf_gs = norm(g_true - s_, np.inf) if p else 0.0
            compl = norm(s_ * z_ - mu_, np.inf) if p else 0.0
            return inf_du, inf_eq, inf_in, inf_gs, compl

        theta0 = theta_of(x, s)
        theta_max0 = 1e4 * max(1.0, theta0)
        theta_min = 1e-4 * max(1.0, theta0)
        theta_max = theta_max0
        phi_max = np.inf

        delta_w_last = 0.0
        history = []
        best = None
        status = "max_iter"
        soft_restorations = 0
        iteration = 0

        while True:
            inf_du, inf_eq, inf_in, inf_gs, compl0 = errors(x, lam, z, s, 0.0)
            e0 = max(inf_du, inf_eq, inf_gs, compl0)
            converged = (inf_eq <= st.tol_eq and inf_in <= st.tol_ineq and inf_gs <= max(st.tol_ineq, st.tol_eq)
                         and inf_du <= st.tol_stat and compl0 <= st.tol_comp)
            if best is None or e0 < best[0]:
                best = (e0, x.copy(), lam.copy(), z.copy(), s.copy())
            if converged:
                status = "converged"
                break
            if iteration >= st.max_iter:
                x, lam, z, s = best[1], best[2], best[3], best[4]
                break
            if not np.all(np.isfinite(x)):
                raise SolverError("non-finite iterate")

            # barrier subproblem solved -> shrink mu, reset the filter
            while p and mu > st.tol_comp / 10:
                inf_du_mu, inf_eq_mu, _, inf_gs_mu, compl_mu = errors(x, lam, z, s, mu)
                if max(inf_du_mu, inf_eq_mu, inf_gs_mu, compl_mu) > self.k_eps * mu:
                    break
                mu = max(st.tol_comp / 10.0, min(self.k_mu * mu, mu ** self.theta_mu))
                tau = max(self.tau_min, 1.0 - mu)
                theta_max, phi_max = theta_max0, np.inf

            # ---- Newton direction ----
            c = c_eval(x)
            J = jac_eval(x)
            g = g_eval(x)
            grad = grad_eval(x)
            r_d = grad - J.T @ lam - (Gs.T @ z if p else 0.0)
            r_g = g - s if p else np.zeros(0)
            W = hess_eval(x, lam)
            if p:
                Sigma = z / s
                H = W + Gs.T @ sparse.diags(Sigma) @ Gs
                rhs_x = -r_d - Gs.T @ (z - mu / s + Sigma * r_g)
            else:
                H = W
                rhs_x = -r_d
            rhs = np.concatenate([rhs_x, -c])

            delta_w, delta_c = 0.0, 0.0
            sol = None
            while True:
                K = sparse.bmat([[H + delta_w * sparse.eye(n), J.T],
                                 [J, -delta_c * sparse.eye(m) if m else None]], format="csc") if m else \
                    (H + delta_w * sparse.eye(n)).tocsc()
                try:
                    lu = splu(K, permc_spec="MMD_AT_PLUS_A")
                    sol = lu.solve(rhs)
                    dx = sol[:n]
                    curvature = dx @ (H @ dx) + delta_w * (dx @ dx)
                    ok = np.all(np.isfinite(sol)) and curvature >= self.kappa_curv * (dx @ dx)
                except RuntimeError:
                    ok = False
                    if m:
                        delta_c = self.delta_c_bar * mu ** self.k_c
                if ok:
                    break
                if delta_w == 0.0:
                    delta_w = self.delta_w0_bar if delta_w_last == 0.0 else max(self.delta_wmin, self.k_wmin * delta_w_last)
                else:
                    delta_w *= self.k_wmax_bar if delta_w_last == 0.0 else self.k_wmax
                if delta_w > self.delta_wmax:
                    if sol is None or not np.all(np.isfinite(sol)):
                        raise SolverError("KKT matrix stays singular under regularisation")
                    break
            if delta_w > 0:
                delta_w_last = delta_w

            dx = sol[:n]
            dlam = -sol[n:] if m else np.zeros(0)
            if p:
                ds = Gs @ dx + r_g
                dz = -(z - mu / s) - Sigma * (Gs @ dx + r_g)
                alpha_max = self._fraction_to_boundary(s, ds, tau)
                alpha_z = self._fraction_to_boundary(z, dz, tau)
            else:
                ds = dz = np.zeros(0)
                alpha_max = alpha_z = 1.0

            # ---- filter line search ----
            theta_cur = theta_of(x, s)
            phi_cur = barrier_phi(x, s)
            dphi = grad @ dx - (mu * np.sum(ds / s) if p else 0.0)
            if dphi < 0 and theta_cur <= theta_min:
                alpha_min = self.gamma_alpha * min(self.gamma_theta, self.gamma_phi * theta_cur / -dphi,
                                                   self.delta * theta_cur ** self.s_theta / (-dphi) ** self.s_phi)
            elif dphi < 0:
                alpha_min = self.gamma_alpha * min(self.gamma_theta, self.gamma_phi * theta_cur / -dphi)
            else:
                alpha_min = self.gamma_alpha * self.gamma_theta
            alpha = alpha_max
            accepted = False
            armijo = False
            best_trial = None
            while alpha > alpha_min:
                x_t = x + alpha * dx
                s_t = s + alpha * ds
                theta_t = theta_of(x_t, s_t)
                phi_t = barrier_phi(x_t, s_t)
                if np.isfinite(phi_t) and (best_trial is None or theta_t < best_trial[0]):
                    best_trial = (theta_t, alpha)
                if np.isfinite(phi_t) and not (theta_t >= theta_max and phi_t >= phi_max):
                    switching = dphi < 0 and alpha * (-dphi) ** self.s_phi > self.delta * theta_cur ** self.s_theta
                    if theta_cur <= theta_min and switching:
                        if phi_t <= phi_cur + self.eta_phi * alpha * dphi:
                            accepted = armijo = True
                            break
                    elif theta_t <= (1 - self.gamma_theta) * theta_cur or phi_t <= phi_cur - self.gamma_phi * theta_cur:
                        accepted = True
                        break
                alpha *= 0.5

            if not accepted:
                # soft restoration: take the trial with the least infeasibility, drop the filter
                soft_restorations += 1
                if soft_restorations > self.max_soft_restorations or best_trial is None:
                    status = "line_search_failed"
                    x, lam, z, s = best[1], best[2], best[3], best[4]
                    break
                alpha = best_trial[1]
                theta_max, phi_max = theta_max0, np.inf
            else:
                soft_restorations = 0
                if not armijo:
                    theta_max = min(theta_max, (1 - self.gamma_theta) * theta_cur)
                    phi_max = min(phi_max, phi_cur - self.gamma_phi * theta_cur)

            x = x + alpha * dx
            lam = lam + alpha * dlam
            if p:
                s = s + alpha * ds
                z = z + alpha_z * dz
                z = np.clip(z, mu / (self.k_sigma * s), self.k_sigma * mu / s)

            iteration += 1
            history.append({
                "iteration": iteration,
                "objective": problem.objective_value(unscale(x)),
                "inf_pr": max(inf_eq, inf_gs),
                "inf_du": inf_du,
                "complementarity": compl0,
                "mu": mu,
                "alpha": alpha,
                "regularisation": delta_w,
            })
            if st.verbose:
                rprint(f"[dim]{iteration:4d} f={history[-1]['objective']:.6e} pr={history[-1]['inf_pr']:.2e} "
                       f"du={inf_du:.2e} mu={mu:.1e} a={alpha:.2e} dw={delta_w:.1e}[/dim]")

        x_final = unscale(x)
        inf_du, inf_eq, inf_in, inf_gs, compl0 = errors(x, lam, z, s, 0.0)
        return KktSolution(
            x=x_final,
            lam=S_r * lam / sigma,
            z=S_g * z / sigma,
            s=s / S_g,
            status=status,
            iterations=iteration,
            objective=problem.objective_value(x_final),
            inf_pr=float(norm(problem.equality_residual(x_final), np.inf)) if m else 0.0,
            inf_du=float(inf_du),
            complementarity=float(compl0),
            wall_time=time.perf_counter() - start,
            history=history,
        )

    @staticmethod
    def _fraction_to_boundary(v, dv, tau) -> float:
        neg = dv < 0
        if not np.any(neg):
            return 1.0
        return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))
