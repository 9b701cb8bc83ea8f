"""Design loop: MMA updates, projection-sharpness continuation, stopping.

One outer iteration filters the design variables, solves the flow, runs the
three adjoint chains and updates (gamma, d_m) with the method of moving
asymptotes under the area and two-sided volume constraints. The projection
sharpness doubles every fixed number of iterations up to its cap; the loop
stops when the cap is reached, the objective has stalled over five
iterations and both constraints hold, or at the iteration limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import SurfaceFlowProblem


@dataclass
class OptimizationConfig:
    s0: float = 0.3
    v0: float = 0.0
    n_max: int = 240
    beta_init: float = 1.0
    beta_double_every: int = 30
    beta_cap: float = 128.0
    stall_tol: float = 1.0e-3
    volume_tol: float = 1.0e-3
    # MMA parameters (standard 1987 scheme)
    move: float = 0.2
    asy_init: float = 0.5
    asy_incr: float = 1.2
    asy_decr: float = 0.7
    albefa: float = 0.1
    raa0: float = 1.0e-5
    constraint_penalty: float = 1.0e3
    subproblem_tol: float = 1.0e-9

    def validate(self):
        if not 0.0 < self.s0 < 1.0:
            raise ValueError("s0 must be in (0, 1)")
        if not 0.0 <= self.v0 < 0.5:
            raise ValueError("v0 must be in [0, 0.5) so d_m stays in bounds")
        if self.n_max < 1 or self.beta_double_every < 1:
            raise ValueError("iteration counts must be positive")
        if self.beta_cap < self.beta_init:
            raise ValueError("beta cap below initial beta")


@dataclass
class IterationRecord:
    iteration: int
    J: float
    J_normalized: float
    s: float
    v: float
    beta: float
    area_residual: float
    volume_residual: float
    newton_iters: int


class MMA:
    """Method of moving asymptotes with a primal-dual subproblem solver."""

    def __init__(self, n, m, config: OptimizationConfig,
                 xmin=0.0, xmax=1.0):
        self.n = n
        self.m = m
        self.cfg = config
        self.xmin = np.full(n, xmin, dtype=float)
        self.xmax = np.full(n, xmax, dtype=float)
        self.low = None
        self.upp = None
        self.xold1 = None
        self.xold2 = None
        self.iter = 0

    def update(self, x, f0, df0, fvals, dfdx):
        """One MMA iteration; returns the new design point in the box."""
        cfg = self.cfg
        n, m = self.n, self.m
        x = np.asarray(x, dtype=float)
        xrange = np.maximum(self.xmax - self.xmin, 1e-5)
        self.iter += 1
        if self.iter < 3:
            self.low = x - cfg.asy_init * xrange
            self.upp = x + cfg.asy_init * xrange
        else:
            osc = (x - self.xold1) * (self.xold1 - self.xold2)
            fac = np.ones(n)
            fac[osc > 0] = cfg.asy_incr
            fac[osc < 0] = cfg.asy_decr
            self.low = x - fac * (self.xold1 - self.low)
            self.upp = x + fac * (self.upp - self.xold1)
            # wide bracket; the tight floor lets oscillation damping reach
            # sub-1e-4 accuracy instead of stalling at percent level
            self.low = np.clip(self.low, x - 10.0 * xrange,
                               x - 1e-4 * xrange)
            self.upp = np.clip(self.upp, x + 1e-4 * xrange,
                               x + 10.0 * xrange)
        self.xold2 = self.xold1
        self.xold1 = x.copy()

        alfa = np.maximum.reduce([self.low + cfg.albefa * (x - self.low),
                                  x - cfg.move * xrange, self.xmin])
        beta = np.minimum.reduce([self.upp - cfg.albefa * (self.upp - x),
                                  x + cfg.move * xrange, self.xmax])

        ux1 = self.upp - x
        xl1 = x - self.low
        df0 = np.asarray(df0, dtype=float)
        dfdx = np.asarray(dfdx, dtype=float).reshape(m, n)
        p0 = np.maximum(df0, 0.0)
        q0 = np.maximum(-df0, 0.0)
        pq0 = 0.001 * (p0 + q0) + cfg.raa0 / xrange
        p0 = (p0 + pq0) * ux1 ** 2
        q0 = (q0 + pq0) * xl1 ** 2
        P = np.maximum(dfdx, 0.0)
        Q = np.maximum(-dfdx, 0.0)
        PQ = 0.001 * (P + Q) + cfg.raa0 / xrange[None, :]
        P = (P + PQ) * ux1[None, :] ** 2
        Q = (Q + PQ) * xl1[None, :] ** 2
        b = P @ (1.0 / ux1) + Q @ (1.0 / xl1) - np.asarray(fvals, dtype=float)

        xnew = _subsolve(m, n, cfg.subproblem_tol, self.low, self.upp,
                         alfa, beta, p0, q0, P, Q, b,
                         c=np.full(m, cfg.constraint_penalty))
        return xnew


def _subsolve(m, n, epsimin, low, upp, alfa, beta, p0, q0, P, Q, b, c):
    """Primal-dual interior Newton solver for the MMA subproblem.

    Solves min psi0(x) + sum(c y + y^2/2) s.t. psi_i(x) - y_i <= b_i,
    alfa <= x <= beta, y >= 0 (z-terms omitted: a0=1, a=0).
    """
    een = np.ones(n)
    eem = np.ones(m)
    epsi = 1.0
    x = 0.5 * (alfa + beta)
    y = eem.copy()
    z = 1.0
    lam = eem.copy()
    xsi = np.maximum(een / (x - alfa), een)
    eta = np.maximum(een / (beta - x), een)
    mu = np.maximum(eem, 0.5 * c)
    zet = 1.0
    s = eem.copy()
    a0 = 1.0
    a = np.zeros(m)
    d = eem.copy()

    def residuals(x, y, z, lam, xsi, eta, mu, zet, s, epsi):
        ux1 = upp - x
        xl1 = x - low
        plam = p0 + P.T @ lam
        qlam = q0 + Q.T @ lam
        gvec = P @ (1.0 / ux1) + Q @ (1.0 / xl1)
        dpsi = plam / ux1 ** 2 - qlam / xl1 ** 2
        rex = dpsi - xsi + eta
        rey = c + d * y - mu - lam
        rez = a0 - zet - a @ lam
        relam = gvec - a * z - y + s - b
        rexsi = xsi * (x - alfa) - epsi
        reeta = eta * (beta - x) - epsi
        remu = mu * y - epsi
        rezet = zet * z - epsi
        res = lam * s - epsi
        resvec = np.concatenate([rex, rey, [rez], relam, rexsi, reeta,
                                 remu, [rezet], res])
        return resvec

    while epsi > epsimin:
        resvec = residuals(x, y, z, lam, xsi, eta, mu, zet, s, epsi)
        resinorm = np.abs(resvec).max()
        ittt = 0
        while resinorm > 0.9 * epsi and ittt < 200:
            ittt += 1
            ux1 = upp - x
            xl1 = x - low
            ux2 = ux1 * ux1
            xl2 = xl1 * xl1
            plam = p0 + P.T @ lam
            qlam = q0 + Q.T @ lam
            gvec = P @ (1.0 / ux1) + Q @ (1.0 / xl1)
            GG = P / ux2[None, :] - Q / xl2[None, :]
            dpsi = plam / ux2 - qlam / xl2
            delx = dpsi - epsi / (x - alfa) + epsi / (beta - x)
            dely = c + d * y - lam - epsi / y
            delz = a0 - a @ lam - epsi / z
            dellam = gvec - a * z - y - b + epsi / lam
            diagx = (2.0 * (plam / (ux1 * ux2) + qlam / (xl1 * xl2))
                     + xsi / (x - alfa) + eta / (beta - x))
            diagy = d + mu / y
            diaglam = s / lam
            diaglamyi = diaglam + 1.0 / diagy
            # reduced (lam, z) system
            blam = dellam + dely / diagy - GG @ (delx / diagx)
            Alam = np.diag(diaglamyi) + (GG / diagx[None, :]) @ GG.T
            AA = np.zeros((m + 1, m + 1))
            AA[:m, :m] = Alam
            AA[:m, m] = a
            AA[m, :m] = a
            AA[m, m] = -zet / z
            bb = np.concatenate([blam, [delz]])
            sol = np.linalg.solve(AA, bb)
            dlam = sol[:m]
            dz = sol[m]
            dx = -delx / diagx - (GG.T @ dlam) / diagx
            dy = -dely / diagy + dlam / diagy
            dxsi = -xsi + epsi / (x - alfa) - (xsi * dx) / (x - alfa)
            deta = -eta + epsi / (beta - x) + (eta * dx) / (beta - x)
            dmu = -mu + epsi / y - (mu * dy) / y
            dzet = -zet + epsi / z - zet * dz / z
            ds = -s + epsi / lam - (s * dlam) / lam

            xx = np.concatenate([y, [z], lam, xsi, eta, mu, [zet], s])
            dxx = np.concatenate([dy, [dz], dlam, dxsi, deta, dmu, [dzet],
                                  ds])
            stepxx = -1.01 * dxx / xx
            stepalfa = -1.01 * dx / (x - alfa)
            stepbeta = 1.01 * dx / (beta - x)
            stmax = max(stepxx.max(initial=-np.inf),
                        stepalfa.max(initial=-np.inf),
                        stepbeta.max(initial=-np.inf), -1e30)
            steg = 1.0 / max(stmax, 1.0)

            xold, yold, zold = x.copy(), y.copy(), z
            lamold, xsiold, etaold = lam.copy(), xsi.copy(), eta.copy()
            muold, zetold, sold = mu.copy(), zet, s.copy()
            resinew = 2.0 * resinorm
            itto = 0
            while resinew > resinorm and itto < 50:
                itto += 1
                x = xold + steg * dx
                y = yold + steg * dy
                z = zold + steg * dz
                lam = lamold + steg * dlam
                xsi = xsiold + steg * dxsi
                eta = etaold + steg * deta
                mu = muold + steg * dmu
                zet = zetold + steg * dzet
                s = sold + steg * ds
                resvec = residuals(x, y, z, lam, xsi, eta, mu, zet, s,
                                   epsi)
                resinew = np.abs(resvec).max()
                steg *= 0.5
            resinorm = resinew
        epsi *= 0.1
    return x


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

def continuation_and_stop(history, iteration, beta, config):
    """Projection continuation and the four-part stop test.

    Returns ("continue", beta') or ("stop", reason, beta').
    """
    if iteration % config.beta_double_every == 0:
        beta = min(2.0 * beta, config.beta_cap)
    if iteration >= config.n_max:
        return ("stop", "max_iterations", beta)
    if beta >= config.beta_cap and len(history) >= 6:
        J0 = history[0].J
        tail = history[-6:]
        stall = np.mean([abs(tail[k + 1].J - tail[k].J)
                         for k in range(5)]) / abs(J0)
        rec = history[-1]
        if (stall <= config.stall_tol and rec.s <= config.s0
                and abs(rec.v - config.v0) <= config.volume_tol):
            return ("stop", "converged", beta)
    return ("continue", None, beta)


def run_loop(problem: SurfaceFlowProblem, config: OptimizationConfig,
             on_iteration=None, on_checkpoint=None):
    """Drive the full optimization; returns (gamma, d_m, last forward, history)."""
    config.validate()
    mesh = problem.mesh
    gamma, d_m = problem.initial_design(config.s0, config.v0)
    n_gamma = int(problem.design_mask.sum())
    n = n_gamma + mesh.n_q2
    mma = MMA(n, 3, config)
    problem.filters.beta = config.beta_init
    beta = config.beta_init
    history = []
    J0 = None
    x_warm = None
    fw = None

    for iteration in range(1, config.n_max + 1):
        problem.filters.beta = beta
        fw = problem.forward(gamma, d_m, x0=x_warm)
        x_warm = fw.state.pack()
        if J0 is None:
            J0 = fw.J
        sens = problem.sensitivities(fw)
        rec = IterationRecord(
            iteration=iteration, J=fw.J, J_normalized=fw.J / J0, s=fw.s,
            v=fw.v, beta=beta, area_residual=fw.s - config.s0,
            volume_residual=fw.v - config.v0,
            newton_iters=fw.state.newton_iters)
        history.append(rec)
        if on_iteration is not None:
            on_iteration(rec, fw)

        x = np.concatenate([gamma[problem.design_mask], d_m])
        df0 = np.concatenate([sens["J"].wrt_gamma[problem.design_mask],
                              sens["J"].wrt_dm]) / J0
        ds = np.concatenate([sens["s"].wrt_gamma[problem.design_mask],
                             sens["s"].wrt_dm])
        dv = np.concatenate([sens["v"].wrt_gamma[problem.design_mask],
                             sens["v"].wrt_dm])
        fvals = np.array([fw.s - config.s0,
                          fw.v - config.v0 - config.volume_tol,
                          config.v0 - fw.v - config.volume_tol])
        dfdx = np.stack([ds, dv, -dv])
        xnew = mma.update(x, fw.J / J0, df0, fvals, dfdx)
        gamma = gamma.copy()
        gamma[problem.design_mask] = xnew[:n_gamma]
        d_m = xnew[n_gamma:]

        decision = continuation_and_stop(history, iteration, beta, config)
        new_beta = decision[-1]
        if new_beta != beta and on_checkpoint is not None:
            on_checkpoint(iteration, new_beta, gamma, d_m)
        beta = new_beta
        if decision[0] == "stop":
            return gamma, d_m, fw, history, decision[1]
    return gamma, d_m, fw, history, "max_iterations"
