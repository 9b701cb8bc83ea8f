"""Surface Navier-Stokes on the offset manifold, pulled back to the base mesh.

Unknowns are the Cartesian velocity (Q2, 3 components), pressure (Q1) and
the tangential-constraint multiplier (Q1), in one monolithic vector
[ux | uy | uz | p | lambda]. All integrals carry the area measure factor of
the offset map; tangential operators are the transformed ones.

The tangential constraint u . n = 0 is imposed weakly by the multiplier.
An optional consistent quadratic augmentation (FluidParams.tangential_penalty)
drives the pointwise quadrature-point residual of u . n to solver precision
for verification solves; it vanishes on the exact solution and is carried
through every linearization so the adjoint stays exact either way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .mesh import KIND_INLET, KIND_OPEN, inlet_profile


class SolverError(RuntimeError):
    pass


@dataclass
class FluidParams:
    """Fluid constants and numerical settings of the flow solve."""

    rho: float = 1.0
    eta: float = 1.0
    U0: float = 1.0
    alpha_s: float | None = None     # default 1e4 * rho
    alpha_f: float = 0.0
    q: float = 1.0
    #: optional consistent augmentation pen * (u.n)(u~.n) per quadrature
    #: point. Off by default: the pure multiplier form is the production
    #: formulation (a large penalty seals porous compartments pointwise and
    #: lets the optimizer ride their indeterminate pressure level); switch
    #: it on for verification solves that need the pointwise tangential
    #: residual at quadrature points driven to solver precision.
    tangential_penalty: float = 0.0
    #: pairing direction of the tangential multiplier: -1 uses the offset
    #: normal direction (n - grad d_f), +1 the sign-flipped variant
    #: (n + grad d_f); both use the same direction in state and adjoint.
    lambda_direction_sign: int = -1
    newton_rtol: float = 1.0e-12
    newton_atol: float = 1.0e-13
    max_newton: int = 30

    def __post_init__(self):
        if self.rho <= 0 or self.eta <= 0:
            raise ValueError("rho and eta must be positive")
        if self.alpha_s is None:
            self.alpha_s = 1.0e4 * self.rho


@dataclass
class FlowState:
    u: np.ndarray                 # (n_q2, 3)
    p: np.ndarray                 # (n_q1,)
    lam: np.ndarray               # (n_q1,)
    newton_iters: int = 0
    residual: float = 0.0

    def pack(self):
        return np.concatenate([self.u.T.ravel(), self.p, self.lam])


def unpack(x, n2, n1):
    u = x[: 3 * n2].reshape(3, n2).T
    p = x[3 * n2: 3 * n2 + n1]
    lam = x[3 * n2 + n1:]
    return u, p, lam


class FlowBC:
    """Dirichlet data: inlet/wall velocity, pressure pins, multiplier zeros."""

    def __init__(self, mesh, params: FluidParams):
        n2, n1 = mesh.n_q2, mesh.n_q1
        nu = 3 * n2
        idx = []
        val = []
        if len(mesh.inlet_nodes):
            nodes, vel = inlet_profile(mesh, params.U0)
            for j in range(3):
                idx.append(j * n2 + nodes)
                val.append(vel[:, j])
        if len(mesh.wall_nodes):
            for j in range(3):
                idx.append(j * n2 + mesh.wall_nodes)
                val.append(np.zeros(len(mesh.wall_nodes)))
        # multiplier vanishes where velocity is prescribed
        lam_nodes = mesh.q1_nodes_of_kind((0, 2))  # inlet + wall
        idx.append(nu + n1 + lam_nodes)
        val.append(np.zeros(len(lam_nodes)))
        for node, pval in mesh.pin_points:
            idx.append(np.array([nu + node]))
            val.append(np.array([float(pval)]))
        self.index = (np.concatenate(idx) if idx
                      else np.zeros(0, dtype=np.int64))
        self.value = np.concatenate(val) if val else np.zeros(0)
        # deduplicate (corner nodes are in both inlet and wall lists; the
        # profile is zero at segment endpoints so wall zeros agree)
        order = np.argsort(self.index, kind="stable")
        self.index = self.index[order]
        self.value = self.value[order]
        keep = np.ones(len(self.index), dtype=bool)
        keep[1:] = self.index[1:] != self.index[:-1]
        self.index = self.index[keep]
        self.value = self.value[keep]
        self.ndof = nu + 2 * n1
        self.free_mask = np.ones(self.ndof)
        self.free_mask[self.index] = 0.0

    def apply_to_state(self, x):
        x[self.index] = self.value
        return x

    def restrain(self, mat):
        """Replace constrained rows by identity rows."""
        d_free = sp.diags(self.free_mask)
        d_bc = sp.diags(1.0 - self.free_mask)
        return (d_free @ mat + d_bc).tocsc()

    def restrain_transpose(self, mat):
        """Zero constrained rows of an adjoint operator and put identity."""
        return self.restrain(mat)

    def residual_with_bc(self, r, x):
        r = r.copy()
        r[self.index] = x[self.index] - self.value
        return r

    def homogeneous_rhs(self, g):
        g = g.copy()
        g[self.index] = 0.0
        return g


def multiplier_direction(factors, params: FluidParams):
    """Unit direction pairing the tangential multiplier with the velocity."""
    s = float(params.lambda_direction_sign)
    b = factors.mesh.normal + s * factors.grad_df
    bb = np.einsum("...i,...i", b, b) + factors.eps0
    return b / np.sqrt(bb)[..., None]


class FlowAssembler:
    """Vectorized residual/jacobian assembly of the transformed weak form."""

    def __init__(self, mesh, factors, alpha_qp, params: FluidParams):
        self.mesh = mesh
        self.factors = factors
        self.params = params
        self.alpha = alpha_qp
        self.n2 = mesh.n_q2
        self.n1 = mesh.n_q1
        self.nu = 3 * self.n2
        self.ndof = self.nu + 2 * self.n1
        self.N2 = fem.VOLUME_TABLES.n2
        self.N1 = fem.VOLUME_TABLES.n1
        self.tg2, self.tg1 = factors.transformed_grad_tables()
        self.wM = factors.wM
        self.m_dir = multiplier_direction(factors, params)
        ne = mesh.n_elems
        q2 = mesh.quads_q2
        self.conn_u = np.concatenate(
            [j * self.n2 + q2 for j in range(3)], axis=1)
        self.conn_p = self.nu + mesh.quads_q1
        self.conn_l = self.nu + self.n1 + mesh.quads_q1
        # state-independent element blocks
        eta = params.eta
        pen = params.tangential_penalty
        wM, tg2, N2, N1, m = self.wM, self.tg2, self.N2, self.N1, self.m_dir
        visc_lap = np.einsum("eq,eqad,eqbd->eab", wM, tg2, tg2)
        visc_cross = np.einsum("eq,eqai,eqbj->eajbi", wM, tg2, tg2)
        darcy = np.einsum("eq,eq,qa,qb->eab", wM, self.alpha, N2, N2)
        # the penalty is pointwise per quadrature point (uniform weight):
        # a measure-weighted version under-enforces tiny chart-degenerate
        # cells, leaving u.n hotspots there
        pen_w = np.full_like(wM, pen)
        pen_blk = np.einsum("eq,eqj,eqi,qa,qb->eajbi", pen_w, m, m, N2, N2)
        self.pen_w = pen_w
        eye = np.eye(3)
        kuu = (eta * visc_cross
               + eye[None, None, :, None, :] *
               (eta * visc_lap + darcy)[:, :, None, :, None]
               + pen_blk)
        self.kuu_lin = np.ascontiguousarray(
            kuu.transpose(0, 2, 1, 4, 3).reshape(ne, 27, 27))
        kup = -np.einsum("eq,qb,eqaj->eajb", wM, N1, tg2)
        self.kup = np.ascontiguousarray(
            kup.transpose(0, 2, 1, 3).reshape(ne, 27, 4))
        kul = np.einsum("eq,qb,eqj,qa->eajb", wM, N1, m, N2)
        self.kul = np.ascontiguousarray(
            kul.transpose(0, 2, 1, 3).reshape(ne, 27, 4))

    # -- state evaluation ---------------------------------------------------

    def state_at_qp(self, x):
        u, p, lam = unpack(x, self.n2, self.n1)
        u_e = u[self.mesh.quads_q2]          # (ne, 9, 3)
        u_q = np.einsum("qa,eaj->eqj", self.N2, u_e)
        gu = np.einsum("eqai,eaj->eqij", self.tg2, u_e)
        p_q = np.einsum("qa,ea->eq", self.N1, p[self.mesh.quads_q1])
        lam_q = np.einsum("qa,ea->eq", self.N1, lam[self.mesh.quads_q1])
        return u_q, gu, p_q, lam_q

    def residual(self, x):
        mesh = self.mesh
        rho = self.params.rho
        u_q, gu, p_q, lam_q = self.state_at_qp(x)
        wM, tg2, N2, N1, m = self.wM, self.tg2, self.N2, self.N1, self.m_dir
        # linear part via the precomputed blocks
        r = np.zeros(self.ndof)
        u_loc = x[self.conn_u]
        p_loc = x[self.conn_p]
        l_loc = x[self.conn_l]
        rm = (np.einsum("eab,eb->ea", self.kuu_lin, u_loc)
              + np.einsum("eab,eb->ea", self.kup, p_loc)
              + np.einsum("eab,eb->ea", self.kul, l_loc))
        conv = np.einsum("eqi,eqij->eqj", u_q, gu)
        rm += rho * np.einsum("eq,eqj,qa->eja", wM, conv, N2).reshape(
            rm.shape[0], 27)
        np.add.at(r, self.conn_u.ravel(), rm.ravel())
        divu = np.einsum("eqii->eq", gu)
        rp = -np.einsum("eq,eq,qa->ea", wM, divu, N1)
        np.add.at(r, self.conn_p.ravel(), rp.ravel())
        un = np.einsum("eqi,eqi->eq", u_q, m)
        rl = np.einsum("eq,eq,qa->ea", wM, un, N1)
        np.add.at(r, self.conn_l.ravel(), rl.ravel())
        return r

    def jacobian(self, x):
        """Raw Newton matrix (no boundary conditions)."""
        rho = self.params.rho
        u_q, gu, _, _ = self.state_at_qp(x)
        wM, tg2, N2 = self.wM, self.tg2, self.N2
        ne = self.mesh.n_elems
        conv1 = rho * np.einsum("eq,qa,qb,eqij->eajbi", wM, N2, N2, gu)
        ug = np.einsum("eqk,eqbk->eqb", u_q, tg2)
        conv2 = rho * np.einsum("eq,qa,eqb->eab", wM, N2, ug)
        kuu = (conv1 + np.eye(3)[None, None, :, None, :]
               * conv2[:, :, None, :, None])
        kuu = kuu.transpose(0, 2, 1, 4, 3).reshape(ne, 27, 27) + self.kuu_lin
        nn = (self.ndof, self.ndof)
        mat = fem.scatter(kuu, self.conn_u, self.conn_u, nn)
        mat += fem.scatter(self.kup, self.conn_u, self.conn_p, nn)
        mat += fem.scatter(self.kup.transpose(0, 2, 1), self.conn_p,
                           self.conn_u, nn)
        mat += fem.scatter(self.kul, self.conn_u, self.conn_l, nn)
        mat += fem.scatter(self.kul.transpose(0, 2, 1), self.conn_l,
                           self.conn_u, nn)
        return mat.tocsr()


def solve_surface_ns(mesh, factors, alpha_qp, params: FluidParams,
                     x0=None, continuation=True):
    """Newton solve of the transformed surface Navier-Stokes system.

    Returns a converged FlowState. Falls back to factor-of-2 continuation
    in U0 when the direct Newton iteration diverges.
    """
    asm = FlowAssembler(mesh, factors, alpha_qp, params)
    bc = FlowBC(mesh, params)
    x = np.zeros(asm.ndof) if x0 is None else x0.copy()
    bc.apply_to_state(x)
    try:
        x, iters, res = _newton(asm, bc, x)
    except SolverError:
        if not continuation or params.U0 == 0.0:
            raise
        x, iters, res = _continuation_in_u0(mesh, factors, alpha_qp, params,
                                            x0)
    u, p, lam = unpack(x, asm.n2, asm.n1)
    return FlowState(u=u.copy(), p=p.copy(), lam=lam.copy(),
                     newton_iters=iters, residual=res)


def _newton(asm, bc, x):
    """Damped Newton with a step-increment stopping rule.

    The residual norm is a poor convergence measure here (the tangential
    penalty inflates it by many orders); the Newton increment measures the
    state error directly, so iterate until the full step is negligible
    relative to the velocity scale.
    """
    r = bc.residual_with_bc(asm.residual(x), x)
    scale0 = max(np.linalg.norm(r), 1e-30)
    data = _force_scale(asm, bc)
    step_tol = asm.params.newton_rtol * max(data, np.abs(x).max(), 1e-12)
    converged = False
    stagnant = False
    last_step = np.inf
    slow = 0
    it = 0
    for it in range(1, asm.params.max_newton + 1):
        nrm = np.linalg.norm(r)
        mat = bc.restrain(asm.jacobian(x))
        try:
            lu = spla.splu(mat)
        except RuntimeError as exc:
            raise SolverError(f"linear solve failed: {exc}") from exc
        dx = _solve_refined(lu, mat, -r)
        if not np.isfinite(dx).all():
            raise SolverError("non-finite Newton update")
        last_step = float(np.abs(dx).max())
        if last_step <= step_tol:
            x = x + dx
            r = bc.residual_with_bc(asm.residual(x), x)
            converged = True
            break
        # backtracking on the residual norm
        step = 1.0
        improved = False
        for _ in range(12):
            x_trial = x + step * dx
            r_trial = bc.residual_with_bc(asm.residual(x_trial), x_trial)
            if np.linalg.norm(r_trial) < (1.0 - 1e-4 * step) * nrm:
                improved = True
                break
            step *= 0.5
        if not improved:
            # residual at its attainable floor; keep the better state
            if np.linalg.norm(r_trial) < nrm:
                x, r = x_trial, r_trial
            stagnant = True
            break
        x, r = x_trial, r_trial
        # two consecutive slow iterations = roundoff floor of the stiff
        # penalized system, not divergence
        slow = slow + 1 if np.linalg.norm(r) > 0.5 * nrm else 0
        if slow >= 2:
            stagnant = True
            break
    nrm = np.linalg.norm(r)
    state_scale = max(data, np.abs(x).max(), 1e-12)
    if converged \
            or (stagnant and (nrm <= 1e-6 * scale0
                              or last_step <= 1e-6 * state_scale)) \
            or nrm <= 1e-8 * scale0 \
            or nrm <= asm.params.newton_atol * max(data, 1.0):
        return x, it, nrm
    raise SolverError(f"Newton did not converge: |r| = {nrm:.3e}")


def _solve_refined(lu, mat, b, steps=3):
    """LU solve plus iterative refinement with extended-precision residuals.

    Recovers the digits the factorization loses on the stiff
    tangential-penalty block (condition numbers up to ~1e12)."""
    x = lu.solve(b)
    mat_l = mat.astype(np.longdouble)
    b_l = b.astype(np.longdouble)
    for _ in range(steps):
        res = np.asarray(b_l - mat_l @ x.astype(np.longdouble),
                         dtype=np.float64)
        dx = lu.solve(res)
        x = np.asarray(x.astype(np.longdouble) + dx, dtype=np.float64)
        if np.linalg.norm(res) <= 1e-300:
            break
    return x


def _force_scale(asm, bc):
    if len(bc.index) == 0:
        return 1.0
    return max(float(np.abs(bc.value).max()), asm.params.U0, 1e-6)


def _continuation_in_u0(mesh, factors, alpha_qp, params, x0):
    """March U0 upward by factors of 2 from a solvable level."""
    target = params.U0
    level = target
    ladder = []
    for _ in range(12):
        level *= 0.5
        ladder.append(level)
    x = np.zeros(FlowAssembler(mesh, factors, alpha_qp, params).ndof) \
        if x0 is None else x0.copy()
    # find a starting level that converges
    start = None
    for lv in ladder:
        try:
            p = _with_u0(params, lv)
            asm = FlowAssembler(mesh, factors, alpha_qp, p)
            bc = FlowBC(mesh, p)
            x_lv = bc.apply_to_state(np.zeros(asm.ndof))
            x_lv, _, _ = _newton(asm, bc, x_lv)
            start = (lv, x_lv)
            break
        except SolverError:
            continue
    if start is None:
        raise SolverError("U0 continuation failed at every level")
    lv, x = start
    while lv < target:
        lv = min(2.0 * lv, target)
        p = _with_u0(params, lv)
        asm = FlowAssembler(mesh, factors, alpha_qp, p)
        bc = FlowBC(mesh, p)
        x = bc.apply_to_state(x)
        x, iters, res = _newton(asm, bc, x)
    return x, iters, res


def _with_u0(params, u0):
    import dataclasses
    return dataclasses.replace(params, U0=u0)


# ---------------------------------------------------------------------------
# responses
# ---------------------------------------------------------------------------

def evaluate_objective(state: FlowState, alpha_qp, factors, mesh,
                       params: FluidParams, omega):
    """Dissipation-plus-pressure-drop objective on the offset surface.

    Returns (J, dissipation_part, pressure_drop_part).
    """
    asm_u = state.u[mesh.quads_q2]
    g2 = factors.transformed_grad_tables()[0]
    gu = np.einsum("eqai,eaj->eqij", g2, asm_u)
    u_q = np.einsum("qa,eaj->eqj", fem.VOLUME_TABLES.n2, asm_u)
    S = gu + gu.swapaxes(-1, -2)
    diss = (0.5 * params.eta * np.einsum("eqij,eqij->eq", S, S)
            + alpha_qp * np.einsum("eqi,eqi->eq", u_q, u_q))
    j_diss = float((factors.wM * diss).sum())
    j_drop = pressure_drop(state, factors, mesh)
    return omega * j_diss + (1.0 - omega) * j_drop, j_diss, j_drop


def pressure_drop(state: FlowState, factors, mesh):
    """Line-integrated pressure: inlet minus open boundaries (offset measure)."""
    p_e = state.p[mesh.quads_q1[mesh.be_elem]]
    p_q = np.einsum("eqa,ea->eq", mesh.be_N1, p_e)
    sign = np.where(mesh.be_kind == KIND_INLET, 1.0,
                    np.where(mesh.be_kind == KIND_OPEN, -1.0, 0.0))
    return float((sign[:, None] * p_q * factors.wL).sum())


def evaluate_area(gamma_p_qp, factors):
    """Pattern area fraction s and the total offset-surface area."""
    area = float(factors.wM.sum())
    s = float((factors.wM * gamma_p_qp).sum()) / area
    return s, area


def evaluate_volume(d_f, mesh):
    """Mean offset: (1/|Sigma|) integral of d_f over the base manifold."""
    d_q = mesh.interpolate_q2(np.asarray(d_f, dtype=float))
    return float((mesh.w * d_q).sum() / mesh.w.sum())


def tangential_residual(state: FlowState, factors, mesh):
    """max |u . n_Gamma| over volume quadrature points."""
    u_q = np.einsum("qa,eaj->eqj", fem.VOLUME_TABLES.n2,
                    state.u[mesh.quads_q2])
    return float(np.abs(np.einsum("eqi,eqi->eq", u_q,
                                  factors.n_gamma)).max())
