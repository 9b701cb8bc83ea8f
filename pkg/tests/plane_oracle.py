"""Independent plane-2D Brinkman Navier-Stokes topology-optimization step.

Deliberately separate from the package implementation: plain per-element
loops, 2D Taylor-Hood (Q2 velocity / Q1 pressure), flat-measure Helmholtz
filter, threshold projection, Darcy interpolation, Newton solve, objective
and the adjoint pattern sensitivity. Used as the oracle for the degeneracy
check: on a flat base manifold with zero offset amplitude the surface
pipeline must reproduce this to solver precision.

Only the mesh connectivity and boundary tags are shared with the package
mesh (the comparison requires the identical discretization); all operators,
quadrature data and adjoints are rebuilt here from scratch.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

GAUSS_1D = np.polynomial.legendre.leggauss(3)


def _q1_shape(xi, eta):
    n = np.array([(1 - xi) * (1 - eta), (1 + xi) * (1 - eta),
                  (1 - xi) * (1 + eta), (1 + xi) * (1 + eta)]) / 4.0
    d = np.array([[-(1 - eta), -(1 - xi)], [(1 - eta), -(1 + xi)],
                  [-(1 + eta), (1 - xi)], [(1 + eta), (1 + xi)]]) / 4.0
    return n, d


def _q2_shape(xi, eta):
    def l(x):
        return np.array([0.5 * x * (x - 1), 1 - x * x, 0.5 * x * (x + 1)])

    def dl(x):
        return np.array([x - 0.5, -2 * x, x + 0.5])

    lx, ly = l(xi), l(eta)
    dx, dy = dl(xi), dl(eta)
    n = np.outer(ly, lx).ravel()
    dn = np.stack([np.outer(ly, dx).ravel(), np.outer(dy, lx).ravel()],
                  axis=1)
    return n, dn


class PlaneOracle:
    """2D Brinkman NS + density filter + projection on a flat quad mesh."""

    def __init__(self, mesh, rho=1.0, eta=1.0, U0=1.0, alpha_s=1.0e4,
                 alpha_f=0.0, q_interp=1.0, r_f=0.02, beta=1.0, xi=0.5,
                 omega=0.9):
        assert np.abs(mesh.nodes_q2[:, 2]).max() == 0.0, "flat mesh required"
        self.mesh = mesh
        self.rho, self.eta, self.U0 = rho, eta, U0
        self.alpha_s, self.alpha_f, self.q_interp = alpha_s, alpha_f, q_interp
        self.r_f, self.beta, self.xi, self.omega = r_f, beta, xi, omega
        self.n2 = mesh.n_q2
        self.n1 = mesh.n_q1
        self.ndof = 2 * self.n2 + self.n1
        self._tabulate()
        self._boundary_sets()

    # -- tables ---------------------------------------------------------------

    def _tabulate(self):
        g, w = GAUSS_1D
        pts = [(xi, eta) for eta in g for xi in g]
        wts = [wx * we for we in w for wx in w]
        mesh = self.mesh
        ne = mesh.n_elems
        self.nq = len(pts)
        self.N2 = np.zeros((self.nq, 9))
        self.N1 = np.zeros((self.nq, 4))
        self.dN2 = np.zeros((ne, self.nq, 9, 2))
        self.dN1 = np.zeros((ne, self.nq, 4, 2))
        self.wq = np.zeros((ne, self.nq))
        for iq, (xi, eta) in enumerate(pts):
            n2, d2 = _q2_shape(xi, eta)
            n1, d1 = _q1_shape(xi, eta)
            self.N2[iq] = n2
            self.N1[iq] = n1
            for e in range(ne):
                hx = mesh.elem_param_rect[e, 2]
                hy = mesh.elem_param_rect[e, 3]
                self.dN2[e, iq, :, 0] = d2[:, 0] * 2.0 / hx
                self.dN2[e, iq, :, 1] = d2[:, 1] * 2.0 / hy
                self.dN1[e, iq, :, 0] = d1[:, 0] * 2.0 / hx
                self.dN1[e, iq, :, 1] = d1[:, 1] * 2.0 / hy
                self.wq[e, iq] = wts[iq] * hx * hy / 4.0

    def _boundary_sets(self):
        from manifold_topopt.mesh import KIND_INLET, KIND_OPEN
        mesh = self.mesh
        self.inlet_nodes = mesh.inlet_nodes
        self.inlet_vel = (4.0 * self.U0 * mesh.inlet_zeta
                          * (1.0 - mesh.inlet_zeta))[:, None] \
            * mesh.inlet_dir[:, :2]
        self.wall_nodes = mesh.wall_nodes
        # boundary quadrature for the pressure-drop line integrals
        self.bedges = []
        gauss_x, gauss_w = GAUSS_1D
        for k in range(len(mesh.be_kind)):
            kind = mesh.be_kind[k]
            if kind == KIND_INLET:
                sign = 1.0
            elif kind == KIND_OPEN:
                sign = -1.0
            else:
                continue
            self.bedges.append((k, sign))

    # -- filter + projection ----------------------------------------------------

    def filter_matrixes(self):
        mesh = self.mesh
        rows, cols, ka, ma = [], [], [], []
        for e in range(mesh.n_elems):
            conn = mesh.quads_q1[e]
            ke = np.zeros((4, 4))
            me = np.zeros((4, 4))
            for iq in range(self.nq):
                w = self.wq[e, iq]
                d = self.dN1[e, iq]
                n = self.N1[iq]
                ke += w * (d @ d.T)
                me += w * np.outer(n, n)
            for a in range(4):
                for b in range(4):
                    rows.append(conn[a])
                    cols.append(conn[b])
                    ka.append(ke[a, b])
                    ma.append(me[a, b])
        K = sp.coo_matrix((ka, (rows, cols)),
                          shape=(self.n1, self.n1)).tocsc()
        M = sp.coo_matrix((ma, (rows, cols)),
                          shape=(self.n1, self.n1)).tocsc()
        return K, M

    def densities(self, gamma):
        K, M = self.filter_matrixes()
        A = (self.r_f ** 2) * K + M
        self.filter_lu = spla.splu(A)
        self.mass = M
        gamma_f = self.filter_lu.solve(M @ gamma)
        den = np.tanh(self.beta * self.xi) \
            + np.tanh(self.beta * (1 - self.xi))
        gp = (np.tanh(self.beta * self.xi)
              + np.tanh(self.beta * (gamma_f - self.xi))) / den
        dgp = self.beta * (1 - np.tanh(self.beta * (gamma_f - self.xi)) ** 2) \
            / den
        from manifold_topopt.mesh import DOMAIN_FLUID
        gp_q = np.zeros((self.mesh.n_elems, self.nq))
        dgp_q = np.zeros_like(gp_q)
        for e in range(self.mesh.n_elems):
            vals = gamma_f[self.mesh.quads_q1[e]]
            gf_q = self.N1 @ vals
            gp_q[e] = (np.tanh(self.beta * self.xi)
                       + np.tanh(self.beta * (gf_q - self.xi))) / den
            dgp_q[e] = self.beta \
                * (1 - np.tanh(self.beta * (gf_q - self.xi)) ** 2) / den
            if self.mesh.elem_domain[e] == DOMAIN_FLUID:
                gp_q[e] = 1.0
                dgp_q[e] = 0.0
        return gamma_f, gp_q, dgp_q

    def alpha_of(self, gp_q):
        a_s, a_f, q = self.alpha_s, self.alpha_f, self.q_interp
        return a_f + (a_s - a_f) * q * (1.0 - gp_q) / (q + gp_q)

    def dalpha_of(self, gp_q):
        a_s, a_f, q = self.alpha_s, self.alpha_f, self.q_interp
        return -(a_s - a_f) * q * (q + 1.0) / (q + gp_q) ** 2

    # -- flow -------------------------------------------------------------------

    def dof_u(self, node, comp):
        return comp * self.n2 + node

    def dof_p(self, node):
        return 2 * self.n2 + node

    def dirichlet(self):
        idx, val = [], []
        for node, vel in zip(self.inlet_nodes, self.inlet_vel):
            idx += [self.dof_u(node, 0), self.dof_u(node, 1)]
            val += [vel[0], vel[1]]
        for node in self.wall_nodes:
            idx += [self.dof_u(node, 0), self.dof_u(node, 1)]
            val += [0.0, 0.0]
        idx = np.asarray(idx)
        val = np.asarray(val)
        order = np.argsort(idx, kind="stable")
        idx, val = idx[order], val[order]
        keep = np.ones(len(idx), bool)
        keep[1:] = idx[1:] != idx[:-1]
        return idx[keep], val[keep]

    def assemble(self, x, alpha_q):
        mesh = self.mesh
        ndof = self.ndof
        R = np.zeros(ndof)
        rows, cols, vals = [], [], []
        for e in range(mesh.n_elems):
            c2 = mesh.quads_q2[e]
            c1 = mesh.quads_q1[e]
            ue = np.stack([x[c2], x[self.n2 + c2]], axis=1)  # (9, 2)
            pe = x[2 * self.n2 + c1]
            dofs = np.concatenate([c2, self.n2 + c2, 2 * self.n2 + c1])
            Ke = np.zeros((22, 22))
            Re = np.zeros(22)
            for iq in range(self.nq):
                w = self.wq[e, iq]
                n2 = self.N2[iq]
                n1 = self.N1[iq]
                d2 = self.dN2[e, iq]          # (9, 2)
                uq = ue.T @ n2                # (2,)
                gu = d2.T @ ue                # (2, 2): gu[i, j] = d_i u_j
                pq = n1 @ pe
                aq = alpha_q[e, iq]
                conv = gu.T @ uq              # (u . grad) u
                divu = gu[0, 0] + gu[1, 1]
                S = gu + gu.T
                for j in range(2):
                    base = j * 9
                    Re[base:base + 9] += w * (
                        self.rho * conv[j] * n2
                        + self.eta * (d2 @ S[:, j])
                        - pq * d2[:, j]
                        + aq * uq[j] * n2)
                Re[18:22] += -w * divu * n1
                # jacobian blocks
                for j in range(2):
                    for i in range(2):
                        blk = (self.rho * np.outer(n2, n2) * gu[i, j]
                               + self.eta * np.outer(d2[:, i], d2[:, j]))
                        if i == j:
                            blk += (self.eta * (d2 @ d2.T)
                                    + aq * np.outer(n2, n2)
                                    + self.rho * np.outer(n2, d2 @ uq))
                        Ke[j * 9:(j + 1) * 9, i * 9:(i + 1) * 9] += w * blk
                    Ke[j * 9:(j + 1) * 9, 18:22] += -w * np.outer(d2[:, j],
                                                                   n1)
                    Ke[18:22, j * 9:(j + 1) * 9] += -w * np.outer(n1,
                                                                   d2[:, j])
            np.add.at(R, dofs, Re)
            for a in range(22):
                rows.extend([dofs[a]] * 22)
                cols.extend(dofs)
                vals.extend(Ke[a])
        K = sp.coo_matrix((vals, (rows, cols)), shape=(ndof, ndof)).tocsc()
        return K, R

    def solve_flow(self, alpha_q, x0=None):
        idx, val = self.dirichlet()
        x = np.zeros(self.ndof) if x0 is None else x0.copy()
        x[idx] = val
        free = np.ones(self.ndof)
        free[idx] = 0.0
        D_free = sp.diags(free)
        D_bc = sp.diags(1.0 - free)
        for it in range(30):
            K, R = self.assemble(x, alpha_q)
            R[idx] = 0.0
            Kbc = (D_free @ K + D_bc).tocsc()
            dx = spla.splu(Kbc).solve(-R)
            x = x + dx
            if np.abs(dx).max() <= 1e-12 * max(1.0, self.U0):
                break
        self.K_last = K
        self.bc_idx = idx
        return x

    # -- objective + adjoint ------------------------------------------------------

    def objective(self, x, alpha_q):
        mesh = self.mesh
        J_diss = 0.0
        for e in range(mesh.n_elems):
            c2 = mesh.quads_q2[e]
            ue = np.stack([x[c2], x[self.n2 + c2]], axis=1)
            for iq in range(self.nq):
                w = self.wq[e, iq]
                d2 = self.dN2[e, iq]
                uq = ue.T @ self.N2[iq]
                gu = d2.T @ ue
                S = gu + gu.T
                J_diss += w * (0.5 * self.eta * np.sum(S * S)
                               + alpha_q[e, iq] * (uq @ uq))
        J_drop = 0.0
        for k, sign in self.bedges:
            e = self.mesh.be_elem[k]
            pe = x[2 * self.n2 + self.mesh.quads_q1[e]]
            for iq in range(3):
                pq = self.mesh.be_N1[k, iq] @ pe
                J_drop += sign * self.mesh.be_w[k, iq] * pq
        return self.omega * J_diss + (1 - self.omega) * J_drop, J_diss, J_drop

    def sensitivity_gamma(self, x, alpha_q, dalpha_q, dgp_q):
        """delta J / delta gamma via the adjoint chain (2D)."""
        mesh = self.mesh
        g = np.zeros(self.ndof)
        for e in range(mesh.n_elems):
            c2 = mesh.quads_q2[e]
            ue = np.stack([x[c2], x[self.n2 + c2]], axis=1)
            for iq in range(self.nq):
                w = self.wq[e, iq]
                n2 = self.N2[iq]
                d2 = self.dN2[e, iq]
                uq = ue.T @ n2
                gu = d2.T @ ue
                S = gu + gu.T
                for j in range(2):
                    g[self.dof_u(c2, j)] += w * (
                        2 * self.omega * self.eta * (d2 @ S[:, j])
                        + 2 * self.omega * alpha_q[e, iq] * uq[j] * n2)
        for k, sign in self.bedges:
            e = mesh.be_elem[k]
            c1 = mesh.quads_q1[e]
            for iq in range(3):
                g[2 * self.n2 + c1] += ((1 - self.omega) * sign
                                        * mesh.be_w[k, iq]
                                        * mesh.be_N1[k, iq])
        K = self.K_last
        idx = self.bc_idx
        free = np.ones(self.ndof)
        free[idx] = 0.0
        Kbc = (sp.diags(free) @ K.T + sp.diags(1.0 - free)).tocsc()
        rhs = -g
        rhs[idx] = 0.0
        xa = spla.splu(Kbc).solve(rhs)
        # pattern-filter adjoint
        h = np.zeros(self.n1)
        for e in range(mesh.n_elems):
            c2 = mesh.quads_q2[e]
            c1 = mesh.quads_q1[e]
            ue = np.stack([x[c2], x[self.n2 + c2]], axis=1)
            uae = np.stack([xa[c2], xa[self.n2 + c2]], axis=1)
            for iq in range(self.nq):
                w = self.wq[e, iq]
                uq = ue.T @ self.N2[iq]
                uaq = uae.T @ self.N2[iq]
                coef = dalpha_q[e, iq] * dgp_q[e, iq] * (
                    self.omega * (uq @ uq) + uq @ uaq)
                h[c1] += w * coef * self.N1[iq]
        gamma_fa = self.filter_lu.solve(-h)
        return -(self.mass @ gamma_fa)

    # -- one optimization step ----------------------------------------------------

    def step(self, gamma):
        gamma_f, gp_q, dgp_q = self.densities(gamma)
        alpha_q = self.alpha_of(gp_q)
        dalpha_q = self.dalpha_of(gp_q)
        x = self.solve_flow(alpha_q)
        J, J_diss, J_drop = self.objective(x, alpha_q)
        dJ = self.sensitivity_gamma(x, alpha_q, dalpha_q, dgp_q)
        return {"x": x, "J": J, "J_diss": J_diss, "J_drop": J_drop,
                "dJ": dJ, "gamma_f": gamma_f}
