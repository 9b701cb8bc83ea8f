"""Full design-to-response pipeline on one mesh.

Chains the offset filter, the coupled pattern filter, the threshold
projection, the flow solve and the three responses (objective, pattern area
fraction, offset volume fraction), and drives the adjoint solves that
return nodal sensitivities for both design variables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from . import adjoint as adj
from . import fem, fields, flow, geometry
from .fields import DesignState, FilterParams
from .flow import FlowAssembler, FlowBC, FluidParams, FlowState


@dataclass
class ForwardResult:
    design: DesignState
    state: FlowState
    J: float
    J_dissipation: float
    J_pressure_drop: float
    s: float
    area_gamma: float
    v: float
    alpha_qp: np.ndarray
    dalpha_qp: np.ndarray
    dgp_qp: np.ndarray
    gamma_qp: np.ndarray
    pattern_lu: object


class SurfaceFlowProblem:
    """Design pipeline bound to one mesh and one parameter set.

    gamma is stored on all linear nodes; nodes outside the design domain
    are pinned at one (enforced fluid). d_m lives on all quadratic nodes.
    """

    def __init__(self, mesh, fluid: FluidParams, filters: FilterParams,
                 omega: float = 0.9):
        filters.validate()
        self.mesh = mesh
        self.fluid = fluid
        self.filters = filters
        self.omega = float(omega)
        self.design_mask = mesh.design_q1_mask()
        self.manifold_op = fields.manifold_filter_operator(mesh, filters.r_m)
        self.manifold_lu = spla.splu(self.manifold_op.tocsc())
        self.sigma_area = float(mesh.w.sum())

    # -- design handling -----------------------------------------------------

    def initial_design(self, s0, v0):
        gamma = np.ones(self.mesh.n_q1)
        gamma[self.design_mask] = s0
        d_m = np.full(self.mesh.n_q2, v0 + 0.5)
        return gamma, d_m

    def clamp_fixed(self, gamma):
        out = np.asarray(gamma, dtype=float).copy()
        out[~self.design_mask] = 1.0
        return out

    # -- forward chain ---------------------------------------------------------

    def forward(self, gamma, d_m, x0=None) -> ForwardResult:
        mesh = self.mesh
        fp = self.filters
        gamma = self.clamp_fixed(gamma)
        d_f = fields.filter_manifold(d_m, mesh, fp.r_m, fp.A_d,
                                     solver=self.manifold_lu)
        factors = geometry.GeometricFactors(mesh, d_f)
        pattern_op = fields.pattern_filter_operator(mesh, factors, fp.r_f)
        pattern_lu = spla.splu(pattern_op.tocsc())
        gamma_f = fields.filter_pattern(gamma, mesh, factors, fp.r_f,
                                        solver=pattern_lu)
        gp_qp, dgp_qp = fields.project_at_quadrature(mesh, gamma_f, fp.beta,
                                                     fp.xi)
        alpha_qp = fields.impermeability(gp_qp, self.fluid.alpha_s,
                                         self.fluid.alpha_f, self.fluid.q)
        dalpha_qp = fields.impermeability_derivative(
            gp_qp, self.fluid.alpha_s, self.fluid.alpha_f, self.fluid.q)
        state = flow.solve_surface_ns(mesh, factors, alpha_qp, self.fluid,
                                      x0=x0)
        J, j_diss, j_drop = flow.evaluate_objective(
            state, alpha_qp, factors, mesh, self.fluid, self.omega)
        s, area_gamma = flow.evaluate_area(gp_qp, factors)
        v = flow.evaluate_volume(d_f, mesh)
        design = DesignState(gamma=gamma, d_m=np.asarray(d_m, float).copy(),
                             gamma_f=gamma_f, d_f=d_f, gamma_p=gp_qp,
                             factors=factors)
        return ForwardResult(
            design=design, state=state, J=J, J_dissipation=j_diss,
            J_pressure_drop=j_drop, s=s, area_gamma=area_gamma, v=v,
            alpha_qp=alpha_qp, dalpha_qp=dalpha_qp, dgp_qp=dgp_qp,
            gamma_qp=mesh.interpolate_q1(gamma), pattern_lu=pattern_lu)

    # -- adjoint chain ---------------------------------------------------------

    def sensitivities(self, fw: ForwardResult):
        """Nodal gradients of J, s and v w.r.t. (gamma, d_m).

        Entries of the gamma sensitivity outside the design domain are
        zeroed (those nodes are not design variables).
        """
        mesh = self.mesh
        fp = self.filters
        asm = FlowAssembler(mesh, fw.design.factors, fw.alpha_qp, self.fluid)
        bc = FlowBC(mesh, self.fluid)
        x = fw.state.pack()

        # objective
        g = adj.objective_partials(asm, x, fw.design.factors, self.omega)
        _, xa = adj.solve_adjoint_ns(asm, bc, x, g)
        h = adj.pattern_filter_adjoint_source(
            asm, x, xa, fw.design.factors, fw.dgp_qp, fw.dalpha_qp,
            self.omega)
        gamma_fa = adj.solve_adjoint_pattern_filter(fw.pattern_lu, h)
        kJ = adj.offset_filter_adjoint_source_flow(
            asm, x, xa, fw.design.factors, fw.gamma_qp, fw.design.gamma_f,
            gamma_fa, fp.r_f, self.omega, fw.alpha_qp)
        d_fa = adj.solve_adjoint_offset_filter(self.manifold_lu, kJ)
        dJ = adj.sensitivity_from_adjoints(mesh, fw.design.factors, gamma_fa,
                                           d_fa, fp.A_d)

        # pattern area: quotient of the weighted area and the total area
        n1 = fem.VOLUME_TABLES.n1
        src1 = fem.scatter_vector(
            np.einsum("eq,eq,qa->ea", fw.design.factors.wM, fw.dgp_qp, n1),
            mesh.quads_q1, mesh.n_q1)
        gamma_fa1 = adj.solve_adjoint_pattern_filter(fw.pattern_lu, src1)
        k1 = adj.offset_filter_adjoint_source_area(
            mesh, fw.design.factors, fw.gamma_qp, fw.design.gamma_f,
            gamma_fa1, fp.r_f, fw.design.gamma_p)
        d_fa1 = adj.solve_adjoint_offset_filter(self.manifold_lu, k1)
        dS1 = adj.sensitivity_from_adjoints(mesh, fw.design.factors,
                                            gamma_fa1, d_fa1, fp.A_d)
        gamma_fa2 = adj.solve_adjoint_pattern_filter(
            fw.pattern_lu, np.zeros(mesh.n_q1))
        k2 = adj.offset_filter_adjoint_source_area(
            mesh, fw.design.factors, fw.gamma_qp, fw.design.gamma_f,
            gamma_fa2, fp.r_f, np.ones_like(fw.dgp_qp))
        d_fa2 = adj.solve_adjoint_offset_filter(self.manifold_lu, k2)
        dS2 = adj.sensitivity_from_adjoints(mesh, fw.design.factors,
                                            gamma_fa2, d_fa2, fp.A_d)
        inv_area = 1.0 / fw.area_gamma
        ds = adj.SensitivityVector(
            wrt_gamma=inv_area * (dS1.wrt_gamma - fw.s * dS2.wrt_gamma),
            wrt_dm=inv_area * (dS1.wrt_dm - fw.s * dS2.wrt_dm))

        dv, _ = adj.sensitivity_volume(mesh, self.manifold_lu, fp.A_d)

        for vec in (dJ, ds, dv):
            vec.wrt_gamma[~self.design_mask] = 0.0
        return {"J": dJ, "s": ds, "v": dv}


# ---------------------------------------------------------------------------
# finite-difference verification harness
# ---------------------------------------------------------------------------

def gradient_check(problem: SurfaceFlowProblem, gamma, d_m, n_directions=5,
                   h=1e-5, seed=0, responses=("J", "s", "v")):
    """Central-difference check of every sensitivity with full re-solves.

    Returns a list of dict rows (response, variable, direction, analytic,
    fd, rel_err).
    """
    rng = np.random.default_rng(seed)
    base = problem.forward(gamma, d_m)
    sens = problem.sensitivities(base)
    x_warm = base.state.pack()
    rows = []

    def response_of(fw):
        return {"J": fw.J, "s": fw.s, "v": fw.v}

    for var in ("gamma", "d_m"):
        for k in range(n_directions):
            if var == "gamma":
                direction = rng.standard_normal(problem.mesh.n_q1)
                direction[~problem.design_mask] = 0.0
                fw_p = problem.forward(gamma + h * direction, d_m, x0=x_warm)
                fw_m = problem.forward(gamma - h * direction, d_m, x0=x_warm)
            else:
                direction = rng.standard_normal(problem.mesh.n_q2)
                fw_p = problem.forward(gamma, d_m + h * direction, x0=x_warm)
                fw_m = problem.forward(gamma, d_m - h * direction, x0=x_warm)
            rp, rm = response_of(fw_p), response_of(fw_m)
            for resp in responses:
                fd = (rp[resp] - rm[resp]) / (2.0 * h)
                vec = sens[resp]
                grad = vec.wrt_gamma if var == "gamma" else vec.wrt_dm
                analytic = float(grad @ direction)
                denom = max(abs(analytic), abs(fd), 1e-300)
                rel = abs(analytic - fd) / denom
                rows.append({
                    "response": resp, "variable": var, "direction": k,
                    "analytic": analytic, "fd": fd, "rel_err": rel,
                })
    return rows
