"""Design fields: surface-PDE filters, threshold projection, impermeability.

Two Helmholtz-type filters regularize the design variables. The offset
filter lives on the base manifold with the plain surface measure; the
pattern filter is posed on the offset surface, so its stiffness uses the
transformed gradients and every term carries the area measure factor. Both
conserve constants exactly (homogeneous Neumann).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from . import fem, geometry


@dataclass
class FilterParams:
    """Filter radii, offset amplitude and projection parameters.

    Radii are in mesh length units; the defaults are the standard fractions
    of the unit characteristic length (r_f = 1/50, r_m = 2/25).
    """

    r_f: float = 1.0 / 50.0
    r_m: float = 2.0 / 25.0
    A_d: float = 0.0
    beta: float = 1.0
    xi: float = 0.5

    def validate(self):
        if self.r_f <= 0 or self.r_m <= 0:
            raise ValueError("filter radii must be positive")
        if self.A_d < 0:
            raise ValueError("offset amplitude A_d must be nonnegative")
        if self.beta < 1:
            raise ValueError("projection sharpness beta must be >= 1")
        if not 0.0 < self.xi < 1.0:
            raise ValueError("projection threshold xi must be in (0, 1)")


@dataclass
class DesignState:
    """Design variables and their filtered/projected companions.

    gamma lives on the linear nodes (free only on design-domain nodes),
    d_m and d_f on the quadratic nodes; gamma_p is evaluated at quadrature
    points where the flow assembly consumes it.
    """

    gamma: np.ndarray
    d_m: np.ndarray
    gamma_f: np.ndarray | None = None
    d_f: np.ndarray | None = None
    gamma_p: np.ndarray | None = None   # (ne, nq)
    factors: geometry.GeometricFactors | None = None


# ---------------------------------------------------------------------------
# offset (manifold) filter on the base manifold
# ---------------------------------------------------------------------------

def manifold_filter_operator(mesh, r_m):
    """SPD operator of the offset filter on the quadratic space."""
    tab = fem.VOLUME_TABLES
    w = mesh.w
    stiff = np.einsum("eq,eqad,eqbd->eab", w, mesh.gradN2, mesh.gradN2)
    mass = np.einsum("eq,qa,qb->eab", w, tab.n2, tab.n2)
    blocks = r_m * r_m * stiff + mass
    return fem.scatter(blocks, mesh.quads_q2, mesh.quads_q2,
                       (mesh.n_q2, mesh.n_q2))


def mass_matrix_q2(mesh):
    tab = fem.VOLUME_TABLES
    blocks = np.einsum("eq,qa,qb->eab", mesh.w, tab.n2, tab.n2)
    return fem.scatter(blocks, mesh.quads_q2, mesh.quads_q2,
                       (mesh.n_q2, mesh.n_q2))


def filter_manifold(d_m, mesh, r_m, A_d, solver=None):
    """Solve the offset filter: d_f from the source A_d (d_m - 1/2).

    Returns the nodal d_f on the quadratic space. ``solver`` may carry a
    prefactorized operator (scipy splu) for reuse.
    """
    d_m = np.asarray(d_m, dtype=float)
    if d_m.shape[0] != mesh.n_q2:
        raise ValueError("d_m must live on the quadratic space")
    tab = fem.VOLUME_TABLES
    src = A_d * (mesh.interpolate_q2(d_m) - 0.5)
    rhs = fem.scatter_vector(
        np.einsum("eq,qa->ea", mesh.w * src, tab.n2),
        mesh.quads_q2, mesh.n_q2)
    if solver is None:
        solver = spla.splu(manifold_filter_operator(mesh, r_m).tocsc())
    return solver.solve(rhs)


# ---------------------------------------------------------------------------
# pattern filter on the offset surface
# ---------------------------------------------------------------------------

def pattern_filter_operator(mesh, factors, r_f):
    """Measure-weighted Helmholtz operator of the pattern filter (Q1)."""
    g1 = factors.transformed_grad_tables()[1]
    wM = factors.wM
    tab = fem.VOLUME_TABLES
    stiff = np.einsum("eq,eqad,eqbd->eab", wM, g1, g1)
    mass = np.einsum("eq,qa,qb->eab", wM, tab.n1, tab.n1)
    blocks = r_f * r_f * stiff + mass
    return fem.scatter(blocks, mesh.quads_q1, mesh.quads_q1,
                       (mesh.n_q1, mesh.n_q1))


def mass_matrix_q1_weighted(mesh, factors):
    tab = fem.VOLUME_TABLES
    blocks = np.einsum("eq,qa,qb->eab", factors.wM, tab.n1, tab.n1)
    return fem.scatter(blocks, mesh.quads_q1, mesh.quads_q1,
                       (mesh.n_q1, mesh.n_q1))


def filter_pattern(gamma, mesh, factors, r_f, solver=None):
    """Solve the coupled pattern filter for gamma_f on the linear space."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape[0] != mesh.n_q1:
        raise ValueError("gamma must live on the linear space")
    tab = fem.VOLUME_TABLES
    src = mesh.interpolate_q1(gamma)
    rhs = fem.scatter_vector(
        np.einsum("eq,qa->ea", factors.wM * src, tab.n1),
        mesh.quads_q1, mesh.n_q1)
    if solver is None:
        solver = spla.splu(pattern_filter_operator(mesh, factors, r_f).tocsc())
    return solver.solve(rhs)


# ---------------------------------------------------------------------------
# threshold projection and impermeability interpolation
# ---------------------------------------------------------------------------

def project(gamma_f, beta, xi):
    """Smoothed threshold pushing the filtered density toward 0/1."""
    gamma_f = np.asarray(gamma_f, dtype=float)
    den = np.tanh(beta * xi) + np.tanh(beta * (1.0 - xi))
    return (np.tanh(beta * xi) + np.tanh(beta * (gamma_f - xi))) / den


def projection_derivative(gamma_f, beta, xi):
    gamma_f = np.asarray(gamma_f, dtype=float)
    den = np.tanh(beta * xi) + np.tanh(beta * (1.0 - xi))
    return beta * (1.0 - np.tanh(beta * (gamma_f - xi)) ** 2) / den


def impermeability(gamma_p, alpha_s, alpha_f=0.0, q=1.0):
    """Convex interpolation between fluid (gamma_p=1) and solid (gamma_p=0)."""
    gamma_p = np.asarray(gamma_p, dtype=float)
    return alpha_f + (alpha_s - alpha_f) * q * (1.0 - gamma_p) / (q + gamma_p)


def impermeability_derivative(gamma_p, alpha_s, alpha_f=0.0, q=1.0):
    gamma_p = np.asarray(gamma_p, dtype=float)
    return -(alpha_s - alpha_f) * q * (q + 1.0) / (q + gamma_p) ** 2


def project_at_quadrature(mesh, gamma_f, beta, xi):
    """Projected density and its gamma_f-derivative at quadrature points.

    Fluid-domain elements carry an enforced density of one, so both the
    value is overwritten and the derivative is zeroed there.
    """
    gf_q = mesh.interpolate_q1(gamma_f)
    gp = project(gf_q, beta, xi)
    dgp = projection_derivative(gf_q, beta, xi)
    from .mesh import DOMAIN_FLUID
    fluid = mesh.elem_domain == DOMAIN_FLUID
    gp[fluid] = 1.0
    dgp[fluid] = 0.0
    return gp, dgp
