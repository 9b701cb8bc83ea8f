"""Adjoint systems and design sensitivities.

Three responses are differentiated: the objective, the pattern area
fraction and the offset volume fraction. Each uses the same pattern:
solve the (transposed) flow linearization where the response sees the flow,
then the pattern-filter adjoint, then the offset-filter adjoint whose right
side collects every first-order dependence on d_f: operator variations of
the transformed gradients, the multiplier-direction variation, the
measure-factor derivatives weighting the full integrand, and the boundary
measure derivatives weighting the pressure-drop integrand.

All right-hand sides are exact derivatives of the discrete forms, so the
sensitivities match central finite differences of the full re-solved chain
to truncation accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from . import fem
from .flow import FlowAssembler, FlowBC, unpack
from .mesh import KIND_INLET, KIND_OPEN


@dataclass
class AdjointState:
    u_a: np.ndarray
    p_a: np.ndarray
    lam_a: np.ndarray
    gamma_fa: np.ndarray | None = None
    d_fa: np.ndarray | None = None


@dataclass
class SensitivityVector:
    """Measure-weighted nodal gradients for the two design variables."""

    wrt_gamma: np.ndarray   # linear nodes
    wrt_dm: np.ndarray      # quadratic nodes


# ---------------------------------------------------------------------------
# adjoint flow solve
# ---------------------------------------------------------------------------

def assemble_adjoint_operator(asm: FlowAssembler, x):
    """Adjoint flow operator assembled from the adjoint weak form.

    Mirrors the transposed linearization term by term (the test suite
    verifies it equals the transpose of the Newton matrix).
    """
    rho = asm.params.rho
    u_q, gu, _, _ = asm.state_at_qp(x)
    wM, tg2, N2 = asm.wM, asm.tg2, asm.N2
    ne = asm.mesh.n_elems
    # rho (u~_a . grad) u . u_a : test (a,j), trial (b,i)
    conv1 = rho * np.einsum("eq,qa,qb,eqji->eajbi", wM, N2, N2, gu)
    # rho (u . grad) u~_a . u_a
    ug = np.einsum("eqk,eqak->eqa", u_q, tg2)
    conv2 = rho * np.einsum("eq,eqa,qb->eab", wM, ug, N2)
    kuu = (conv1 + np.eye(3)[None, None, :, None, :]
           * conv2[:, :, None, :, None])
    kuu = kuu.transpose(0, 2, 1, 4, 3).reshape(ne, 27, 27) + asm.kuu_lin
    nn = (asm.ndof, asm.ndof)
    mat = fem.scatter(kuu, asm.conn_u, asm.conn_u, nn)
    # -p_a div u~_a  (test u~_a row, trial p_a col) and -p~_a div u_a
    mat += fem.scatter(asm.kup, asm.conn_u, asm.conn_p, nn)
    mat += fem.scatter(asm.kup.transpose(0, 2, 1), asm.conn_p, asm.conn_u, nn)
    # lambda_a u~_a . m and lambda~_a u_a . m
    mat += fem.scatter(asm.kul, asm.conn_u, asm.conn_l, nn)
    mat += fem.scatter(asm.kul.transpose(0, 2, 1), asm.conn_l, asm.conn_u, nn)
    return mat.tocsr()


def objective_partials(asm: FlowAssembler, x, factors, omega):
    """Gradient of the objective w.r.t. the packed flow state."""
    mesh = asm.mesh
    eta = asm.params.eta
    u_q, gu, _, _ = asm.state_at_qp(x)
    S = gu + gu.swapaxes(-1, -2)
    wM, tg2, N2 = asm.wM, asm.tg2, asm.N2
    g = np.zeros(asm.ndof)
    gu_part = (2.0 * omega * eta
               * np.einsum("eq,eqij,eqai->eja", wM, S, tg2)
               + 2.0 * omega
               * np.einsum("eq,eq,eqj,qa->eja", wM, asm.alpha, u_q, N2))
    np.add.at(g, asm.conn_u.ravel(),
              gu_part.reshape(mesh.n_elems, 27).ravel())
    # pressure-drop part: inlet minus open, line measure of the offset map
    sign = np.where(mesh.be_kind == KIND_INLET, 1.0,
                    np.where(mesh.be_kind == KIND_OPEN, -1.0, 0.0))
    gp_part = (1.0 - omega) * np.einsum(
        "e,eq,eqa->ea", sign, factors.wL, mesh.be_N1)
    conn_bp = asm.nu + mesh.quads_q1[mesh.be_elem]
    np.add.at(g, conn_bp.ravel(), gp_part.ravel())
    return g


def solve_adjoint_ns(asm: FlowAssembler, bc: FlowBC, x, g):
    """Solve the adjoint flow system for the response partials g."""
    mat = bc.restrain(assemble_adjoint_operator(asm, x))
    rhs = bc.homogeneous_rhs(-g)
    lu = spla.splu(mat)
    from .flow import _solve_refined
    xa = _solve_refined(lu, mat, rhs)
    u_a, p_a, lam_a = unpack(xa, asm.n2, asm.n1)
    return AdjointState(u_a=u_a.copy(), p_a=p_a.copy(), lam_a=lam_a.copy()), xa


# ---------------------------------------------------------------------------
# filter adjoints
# ---------------------------------------------------------------------------

def pattern_filter_adjoint_source(asm, x, xa, factors, dgp_qp, dalpha_qp,
                                  omega, include_objective=True):
    """Source of the gamma_f adjoint: objective and Darcy-coupling partials."""
    mesh = asm.mesh
    u_q, _, _, _ = asm.state_at_qp(x)
    ua_q = np.einsum("qa,eaj->eqj", asm.N2, xa_u(xa, asm)[mesh.quads_q2])
    uu = np.einsum("eqi,eqi->eq", u_q, u_q)
    uua = np.einsum("eqi,eqi->eq", u_q, ua_q)
    coef = dalpha_qp * dgp_qp * uua
    if include_objective:
        coef = coef + omega * dalpha_qp * dgp_qp * uu
    blocks = np.einsum("eq,eq,qa->ea", factors.wM, coef, asm.N1)
    return fem.scatter_vector(blocks, mesh.quads_q1, mesh.n_q1)


def xa_u(xa, asm):
    return unpack(xa, asm.n2, asm.n1)[0]


def solve_adjoint_pattern_filter(pattern_lu, source):
    """The pattern-filter operator is symmetric; reuse its factorization."""
    return pattern_lu.solve(-source)


def solve_adjoint_offset_filter(manifold_lu, source):
    """The offset-filter operator is symmetric; reuse its factorization."""
    return manifold_lu.solve(-source)


def _ladj(b, bb, X, Y):
    """Adjoint of the gradient-variation: w . ladj = Y . dT(X; w).

    ladj = (Y.b/bb) X + (b.X/bb) Y - 2 (b.X)(Y.b)/bb^2 b.
    """
    yb = np.einsum("...i,...i", Y, b)
    bx = np.einsum("...i,...i", b, X)
    return ((yb / bb)[..., None] * X + (bx / bb)[..., None] * Y
            - (2.0 * bx * yb / bb ** 2)[..., None] * b)


def offset_filter_adjoint_source_flow(asm, x, xa, factors, gamma_qp,
                                      gammaf_nodal, gamma_fa, r_f, omega,
                                      alpha_qp):
    """Right side of the d_f adjoint for the objective response.

    Collects, per volume quadrature point, the scalar coefficient of the
    test function (measure-factor derivative terms) and the vector
    coefficient of its tangential gradient (operator variations), plus the
    boundary measure-derivative terms of the pressure-drop integrand.
    """
    mesh = asm.mesh
    params = asm.params
    eta, rho = params.eta, params.rho
    u_q, gu, p_q, lam_q = asm.state_at_qp(x)
    ua_q, gua, pa_q, lama_q = asm.state_at_qp(xa)
    b = factors.b
    bb = factors.bb
    m = asm.m_dir
    wM = factors.wM
    w = mesh.w

    u_e = unpack(x, asm.n2, asm.n1)[0][mesh.quads_q2]
    ua_e = unpack(xa, asm.n2, asm.n1)[0][mesh.quads_q2]
    # base-manifold (untransformed) gradients drive the operator variations
    gu_sig = np.einsum("eqai,eaj->eqij", mesh.gradN2, u_e)
    gua_sig = np.einsum("eqai,eaj->eqij", mesh.gradN2, ua_e)
    S = gu + gu.swapaxes(-1, -2)
    Sa = gua + gua.swapaxes(-1, -2)

    gf_q = mesh.interpolate_q1(gammaf_nodal)
    gfa_q = mesh.interpolate_q1(gamma_fa)
    tgf = np.einsum("eqad,ea->eqd", asm.tg1, gammaf_nodal[mesh.quads_q1])
    tgfa = np.einsum("eqad,ea->eqd", asm.tg1, gamma_fa[mesh.quads_q1])
    gf_sig = mesh.gradient_q1(gammaf_nodal)
    gfa_sig = mesh.gradient_q1(gamma_fa)

    conv = np.einsum("eqi,eqij->eqj", u_q, gu)
    div_u = np.einsum("eqii->eq", gu)
    div_ua = np.einsum("eqii->eq", gua)
    lam_pair = lam_q[..., None] * ua_q + lama_q[..., None] * u_q

    a_obj = omega * (0.5 * eta * np.einsum("eqij,eqij->eq", S, S)
                     + alpha_qp * np.einsum("eqi,eqi->eq", u_q, u_q))
    forward_pair = (rho * np.einsum("eqj,eqj->eq", conv, ua_q)
                    + 0.5 * eta * np.einsum("eqij,eqij->eq", S, Sa)
                    - p_q * div_ua - pa_q * div_u
                    + alpha_qp * np.einsum("eqi,eqi->eq", u_q, ua_q)
                    + np.einsum("eqi,eqi->eq", lam_pair, m))
    filter_pair = (r_f * r_f * np.einsum("eqd,eqd->eq", tgf, tgfa)
                   + gf_q * gfa_q - gamma_qp * gfa_q)
    bracket = a_obj + forward_pair + filter_pair

    f_scal = w * bracket * factors.dM_ddf
    f_vec = (w * bracket)[..., None] * factors.dM_dgrad

    # operator variations, all weighted by the offset measure
    eye = np.eye(3)
    acc = np.zeros_like(f_vec)
    for j in range(3):
        xu = gu_sig[..., :, j]
        xua = gua_sig[..., :, j]
        # dA/d(grad u) : dgrad(u) with dA/dgrad = 2 omega eta S
        acc += _ladj(b, bb, xu, 2.0 * omega * eta * S[..., :, j])
        # convection: rho u_a,j (u . dT(grad u_j))
        acc += rho * ua_q[..., j, None] * _ladj(b, bb, xu, u_q)
        # viscous pairing, both slots
        acc += eta * _ladj(b, bb, xu, Sa[..., :, j])
        acc += eta * _ladj(b, bb, xua, S[..., :, j])
        # pressure/divergence pairings
        acc += -pa_q[..., None] * _ladj(b, bb, xu,
                                        np.broadcast_to(eye[j], xu.shape))
        acc += -p_q[..., None] * _ladj(b, bb, xua,
                                       np.broadcast_to(eye[j], xua.shape))
    # coupled-filter cross terms
    acc += r_f * r_f * (_ladj(b, bb, gf_sig, tgfa)
                        + _ladj(b, bb, gfa_sig, tgf))
    f_vec += wM[..., None] * acc

    # multiplier direction variation (same sign convention as the state form)
    s = float(params.lambda_direction_sign)
    bs = mesh.normal + s * factors.grad_df
    bbs = np.einsum("...i,...i", bs, bs) + factors.eps0
    vb = np.einsum("eqi,eqi->eq", lam_pair, bs)
    dmdir = s * (lam_pair / np.sqrt(bbs)[..., None]
                 - bs * (vb / bbs ** 1.5)[..., None])
    f_vec += wM[..., None] * dmdir

    # tangential penalty (uniform quadrature weight, direction varies)
    pen_w = asm.pen_w
    um = np.einsum("eqi,eqi->eq", u_q, m)
    uam = np.einsum("eqi,eqi->eq", ua_q, m)
    ub = np.einsum("eqi,eqi->eq", u_q, bs)
    uab = np.einsum("eqi,eqi->eq", ua_q, bs)
    dpen = (uam[..., None] * (u_q / np.sqrt(bbs)[..., None]
                              - bs * (ub / bbs ** 1.5)[..., None])
            + um[..., None] * (ua_q / np.sqrt(bbs)[..., None]
                               - bs * (uab / bbs ** 1.5)[..., None]))
    f_vec += (pen_w * s)[..., None] * dpen

    rhs = _assemble_q2_functional(mesh, f_scal, f_vec)

    # boundary: pressure-drop integrand times line-measure derivatives
    bsign = np.where(mesh.be_kind == KIND_INLET, 1.0,
                     np.where(mesh.be_kind == KIND_OPEN, -1.0, 0.0))
    p_nodal = unpack(x, asm.n2, asm.n1)[1]
    pb = np.einsum("eqa,ea->eq", mesh.be_N1, p_nodal[mesh.quads_q1[mesh.be_elem]])
    Bint = (1.0 - omega) * bsign[:, None] * pb
    g_scal = mesh.be_w * Bint * factors.dL_ddf
    g_vec = (mesh.be_w * Bint)[..., None] * factors.dL_dgrad
    rhs += _assemble_boundary_q2_functional(mesh, g_scal, g_vec)
    return rhs


def offset_filter_adjoint_source_area(asm_or_mesh, factors, gamma_qp,
                                      gammaf_nodal, gamma_fa, r_f,
                                      integrand_qp):
    """Right side of the d_f adjoint for area-type responses.

    integrand_qp is gamma_p (pattern area) or ones (total area).
    """
    mesh = getattr(asm_or_mesh, "mesh", asm_or_mesh)
    b = factors.b
    bb = factors.bb
    w = mesh.w
    wM = factors.wM
    tg1 = _tg1(mesh, factors)
    gf_q = mesh.interpolate_q1(gammaf_nodal)
    gfa_q = mesh.interpolate_q1(gamma_fa)
    tgf = np.einsum("eqad,ea->eqd", tg1, gammaf_nodal[mesh.quads_q1])
    tgfa = np.einsum("eqad,ea->eqd", tg1, gamma_fa[mesh.quads_q1])
    gf_sig = mesh.gradient_q1(gammaf_nodal)
    gfa_sig = mesh.gradient_q1(gamma_fa)

    filter_pair = (r_f * r_f * np.einsum("eqd,eqd->eq", tgf, tgfa)
                   + gf_q * gfa_q - gamma_qp * gfa_q)
    bracket = integrand_qp + filter_pair
    f_scal = w * bracket * factors.dM_ddf
    f_vec = (w * bracket)[..., None] * factors.dM_dgrad
    f_vec += wM[..., None] * (r_f * r_f * (_ladj(b, bb, gf_sig, tgfa)
                                           + _ladj(b, bb, gfa_sig, tgf)))
    return _assemble_q2_functional(mesh, f_scal, f_vec)


def _tg1(mesh, factors):
    from .geometry import transformed_gradient
    return transformed_gradient(mesh.gradN1, factors.grad_df[..., None, :],
                                mesh.normal[..., None, :], factors.eps0)


def _assemble_q2_functional(mesh, f_scal, f_vec):
    n2 = fem.VOLUME_TABLES.n2
    blocks = (np.einsum("eq,qa->ea", f_scal, n2)
              + np.einsum("eqd,eqad->ea", f_vec, mesh.gradN2))
    return fem.scatter_vector(blocks, mesh.quads_q2, mesh.n_q2)


def _assemble_boundary_q2_functional(mesh, g_scal, g_vec):
    blocks = (np.einsum("eq,eqa->ea", g_scal, mesh.be_N2)
              + np.einsum("eqd,eqad->ea", g_vec, mesh.be_gradN2))
    conn = mesh.quads_q2[mesh.be_elem]
    return fem.scatter_vector(blocks, conn, mesh.n_q2)


# ---------------------------------------------------------------------------
# sensitivity assembly
# ---------------------------------------------------------------------------

def sensitivity_from_adjoints(mesh, factors, gamma_fa, d_fa, A_d):
    """Nodal sensitivity vectors from the two filter adjoints."""
    gfa_q = mesh.interpolate_q1(gamma_fa)
    n1 = fem.VOLUME_TABLES.n1
    wg = -np.einsum("eq,eq,qa->ea", factors.wM, gfa_q, n1)
    wrt_gamma = fem.scatter_vector(wg, mesh.quads_q1, mesh.n_q1)
    dfa_q = mesh.interpolate_q2(d_fa)
    n2 = fem.VOLUME_TABLES.n2
    wd = -A_d * np.einsum("eq,eq,qa->ea", mesh.w, dfa_q, n2)
    wrt_dm = fem.scatter_vector(wd, mesh.quads_q2, mesh.n_q2)
    return SensitivityVector(wrt_gamma=wrt_gamma, wrt_dm=wrt_dm)


def sensitivity_volume(mesh, manifold_lu, A_d):
    """Volume sensitivity; the adjoint is the constant -1/|Sigma|."""
    n2 = fem.VOLUME_TABLES.n2
    area = mesh.w.sum()
    src = fem.scatter_vector(
        np.einsum("eq,qa->ea", mesh.w / area, n2), mesh.quads_q2, mesh.n_q2)
    d_fa = manifold_lu.solve(-src)
    wd = -A_d * np.einsum("eq,eq,qa->ea", mesh.w,
                          mesh.interpolate_q2(d_fa), n2)
    wrt_dm = fem.scatter_vector(wd, mesh.quads_q2, mesh.n_q2)
    return SensitivityVector(wrt_gamma=np.zeros(mesh.n_q1), wrt_dm=wrt_dm), d_fa
