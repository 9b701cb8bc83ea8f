"""Transformed differential geometry of the normal-offset surface.

All quantities are evaluated pointwise (vectorized over leading axes) from
the filtered offset field d_f and its tangential gradient on the base
manifold. With b = n_sigma - grad(d_f):

  unit normal           n = b / ||b||
  tangential gradient   T(X) = X - (b . X / ||b||^2) b
  map jacobian          J = outer(grad d_f, n_sigma) + d_f * shape_op + I
  area factor           M = det(J) / ||J n||
  line factor           L = ||J^T tau|| / ||J^-1 J^T tau||

Vector norms are regularized as sqrt(v.v + eps0) so every expression stays
smooth; the analytic first-order derivatives below differentiate the
regularized forms exactly, which is what the finite-difference oracles in
the test suite check against.
"""

from __future__ import annotations

import numpy as np

#: Norm regularization at floating-point-precision scale. Large enough to
#: keep adjoint denominators finite, small enough that unit vectors are
#: perturbed by ~5e-17 only.
EPS0 = 1e-16


class ManifoldDegenerationError(RuntimeError):
    """Offset map lost injectivity (non-positive jacobian determinant)."""


def regularized_norm(v, eps0=EPS0):
    """Smooth 2-norm sqrt(v.v + eps0) over the last axis."""
    v = np.asarray(v, dtype=float)
    return np.sqrt(np.einsum("...i,...i", v, v) + eps0)


def norm_variational(f, delta_f, eps0=EPS0):
    """First-order variation of the regularized norm: (f/||f||) . delta_f."""
    f = np.asarray(f, dtype=float)
    return np.einsum("...i,...i", f, delta_f) / regularized_norm(f, eps0)


def transformed_normal(grad_df, n_sigma, eps0=EPS0):
    """Unit normal of the offset surface, b/||b|| with b = n_sigma - grad_df."""
    b = np.asarray(n_sigma, dtype=float) - np.asarray(grad_df, dtype=float)
    return b / regularized_norm(b, eps0)[..., None]


def _b_bb(grad_df, n_sigma, eps0):
    b = np.asarray(n_sigma, dtype=float) - np.asarray(grad_df, dtype=float)
    bb = np.einsum("...i,...i", b, b) + eps0
    return b, bb


def transformed_gradient(grad_sigma_g, grad_df, n_sigma, eps0=EPS0):
    """Offset-surface tangential gradient of a scalar field.

    grad_sigma_g: base-manifold tangential gradient, shape (..., 3).
    """
    b, bb = _b_bb(grad_df, n_sigma, eps0)
    coef = np.einsum("...i,...i", b, grad_sigma_g) / bb
    return np.asarray(grad_sigma_g, dtype=float) - coef[..., None] * b


def transformed_gradient_matrix(grad_sigma_G, grad_df, n_sigma, eps0=EPS0):
    """Columnwise transform of a stacked gradient (..., 3, 3).

    Convention: (grad G)[i, j] = (grad of component j)[i].
    """
    b, bb = _b_bb(grad_df, n_sigma, eps0)
    coef = np.einsum("...i,...ij->...j", b, grad_sigma_G) / bb[..., None]
    return np.asarray(grad_sigma_G, dtype=float) \
        - b[..., :, None] * coef[..., None, :]


def transformed_divergence(grad_sigma_G, grad_df, n_sigma, eps0=EPS0):
    """Offset-surface divergence: trace of the transformed gradient."""
    b, bb = _b_bb(grad_df, n_sigma, eps0)
    tr = np.einsum("...ii", np.asarray(grad_sigma_G, dtype=float))
    quad = np.einsum("...i,...ij,...j", b, grad_sigma_G, b)
    return tr - quad / bb


def gradient_variational(grad_sigma_g, grad_df, grad_df_tilde, n_sigma,
                         eps0=EPS0):
    """Derivative of transformed_gradient w.r.t. d_f in direction d_f~.

    Linear in grad_df_tilde; matches central differences of
    transformed_gradient exactly up to truncation.
    """
    b, bb = _b_bb(grad_df, n_sigma, eps0)
    w = np.asarray(grad_df_tilde, dtype=float)
    x = np.asarray(grad_sigma_g, dtype=float)
    bx = np.einsum("...i,...i", b, x)
    wx = np.einsum("...i,...i", w, x)
    bw = np.einsum("...i,...i", b, w)
    return (wx / bb)[..., None] * b + (bx / bb)[..., None] * w \
        - (2.0 * bx * bw / bb ** 2)[..., None] * b


def divergence_variational(grad_sigma_G, grad_df, grad_df_tilde, n_sigma,
                           eps0=EPS0):
    """Derivative of transformed_divergence w.r.t. d_f in direction d_f~."""
    b, bb = _b_bb(grad_df, n_sigma, eps0)
    w = np.asarray(grad_df_tilde, dtype=float)
    G = np.asarray(grad_sigma_G, dtype=float)
    bG = np.einsum("...i,...ij->...j", b, G)     # b . grad(G_j)
    wG = np.einsum("...i,...ij->...j", w, G)
    bw = np.einsum("...i,...i", b, w)
    # trace of the columnwise three-term formula
    term1 = np.einsum("...j,...j", wG, b) / bb
    term2 = np.einsum("...j,...j", bG, w) / bb
    term3 = 2.0 * bw * np.einsum("...j,...j", bG, b) / bb ** 2
    return term1 + term2 - term3


def normal_variational(grad_df, grad_df_tilde, n_sigma, eps0=EPS0):
    """Derivative of the offset unit normal w.r.t. d_f in direction d_f~."""
    b, bb = _b_bb(grad_df, n_sigma, eps0)
    w = np.asarray(grad_df_tilde, dtype=float)
    rn = np.sqrt(bb)
    bw = np.einsum("...i,...i", b, w)
    return -w / rn[..., None] + b * (bw / rn ** 3)[..., None]


def map_jacobian(d_f, grad_df, n_sigma, shape_op):
    """Offset-map jacobian J = outer(grad_df, n_sigma) + d_f*shape_op + I.

    Returns (J, det). Raises ManifoldDegenerationError when det <= 0
    anywhere (the offset self-intersects; the run cannot continue).
    """
    d_f = np.asarray(d_f, dtype=float)
    g = np.asarray(grad_df, dtype=float)
    n = np.asarray(n_sigma, dtype=float)
    jac = g[..., :, None] * n[..., None, :] \
        + d_f[..., None, None] * np.asarray(shape_op, dtype=float) \
        + np.eye(3)
    det = np.linalg.det(jac)
    if not np.all(det > 0.0):
        worst = float(det.min())
        raise ManifoldDegenerationError(
            f"offset map not orientation-preserving: min det = {worst:.3e}; "
            "reduce the offset amplitude or filter radius")
    return jac, det


def area_measure_factor(jac, det, grad_df, n_sigma, shape_op, eps0=EPS0):
    """Area measure ratio M = det(J)/||J n|| and its derivatives.

    Returns (M, dM_d_df, dM_d_grad_df); the derivatives are exact
    derivatives of the regularized expression, with n = b/||b|| depending on
    grad_df and J depending on both d_f (through the curvature term) and
    grad_df (through the rank-one term).
    """
    jac = np.asarray(jac, dtype=float)
    det = np.asarray(det, dtype=float)
    n = np.asarray(n_sigma, dtype=float)
    b, bb = _b_bb(grad_df, n_sigma, eps0)
    rb = np.sqrt(bb)
    ng = b / rb[..., None]

    jn = np.einsum("...ij,...j->...i", jac, ng)
    den = np.sqrt(np.einsum("...i,...i", jn, jn) + eps0)
    M = det / den

    inv = np.linalg.inv(jac)

    # d_f enters J only through the curvature term
    ddet_ddf = det * np.einsum("...ij,...ji", inv, shape_op)
    djn_ddf = np.einsum("...ij,...j->...i", shape_op, ng)
    dden_ddf = np.einsum("...i,...i", jn, djn_ddf) / den
    dM_ddf = ddet_ddf / den - det * dden_ddf / den ** 2

    # grad_df enters through the rank-one jacobian term and through n_Gamma
    # dJ/dg_k = e_k n_sigma^T  ->  d(det) = det * (J^-T n_sigma)_k
    ddet_dg = det[..., None] * np.einsum("...ji,...j->...i", inv, n)
    # d(n_Gamma)/dg_k = -e_k/rb + b b_k / rb^3
    # d(J n_Gamma)/dg_k = e_k (n_sigma . n_Gamma) + J d(n_Gamma)/dg_k
    nng = np.einsum("...i,...i", n, ng)
    jb = np.einsum("...ij,...j->...i", jac, b)
    # components: (jn . d(jn)/dg_k)
    jn_dot_djn = (jn * nng[..., None]
                  - np.einsum("...i,...ij->...j", jn, jac) / rb[..., None]
                  + np.einsum("...i,...i", jn, jb)[..., None]
                  * b / rb[..., None] ** 3)
    dden_dg = jn_dot_djn / den[..., None]
    dM_dg = ddet_dg / den[..., None] - (det / den ** 2)[..., None] * dden_dg
    return M, dM_ddf, dM_dg


def boundary_measure_factor(jac, tau_sigma, shape_op, n_sigma, eps0=EPS0):
    """Boundary measure ratio and derivatives at boundary points.

    The boundary curve of the offset surface is the image of the base
    boundary; its tangent is tau = J^T tau_sigma, and the measure ratio is
    ||tau|| / ||J^-1 tau||. This form is exactly 1 for the identity map and
    is smooth in (d_f, grad d_f), which removes the degeneracy of the
    cross-product tangent construction at grad d_f = 0 (there tau -> the
    base boundary tangent, which is the limit used here by construction).

    Returns (L, dL_d_df, dL_d_grad_df).
    """
    jac = np.asarray(jac, dtype=float)
    tau = np.asarray(tau_sigma, dtype=float)
    n = np.asarray(n_sigma, dtype=float)
    sop = np.asarray(shape_op, dtype=float)
    inv = np.linalg.inv(jac)

    t = np.einsum("...ji,...j->...i", jac, tau)          # J^T tau
    r = np.einsum("...ij,...j->...i", inv, t)            # J^-1 J^T tau
    nt = np.sqrt(np.einsum("...i,...i", t, t) + eps0)
    nr = np.sqrt(np.einsum("...i,...i", r, r) + eps0)
    L = nt / nr

    def directional(dJ):
        # dt = dJ^T tau; dr = J^-1 (dt - dJ r)
        dt = np.einsum("...ji,...j->...i", dJ, tau)
        dr = np.einsum("...ij,...j->...i", inv,
                       dt - np.einsum("...ij,...j->...i", dJ, r))
        dnt = np.einsum("...i,...i", t, dt) / nt
        dnr = np.einsum("...i,...i", r, dr) / nr
        return dnt / nr - nt * dnr / nr ** 2

    dL_ddf = directional(sop)
    comps = []
    eye = np.eye(3)
    for k in range(3):
        dJ = np.broadcast_to(
            np.einsum("i,...j->...ij", eye[k], n), jac.shape)
        comps.append(directional(dJ))
    dL_dg = np.stack(comps, axis=-1)
    return L, dL_ddf, dL_dg


def surface_gradient(nodal, mesh, space="quadratic"):
    """Tangential gradient of a nodal field at volume quadrature points."""
    nodal = np.asarray(nodal, dtype=float)
    if space == "quadratic":
        if nodal.shape[0] != mesh.n_q2:
            raise ValueError("field length does not match quadratic space")
        return mesh.gradient_q2(nodal)
    if space == "linear":
        if nodal.shape[0] != mesh.n_q1:
            raise ValueError("field length does not match linear space")
        return mesh.gradient_q1(nodal)
    raise ValueError(f"unknown element space {space!r}")


class GeometricFactors:
    """Per-quadrature transformed geometry for one offset field d_f.

    Volume arrays are (ne, nq, ...); boundary arrays are (nE, 3, ...).
    Built once per design update and shared by the filter, flow and adjoint
    assemblies.
    """

    def __init__(self, mesh, d_f, eps0=EPS0):
        self.mesh = mesh
        self.eps0 = eps0
        d_f = np.asarray(d_f, dtype=float)
        if d_f.shape[0] != mesh.n_q2:
            raise ValueError("d_f must live on the quadratic space")
        self.d_f_nodal = d_f

        self.d_f = mesh.interpolate_q2(d_f)
        self.grad_df = mesh.gradient_q2(d_f)
        self.b = mesh.normal - self.grad_df
        self.bb = np.einsum("...i,...i", self.b, self.b) + eps0
        self.n_gamma = self.b / np.sqrt(self.bb)[..., None]
        self.jac, self.det = map_jacobian(
            self.d_f, self.grad_df, mesh.normal, mesh.shape_op)
        self.area_factor, self.dM_ddf, self.dM_dgrad = area_measure_factor(
            self.jac, self.det, self.grad_df, mesh.normal, mesh.shape_op,
            eps0)
        # measure-weighted quadrature weights (dGamma = M dSigma)
        self.wM = mesh.w * self.area_factor

        # boundary data
        nodal_e = d_f[mesh.quads_q2[mesh.be_elem]]
        self.b_d_f = np.einsum("eqa,ea->eq", mesh.be_N2, nodal_e)
        self.b_grad_df = np.einsum("eqad,ea->eqd", mesh.be_gradN2, nodal_e)
        self.b_b = mesh.be_normal - self.b_grad_df
        self.b_bb = np.einsum("...i,...i", self.b_b, self.b_b) + eps0
        self.b_n_gamma = self.b_b / np.sqrt(self.b_bb)[..., None]
        self.b_jac, self.b_det = map_jacobian(
            self.b_d_f, self.b_grad_df, mesh.be_normal, mesh.be_shape_op)
        self.line_factor, self.dL_ddf, self.dL_dgrad = \
            boundary_measure_factor(self.b_jac, mesh.be_tau,
                                    mesh.be_shape_op, mesh.be_normal, eps0)
        self.wL = mesh.be_w * self.line_factor

    def transformed_grad_tables(self):
        """Transformed gradients of the Q2 and Q1 shape functions.

        Shapes (ne, nq, 9, 3) and (ne, nq, 4, 3).
        """
        mesh = self.mesh
        g2 = transformed_gradient(
            mesh.gradN2, self.grad_df[..., None, :],
            mesh.normal[..., None, :], self.eps0)
        g1 = transformed_gradient(
            mesh.gradN1, self.grad_df[..., None, :],
            mesh.normal[..., None, :], self.eps0)
        return g2, g1
