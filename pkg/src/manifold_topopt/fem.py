"""Reference-element machinery: bilinear/biquadratic quad shapes and Gauss rules.

Node ordering is tensor-product row major on the reference square [-1,1]^2:
Q1 uses the 4 corners, Q2 the full 3x3 lattice (corners, edge midpoints,
center). All assembly in this package evaluates fields at the 3x3 Gauss
points of each quad and at 3 Gauss points per boundary edge.
"""

from __future__ import annotations

import numpy as np

# reference coordinates, tensor order (eta-major)
Q1_NODES = np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]])
Q2_NODES = np.array(
    [[x, y] for y in (-1.0, 0.0, 1.0) for x in (-1.0, 0.0, 1.0)]
)


def _lag1(x):
    """1D linear Lagrange basis on {-1,1}: values and derivatives."""
    x = np.asarray(x, dtype=float)
    vals = np.stack([(1.0 - x) / 2.0, (1.0 + x) / 2.0], axis=-1)
    ders = np.stack([-0.5 * np.ones_like(x), 0.5 * np.ones_like(x)], axis=-1)
    return vals, ders


def _lag2(x):
    """1D quadratic Lagrange basis on {-1,0,1}: values and derivatives."""
    x = np.asarray(x, dtype=float)
    vals = np.stack([0.5 * x * (x - 1.0), 1.0 - x * x, 0.5 * x * (x + 1.0)], axis=-1)
    ders = np.stack([x - 0.5, -2.0 * x, x + 0.5], axis=-1)
    return vals, ders


def q1_shape(xi, eta):
    """Q1 shape values (..., 4) and reference gradients (..., 4, 2)."""
    vx, dx = _lag1(xi)
    vy, dy = _lag1(eta)
    n = vy[..., :, None] * vx[..., None, :]
    gx = vy[..., :, None] * dx[..., None, :]
    gy = dy[..., :, None] * vx[..., None, :]
    shp = n.reshape(n.shape[:-2] + (4,))
    grad = np.stack(
        [gx.reshape(shp.shape), gy.reshape(shp.shape)], axis=-1
    )
    return shp, grad


def q2_shape(xi, eta):
    """Q2 shape values (..., 9) and reference gradients (..., 9, 2)."""
    vx, dx = _lag2(xi)
    vy, dy = _lag2(eta)
    n = vy[..., :, None] * vx[..., None, :]
    gx = vy[..., :, None] * dx[..., None, :]
    gy = dy[..., :, None] * vx[..., None, :]
    shp = n.reshape(n.shape[:-2] + (9,))
    grad = np.stack(
        [gx.reshape(shp.shape), gy.reshape(shp.shape)], axis=-1
    )
    return shp, grad


def gauss_1d(n=3):
    """Gauss-Legendre points/weights on [-1,1]."""
    return np.polynomial.legendre.leggauss(n)


def gauss_2d(n=3):
    """Tensor Gauss rule on [-1,1]^2: points (n*n, 2), weights (n*n,)."""
    x, w = gauss_1d(n)
    xi, eta = np.meshgrid(x, x, indexing="xy")
    pts = np.stack([xi.ravel(), eta.ravel()], axis=-1)
    wts = np.outer(w, w).ravel()
    # keep eta-major ordering consistent with meshgrid 'xy'
    return pts, wts


class ShapeTables:
    """Shape values/reference-gradients of Q1 and Q2 at a fixed point set."""

    def __init__(self, pts):
        self.pts = np.asarray(pts, dtype=float)
        self.n1, self.d1 = q1_shape(self.pts[:, 0], self.pts[:, 1])
        self.n2, self.d2 = q2_shape(self.pts[:, 0], self.pts[:, 1])


VOLUME_PTS, VOLUME_WTS = gauss_2d(3)
VOLUME_TABLES = ShapeTables(VOLUME_PTS)
EDGE_PTS_1D, EDGE_WTS_1D = gauss_1d(3)


def scatter(blocks, row_conn, col_conn, shape):
    """Accumulate per-element dense blocks into a CSR matrix.

    blocks: (ne, a, b); row_conn: (ne, a); col_conn: (ne, b).
    """
    import scipy.sparse as sp

    ne, a, b = blocks.shape
    rows = np.repeat(row_conn[:, :, None], b, axis=2).ravel()
    cols = np.repeat(col_conn[:, None, :], a, axis=1).ravel()
    return sp.coo_matrix(
        (blocks.ravel(), (rows, cols)), shape=shape
    ).tocsr()


def scatter_vector(blocks, conn, size):
    """Accumulate per-element load vectors (ne, a) into a dense vector."""
    out = np.zeros(size)
    np.add.at(out, conn.ravel(), blocks.ravel())
    return out
