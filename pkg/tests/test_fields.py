import numpy as np
import pytest

from manifold_topopt import fields as F
from manifold_topopt import geometry as G
from manifold_topopt import mesh as M

from plane_oracle import PlaneOracle


@pytest.fixture(scope="module")
def flat_factors(bending_mesh_small):
    return G.GeometricFactors(bending_mesh_small, np.zeros(
        bending_mesh_small.n_q2))


def test_filter_params_validation():
    with pytest.raises(ValueError):
        F.FilterParams(r_f=0.0).validate()
    with pytest.raises(ValueError):
        F.FilterParams(A_d=-1.0).validate()
    with pytest.raises(ValueError):
        F.FilterParams(beta=0.5).validate()
    with pytest.raises(ValueError):
        F.FilterParams(xi=1.0).validate()


def test_manifold_filter_constants(bending_mesh_small):
    m = bending_mesh_small
    d_f = F.filter_manifold(np.ones(m.n_q2), m, 2 / 25, A_d=2.0)
    assert np.abs(d_f - 1.0).max() < 1e-12
    d_f = F.filter_manifold(np.full(m.n_q2, 0.5), m, 2 / 25, A_d=2.0)
    assert np.abs(d_f).max() < 1e-12


def test_manifold_filter_smoothing_monotone(bending_mesh_small, rng):
    m = bending_mesh_small
    xy = m.nodes_q2
    d_m = 0.5 + 0.5 * np.sign(np.sin(40 * xy[:, 0]) * np.sin(40 * xy[:, 1]))
    g_small = np.linalg.norm(
        m.gradient_q2(F.filter_manifold(d_m, m, 0.04, 1.0)), axis=-1).max()
    g_large = np.linalg.norm(
        m.gradient_q2(F.filter_manifold(d_m, m, 0.08, 1.0)), axis=-1).max()
    assert g_large < g_small


def test_offset_bounds(bending_mesh_small, rng):
    m = bending_mesh_small
    A_d = 2.0
    for d_m in (np.ones(m.n_q2), rng.uniform(0, 1, m.n_q2),
                (rng.uniform(0, 1, m.n_q2) > 0.5).astype(float)):
        d_f = F.filter_manifold(d_m, m, 2 / 25, A_d=A_d)
        assert d_f.max() <= A_d / 2 + 1e-8
        assert d_f.min() >= -A_d / 2 - 1e-8


def test_pattern_filter_constants(bending_mesh_small, flat_factors, rng):
    m = bending_mesh_small
    gf = F.filter_pattern(np.full(m.n_q1, 0.37), m, flat_factors, 1 / 50)
    assert np.abs(gf - 0.37).max() < 1e-12
    # constants survive a curved offset measure as well
    d_f = F.filter_manifold(rng.uniform(0, 1, m.n_q2), m, 2 / 25, 1.0)
    fac = G.GeometricFactors(m, d_f)
    gf = F.filter_pattern(np.full(m.n_q1, 0.37), m, fac, 1 / 50)
    assert np.abs(gf - 0.37).max() < 1e-12


def test_pattern_filter_matches_independent_flat_assembly(
        bending_mesh_small, flat_factors, rng):
    m = bending_mesh_small
    gamma = rng.uniform(0, 1, m.n_q1)
    gf = F.filter_pattern(gamma, m, flat_factors, 1 / 50)
    oracle = PlaneOracle(m, r_f=1 / 50)
    gf_oracle = oracle.densities(gamma)[0]
    assert np.abs(gf - gf_oracle).max() < 1e-12


def test_pattern_filter_maximum_principle(bending_mesh_small, flat_factors,
                                          rng):
    m = bending_mesh_small
    gamma = rng.uniform(0, 1, m.n_q1)
    gf = F.filter_pattern(gamma, m, flat_factors, 1 / 50)
    assert gf.min() >= gamma.min() - 1e-8
    assert gf.max() <= gamma.max() + 1e-8


def test_pattern_operator_symmetric_positive_definite(bending_mesh_small,
                                                      rng):
    m = bending_mesh_small
    d_f = F.filter_manifold(rng.uniform(0, 1, m.n_q2), m, 2 / 25, 1.0)
    fac = G.GeometricFactors(m, d_f)
    A = F.pattern_filter_operator(m, fac, 1 / 50)
    asym = abs(A - A.T).max()
    assert asym <= 1e-12 * abs(A).max()
    eigs = np.linalg.eigvalsh(A.toarray())
    assert eigs.min() > 0.0


def test_projection_values_and_derivative():
    assert F.project(0.0, 8.0, 0.5) == 0.0
    assert F.project(1.0, 8.0, 0.5) == 1.0
    for beta in (1.0, 4.0, 64.0):
        assert abs(F.project(0.5, beta, 0.5) - 0.5) < 1e-14
    beta, xi, gf = 8.0, 0.5, 0.6
    expect = (np.tanh(beta * xi) + np.tanh(beta * (gf - xi))) \
        / (np.tanh(beta * xi) + np.tanh(beta * (1 - xi)))
    assert abs(F.project(gf, beta, xi) - expect) < 1e-15
    h = 1e-6
    fd = (F.project(gf + h, beta, xi) - F.project(gf - h, beta, xi)) / (2 * h)
    assert abs(F.projection_derivative(gf, beta, xi) - fd) < 1e-8


def test_projection_monotone_and_in_bounds(rng):
    gf = rng.uniform(0, 1, 500)
    gp = F.project(gf, 8.0, 0.5)
    assert gp.min() >= 0.0 and gp.max() <= 1.0
    assert (F.projection_derivative(gf, 8.0, 0.5) > 0).all()


def test_impermeability_values():
    rho = 1.0
    assert F.impermeability(1.0, 1e4 * rho) == 0.0
    assert F.impermeability(0.0, 1e4 * rho) == 1e4 * rho
    assert abs(F.impermeability(0.5, 1e4) - 1e4 * 0.5 / 1.5) < 1e-9
    gp = np.linspace(0.0, 1.0, 11)
    assert (F.impermeability_derivative(gp, 1e4) < 0).all()


def test_fluid_domain_projection_enforced(bending_mesh_small, flat_factors):
    m = bending_mesh_small
    gamma_f = np.full(m.n_q1, 0.2)
    gp, dgp = F.project_at_quadrature(m, gamma_f, 8.0, 0.5)
    fluid = m.elem_domain == M.DOMAIN_FLUID
    assert np.all(gp[fluid] == 1.0)
    assert np.all(dgp[fluid] == 0.0)
    assert np.all(gp[~fluid] < 0.1)
