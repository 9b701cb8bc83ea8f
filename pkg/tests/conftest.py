import numpy as np
import pytest

from manifold_topopt import fields, flow, mesh, problem


@pytest.fixture(scope="session")
def bending_mesh_small():
    return mesh.build_case(mesh.CaseSpec("bending_channel", 12))


@pytest.fixture(scope="session")
def channel_mesh():
    return mesh.build_case(mesh.CaseSpec(
        "straight_channel", 16, params={"length": 4.0, "height": 1.0}))


@pytest.fixture(scope="session")
def cap_mesh():
    return mesh.build_case(mesh.CaseSpec("square_sphere", 16, t=0.5))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def make_problem(msh, A_d=0.0, omega=0.9, U0=1.0, pen=0.0, s0=0.3,
                 v0=0.0):
    fluid = flow.FluidParams(U0=U0, tangential_penalty=pen)
    filt = fields.FilterParams(A_d=A_d)
    return problem.SurfaceFlowProblem(msh, fluid, filt, omega=omega)


def wiggle_design(prob, s0=0.3, amplitude=0.25, seed=0):
    """Deterministic non-constant design point used by derivative tests."""
    msh = prob.mesh
    gamma, d_m = prob.initial_design(s0, 0.0)
    xy1 = msh.nodes_q1
    xy2 = msh.nodes_q2
    gamma = gamma.copy()
    gamma[prob.design_mask] = np.clip(
        s0 + amplitude * np.sin(3.0 * xy1[prob.design_mask, 0] + seed)
        * np.cos(2.0 * xy1[prob.design_mask, 1]), 0.05, 0.95)
    d_m = np.clip(0.5 + 0.3 * np.sin(2.5 * xy2[:, 0] + 1.0 + seed)
                  * np.sin(2.0 * xy2[:, 1]), 0.05, 0.95)
    return gamma, d_m
