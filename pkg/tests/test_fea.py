import numpy as np
import pytest

from featmap.fea import (
    AnalysisError,
    FeaProblem,
    assemble_and_solve,
    compliance_and_volume,
    element_dof_matrix,
    element_stiffness,
    node_id,
    nodes_where,
)
from featmap.mapping import Grid
from featmap.material import MaterialModel

MAT = MaterialModel("linear", E0=1.0, nu=0.3, thickness=1.0)


def closed_form_row(nu):
    # first row of the bilinear square plane-stress element, exact fractions
    return np.array(
        [
            1 / 2 - nu / 6,
            1 / 8 + nu / 8,
            -1 / 4 - nu / 12,
            -1 / 8 + 3 * nu / 8,
            -1 / 4 + nu / 12,
            -1 / 8 - nu / 8,
            nu / 6,
            1 / 8 - 3 * nu / 8,
        ]
    ) / (1 - nu * nu)


def simpson_stiffness(material):
    # independent oracle: physical unit-square coordinates and Simpson
    # integration (exact for the quadratic integrand)
    E, nu, t = material.E0, material.nu, material.thickness
    D = E / (1 - nu * nu) * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])
    xs = np.array([0.0, 0.5, 1.0])
    ws = np.array([1.0, 4.0, 1.0]) / 6.0
    K = np.zeros((8, 8))
    for x, wx in zip(xs, ws):
        for y, wy in zip(xs, ws):
            dndx = np.array([-(1 - y), (1 - y), y, -y])
            dndy = np.array([-(1 - x), -x, x, (1 - x)])
            B = np.zeros((3, 8))
            B[0, 0::2] = dndx
            B[1, 1::2] = dndy
            B[2, 0::2] = dndy
            B[2, 1::2] = dndx
            K += wx * wy * t * B.T @ D @ B
    return K


def test_element_stiffness_matches_closed_form():
    for nu in (0.3, 0.25):
        mat = MaterialModel("linear", E0=1.0, nu=nu, thickness=1.0)
        K = element_stiffness(mat)
        np.testing.assert_allclose(K[0], closed_form_row(nu), rtol=1e-14)
        np.testing.assert_allclose(K, simpson_stiffness(mat), rtol=1e-13, atol=1e-15)
    K2 = element_stiffness(MaterialModel("linear", E0=2.5, nu=0.3, thickness=0.4))
    np.testing.assert_allclose(K2, element_stiffness(MAT) * 2.5 * 0.4, rtol=1e-14)


def test_element_stiffness_symmetry_and_rigid_modes():
    K = element_stiffness(MAT)
    np.testing.assert_array_equal(K, K.T)
    ev = np.linalg.eigvalsh(K)
    assert (np.abs(ev) < 1e-10 * np.trace(K)).sum() == 3
    # translations and an in-plane rotation produce no force
    tx = np.tile([1.0, 0.0], 4)
    ty = np.tile([0.0, 1.0], 4)
    corners = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    rot = np.stack([-corners[:, 1], corners[:, 0]], axis=1).ravel()
    for v in (tx, ty, rot):
        assert np.abs(K @ v).max() < 1e-13


def axial_bar(nx=8):
    grid = Grid(nx, 1, 1.0)
    fixed = [2 * node_id(grid, 0, 0), 2 * node_id(grid, 0, 1), 2 * node_id(grid, 0, 0) + 1]
    f = np.zeros(2 * grid.n_nodes)
    f[2 * node_id(grid, nx, 0)] = 0.5
    f[2 * node_id(grid, nx, 1)] = 0.5
    return FeaProblem(grid, np.array(fixed), f, MAT)


def test_axial_patch_exact():
    # uniform end traction on a laterally free bar: constant strain is
    # representable, so FL/(EA) must be hit to solver precision
    prob = axial_bar(8)
    sol = assemble_and_solve(prob, np.ones(prob.grid.n_elements))
    tip = sol.u[2 * node_id(prob.grid, 8, 0)]
    assert tip == pytest.approx(8.0, rel=1e-8)
    v = sol.u[2 * node_id(prob.grid, 8, 1) + 1]
    assert v == pytest.approx(-0.3, rel=1e-6)
    assert sol.J == pytest.approx(8.0, rel=1e-8)


def cantilever(nx, ny, l_el):
    grid = Grid(nx, ny, l_el)
    fixed_nodes = nodes_where(grid, lambda x, y: x == 0.0)
    fixed = np.concatenate([2 * fixed_nodes, 2 * fixed_nodes + 1])
    f = np.zeros(2 * grid.n_nodes)
    tip_nodes = nodes_where(grid, lambda x, y: x == nx * l_el)
    w = np.full(len(tip_nodes), 1.0 / ny)
    xy = grid.node_coords()[tip_nodes]
    w[(xy[:, 1] == 0.0) | (xy[:, 1] == ny * l_el)] = 0.5 / ny
    f[2 * tip_nodes + 1] = -w
    return grid, FeaProblem(grid, fixed, f, MAT)


def test_cantilever_matches_beam_theory():
    grid, prob = cantilever(80, 10, 1.0)
    sol = assemble_and_solve(prob, np.ones(grid.n_elements))
    L, hgt = 80.0, 10.0
    inertia = hgt**3 / 12.0
    G = 1.0 / (2.0 * (1.0 + 0.3))
    delta = L**3 / (3.0 * inertia) + 1.2 * L / (G * hgt)
    tip = -np.mean([sol.u[2 * n + 1] for n in nodes_where(grid, lambda x, y: x == L)])
    assert tip == pytest.approx(delta, rel=0.05)


def test_mesh_refinement_consistency():
    gc, pc = cantilever(40, 5, 2.0)
    gf, pf = cantilever(80, 10, 1.0)
    dc = assemble_and_solve(pc, np.ones(gc.n_elements)).J
    df = assemble_and_solve(pf, np.ones(gf.n_elements)).J
    assert abs(df - dc) / df < 0.02


def test_linearity_in_stiffness():
    grid, prob = cantilever(12, 4, 1.0)
    rng = np.random.default_rng(3)
    mu = rng.uniform(0.2, 1.0, grid.n_elements)
    j1 = assemble_and_solve(prob, mu).J
    j2 = assemble_and_solve(prob, 2.0 * mu).J
    assert j2 == pytest.approx(0.5 * j1, rel=1e-11)


def test_compliance_monotone_in_stiffness():
    grid, prob = cantilever(8, 4, 1.0)
    rng = np.random.default_rng(7)
    mu = rng.uniform(0.05, 1.0, grid.n_elements)
    j0 = assemble_and_solve(prob, mu).J
    for e in rng.choice(grid.n_elements, size=6, replace=False):
        bumped = mu.copy()
        bumped[e] *= 1.1
        assert assemble_and_solve(prob, bumped).J <= j0 + 1e-12 * j0


def test_zero_load_zero_compliance():
    grid = Grid(4, 4, 1.0)
    fixed_nodes = nodes_where(grid, lambda x, y: y == 0.0)
    prob = FeaProblem(grid, np.concatenate([2 * fixed_nodes, 2 * fixed_nodes + 1]), np.zeros(2 * grid.n_nodes), MAT)
    sol = assemble_and_solve(prob, np.ones(grid.n_elements))
    assert sol.J == 0.0
    assert np.abs(sol.u).max() == 0.0


def test_volume_accounting():
    grid = Grid(6, 5, 1.0)
    fixed_nodes = nodes_where(grid, lambda x, y: y == 0.0)
    fixed = np.concatenate([2 * fixed_nodes, 2 * fixed_nodes + 1])
    f = np.zeros(2 * grid.n_nodes)
    f[2 * node_id(grid, 3, 5) + 1] = -1.0
    mat = MaterialModel("linear", thickness=2.5)
    prob = FeaProblem(grid, fixed, f, mat)
    rho = np.full(grid.n_elements, 1e-6)
    rho[:12] = 1.0
    sol = assemble_and_solve(prob, np.clip(rho, 1e-6, 1.0), rho=rho)
    _, V = compliance_and_volume(sol)
    assert V == pytest.approx((12.0 + 18 * 1e-6) * 2.5, rel=1e-12)
    _, V2 = compliance_and_volume(sol, np.ones(grid.n_elements))
    assert V2 == pytest.approx(30.0 * 2.5, rel=1e-12)


def test_problem_and_solve_validation():
    grid = Grid(4, 2, 1.0)
    f = np.zeros(2 * grid.n_nodes)
    with pytest.raises(ValueError):
        FeaProblem(grid, np.array([0, 1]), f, MAT)  # rigid modes remain
    with pytest.raises(ValueError):
        FeaProblem(grid, np.array([0, 1, 9999]), f, MAT)
    with pytest.raises(ValueError):
        FeaProblem(grid, np.array([0, 1, 2]), np.array([np.inf]), MAT)
    prob = FeaProblem(grid, np.array([0, 1, 2]), f, MAT)
    with pytest.raises(AnalysisError):
        assemble_and_solve(prob, np.zeros(grid.n_elements))
    with pytest.raises(ValueError):
        assemble_and_solve(prob, np.ones(3))


def test_dof_matrix_shape_and_sharing():
    grid = Grid(3, 2, 1.0)
    edof = element_dof_matrix(grid)
    assert edof.shape == (6, 8)
    # neighbors share an edge: element 0's right nodes are element 1's left nodes
    assert edof[0][2:4].tolist() == edof[1][0:2].tolist()
    assert edof[0][4:6].tolist() == edof[1][6:8].tolist()
