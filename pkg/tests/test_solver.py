"""Assembly and solve layer: element integrals, boundary problems, averages."""
import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from cghom import solver
from cghom.fields import gen_named_field
from cghom.solver import (DegenerateCellError, assemble, cell_flux_averages,
                          cell_gradient_averages, energy_seminorm_sq, flux_rhs,
                          harmonic_extension, maximize_J_backend,
                          node_coordinates, quadrature_flux_rhs,
                          random_aharmonic, reference_tensors, solve_dirichlet,
                          solve_neumann)
from cghom.triadic import TriadicCube


def _sympy_reference(dim):
    """Recompute the unit-element integrals symbolically."""
    import sympy as sym

    xs = sym.symbols(f"x0:{dim}")
    locs = list(itertools.product((0, 1), repeat=dim))
    phis = []
    for loc in locs:
        phi = sym.Integer(1)
        for ax in range(dim):
            phi *= xs[ax] if loc[ax] == 1 else (1 - xs[ax])
        phis.append(sym.expand(phi))

    def integrate(expr):
        for ax in range(dim):
            expr = sym.integrate(expr, (xs[ax], 0, 1))
        return float(expr)

    n = len(locs)
    EK = np.zeros((dim, dim, n, n))
    EG = np.zeros((dim, n))
    EM = np.zeros(n)
    for i in range(n):
        EM[i] = integrate(phis[i])
        for a in range(dim):
            EG[a, i] = integrate(sym.diff(phis[i], xs[a]))
            for j in range(n):
                for b in range(dim):
                    EK[a, b, i, j] = integrate(
                        sym.diff(phis[i], xs[a]) * sym.diff(phis[j], xs[b]))
    return EK, EG, EM


@pytest.mark.parametrize("dim", [2, 3])
def test_reference_tensors_match_symbolic_integrals(dim):
    _, EK, EG, EM = reference_tensors(dim)
    sEK, sEG, sEM = _sympy_reference(dim)
    assert np.allclose(EK, sEK, atol=1e-14)
    assert np.allclose(EG, sEG, atol=1e-14)
    assert np.allclose(EM, sEM, atol=1e-14)


def test_isotropic_element_stiffness_frozen():
    # classic Q1 Laplace element: 2/3 diagonal, -1/6 edges, -1/3 across
    # (node order (0,0), (0,1), (1,0), (1,1))
    _, EK, _, _ = reference_tensors(2)
    K = EK[0, 0] + EK[1, 1]
    want = np.array([[4, -1, -1, -2],
                     [-1, 4, -2, -1],
                     [-1, -2, 4, -1],
                     [-2, -1, -1, 4]]) / 6.0
    assert np.allclose(K, want)


def test_stiffness_rows_sum_to_zero():
    field = gen_named_field("skew_lognormal", level=1, seed=5, sigma=0.5,
                            kappa=0.7)
    op = assemble(field)
    ones = np.ones(op.N)
    assert np.abs(op.K @ ones).max() < 1e-12
    assert np.abs(op.K.T @ ones).max() < 1e-12


def test_skew_part_contributes_antisymmetrically():
    field = gen_named_field("skew_lognormal", level=1, seed=6, sigma=0.4,
                            kappa=0.9)
    op = assemble(field)
    N = (op.K - op.S).toarray()
    assert np.abs(N + N.T).max() < 1e-12
    assert np.abs((op.S - op.S.T).toarray()).max() < 1e-12
    assert np.linalg.eigvalsh(op.S.toarray()).min() > -1e-12


def test_assembly_rejects_degenerate_cells():
    field = gen_named_field("constant", level=1, matrix=np.eye(2).tolist())
    field.s_cells[...] = 0.0
    with pytest.raises(DegenerateCellError):
        assemble(field)
    field.s_cells[...] = np.eye(2)
    field.s_cells[0, 0] = np.diag([1.0, 1e15])
    with pytest.raises(DegenerateCellError):
        assemble(field)


def test_dirichlet_solve_matches_dense_reference():
    field = gen_named_field("skew_lognormal", level=1, seed=7, sigma=0.6,
                            kappa=0.5)
    op = assemble(field)
    rng = np.random.default_rng(3)
    g = rng.normal(size=len(op.boundary))
    u = solve_dirichlet(op, g)
    # independent dense elimination of the same linear system
    K = op.K.toarray()
    uref = np.zeros(op.N)
    uref[op.boundary] = g
    ii, bb = op.interior, op.boundary
    uref[ii] = np.linalg.solve(K[np.ix_(ii, ii)], -K[np.ix_(ii, bb)] @ g)
    assert np.abs(u - uref).max() < 1e-10


def test_affine_data_is_reproduced_exactly():
    # affine functions are in the Q1 space and a-harmonic for constant a
    field = gen_named_field("constant", level=1,
                            matrix=[[2.0, 0.5], [-0.5, 1.0]])
    op = assemble(field)
    x = node_coordinates(op)
    exact = x @ np.array([0.7, -0.3]) + 2.0
    u = solve_dirichlet(op, exact[op.boundary])
    assert np.abs(u - exact).max() < 1e-12
    g = cell_gradient_averages(op, u)
    assert np.allclose(g, [0.7, -0.3], atol=1e-12)
    f = cell_flux_averages(op, u)
    want = np.array([[2.0, 0.5], [-0.5, 1.0]]) @ [0.7, -0.3]
    assert np.allclose(f, want, atol=1e-12)


def test_laminate_reduces_to_series_resistors():
    # a field varying along x only behaves as resistors in series: the
    # profile with unit flux has slope 1/a_c inside column c
    field = gen_named_field("laminate", level=1, a1=1.0, a2=4.0, phase=0)
    op = assemble(field)
    cols = np.array([1.0, 4.0, 1.0])
    knots = np.concatenate([[0.0], np.cumsum(1.0 / cols)])
    x = node_coordinates(op)
    u = solve_dirichlet(op, np.interp(x[op.boundary, 0], [0, 1, 2, 3], knots))
    flux = cell_flux_averages(op, u)
    grads = cell_gradient_averages(op, u)
    assert np.allclose(flux[..., 0], 1.0, atol=1e-10)
    assert np.abs(flux[..., 1]).max() < 1e-10
    assert np.allclose(grads[..., 0], (1.0 / cols)[:, None], atol=1e-10)
    # effective conductivity across the stack = harmonic mean of the columns
    harm = 3.0 / (1.0 / cols).sum()
    assert np.isclose(3.0 / (knots[-1] - knots[0]), harm)


def test_neumann_solve_properties():
    field = gen_named_field("lognormal_iso", level=1, seed=9, sigma=0.4)
    op = assemble(field)
    # constant data is removed entirely: zero solution
    f_const = np.ones((3, 3, 2))
    u0 = solve_neumann(op, f_const)
    assert np.abs(u0).max() < 1e-12
    rng = np.random.default_rng(4)
    f = rng.normal(size=(3, 3, 2))
    u = solve_neumann(op, f)
    assert abs(op.mass @ u) < 1e-10            # mean-zero gauge
    assert np.abs(op.B @ u / op.vol).max() < 1e-10   # zero average flux
    # weak equation: K u = flux functional of the centered data
    fc = f - f.reshape(-1, 2).mean(axis=0)
    assert np.abs(op.K @ u - flux_rhs(op, fc)).max() < 1e-9


def test_harmonic_extension_and_random_aharmonic():
    field = gen_named_field("checkerboard", level=1, seed=10, low=1.0, high=5.0)
    op = assemble(field)
    rng = np.random.default_rng(5)
    u = harmonic_extension(op, rng.normal(size=len(op.boundary)))
    assert np.abs((op.K @ u)[op.interior]).max() < 1e-10
    w = random_aharmonic(op, rng)
    assert abs(op.mass @ w) < 1e-10
    assert np.abs((op.K @ w)[op.interior]).max() < 1e-10


def test_energy_seminorm_matches_dense_quadratic_form():
    field = gen_named_field("lognormal_iso", level=1, seed=11)
    op = assemble(field)
    rng = np.random.default_rng(6)
    u = rng.normal(size=op.N)
    want = float(u @ op.S.toarray() @ u) / op.vol
    assert np.isclose(energy_seminorm_sq(op, u), want)


def test_maximizer_backend_energy_identity():
    field = gen_named_field("skew_lognormal", level=1, seed=12, sigma=0.5,
                            kappa=0.6)
    op = assemble(field)
    pairs = [(np.array([1.0, 0.0]), np.array([0.0, 0.5])),
             (np.array([1.0, 1.0]), np.array([1.0, 0.0]))]
    Jvals, V = maximize_J_backend(op, pairs)
    for c in range(len(pairs)):
        v = V[:, c]
        assert Jvals[c] >= -1e-12
        assert np.isclose(Jvals[c], v @ (op.S @ v) / (2 * op.vol),
                          rtol=1e-10, atol=1e-12)
        # maximizers are admissible: a-harmonic and mean zero
        assert np.abs((op.K @ v)[op.interior]).max() < 1e-8
        assert abs(op.mass @ v) < 1e-8


def test_flux_rhs_agrees_with_quadrature():
    field = gen_named_field("lognormal_iso", level=1, seed=13)
    op = assemble(field)
    rng = np.random.default_rng(7)
    f_cells = rng.normal(size=(3, 3, 2))
    direct = flux_rhs(op, f_cells)

    def cellwise(x):
        idx = np.clip(x.astype(int), 0, 2)
        return f_cells[idx[:, 0], idx[:, 1]]

    via_quad = quadrature_flux_rhs(op, cellwise, order=2)
    assert np.abs(direct - via_quad).max() < 1e-12
    # the functional annihilates constants: total sum is zero
    assert abs(direct.sum()) < 1e-12


def test_quadrature_exactness_in_order():
    field = gen_named_field("constant", level=1)
    op = assemble(field)

    def smooth(x):
        return np.stack([np.sin(x[:, 0]), np.cos(x[:, 1] * 0.5)], axis=-1)

    lo = quadrature_flux_rhs(op, smooth, order=4)
    hi = quadrature_flux_rhs(op, smooth, order=8)
    assert np.abs(lo - hi).max() < 1e-8


def test_resolution_refines_the_grid():
    field = gen_named_field("checkerboard", level=1, seed=14, low=1.0, high=4.0)
    op1 = assemble(field, resolution=1)
    op2 = assemble(field, resolution=2)
    assert op1.nodes_per_axis == 4
    assert op2.nodes_per_axis == 7
    assert op2.cells_per_axis == 3
    x = node_coordinates(op2)
    u = solve_dirichlet(op2, (x @ [1.0, 0.0])[op2.boundary])
    assert cell_gradient_averages(op2, u).shape == (3, 3, 2)
    with pytest.raises(ValueError):
        assemble(field, resolution=0)


def test_subcube_assembly_uses_window_slice():
    field = gen_named_field("lognormal_iso", level=2, seed=15)
    cube = TriadicCube(level=1, offset=(3, 6), dim=2)
    op = assemble(field, cube)
    sub = field.a_cells[3:6, 6:9]
    assert np.allclose(op.a_elems.reshape(3, 3, 2, 2), sub)
    with pytest.raises(ValueError):
        assemble(field, TriadicCube(level=1, offset=(7, 0), dim=2))
