"""Coarse-graining layer: closed forms, identities, orderings, hierarchy."""
import numpy as np
import pytest

from cghom.coarsegrain import (CoarseGrainedMatrices, HierarchyCache,
                               J_from_A, Jstar_from_A, blocks_from_A,
                               center_skew, center_skew_transform,
                               coarse_grain_adjoint, coarse_grain_cube,
                               hierarchy_sweep, jswap, pointwise_A,
                               pointwise_A_cells, verify_centering,
                               verify_cg_inequalities, verify_loewner_chain,
                               verify_maximizer_averages,
                               verify_quadratic_response)
from cghom.fields import gen_named_field
from cghom.solver import assemble
from cghom.triadic import TriadicCube
from reference_impl import brute_force_J


def _random_spd_skew(rng, n=6, dim=2):
    g = rng.normal(size=(n, dim, dim))
    s = g @ np.swapaxes(g, -1, -2) + 0.5 * np.eye(dim)
    k = rng.normal(size=(n, dim, dim))
    k = 0.5 * (k - np.swapaxes(k, -1, -2))
    return s, k


def test_pointwise_A_structure():
    rng = np.random.default_rng(0)
    s, k = _random_spd_skew(rng)
    A = pointwise_A(s, k)
    assert A.shape == (6, 4, 4)
    assert np.allclose(A, np.swapaxes(A, -1, -2))
    assert np.linalg.eigvalsh(A).min() > -1e-12
    assert np.allclose(A[..., 2:, 2:], np.linalg.inv(s))
    # a single constant cell is exactly self-dual: the Schur complement
    # equals the inverse of the lower block
    for i in range(6):
        s_star, kk, b, ss = blocks_from_A(A[i], 2)
        assert np.allclose(s_star, s[i], atol=1e-12)
        assert np.allclose(ss, s[i], atol=1e-12)
        assert np.allclose(kk, k[i], atol=1e-12)
        assert np.allclose(b, s[i] + k[i].T @ np.linalg.solve(s[i], k[i]))


def test_pointwise_A_jswap_involution():
    # with a skew coupling the closed form satisfies  swap A^{-1} swap = A
    rng = np.random.default_rng(1)
    s, k = _random_spd_skew(rng)
    A = pointwise_A(s, k)
    Jsw = jswap(2)
    for i in range(6):
        assert np.allclose(Jsw @ np.linalg.inv(A[i]) @ Jsw, A[i], atol=1e-10)


def test_constant_isotropic_J_formula():
    # a = cI gives J(p, q) = c|p|^2/2 + |q|^2/(2c) - p.q
    c = 2.0
    field = gen_named_field("constant", level=1, matrix=(c * np.eye(2)).tolist())
    cg = coarse_grain_cube(field)
    assert np.allclose(cg.A, np.diag([c, c, 1 / c, 1 / c]))
    rng = np.random.default_rng(2)
    for _ in range(10):
        p, q = rng.normal(size=2), rng.normal(size=2)
        want = 0.5 * c * p @ p + 0.5 / c * q @ q - p @ q
        assert np.isclose(J_from_A(cg.A, p, q, 2), want, atol=1e-12)
    # frozen spot value
    e1 = np.array([1.0, 0.0])
    assert np.isclose(J_from_A(cg.A, e1, e1, 2), 0.25)


def test_fem_path_reproduces_constant_closed_form():
    # forcing the saddle solves on a constant cube must land on the exact
    # closed form: affine maximizers live in the Q1 space
    mat = [[2.0, 0.7], [-0.7, 1.5]]
    field = gen_named_field("constant", level=1, matrix=mat)
    exact = coarse_grain_cube(field)          # closed-form shortcut
    op = assemble(field)
    fem = coarse_grain_cube(field, op=op)     # forced variational path
    assert np.abs(fem.A - exact.A).max() < 1e-9
    e1 = np.array([1.0, 0.0])
    assert np.isclose(J_from_A(fem.A, e1, e1, 2),
                      J_from_A(exact.A, e1, e1, 2), atol=1e-10)


def test_coarse_grain_matches_dense_nullspace_oracle():
    field = gen_named_field("skew_lognormal", level=1, seed=21, sigma=0.6,
                            kappa=0.8)
    op = assemble(field)
    cg = coarse_grain_cube(field, op=op)
    rng = np.random.default_rng(3)
    for _ in range(5):
        p, q = rng.normal(size=2), rng.normal(size=2)
        assert np.isclose(J_from_A(cg.A, p, q, 2), brute_force_J(op, p, q),
                          atol=1e-9)


def test_adjoint_field_flips_offdiagonal_blocks():
    field = gen_named_field("skew_lognormal", level=1, seed=22, sigma=0.5,
                            kappa=0.9)
    cg = coarse_grain_cube(field)
    adj = coarse_grain_adjoint(field)
    D = np.diag([1.0, 1.0, -1.0, -1.0])
    assert np.abs(adj.A - D @ cg.A @ D).max() < 1e-9
    p, q = np.array([0.3, -1.1]), np.array([0.8, 0.4])
    assert np.isclose(Jstar_from_A(cg.A, p, q, 2), J_from_A(adj.A, p, q, 2),
                      atol=1e-10)


def test_centering_congruence_and_verify():
    field = gen_named_field("skew_lognormal", level=1, seed=23, sigma=0.5,
                            kappa=0.7)
    h = np.array([[0.0, 0.4], [-0.4, 0.0]])
    cg0 = coarse_grain_cube(field)
    pred, h_used = center_skew_transform(cg0.A, 2, h)
    cg1 = coarse_grain_cube(center_skew(field, h))
    assert np.abs(cg1.A - pred).max() < 1e-9
    assert np.array_equal(h_used, h)
    # default h symmetrizes the coupling block
    auto, h_auto = center_skew_transform(cg0.A, 2)
    _, k_c, _, _ = blocks_from_A(auto, 2)
    assert np.allclose(k_c, k_c.T, atol=1e-10)
    assert np.allclose(h_auto, 0.5 * (cg0.k - cg0.k.T))
    report = verify_centering(field, h)
    assert max(report.values()) < 1e-8
    with pytest.raises(ValueError, match="skew"):
        center_skew(field, np.eye(2))


def test_maximizer_average_identities():
    field = gen_named_field("skew_lognormal", level=1, seed=24, sigma=0.6,
                            kappa=0.6)
    report = verify_maximizer_averages(field)
    assert report["gradient_avg"] < 1e-8
    assert report["flux_avg"] < 1e-8


def test_quadratic_response_identity():
    field = gen_named_field("skew_lognormal", level=1, seed=25, sigma=0.5,
                            kappa=0.5)
    worst = verify_quadratic_response(field, n_trials=10,
                                      rng=np.random.default_rng(4))
    assert worst < 1e-9


def test_cg_inequalities_hold_on_random_harmonics():
    field = gen_named_field("skew_lognormal", level=1, seed=26, sigma=0.7,
                            kappa=0.8)
    report = verify_cg_inequalities(field, n_trials=10,
                                    rng=np.random.default_rng(5))
    assert report["dual_lower"] > -1e-10
    assert report["flux_upper"] > -1e-10
    assert report["cauchy_schwarz"] > -1e-10
    assert report["maximizer_equality"] < 1e-8


def test_loewner_chain_on_random_field():
    field = gen_named_field("checkerboard", level=1, seed=27, low=0.5, high=5.0)
    report = verify_loewner_chain(field)
    for name, val in report.items():
        assert val > -1e-9, name


def test_laminate_exact_effective_entries():
    # 9 columns, phase 0: five at a1=1, four at a2=4.  Across the layers the
    # dual block hits the harmonic mean exactly; along them the primal block
    # hits the arithmetic mean exactly.
    field = gen_named_field("laminate", level=2, a1=1.0, a2=4.0, phase=0)
    cg = coarse_grain_cube(field)
    assert np.isclose(cg.s_star[0, 0], 9.0 / (5 / 1.0 + 4 / 4.0), atol=1e-9)
    assert np.isclose(cg.s[1, 1], (5 * 1.0 + 4 * 4.0) / 9.0, atol=1e-9)
    assert abs(cg.s_star[0, 1]) < 1e-9
    assert abs(cg.s[0, 1]) < 1e-9
    assert np.linalg.eigvalsh(cg.symmetry_gap).min() > -1e-10
    g = gen_named_field("laminate", level=2, a1=1.0, a2=4.0, phase=1)
    cg1 = coarse_grain_cube(g)
    assert np.isclose(cg1.s_star[0, 0], 9.0 / (4 / 1.0 + 5 / 4.0), atol=1e-9)
    assert np.isclose(cg1.s[1, 1], (4 * 1.0 + 5 * 4.0) / 9.0, atol=1e-9)


def test_hierarchy_sweep_shapes_and_defects():
    field = gen_named_field("skew_lognormal", level=2, seed=28, sigma=0.5,
                            kappa=0.6)
    cache = hierarchy_sweep(field)
    assert cache.scales == [0, 1, 2]
    assert cache.A_by_scale[0].shape == (9, 9, 4, 4)
    assert cache.A_by_scale[1].shape == (3, 3, 4, 4)
    assert cache.A_by_scale[2].shape == (1, 1, 4, 4)
    assert cache.diagnostics == []
    assert cache.subadditivity_defect() > -1e-9
    sandwich = cache.sandwich_defect()
    assert sandwich["upper"] > -1e-9
    assert sandwich["lower"] > -1e-9
    # indexing by absolute offsets agrees with direct coarse-graining
    cube = TriadicCube(level=1, offset=(3, 6), dim=2)
    direct = coarse_grain_cube(field, cube)
    assert np.allclose(cache.A_at(1, (3, 6)), direct.A, atol=1e-12)
    mats = cache.matrices_at(1, (3, 6))
    assert isinstance(mats, CoarseGrainedMatrices)
    assert mats.cube == cube
    assert np.allclose(mats.s_star, direct.s_star, atol=1e-12)
    # cell scale equals the closed form
    assert np.allclose(cache.A_by_scale[0], pointwise_A_cells(field))


def test_hierarchy_cache_save_load(tmp_path):
    field = gen_named_field("lognormal_iso", level=1, seed=29, sigma=0.4)
    cache = hierarchy_sweep(field)
    path = str(tmp_path / "cache.npz")
    cache.save(path)
    back = HierarchyCache.load(path)
    assert back.scales == cache.scales
    assert back.fingerprint == cache.fingerprint
    assert back.top_level == cache.top_level
    for k in cache.scales:
        assert np.array_equal(back.A_by_scale[k], cache.A_by_scale[k])


def test_blocks_from_A_rejects_degenerate_lower_block():
    A = np.zeros((4, 4))
    A[:2, :2] = np.eye(2)
    with pytest.raises(ValueError, match="degenerate"):
        blocks_from_A(A, 2)


def test_hierarchy_sweep_subdomain_and_validation():
    field = gen_named_field("lognormal_iso", level=2, seed=30, sigma=0.3)
    sub = TriadicCube(level=1, offset=(3, 3), dim=2)
    cache = hierarchy_sweep(field, domain=sub)
    assert cache.scales == [0, 1]
    assert cache.A_by_scale[0].shape == (3, 3, 4, 4)
    assert cache.base_offset == (3, 3)
    direct = coarse_grain_cube(field, sub)
    assert np.allclose(cache.A_at(1, (3, 3)), direct.A, atol=1e-12)
    with pytest.raises(ValueError, match="not contained"):
        hierarchy_sweep(field, domain=TriadicCube(level=2, offset=(3, 0), dim=2))
