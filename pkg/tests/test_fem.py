import numpy as np
import pytest

from spoc.fem import FemError, build_space, gauss_rule, prolong


def hat(space, k):
    """Closed-form hat function of interior node k."""
    xk = space.mesh.interior[k]
    return lambda x: np.clip(1.0 - np.abs(x - xk) / space.h, 0.0, None)


def test_two_elements_closed_form():
    sp = build_space(0.0, 1.0, 2)
    assert sp.dim == 1
    np.testing.assert_allclose(sp.M.toarray(), [[1 / 3]], rtol=0, atol=1e-15)
    np.testing.assert_allclose(sp.A.toarray(), [[4.0]], rtol=0, atol=1e-15)


def test_four_elements_pattern():
    sp = build_space(0.0, 1.0, 4)
    M = np.diag([1 / 6] * 3) + np.diag([1 / 24] * 2, 1) + np.diag([1 / 24] * 2, -1)
    A = np.diag([8.0] * 3) + np.diag([-4.0] * 2, 1) + np.diag([-4.0] * 2, -1)
    np.testing.assert_allclose(sp.M.toarray(), M, atol=1e-15)
    np.testing.assert_allclose(sp.A.toarray(), A, atol=1e-14)


def test_longer_interval_scales_h():
    sp = build_space(0.0, 2.0, 2)
    np.testing.assert_allclose(sp.M.toarray(), [[2 / 3]], atol=1e-15)
    np.testing.assert_allclose(sp.A.toarray(), [[2.0]], atol=1e-15)


def test_rejects_single_element():
    with pytest.raises(FemError):
        build_space(0.0, 1.0, 1)
    with pytest.raises(FemError):
        build_space(1.0, 0.0, 4)


def test_matrices_match_hat_integrals():
    # integrate products of hats and of their slopes on a dense midpoint grid
    sp = build_space(0.0, 1.0, 6)
    x = (np.arange(60000) + 0.5) / 60000
    phis = np.stack([hat(sp, k)(x) for k in range(sp.dim)])
    dphis = np.stack([np.gradient(p, x) for p in phis])
    M = phis @ phis.T / x.size
    A = dphis @ dphis.T / x.size
    np.testing.assert_allclose(sp.M.toarray(), M, atol=1e-8)
    np.testing.assert_allclose(sp.A.toarray(), A, atol=5e-3)


def test_symmetry_exact():
    sp = build_space(-1.0, 2.0, 9)
    assert np.array_equal(sp.M.toarray(), sp.M.toarray().T)
    assert np.array_equal(sp.A.toarray(), sp.A.toarray().T)
    assert np.all(np.linalg.eigvalsh(sp.M.toarray()) > 0)
    assert np.all(np.linalg.eigvalsh(sp.A.toarray()) > 0)


def test_galerkin_identity():
    sp = build_space(0.0, 1.0, 8)
    xi, w = gauss_rule(2)
    # slopes of hat k on each element: +1/h left of the node, -1/h right of it
    slopes = np.zeros((sp.dim, sp.mesh.n_elems))
    for k in range(sp.dim):
        slopes[k, k] = 1 / sp.h
        slopes[k, k + 1] = -1 / sp.h
    A = sp.h * slopes @ slopes.T * w.sum()
    np.testing.assert_allclose(sp.A.toarray(), A, atol=1e-12)


def test_projection_of_hat_is_unit_vector():
    sp = build_space(0.0, 1.0, 8)
    for k in range(sp.dim):
        c = sp.l2_project(hat(sp, k))
        np.testing.assert_allclose(c, np.eye(sp.dim)[k], atol=1e-12)
    np.testing.assert_array_equal(sp.l2_project(lambda x: 0 * x), np.zeros(sp.dim))


def test_projection_of_sine_close_to_nodal_values():
    sp = build_space(0.0, 1.0, 8)
    f = lambda x: np.sin(np.pi * x)
    # dense oracle: fine midpoint quadrature for the load, direct solve
    x = (np.arange(80000) + 0.5) / 80000
    phis = np.stack([hat(sp, k)(x) for k in range(sp.dim)])
    load = phis @ f(x) / x.size
    oracle = np.linalg.solve(sp.M.toarray(), load)
    c = sp.l2_project(f)
    np.testing.assert_allclose(c, oracle, atol=1e-8)
    assert np.max(np.abs(c - f(sp.mesh.interior))) < 2 * sp.h ** 2


def test_low_quadrature_order_rejected():
    with pytest.raises(FemError):
        build_space(0.0, 1.0, 4, quad_order=1)


def test_solve_shifted_examples(rng):
    sp = build_space(0.0, 1.0, 2)
    assert sp.solve_shifted(0.25, np.array([1 / 12]))[0] == pytest.approx(1 / 16, abs=1e-15)
    np.testing.assert_array_equal(sp.solve_shifted(0.1, np.zeros(1)), np.zeros(1))
    sp = build_space(0.0, 1.0, 16)
    rhs = rng.standard_normal(sp.dim)
    dense = np.linalg.solve(sp.M.toarray() + 0.03 * sp.A.toarray(), rhs)
    np.testing.assert_allclose(sp.solve_shifted(0.03, rhs), dense, atol=1e-12)
    many = rng.standard_normal((5, sp.dim))
    np.testing.assert_allclose(sp.shifted_apply(0.03, sp.solve_shifted(0.03, many)), many, atol=1e-12)


def test_spectral_data():
    sp = build_space(0.0, 1.0, 64)
    spec = sp.spectral
    assert np.all(np.diff(spec.values) > 0) and spec.values[0] > 0
    Q = spec.vectors
    np.testing.assert_allclose(Q.T @ sp.M.toarray() @ Q, np.eye(sp.dim), atol=1e-10)
    np.testing.assert_allclose(sp.A @ Q, sp.M @ Q * spec.values, atol=1e-8 * spec.values[-1])
    assert abs(spec.values[0] - np.pi ** 2) / np.pi ** 2 < 0.01
    q1 = Q[:, 0]
    assert sp.norm_beta(q1, 2) == pytest.approx(spec.values[0], rel=1e-10)


def test_norm_beta_zero_is_mass_norm(rng):
    sp = build_space(0.0, 1.0, 12)
    v = rng.standard_normal((4, sp.dim))
    np.testing.assert_allclose(sp.norm_beta(v, 0), sp.norm(v), rtol=1e-12)
    np.testing.assert_allclose(sp.norm_beta(v, 1), sp.h1_seminorm(v), rtol=1e-10)
    with pytest.raises(FemError):
        sp.norm_beta(v, 3)


def test_semigroup_identity_and_negative_time(rng):
    sp = build_space(0.0, 1.0, 10)
    v = rng.standard_normal(sp.dim)
    np.testing.assert_allclose(sp.semigroup_apply(0.0, v), v, atol=1e-12)
    with pytest.raises(FemError):
        sp.semigroup_apply(-0.1, v)


def test_semigroup_contraction_random(rng):
    sp = build_space(0.0, 1.0, 16)
    for _ in range(100):
        v = rng.standard_normal(sp.dim)
        t = rng.uniform(0, 1)
        assert sp.norm_beta(sp.semigroup_apply(t, v), 0) <= sp.norm_beta(v, 0) * (1 + 1e-12)


def test_prolong_examples():
    c, f = build_space(0.0, 1.0, 4), build_space(0.0, 1.0, 8)
    np.testing.assert_array_equal(prolong(c, f, np.zeros(c.dim)), np.zeros(f.dim))
    out = prolong(c, f, np.eye(c.dim)[1])
    np.testing.assert_allclose(out, [0, 0, 0.5, 1, 0.5, 0, 0])
    with pytest.raises(FemError):
        prolong(build_space(0.0, 1.0, 3), f, np.zeros(2))
    with pytest.raises(FemError):
        prolong(c, build_space(0.0, 2.0, 8), np.zeros(c.dim))
