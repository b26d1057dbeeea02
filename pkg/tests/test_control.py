import numpy as np
import pytest

from oracles import fine_integral, golden_section, leaf_states
from spoc.control import (BoxBounds, ControlError, ControlField, ControlProblem, CostParams,
                          DivergenceError, OptimizerConfig, duality_terms, eval_cost,
                          gradient_multiplier, l2_dist, l2_inner, optimize, project_box, vi_check,
                          vi_values, zero_control)
from spoc.fem import build_space
from spoc.forward import solve_forward_tree
from spoc.noise import AdaptedField, build_tree
from spoc.sources import catalog_source, random_field_source


def random_p0(space, tree, rng, bounds=None, lo=-1.0, hi=1.0):
    vals = AdaptedField(tree, space.mesh.n_elems, tree.J)
    vals.data[...] = rng.uniform(lo, hi, vals.data.shape)
    return ControlField("P0", vals, bounds)


def random_p1(space, tree, rng, bounds=None, scale=1.0):
    vals = AdaptedField(tree, space.dim, tree.J)
    vals.data[...] = scale * rng.standard_normal(vals.data.shape)
    return ControlField("clampedP1", vals, bounds)


def test_bounds_and_params_validated():
    with pytest.raises(ControlError):
        BoxBounds(1.0, 1.0)
    with pytest.raises(ControlError):
        CostParams(0.0, None)
    with pytest.raises(ControlError):
        ControlField("P2", None)


def test_cost_trivial_cases():
    sp = build_space(0.0, 1.0, 8)
    tree = build_tree(1.0, 3, sp.dim)
    b = BoxBounds(-1.0, 1.0)
    U = zero_control(sp, tree, "P0", b)
    assert eval_cost(sp, tree, U, CostParams(0.1, None)) == 0.0
    yd = catalog_source("target")
    want = 0.5 * yd.sq_norms(sp, tree.grid).sum()
    assert eval_cost(sp, tree, U, CostParams(0.1, yd)) == pytest.approx(want, rel=1e-14)


def test_cost_against_leaf_enumeration_p0(rng):
    sp = build_space(0.0, 1.0, 4)
    tree = build_tree(1.0, 3, sp.dim)
    b = BoxBounds(-0.5, 0.7)
    U = random_p0(sp, tree, rng, b, -0.5, 0.7)
    yd = catalog_source("target")
    nu = 0.3
    # hand-assembled loads: int U phi_i = h/2 (U_left + U_right)
    loads = [tree.tau * sp.h / 2 * (U.values[j][:, :-1] + U.values[j][:, 1:]) for j in range(3)]
    Y = leaf_states(sp, tree, loads)
    ld = yd.loads(sp, tree.grid)
    sq = yd.sq_norms(sp, tree.grid)
    M = sp.M.toarray()
    track = np.mean([sum(tree.tau * y[j] @ M @ y[j] - 2 * y[j] @ ld[j] + sq[j] for j in range(3)) for y in Y])
    reg = sum(tree.tau * sp.h * np.mean(np.sum(U.values[j] ** 2, axis=1)) for j in range(3))
    oracle = 0.5 * track + 0.5 * nu * reg
    assert eval_cost(sp, tree, U, CostParams(nu, yd)) == pytest.approx(oracle, rel=1e-12)


def test_cost_against_leaf_enumeration_clamped(rng):
    sp = build_space(0.0, 1.0, 4)
    tree = build_tree(1.0, 3, sp.dim)
    b = BoxBounds(-0.3, 0.4)
    U = random_p1(sp, tree, rng, b)
    nodes = sp.mesh.nodes
    def u_at(j, n):
        full = sp.with_nodes(U.values[j][n])
        return lambda x: np.clip(np.interp(x, nodes, full), -0.3, 0.4)
    def hat(i):
        return lambda x: np.clip(1 - np.abs(x - sp.mesh.interior[i]) / sp.h, 0, None)
    loads = [np.array([[tree.tau * fine_integral(sp, lambda x: u_at(j, n)(x) * hat(i)(x)) for i in range(sp.dim)]
                       for n in range(tree.level_size(j))]) for j in range(3)]
    np.testing.assert_allclose(np.concatenate(U.interval_loads(sp, tree)), np.concatenate(loads), atol=1e-9)
    reg = sum(tree.tau * np.mean([fine_integral(sp, lambda x: u_at(j, n)(x) ** 2) for n in range(2 ** j)])
              for j in range(3))
    assert l2_inner(sp, tree, U, U) == pytest.approx(reg, rel=1e-7)  # midpoint error at the kinks


def test_multiplier_zero_for_trivial_problem():
    sp = build_space(0.0, 1.0, 8)
    tree = build_tree(1.0, 3, sp.dim)
    m, a0 = gradient_multiplier(sp, tree, zero_control(sp, tree, "clampedP1", BoxBounds(-1, 1)),
                                CostParams(0.1, None))
    assert np.all(m.data == 0.0) and a0 == 0.0


@pytest.mark.parametrize("mode", ["P0", "clampedP1"])
def test_gradient_matches_finite_differences(rng, mode):
    sp = build_space(0.0, 1.0, 8)
    tree = build_tree(1.0, 4, sp.dim)
    prob = ControlProblem(sp, tree, CostParams(0.1, catalog_source("target")), None, mode)
    make = random_p0 if mode == "P0" else random_p1
    U = make(sp, tree, rng)
    ev = prob.evaluate(U)
    for _ in range(10):
        V = make(sp, tree, rng)
        s = 1e-5
        fd = (prob.cost(U.with_values(U.values + V.values * s))
              - prob.cost(U.with_values(U.values - V.values * s))) / (2 * s)
        adj = prob.gradient_pairing(ev, V)
        assert abs(fd - adj) <= 1e-6 * abs(adj)
        assert abs(prob.tangent_derivative(ev, V) - adj) <= 1e-12 * max(1.0, abs(adj))


def test_a0_vanishes(rng):
    sp = build_space(0.0, 1.0, 8)
    tree = build_tree(1.0, 4, sp.dim)
    b = BoxBounds(-0.4, 0.6)
    U = random_p1(sp, tree, rng, b)
    _, a0 = gradient_multiplier(sp, tree, U, CostParams(0.05, catalog_source("target")))
    assert abs(a0) <= 1e-12
    _, a0 = gradient_multiplier(sp, tree, U, CostParams(0.05, catalog_source("target")),
                                direction=random_p1(sp, tree, rng, b))
    assert abs(a0) <= 1e-12


@pytest.mark.parametrize("coarsen", [1, 2])
def test_duality_identity(rng, coarsen):
    sp = build_space(0.0, 1.0, 8)
    tree = build_tree(1.0, 4, sp.dim).coarsen(coarsen)
    for _ in range(5):
        d = duality_terms(sp, tree, random_field_source(sp, tree, rng), random_field_source(sp, tree, rng))
        assert d["residual"] <= 1e-12
        assert d["lhs"] != 0.0
        # both factors of the correction are level-j measurable, so it vanishes on the tree
        assert d["noise_term"] == 0.0


def test_project_box_examples(rng):
    sp = build_space(0.0, 1.0, 8)
    tree = build_tree(1.0, 3, sp.dim)
    b = BoxBounds(-1.0, 1.0)
    U = random_p0(sp, tree, rng, b, -1.0, 1.0)
    assert np.array_equal(project_box(sp, U, b, "P0").values.data, U.values.data)
    w = AdaptedField(tree, sp.dim, tree.J)
    w.data[...] = 2.0
    P = project_box(sp, w, b, "P0")
    assert np.all(P.values[0][:, 1:-1] == 1.0)  # interior elements; boundary elements average with 0
    Pc = project_box(sp, w, b, "clampedP1")
    x = np.linspace(0.1, 0.9, 50)
    assert np.all(Pc.evaluate(sp, 1, x) == 1.0)


@pytest.mark.parametrize("mode", ["P0", "clampedP1"])
def test_projection_nonexpansive_and_idempotent(rng, mode):
    sp = build_space(0.0, 1.0, 6)
    tree = build_tree(1.0, 3, sp.dim)
    b = BoxBounds(-0.5, 0.5)
    for _ in range(100):
        w1, w2 = (random_p1(sp, tree, rng, scale=1.5).values for _ in range(2))
        p1, p2 = project_box(sp, w1, b, mode), project_box(sp, w2, b, mode)
        assert l2_dist(sp, tree, p1, p2) <= l2_dist(sp, tree, w1, w2) * (1 + 1e-12)
    again = project_box(sp, p1, b, mode) if mode == "P0" else p1
    assert l2_dist(sp, tree, again, p1) == 0.0


def test_optimize_zero_target_stops_immediately():
    sp = build_space(0.0, 1.0, 8)
    tree = build_tree(1.0, 4, sp.dim)
    for mode in ("P0", "clampedP1"):
        res = optimize(sp, tree, CostParams(0.1, None), BoxBounds(-1, 1), OptimizerConfig(mode=mode))
        assert res.converged and res.n_iter == 0 and np.all(res.U.values.data == 0.0)


def _symmetric_p0(sp, tree, bounds, u0, rest=0.0):
    vals = AdaptedField(tree, sp.mesh.n_elems, tree.J)
    vals[0] = u0
    for j in range(1, tree.J):
        vals[j] = rest
    return ControlField("P0", vals, bounds)


def test_scalar_instance_single_step():
    sp = build_space(0.0, 1.0, 2)
    tree = build_tree(0.25, 1, sp.dim)
    b = BoxBounds(0.2, 1.0)
    params = CostParams(0.5, catalog_source("sine"))
    res = optimize(sp, tree, params, b, OptimizerConfig(mode="P0", tol=1e-12))
    u = golden_section(lambda u: eval_cost(sp, tree, _symmetric_p0(sp, tree, b, u), params), 0.2, 1.0)
    np.testing.assert_allclose(res.U.values[0], u, atol=1e-8)


def test_scalar_instance_two_steps():
    # the first control moves the state at t_1, so the optimum is a genuine trade-off
    sp = build_space(0.0, 1.0, 2)
    tree = build_tree(0.5, 2, sp.dim)
    b = BoxBounds(-2.0, 5.0)
    params = CostParams(0.05, catalog_source("sine"))
    res = optimize(sp, tree, params, b, OptimizerConfig(mode="P0", tol=1e-13, max_iter=2000))
    assert res.converged
    u = golden_section(lambda u: eval_cost(sp, tree, _symmetric_p0(sp, tree, b, u), params), -2.0, 5.0)
    assert -2.0 < u < 5.0
    np.testing.assert_allclose(res.U.values[0], u, atol=1e-8)
    np.testing.assert_allclose(res.U.values[1], 0.0, atol=1e-10)


@pytest.mark.parametrize("mode", ["P0", "clampedP1"])
def test_optimize_sine_target(mode):
    sp = build_space(0.0, 1.0, 8)
    tree = build_tree(1.0, 4, sp.dim)
    b = BoxBounds(-0.5, 1.0)
    params = CostParams(0.1, catalog_source("sine"))
    res = optimize(sp, tree, params, b, OptimizerConfig(mode=mode))
    assert res.converged and res.residuals[-1] <= 1e-8
    c = np.array(res.costs)
    assert np.all(np.diff(c) <= 1e-12 * np.abs(c[:-1]))
    assert vi_check(sp, tree, res.U, params, 200, seed=3) >= -1e-8
    x = sp.mesh.a + (np.arange(sp.mesh.n_elems)[:, None] + np.array([0.2, 0.7])) .ravel() * sp.h
    for j in range(tree.J):
        v = res.U.evaluate(sp, j, x)
        assert np.all((v >= b.lower) & (v <= b.upper))


def test_optimize_with_active_constraints_and_adapted_target(rng):
    sp = build_space(0.0, 1.0, 8)
    tree = build_tree(1.0, 4, sp.dim)
    Yv = solve_forward_tree(sp, tree, random_p0(sp, tree, rng, None, -5.0, 5.0))
    params = CostParams(0.05, Yv)
    b = BoxBounds(-0.3, 0.3)
    res = optimize(sp, tree, params, b, OptimizerConfig(mode="clampedP1"))
    assert res.converged
    U = np.clip(res.U.values.data, b.lower, b.upper)
    assert np.any(np.abs(U) == 0.3) and np.any(np.abs(U) < 0.29)
    assert vi_check(sp, tree, res.U, params, 200) >= -1e-8


def test_strong_convexity_gap():
    sp = build_space(0.0, 1.0, 8)
    tree = build_tree(1.0, 4, sp.dim)
    nu = 0.1
    params = CostParams(nu, catalog_source("target"))
    res = optimize(sp, tree, params, BoxBounds(-0.5, 0.5), OptimizerConfig(mode="P0", tol=1e-11))
    s = res.step
    final = res.costs[-1]
    for c, r in zip(res.costs[:-1], res.residuals[:-1]):
        grad_map = r / s
        assert c - final <= 10 * grad_map ** 2 / (2 * nu)


def test_divergence_and_iteration_limit():
    sp = build_space(0.0, 1.0, 8)
    tree = build_tree(1.0, 4, sp.dim)
    params = CostParams(0.1, catalog_source("target"))
    b = BoxBounds(-5.0, 5.0)
    with pytest.raises(DivergenceError) as err:
        optimize(sp, tree, params, b, OptimizerConfig(mode="P0", step=200.0, backtracking=False))
    assert err.value.result.reason == "diverged" and len(err.value.result.costs) >= 1
    res = optimize(sp, tree, params, b, OptimizerConfig(mode="P0", max_iter=2))
    assert res.reason == "max_iter" and res.n_iter == 2
    with pytest.raises(ControlError):
        optimize(sp, tree, params, b, OptimizerConfig(theta=1.5))


def test_vi_examples(rng):
    sp = build_space(0.0, 1.0, 8)
    tree = build_tree(1.0, 3, sp.dim)
    b = BoxBounds(-1.0, 1.0)
    prob = ControlProblem(sp, tree, CostParams(0.1, None), b, "P0")
    ev = prob.evaluate(zero_control(sp, tree, "P0", b))
    assert np.all(np.array(vi_values(prob, ev, 50)) == 0.0)
    # away from the optimum the sampled minimum is negative
    params = CostParams(0.1, catalog_source("sine"))
    assert vi_check(sp, tree, zero_control(sp, tree, "P0", b), params, 50) < 0
    # the pairing is linear in the direction
    prob = ControlProblem(sp, tree, params, b, "P0")
    ev = prob.evaluate(zero_control(sp, tree, "P0", b))
    V = random_p0(sp, tree, rng, b, -1, 1)
    half = V.with_values(V.values * 0.5)
    assert prob.gradient_pairing(ev, half) == pytest.approx(0.5 * prob.gradient_pairing(ev, V), rel=1e-13)
