"""Discrete optimal control: cost, exact gradient, box projection, solver.

The discrete problem is

    min_U  1/2 E |S0 U - y_d|^2_{L2(0,T;L2)} + nu/2 E |U|^2_{L2(0,T;L2)}

over adapted, piecewise-constant-in-time controls with ``lower <= U <= upper``.
The state on ``[t_j, t_{j+1})`` is ``Y_j``. Two control representations exist:

``P0``
    one value per element and tree node; projection is averaging + clamping.
``clampedP1``
    ``U = clamp(Phi)`` for a V_h coefficient vector ``Phi``. Controls are not
    meshed: the optimum has exactly this form, ``U = clamp(-m / nu)``.

Integrals of clamped piecewise-linear functions are computed exactly by
splitting every element at the (at most two) clamp breakpoints.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .backward import BackwardPair, solve_backward_tree
from .fem import FemSpace, gauss_rule
from .forward import solve_forward_tree
from .noise import AdaptedField, BinomialTree
from .sources import ClosedFormSource, FieldSource, ModalSource, interval_loads

log = logging.getLogger(__name__)

MODES = ("P0", "clampedP1")
_CHUNK = 4096


class ControlError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class BoxBounds:
    lower: float
    upper: float

    def __post_init__(self):
        if not -np.inf < self.lower < self.upper < np.inf:
            raise ControlError(f"need finite lower < upper, got [{self.lower}, {self.upper}]")

    def clip(self, v):
        return np.clip(v, self.lower, self.upper)


@dataclass(frozen=True)
class CostParams:
    nu: float
    target: object = None

    def __post_init__(self):
        if not self.nu > 0:
            raise ControlError(f"nu must be positive, got {self.nu}")


# -- element-wise exact integration -------------------------------------------

class _Linear:
    """Per-element linear function, optionally clamped, on local coordinate t in [0, 1]."""

    def __init__(self, v0, v1, lo=None, hi=None):
        self.v0 = np.asarray(v0, dtype=float)
        self.v1 = np.asarray(v1, dtype=float)
        self.lo, self.hi = lo, hi

    def breaks(self) -> np.ndarray:
        shape = np.broadcast_shapes(self.v0.shape, self.v1.shape)
        if self.lo is None:
            return np.empty(shape + (0,))
        dv = self.v1 - self.v0
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.stack(np.broadcast_arrays((self.lo - self.v0) / dv,
                                               (self.hi - self.v0) / dv), axis=-1)
        return np.clip(np.nan_to_num(out, nan=0.0, posinf=0.0, neginf=0.0), 0.0, 1.0)

    def __call__(self, t: np.ndarray) -> np.ndarray:
        v = self.v0[..., None] + (self.v1 - self.v0)[..., None] * t
        if self.lo is not None:
            v = np.clip(v, self.lo, self.hi)
        return v

    def chunk(self, sl) -> "_Linear":
        pick = lambda a: a[sl] if a.ndim == 2 else a
        return _Linear(pick(self.v0), pick(self.v1), self.lo, self.hi)


def _integrate(h: float, *fns: _Linear) -> np.ndarray:
    """Exact ``int_e prod(fns)`` on every element for products of at most three
    piecewise-linear factors."""
    shape = np.broadcast_shapes(*(np.broadcast_shapes(f.v0.shape, f.v1.shape) for f in fns))
    brks = [np.broadcast_to(f.breaks(), shape + (f.breaks().shape[-1],)) for f in fns]
    pts = np.concatenate([np.zeros(shape + (1,)), np.ones(shape + (1,))] + brks, axis=-1)
    pts.sort(axis=-1)
    a, b = pts[..., :-1], pts[..., 1:]
    xi, w = gauss_rule(2)
    t = (a[..., None] + (b - a)[..., None] * xi).reshape(shape + (-1,))
    wt = ((b - a)[..., None] * w).reshape(shape + (-1,))
    prod = wt
    for f in fns:
        prod = prod * f(t)
    return h * prod.sum(axis=-1)


def _integrate_chunked(h: float, *fns: _Linear) -> np.ndarray:
    n = max(f.v0.shape[0] if f.v0.ndim == 2 else 1 for f in fns)
    if n <= _CHUNK:
        return _integrate(h, *fns)
    parts = [_integrate(h, *(f.chunk(slice(i, i + _CHUNK)) for f in fns))
             for i in range(0, n, _CHUNK)]
    return np.concatenate(parts, axis=0)


def _p1_pieces(coeffs: np.ndarray, lo=None, hi=None) -> _Linear:
    full = np.pad(np.atleast_2d(coeffs), [(0, 0), (1, 1)])
    return _Linear(full[:, :-1], full[:, 1:], lo, hi)


_LEFT_HAT = _Linear(1.0, 0.0)
_RIGHT_HAT = _Linear(0.0, 1.0)


# -- control fields -----------------------------------------------------------

@dataclass
class ControlField:
    """Adapted control on tree levels 0..J-1.

    ``values`` holds element values (``P0``) or V_h coefficients (``clampedP1``).
    A ``clampedP1`` field without bounds is a plain P1 function; such fields
    serve as unconstrained perturbation directions.
    """

    mode: str
    values: AdaptedField
    bounds: BoxBounds | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ControlError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def tree(self) -> BinomialTree:
        return self.values.tree

    def pieces(self, j: int) -> _Linear:
        v = self.values[j]
        if self.mode == "P0":
            return _Linear(v, v)
        lo, hi = (self.bounds.lower, self.bounds.upper) if self.bounds else (None, None)
        return _p1_pieces(v, lo, hi)

    def interval_loads(self, space: FemSpace, tree: BinomialTree) -> list[np.ndarray]:
        self._check(space, tree)
        tau = tree.tau
        out = []
        for j in range(tree.J):
            if self.mode == "P0":
                v = self.values[j]
                half = 0.5 * space.h * v
                out.append(tau * (half[:, :-1] + half[:, 1:]))
            else:
                u = self.pieces(j)
                left = _integrate_chunked(space.h, u, _LEFT_HAT)
                right = _integrate_chunked(space.h, u, _RIGHT_HAT)
                out.append(tau * (left[:, 1:] + right[:, :-1]))
        return out

    def evaluate(self, space: FemSpace, j: int, x: np.ndarray) -> np.ndarray:
        """Point values at level j (for spot checks), shape ``(nodes, len(x))``."""
        x = np.asarray(x, dtype=float)
        e = np.clip(((x - space.mesh.a) // space.h).astype(int), 0, space.mesh.n_elems - 1)
        t = (x - space.mesh.nodes[e]) / space.h
        p = self.pieces(j)
        v0 = np.broadcast_to(p.v0, np.broadcast_shapes(p.v0.shape, p.v1.shape))
        v1 = np.broadcast_to(p.v1, v0.shape)
        v = v0[:, e] + (v1[:, e] - v0[:, e]) * t
        return v if p.lo is None else np.clip(v, p.lo, p.hi)

    def is_feasible(self, tol: float = 0.0) -> bool:
        if self.bounds is None:
            return False
        if self.mode == "clampedP1":
            return True
        d = self.values.data
        return bool(np.all(d >= self.bounds.lower - tol) and np.all(d <= self.bounds.upper + tol))

    def _check(self, space: FemSpace, tree: BinomialTree) -> None:
        want = space.mesh.n_elems if self.mode == "P0" else space.dim
        if self.values.dim != want:
            raise ControlError(f"{self.mode} control has {self.values.dim} values per node, "
                               f"space needs {want}")
        if self.values.tree.J != tree.J or self.values.tree.branching != tree.branching:
            raise ControlError("control lives on a different tree")
        if self.values.n_levels < tree.J:
            raise ControlError(f"control needs levels 0..{tree.J - 1}")

    def with_values(self, values: AdaptedField) -> "ControlField":
        return ControlField(self.mode, values, self.bounds)


def zero_control(space: FemSpace, tree: BinomialTree, mode: str, bounds: BoxBounds | None) -> ControlField:
    dim = space.mesh.n_elems if mode == "P0" else space.dim
    return ControlField(mode, AdaptedField(tree, dim, tree.J), bounds)


def l2_inner(space: FemSpace, tree: BinomialTree, f: ControlField, g: ControlField) -> float:
    """``E int_0^T int f g`` for two controls (any representation)."""
    total = 0.0
    for j in range(tree.J):
        vals = _integrate_chunked(space.h, f.pieces(j), g.pieces(j)).sum(axis=-1)
        total += tree.tau * float(tree.expect(np.broadcast_to(vals, (tree.level_size(j),))))
    return total


def l2_dist(space: FemSpace, tree: BinomialTree, f, g) -> float:
    """``|f - g|`` in L2(Omega; L2(0,T; L2)); ``f``, ``g`` are controls or P1 fields."""
    total = 0.0
    for j in range(tree.J):
        vals = _integrate_diff_sq(space.h, _as_pieces(f, j), _as_pieces(g, j))
        total += tree.tau * float(tree.expect(np.broadcast_to(vals, (tree.level_size(j),))))
    return float(np.sqrt(total))


def _as_pieces(f, j) -> _Linear:
    if isinstance(f, ControlField):
        return f.pieces(j)
    if isinstance(f, AdaptedField):
        return _p1_pieces(f[j])
    raise ControlError(f"cannot integrate {type(f).__name__}")


def _integrate_diff_sq(h: float, f: _Linear, g: _Linear) -> np.ndarray:
    n = max(p.v0.shape[0] if p.v0.ndim == 2 else 1 for p in (f, g))
    out = []
    for i in range(0, n, _CHUNK):
        fc, gc = f.chunk(slice(i, i + _CHUNK)), g.chunk(slice(i, i + _CHUNK))
        shape = np.broadcast_shapes(fc.v0.shape, fc.v1.shape, gc.v0.shape, gc.v1.shape)
        brks = [np.broadcast_to(p.breaks(), shape + (p.breaks().shape[-1],)) for p in (fc, gc)]
        pts = np.concatenate([np.zeros(shape + (1,)), np.ones(shape + (1,))] + brks, axis=-1)
        pts.sort(axis=-1)
        a, b = pts[..., :-1], pts[..., 1:]
        xi, w = gauss_rule(2)
        t = (a[..., None] + (b - a)[..., None] * xi).reshape(shape + (-1,))
        wt = ((b - a)[..., None] * w).reshape(shape + (-1,))
        d = fc(t) - gc(t)
        out.append(h * np.sum(wt * d * d, axis=-1).sum(axis=-1))
    return np.concatenate(out) if len(out) > 1 else out[0]


# -- projection ---------------------------------------------------------------

def element_average(space: FemSpace, coeffs: np.ndarray) -> np.ndarray:
    full = space.with_nodes(np.asarray(coeffs, dtype=float))
    return 0.5 * (full[..., :-1] + full[..., 1:])


def project_box(space: FemSpace, w, bounds: BoxBounds, mode: str = "clampedP1") -> ControlField:
    """L2 projection onto the feasible set of the given representation.

    ``w`` is an adapted P1 field (V_h coefficients on levels 0..J-1) or a P0
    ``ControlField``.
    """
    if mode not in MODES:
        raise ControlError(f"mode must be one of {MODES}, got {mode!r}")
    if isinstance(w, ControlField):
        if w.mode == "P0":
            if mode != "P0":
                raise ControlError("a P0 field can only be projected in P0 mode")
            vals = w.values.copy()
            vals.data[...] = bounds.clip(vals.data)
            return ControlField("P0", vals, bounds)
        w = w.values
    if mode == "P0":
        tree = w.tree
        vals = AdaptedField(tree, space.mesh.n_elems, w.n_levels)
        vals.data[...] = 0.0
        for j in range(w.n_levels):
            vals[j] = bounds.clip(element_average(space, w[j]))
        return ControlField("P0", vals, bounds)
    return ControlField("clampedP1", w.copy(), bounds)


# -- the problem ----------------------------------------------------------------

@dataclass
class Evaluation:
    """State, cost and multiplier of one control."""

    U: ControlField
    Y: AdaptedField
    cost: float
    m: AdaptedField | None = None
    pair: BackwardPair | None = None


class ControlProblem:
    """Bundles mesh, tree, cost data and bounds; caches target loads."""

    def __init__(self, space: FemSpace, tree: BinomialTree, params: CostParams,
                 bounds: BoxBounds | None = None, mode: str = "clampedP1"):
        if mode not in MODES:
            raise ControlError(f"mode must be one of {MODES}, got {mode!r}")
        self.space, self.tree, self.params, self.bounds, self.mode = space, tree, params, bounds, mode
        self.target_loads, self.target_sq = _target_terms(space, tree, params.target)

    # state & cost

    def state(self, U: ControlField) -> AdaptedField:
        return solve_forward_tree(self.space, self.tree, U)

    def tracking_loads(self, Y: AdaptedField) -> list[np.ndarray]:
        """Loads of ``g = S0 U - y_d`` on each interval."""
        tau = self.tree.tau
        return [tau * self.space.mass_apply(Y[j]) - self.target_loads[j] for j in range(self.tree.J)]

    def cost(self, U: ControlField, Y: AdaptedField | None = None) -> float:
        if Y is None:
            Y = self.state(U)
        tree, space, tau = self.tree, self.space, self.tree.tau
        track = 0.0
        for j in range(tree.J):
            y = Y[j]
            quad = tau * space.inner(y, y) - 2.0 * np.einsum("ni,ni->n", y,
                                                            np.broadcast_to(self.target_loads[j], y.shape))
            track += float(tree.expect(quad)) + self.target_sq[j]
        reg = l2_inner(space, tree, U, U)
        return 0.5 * track + 0.5 * self.params.nu * reg

    def evaluate(self, U: ControlField, with_multiplier: bool = True) -> Evaluation:
        Y = self.state(U)
        ev = Evaluation(U, Y, self.cost(U, Y))
        if with_multiplier:
            ev.pair = solve_backward_tree(self.space, self.tree, self.tracking_loads(Y), drift=1)
            ev.m = self._multiplier(ev.pair)
        return ev

    def _multiplier(self, pair: BackwardPair) -> AdaptedField:
        m = AdaptedField(self.tree, self.space.dim, self.tree.J)
        for j in range(self.tree.J):
            m[j] = self.tree.cond_expect(pair.P[j + 1])
        return m

    # derivatives

    def gradient_pairing(self, ev: Evaluation, V: ControlField) -> float:
        """``sum_j tau E <m_j + nu U_j, V_j>`` using the adjoint multiplier."""
        tree = self.tree
        lv = V.interval_loads(self.space, tree)
        val = sum(float(tree.expect(np.einsum("ni,ni->n", ev.m[j], np.broadcast_to(lv[j], ev.m[j].shape))))
                  for j in range(tree.J))
        return val + self.params.nu * l2_inner(self.space, tree, ev.U, V)

    def tangent_derivative(self, ev: Evaluation, V: ControlField) -> float:
        """Forward-mode ``E int [S0 U - y_d, S0 V] + nu [U, V]``."""
        Yv = self.state(V)
        g = self.tracking_loads(ev.Y)
        val = sum(float(self.tree.expect(np.einsum("ni,ni->n", Yv[j], np.broadcast_to(g[j], Yv[j].shape))))
                  for j in range(self.tree.J))
        return val + self.params.nu * l2_inner(self.space, self.tree, ev.U, V)

    def a0_diagnostic(self, ev: Evaluation, direction: ControlField | None = None) -> float:
        """``-sum_j E[(tau Z_j + int g) . (S0 W)_j dW_j]`` with ``W = direction - U``.

        Zero on the tree: both factors but ``dW_j`` are level-j measurable.
        """
        if direction is None:
            direction = self.fixed_point_image(ev)
        tree, space = self.tree, self.space
        Yw = self.state(direction)
        Yw.data -= ev.Y.data
        g = self.tracking_loads(ev.Y)
        total = 0.0
        for j in range(tree.J):
            left = tree.tau * space.mass_apply(ev.pair.Z[j]) + g[j]
            right = Yw[j]
            prod = np.einsum("ni,ni->n", np.broadcast_to(left, right.shape), right)
            total -= float(tree.expect(tree.lift(prod) * tree.increments(j)))
        return total

    # projected-gradient machinery

    def fixed_point_image(self, ev: Evaluation, step: float | None = None) -> ControlField:
        """``P(U - s (m + nu U))``; for ``clampedP1`` the step is ``1/nu``, giving ``clamp(-m/nu)``."""
        nu = self.params.nu
        if self.mode == "clampedP1":
            return ControlField("clampedP1", ev.m * (-1.0 / nu), self.bounds)
        if step is None:
            raise ControlError("P0 mode needs a step size")
        vals = ev.U.values.copy()
        for j in range(self.tree.J):
            grad = element_average(self.space, ev.m[j]) + nu * ev.U.values[j]
            vals[j] = self.bounds.clip(ev.U.values[j] - step * grad)
        return ControlField("P0", vals, self.bounds)

    def residual(self, ev: Evaluation, step: float | None = None) -> float:
        return l2_dist(self.space, self.tree, ev.U, self.fixed_point_image(ev, step))

    def estimate_lipschitz(self, n_iter: int = 10, seed: int = 0) -> float:
        """Power iteration for the largest eigenvalue of ``S0* S0`` on P0 controls."""
        tree, space = self.tree, self.space
        rng = np.random.default_rng(seed)
        vals = AdaptedField(tree, space.mesh.n_elems, tree.J)
        vals.data[...] = rng.standard_normal(vals.data.shape)
        V = ControlField("P0", vals)
        lam = 0.0
        for _ in range(n_iter):
            nrm = np.sqrt(l2_inner(space, tree, V, V))
            if nrm == 0.0:
                return 0.0  # the control does not reach the cost (e.g. J = 1)
            V = V.with_values(V.values * (1.0 / nrm))
            Y = self.state(V)
            loads = [tree.tau * space.mass_apply(Y[j]) for j in range(tree.J)]
            pair = solve_backward_tree(space, tree, loads, drift=1)
            m = self._multiplier(pair)
            HV = AdaptedField(tree, space.mesh.n_elems, tree.J)
            for j in range(tree.J):
                HV[j] = element_average(space, m[j])
            HV = ControlField("P0", HV)
            lam = l2_inner(space, tree, V, HV)
            V = HV
        return float(lam)


def _target_terms(space: FemSpace, tree: BinomialTree, target):
    J = tree.J
    if target is None:
        return [np.zeros((1, space.dim)) for _ in range(J)], np.zeros(J)
    if isinstance(target, ClosedFormSource):
        return interval_loads(space, tree, target), target.sq_norms(space, tree.grid)
    if isinstance(target, ModalSource):
        return interval_loads(space, tree, target), target.sq_norms(space, tree)
    if isinstance(target, AdaptedField):
        target = FieldSource(target)
    if isinstance(target, FieldSource):
        loads = interval_loads(space, tree, target)
        f = target.field
        sq = np.array([tree.tau * float(tree.expect(space.inner(f[j], f[j]))) for j in range(J)])
        return loads, sq
    raise ControlError(f"unsupported target {type(target).__name__}")


# -- module-level operations --------------------------------------------------

def eval_cost(space: FemSpace, tree: BinomialTree, U: ControlField, params: CostParams) -> float:
    U._check(space, tree)
    return ControlProblem(space, tree, params, U.bounds, U.mode).cost(U)


def gradient_multiplier(space: FemSpace, tree: BinomialTree, U: ControlField, params: CostParams,
                        direction: ControlField | None = None) -> tuple[AdaptedField, float]:
    """Multiplier ``m_j = E_j[(S1(S0 U - y_d))_{j+1}]`` and the A0 diagnostic."""
    U._check(space, tree)
    prob = ControlProblem(space, tree, params, U.bounds, U.mode)
    ev = prob.evaluate(U)
    if direction is None and U.bounds is None:
        direction = U
    return ev.m, prob.a0_diagnostic(ev, direction)


def duality_terms(space: FemSpace, tree: BinomialTree, f_src, g_src) -> dict:
    """Both sides of the discrete duality between the forward and adjoint operators.

    lhs = sum_j [int g, (S0 f)_j]
    rhs = sum_j [int f, (S1 g)_{j+1}] - [(S0 f)_j dW_j, int (S2 g + g)]
    """
    lf = interval_loads(space, tree, f_src)
    lg = interval_loads(space, tree, g_src)
    Y = solve_forward_tree(space, tree, lf)
    pair = solve_backward_tree(space, tree, lg, drift=1)
    lhs = first = second = 0.0
    for j in range(tree.J):
        y = Y[j]
        lhs += float(tree.expect(np.einsum("ni,ni->n", y, np.broadcast_to(lg[j], y.shape))))
        nxt = pair.P[j + 1]
        lfj = lf[j] if lf[j].shape[0] == 1 else tree.lift(lf[j])
        first += float(tree.expect(np.einsum("ni,ni->n", np.broadcast_to(lfj, nxt.shape), nxt)))
        zg = tree.tau * space.mass_apply(pair.Z[j]) + lg[j]
        zg = np.broadcast_to(zg, y.shape)
        prod = tree.lift(np.einsum("ni,ni->n", y, zg)) * tree.increments(j)
        second += float(tree.expect(prod))
    rhs = first - second
    scale = max(abs(lhs), abs(first), abs(second), np.finfo(float).tiny)
    return {"lhs": lhs, "rhs": rhs, "noise_term": second, "residual": abs(lhs - rhs) / scale}


def vi_check(space: FemSpace, tree: BinomialTree, U: ControlField, params: CostParams,
             n_directions: int = 200, seed: int = 0) -> float:
    """Minimum over sampled feasible V of ``sum_j tau E <m_j + nu U_j, V_j - U_j>``."""
    if U.bounds is None:
        raise ControlError("variational inequality needs a bounded control")
    prob = ControlProblem(space, tree, params, U.bounds, U.mode)
    ev = prob.evaluate(U)
    return min(vi_values(prob, ev, n_directions, seed))


def vi_values(prob: ControlProblem, ev: Evaluation, n_directions: int, seed: int = 0) -> list[float]:
    space, tree, bounds = prob.space, prob.tree, prob.bounds
    rng = np.random.default_rng(seed)
    base = prob.gradient_pairing(ev, ev.U)
    n_el = space.mesh.n_elems
    out = []

    def p0(fill):
        vals = AdaptedField(tree, n_el, tree.J)
        for j in range(tree.J):
            vals[j] = fill(j)
        return ControlField("P0", vals, bounds)

    # bang-bang candidates minimise the linear functional over each family
    grad = [element_average(space, ev.m[j]) + prob.params.nu * _element_mean(space, ev.U, j)
            for j in range(tree.J)]
    candidates = [p0(lambda j: np.where(grad[j] > 0, bounds.lower, bounds.upper))]
    if prob.mode == "clampedP1":
        scale = 1e6 * (bounds.upper - bounds.lower)
        phi = AdaptedField(tree, space.dim, tree.J)
        for j in range(tree.J):
            phi[j] = -scale * (ev.m[j] + prob.params.nu * _nodal(space, ev.U, j))
        candidates.append(ControlField("clampedP1", phi, bounds))
    for _ in range(max(n_directions - len(candidates), 0)):
        if prob.mode == "clampedP1" and rng.random() < 0.5:
            phi = AdaptedField(tree, space.dim, tree.J)
            phi.data[...] = rng.uniform(2 * bounds.lower - bounds.upper, 2 * bounds.upper - bounds.lower,
                                        phi.data.shape)
            candidates.append(ControlField("clampedP1", phi, bounds))
        else:
            sz = lambda j: (tree.level_size(j), n_el)
            candidates.append(p0(lambda j: rng.uniform(bounds.lower, bounds.upper, sz(j))))
    for V in candidates[:max(n_directions, 1)]:
        out.append(prob.gradient_pairing(ev, V) - base)
    return out


def _element_mean(space: FemSpace, U: ControlField, j: int) -> np.ndarray:
    if U.mode == "P0":
        return U.values[j]
    return _integrate_chunked(space.h, U.pieces(j)) / space.h


def _nodal(space: FemSpace, U: ControlField, j: int) -> np.ndarray:
    v = U.values[j]
    if U.mode == "P0":
        full = np.pad(v, [(0, 0), (1, 1)], mode="edge")
        return 0.5 * (full[:, 1:-2] + full[:, 2:-1])
    return v if U.bounds is None else U.bounds.clip(v)


# -- optimizer ------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    mode: str = "clampedP1"
    step: float | None = None
    theta: float = 1.0
    tol: float = 1e-8
    max_iter: int = 500
    backtracking: bool = True
    power_iters: int = 10
    slack: float = 1e-12
    min_step: float = 1e-10


@dataclass
class OptimizeResult:
    U: ControlField
    costs: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    n_iter: int = 0
    reason: str = ""
    step: float | None = None
    evaluation: Evaluation | None = None

    @property
    def converged(self) -> bool:
        return self.reason == "converged"


def optimize(space: FemSpace, tree: BinomialTree, params: CostParams, bounds: BoxBounds,
             config: OptimizerConfig | None = None, U0: ControlField | None = None) -> OptimizeResult:
    """Projected gradient (P0) or damped fixed point ``Phi <- (1-theta) Phi - theta m/nu`` (clampedP1)."""
    cfg = config or OptimizerConfig()
    prob = ControlProblem(space, tree, params, bounds, cfg.mode)
    nu = params.nu
    if U0 is None:
        U0 = project_box(space, AdaptedField(tree, space.dim, tree.J), bounds, cfg.mode)
    step = cfg.step
    if cfg.mode == "P0":
        if step is None:
            step = 1.0 / (nu + prob.estimate_lipschitz(cfg.power_iters))
        res_step = step
    else:
        step = cfg.theta
        if not 0 < step <= 1:
            raise ControlError(f"damping must lie in (0, 1], got {step}")
        res_step = None
    ev = prob.evaluate(U0)
    result = OptimizeResult(U0, [ev.cost], [], 0, "", step, ev)
    for it in range(cfg.max_iter + 1):
        r = prob.residual(ev, res_step)
        result.residuals.append(r)
        log.debug("iter %d cost %.12e residual %.3e", it, ev.cost, r)
        if r <= cfg.tol:
            result.reason = "converged"
            break
        if it == cfg.max_iter:
            result.reason = "max_iter"
            break
        while True:
            if cfg.mode == "P0":
                U_new = prob.fixed_point_image(ev, step)
            else:
                target = prob.fixed_point_image(ev)
                U_new = ControlField("clampedP1", ev.U.values * (1.0 - step) + target.values * step, bounds)
            ev_new = prob.evaluate(U_new)
            if not np.isfinite(ev_new.cost):
                result.reason = "diverged"
                raise DivergenceError(f"non-finite cost at iteration {it}", result)
            if ev_new.cost <= ev.cost + cfg.slack * max(1.0, abs(ev.cost)):
                break
            if not cfg.backtracking:
                result.reason = "diverged"
                raise DivergenceError(f"cost increased at iteration {it}: "
                                      f"{ev.cost:.6e} -> {ev_new.cost:.6e}", result)
            step *= 0.5
            if step < cfg.min_step:
                result.reason = "stalled"
                break
        if result.reason == "stalled":
            break
        ev = ev_new
        result.U, result.evaluation, result.step = ev.U, ev, step
        result.costs.append(ev.cost)
        result.n_iter = it + 1
    return result
