"""Right-hand sides for the forward and backward solvers.

Every source knows how to produce the time-integrated load vectors
``l_j[i] = int_{t_j}^{t_{j+1}} int g phi_i`` for each interval ``j`` and each
node of tree level ``j``. A deterministic source returns a single row per
interval, which broadcasts against any number of nodes or paths.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .fem import FemSpace, gauss_rule
from .noise import AdaptedField, BinomialTree, NoiseError, TimeGrid

TIME_ORDER = 2


class ClosedFormSource:
    """Deterministic ``g(t, x)`` integrated in time by Gauss-Legendre per interval."""

    deterministic = True

    def __init__(self, func: Callable[[np.ndarray, np.ndarray], np.ndarray],
                 time_order: int = TIME_ORDER, name: str = ""):
        self.func = func
        self.time_order = time_order
        self.name = name

    def __repr__(self):
        return f"ClosedFormSource({self.name or self.func!r})"

    def _time_points(self, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
        xi, w = gauss_rule(self.time_order)
        t = grid.times[:-1, None] + grid.tau * xi[None, :]
        return t, grid.tau * w

    def loads(self, space: FemSpace, grid: TimeGrid) -> np.ndarray:
        """Load vectors of every interval, shape ``(J, N_h)``."""
        t, wt = self._time_points(grid)
        vals = space.load_vector(lambda x: self.func(t[:, :, None, None], x[None, None]))
        return np.einsum("jqi,q->ji", vals, wt)

    def interval_loads(self, space: FemSpace, tree: BinomialTree) -> list[np.ndarray]:
        return [row[None, :] for row in self.loads(space, tree.grid)]

    def sq_norms(self, space: FemSpace, grid: TimeGrid) -> np.ndarray:
        """``int_{t_j}^{t_{j+1}} |g|^2_{L2}`` for each interval (same quadrature rules)."""
        t, wt = self._time_points(grid)
        xi, w = gauss_rule(space.quad_order)
        x = space.mesh.nodes[:-1, None] + space.h * xi[None, :]
        vals = np.asarray(self.func(t[:, :, None, None], x[None, None]), dtype=float)
        vals = np.broadcast_to(vals, t.shape + x.shape)
        per_time = space.h * np.einsum("jqeg,g->jq", vals * vals, w)
        return per_time @ wt

    def values_at(self, space: FemSpace, t: float) -> np.ndarray:
        """``Q_h g(t)`` coefficients."""
        return space.l2_project(lambda x: self.func(np.asarray(t), x))


class FieldSource:
    """A V_h-valued adapted field, constant on each interval (level j used on [t_j, t_{j+1}))."""

    deterministic = False

    def __init__(self, field: AdaptedField):
        self.field = field

    def interval_loads(self, space: FemSpace, tree: BinomialTree) -> list[np.ndarray]:
        f = self.field
        if f.tree.J != tree.J or f.tree.branching != tree.branching:
            raise NoiseError("source field lives on a different tree")
        if f.dim != space.dim:
            raise NoiseError(f"source field has {f.dim} dofs, space has {space.dim}")
        if f.n_levels < tree.J:
            raise NoiseError(f"source field needs levels 0..{tree.J - 1}")
        tau = tree.tau
        return [tau * space.mass_apply(f[j]) for j in range(tree.J)]


class ModalSource:
    """``g = sum_k a_k(t_j, node) psi_k(x)`` with closed-form spatial profiles.

    The coefficients are an adapted field of dimension ``len(profiles)``, so the
    same random data can be loaded on any mesh.
    """

    deterministic = False

    def __init__(self, profiles: Sequence[Callable[[np.ndarray], np.ndarray]],
                 coeffs: AdaptedField):
        if coeffs.dim != len(profiles):
            raise NoiseError("one coefficient per profile is required")
        self.profiles = list(profiles)
        self.coeffs = coeffs

    def profile_loads(self, space: FemSpace) -> np.ndarray:
        return np.stack([space.load_vector(p) for p in self.profiles])

    def profile_gram(self, space: FemSpace) -> np.ndarray:
        xi, w = gauss_rule(space.quad_order)
        x = space.mesh.nodes[:-1, None] + space.h * xi[None, :]
        vals = np.stack([np.broadcast_to(p(x), x.shape) for p in self.profiles])
        return space.h * np.einsum("keq,leq,q->kl", vals, vals, w)

    def interval_loads(self, space: FemSpace, tree: BinomialTree) -> list[np.ndarray]:
        c = self.coeffs
        if c.tree.J != tree.J or c.tree.branching != tree.branching:
            raise NoiseError("source coefficients live on a different tree")
        psi = self.profile_loads(space)
        return [tree.tau * (c[j] @ psi) for j in range(tree.J)]

    def sq_norms(self, space: FemSpace, tree: BinomialTree) -> np.ndarray:
        """Expected ``int_{t_j}^{t_{j+1}} |g|^2`` per interval."""
        G = self.profile_gram(space)
        return np.array([tree.tau * tree.expect(np.einsum("nk,kl,nl->n", c, G, c))
                         for c in (self.coeffs[j] for j in range(tree.J))])


class LoadSequence:
    """Precomputed interval loads (one array per interval)."""

    def __init__(self, loads: Sequence[np.ndarray]):
        self.loads = [np.atleast_2d(np.asarray(l, dtype=float)) for l in loads]

    @property
    def deterministic(self) -> bool:
        return all(l.shape[0] == 1 for l in self.loads)

    def interval_loads(self, space: FemSpace, tree: BinomialTree) -> list[np.ndarray]:
        if len(self.loads) != tree.J:
            raise NoiseError(f"{len(self.loads)} interval loads for a grid with J={tree.J}")
        for l in self.loads:
            if l.shape[-1] != space.dim:
                raise NoiseError(f"load has {l.shape[-1]} dofs, space has {space.dim}")
        return self.loads


def interval_loads(space: FemSpace, tree: BinomialTree, src) -> list[np.ndarray]:
    """Loads of ``src`` for every interval; accepts any source or a list of arrays."""
    if src is None:
        return [np.zeros((1, space.dim)) for _ in range(tree.J)]
    if isinstance(src, (list, tuple)):
        src = LoadSequence(src)
    loads = src.interval_loads(space, tree)
    for j, l in enumerate(loads):
        if l.shape[0] not in (1, tree.level_size(j)):
            raise NoiseError(f"interval {j}: {l.shape[0]} load rows for {tree.level_size(j)} nodes")
    return loads


def brownian_modal_source(tree: BinomialTree, profiles, offset, slope) -> ModalSource:
    """``g = sum_k psi_k(x) (offset_k + slope_k W(t_j))`` -- the same random
    process on any tree, handy for comparing across refinements."""
    offset = np.asarray(offset, dtype=float)
    slope = np.asarray(slope, dtype=float)
    coeffs = AdaptedField(tree, len(profiles), tree.J)
    for j in range(tree.J):
        coeffs[j] = offset[None, :] + tree.brownian(j)[:, None] * slope[None, :]
    return ModalSource(profiles, coeffs)


def random_modal_source(tree: BinomialTree, profiles, rng: np.random.Generator) -> ModalSource:
    """Independent standard normal coefficients at every node."""
    coeffs = AdaptedField(tree, len(profiles), tree.J)
    coeffs.data[...] = rng.standard_normal(coeffs.data.shape)
    return ModalSource(profiles, coeffs)


def random_field_source(space: FemSpace, tree: BinomialTree, rng: np.random.Generator) -> FieldSource:
    field = AdaptedField(tree, space.dim, tree.J)
    field.data[...] = rng.standard_normal(field.data.shape)
    return FieldSource(field)


# Profiles and right-hand sides on the unit interval. Each entry takes (t, x).
CATALOG: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "zero": lambda t, x: np.zeros(np.broadcast(t, x).shape),
    "sine": lambda t, x: np.sin(np.pi * x) * (1.0 + 0.0 * t),
    "sine-cos-t": lambda t, x: np.sin(np.pi * x) * np.cos(np.pi * t),
    "poly": lambda t, x: 4.0 * x * (1.0 - x) * (1.0 + t),
    "mixed": lambda t, x: (np.sin(np.pi * x) + 2.0 * x * (1.0 - x) * np.cos(3.0 * x)) * (1.0 + t * t),
    "target": lambda t, x: 2.0 * np.sin(np.pi * x) * (1.0 + t) + np.sin(3.0 * np.pi * x),
}

PROFILES: list[Callable[[np.ndarray], np.ndarray]] = [
    lambda x: np.sin(np.pi * x),
    lambda x: 4.0 * x * (1.0 - x),
    lambda x: np.sin(2.0 * np.pi * x) * np.exp(x),
]


def catalog_source(name: str, time_order: int = TIME_ORDER) -> ClosedFormSource:
    try:
        func = CATALOG[name]
    except KeyError:
        raise NoiseError(f"unknown catalog entry {name!r}; known: {sorted(CATALOG)}") from None
    return ClosedFormSource(func, time_order=time_order, name=name)
