"""Discrete models of the driving Brownian motion.

Two backends are provided:

* :class:`BinomialTree` -- a non-recombining tree on which every conditional
  expectation is an exact finite average. Each grid step is made of
  ``substeps`` binary moves of size ``+-sqrt(tau / substeps)``, so a step
  branches ``2**substeps`` ways. ``substeps == 1`` is the plain binomial tree;
  larger values arise by coarsening a fine tree in time while keeping its
  filtration.
* :class:`PathEnsemble` -- seeded Monte Carlo paths with Gaussian (or
  Rademacher) increments.

Node ``n`` on level ``j`` has children ``n * B + b`` for ``b < B``; child
``b == 0`` is the all-up move.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

DEFAULT_MEMORY_BUDGET = 2 ** 31  # bytes


class NoiseError(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    T: float
    J: int

    def __post_init__(self):
        if not self.T > 0:
            raise NoiseError(f"T must be positive, got {self.T}")
        if int(self.J) != self.J or self.J < 1:
            raise NoiseError(f"J must be a positive integer, got {self.J}")

    @property
    def tau(self) -> float:
        return self.T / self.J

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.J + 1)

    def check_standing(self) -> None:
        """Experiments keep J > 2 and tau < 2/5."""
        if self.J <= 2 or not self.tau < 0.4:
            raise NoiseError(f"experiment grids need J > 2 and tau < 2/5 (J={self.J}, tau={self.tau})")


@dataclass(frozen=True, eq=False)
class BinomialTree:
    grid: TimeGrid
    substeps: int = 1

    @property
    def J(self) -> int:
        return self.grid.J

    @property
    def tau(self) -> float:
        return self.grid.tau

    @property
    def branching(self) -> int:
        return 2 ** self.substeps

    @cached_property
    def step_increments(self) -> np.ndarray:
        """Value of the step increment leading to child ``b``."""
        s = self.substeps
        bits = (np.arange(2 ** s)[:, None] >> np.arange(s - 1, -1, -1)[None, :]) & 1
        return np.sqrt(self.tau / s) * np.sum(1 - 2 * bits, axis=1).astype(float)

    def level_size(self, j: int) -> int:
        return self.branching ** j

    def weight(self, j: int) -> float:
        return 1.0 / self.level_size(j)

    def increments(self, j: int) -> np.ndarray:
        """``dW_j`` seen from each node of level ``j + 1``."""
        return np.tile(self.step_increments, self.level_size(j))

    def lift(self, values: np.ndarray) -> np.ndarray:
        """Copy level-j values onto every child at level j + 1."""
        return np.repeat(values, self.branching, axis=0)

    def cond_expect(self, values: np.ndarray) -> np.ndarray:
        """``E[X | F_{t_j}]`` for ``X`` given at the nodes of level j + 1."""
        values = np.asarray(values, dtype=float)
        n = values.shape[0]
        if n % self.branching or n < self.branching:
            raise NoiseError(f"{n} values do not form a tree level (branching {self.branching})")
        return values.reshape((n // self.branching, self.branching) + values.shape[1:]).mean(axis=1)

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Total expectation of values given on one level (equal weights)."""
        return np.asarray(values, dtype=float).mean(axis=0)

    def brownian(self, j: int) -> np.ndarray:
        """``W(t_j)`` at every node of level ``j``."""
        w = np.zeros(1)
        for i in range(j):
            w = self.lift(w) + self.increments(i)
        return w

    def level_of(self, n_values: int) -> int:
        j, size = 0, 1
        while size < n_values:
            size *= self.branching
            j += 1
        if size != n_values:
            raise NoiseError(f"{n_values} values do not form a tree level")
        return j

    def coarsen(self, k: int) -> "BinomialTree":
        """Same filtration, time steps ``k`` times longer."""
        if k < 1 or self.J % k:
            raise NoiseError(f"coarsening factor {k} does not divide J={self.J}")
        return BinomialTree(TimeGrid(self.grid.T, self.J // k), self.substeps * k)


def build_tree(T: float, J: int, n_dofs: int = 1,
               memory_budget: int = DEFAULT_MEMORY_BUDGET) -> BinomialTree:
    grid = TimeGrid(float(T), int(J))
    need = 2 ** (grid.J + 1) * int(n_dofs) * 8
    if need > memory_budget:
        raise NoiseError(f"tree with J={J} and {n_dofs} dofs needs {need} bytes per field, "
                         f"budget is {memory_budget}")
    return BinomialTree(grid)


class AdaptedField:
    """Per-level, per-node coefficient vectors stored level-major in one buffer."""

    def __init__(self, tree: BinomialTree, dim: int, n_levels: int | None = None,
                 data: np.ndarray | None = None):
        self.tree = tree
        self.dim = int(dim)
        self.n_levels = tree.J + 1 if n_levels is None else int(n_levels)
        if not 1 <= self.n_levels <= tree.J + 1:
            raise NoiseError(f"n_levels={self.n_levels} outside 1..{tree.J + 1}")
        sizes = [tree.level_size(j) for j in range(self.n_levels)]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)])
        total = int(self._offsets[-1])
        if data is None:
            data = np.zeros((total, self.dim))
        elif data.shape != (total, self.dim):
            raise NoiseError(f"buffer shape {data.shape} != {(total, self.dim)}")
        self.data = data

    @classmethod
    def deterministic(cls, tree: BinomialTree, vectors: np.ndarray) -> "AdaptedField":
        vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
        out = cls(tree, vectors.shape[1], vectors.shape[0])
        for j in range(out.n_levels):
            out[j] = vectors[j]
        return out

    @classmethod
    def from_levels(cls, tree: BinomialTree, levels: list[np.ndarray]) -> "AdaptedField":
        levels = [np.asarray(v, dtype=float) for v in levels]
        out = cls(tree, levels[0].shape[-1], len(levels))
        for j, v in enumerate(levels):
            out[j] = v
        return out

    def __getitem__(self, j: int) -> np.ndarray:
        if not 0 <= j < self.n_levels:
            raise IndexError(f"level {j} outside 0..{self.n_levels - 1}")
        return self.data[self._offsets[j]:self._offsets[j + 1]]

    def __setitem__(self, j: int, values) -> None:
        self[j][...] = values

    def levels(self):
        for j in range(self.n_levels):
            yield self[j]

    def is_deterministic_at(self, j: int) -> bool:
        v = self[j]
        return bool(np.all(v == v[:1]))

    def expectations(self) -> np.ndarray:
        """Mean vector of every level, shape ``(n_levels, dim)``."""
        return np.stack([self.tree.expect(v) for v in self.levels()])

    def copy(self) -> "AdaptedField":
        return AdaptedField(self.tree, self.dim, self.n_levels, self.data.copy())

    def _like(self, data: np.ndarray) -> "AdaptedField":
        return AdaptedField(self.tree, self.dim, self.n_levels, data)

    def _check(self, other: "AdaptedField") -> None:
        if other.tree is not self.tree or other.dim != self.dim or other.n_levels != self.n_levels:
            raise NoiseError("fields live on different trees or shapes")

    def __add__(self, other: "AdaptedField") -> "AdaptedField":
        self._check(other)
        return self._like(self.data + other.data)

    def __sub__(self, other: "AdaptedField") -> "AdaptedField":
        self._check(other)
        return self._like(self.data - other.data)

    def __mul__(self, alpha: float) -> "AdaptedField":
        return self._like(alpha * self.data)

    __rmul__ = __mul__

    def __neg__(self) -> "AdaptedField":
        return self._like(-self.data)


def tree_expectation(tree: BinomialTree, field: AdaptedField) -> np.ndarray:
    return field.expectations()


def cond_expect(tree: BinomialTree, values: np.ndarray, level: int | None = None) -> np.ndarray:
    """Conditional expectation of level-(j+1) values onto level j.

    ``level`` is the level of the *input*; it is checked when given.
    """
    values = np.asarray(values)
    if level is not None and values.shape[0] != tree.level_size(level):
        raise NoiseError(f"expected {tree.level_size(level)} values on level {level}, "
                         f"got {values.shape[0]}")
    return tree.cond_expect(values)


def ito_integral(tree: BinomialTree, integrand: AdaptedField) -> np.ndarray:
    """Leafwise ``sum_j f_j dW_j`` with ``f_j`` read on level j."""
    if integrand.n_levels < tree.J:
        raise NoiseError(f"integrand needs levels 0..{tree.J - 1}")
    acc = np.zeros((1, integrand.dim))
    for j in range(tree.J):
        acc = tree.lift(acc) + tree.lift(integrand[j]) * tree.increments(j)[:, None]
    return acc


# -- Monte Carlo paths --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathEnsemble:
    grid: TimeGrid
    increments: np.ndarray
    seed: int = 0
    law: str = "gaussian"

    def __post_init__(self):
        inc = self.increments
        if inc.ndim != 2 or inc.shape[1] != self.grid.J:
            raise NoiseError(f"increments must have shape (M, {self.grid.J}), got {inc.shape}")

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def tau(self) -> float:
        return self.grid.tau

    def brownian(self) -> np.ndarray:
        """Path values ``W(t_j)``, shape ``(M, J + 1)``."""
        w = np.zeros((self.n_paths, self.grid.J + 1))
        np.cumsum(self.increments, axis=1, out=w[:, 1:])
        return w


def sample_paths(T: float, J: int, n_paths: int, seed: int, law: str = "gaussian") -> PathEnsemble:
    grid = TimeGrid(float(T), int(J))
    rng = np.random.default_rng(seed)
    if law == "gaussian":
        inc = rng.standard_normal((n_paths, grid.J)) * np.sqrt(grid.tau)
    elif law == "two-point":
        inc = (1.0 - 2.0 * rng.integers(0, 2, size=(n_paths, grid.J))) * np.sqrt(grid.tau)
    else:
        raise NoiseError(f"unknown increment law {law!r}")
    return PathEnsemble(grid, inc, seed=int(seed), law=law)


def coarsen_paths(ens: PathEnsemble, k: int) -> PathEnsemble:
    """Same Brownian paths observed on a grid with steps ``k`` times longer."""
    J = ens.grid.J
    if k < 1 or J % k:
        raise NoiseError(f"coarsening factor {k} does not divide J={J}")
    inc = ens.increments.reshape(ens.n_paths, J // k, k).sum(axis=2)
    return PathEnsemble(TimeGrid(ens.grid.T, J // k), inc, seed=ens.seed, law=ens.law)
