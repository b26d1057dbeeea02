"""Backward-Euler / finite-element scheme for the state equation

    dy = (Delta y + g) dt + y dW,   y(0) = 0,

advanced as ``(M + tau A) Y_{j+1} = M (1 + dW_j) Y_j + l_j``. The noise term is
explicit, only the Laplacian is implicit.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .fem import FemSpace
from .noise import AdaptedField, BinomialTree, NoiseError, PathEnsemble
from .sources import LoadSequence, interval_loads


def solve_forward_tree(space: FemSpace, tree: BinomialTree, src) -> AdaptedField:
    """State on every node of the tree, levels 0..J."""
    loads = interval_loads(space, tree, src)
    Y = AdaptedField(tree, space.dim)
    tau = tree.tau
    for j in range(tree.J):
        parent = Y[j]
        dW = tree.increments(j)[:, None]
        rhs = space.mass_apply(tree.lift(parent) * (1.0 + dW))
        rhs += _lift_load(tree, loads[j])
        Y[j + 1] = space.solve_shifted(tau, rhs)
    return Y


def forward_residuals(space: FemSpace, tree: BinomialTree, Y: AdaptedField, src) -> np.ndarray:
    """Max relative residual of the recursion on each step."""
    loads = interval_loads(space, tree, src)
    out = np.empty(tree.J)
    for j in range(tree.J):
        dW = tree.increments(j)[:, None]
        rhs = space.mass_apply(tree.lift(Y[j]) * (1.0 + dW)) + _lift_load(tree, loads[j])
        lhs = space.shifted_apply(tree.tau, Y[j + 1])
        scale = max(np.max(np.abs(rhs)), np.max(np.abs(lhs)), np.finfo(float).tiny)
        out[j] = np.max(np.abs(lhs - rhs)) / scale
    return out


def iter_forward_paths(space: FemSpace, ens: PathEnsemble, src) -> Iterator[np.ndarray]:
    """Yield ``Y_j`` for every path, shape ``(M, N_h)``, for j = 0..J.

    Only deterministic sources are accepted; each path then sees an adapted
    right-hand side trivially.
    """
    if not getattr(src, "deterministic", src is None):
        raise NoiseError("path backend needs a deterministic source")
    if not np.all(np.isfinite(ens.increments)):
        raise NoiseError("path ensemble contains non-finite increments")
    tau = ens.tau
    loads = _path_loads(space, ens, src)
    Y = np.zeros((ens.n_paths, space.dim))
    yield Y
    for j in range(ens.grid.J):
        rhs = space.mass_apply(Y * (1.0 + ens.increments[:, j, None])) + loads[j]
        Y = space.solve_shifted(tau, rhs, check=False)
        yield Y


def solve_forward_paths(space: FemSpace, ens: PathEnsemble, src) -> np.ndarray:
    """Trajectories of every path, shape ``(J + 1, M, N_h)``."""
    return np.stack(list(iter_forward_paths(space, ens, src)))


def _path_loads(space, ens, src) -> np.ndarray:
    if src is None:
        return np.zeros((ens.grid.J, space.dim))
    if isinstance(src, LoadSequence):
        return np.concatenate(src.loads)
    return np.asarray(src.loads(space, ens.grid))


def _lift_load(tree: BinomialTree, load: np.ndarray) -> np.ndarray:
    return load if load.shape[0] == 1 else tree.lift(load)
