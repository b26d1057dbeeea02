"""Backward solvers for the adjoint pair.

On the tree the sweep for ``j = J-1, ..., 0`` is

    Z_j = E_j[P_{j+1} dW_j] / tau
    (M + tau A) P_j = M (E_j[P_{j+1}] + c tau Z_j) + l_j

with ``c = 0`` for the plain backward equation and ``c = 1`` for the adjoint
operator, where Z also enters the drift. On a binary tree every level-(j+1)
variable splits exactly as ``E_j X + Z dW_j``, so the pair satisfies its
defining relation node by node. With ``2**k``-way branching the same formula is
the L2 projection onto ``dW_j``; it is still what makes the discrete gradient
exact.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .fem import FemSpace
from .noise import AdaptedField, BinomialTree, NoiseError, PathEnsemble, TimeGrid
from .sources import ClosedFormSource, interval_loads


@dataclass
class BackwardPair:
    P: AdaptedField
    Z: AdaptedField


def _check_drift(drift) -> int:
    if drift not in (0, 1):
        raise NoiseError(f"drift flag must be 0 or 1, got {drift!r}")
    return int(drift)


def solve_backward_tree(space: FemSpace, tree: BinomialTree, src, drift: int = 1) -> BackwardPair:
    c = _check_drift(drift)
    loads = interval_loads(space, tree, src)
    tau = tree.tau
    P = AdaptedField(tree, space.dim)
    Z = AdaptedField(tree, space.dim, tree.J)
    for j in range(tree.J - 1, -1, -1):
        nxt = P[j + 1]
        dW = tree.increments(j)[:, None]
        # loads are level-j measurable, so they drop out of the martingale part
        Z[j] = tree.cond_expect(nxt * dW) / tau
        rhs = space.mass_apply(tree.cond_expect(nxt) + c * tau * Z[j]) + loads[j]
        P[j] = space.solve_shifted(tau, rhs)
    return BackwardPair(P, Z)


def backward_residuals(space: FemSpace, tree: BinomialTree, pair: BackwardPair, src,
                       drift: int = 1) -> np.ndarray:
    """Max relative residual, per step, of

        M (P_j - P_{j+1}) + tau A P_j - l_j - c tau M Z_j + M Z_j dW_j = 0

    evaluated at every child node.
    """
    c = _check_drift(drift)
    loads = interval_loads(space, tree, src)
    tau = tree.tau
    out = np.empty(tree.J)
    P, Z = pair.P, pair.Z
    for j in range(tree.J):
        dW = tree.increments(j)[:, None]
        Pj, Zj = tree.lift(P[j]), tree.lift(Z[j])
        load = loads[j] if loads[j].shape[0] == 1 else tree.lift(loads[j])
        terms = [space.mass_apply(Pj - P[j + 1]), tau * space.stiffness_apply(Pj),
                 -np.broadcast_to(load, Pj.shape), -c * tau * space.mass_apply(Zj),
                 space.mass_apply(Zj * dW)]
        scale = max(max(np.max(np.abs(t)) for t in terms), np.finfo(float).tiny)
        out[j] = np.max(np.abs(sum(terms))) / scale
    return out


def martingale_split_residuals(space: FemSpace, tree: BinomialTree, pair: BackwardPair, src,
                               drift: int = 1) -> np.ndarray:
    """Per step, max of ``|Z_j dW_j - (I - E_j)(P_{j+1} + M^{-1} l_j + c tau Z_j)|``
    relative to the size of ``P_{j+1}``."""
    c = _check_drift(drift)
    loads = interval_loads(space, tree, src)
    out = np.empty(tree.J)
    for j in range(tree.J):
        dW = tree.increments(j)[:, None]
        extra = space.mass_solve(loads[j]) + c * tree.tau * pair.Z[j]
        X = pair.P[j + 1] + (extra if extra.shape[0] == 1 else tree.lift(extra))
        fluct = X - tree.lift(tree.cond_expect(X))
        scale = max(np.max(np.abs(pair.P[j + 1])), np.finfo(float).tiny)
        out[j] = np.max(np.abs(tree.lift(pair.Z[j]) * dW - fluct)) / scale
    return out


# -- deterministic pair -------------------------------------------------------

def deterministic_backward_pair(space: FemSpace, grid: TimeGrid, src: ClosedFormSource,
                                n_sub: int = 8, sub_order: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Exact-in-time reference ``eta(t_j)`` and its backward Euler counterpart ``P_j``.

    ``eta(t) = int_t^T exp((s - t) Delta_h) Q_h g(s) ds`` is evaluated mode by mode
    with composite Gauss quadrature (``n_sub`` pieces per step); ``P`` follows
    ``(M + tau A) P_j = M P_{j+1} + l_j`` with ``P_J = 0``. Both are returned with
    shape ``(J + 1, N_h)``.
    """
    if n_sub < 8:
        raise NoiseError(f"reference quadrature needs at least 8 pieces per step, got {n_sub}")
    tau, J = grid.tau, grid.J
    loads = src.loads(space, grid)
    P = np.zeros((J + 1, space.dim))
    for j in range(J - 1, -1, -1):
        P[j] = space.solve_shifted(tau, space.mass_apply(P[j + 1]) + loads[j])

    spec = space.spectral
    lam = spec.values
    xi, w = np.polynomial.legendre.leggauss(sub_order)
    xi, w = 0.5 * (xi + 1.0), 0.5 * w
    # local offsets (s - t_j) of all quadrature points inside one step
    offs = ((np.arange(n_sub)[:, None] + xi[None, :]) * (tau / n_sub)).ravel()
    wts = np.tile(w, n_sub) * (tau / n_sub)
    t = grid.times[:-1, None] + offs[None, :]
    loads_t = space.load_vector(lambda x: src.func(t[:, :, None, None], x[None, None]))
    ghat = loads_t @ spec.vectors  # <Q_h g(s), q_k>_M = q_k . l(s)
    kernel = np.exp(-np.outer(offs, lam)) * wts[:, None]
    step = np.einsum("jqk,qk->jk", ghat, kernel)
    decay = np.exp(-lam * tau)
    eta_hat = np.zeros((J + 1, space.dim))
    for j in range(J - 1, -1, -1):
        eta_hat[j] = decay * eta_hat[j + 1] + step[j]
    return eta_hat @ spec.vectors.T, P


# -- regression backend -----------------------------------------------------

class RegressionWarning(RuntimeWarning):
    pass


@dataclass
class RegressionResult:
    P: np.ndarray
    Z: np.ndarray
    diagnostics: list = field(default_factory=list)
    p0_stderr: np.ndarray | None = None


def _features(space: FemSpace, state: np.ndarray | None, n_paths: int, degree: int,
              n_coords: int) -> tuple[np.ndarray, list[int]]:
    if state is None or degree == 0:
        return np.ones((n_paths, 1)), []
    coords = space.modal_coefficients(state)[:, :n_coords]
    mu, sd = coords.mean(axis=0), coords.std(axis=0)
    keep = sd > 1e-12 * (1.0 + np.abs(mu))
    dropped = [int(k) for k in np.flatnonzero(~keep)]
    z = (coords[:, keep] - mu[keep]) / sd[keep]
    cols = [np.ones(n_paths)]
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(z.shape[1]), d):
            cols.append(np.prod(z[:, combo], axis=1))
    return np.stack(cols, axis=1), dropped


def _fit(basis: np.ndarray, target: np.ndarray, step: int, diag: dict) -> np.ndarray:
    coef, _, rank, sv = np.linalg.lstsq(basis, target, rcond=None)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    diag["cond"] = max(diag.get("cond", 0.0), cond)
    diag["rank"] = int(rank)
    if rank < basis.shape[1]:
        warnings.warn(f"step {step}: regression basis is rank deficient "
                      f"({rank} < {basis.shape[1]}, condition number {cond:.3e}); "
                      f"using the minimum-norm fit", RegressionWarning, stacklevel=3)
        diag["rank_deficient"] = True
    return basis @ coef


def regression_backward(space: FemSpace, ens: PathEnsemble, loads: np.ndarray, drift: int = 1,
                        degree: int = 2, n_coords: int = 2,
                        states: np.ndarray | None = None) -> RegressionResult:
    """Least-squares Monte Carlo version of the tree sweep.

    ``loads`` has shape ``(J, M or 1, N_h)``; ``states`` (``(J + 1, M, N_h)``) is the
    Markov state whose leading spectral coordinates feed a polynomial basis of
    total degree ``degree``. Level 0 always uses the constant basis.
    ``p0_stderr`` is the Monte Carlo standard error of ``P_0``, taken from a
    regression-free pathwise estimator of the same quantity.
    """
    c = _check_drift(drift)
    J, M, tau = ens.grid.J, ens.n_paths, ens.tau
    loads = np.asarray(loads, dtype=float)
    if loads.shape[0] != J or loads.shape[-1] != space.dim:
        raise NoiseError(f"loads shape {loads.shape} does not match J={J}, N_h={space.dim}")
    P = np.zeros((J + 1, M, space.dim))
    Z = np.zeros((J, M, space.dim))
    diagnostics = []
    # regression-free estimator: E_j[K^-1 M (1 + c dW_j) P_{j+1}] = P_j - K^-1 l_j,
    # so this per-path recursion has mean P_0 and gives an honest standard error
    pathwise = np.zeros((M, space.dim))
    for j in range(J - 1, -1, -1):
        state = None if (states is None or j == 0) else states[j]
        basis, dropped = _features(space, state, M, degree, n_coords)
        diag = {"step": j, "n_basis": basis.shape[1], "dropped_coords": dropped}
        X = P[j + 1]
        fitted = _fit(basis, X, j, diag)
        fluct = X - fitted
        diag["residual_rms"] = float(np.sqrt(np.mean(fluct ** 2)))
        Z[j] = _fit(basis, fluct * ens.increments[:, j, None] / tau, j, diag)
        rhs = space.mass_apply(fitted + c * tau * Z[j]) + loads[j]
        P[j] = space.solve_shifted(tau, rhs, check=False)
        pathwise = space.solve_shifted(
            tau, space.mass_apply(pathwise * (1.0 + c * ens.increments[:, j, None])) + loads[j], check=False)
        diagnostics.append(diag)
    diagnostics.reverse()
    p0_stderr = pathwise.std(axis=0, ddof=1) / np.sqrt(M) if M > 1 else np.full(space.dim, np.inf)
    return RegressionResult(P, Z, diagnostics, p0_stderr)
