"""Piecewise-linear finite elements on an interval with homogeneous Dirichlet
boundary conditions.

All coefficient vectors refer to the interior nodes only; the two boundary
values are implicitly zero. Arrays of vectors carry the dof axis last, so a
stack of shape ``(n_nodes, N_h)`` can be pushed through every operation at once.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Callable

import numpy as np
from scipy import linalg, sparse

GAUSS_ORDER = 4
SUPPORTED_BETAS = (-1, 0, 1, 2)


class FemError(ValueError):
    pass


@lru_cache(maxsize=None)
def gauss_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped to [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True)
class Mesh1D:
    a: float
    b: float
    n_elems: int

    def __post_init__(self):
        if not self.a < self.b:
            raise FemError(f"empty interval ({self.a}, {self.b})")
        if int(self.n_elems) != self.n_elems or self.n_elems < 2:
            raise FemError(f"need at least 2 elements for an interior dof, got {self.n_elems}")

    @property
    def h(self) -> float:
        return (self.b - self.a) / self.n_elems

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.a, self.b, self.n_elems + 1)

    @property
    def interior(self) -> np.ndarray:
        return self.nodes[1:-1]

    @property
    def n_dofs(self) -> int:
        return self.n_elems - 1


@dataclass(frozen=True)
class SpectralData:
    """Eigenpairs of the pencil ``A q = lam M q`` with M-orthonormal vectors
    stored column-wise in ``vectors``."""

    values: np.ndarray
    vectors: np.ndarray


@dataclass(frozen=True, eq=False)
class FemSpace:
    mesh: Mesh1D
    quad_order: int = GAUSS_ORDER
    _factors: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.quad_order < 2:
            raise FemError(f"quadrature order must be >= 2, got {self.quad_order}")

    # -- assembly -----------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.mesh.n_dofs

    @property
    def h(self) -> float:
        return self.mesh.h

    @property
    def mass_bands(self) -> tuple[float, float]:
        """(diagonal, off-diagonal) of the mass matrix."""
        h = self.h
        return 2.0 * h / 3.0, h / 6.0

    @property
    def stiffness_bands(self) -> tuple[float, float]:
        h = self.h
        return 2.0 / h, -1.0 / h

    @cached_property
    def M(self) -> sparse.csr_matrix:
        d, o = self.mass_bands
        return _tridiag(self.dim, d, o)

    @cached_property
    def A(self) -> sparse.csr_matrix:
        d, o = self.stiffness_bands
        return _tridiag(self.dim, d, o)

    def mass_apply(self, v: np.ndarray) -> np.ndarray:
        d, o = self.mass_bands
        return _band_apply(v, d, o)

    def stiffness_apply(self, v: np.ndarray) -> np.ndarray:
        d, o = self.stiffness_bands
        return _band_apply(v, d, o)

    def shifted_apply(self, tau: float, v: np.ndarray) -> np.ndarray:
        """``(M + tau A) v``."""
        return self.mass_apply(v) + tau * self.stiffness_apply(v)

    # -- inner products -----------------------------------------------------

    def inner(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """L2 inner product of coefficient stacks along the last axis."""
        return np.einsum("...i,...i->...", u, self.mass_apply(v))

    def norm(self, v: np.ndarray) -> np.ndarray:
        return np.sqrt(np.maximum(self.inner(v, v), 0.0))

    def h1_seminorm(self, v: np.ndarray) -> np.ndarray:
        return np.sqrt(np.maximum(np.einsum("...i,...i->...", v, self.stiffness_apply(v)), 0.0))

    # -- loads and projection ---------------------------------------------

    def load_vector(self, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """``l_i = int f phi_i`` by Gauss-Legendre quadrature on every element.

        ``f`` is evaluated on an array of points; it may return extra leading
        axes (e.g. one per time sample), which are kept.
        """
        xi, w = gauss_rule(self.quad_order)
        x0 = self.mesh.nodes[:-1]
        h = self.h
        pts = x0[:, None] + h * xi[None, :]
        vals = np.asarray(f(pts), dtype=float)
        vals = np.broadcast_to(vals, vals.shape[:-2] + pts.shape)
        # element e feeds global nodes e and e + 1; interior dof k is node k + 1
        left = h * np.einsum("...eq,q->...e", vals, w * (1.0 - xi))
        right = h * np.einsum("...eq,q->...e", vals, w * xi)
        return left[..., 1:] + right[..., :-1]

    def l2_project(self, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        return self.mass_solve(self.load_vector(f))

    def interpolate(self, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        return np.asarray(f(self.mesh.interior), dtype=float)

    # -- solves ---------------------------------------------------------------

    def _factor(self, tau: float) -> np.ndarray:
        fac = self._factors.get(tau)
        if fac is None:
            md, mo = self.mass_bands
            ad, ao = self.stiffness_bands
            ab = np.empty((2, self.dim))
            ab[0, 0] = 0.0
            ab[0, 1:] = mo + tau * ao
            ab[1, :] = md + tau * ad
            fac = linalg.cholesky_banded(ab, lower=False)
            self._factors[tau] = fac
        return fac

    def solve_shifted(self, tau: float, rhs: np.ndarray, check: bool = True) -> np.ndarray:
        """Solve ``(M + tau A) c = rhs`` for a stack of load vectors."""
        if tau < 0:
            raise FemError(f"tau must be non-negative, got {tau}")
        rhs = np.asarray(rhs, dtype=float)
        shape = rhs.shape
        if shape[-1] != self.dim:
            raise FemError(f"rhs has {shape[-1]} dofs, space has {self.dim}")
        flat = rhs.reshape(-1, self.dim).T
        sol = linalg.cho_solve_banded((self._factor(float(tau)), False), flat,
                                      check_finite=False)
        sol = sol.T.reshape(shape)
        if check:
            res = np.max(np.abs(self.shifted_apply(tau, sol) - rhs), initial=0.0)
            scale = np.max(np.abs(rhs), initial=0.0)
            if res > 1e-12 * max(scale, np.finfo(float).tiny):
                warnings.warn(f"shifted solve residual {res:.3e} exceeds 1e-12 * |rhs|",
                              RuntimeWarning, stacklevel=2)
        return sol

    def mass_solve(self, rhs: np.ndarray) -> np.ndarray:
        return self.solve_shifted(0.0, rhs)

    # -- spectral tools -----------------------------------------------------

    @cached_property
    def spectral(self) -> SpectralData:
        lam, q = linalg.eigh(self.A.toarray(), self.M.toarray())
        return SpectralData(values=lam, vectors=q)

    def modal_coefficients(self, v: np.ndarray) -> np.ndarray:
        """M-inner products of ``v`` with each eigenvector."""
        return self.mass_apply(v) @ self.spectral.vectors

    def norm_beta(self, v: np.ndarray, beta: int) -> np.ndarray:
        """Discrete fractional norm ``|(-Delta_h)^{beta/2} v|_{L2}``."""
        if beta not in SUPPORTED_BETAS:
            raise FemError(f"beta must be one of {SUPPORTED_BETAS}, got {beta}")
        c = self.modal_coefficients(v)
        lam = self.spectral.values
        return np.sqrt(np.sum(lam ** beta * c * c, axis=-1))

    def semigroup_apply(self, t: float, v: np.ndarray) -> np.ndarray:
        """``exp(t Delta_h) v``."""
        if t < 0:
            raise FemError(f"semigroup time must be non-negative, got {t}")
        c = self.modal_coefficients(v)
        return (np.exp(-self.spectral.values * t) * c) @ self.spectral.vectors.T

    def with_nodes(self, v: np.ndarray) -> np.ndarray:
        """Pad coefficient stacks with the zero boundary values."""
        pad = [(0, 0)] * (v.ndim - 1) + [(1, 1)]
        return np.pad(v, pad)


def build_space(a: float, b: float, n_elems: int, quad_order: int = GAUSS_ORDER) -> FemSpace:
    return FemSpace(Mesh1D(float(a), float(b), int(n_elems)), quad_order=quad_order)


def prolong(coarse: FemSpace, fine: FemSpace, v: np.ndarray) -> np.ndarray:
    """Exact nodal values of a coarse P1 function on a nested finer mesh."""
    cm, fm = coarse.mesh, fine.mesh
    if (cm.a, cm.b) != (fm.a, fm.b) or fm.n_elems % cm.n_elems:
        raise FemError(f"meshes with {cm.n_elems} and {fm.n_elems} elements are not nested")
    r = fm.n_elems // cm.n_elems
    full = coarse.with_nodes(np.asarray(v, dtype=float))
    # fine node i sits at coarse element i // r, local coordinate (i % r) / r
    idx = np.arange(1, fm.n_elems)
    e, s = np.divmod(idx, r)
    t = s / r
    e_next = np.minimum(e + 1, cm.n_elems)
    return full[..., e] * (1.0 - t) + full[..., e_next] * t


def _tridiag(n: int, d: float, o: float) -> sparse.csr_matrix:
    return sparse.diags([np.full(n - 1, o), np.full(n, d), np.full(n - 1, o)],
                        [-1, 0, 1], format="csr")


def _band_apply(v: np.ndarray, d: float, o: float) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = d * v
    out[..., :-1] += o * v[..., 1:]
    out[..., 1:] += o * v[..., :-1]
    return out
