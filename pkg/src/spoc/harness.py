"""Convergence studies, identity checks and reproducible reports."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .backward import deterministic_backward_pair, solve_backward_tree
from .control import (BoxBounds, ControlField, ControlProblem, CostParams, OptimizerConfig,
                      duality_terms, l2_dist, optimize, vi_check)
from .fem import FemSpace, build_space, prolong
from .forward import iter_forward_paths, solve_forward_tree
from .io import export_matrices, write_field
from .noise import (DEFAULT_MEMORY_BUDGET, AdaptedField, BinomialTree, TimeGrid,
                    build_tree, coarsen_paths, sample_paths)
from .sources import (PROFILES, brownian_modal_source, catalog_source,
                      random_field_source, random_modal_source)

log = logging.getLogger(__name__)

KINDS = ("forward-rate-h", "forward-rate-tau", "backward-rate-h", "appendix-tau-rate",
         "duality-check", "gradient-check", "optimize", "control-refinement", "stability")


class StudyError(ValueError):
    pass


@dataclass
class StudyConfig:
    kind: str
    T: float = 1.0
    nu: float = 0.1
    lower: float = -1.0
    upper: float = 1.0
    target: str = "target"
    source: str = "mixed"
    J: int = 8
    n: int = 16
    J_ladder: list = field(default_factory=list)
    n_ladder: list = field(default_factory=list)
    J_ref: int = 0
    n_ref: int = 0
    seed: int = 20240611
    n_paths: int = 2000
    n_pairs: int = 20
    n_directions: int = 10
    fd_step: float = 1e-5
    drift: int = 1
    mode: str = "clampedP1"
    tol: float = 1e-8
    max_iter: int = 500
    quad_order: int = 4
    time_order: int = 2
    out_dir: str = "spoc-out"
    memory_budget: int = DEFAULT_MEMORY_BUDGET

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise StudyError(f"unknown study kind {self.kind!r}; expected one of {KINDS}")
        for name in ("J_ladder", "n_ladder"):
            ladder = getattr(self, name)
            if ladder and any(b != 2 * a for a, b in zip(ladder, ladder[1:])):
                raise StudyError(f"{name} must be geometric with factor 2, got {ladder}")
        if self.J_ladder and self.J_ref and self.J_ref <= max(self.J_ladder):
            raise StudyError("J_ref must be finer than every level of J_ladder")
        if self.n_ladder and self.n_ref and self.n_ref <= max(self.n_ladder):
            raise StudyError("n_ref must be finer than every level of n_ladder")
        if self.J_ladder and self.J_ref and any(self.J_ref % J for J in self.J_ladder):
            raise StudyError("J_ladder levels must divide J_ref")
        if self.n_ladder and self.n_ref and any(self.n_ref % n for n in self.n_ladder):
            raise StudyError("n_ladder levels must divide n_ref")

    def hash(self) -> str:
        payload = dataclasses.asdict(self)
        payload.pop("out_dir")
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


DEFAULTS = {
    "forward-rate-h": dict(J=8, n_ladder=[8, 16, 32], n_ref=128, source="mixed"),
    "forward-rate-tau": dict(n=64, J_ladder=[8, 16, 32, 64], J_ref=512, n_paths=2000, source="mixed"),
    "backward-rate-h": dict(J=8, n_ladder=[8, 16, 32], n_ref=128, source="random-modal"),
    "appendix-tau-rate": dict(n=64, J_ladder=[8, 16, 32, 64], source="sine-cos-t"),
    "duality-check": dict(J=6, n=16, n_pairs=20),
    "gradient-check": dict(J=4, n=8, n_directions=10, mode="P0"),
    "optimize": dict(J=4, n=8),
    "control-refinement": dict(J_ladder=[2, 4, 8], n_ladder=[8, 16, 32], J_ref=16, n_ref=64,
                               lower=-0.5, upper=0.5),
    "stability": dict(T=0.5, n=16, J_ladder=[4, 8, 16], source="brownian-modal"),
}


def make_config(kind: str, **overrides) -> StudyConfig:
    if kind not in DEFAULTS:
        raise StudyError(f"unknown study kind {kind!r}; expected one of {KINDS}")
    known = {f.name for f in dataclasses.fields(StudyConfig)}
    unknown = set(overrides) - known
    if unknown:
        raise StudyError(f"unknown config keys {sorted(unknown)}")
    cfg = StudyConfig(kind=kind, **{**DEFAULTS[kind], **overrides})
    cfg.validate()
    return cfg


def load_config(path, kind: str, **overrides) -> StudyConfig:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    data.pop("kind", None)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return make_config(kind, **data)


# -- rates and norms ------------------------------------------------------------

@dataclass
class RateReport:
    levels: list
    sizes: list
    errors: list
    stderrs: list
    slope: float
    residual: float


def estimate_rate(sizes, errors) -> tuple[float, float]:
    """Least-squares slope of log(error) against log(size) and the max deviation of the fit."""
    sizes = np.asarray(sizes, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if sizes.shape != errors.shape or sizes.size < 3:
        raise StudyError("need at least three (size, error) pairs")
    if np.any(sizes <= 0) or np.any(errors <= 0):
        raise StudyError("sizes and errors must be strictly positive")
    x, y = np.log(sizes), np.log(errors)
    slope, icpt = np.polyfit(x, y, 1)
    return float(slope), float(np.max(np.abs(y - (slope * x + icpt))))


def tree_error_norm(space: FemSpace, tree: BinomialTree, fine: AdaptedField, coarse: AdaptedField,
                    coarse_space: FemSpace | None = None, n_intervals: int | None = None) -> float:
    """``|fine - coarse|`` in L2(Omega; L2(0,T; L2)) for piecewise-constant-in-time fields.

    ``coarse`` may live on a nested coarser mesh (prolonged exactly) and on a
    time-coarsened copy of ``tree`` (its level ``i`` is held over the matching
    fine intervals).
    """
    coarse_space = coarse_space or space
    ctree = coarse.tree
    if tree.J % ctree.J or ctree.branching != tree.branching ** (tree.J // ctree.J):
        raise StudyError("coarse field is not on a time-coarsening of the fine tree")
    k = tree.J // ctree.J
    J = n_intervals or tree.J
    total = 0.0
    for j in range(J):
        i = j // k
        c = coarse[i]
        if coarse_space is not space:
            c = prolong(coarse_space, space, c)
        c = np.repeat(c, tree.branching ** (j - i * k), axis=0)
        d = fine[j] - c
        total += tree.tau * float(tree.expect(space.inner(d, d)))
    return float(np.sqrt(total))


def mc_error_norm(sq_errors: np.ndarray) -> tuple[float, float]:
    """Root of the sample mean of per-path squared errors, with a delta-method standard error."""
    sq = np.asarray(sq_errors, dtype=float)
    mean = float(sq.mean())
    if mean == 0.0:
        return 0.0, 0.0
    se_mean = float(sq.std(ddof=1) / np.sqrt(sq.size)) if sq.size > 1 else float("inf")
    return float(np.sqrt(mean)), se_mean / (2.0 * np.sqrt(mean))


def error_norm(space, tree, fine, coarse, coarse_space=None, mode="tree"):
    """Tree mode: exact expectation. MC mode: ``fine``/``coarse`` are per-path arrays
    ``(J, M, N_h)`` on one grid; returns ``(value, stderr)``."""
    if mode == "tree":
        return tree_error_norm(space, tree, fine, coarse, coarse_space), 0.0
    if mode == "mc":
        fine, coarse = np.asarray(fine), np.asarray(coarse)
        if fine.shape != coarse.shape:
            raise StudyError("MC comparison needs trajectories on the same grid and paths")
        d = fine[:-1] - coarse[:-1]
        return mc_error_norm(tree.tau * space.inner(d, d).sum(axis=0))
    raise StudyError(f"unknown error mode {mode!r}")


# -- studies --------------------------------------------------------------------

def _space(cfg, n):
    return build_space(0.0, 1.0, n, quad_order=cfg.quad_order)


def _tree(cfg, J, n_dofs):
    return build_tree(cfg.T, J, n_dofs, cfg.memory_budget)


def _check_grid(cfg, J):
    TimeGrid(cfg.T, J).check_standing()


def _source(cfg, tree, rng):
    if cfg.source == "random-modal":
        return random_modal_source(tree, PROFILES, rng)
    if cfg.source == "brownian-modal":
        return brownian_modal_source(tree, PROFILES, *_brownian_coeffs(cfg))
    return catalog_source(cfg.source, cfg.time_order)


def _brownian_coeffs(cfg):
    rng = np.random.default_rng(cfg.seed)
    return rng.standard_normal(len(PROFILES)), rng.standard_normal(len(PROFILES))


def _h_study(cfg, solve) -> tuple[RateReport, list]:
    _check_grid(cfg, cfg.J)
    ref_space = _space(cfg, cfg.n_ref)
    tree = _tree(cfg, cfg.J, ref_space.dim)
    src = _source(cfg, tree, np.random.default_rng(cfg.seed))
    ref = solve(ref_space, tree, src)
    rows, errs = [], []
    for lvl, n in enumerate(cfg.n_ladder):
        sp = _space(cfg, n)
        e = tree_error_norm(ref_space, tree, ref, solve(sp, tree, src), sp)
        rows.append(dict(level=lvl, J=cfg.J, n_elems=n, error=e, stderr=0.0))
        errs.append(e)
    sizes = [1.0 / n for n in cfg.n_ladder]
    slope, resid = estimate_rate(sizes, errs)
    return RateReport(cfg.n_ladder, sizes, errs, [0.0] * len(errs), slope, resid), rows


def forward_rate_h(cfg: StudyConfig):
    return _h_study(cfg, solve_forward_tree)


def backward_rate_h(cfg: StudyConfig):
    return _h_study(cfg, lambda sp, tree, src: solve_backward_tree(sp, tree, src, cfg.drift).P)


def forward_rate_tau(cfg: StudyConfig):
    """Strong error against a fine reference on common Brownian paths."""
    space = _space(cfg, cfg.n)
    for J in cfg.J_ladder:
        _check_grid(cfg, J)
    src = catalog_source(cfg.source, cfg.time_order)
    fine = sample_paths(cfg.T, cfg.J_ref, cfg.n_paths, cfg.seed)
    factors = [cfg.J_ref // J for J in cfg.J_ladder]
    coarse_iters = [iter_forward_paths(space, coarsen_paths(fine, k), src) for k in factors]
    current = [None] * len(factors)
    sq = np.zeros((len(factors), cfg.n_paths))
    for i, Y_ref in enumerate(iter_forward_paths(space, fine, src)):
        if i == cfg.J_ref:
            break
        for c, k in enumerate(factors):
            if i % k == 0:
                current[c] = next(coarse_iters[c])
            d = current[c] - Y_ref
            sq[c] += fine.tau * space.inner(d, d)
    rows, errs, ses = [], [], []
    for lvl, (J, s) in enumerate(zip(cfg.J_ladder, sq)):
        e, se = mc_error_norm(s)
        rows.append(dict(level=lvl, J=J, n_elems=cfg.n, error=e, stderr=se))
        errs.append(e)
        ses.append(float(se))
    sizes = [cfg.T / J for J in cfg.J_ladder]
    slope, resid = estimate_rate(sizes, errs)
    return RateReport(cfg.J_ladder, sizes, errs, ses, slope, resid), rows


def appendix_tau_rate(cfg: StudyConfig):
    space = _space(cfg, cfg.n)
    src = catalog_source(cfg.source, cfg.time_order)
    rows, errs = [], []
    for lvl, J in enumerate(cfg.J_ladder):
        _check_grid(cfg, J)
        eta, P = deterministic_backward_pair(space, TimeGrid(cfg.T, J), src)
        e = float(np.max(space.norm_beta(eta - P, -1)))
        rows.append(dict(level=lvl, J=J, n_elems=cfg.n, error=e, stderr=0.0))
        errs.append(e)
    sizes = [cfg.T / J for J in cfg.J_ladder]
    slope, resid = estimate_rate(sizes, errs)
    return RateReport(cfg.J_ladder, sizes, errs, [0.0] * len(errs), slope, resid), rows


def duality_check(cfg: StudyConfig):
    _check_grid(cfg, cfg.J)
    space = _space(cfg, cfg.n)
    tree = _tree(cfg, cfg.J, space.dim)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for p in range(cfg.n_pairs):
        f = random_field_source(space, tree, rng)
        g = random_field_source(space, tree, rng)
        d = duality_terms(space, tree, f, g)
        rows.append(dict(pair=p, J=cfg.J, n_elems=cfg.n, lhs=d["lhs"], rhs=d["rhs"],
                         noise_term=d["noise_term"], residual=d["residual"]))
    return {"max_residual": max(r["residual"] for r in rows)}, rows


def _problem(cfg, space, tree, mode=None):
    bounds = BoxBounds(cfg.lower, cfg.upper)
    params = CostParams(cfg.nu, catalog_source(cfg.target, cfg.time_order))
    return ControlProblem(space, tree, params, bounds, mode or cfg.mode)


def _random_control(space, tree, mode, rng, bounds=None):
    dim = space.mesh.n_elems if mode == "P0" else space.dim
    vals = AdaptedField(tree, dim, tree.J)
    vals.data[...] = rng.standard_normal(vals.data.shape)
    return ControlField(mode, vals, bounds)


def gradient_check(cfg: StudyConfig):
    """Adjoint gradient against central differences and against forward-mode derivatives.

    Controls and directions are unconstrained (P0 or plain P1), where the cost is an
    exact quadratic.
    """
    _check_grid(cfg, cfg.J)
    space = _space(cfg, cfg.n)
    tree = _tree(cfg, cfg.J, space.dim)
    prob = _problem(cfg, space, tree)
    rng = np.random.default_rng(cfg.seed)
    mode = cfg.mode
    U = _random_control(space, tree, mode, rng)
    ev = prob.evaluate(U)
    rows = []
    for d in range(cfg.n_directions):
        V = _random_control(space, tree, mode, rng)
        adj = prob.gradient_pairing(ev, V)
        tan = prob.tangent_derivative(ev, V)
        s = cfg.fd_step
        Up = U.with_values(U.values + V.values * s)
        Um = U.with_values(U.values - V.values * s)
        fd = (prob.cost(Up) - prob.cost(Um)) / (2 * s)
        rows.append(dict(direction=d, adjoint=adj, tangent=tan, finite_difference=fd,
                         fd_rel_error=abs(fd - adj) / max(abs(adj), 1e-300),
                         tangent_rel_error=abs(tan - adj) / max(abs(adj), 1e-300)))
    a0 = prob.a0_diagnostic(ev, _random_control(space, tree, mode, rng))
    summary = {"max_fd_rel_error": max(r["fd_rel_error"] for r in rows),
               "max_tangent_rel_error": max(r["tangent_rel_error"] for r in rows),
               "a0": a0}
    return summary, rows


def optimize_study(cfg: StudyConfig):
    _check_grid(cfg, cfg.J)
    space = _space(cfg, cfg.n)
    tree = _tree(cfg, cfg.J, space.dim)
    prob = _problem(cfg, space, tree)
    res = optimize(space, tree, prob.params, prob.bounds,
                   OptimizerConfig(mode=cfg.mode, tol=cfg.tol, max_iter=cfg.max_iter))
    vi = vi_check(space, tree, res.U, prob.params, 200, seed=cfg.seed)
    summary = {"reason": res.reason, "n_iter": res.n_iter, "final_cost": res.costs[-1],
               "final_residual": res.residuals[-1], "vi_min": vi, "step": res.step,
               "cost_history": res.costs, "residual_history": res.residuals}
    rows = [dict(iteration=i, cost=c, residual=r) for i, (c, r) in enumerate(zip(res.costs, res.residuals))]
    return summary, rows, res


def control_refinement(cfg: StudyConfig, solutions: dict | None = None):
    """Self-convergence of the discrete optimum on one fine tree.

    Coarse problems use the same filtration with aggregated increments; their
    controls are measurable at the coarse times. Errors are taken against the
    finest discrete solution.
    """
    fine_space = _space(cfg, cfg.n_ref)
    fine_tree = _tree(cfg, cfg.J_ref, fine_space.dim)
    _check_grid(cfg, cfg.J_ref)
    ocfg = OptimizerConfig(mode=cfg.mode, tol=cfg.tol, max_iter=cfg.max_iter)

    def solve(space, tree):
        prob = _problem(cfg, space, tree)
        t0 = time.perf_counter()
        res = optimize(space, tree, prob.params, prob.bounds, ocfg)
        log.info("solved J=%d n=%d: %s after %d iterations (%.1fs)", tree.J, space.mesh.n_elems,
                 res.reason, res.n_iter, time.perf_counter() - t0)
        return res

    fine = solve(fine_space, fine_tree)
    rows = []
    for lvl, (J, n) in enumerate(zip(cfg.J_ladder, cfg.n_ladder)):
        space = _space(cfg, n)
        tree = fine_tree.coarsen(cfg.J_ref // J)
        res = solve(space, tree)
        if solutions is not None:
            solutions[(J, n)] = res
        U_err = l2_dist(fine_space, fine_tree, fine.U, _lift_control(res.U, space, fine_space, fine_tree))
        Y_err = tree_error_norm(fine_space, fine_tree, fine.evaluation.Y, res.evaluation.Y, space)
        rows.append(dict(level=lvl, J=J, n_elems=n, error=U_err, stderr=0.0, state_error=Y_err,
                         reason=res.reason, n_iter=res.n_iter))
    if solutions is not None:
        solutions[(cfg.J_ref, cfg.n_ref)] = fine
    u = [r["error"] for r in rows]
    y = [r["state_error"] for r in rows]
    summary = {"control_errors": u, "state_errors": y,
               "control_ratios": [a / b for a, b in zip(u, u[1:])],
               "state_ratios": [a / b for a, b in zip(y, y[1:])],
               "fine_reason": fine.reason}
    return summary, rows


def _lift_control(U: ControlField, space: FemSpace, fine_space: FemSpace, fine_tree: BinomialTree) -> ControlField:
    """Represent a coarse control on the fine mesh and tree without changing it."""
    ctree = U.tree
    k = fine_tree.J // ctree.J
    r = fine_space.mesh.n_elems // space.mesh.n_elems
    dim = fine_space.mesh.n_elems if U.mode == "P0" else fine_space.dim
    vals = AdaptedField(fine_tree, dim, fine_tree.J)
    for j in range(fine_tree.J):
        i = j // k
        v = U.values[i]
        v = np.repeat(v, r, axis=1) if U.mode == "P0" else prolong(space, fine_space, v)
        vals[j] = np.repeat(v, fine_tree.branching ** (j - i * k), axis=0)
    return ControlField(U.mode, vals, U.bounds)


def stability(cfg: StudyConfig):
    """Stability ratios of the forward and adjoint operators on one random process
    observed on trees of increasing depth."""
    space = _space(cfg, cfg.n)
    rows = []
    for lvl, J in enumerate(cfg.J_ladder):
        _check_grid(cfg, J)
        tree = _tree(cfg, J, space.dim)
        src = _source(cfg, tree, np.random.default_rng(cfg.seed))
        loads = src.interval_loads(space, tree)
        qg = [space.mass_solve(l) / tree.tau for l in loads]
        g_m1 = np.sqrt(sum(tree.tau * float(tree.expect(space.norm_beta(q, -1) ** 2)) for q in qg))
        g_0 = np.sqrt(float(np.sum(src.sq_norms(space, tree))))
        Y = solve_forward_tree(space, tree, src)
        y_max = max(np.sqrt(float(tree.expect(space.inner(Y[j], Y[j])))) for j in range(J + 1))
        pair = solve_backward_tree(space, tree, src, drift=1)
        P, Z = pair.P, pair.Z
        p_max = max(np.sqrt(float(tree.expect(space.inner(P[j], P[j])))) for j in range(J + 1))
        p_h1 = np.sqrt(sum(tree.tau * float(tree.expect(space.h1_seminorm(P[j]) ** 2)) for j in range(J)))
        z_l2 = np.sqrt(sum(tree.tau * float(tree.expect(space.inner(Z[j], Z[j]))) for j in range(J)))
        rows.append(dict(level=lvl, J=J, n_elems=cfg.n, S0_ratio=y_max / g_m1,
                         S1_ratio=(p_max + p_h1) / (g_m1 + tree.tau * g_0), S2_ratio=z_l2 / g_0))
    summary = {name: [r[name] for r in rows] for name in ("S0_ratio", "S1_ratio", "S2_ratio")}
    summary["growth"] = {name: v[-1] / v[0] for name, v in summary.items()}
    return summary, rows


# -- driver --------------------------------------------------------------------

RATE_HEADER = ["level", "J", "n_elems", "error", "stderr"]


def _write_csv(path: Path, rows: list, header: list | None = None) -> None:
    header = header or list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if dataclasses.is_dataclass(obj):
        return _jsonable(dataclasses.asdict(obj))
    return obj


def run_study(cfg: StudyConfig, export: bool = False) -> dict:
    """Run one study, write ``<kind>.csv`` and ``<kind>.json`` into ``cfg.out_dir``."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    extra = {}
    if cfg.kind in ("forward-rate-h", "forward-rate-tau", "backward-rate-h", "appendix-tau-rate"):
        fn = {"forward-rate-h": forward_rate_h, "forward-rate-tau": forward_rate_tau,
              "backward-rate-h": backward_rate_h, "appendix-tau-rate": appendix_tau_rate}[cfg.kind]
        report, rows = fn(cfg)
        _write_csv(out / f"{cfg.kind}.csv", rows, RATE_HEADER)
        result = {"rate": dataclasses.asdict(report)}
    elif cfg.kind == "optimize":
        summary, rows, res = optimize_study(cfg)
        _write_csv(out / f"{cfg.kind}.csv", rows)
        write_field(out / "control.bin", res.U.values)
        write_field(out / "state.bin", res.evaluation.Y)
        result = summary
    else:
        fn = {"duality-check": duality_check, "gradient-check": gradient_check,
              "control-refinement": control_refinement, "stability": stability}[cfg.kind]
        result, rows = fn(cfg)
        header = RATE_HEADER + ["state_error"] if cfg.kind == "control-refinement" else None
        _write_csv(out / f"{cfg.kind}.csv", rows, header)
    if export:
        n = max([cfg.n, cfg.n_ref] + list(cfg.n_ladder))
        extra["matrices"] = [str(p) for p in export_matrices(_space(cfg, n), out)]
    summary = {
        "kind": cfg.kind,
        "config": dataclasses.asdict(cfg),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "versions": {"spoc": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "result": _jsonable(result),
        **extra,
        "metadata": {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                     "elapsed_s": time.perf_counter() - t0},
    }
    with open(out / f"{cfg.kind}.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=False)
    return summary
