"""Binary dumps of tree fields and path ensembles, CSV dumps of FE matrices.

Field file: 8-byte magic ``SPOCFLD1``, then little-endian u32 ``J`` (number of
stored levels minus one), u32 branching factor (nodes per level grow as
``branching**j``; 1 means one vector per level), u32 vector length, followed by
the level-major f64 payload.

Ensemble file: 32-byte header -- magic ``SPOCPTH1``, u32 ``J``, u32 ``M``,
u64 seed, f64 ``T`` -- then the ``M x J`` increments row by row.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .fem import FemSpace
from .noise import AdaptedField, BinomialTree, PathEnsemble, TimeGrid

FIELD_MAGIC = b"SPOCFLD1"
PATHS_MAGIC = b"SPOCPTH1"
_FIELD_HEAD = struct.Struct("<8sIII")
_PATHS_HEAD = struct.Struct("<8sIIQd")


class FormatError(ValueError):
    pass


def write_field(path, field: AdaptedField) -> None:
    head = _FIELD_HEAD.pack(FIELD_MAGIC, field.n_levels - 1, field.tree.branching, field.dim)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(field.data, dtype="<f8").tobytes())


def read_field(path, tree: BinomialTree | None = None):
    """Return an :class:`AdaptedField` when ``tree`` is given, else ``(header, levels)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _FIELD_HEAD.size:
        raise FormatError("file too short for a field header")
    magic, J, branching, dim = _FIELD_HEAD.unpack_from(raw)
    if magic != FIELD_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    payload = np.frombuffer(raw, dtype="<f8", offset=_FIELD_HEAD.size)
    sizes = [branching ** j for j in range(J + 1)]
    if payload.size != sum(sizes) * dim:
        raise FormatError(f"payload has {payload.size} values, header implies {sum(sizes) * dim}")
    data = payload.reshape(-1, dim).astype(float)
    if tree is not None:
        if tree.branching != branching or tree.J < J:
            raise FormatError("field does not fit the given tree")
        return AdaptedField(tree, dim, J + 1, data.copy())
    offs = np.concatenate([[0], np.cumsum(sizes)])
    levels = [data[offs[j]:offs[j + 1]] for j in range(J + 1)]
    return {"J": J, "branching": branching, "dim": dim}, levels


def write_ensemble(path, ens: PathEnsemble) -> None:
    head = _PATHS_HEAD.pack(PATHS_MAGIC, ens.grid.J, ens.n_paths, ens.seed & (2 ** 64 - 1), ens.grid.T)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(ens.increments, dtype="<f8").tobytes())


def read_ensemble(path) -> PathEnsemble:
    raw = Path(path).read_bytes()
    if len(raw) < _PATHS_HEAD.size:
        raise FormatError("file too short for an ensemble header")
    magic, J, M, seed, T = _PATHS_HEAD.unpack_from(raw)
    if magic != PATHS_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    inc = np.frombuffer(raw, dtype="<f8", offset=_PATHS_HEAD.size)
    if inc.size != J * M:
        raise FormatError(f"payload has {inc.size} values, header implies {J * M}")
    return PathEnsemble(TimeGrid(T, J), inc.reshape(M, J).astype(float), seed=int(seed), law="file")


def write_matrix_csv(path, matrix) -> None:
    coo = matrix.tocoo()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "value"])
        for r, c, v in zip(coo.row, coo.col, coo.data):
            w.writerow([int(r), int(c), repr(float(v))])


def export_matrices(space: FemSpace, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / f"mass_n{space.mesh.n_elems}.csv", out_dir / f"stiffness_n{space.mesh.n_elems}.csv"]
    write_matrix_csv(paths[0], space.M)
    write_matrix_csv(paths[1], space.A)
    return paths


DIAG_HEADER = ["step", "n_basis", "rank", "cond", "residual_rms", "rank_deficient", "dropped_coords"]


def write_diagnostics_csv(path, diagnostics: list[dict]) -> None:
    """One row per backward step of a regression sweep."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIAG_HEADER)
        for d in diagnostics:
            w.writerow([d["step"], d["n_basis"], d.get("rank", ""), repr(d.get("cond", float("nan"))),
                        repr(d.get("residual_rms", float("nan"))), int(d.get("rank_deficient", False)),
                        " ".join(map(str, d.get("dropped_coords", [])))])
