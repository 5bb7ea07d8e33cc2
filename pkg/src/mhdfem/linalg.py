"""Sparse storage, block saddle-point systems, and a deterministic LU solve.

Assembly produces triplet streams whose arrival order must not influence the
result, so duplicates are summed in fully sorted order (row, column, value);
the finalized matrix is bitwise independent of how contributions were
interleaved.  Solves go through SuperLU with equilibration and one step of
iterative refinement, which keeps row-wise residuals small enough that the
structural invariants downstream (exact divergence constraints) survive the
linear algebra.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.io import mmwrite
from scipy.sparse.linalg import splu

SparseMatrix = sp.csr_matrix


class AssemblyError(Exception):
    """Triplet stream inconsistent with the target shape."""


class SingularSystemError(Exception):
    """Factorization hit a zero or untrustworthy pivot.

    pivot_index is the elimination step at which the factorization broke
    down; unknown_index is the corresponding column of the original system
    when the solver could map it back, else -1.
    """

    def __init__(self, message: str, pivot_index: int = -1, unknown_index: int = -1):
        super().__init__(message)
        self.pivot_index = pivot_index
        self.unknown_index = unknown_index


def finalize_assembly(rows, cols, vals, shape) -> SparseMatrix:
    """Sum duplicate triplets and return CSR, independent of arrival order.

    Triplets are sorted by (row, col, value) before summation, so even the
    floating-point rounding of duplicate accumulation cannot depend on the
    order in which contributions were generated.
    """
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    vals = np.asarray(vals, dtype=np.float64).ravel()
    if not (rows.size == cols.size == vals.size):
        raise AssemblyError("triplet arrays must have equal length")
    nr, nc = int(shape[0]), int(shape[1])
    if rows.size == 0:
        return sp.csr_matrix((nr, nc))
    if rows.min() < 0 or rows.max() >= nr or cols.min() < 0 or cols.max() >= nc:
        raise AssemblyError(f"triplet index outside shape {(nr, nc)}")

    order = np.lexsort((vals, cols, rows))
    r, c, v = rows[order], cols[order], vals[order]
    first = np.ones(r.size, dtype=bool)
    first[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
    starts = np.flatnonzero(first)
    data = np.add.reduceat(v, starts)
    indices = c[starts]
    indptr = np.zeros(nr + 1, dtype=np.int64)
    np.add.at(indptr, r[starts] + 1, 1)
    np.cumsum(indptr, out=indptr)
    return sp.csr_matrix((data, indices, indptr), shape=(nr, nc))


@dataclass
class BlockSystem:
    """Square block system over a fixed ordered list of unknown segments.

    Blocks are registered by (row space, col space) name and merged into one
    global matrix by finalize_assembly, so registration order does not
    affect the result.
    """

    spaces: list[tuple[str, int]]
    _blocks: list = field(default_factory=list)
    _rhs: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [n for n, _ in self.spaces]
        if len(set(names)) != len(names):
            raise AssemblyError("duplicate space name in block system")
        self.offsets = {}
        off = 0
        for name, dim in self.spaces:
            if dim < 0:
                raise AssemblyError(f"negative dimension for space {name!r}")
            self.offsets[name] = off
            off += dim
        self.size = off
        self._dims = dict(self.spaces)

    def add_block(self, row: str, col: str, mat) -> None:
        if row not in self._dims or col not in self._dims:
            raise AssemblyError(f"unknown space in block ({row!r}, {col!r})")
        mat = sp.csr_matrix(mat)
        want = (self._dims[row], self._dims[col])
        if mat.shape != want:
            raise AssemblyError(
                f"block ({row!r}, {col!r}) has shape {mat.shape}, expected {want}")
        self._blocks.append((row, col, mat))

    def set_rhs(self, name: str, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if name not in self._dims:
            raise AssemblyError(f"unknown space {name!r}")
        if vec.size != self._dims[name]:
            raise AssemblyError(
                f"rhs for {name!r} has length {vec.size}, expected {self._dims[name]}")
        self._rhs[name] = vec

    def assemble(self) -> tuple[SparseMatrix, np.ndarray]:
        rows, cols, vals = [], [], []
        for rname, cname, mat in self._blocks:
            coo = mat.tocoo()
            rows.append(coo.row.astype(np.int64) + self.offsets[rname])
            cols.append(coo.col.astype(np.int64) + self.offsets[cname])
            vals.append(coo.data)
        if rows:
            a = finalize_assembly(np.concatenate(rows), np.concatenate(cols),
                                  np.concatenate(vals), (self.size, self.size))
        else:
            a = sp.csr_matrix((self.size, self.size))
        b = np.zeros(self.size)
        for name, vec in self._rhs.items():
            off = self.offsets[name]
            b[off:off + vec.size] = vec
        return a, b

    def split(self, x: np.ndarray) -> dict[str, np.ndarray]:
        x = np.asarray(x).ravel()
        if x.size != self.size:
            raise AssemblyError(f"vector length {x.size}, system size {self.size}")
        return {name: x[self.offsets[name]:self.offsets[name] + dim]
                for name, dim in self.spaces}


_RESIDUAL_REL = 1e-10


def _worst_pivot(a_csc) -> tuple[int, int]:
    # regularized refactorization localizes the breakdown step; the shift must
    # survive rounding against the matrix scale but stays far below any pivot
    # a healthy system would produce
    scale = np.abs(a_csc.data).max() if a_csc.nnz else 1.0
    shifted = (a_csc + (1e-12 * scale) * sp.identity(a_csc.shape[0], format="csc")).tocsc()
    try:
        lu = splu(shifted)
    except RuntimeError:
        return -1, -1
    d = np.abs(lu.U.diagonal())
    step = int(np.argmin(d))
    return step, int(lu.perm_c[step])


def solve_direct(A, b) -> np.ndarray:
    """Solve Ax = b by sparse LU with threshold partial pivoting.

    Factors, always applies one step of iterative refinement, and verifies
    ||Ax-b|| <= 1e-10 (||A||_F ||x|| + ||b||), refining further if needed.
    A zero pivot or a residual that refinement cannot repair raises
    SingularSystemError.
    """
    a_csr = sp.csr_matrix(A)
    n, m = a_csr.shape
    if n != m:
        raise AssemblyError(f"matrix must be square, got {a_csr.shape}")
    b = np.asarray(b, dtype=np.float64).ravel()
    if b.size != n:
        raise AssemblyError(f"rhs length {b.size} does not match matrix size {n}")
    if n == 0:
        return np.zeros(0)

    a_csc = a_csr.tocsc()
    try:
        lu = splu(a_csc)
    except RuntimeError as exc:
        step, unknown = _worst_pivot(a_csc)
        raise SingularSystemError(
            f"sparse LU failed ({exc}); breakdown at elimination step {step}, "
            f"unknown {unknown}", pivot_index=step, unknown_index=unknown) from exc

    # a zero pivot makes the triangular solves emit garbage (and BLAS
    # error chatter); reject before attempting one
    d = np.abs(lu.U.diagonal())
    if d.min() == 0.0:
        step = int(np.argmin(d))
        raise SingularSystemError(
            f"exact zero pivot at elimination step {step}, "
            f"unknown {int(lu.perm_c[step])}",
            pivot_index=step, unknown_index=int(lu.perm_c[step]))

    x = lu.solve(b)
    fro = np.sqrt(np.dot(a_csr.data, a_csr.data))
    bnorm = np.linalg.norm(b)
    # always refine once: constraint rows of saddle systems need the
    # backward error pushed to the roundoff of a residual evaluation, a
    # couple of digits below what one triangular solve delivers
    x = x + lu.solve(b - a_csr @ x)
    for _ in range(2):
        res = b - a_csr @ x
        if np.linalg.norm(res) <= _RESIDUAL_REL * (fro * np.linalg.norm(x) + bnorm):
            return x
        x = x + lu.solve(res)

    res = np.linalg.norm(b - a_csr @ x)
    if res <= _RESIDUAL_REL * (fro * np.linalg.norm(x) + bnorm):
        return x
    d = np.abs(lu.U.diagonal())
    step = int(np.argmin(d))
    raise SingularSystemError(
        f"residual {res:.3e} exceeds tolerance after refinement; smallest pivot "
        f"{d[step]:.3e} at elimination step {step}, unknown {int(lu.perm_c[step])}",
        pivot_index=step, unknown_index=int(lu.perm_c[step]))


def export_matrix(A, path) -> None:
    """Write A in MatrixMarket coordinate format."""
    mmwrite(str(path), sp.coo_matrix(A))
