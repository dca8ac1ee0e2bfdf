"""Linear-algebra kernels, initialization, Adam and a finite-difference checker.

Dense matrices are plain 2-D numpy arrays. Sparse adjacencies use
:class:`SparseMatrix`, a validated CSR triple that converts to
``scipy.sparse.csr_matrix`` for the actual products.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp

from .errors import NumericalError, ShapeError

__all__ = [
    "SparseMatrix",
    "AdamState",
    "GradCheckReport",
    "matmul",
    "spmm",
    "spmm_value_grad",
    "scatter_rows",
    "xavier_init",
    "adam_step",
    "finite_difference_check",
    "make_rng",
]


def make_rng(seed: int, *keys: str | int) -> np.random.Generator:
    """Counter-based generator for one named subsystem.

    Streams for different ``keys`` are independent, so the order in which
    subsystems draw does not matter.
    """
    spawn = tuple(k if isinstance(k, int) else zlib.crc32(k.encode("utf-8")) for k in keys)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn)
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SparseMatrix:
    """CSR matrix with sorted, unique column indices and nonnegative values."""

    shape: tuple[int, int]
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "indptr", np.asarray(self.indptr, dtype=np.int64))
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))
        object.__setattr__(self, "data", np.asarray(self.data))
        if self.validate:
            self.check()

    def check(self) -> None:
        rows, cols = self.shape
        ptr, idx, val = self.indptr, self.indices, self.data
        if ptr.shape != (rows + 1,) or ptr[0] != 0 or ptr[-1] != idx.size:
            raise ShapeError(f"row-pointer array inconsistent with shape {self.shape} / nnz {idx.size}")
        if np.any(np.diff(ptr) < 0):
            raise ShapeError("row-pointer array must be nondecreasing")
        if idx.size != val.size:
            raise ShapeError("column-index and value arrays differ in length")
        if idx.size:
            if idx.min() < 0 or idx.max() >= cols:
                raise ShapeError(f"column index out of range for {cols} columns")
            # strictly increasing within each row: a non-increasing step is only
            # allowed where a new row starts
            steps = np.diff(idx) <= 0
            row_starts = np.zeros(idx.size - 1, dtype=bool)
            starts = ptr[1:-1]
            starts = starts[(starts > 0) & (starts < idx.size)]
            row_starts[starts - 1] = True
            if np.any(steps & ~row_starts):
                raise ShapeError("column indices must be strictly increasing within each row")
        if not np.all(np.isfinite(val)):
            raise NumericalError("sparse values must be finite")
        if np.any(val < 0):
            raise NumericalError("sparse values must be nonnegative")

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry."""
        return np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.indptr)

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)

    def toarray(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.data.dtype if self.data.size else np.float64)
        out[self.row_ids(), self.indices] = self.data
        return out

    def with_data(self, data: np.ndarray) -> "SparseMatrix":
        """Same sparsity pattern, new values."""
        return SparseMatrix(self.shape, self.indptr, self.indices, data)

    @classmethod
    def from_coo(cls, rows, cols, values, shape) -> "SparseMatrix":
        """Build from triplets; duplicates are summed in a fixed order."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        n_rows, n_cols = shape
        keys = rows * n_cols + cols
        uniq, inverse = np.unique(keys, return_inverse=True)
        data = np.zeros(uniq.size, dtype=values.dtype)
        np.add.at(data, inverse, values)
        r = uniq // n_cols if n_cols else uniq
        c = uniq % n_cols if n_cols else uniq
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(r, minlength=n_rows), out=indptr[1:])
        return cls((n_rows, n_cols), indptr, c, data)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseMatrix":
        dense = np.asarray(dense)
        r, c = np.nonzero(dense)
        return cls.from_coo(r, c, dense[r, c], dense.shape)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls((n, n), np.arange(n + 1), np.arange(n), np.ones(n))

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix.from_coo(self.indices, self.row_ids(), self.data, self.shape[::-1])


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def spmm(a: SparseMatrix, h: np.ndarray) -> np.ndarray:
    """Sparse-dense product ``a @ h``; rows are summed sequentially in index order."""
    h = np.asarray(h)
    if h.ndim != 2 or a.shape[1] != h.shape[0]:
        raise ShapeError(f"cannot multiply sparse {a.shape} by {h.shape}")
    if a.nnz == 0:
        return np.zeros((a.shape[0], h.shape[1]), dtype=np.result_type(a.data, h))
    return np.asarray(a.to_scipy() @ h)


def spmm_value_grad(a: SparseMatrix, h: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(grad_out * (a @ h))`` w.r.t. each stored value of ``a``."""
    return np.einsum("ij,ij->i", grad_out[a.row_ids()], h[a.indices])


def scatter_rows(index: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """``out[index[b]] += values[b]`` for every b, as one sparse product."""
    index = np.asarray(index, dtype=np.int64)
    sel = sp.csr_matrix((np.ones(index.size), (index, np.arange(index.size))), shape=(n_rows, index.size))
    return np.asarray(sel @ values).astype(values.dtype, copy=False)


def xavier_init(rows: int, cols: int, rng_seed: int | np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Glorot-uniform matrix with bound sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"xavier_init needs positive dimensions, got ({rows}, {cols})")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else make_rng(rng_seed, "xavier")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)


@dataclass
class AdamState:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            self.lr, self.weight_decay, self.beta1, self.beta2, self.eps, self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; L2 is added to the gradient first.

    Returns new parameter arrays and a new state; the inputs are not modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    new = state.copy()
    new.step += 1
    t = new.step
    c1 = 1.0 - new.beta1 ** t
    c2 = 1.0 - new.beta2 ** t
    out = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = theta
            continue
        if g.shape != theta.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name!r}")
        g = g.astype(theta.dtype, copy=False)
        if new.weight_decay:
            g = g + new.weight_decay * theta
        m = new.m.get(name)
        v = new.v.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = new.beta1 * m + (1.0 - new.beta1) * g
        v = new.beta2 * v + (1.0 - new.beta2) * g * g
        new.m[name] = m
        new.v[name] = v
        out[name] = theta - new.lr * (m / c1) / (np.sqrt(v / c2) + new.eps)
    return out, new


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def finite_difference_check(
    loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    perturbation: float = 1e-5,
    tolerance: float = 1e-4,
    names: list[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients to central differences, entry by entry.

    ``loss_fn(params)`` must return ``(loss, grads)``. The relative error
    of each entry is ``|a - n| / max(|a|, |n|, 1e-8)``; the report holds the
    maximum per parameter.
    """
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    loss0, analytic = loss_fn(params)
    loss0_again, _ = loss_fn(params)
    if loss0 != loss0_again:
        raise ValueError("loss_fn is not deterministic: two evaluations at the same point differ")
    errors = {}
    for name in names or list(params):
        theta = params[name]
        a = np.asarray(analytic[name], dtype=np.float64)
        numeric = np.zeros_like(theta)
        flat = theta.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + perturbation
            f_plus = loss_fn(params)[0]
            flat[idx] = orig - perturbation
            f_minus = loss_fn(params)[0]
            flat[idx] = orig
            numeric.reshape(-1)[idx] = (f_plus - f_minus) / (2.0 * perturbation)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        errors[name] = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
    return GradCheckReport(errors, tolerance)
