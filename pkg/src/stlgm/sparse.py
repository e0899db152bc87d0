"""Sparse symmetric matrices and Cholesky-based linear algebra.

Every precision matrix in the model (random-walk penalties, AR(1) blocks,
finite-element matrices, Kronecker interactions, posterior precisions) lives
here as a :class:`SparseSymMatrix`.  Factorization delegates the numerics to
SuperLU in symmetric mode with a minimum-degree fill-reducing ordering;
selected inversion (the Takahashi recurrence) and Kronecker products are
implemented natively.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg.lapack import dpotri


class NotPositiveDefinite(RuntimeError):
    """Factorization failed after the jitter ladder was exhausted."""


class DimensionMismatch(ValueError):
    """Operand shapes are inconsistent."""


class SparseSymMatrix:
    """Symmetric matrix stored as a lower-triangle coordinate list.

    The matrix is assembled incrementally with :meth:`add` (either triangle
    may be given; entries are mirrored into the lower triangle) and then
    frozen with :meth:`finalize`, which sums duplicates and builds the
    compressed-column form used by the factorization routines.  Finalized
    matrices are immutable.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.dim = int(dim)
        self._rows: list = []
        self._cols: list = []
        self._vals: list = []
        self._csc = None

    # -- build phase ------------------------------------------------------

    def add(self, i: int, j: int, value: float) -> None:
        """Accumulate ``value`` at (i, j); (j, i) is implied by symmetry."""
        if self._csc is not None:
            raise RuntimeError("matrix is finalized")
        if not (0 <= i < self.dim and 0 <= j < self.dim):
            raise IndexError(f"entry ({i},{j}) out of range for dim {self.dim}")
        if i < j:
            i, j = j, i
        self._rows.append(i)
        self._cols.append(j)
        self._vals.append(value)

    def add_batch(self, rows, cols, vals) -> None:
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if self._csc is not None:
            raise RuntimeError("matrix is finalized")
        if rows.min(initial=0) < 0 or rows.max(initial=0) >= self.dim \
                or cols.min(initial=0) < 0 or cols.max(initial=0) >= self.dim:
            raise IndexError("batch entries out of range")
        lo = np.minimum(rows, cols)
        hi = np.maximum(rows, cols)
        self._rows.extend(hi.tolist())
        self._cols.extend(lo.tolist())
        self._vals.extend(vals.tolist())

    def finalize(self) -> "SparseSymMatrix":
        """Sum duplicate coordinates and freeze the matrix."""
        if self._csc is None:
            lower = sp.coo_matrix(
                (self._vals, (self._rows, self._cols)),
                shape=(self.dim, self.dim),
            ).tocsc()
            lower.sum_duplicates()
            strict = sp.tril(lower, k=-1)
            full = (lower + strict.T).tocsc()
            full.sort_indices()
            self._csc = full
            self._rows = self._cols = self._vals = None
        return self

    # -- finalized access --------------------------------------------------

    @property
    def csc(self) -> sp.csc_matrix:
        """Full symmetric matrix in compressed-column form."""
        if self._csc is None:
            raise RuntimeError("matrix is not finalized")
        return self._csc

    @property
    def finalized(self) -> bool:
        return self._csc is not None

    def lower_triples(self):
        """Canonically sorted (row, col, value) triples of the lower triangle."""
        low = sp.tril(self.csc).tocoo()
        order = np.lexsort((low.row, low.col))
        return low.row[order], low.col[order], low.data[order]

    def diagonal(self) -> np.ndarray:
        return self.csc.diagonal()

    def to_dense(self) -> np.ndarray:
        return self.csc.toarray()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.dim:
            raise DimensionMismatch(f"vector length {x.shape[0]} != dim {self.dim}")
        return self.csc @ x

    def dump(self, path) -> None:
        """Write the lower-triangle triples, one ``row col value`` per line."""
        r, c, v = self.lower_triples()
        with open(path, "w", encoding="utf-8") as fh:
            for i, j, x in zip(r, c, v):
                fh.write("%d %d %.17g\n" % (i, j, x))

    # -- constructors -------------------------------------------------------

    @classmethod
    def identity(cls, dim: int) -> "SparseSymMatrix":
        m = cls(dim)
        m.add_batch(np.arange(dim), np.arange(dim), np.ones(dim))
        return m.finalize()

    @classmethod
    def from_diag(cls, d) -> "SparseSymMatrix":
        d = np.asarray(d, dtype=np.float64)
        m = cls(d.size)
        m.add_batch(np.arange(d.size), np.arange(d.size), d)
        return m.finalize()

    @classmethod
    def from_dense(cls, a) -> "SparseSymMatrix":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch("expected a square array")
        if not np.allclose(a, a.T, atol=1e-12):
            raise ValueError("input array is not symmetric")
        low = np.tril(a)
        i, j = np.nonzero(low)
        m = cls(a.shape[0])
        m.add_batch(i, j, low[i, j])
        return m.finalize()

    @classmethod
    def from_csc(cls, a: sp.spmatrix) -> "SparseSymMatrix":
        a = sp.csc_matrix(a)
        if a.shape[0] != a.shape[1]:
            raise DimensionMismatch("expected a square matrix")
        low = sp.tril(a).tocoo()
        m = cls(a.shape[0])
        if low.nnz:
            m.add_batch(low.row, low.col, low.data)
        return m.finalize()


class CholeskyFactor:
    """Result of :func:`cholesky`: permutation, lower factor, and solver state.

    Satisfies ``Q[p_i, p_j] == (L @ L.T)[i, j]`` where ``p`` is
    :attr:`permutation` and ``L`` the sparse lower-triangular factor.  The
    factor matrix is materialized lazily; solves and log-determinants go
    straight to the SuperLU object.
    """

    def __init__(self, permutation, splu_obj, jitter_used):
        self.permutation = permutation
        self.dim = len(permutation)
        self.jitter_used = float(jitter_used)
        self._splu = splu_obj
        self._lower = None

    @property
    def lower(self) -> sp.csc_matrix:
        if self._lower is None:
            du = self._splu.U.diagonal()
            lower = (self._splu.L @ sp.diags(np.sqrt(du))).tocsc()
            lower.sort_indices()
            self._lower = lower
        return self._lower

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve Q x = b for one right-hand side or a column batch."""
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.dim:
            raise DimensionMismatch(f"rhs length {b.shape[0]} != dim {self.dim}")
        return self._splu.solve(b)

    def solve_lt(self, z: np.ndarray) -> np.ndarray:
        """Solve Lᵀ u = z in permuted coordinates, then unpermute.

        The result has covariance Q⁻¹ when z is standard normal, which makes
        this the sampling backsolve.
        """
        z = np.asarray(z, dtype=np.float64)
        if z.shape[0] != self.dim:
            raise DimensionMismatch(f"rhs length {z.shape[0]} != dim {self.dim}")
        u = spla.spsolve_triangular(self.lower.T.tocsr(), z, lower=False)
        out = np.empty_like(u)
        out[self.permutation] = u
        return out

    def log_det(self) -> float:
        return float(np.sum(np.log(self._splu.U.diagonal())))

    def marginal_variances(self) -> np.ndarray:
        """Diagonal of Q⁻¹ via selected inversion."""
        return selected_inverse(self).diagonal()


class DenseCholeskyFactor:
    """LAPACK-backed factor with the same interface as CholeskyFactor.

    Used by the inference engine below a dimension threshold, where BLAS3
    beats the sparse path; the permutation is the identity.
    """

    def __init__(self, lower: np.ndarray, jitter_used: float):
        self.dim = lower.shape[0]
        self.permutation = np.arange(self.dim)
        self.jitter_used = float(jitter_used)
        self._lower = lower

    @property
    def lower(self) -> np.ndarray:
        return self._lower

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.dim:
            raise DimensionMismatch(f"rhs length {b.shape[0]} != dim {self.dim}")
        return sla.cho_solve((self._lower, True), b)

    def solve_lt(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[0] != self.dim:
            raise DimensionMismatch(f"rhs length {z.shape[0]} != dim {self.dim}")
        return sla.solve_triangular(self._lower, z, lower=True, trans="T")

    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._lower))))

    def marginal_variances(self) -> np.ndarray:
        inv, info = dpotri(self._lower, lower=1)
        if info != 0:
            raise NotPositiveDefinite(f"dpotri failed with info={info}")
        return np.diag(inv).copy()


def cholesky_dense(q, jitter: float = 0.0) -> DenseCholeskyFactor:
    """Dense-LAPACK variant of :func:`cholesky_csc` (same jitter ladder)."""
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    dense = q.toarray() if sp.issparse(q) else np.asarray(q, dtype=np.float64)
    attempts = [0.0] if jitter == 0.0 \
        else [0.0, jitter, 10.0 * jitter, 100.0 * jitter]
    last_err = None
    for jit in attempts:
        mat = dense if jit == 0.0 else dense + jit * np.eye(dense.shape[0])
        try:
            lower = np.linalg.cholesky(mat)
        except np.linalg.LinAlgError as err:
            last_err = err
            continue
        return DenseCholeskyFactor(lower, jit)
    raise NotPositiveDefinite(
        f"dense factorization failed after jitter ladder (last error: {last_err})"
    )


def cholesky_csc(base: sp.csc_matrix, jitter: float = 0.0) -> CholeskyFactor:
    """Factorization fast path on an already-canonical full symmetric CSC."""
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    n = base.shape[0]
    attempts = [0.0] if jitter == 0.0 \
        else [0.0, jitter, 10.0 * jitter, 100.0 * jitter]
    last_err = None
    for jit in attempts:
        mat = base if jit == 0.0 \
            else (base + sp.identity(n, format="csc") * jit)
        try:
            lu = spla.splu(
                mat,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as err:  # exactly singular
            last_err = err
            continue
        du = lu.U.diagonal()
        if not np.array_equal(lu.perm_r, lu.perm_c) or not np.all(du > 0.0) \
                or not np.all(np.isfinite(du)):
            last_err = RuntimeError("non-positive pivot")
            continue
        perm = np.argsort(lu.perm_c)
        return CholeskyFactor(perm, lu, jit)
    raise NotPositiveDefinite(
        f"factorization failed after jitter ladder (last error: {last_err})"
    )


def cholesky(q: SparseSymMatrix, jitter: float = 0.0) -> CholeskyFactor:
    """Sparse Cholesky factorization with an escalating jitter ladder.

    The first attempt factors ``q`` as given.  If that fails and ``jitter``
    is positive, the diagonal is perturbed by ``jitter``, then 10x and 100x
    that, before giving up.  The total jitter actually applied is recorded on
    the returned factor.
    """
    return cholesky_csc(q.csc, jitter)


def default_jitter(q) -> float:
    """Ladder start used by the inference engine: 1e-8 x max |diagonal|.

    Accepts a SparseSymMatrix or any scipy sparse matrix.
    """
    return 1e-8 * float(np.max(np.abs(q.diagonal())))


def solve(f: CholeskyFactor, b: np.ndarray) -> np.ndarray:
    """Solve Q x = b given the factor of Q."""
    return f.solve(b)


def log_det(f: CholeskyFactor) -> float:
    """log |Q| = 2 * sum(log diag L)."""
    return f.log_det()


def selected_inverse(f: CholeskyFactor) -> SparseSymMatrix:
    """Entries of Q⁻¹ on the sparsity pattern of L + Lᵀ.

    Takahashi recurrence processed in reverse column order.  The diagonal of
    the result holds the exact marginal variances of N(0, Q⁻¹).  Uses a dense
    n x n scratch array, which bounds practical use to a few thousand rows.
    """
    n = f.dim
    L = f.lower
    indptr, indices, data = L.indptr, L.indices, L.data
    dL = L.diagonal()
    scratch = np.zeros((n, n))
    for j in range(n - 1, -1, -1):
        lo, hi = indptr[j], indptr[j + 1]
        rows = indices[lo + 1:hi]  # strictly-below-diagonal pattern
        lvals = data[lo + 1:hi]
        if rows.size:
            sub = scratch[np.ix_(rows, rows)]
            col = (sub @ lvals) / (-dL[j])
            scratch[rows, j] = col
            scratch[j, rows] = col
            scratch[j, j] = 1.0 / dL[j] ** 2 - (lvals @ col) / dL[j]
        else:
            scratch[j, j] = 1.0 / dL[j] ** 2
    # map the permuted pattern entries back to original coordinates
    perm = f.permutation
    out = SparseSymMatrix(n)
    coo = sp.tril(L).tocoo()
    out.add_batch(perm[coo.row], perm[coo.col], scratch[coo.row, coo.col])
    return out.finalize()


def kronecker(a: SparseSymMatrix, b: SparseSymMatrix) -> SparseSymMatrix:
    """Kronecker product A ⊗ B of two finalized symmetric matrices.

    Index convention: entry ((i*b.dim + k), (j*b.dim + l)) = A[i,j] * B[k,l].
    """
    ar, ac, av = a.lower_triples()
    bl = sp.tril(b.csc).tocoo()
    bf = b.csc.tocoo()  # full pattern, needed for off-diagonal blocks
    nb = b.dim
    out = SparseSymMatrix(a.dim * b.dim)
    diag_blocks = ar == ac
    for i, j, v in zip(ar[diag_blocks], ac[diag_blocks], av[diag_blocks]):
        out.add_batch(i * nb + bl.row, j * nb + bl.col, v * bl.data)
    off = ~diag_blocks
    for i, j, v in zip(ar[off], ac[off], av[off]):
        # i > j so every entry of the block lands in the lower triangle
        out.add_batch(i * nb + bf.row, j * nb + bf.col, v * bf.data)
    return out.finalize()
