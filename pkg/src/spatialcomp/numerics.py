"""Linear algebra, Fourier transforms and neighbor search used by every method.

Dense matrices are plain ``numpy`` arrays.  Sparse symmetric matrices are
``scipy.sparse`` CSC matrices; :func:`sparse_cholesky` accepts either full or
lower-stored input and returns a :class:`SparseFactor` whose lower factor is a
CSC matrix with strictly increasing row indices in every column.
"""

from dataclasses import dataclass

import numba
import numpy as np
import scipy.linalg
import scipy.sparse as sp
from cvxopt import amd, spmatrix
from scipy.spatial import cKDTree

from .errors import InsufficientPoints, NotPositiveDefinite, SingularFactor

__all__ = [
    "dense_cholesky",
    "sparse_cholesky",
    "SparseFactor",
    "triangular_solve",
    "dft2",
    "KdTree",
    "knn",
    "pairwise_distances",
]


# ---------------------------------------------------------------------------
# dense


def dense_cholesky(A, check_symmetric=True):
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Raises :class:`NotPositiveDefinite` if a pivot is not strictly positive.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if check_symmetric:
        scale = max(np.max(np.abs(A)), np.finfo(float).tiny)
        if np.max(np.abs(A - A.T)) > 1e-12 * scale:
            raise ValueError("matrix is not symmetric")
    try:
        L = scipy.linalg.cholesky(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if not np.all(np.diag(L) > 0):
        raise NotPositiveDefinite("non-positive pivot")
    return L


def pairwise_distances(a, b=None):
    """Euclidean distances between rows of ``a`` and rows of ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = a if b is None else np.atleast_2d(np.asarray(b, dtype=np.float64))
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    return np.sqrt(dx * dx + dy * dy)


# ---------------------------------------------------------------------------
# sparse Cholesky (up-looking, row pattern from the elimination tree)


@numba.njit(cache=True)
def _etree(n, Ap, Ai):
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            while i != -1 and i < k:
                nxt = ancestor[i]
                ancestor[i] = k
                if nxt == -1:
                    parent[i] = k
                i = nxt
    return parent


@numba.njit(cache=True)
def _ereach(Ap, Ai, k, parent, stack, mark):
    # Row k of L: nonzero columns, in topological order stack[top:].
    n = parent.shape[0]
    top = n
    mark[k] = k
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i > k:
            continue
        length = 0
        while mark[i] != k:
            stack[length] = i
            length += 1
            mark[i] = k
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            stack[top] = stack[length]
    return top


@numba.njit(cache=True)
def _symbolic(n, Ap, Ai, parent):
    counts = np.ones(n, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(Ap, Ai, k, parent, stack, mark)
        for t in range(top, n):
            counts[stack[t]] += 1
    Lp = np.zeros(n + 1, dtype=np.int64)
    for j in range(n):
        Lp[j + 1] = Lp[j] + counts[j]
    return Lp


@numba.njit(cache=True)
def _numeric(n, Ap, Ai, Ax, parent, Lp):
    nnz = Lp[n]
    Li = np.empty(nnz, dtype=np.int64)
    Lx = np.empty(nnz, dtype=np.float64)
    nxt = Lp[:n].copy()
    x = np.zeros(n, dtype=np.float64)
    stack = np.empty(n, dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(Ap, Ai, k, parent, stack, mark)
        x[k] = 0.0
        for p in range(Ap[k], Ap[k + 1]):
            if Ai[p] <= k:
                x[Ai[p]] += Ax[p]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            i = stack[t]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, nxt[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            p = nxt[i]
            nxt[i] += 1
            Li[p] = k
            Lx[p] = lki
        if not d > 0.0:
            return Li, Lx, k
        p = nxt[k]
        nxt[k] += 1
        Li[p] = k
        Lx[p] = np.sqrt(d)
    return Li, Lx, -1


@numba.njit(cache=True)
def _lsolve(Lp, Li, Lx, B):
    X = B.copy()
    n = Lp.shape[0] - 1
    for j in range(n):
        d = Lx[Lp[j]]
        for c in range(X.shape[1]):
            X[j, c] /= d
        for p in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[p]
            v = Lx[p]
            for c in range(X.shape[1]):
                X[i, c] -= v * X[j, c]
    return X


@numba.njit(cache=True)
def _ltsolve(Lp, Li, Lx, B):
    X = B.copy()
    n = Lp.shape[0] - 1
    for j in range(n - 1, -1, -1):
        for p in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[p]
            v = Lx[p]
            for c in range(X.shape[1]):
                X[j, c] -= v * X[i, c]
        d = Lx[Lp[j]]
        for c in range(X.shape[1]):
            X[j, c] /= d
    return X


def _as_2d(b):
    b = np.asarray(b, dtype=np.float64)
    return (b[:, None], True) if b.ndim == 1 else (b, False)


@dataclass(frozen=True)
class SparseFactor:
    """Cholesky factor of a permuted sparse SPD matrix: ``A[p][:, p] = L L'``."""

    perm: np.ndarray
    L: sp.csc_matrix
    logdet: float

    @property
    def n(self):
        return self.L.shape[0]

    def half_solve(self, b):
        """``L^{-1} b[perm]``; its squared column norms are ``b' A^{-1} b``."""
        B, flat = _as_2d(b)
        X = _lsolve(self.L.indptr, self.L.indices, self.L.data,
                    np.ascontiguousarray(B[self.perm]))
        return X[:, 0] if flat else X

    def solve(self, b):
        B, flat = _as_2d(b)
        Z = _lsolve(self.L.indptr, self.L.indices, self.L.data,
                    np.ascontiguousarray(B[self.perm]))
        Z = _ltsolve(self.L.indptr, self.L.indices, self.L.data, Z)
        X = np.empty_like(Z)
        X[self.perm] = Z
        return X[:, 0] if flat else X

    def quad(self, b):
        """``b' A^{-1} b`` (per column for 2-D input)."""
        Z = self.half_solve(b)
        return np.sum(Z * Z, axis=0)


def amd_order(A):
    """Approximate-minimum-degree ordering of a symmetric sparse pattern."""
    C = sp.tril(sp.csc_matrix(A)).tocoo()
    n = A.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    M = spmatrix(np.ones(C.nnz), C.row.astype(int).tolist(), C.col.astype(int).tolist(), (n, n))
    return np.asarray(amd.order(M), dtype=np.int64).ravel()


def sparse_cholesky(A, perm=None):
    """Sparse Cholesky with approximate-minimum-degree fill-reducing ordering.

    ``A`` must be symmetric; it may be given full or with only its lower
    triangle stored.  Pass ``perm`` to reuse an ordering across matrices
    sharing one pattern.
    """
    A = sp.csc_matrix(A, dtype=np.float64)
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    lower = sp.tril(A)
    if sp.triu(A, 1).nnz == 0:
        full = (lower + sp.tril(lower, -1).T).tocsc()
    else:
        full = A
    if perm is None:
        perm = amd_order(full)
    perm = np.asarray(perm, dtype=np.int64)
    C = sp.triu(full[perm][:, perm]).tocsc()
    C.sum_duplicates()
    C.sort_indices()
    Ap = C.indptr.astype(np.int64)
    Ai = C.indices.astype(np.int64)
    parent = _etree(n, Ap, Ai)
    Lp = _symbolic(n, Ap, Ai, parent)
    Li, Lx, fail = _numeric(n, Ap, Ai, C.data.astype(np.float64), parent, Lp)
    if fail >= 0:
        raise NotPositiveDefinite(f"non-positive pivot at column {fail}")
    L = sp.csc_matrix((Lx, Li, Lp), shape=(n, n))
    logdet = 2.0 * float(np.sum(np.log(Lx[Lp[:-1]])))
    return SparseFactor(perm=perm, L=L, logdet=logdet)


def triangular_solve(L, b, transposed=False):
    """Solve ``L x = b`` (or ``L' x = b``) for lower-triangular ``L``.

    ``L`` may be a dense array or a CSC matrix whose first stored entry in each
    column is the diagonal (as produced by :func:`sparse_cholesky`).
    """
    if sp.issparse(L):
        L = sp.csc_matrix(L)
        diag = L.diagonal()
        if np.any(diag == 0):
            raise SingularFactor("zero on the diagonal")
        L.sort_indices()
        B, flat = _as_2d(b)
        fn = _ltsolve if transposed else _lsolve
        X = fn(L.indptr.astype(np.int64), L.indices.astype(np.int64), L.data, np.ascontiguousarray(B))
        return X[:, 0] if flat else X
    L = np.asarray(L, dtype=np.float64)
    if np.any(np.diag(L) == 0):
        raise SingularFactor("zero on the diagonal")
    return scipy.linalg.solve_triangular(L, b, lower=True, trans=1 if transposed else 0)


# ---------------------------------------------------------------------------
# Fourier


def dft2(grid, inverse=False):
    """Unitary 2-D DFT: forward ``m^{-1/2} sum Y(s) exp(-i w's)``, inverse likewise.

    Arbitrary grid sizes are supported (pocketfft handles prime factors).
    """
    grid = np.asarray(grid, dtype=np.complex128)
    if inverse:
        return np.fft.ifft2(grid, norm="ortho")
    return np.fft.fft2(grid, norm="ortho")


# ---------------------------------------------------------------------------
# neighbor search


class KdTree:
    """Exact k-nearest-neighbor search over 2-D points.

    Results are ordered by increasing distance, ties broken by lower index.
    """

    def __init__(self, points):
        self.points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 2))
        self._tree = cKDTree(self.points)

    def __len__(self):
        return self.points.shape[0]

    def _dist(self, s, idx):
        d = self.points[idx] - s
        return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1])

    def query(self, s, m, exclude_self=False):
        """Indices of the ``m`` nearest points to location ``s``.

        With ``exclude_self`` the lowest-index point coincident with ``s`` is
        skipped (the query point itself when ``s`` is a member of the set).
        """
        n = len(self)
        need = m + (1 if exclude_self else 0)
        if m < 0 or need > n:
            raise InsufficientPoints(f"requested {m} neighbors from {n} points")
        s = np.asarray(s, dtype=np.float64)
        if m == 0:
            return np.zeros(0, dtype=np.int64)
        k = min(n, need + 1)
        while True:
            _, idx = self._tree.query(s, k=k)
            idx = np.atleast_1d(idx)
            idx = idx[idx < n]
            d = self._dist(s, idx)
            order = np.lexsort((idx, d))
            idx, d = idx[order], d[order]
            if k >= n:
                break
            # every point strictly closer than the k-th returned one is present
            if d[need - 1] < d[-1] * (1 - 1e-12):
                break
            k = min(n, 2 * k)
        if k >= n and len(idx) < n:
            idx = np.arange(n)
            d = self._dist(s, idx)
            order = np.lexsort((idx, d))
            idx, d = idx[order], d[order]
        if exclude_self:
            zero = np.flatnonzero(d == 0.0)
            if len(zero):
                idx = np.delete(idx, zero[0])
        return idx[:m].astype(np.int64)

    def query_batch(self, S, m):
        """Neighbor index matrix, one row per query location."""
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        n = len(self)
        if m > n:
            raise InsufficientPoints(f"requested {m} neighbors from {n} points")
        out = np.empty((S.shape[0], m), dtype=np.int64)
        if S.shape[0] == 0 or m == 0:
            return out
        k = min(n, m + 1)
        _, idx = self._tree.query(S, k=k)
        idx = idx.reshape(S.shape[0], -1)
        diff = self.points[idx] - S[:, None, :]
        d = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)
        redo = []
        for r in range(S.shape[0]):
            o = np.lexsort((idx[r], d[r]))
            ir, dr = idx[r][o], d[r][o]
            if k >= n or dr[m - 1] < dr[-1] * (1 - 1e-12):
                out[r] = ir[:m]
            else:
                redo.append(r)
        for r in redo:
            out[r] = self.query(S[r], m)
        return out


def knn(tree, s, m, exclude_self=False):
    """Functional form of :meth:`KdTree.query`."""
    return tree.query(s, m, exclude_self=exclude_self)
