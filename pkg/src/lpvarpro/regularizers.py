"""Regularization operators: identity, derivative stencils and framelets.

All operators act on flattened (row-major) vectors and expose forward and
adjoint actions plus a dense assembly for small sizes. The 2D derivative
operators use the Kronecker-sum structure without materializing it, and the
framelet analysis operator realizes a linear B-spline tight frame with
reflexive boundary corrections so that W^T W = I.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse


class Regularizer:
    """Linear map L with input dimension ``n`` and output dimension ``q``."""

    n: int
    q: int
    tag: str

    def apply(self, x) -> np.ndarray:
        raise NotImplementedError

    def adjoint_apply(self, u) -> np.ndarray:
        raise NotImplementedError

    def dense(self) -> np.ndarray:
        cols = [self.apply(e) for e in np.eye(self.n)]
        return np.column_stack(cols)


class IdentityRegularizer(Regularizer):
    tag = "identity"

    def __init__(self, n):
        self.n = self.q = int(n)

    def apply(self, x):
        return np.asarray(x, dtype=float).copy()

    def adjoint_apply(self, u):
        return np.asarray(u, dtype=float).copy()

    def dense(self):
        return np.eye(self.n)


class MatrixRegularizer(Regularizer):
    """Wrap an explicit (sparse or dense) matrix."""

    def __init__(self, mat, tag="matrix"):
        self.mat = mat
        self.q, self.n = mat.shape
        self.tag = tag

    def apply(self, x):
        return np.asarray(self.mat @ np.asarray(x, dtype=float)).ravel()

    def adjoint_apply(self, u):
        return np.asarray(self.mat.T @ np.asarray(u, dtype=float)).ravel()

    def dense(self):
        return self.mat.toarray() if sparse.issparse(self.mat) else np.asarray(self.mat)


def first_derivative_1d(n):
    """Bidiagonal (n-1) x n forward-difference matrix with rows [1, -1]."""
    if n < 2:
        raise ValueError("n must be at least 2")
    data = np.ones(n - 1)
    return sparse.diags_array([data, -data], offsets=[0, 1],
                              shape=(n - 1, n)).tocsr()


def second_derivative_1d(n):
    """Tridiagonal (n-2) x n matrix with rows [-1, 2, -1]."""
    if n < 3:
        raise ValueError("n must be at least 3")
    ones = np.ones(n - 2)
    return sparse.diags_array([-ones, 2 * ones, -ones], offsets=[0, 1, 2],
                              shape=(n - 2, n)).tocsr()


class KroneckerSumRegularizer(Regularizer):
    """Matrix-free action of D (x) I + I (x) D on flattened n x n images.

    For a stencil D of shape (n-k) x n both Kronecker terms have (n-k)*n rows,
    so their sum is well defined; the action is D @ X read row-major plus
    X @ D^T read row-major.
    """

    def __init__(self, stencil, n, tag):
        self.n1 = int(n)
        self.d = stencil
        self.rows = stencil.shape[0]
        self.n = self.n1 * self.n1
        self.q = self.rows * self.n1
        self.tag = tag

    def apply(self, x):
        X = np.asarray(x, dtype=float).reshape(self.n1, self.n1)
        return (self.d @ X).ravel() + np.asarray(X @ self.d.T).ravel()

    def adjoint_apply(self, u):
        U1 = np.asarray(u, dtype=float).reshape(self.rows, self.n1)
        U2 = np.asarray(u, dtype=float).reshape(self.n1, self.rows)
        return np.asarray(self.d.T @ U1).ravel() + np.asarray(U2 @ self.d).ravel()

    def dense(self):
        d = self.d.toarray()
        eye = np.eye(self.n1)
        return np.kron(d, eye) + np.kron(eye, d)


def derivative_2d(order, n):
    """First- or second-derivative Kronecker-sum regularizer on n x n images."""
    if n < 3:
        raise ValueError("n must be at least 3")
    if order == 1:
        return KroneckerSumRegularizer(first_derivative_1d(n), n, "d1")
    if order == 2:
        return KroneckerSumRegularizer(second_derivative_1d(n), n, "d2")
    raise ValueError("order must be 1 or 2")


def framelet_filters_1d(n):
    """Linear B-spline framelet filter matrices W0, W1, W2 of size n x n.

    Masks [1,2,1]/4, sqrt(2)/4*[1,0,-1] and [-1,2,-1]/4 with reflexive
    boundary corrections in the first and last rows, which makes
    W0^T W0 + W1^T W1 + W2^T W2 = I hold exactly.
    """
    if n < 3:
        raise ValueError("n must be at least 3")
    w0 = sparse.lil_array((n, n))
    w1 = sparse.lil_array((n, n))
    w2 = sparse.lil_array((n, n))
    for i in range(1, n - 1):
        w0[i, i - 1:i + 2] = [1.0, 2.0, 1.0]
        w1[i, i - 1:i + 2] = [-1.0, 0.0, 1.0]
        w2[i, i - 1:i + 2] = [-1.0, 2.0, -1.0]
    w0[0, :2] = [3.0, 1.0]
    w1[0, :2] = [-1.0, 1.0]
    w2[0, :2] = [1.0, -1.0]
    w0[n - 1, n - 2:] = [1.0, 3.0]
    w1[n - 1, n - 2:] = [-1.0, 1.0]
    w2[n - 1, n - 2:] = [-1.0, 1.0]
    return (w0.tocsr() / 4.0, w1.tocsr() * (np.sqrt(2.0) / 4.0),
            w2.tocsr() / 4.0)


class FrameletRegularizer(Regularizer):
    """Two-dimensional framelet analysis operator W on flattened n x n images.

    One level stacks the nine blocks W_i (x) W_j in row-major (i, j) order.
    With ``levels=2`` the low-pass block W0 (x) W0 is re-analyzed recursively,
    which preserves the tight-frame identity W^T W = I.
    """

    tag = "framelet"

    def __init__(self, n, levels=1):
        if levels < 1:
            raise ValueError("levels must be at least 1")
        self.n1 = int(n)
        self.levels = int(levels)
        self.filters = framelet_filters_1d(self.n1)
        self.filters_t = tuple(f.T.tocsr() for f in self.filters)
        self.n = self.n1 * self.n1
        # one level emits 9 blocks; each extra level replaces the low-pass
        # block by 9 more of the same size
        self.q = (8 * (self.levels - 1) + 9) * self.n

    def _analyze(self, X, level):
        out = []
        for i, wi in enumerate(self.filters):
            wx = wi @ X
            for j, wjt in enumerate(self.filters_t):
                block = np.asarray(wx @ wjt)
                if i == 0 and j == 0 and level < self.levels:
                    out.extend(self._analyze(block, level + 1))
                else:
                    out.append(block.ravel())
        return out

    def apply(self, x):
        X = np.asarray(x, dtype=float).reshape(self.n1, self.n1)
        return np.concatenate(self._analyze(X, 1))

    def _synthesize(self, blocks, level):
        acc = np.zeros((self.n1, self.n1))
        pos = 0
        for i, wit in enumerate(self.filters_t):
            for j, wj in enumerate(self.filters):
                if i == 0 and j == 0 and level < self.levels:
                    sub, used = self._synthesize(blocks[pos:], level + 1)
                    pos += used
                    block = sub
                else:
                    block = blocks[pos:pos + self.n].reshape(self.n1, self.n1)
                    pos += self.n
                acc += np.asarray(wit @ np.asarray(block @ wj))
        return acc, pos

    def adjoint_apply(self, u):
        u = np.asarray(u, dtype=float)
        acc, used = self._synthesize(u, 1)
        if used != self.q:
            raise ValueError("coefficient vector has wrong length")
        return acc.ravel()

    def dense(self):
        if self.levels != 1:
            return super().dense()
        rows = []
        for wi in self.filters:
            for wj in self.filters:
                rows.append(np.kron(wi.toarray(), wj.toarray()))
        return np.vstack(rows)


def framelet_analysis_2d(n, levels=1):
    """Tight-frame framelet analysis operator on n x n images (q = 9 n^2)."""
    if n < 3:
        raise ValueError("n must be at least 3")
    return FrameletRegularizer(n, levels=levels)


def as_regularizer(L, n=None):
    """Coerce a Regularizer, explicit matrix, or None (identity) to a Regularizer."""
    if L is None:
        if n is None:
            raise ValueError("need n to build an identity regularizer")
        return IdentityRegularizer(n)
    if isinstance(L, Regularizer):
        return L
    return MatrixRegularizer(L)
