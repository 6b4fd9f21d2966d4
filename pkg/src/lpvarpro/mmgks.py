"""Majorize-minimize solver on a growing generalized Krylov subspace.

Solves min_x ||G x - d||_2^2 + lambda ||L x||_p^p (smoothed for small p) by
repeatedly replacing the lp term with a weighted l2 term from a quadratic
tangent majorant, solving the weighted problem projected on a small subspace,
and enlarging the subspace with the normalized gradient of the majorant. The
subspace is seeded by Golub-Kahan bidiagonalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gcv import GcvConfig, select_eta
from .operators import MatrixOperator, ParamOperator
from .regularizers import Regularizer, as_regularizer


def _as_operator(G) -> ParamOperator:
    if isinstance(G, ParamOperator):
        return G
    return MatrixOperator(np.asarray(G, dtype=float))


def majorant_weights(u, p, epsilon):
    """Elementwise weights (u_i^2 + eps^2)^(p/2 - 1) of the quadratic majorant."""
    if p <= 1 and epsilon <= 0:
        raise ValueError("epsilon > 0 is required for p <= 1")
    u = np.asarray(u, dtype=float)
    if p == 2:
        return np.ones_like(u)
    return (u**2 + epsilon**2) ** (p / 2.0 - 1.0)


def objective_value(x, G, d, L, lam, p, epsilon):
    """Smoothed objective ||Gx - d||^2 + lam * sum_j (((Lx)_j)^2 + eps^2)^(p/2)."""
    if p <= 1 and epsilon <= 0:
        raise ValueError("epsilon > 0 is required for p <= 1")
    G = _as_operator(G)
    L = as_regularizer(L, G.n)
    x = np.asarray(x, dtype=float)
    res = G.apply(x) - np.asarray(d, dtype=float)
    u = L.apply(x)
    if epsilon == 0.0:
        phi = np.abs(u) ** p
    else:
        phi = (u**2 + epsilon**2) ** (p / 2.0)
    return float(res @ res + lam * phi.sum())


def mm_lambda(eta, p):
    """lp weight of the objective whose tangent majorant carries eta.

    The majorant of sum phi_{p,eps}((Lx)_j) at the current iterate contributes
    the quadratic term (lam*p/2) ||P L x||^2, so a normal-equations weight eta
    corresponds to lam = 2*eta/p.
    """
    return 2.0 * eta / p


def reported_lambda(eta, p, epsilon):
    """Nominal lambda under the eta = lambda * eps^(p-2) bookkeeping convention."""
    if p == 2:
        return eta
    return eta * epsilon ** (2.0 - p)


def golub_kahan(G, d, ell, reorthogonalize=True):
    """ell steps of Golub-Kahan bidiagonalization of G with starting vector d.

    Returns (U, B, V, breakdown) with U (m x (k+1)), B ((k+1) x k) lower
    bidiagonal, V (n x k) orthonormal and G V = U B. On breakdown (a zero
    vector encountered) k < ell and breakdown is True.
    """
    G = _as_operator(G)
    d = np.asarray(d, dtype=float)
    m, n = G.m, G.n
    if not 1 <= ell <= min(m, n):
        raise ValueError("subspace dimension must satisfy 1 <= ell <= min(m, n)")
    us = np.zeros((m, ell + 1))
    vs = np.zeros((n, ell))
    alphas = np.zeros(ell)
    betas = np.zeros(ell + 1)
    tiny = np.finfo(float).eps * max(np.linalg.norm(d), 1.0)

    beta = np.linalg.norm(d)
    if beta <= tiny:
        return us[:, :1] * 0.0, np.zeros((1, 0)), vs[:, :0], True
    us[:, 0] = d / beta
    betas[0] = beta
    k = 0
    breakdown = False
    for i in range(ell):
        v = G.adjoint_apply(us[:, i])
        if i > 0:
            v -= betas[i] * vs[:, i - 1]
        if reorthogonalize and i > 0:
            v -= vs[:, :i] @ (vs[:, :i].T @ v)
        alpha = np.linalg.norm(v)
        if alpha <= tiny:
            breakdown = True
            break
        vs[:, i] = v / alpha
        alphas[i] = alpha
        k = i + 1

        u = G.apply(vs[:, i]) - alpha * us[:, i]
        if reorthogonalize:
            u -= us[:, :i + 1] @ (us[:, :i + 1].T @ u)
        beta = np.linalg.norm(u)
        if beta <= tiny:
            breakdown = True
            break
        us[:, i + 1] = u / beta
        betas[i + 1] = beta

    B = np.zeros((k + 1, k))
    for i in range(k):
        B[i, i] = alphas[i]
        B[i + 1, i] = betas[i + 1]
    return us[:, :k + 1], B, vs[:, :k], breakdown


class GksState:
    """Growing orthonormal basis V with cached products G V and L V.

    Also holds thin QR factors of G V and of the currently weighted P L V.
    The weighted factor is rebuilt when the weights change and updated
    incrementally when only new columns arrived.
    """

    def __init__(self, v, gv, lv, breakdown=False):
        self.v = v
        self.gv = gv
        self.lv = lv
        self.breakdown = breakdown
        self.q_g, self.r_g = np.linalg.qr(gv)
        self.weights = None
        self.q_l = None
        self.r_l = None

    @property
    def k(self) -> int:
        return self.v.shape[1]

    def set_weights(self, w):
        """Refresh the QR of diag(sqrt(w)) L V for the given majorant weights."""
        w = np.asarray(w, dtype=float)
        sqrt_w = np.sqrt(w)
        if (self.weights is not None and self.weights.shape == w.shape
                and np.array_equal(self.weights, w)
                and self.q_l is not None):
            # weights unchanged: append any new cached columns incrementally
            while self.r_l.shape[1] < self.k:
                j = self.r_l.shape[1]
                self._append_qr("l", sqrt_w * self.lv[:, j])
        else:
            wlv = sqrt_w[:, None] * self.lv
            self.q_l, self.r_l = np.linalg.qr(wlv)
            self.weights = w.copy()

    def _append_qr(self, which, col):
        q = self.q_g if which == "g" else self.q_l
        r = self.r_g if which == "g" else self.r_l
        s = q.T @ col
        resid = col - q @ s
        # one reorthogonalization pass keeps the factors near machine precision
        s2 = q.T @ resid
        resid -= q @ s2
        s += s2
        rho = np.linalg.norm(resid)
        rows, k = r.shape
        if q.shape[1] < q.shape[0] and rho > 1e-15 * max(np.linalg.norm(col), 1.0):
            q_new = np.hstack([q, (resid / rho)[:, None]])
            r_new = np.zeros((rows + 1, k + 1))
            r_new[:rows, :k] = r
            r_new[:rows, k] = s
            r_new[rows, k] = rho
        else:
            # the orthogonal factor already spans the column space; the new
            # column only extends the triangular factor
            q_new = q
            r_new = np.zeros((rows, k + 1))
            r_new[:, :k] = r
            r_new[:, k] = s
        if which == "g":
            self.q_g, self.r_g = q_new, r_new
        else:
            self.q_l, self.r_l = q_new, r_new

    def append_direction(self, v_new, gv_new, lv_new):
        self.v = np.hstack([self.v, v_new[:, None]])
        self.gv = np.hstack([self.gv, gv_new[:, None]])
        self.lv = np.hstack([self.lv, lv_new[:, None]])
        self._append_qr("g", gv_new)
        if self.q_l is not None and self.weights is not None:
            self._append_qr("l", np.sqrt(self.weights) * lv_new)


def init_gks(G, d, ell, L=None, reorthogonalize=True) -> GksState:
    """Seed the solution subspace with ell Golub-Kahan steps on (G, d)."""
    G = _as_operator(G)
    _, _, v, breakdown = golub_kahan(G, d, ell, reorthogonalize)
    if v.shape[1] == 0:
        raise ValueError("bidiagonalization broke down immediately (zero data?)")
    gv = np.column_stack([G.apply(v[:, j]) for j in range(v.shape[1])])
    lv = None
    if L is not None:
        L = as_regularizer(L, G.n)
        lv = np.column_stack([L.apply(v[:, j]) for j in range(v.shape[1])])
    return GksState(v, gv, lv, breakdown)


def project_and_solve(state: GksState, eta, dhat):
    """Solve the projected Tikhonov problem min ||[R_G; sqrt(eta) R_L] z - [dhat; 0]||."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    k = state.r_g.shape[1]
    stacked = np.vstack([state.r_g, np.sqrt(eta) * state.r_l])
    svals = np.linalg.svd(stacked, compute_uv=False)
    if svals[-1] <= 2 * k * np.finfo(float).eps * svals[0]:
        raise ValueError(
            "projected system is singular: G and the weighted L share a "
            "null space on the current subspace")
    rhs = np.concatenate([np.asarray(dhat, dtype=float),
                          np.zeros(state.r_l.shape[0])])
    z, *_ = np.linalg.lstsq(stacked, rhs, rcond=None)
    return z


def expand_subspace(state: GksState, z, eta, weights, G, L, d,
                    grad_scale=None, reorthogonalize=True):
    """Enlarge the basis with the normalized majorant gradient at x = V z.

    The expansion vector is r = G^T (G V z - d) + eta L^T (w * (L V z)),
    reorthogonalized against V and normalized. Returns False without
    expanding when the gradient is negligible (stationarity on the current
    weights).
    """
    G = _as_operator(G)
    L = as_regularizer(L, G.n)
    gvz = state.gv @ z
    lvz = state.lv @ z
    r = G.adjoint_apply(gvz - d) + eta * L.adjoint_apply(weights * lvz)
    if grad_scale is None:
        grad_scale = np.linalg.norm(G.adjoint_apply(d))
    floor = 1e-14 * max(grad_scale, 1.0)
    if np.linalg.norm(r) <= floor:
        return False
    if reorthogonalize:
        norm_before = np.linalg.norm(r)
        r = r - state.v @ (state.v.T @ r)
        # repeat the pass when cancellation ate more than 1/sqrt(2) of the norm
        if np.linalg.norm(r) < norm_before / np.sqrt(2.0):
            r = r - state.v @ (state.v.T @ r)
    nr = np.linalg.norm(r)
    if nr <= floor:
        return False
    state.append_direction(r / nr, G.apply(r / nr), L.apply(r / nr))
    return True


@dataclass
class MmgksConfig:
    """Settings for the majorize-minimize subspace solver."""

    p: float = 2.0
    epsilon: float = 1e-2
    subspace_dim: int = 10
    max_iters: int = 100
    tol: float = 1e-6
    eta: float | None = None          # fixed eta; None selects by GCV
    gcv: GcvConfig = field(default_factory=GcvConfig)
    reorthogonalize: bool = True

    def __post_init__(self):
        if not 0.0 < self.p <= 2.0:
            raise ValueError("p must lie in (0, 2]")
        if self.p <= 1 and self.epsilon <= 0:
            raise ValueError("epsilon > 0 is required for p <= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")


@dataclass
class MmgksResult:
    x: np.ndarray
    objectives: list
    etas: list
    iterations: int
    converged: bool
    subspace_dim: int


def mmgks_solve(G, L, d, config: MmgksConfig | None = None, x0=None):
    """Run the majorize-minimize subspace iteration.

    Per iteration: weights from the current iterate, QR of the weighted pair,
    eta fixed or by GCV on the projected factors, projected Tikhonov solve,
    then subspace expansion with the majorant gradient. When expansion stalls
    the reweighting continues on the fixed subspace. Stops on ``max_iters`` or
    a relative change below ``tol``.

    The recorded objective uses the lp weight coupled to eta through the
    tangent-majorant construction, so it is non-increasing for fixed eta.
    """
    cfg = config or MmgksConfig()
    G = _as_operator(G)
    L = as_regularizer(L, G.n)
    d = np.asarray(d, dtype=float)
    eps = 0.0 if cfg.p == 2 else cfg.epsilon

    if np.linalg.norm(d) == 0.0:
        x = np.zeros(G.n)
        return MmgksResult(x=x, objectives=[], etas=[], iterations=0,
                           converged=True, subspace_dim=0)

    ell = min(cfg.subspace_dim, min(G.m, G.n))
    state = init_gks(G, d, ell, L, cfg.reorthogonalize)
    grad_scale = np.linalg.norm(G.adjoint_apply(d))

    x = np.zeros(G.n) if x0 is None else np.asarray(x0, dtype=float).copy()
    objectives = []
    etas = []
    converged = False
    iterations = 0

    for it in range(cfg.max_iters):
        u = L.apply(x)
        w = majorant_weights(u, cfg.p, eps)
        state.set_weights(w)
        dhat = state.q_g.T @ d
        if cfg.eta is not None:
            eta = float(cfg.eta)
        else:
            eta = select_eta(state.r_g, state.r_l, dhat, cfg.gcv).eta
        z = project_and_solve(state, eta, dhat)
        x_new = state.v @ z
        iterations = it + 1
        etas.append(eta)
        objectives.append(objective_value(x_new, G, d, L,
                                          mm_lambda(eta, cfg.p), cfg.p, eps))
        dx = np.linalg.norm(x_new - x)
        ref = np.linalg.norm(x)
        x = x_new
        if ref > 0 and dx <= cfg.tol * ref:
            converged = True
            break
        expand_subspace(state, z, eta, w, G, L, d, grad_scale,
                        cfg.reorthogonalize)
    return MmgksResult(x=x, objectives=objectives, etas=etas,
                       iterations=iterations, converged=converged,
                       subspace_dim=state.k)
