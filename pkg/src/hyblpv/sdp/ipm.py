"""Primal-dual path-following interior point method for block-diagonal LMIs.

The LMI problem ``min c'y  s.t.  G0_k + sum_i y_i G_ki >= 0`` is the dual of

    min <C, X>   s.t.  <A_i, X> = b_i,  X >= 0

with ``C = G0``, ``A_i = -G_i`` and ``b = -c``.  Iterates are infeasible
start, the search direction is HKM and steps use Mehrotra's
predictor-corrector.  Everything is dense numpy; no randomness.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

log = logging.getLogger(__name__)


@dataclass
class IpmOptions:
    max_iter: int = 120
    tol: float = 1e-7
    step_fraction: float = 0.98
    # accepted when progress stalls before ``tol`` is reached (degenerate faces)
    relaxed_tol: float = 1e-6
    stall_iters: int = 10
    verbose: bool = False


@dataclass
class IpmResult:
    y: np.ndarray
    status: str  # optimal | infeasible | unbounded | max-iter | ill-conditioned
    iterations: int
    primal_objective: float
    dual_objective: float
    gap: float
    pinf: float
    dinf: float
    history: list = field(default_factory=list)
    accuracy: str = "full"  # full | reduced


def _chol(M):
    c, info = lapack.dpotrf(M, lower=1, clean=1)
    return c if info == 0 else None


def _max_step(L, D):
    """Largest alpha with L L' + alpha D >= 0 (inf when D >= 0)."""
    Li = sla.solve_triangular(L, np.eye(L.shape[0]), lower=True, check_finite=False)
    S = Li @ D @ Li.T
    lam = sla.eigvalsh(0.5 * (S + S.T), subset_by_index=[0, 0], check_finite=False)[0]
    return np.inf if lam >= 0 else -1.0 / lam


class _Blocks:
    """Scaled block data: ``C_k`` (b,b), ``A_k`` flattened (m_k, b*b), coordinate ``idx_k``."""

    def __init__(self, consts, idxs, coefs, n):
        self.C = [np.asarray(C, float) for C in consts]
        self.idx = [np.asarray(i, int) for i in idxs]
        self.dims = [C.shape[0] for C in self.C]
        self.A = [-np.asarray(G, float).reshape(G.shape[0], -1) for G in coefs]
        self.n = n

    def op(self, Ks):
        """A(X) = (<A_i, X>)_i."""
        out = np.zeros(self.n)
        for idx, A, K in zip(self.idx, self.A, Ks):
            out[idx] += A @ K.ravel()
        return out

    def adj(self, y):
        """A^T(y) = sum_i y_i A_i per block."""
        return [(y[idx] @ A).reshape(b, b) for idx, A, b in zip(self.idx, self.A, self.dims)]


def ipm_solve(consts, idxs, coefs, c, opts: IpmOptions | None = None) -> IpmResult:
    """Solve ``min c'y s.t. consts[k] + sum_j y[idxs[k][j]] coefs[k][j] >= 0``.

    Coordinates must all appear in some block; the caller handles scaling.
    """
    opts = opts or IpmOptions()
    n = len(c)
    P = _Blocks(consts, idxs, coefs, n)
    b = -np.asarray(c, float)
    nb = len(P.C)
    total_dim = sum(P.dims)

    # initial point
    X, Z = [], []
    for C, A, bd in zip(P.C, P.A, P.dims):
        anorm = np.linalg.norm(A, axis=1) if A.size else np.zeros(1)
        xi = max(10.0, np.sqrt(bd), bd * np.max((1 + np.abs(b).max(initial=0)) / (1 + anorm)))
        eta = max(10.0, np.sqrt(bd), anorm.max(initial=0), np.linalg.norm(C))
        X.append(xi * np.eye(bd))
        Z.append(eta * np.eye(bd))
    y = np.zeros(n)

    normb = 1 + np.linalg.norm(b)
    normC = 1 + np.sqrt(sum(np.sum(C * C) for C in P.C))
    history = []
    status = "max-iter"
    best = None
    last_gain = 0

    it = 0
    for it in range(opts.max_iter + 1):
        ATy = P.adj(y)
        Rp = b - P.op(X)
        Rd = [C - Zk - Ak for C, Zk, Ak in zip(P.C, Z, ATy)]
        xz = sum(np.sum(Xk * Zk) for Xk, Zk in zip(X, Z))
        mu = xz / total_dim
        pobj = sum(np.sum(C * Xk) for C, Xk in zip(P.C, X))
        dobj = b @ y
        pinf = np.linalg.norm(Rp) / normb
        dinf = np.sqrt(sum(np.sum(R * R) for R in Rd)) / normC
        objgap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))
        gap = max(xz / (1 + abs(pobj) + abs(dobj)), objgap)
        history.append((it, pobj, dobj, gap, pinf, dinf))
        if opts.verbose:
            log.info("ipm %3d pobj %+.8e dobj %+.8e gap %.2e pinf %.2e dinf %.2e",
                     it, pobj, dobj, gap, pinf, dinf)
        # the objective gap certifies the bound even when complementarity stalls
        merit = max(objgap, pinf, dinf)
        if best is None or merit < best[0]:
            if best is None or merit < 0.5 * best[0]:
                last_gain = it
            best = (merit, y.copy(), pobj, dobj, gap, pinf, dinf)
        if best[0] < opts.relaxed_tol and it - last_gain > opts.stall_iters:
            status = "stalled"
            break
        if gap < opts.tol and pinf < opts.tol and dinf < opts.tol:
            status = "optimal"
            break
        # infeasibility certificates
        if pobj < 0:
            scale = -pobj
            if np.linalg.norm(P.op(X)) / scale < 1e-9 and min(_min_eig(Xk) for Xk in X) > -1e-12:
                status = "infeasible"
                break
        if dobj > 0:
            res = np.sqrt(sum(np.sum((A + Zk) ** 2) for A, Zk in zip(ATy, Z)))
            if res / dobj < 1e-9:
                status = "unbounded"
                break
        if it == opts.max_iter:
            break

        # factorizations
        Lx, Zinv = [], []
        fail = False
        M = np.zeros((n, n))
        for k in range(nb):
            lx = _chol(X[k])
            lz = _chol(Z[k])
            if lx is None or lz is None:
                fail = True
                break
            Gz = sla.solve_triangular(lz, np.eye(P.dims[k]), lower=True, check_finite=False).T
            Lx.append(lx)
            Zinv.append(Gz @ Gz.T)
            bd = P.dims[k]
            A = P.A[k].reshape(-1, bd, bd)
            W = np.matmul(np.matmul(lx.T, A), Gz).reshape(A.shape[0], -1)
            ix = P.idx[k]
            M[np.ix_(ix, ix)] += W @ W.T
        if fail:
            status = "ill-conditioned"
            break
        M = 0.5 * (M + M.T)
        LM = _chol(M)
        if LM is None:
            reg = 1e-14 * max(np.abs(np.diag(M)).max(), 1.0)
            while LM is None and reg < 1e-2 * max(np.abs(np.diag(M)).max(), 1.0):
                LM = _chol(M + reg * np.eye(n))
                reg *= 100
            if LM is None:
                status = "ill-conditioned"
                break

        def direction(RcZinv):
            rhs = Rp - P.op([Q - Xk @ R @ Zi for Q, Xk, R, Zi in zip(RcZinv, X, Rd, Zinv)])
            dy = sla.cho_solve((LM, True), rhs, check_finite=False)
            for rnd in range(4):
                dZ = [R - Ak for R, Ak in zip(Rd, P.adj(dy))]
                dX = []
                for Q, Xk, dz, Zi in zip(RcZinv, X, dZ, Zinv):
                    D = Q - Xk @ dz @ Zi
                    dX.append(0.5 * (D + D.T))
                # refine against the residual of A(dX) = Rp actually achieved
                res = Rp - P.op(dX)
                if rnd == 3 or np.linalg.norm(res) <= 1e-3 * opts.tol * normb:
                    break
                dy = dy + sla.cho_solve((LM, True), res, check_finite=False)
            return dy, dX, dZ

        def steps(dX, dZ):
            ap = min(_max_step(L, D) for L, D in zip(Lx, dX))
            ad = np.inf
            for Zk, D in zip(Z, dZ):
                lz = _chol(Zk)
                ad = min(ad, _max_step(lz, D))
            return ap, ad

        # predictor
        dy, dX, dZ = direction([-Xk for Xk in X])
        ap, ad = steps(dX, dZ)
        ap1, ad1 = min(1.0, ap), min(1.0, ad)
        xz_aff = sum(np.sum((Xk + ap1 * a) * (Zk + ad1 * d)) for Xk, a, Zk, d in zip(X, dX, Z, dZ))
        sigma = min(1.0, (xz_aff / xz) ** 3) if xz > 0 else 0.0
        if pinf > 1e-2 or dinf > 1e-2:
            sigma = max(sigma, 0.1 * min(1.0, max(pinf, dinf)))
        # corrector
        Rc = [(sigma * mu) * Zi - Xk - (a @ d) @ Zi for Zi, Xk, a, d in zip(Zinv, X, dX, dZ)]
        dy, dX, dZ = direction(Rc)
        ap, ad = steps(dX, dZ)
        # step fraction grows as the iterates settle (0.9 far from the path)
        tau = min(opts.step_fraction, 0.9 + 0.09 * min(1.0, ap, ad))
        ap, ad = min(1.0, tau * ap), min(1.0, tau * ad)
        if max(ap, ad) < 1e-10:
            status = "ill-conditioned"
            break
        # backtrack until both iterates factor (rounding can leave the cone)
        for _ in range(40):
            Xn = [Xk + ap * d for Xk, d in zip(X, dX)]
            Xn = [0.5 * (Xk + Xk.T) for Xk in Xn]
            if all(_chol(Xk) is not None for Xk in Xn):
                break
            ap *= 0.5
        else:
            status = "ill-conditioned"
            break
        for _ in range(40):
            Zn = [Zk + ad * d for Zk, d in zip(Z, dZ)]
            Zn = [0.5 * (Zk + Zk.T) for Zk in Zn]
            if all(_chol(Zk) is not None for Zk in Zn):
                break
            ad *= 0.5
        else:
            status = "ill-conditioned"
            break
        X, Z = Xn, Zn
        y = y + ad * dy

    accuracy = "full"
    if status in ("ill-conditioned", "max-iter", "stalled") and best is not None:
        merit, yb, pobj, dobj, gap, pinf, dinf = best
        if merit < opts.tol:
            status = "optimal"
        elif merit < opts.relaxed_tol:
            status, accuracy = "optimal", "reduced"
        elif status == "stalled":
            status = "ill-conditioned"
        y = yb
    return IpmResult(y, status, it, pobj, dobj, gap, pinf, dinf, history, accuracy)


def _min_eig(M):
    return sla.eigvalsh(M, subset_by_index=[0, 0], check_finite=False)[0]
