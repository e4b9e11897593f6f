"""Independent reference computations used by the tests.

Nothing here imports the package under test.
"""
import numpy as np
from scipy.linalg import expm
from scipy.optimize import minimize_scalar


def freq_response(A, B, C, D, w):
    n = A.shape[0]
    return C @ np.linalg.solve(1j * w * np.eye(n) - A, B) + D


def hinf_sweep(A, B, C, D, wmin=1e-4, wmax=1e6, points=4000):
    """Peak singular value of G(jw) over a log grid, polished around the best sample."""
    ws = np.logspace(np.log10(wmin), np.log10(wmax), points)
    sig = [np.linalg.svd(freq_response(A, B, C, D, w), compute_uv=False)[0] for w in ws]
    k = int(np.argmax(sig))
    best = sig[k]
    lo, hi = ws[max(k - 1, 0)], ws[min(k + 1, len(ws) - 1)]
    if hi > lo:
        res = minimize_scalar(
            lambda lw: -np.linalg.svd(freq_response(A, B, C, D, 10 ** lw), compute_uv=False)[0],
            bounds=(np.log10(lo), np.log10(hi)), method="bounded", options={"xatol": 1e-10})
        best = max(best, -res.fun)
    # the DC value is not on the log grid
    return max(best, np.linalg.svd(C @ np.linalg.solve(-A, B) + D, compute_uv=False)[0])


def random_stable(n, m, p, rng, margin=0.1):
    A = rng.standard_normal((n, n))
    shift = np.max(np.linalg.eigvals(A).real) + margin + rng.uniform(0, 1)
    A = A - shift * np.eye(n)
    return A, rng.standard_normal((n, m)), rng.standard_normal((p, n)), np.zeros((p, m))


def lti_response(A, B, x0, u, t):
    """Exact response of x' = Ax + Bu for constant u, via the augmented exponential."""
    n, m = B.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A
    M[:n, n:] = B
    E = expm(M * t)
    return E[:n, :n] @ x0 + E[:n, n:] @ u


def charpoly_eigs(M):
    """Eigenvalues of a symmetric matrix of size <= 3 from its characteristic polynomial."""
    return np.sort(np.roots(np.poly(M)).real)
