"""Small dense linear algebra helpers: Householder QR, spectral norm, finite differences."""

from typing import Callable, NamedTuple

import numpy as np

QR_TOL = 1e-10
SPECTRAL_RTOL = 1e-10
SPECTRAL_MAXITER = 10_000


class QrFactors(NamedTuple):
    q: np.ndarray
    r: np.ndarray


def _check_finite(a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")


def qr_decompose(a) -> QrFactors:
    """Householder QR of a square matrix with a nonnegative diagonal on ``r``.

    Rank-deficient input is allowed and gives zeros on the diagonal of ``r``.
    """
    a = np.array(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"qr_decompose needs a square matrix, got shape {a.shape}")
    _check_finite(a)
    n = a.shape[0]
    r = a.copy()
    q = np.eye(n)
    for k in range(n - 1):
        col = r[k:, k]
        alpha = np.linalg.norm(col)
        if alpha == 0.0:
            continue
        v = col.copy()
        v[0] += np.copysign(alpha, col[0])
        v /= np.linalg.norm(v)
        r[k:, k:] -= 2.0 * np.outer(v, v @ r[k:, k:])
        q[:, k:] -= 2.0 * np.outer(q[:, k:] @ v, v)
        r[k + 1:, k] = 0.0
    # sign convention: nonnegative diagonal makes the factorization unique
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    r *= signs[:, None]
    q *= signs[None, :]
    return QrFactors(q, r)


def spectral_norm(a, rtol: float = SPECTRAL_RTOL, maxiter: int = SPECTRAL_MAXITER) -> float:
    """Largest singular value by power iteration on ``a.T @ a``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    _check_finite(a)
    ata = a.T @ a
    n = ata.shape[0]
    if not np.any(ata):
        return 0.0
    # deterministic start vector with mass on every coordinate
    v = np.linspace(1.0, 2.0, n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(maxiter):
        w = ata @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            # start vector fell in the null space; fall back to the basis vector of the largest column
            v = np.zeros(n)
            v[np.argmax(np.linalg.norm(ata, axis=0))] = 1.0
            continue
        v = w / nrm
        new = float(v @ ata @ v)
        if abs(new - est) <= rtol * max(abs(new), 1e-300):
            est = new
            break
        est = new
    return float(np.sqrt(max(est, 0.0)))


def finite_diff_jacobian(func: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian, entry (i, j) = d func_i / d x_j."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(func(x), dtype=float))
    jac = np.empty((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        fp = np.atleast_1d(np.asarray(func(x + e), dtype=float))
        fm = np.atleast_1d(np.asarray(func(x - e), dtype=float))
        jac[:, j] = (fp - fm) / (2.0 * h)
    return jac
