"""Dense linear-algebra primitives: SVD, soft-thresholded SVD and noise-level estimation.

All functions are pure and operate on dense ``numpy`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize

# singular values below RANK_RTOL * D[0] count as zero
RANK_RTOL = 1e-12


@dataclass(frozen=True)
class SvdTriple:
    """Thin singular value decomposition ``X = U @ diag(D) @ V.T``.

    ``U`` is ``m x r``, ``D`` has length ``r`` (non-negative, non-increasing)
    and ``V`` is ``n x r``.
    """

    U: np.ndarray
    D: np.ndarray
    V: np.ndarray

    @property
    def shape(self):
        return (self.U.shape[0], self.V.shape[0])

    @property
    def rank(self) -> int:
        if self.D.size == 0 or self.D[0] <= 0:
            return 0
        return int(np.count_nonzero(self.D > RANK_RTOL * self.D[0]))

    @property
    def nuclear_norm(self) -> float:
        return float(self.D.sum())

    def matrix(self) -> np.ndarray:
        return (self.U * self.D) @ self.V.T

    def truncate(self, r: int | None = None) -> "SvdTriple":
        """Keep the leading ``r`` components (default: the numerical rank)."""
        if r is None:
            r = self.rank
        return SvdTriple(self.U[:, :r].copy(), self.D[:r].copy(), self.V[:, :r].copy())


def _check_finite(X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("matrix contains non-finite values")
    return X


def svd(X, rank=None, randomized=False, n_oversamples=10, n_iter=4, seed=None) -> SvdTriple:
    """Thin SVD of ``X``.

    Parameters
    ----------
    X : array_like, shape (m, n)
    rank : int or None
        If given, truncate to the leading ``rank`` components.
    randomized : bool
        Use a seeded randomized range finder (requires ``rank``). Not
        used anywhere in the fitting code paths.
    """
    X = _check_finite(X)
    m, n = X.shape
    if randomized:
        if rank is None:
            raise ValueError("randomized SVD needs an explicit rank")
        rng = np.random.default_rng(seed)
        k = min(rank + n_oversamples, m, n)
        Q = np.linalg.qr(X @ rng.standard_normal((n, k)))[0]
        for _ in range(n_iter):
            Q = np.linalg.qr(X.T @ Q)[0]
            Q = np.linalg.qr(X @ Q)[0]
        Ub, D, Vt = np.linalg.svd(Q.T @ X, full_matrices=False)
        U = Q @ Ub
    elif min(m, n) == 0:
        return SvdTriple(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)))
    else:
        U, D, Vt = np.linalg.svd(X, full_matrices=False)
    out = SvdTriple(U, D, Vt.T)
    if rank is not None:
        out = out.truncate(min(rank, D.size))
    return out


def svdvals(X) -> np.ndarray:
    """Singular values only, in non-increasing order."""
    X = np.asarray(X, dtype=float)
    if min(X.shape) == 0:
        return np.zeros(0)
    return np.linalg.svd(X, compute_uv=False)


def soft_threshold(d, lam):
    return np.maximum(np.asarray(d, dtype=float) - lam, 0.0)


def soft_svd(X, lam) -> SvdTriple:
    """Proximal operator of ``lam * ||.||_*`` evaluated at ``X``.

    Returns the SVD factors of ``argmin_A 0.5*||X - A||_F^2 + lam*||A||_*``,
    i.e. the singular values of ``X`` shrunk by ``lam`` and floored at zero.
    """
    if lam < 0:
        raise ValueError(f"penalty must be non-negative, got {lam}")
    s = svd(X)
    return SvdTriple(s.U, soft_threshold(s.D, lam), s.V)


def nuclear_objective(X, A, lam) -> float:
    """``0.5*||X - A||_F^2 + lam*||A||_*``."""
    X = np.asarray(X, dtype=float)
    A = np.asarray(A, dtype=float)
    return 0.5 * float(np.sum((X - A) ** 2)) + lam * float(svdvals(A).sum())


@lru_cache(maxsize=256)
def marchenko_pastur_median(beta: float) -> float:
    """Median of the Marchenko-Pastur law with aspect ratio ``0 < beta <= 1``.

    Found by root-finding on the numerically integrated CDF. The support
    ``[a, b]`` is parametrised as ``x = c - h*cos(t)`` so the integrand is
    smooth even when ``a = 0``.
    """
    if not 0 < beta <= 1:
        raise ValueError(f"aspect ratio must lie in (0, 1], got {beta}")
    a = (1 - np.sqrt(beta)) ** 2
    b = (1 + np.sqrt(beta)) ** 2
    c, h = (a + b) / 2, (b - a) / 2

    def integrand(t):
        x = a + 2 * h * np.sin(t / 2) ** 2
        if x == 0.0:
            # limit at t -> 0 when a = 0 (beta = 1)
            return h / (np.pi * beta)
        return (h * np.sin(t)) ** 2 / (2 * np.pi * beta * x)

    def cdf_minus_half(theta):
        if theta <= 0:
            return -0.5
        val, _ = integrate.quad(integrand, 0.0, theta, limit=200, epsabs=1e-13, epsrel=1e-12)
        return val - 0.5

    theta = optimize.brentq(cdf_minus_half, 0.0, np.pi, xtol=1e-12)
    return float(a + 2 * h * np.sin(theta / 2) ** 2)


def sigma_mad(X) -> float:
    """Noise standard deviation estimate from the median singular value.

    ``sigma = d_med / sqrt(n * mu_beta)`` where ``d_med`` is the median
    singular value, the matrix is oriented so that ``m <= n``, ``beta = m/n``
    and ``mu_beta`` is the Marchenko-Pastur median.
    """
    X = _check_finite(X)
    m, n = X.shape
    if m > n:
        m, n = n, m
    if m < 2:
        raise ValueError("sigma_mad needs both dimensions >= 2")
    if np.ptp(X) == 0:
        raise ValueError("matrix is constant (zero spread); cannot estimate noise level")
    d = svdvals(X)
    d_med = float(np.median(d))
    if d_med <= 0:
        raise ValueError("matrix has zero spread; cannot estimate noise level")
    return float(d_med / np.sqrt(n * marchenko_pastur_median(m / n)))


def noise_operator_bound(m: int, n: int, sigma: float = 1.0) -> float:
    """Upper bound ``sigma*(sqrt(m)+sqrt(n))`` on the top singular value of iid noise."""
    if m < 1 or n < 1:
        raise ValueError("dimensions must be positive")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return float(sigma * (np.sqrt(m) + np.sqrt(n)))
