"""Dense SVD helpers: exact, randomized, and truncation."""

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``w = u @ diag(sigma) @ v.T`` with ``sigma`` descending.

    ``u`` is (m, k), ``v`` is (n, k); ``k = min(m, n)`` for a full
    decomposition and the target rank for a randomized one.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank(self):
        return self.sigma.shape[0]

    def reconstruct(self):
        return (self.u * self.sigma) @ self.v.T


def as_matrix(w, name="w"):
    """Return ``w`` as a finite float64 2-D array or raise."""
    a = np.asarray(w, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(f"{name} must be a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def _fix_signs(u, v):
    # first non-negligible entry of every u column made nonnegative; v follows
    tol = 1e-12 * max(1.0, float(np.abs(u).max(initial=0.0)))
    idx = np.argmax(np.abs(u) > tol, axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, v * signs


def svd_full(w):
    """Thin SVD of ``w`` with a deterministic sign convention."""
    a = as_matrix(w)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    u, v = _fix_signs(u, vt.T)
    return SvdFactors(u=u, sigma=s, v=v)


def svd_randomized(w, k, p=10, q=2, seed=0):
    """Top-``k`` SVD via a Gaussian range finder with ``q`` power iterations.

    ``p`` extra sample columns are drawn (capped so the sketch never
    exceeds ``min(m, n)``). Subspace iterations re-orthonormalize
    after every product to keep small singular values accurate.
    """
    a = as_matrix(w)
    m, n = a.shape
    full = min(m, n)
    if not 1 <= k <= full:
        raise InvalidInputError(f"target rank k={k} outside [1, {full}]")
    if p < 0 or q < 0:
        raise InvalidInputError("oversampling p and power iterations q must be >= 0")
    width = min(k + p, full)
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((n, width))
    q_mat, _ = np.linalg.qr(a @ omega)
    for _ in range(q):
        z, _ = np.linalg.qr(a.T @ q_mat)
        q_mat, _ = np.linalg.qr(a @ z)
    b = q_mat.T @ a
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    u = q_mat @ ub[:, :k]
    u, v = _fix_signs(u, vt[:k].T)
    return SvdFactors(u=u, sigma=s[:k].copy(), v=v)


def truncate(f, r):
    """Leading ``r`` factors of ``f`` as ``(u_hat, s_hat, v_hat)``."""
    if not 1 <= r <= f.rank:
        raise InvalidInputError(f"rank r={r} outside [1, {f.rank}]")
    return f.u[:, :r], f.sigma[:r], f.v[:, :r]
