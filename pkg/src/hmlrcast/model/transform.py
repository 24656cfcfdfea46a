"""Parameter layout and the unconstrained <-> constrained maps.

Unconstrained vector layout for hierarchical models::

    [ gamma (L, K, P) | mu (P, K) | log sigma^2 (P,) or (P, K) | corr (P, K(K-1)/2) ]

with ``K = V - 1``.  The correlation block exists only for the correlated
covariance structure; each row holds unbounded values that ``tanh`` maps to
canonical partial correlations, which then build the Cholesky factor of a
correlation matrix.  The baseline is just ``gamma_tilde`` of shape (K, 2).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .spec import Covariance, ModelSpec

_LOG2 = np.log(2.0)


@dataclass(frozen=True, eq=False)
class HierParams:
    gamma: np.ndarray  # (L, K, P)
    mu: np.ndarray  # (P, K)
    sigma2: np.ndarray  # (P,) shared, else (P, K)
    omega_chol: np.ndarray | None = None  # (P, K, K), correlated only

    @property
    def omega(self) -> np.ndarray | None:
        if self.omega_chol is None:
            return None
        return self.omega_chol @ np.swapaxes(self.omega_chol, -1, -2)

    def sigma2_matrix(self) -> np.ndarray:
        """Per-(p, variant) variances, shape (P, K)."""
        K = self.gamma.shape[1]
        s2 = np.asarray(self.sigma2, dtype=float)
        return np.broadcast_to(s2[:, None], (s2.shape[0], K)) if s2.ndim == 1 else s2

    def covariance(self) -> np.ndarray:
        """Sigma_p for every p, shape (P, K, K)."""
        sd = np.sqrt(self.sigma2_matrix())
        if self.omega_chol is None:
            return np.einsum("pk,kj->pkj", sd**2, np.eye(sd.shape[1]))
        return sd[:, :, None] * self.omega[:, :, :] * sd[:, None, :]


@dataclass(frozen=True, eq=False)
class BaselineParams:
    gamma_tilde: np.ndarray  # (K, 2)


@dataclass(frozen=True)
class Layout:
    L: int
    K: int
    P: int
    gamma: slice
    mu: slice
    log_sigma2: slice
    corr: slice
    shared: bool
    correlated: bool
    baseline: bool = False

    @property
    def dim(self) -> int:
        return self.corr.stop

    @property
    def n_corr(self) -> int:
        return self.K * (self.K - 1) // 2

    def blocks(self) -> dict[str, tuple[int, int]]:
        return {k: (getattr(self, k).start, getattr(self, k).stop)
                for k in ("gamma", "mu", "log_sigma2", "corr")}


@lru_cache(maxsize=None)
def layout(spec: ModelSpec, L: int, V: int) -> Layout:
    if L < 1 or V < 2:
        raise ValueError(f"need L >= 1 and V >= 2, got L={L}, V={V}")
    K = V - 1
    if spec.is_baseline:
        g = slice(0, 2 * K)
        empty = slice(2 * K, 2 * K)
        return Layout(L, K, 2, g, empty, empty, empty, shared=True, correlated=False, baseline=True)
    P = spec.P
    shared = spec.covariance is Covariance.SHARED
    correlated = spec.covariance is Covariance.CORRELATED
    n_g = L * K * P
    n_mu = K * P
    n_s = P if shared else K * P
    n_c = P * K * (K - 1) // 2 if correlated else 0
    a = n_g
    b = a + n_mu
    c = b + n_s
    return Layout(L, K, P, slice(0, a), slice(a, b), slice(b, c), slice(c, c + n_c), shared, correlated)


def param_dim(spec: ModelSpec, L: int, V: int) -> int:
    return layout(spec, L, V).dim


# --------------------------------------------------------------------------
# correlation matrices from canonical partial correlations
# --------------------------------------------------------------------------

def log1m_tanh2(y: np.ndarray) -> np.ndarray:
    """log(1 - tanh(y)^2), stable for large |y|."""
    a = np.abs(y)
    return 2.0 * (_LOG2 - a - np.log1p(np.exp(-2.0 * a)))


def _corr_weights(K: int) -> np.ndarray:
    """Jacobian weight of each lower-triangle entry (row-major order)."""
    _, cols = np.tril_indices(K, -1)
    return 1.0 + 0.5 * (K - 2 - cols)


def corr_cholesky(y: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Build Cholesky factors of correlation matrices.

    ``y`` has shape (P, K(K-1)/2).  Returns ``(chol, z, log_jacobian)`` where
    ``z`` holds the partial correlations in a (P, K, K) strictly-lower array and
    ``log_jacobian`` is the log-determinant of the map from ``y`` to the
    off-diagonal correlations.
    """
    y = np.atleast_2d(y)
    P = y.shape[0]
    rows, cols = np.tril_indices(K, -1)
    z = np.zeros((P, K, K))
    z[:, rows, cols] = np.tanh(y)
    w = np.sqrt(1.0 - z**2)
    # exclusive cumulative product along each row
    c = np.ones_like(w)
    if K > 1:
        c[:, :, 1:] = np.cumprod(w[:, :, :-1], axis=-1)
    chol = np.tril((z + np.eye(K)) * c)
    log_jac = float(np.sum(_corr_weights(K) * log1m_tanh2(y)))
    return chol, z, log_jac


def corr_cholesky_grad(g_chol: np.ndarray, chol: np.ndarray, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the Cholesky factor back to ``y``; adds the Jacobian term.

    Returns an array shaped like ``y``.
    """
    K = chol.shape[-1]
    rows, cols = np.tril_indices(K, -1)
    z2 = z**2
    one_m = 1.0 - z2
    # c_ij = prod_{k<j} sqrt(1 - z_ik^2); for j < i, L_ij = z_ij c_ij
    c = np.ones_like(z)
    if K > 1:
        c[:, :, 1:] = np.cumprod(np.sqrt(one_m[:, :, :-1]), axis=-1)
    a = np.tril(g_chol) * chol
    tail = np.flip(np.cumsum(np.flip(a, -1), -1), -1) - a  # sum_{j>k} a_ij
    g_y = g_chol * c * one_m - z * tail
    g_y = g_y[:, rows, cols]
    return g_y - 2.0 * _corr_weights(K) * np.tanh(np.atleast_2d(y))


def corr_unconstrain(chol: np.ndarray) -> np.ndarray:
    """Inverse of :func:`corr_cholesky` (Cholesky factor -> unbounded values)."""
    chol = np.asarray(chol, dtype=float)
    if chol.ndim == 2:
        chol = chol[None]
    P, K, _ = chol.shape
    rows, cols = np.tril_indices(K, -1)
    out = np.zeros((P, len(rows)))
    for p in range(P):
        for n, (i, j) in enumerate(zip(rows, cols)):
            remaining = 1.0 - np.sum(chol[p, i, :j] ** 2)
            out[p, n] = np.arctanh(chol[p, i, j] / np.sqrt(remaining))
    return out


# --------------------------------------------------------------------------
# full transform
# --------------------------------------------------------------------------

def transform(u: np.ndarray, spec: ModelSpec, L: int, V: int):
    """Map an unconstrained point to model parameters.

    Returns ``(params, log_jacobian)``; ``params`` is :class:`HierParams` or,
    for the baseline, :class:`BaselineParams`.
    """
    lay = layout(spec, L, V)
    u = np.asarray(u, dtype=float)
    if u.shape != (lay.dim,):
        raise ValueError(f"expected unconstrained vector of length {lay.dim}, got shape {u.shape}")
    K, P = lay.K, lay.P
    if lay.baseline:
        return BaselineParams(u[lay.gamma].reshape(K, 2).copy()), 0.0
    gamma = u[lay.gamma].reshape(L, K, P)
    mu = u[lay.mu].reshape(P, K)
    log_s2 = u[lay.log_sigma2]
    sigma2 = np.exp(log_s2) if lay.shared else np.exp(log_s2).reshape(P, K)
    log_jac = float(np.sum(log_s2))
    chol = None
    if lay.correlated:
        chol, _, lj = corr_cholesky(u[lay.corr].reshape(P, lay.n_corr), K)
        log_jac += lj
    return HierParams(gamma.copy(), mu.copy(), sigma2, chol), log_jac


def untransform(params, spec: ModelSpec) -> np.ndarray:
    """Inverse of :func:`transform`."""
    if spec.is_baseline:
        return np.asarray(params.gamma_tilde, dtype=float).ravel().copy()
    parts = [np.ravel(params.gamma), np.ravel(params.mu), np.log(np.ravel(params.sigma2))]
    if spec.covariance is Covariance.CORRELATED:
        parts.append(np.ravel(corr_unconstrain(params.omega_chol)))
    return np.concatenate(parts)
