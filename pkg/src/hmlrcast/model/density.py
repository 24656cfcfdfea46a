"""Log-prior, log-likelihood and the unconstrained log-posterior with its gradient."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import digamma, gammaln
from scipy.stats import norm

from .spec import DesignMatrix, ModelSpec
from .transform import (
    HierParams,
    corr_cholesky,
    corr_cholesky_grad,
    layout,
)

MU_PRIOR_SD = 400.0
SIGMA2_PRIOR_LOC = 1.0
SIGMA2_PRIOR_SD = 400.0
LKJ_ETA = 2.0
_LOG_2PI = math.log(2.0 * math.pi)
# normalizer of the half-normal: P(X > 0) for X ~ N(1, 400^2)
_SIGMA2_LOG_MASS = float(norm.logcdf(SIGMA2_PRIOR_LOC / SIGMA2_PRIOR_SD))


def lkj_log_normalizer(K: int, eta: float = LKJ_ETA) -> float:
    """log of the integral of det(Omega)^(eta-1) over K x K correlation matrices."""
    total = 0.0
    for k in range(1, K):
        b = eta + (K - k - 1) / 2.0
        total += (2.0 * eta - 2.0 + K - k) * (K - k) * math.log(2.0)
        total += (K - k) * (2.0 * math.lgamma(b) - math.lgamma(2.0 * b))
    return total


def lkj_log_density(omega_chol: np.ndarray, eta: float = LKJ_ETA) -> float:
    """LKJ(eta) log-density of Omega = chol @ chol.T (summed over leading axes)."""
    chol = np.asarray(omega_chol)
    if chol.ndim == 2:
        chol = chol[None]
    K = chol.shape[-1]
    log_det = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    return float(np.sum((eta - 1.0) * log_det - lkj_log_normalizer(K, eta)))


def _as_counts(data) -> np.ndarray:
    counts = getattr(data, "counts", data)
    return np.asarray(counts, dtype=np.int64)


def _as_X(X, n_days: int, P: int) -> np.ndarray:
    if X is None:
        return DesignMatrix.for_window(n_days, P).X
    if isinstance(X, DesignMatrix):
        X = X.with_degree(P).X if X.P != P else X.X
    X = np.asarray(X, dtype=float)
    return X[:, :P] if X.ndim == 2 and X.shape[1] > P else X


# --------------------------------------------------------------------------
# priors
# --------------------------------------------------------------------------

def _hier_gamma_term(params: HierParams, want_grad: bool = False):
    """Sum over (l, p) of log normal(gamma_{l.p}; mu_p, Sigma_p) and its pieces' gradients."""
    gamma, mu = params.gamma, params.mu
    L, K, P = gamma.shape
    s2 = params.sigma2_matrix()
    sd = np.sqrt(s2)
    d = np.transpose(gamma, (2, 0, 1)) - mu[:, None, :]  # (P, L, K)
    e = d / sd[:, None, :]
    chol = params.omega_chol
    if chol is None:
        w = e
        log_diag = 0.0
    else:
        inv = np.linalg.inv(chol)
        w = e @ np.swapaxes(inv, -1, -2)  # rows are chol^{-1} e_l
        log_diag = np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum()
    quad = np.sum(w**2)
    value = -0.5 * L * K * P * _LOG_2PI - L * (np.log(sd).sum() + log_diag) - 0.5 * quad
    if not want_grad:
        return value
    zz = w if chol is None else w @ inv  # rows are chol^{-T} chol^{-1} e_l
    g_d = -zz / sd[:, None, :]
    g_gamma = np.transpose(g_d, (1, 2, 0))
    g_mu = -g_d.sum(axis=1)
    g_log_s2 = -0.5 * L + 0.5 * np.sum(zz * e, axis=1)  # (P, K)
    g_chol = None
    if chol is not None:
        g_chol = np.einsum("pli,plj->pij", zz, w)
        g_chol = np.tril(g_chol)
        idx = np.arange(K)
        g_chol[:, idx, idx] -= L / np.diagonal(chol, axis1=-2, axis2=-1)
    return value, g_gamma, g_mu, g_log_s2, g_chol


def log_prior_terms(params, spec: ModelSpec) -> dict[str, float]:
    """Prior broken into ``mu``, ``sigma2``, ``omega`` and hierarchical ``gamma`` parts."""
    if spec.is_baseline:
        return {"gamma": 0.0}
    mu = np.asarray(params.mu)
    s2 = np.asarray(params.sigma2, dtype=float)
    if np.any(s2 <= 0):
        raise ValueError("variances must be positive")
    terms = {
        "mu": float(np.sum(norm.logpdf(mu, 0.0, MU_PRIOR_SD))),
        "sigma2": float(np.sum(norm.logpdf(s2, SIGMA2_PRIOR_LOC, SIGMA2_PRIOR_SD) - _SIGMA2_LOG_MASS)),
        "omega": 0.0,
    }
    if params.omega_chol is not None:
        chol = np.asarray(params.omega_chol)
        if np.any(np.diagonal(chol, axis1=-2, axis2=-1) <= 0):
            raise ValueError("correlation Cholesky factor must have a positive diagonal")
        terms["omega"] = lkj_log_density(chol)
    terms["gamma"] = float(_hier_gamma_term(params))
    return terms


def log_prior(params, spec: ModelSpec) -> float:
    """Log prior density at constrained parameters; 0 for the (flat) baseline."""
    return float(sum(log_prior_terms(params, spec).values()))


# --------------------------------------------------------------------------
# likelihood
# --------------------------------------------------------------------------

def _cell_constants(counts: np.ndarray) -> np.ndarray:
    n = counts.sum(axis=-1)
    return gammaln(n + 1.0) - gammaln(counts + 1.0).sum(axis=-1)


def _multinomial_terms(eta: np.ndarray, counts: np.ndarray):
    """Per-cell log-pmf (without constants) and d/d eta, reference category last."""
    n = counts.sum(axis=-1)
    m = np.maximum(eta.max(axis=-1), 0.0)
    ex = np.exp(eta - m[:, None])
    denom = ex.sum(axis=-1) + np.exp(-m)
    lse = m + np.log(denom)
    ll = np.sum(counts[:, :-1] * eta, axis=-1) - n * lse
    g = counts[:, :-1] - n[:, None] * (ex / denom[:, None])
    return ll, g


def _dm_terms(eta: np.ndarray, counts: np.ndarray):
    """Dirichlet-multinomial with concentrations (exp(eta), 1); constants excluded."""
    n = counts.sum(axis=-1)
    alpha = np.exp(eta)
    A = alpha.sum(axis=-1) + 1.0
    c = counts[:, :-1]
    c_ref = counts[:, -1]
    ll = (gammaln(A) - gammaln(n + A)
          + np.sum(gammaln(c + alpha) - gammaln(alpha), axis=-1)
          + gammaln(c_ref + 1.0))
    common = digamma(A) - digamma(n + A)
    g = alpha * (common[:, None] + digamma(c + alpha) - digamma(alpha))
    return ll, g


def _loglik_eta(eta: np.ndarray, counts: np.ndarray, dm: bool):
    return _dm_terms(eta, counts) if dm else _multinomial_terms(eta, counts)


def log_likelihood(params, spec: ModelSpec, data, X=None) -> float:
    """Log-likelihood of an (L, T, V) count cube, multinomial-coefficient constants included."""
    counts = _as_counts(data)
    L, T, V = counts.shape
    if spec.is_baseline:
        Xm = _as_X(X, T, 2)
        eta = Xm @ np.asarray(params.gamma_tilde).T  # (T, K)
        eta = np.broadcast_to(eta, (L, T, V - 1)).reshape(-1, V - 1)
        dm = False
    else:
        Xm = _as_X(X, T, spec.P)
        gamma = np.asarray(params.gamma)
        if np.isnan(gamma).any():
            raise ValueError("NaN in coefficients")
        eta = np.einsum("lkp,tp->ltk", gamma, Xm).reshape(-1, V - 1)
        dm = spec.is_dm
    flat = counts.reshape(-1, V)
    keep = flat.sum(axis=1) > 0
    ll, _ = _loglik_eta(eta[keep], flat[keep].astype(float), dm)
    return float(ll.sum() + _cell_constants(flat[keep]).sum())


def log_pmf(counts, probs=None, alpha=None) -> np.ndarray:
    """Multinomial (``probs``) or Dirichlet-multinomial (``alpha``) log-pmf, row-wise."""
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    const = _cell_constants(counts)
    if alpha is not None:
        alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
        A = alpha.sum(axis=-1)
        n = counts.sum(axis=-1)
        return const + gammaln(A) - gammaln(n + A) + np.sum(gammaln(counts + alpha) - gammaln(alpha), axis=-1)
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    with np.errstate(divide="ignore"):
        logp = np.where(counts > 0, np.log(probs), 0.0)
    return const + np.sum(counts * logp, axis=-1)


# --------------------------------------------------------------------------
# posterior
# --------------------------------------------------------------------------

class Posterior:
    """Unconstrained log-posterior (prior + likelihood + log-Jacobian) for one model and dataset.

    Calling the object returns ``(value, gradient)``.  Only cells with a
    positive daily total enter the likelihood.
    """

    def __init__(self, spec: ModelSpec, data, X=None):
        counts = _as_counts(data)
        self.spec = spec
        self.L, self.T, self.V = counts.shape
        self.K = self.V - 1
        self.layout = layout(spec, self.L, self.V)
        self.dim = self.layout.dim
        self.X = _as_X(X, self.T, self.layout.P)
        if self.X.shape != (self.T, self.layout.P):
            raise ValueError(f"design matrix shape {self.X.shape} does not match {self.T} days, P={self.layout.P}")
        totals = counts.sum(axis=2)
        l_idx, t_idx = np.nonzero(totals)
        self.cell_counts = counts[l_idx, t_idx].astype(float)
        self.constant = float(_cell_constants(counts[l_idx, t_idx]).sum())
        if spec.is_baseline:
            pooled = counts.sum(axis=0)
            keep = pooled.sum(axis=1) > 0
            self.pooled = pooled[keep].astype(float)
            self.pooled_X = self.X[keep]
        else:
            self.l_idx, self.t_idx = l_idx, t_idx
            self.XT = np.ascontiguousarray(self.X.T)

    def transform(self, u):
        from .transform import transform

        return transform(u, self.spec, self.L, self.V)

    def __call__(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dim,):
            raise ValueError(f"expected vector of length {self.dim}, got shape {u.shape}")
        if np.isnan(u).any():
            raise ValueError("NaN in unconstrained parameters")
        with np.errstate(over="ignore", invalid="ignore"):
            if self.spec.is_baseline:
                return self._baseline(u)
            return self._hier(u)

    def value(self, u: np.ndarray) -> float:
        return self(u)[0]

    def _baseline(self, u):
        K = self.K
        gt = u.reshape(K, 2)
        if len(self.pooled) == 0:
            return self.constant, np.zeros_like(u)
        eta = self.pooled_X @ gt.T
        ll, g_eta = _multinomial_terms(eta, self.pooled)
        value = float(ll.sum()) + self.constant
        grad = (g_eta.T @ self.pooled_X).ravel()
        return value, grad

    def _hier(self, u):
        lay, L, K, P = self.layout, self.L, self.K, self.layout.P
        grad = np.zeros(self.dim)
        gamma = u[lay.gamma].reshape(L, K, P)
        mu = u[lay.mu].reshape(P, K)
        log_s2 = u[lay.log_sigma2]
        s2 = np.exp(log_s2)
        chol = z = y = None
        value = float(np.sum(log_s2))
        if lay.correlated:
            y = u[lay.corr].reshape(P, lay.n_corr)
            chol, z, lj = corr_cholesky(y, K)
            value += lj
            value += lkj_log_density(chol)
        sigma2 = s2 if lay.shared else s2.reshape(P, K)
        params = HierParams(gamma, mu, sigma2, chol)

        # hyperpriors
        value += float(np.sum(-0.5 * (mu / MU_PRIOR_SD) ** 2) - mu.size * (math.log(MU_PRIOR_SD) + 0.5 * _LOG_2PI))
        value += float(np.sum(-0.5 * ((s2 - SIGMA2_PRIOR_LOC) / SIGMA2_PRIOR_SD) ** 2)
                       - s2.size * (math.log(SIGMA2_PRIOR_SD) + 0.5 * _LOG_2PI + _SIGMA2_LOG_MASS))
        g_mu = -mu / MU_PRIOR_SD**2
        g_ls2 = 1.0 - (s2 - SIGMA2_PRIOR_LOC) / SIGMA2_PRIOR_SD**2 * s2

        # hierarchical term
        hv, hg_gamma, hg_mu, hg_ls2, hg_chol = _hier_gamma_term(params, want_grad=True)
        value += float(hv)
        g_gamma = hg_gamma
        g_mu = g_mu + hg_mu
        g_ls2 = g_ls2 + (hg_ls2.sum(axis=1) if lay.shared else hg_ls2.ravel())

        # likelihood
        if len(self.l_idx):
            eta_all = np.swapaxes(gamma @ self.XT, 1, 2)  # (L, T, K)
            eta = eta_all[self.l_idx, self.t_idx]
            ll, g_eta = _loglik_eta(eta, self.cell_counts, self.spec.is_dm)
            value += float(ll.sum()) + self.constant
            g_all = np.zeros_like(eta_all)
            g_all[self.l_idx, self.t_idx] = g_eta
            g_gamma = g_gamma + np.swapaxes(g_all, 1, 2) @ self.X

        grad[lay.gamma] = g_gamma.ravel()
        grad[lay.mu] = g_mu.ravel()
        grad[lay.log_sigma2] = g_ls2
        if lay.correlated:
            idx = np.arange(K)
            g_chol = hg_chol
            g_chol[:, idx, idx] += 2.0 * (LKJ_ETA - 1.0) / np.diagonal(chol, axis1=-2, axis2=-1)
            grad[lay.corr] = corr_cholesky_grad(g_chol, chol, z, y).ravel()
        if not np.isfinite(value):
            value = -np.inf
        return value, grad


def log_posterior_and_grad(u: np.ndarray, spec: ModelSpec, data, X=None) -> tuple[float, np.ndarray]:
    """One-off evaluation; build a :class:`Posterior` once when evaluating repeatedly."""
    return Posterior(spec, data, X)(u)
