"""Synthetic multi-location sequence data drawn from the hierarchical model.

Location coefficients come from ``N(mu_p, Sigma_p)``, daily category counts
from a multinomial or Dirichlet-multinomial around the implied prevalences,
and each sequence gets a geometric reporting delay.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .ingest import DEFAULT_LOCATIONS, REFERENCE_LABEL, SequenceRecord
from .model.spec import DesignMatrix
from .model.transform import HierParams


@dataclass(frozen=True)
class SynthConfig:
    L: int = 5
    V: int = 3
    days: int = 100
    totals: float | tuple[float, ...] = 200
    mu: tuple = ((0.3, -0.2), (1.0, -0.5))  # (P, V-1)
    sigma2: tuple = (0.1, 0.01)  # (P,) or (P, V-1)
    omega: tuple | None = None  # (P, V-1, V-1) correlation matrices, optional
    dm_concentration: float | None = None  # None: multinomial
    delay_mean: float = 0.0
    start_date: dt.date = dt.date(2023, 1, 4)
    locations: tuple[str, ...] | None = None
    clades: tuple[str, ...] | None = None
    poisson_totals: bool = False
    seed: int = 0
    gamma: tuple | None = field(default=None, repr=False)  # fixed (L, V-1, P) truth, bypasses the hierarchy

    def __post_init__(self):
        if self.V < 2 or self.L < 1 or self.days < 1:
            raise ValueError("need V >= 2, L >= 1 and days >= 1")
        if np.any(np.asarray(self.totals, dtype=float) < 0):
            raise ValueError("daily totals must be non-negative")
        if self.delay_mean < 0:
            raise ValueError("delay mean must be non-negative")
        if self.dm_concentration is not None and self.dm_concentration <= 0:
            raise ValueError("dm_concentration must be positive")
        mu = np.asarray(self.mu, dtype=float)
        if mu.ndim != 2 or mu.shape[1] != self.V - 1:
            raise ValueError(f"mu must have shape (P, {self.V - 1}), got {mu.shape}")
        if len(self.location_codes) != self.L:
            raise ValueError("locations must list exactly L codes")
        if len(self.clade_labels) != self.V or len(set(self.clade_labels)) != self.V:
            raise ValueError("clades must list V - 1 distinct labels")

    @property
    def P(self) -> int:
        return np.asarray(self.mu).shape[0]

    @property
    def location_codes(self) -> tuple[str, ...]:
        return tuple(self.locations) if self.locations is not None else DEFAULT_LOCATIONS[: self.L]

    @property
    def clade_labels(self) -> tuple[str, ...]:
        """Category labels, reference last."""
        modeled = self.clades if self.clades is not None else tuple(f"v{v + 1:02d}" for v in range(self.V - 1))
        return tuple(modeled) + (REFERENCE_LABEL,)

    @property
    def end_date(self) -> dt.date:
        return self.start_date + dt.timedelta(days=self.days - 1)

    def design(self) -> DesignMatrix:
        return DesignMatrix.for_window(self.days, self.P)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "start_date" in d and isinstance(d["start_date"], str):
            d["start_date"] = dt.date.fromisoformat(d["start_date"])
        for key in ("totals", "mu", "sigma2", "omega", "gamma", "locations", "clades"):
            if isinstance(d.get(key), list):
                d[key] = _freeze(d[key])
        return cls(**d)


def _freeze(x):
    return tuple(_freeze(v) for v in x) if isinstance(x, list) else x


def draw_truth(config: SynthConfig, rng: np.random.Generator) -> HierParams:
    K, P, L = config.V - 1, config.P, config.L
    mu = np.asarray(config.mu, dtype=float)
    sigma2 = np.asarray(config.sigma2, dtype=float)
    s2 = np.broadcast_to(sigma2[:, None], (P, K)) if sigma2.ndim == 1 else sigma2
    omega = np.asarray(config.omega, dtype=float) if config.omega is not None else np.broadcast_to(np.eye(K), (P, K, K))
    chol = np.linalg.cholesky(omega)
    if config.gamma is not None:
        gamma = np.asarray(config.gamma, dtype=float)
        if gamma.shape != (L, K, P):
            raise ValueError(f"gamma must have shape {(L, K, P)}")
    else:
        sd = np.sqrt(s2)
        z = rng.standard_normal((L, P, K))
        gamma = mu[None] + sd[None] * np.einsum("pij,lpj->lpi", chol, z)
        gamma = np.swapaxes(gamma, 1, 2)
    return HierParams(gamma, mu, sigma2, chol if config.omega is not None else None)


def prevalences(gamma: np.ndarray, X: np.ndarray) -> np.ndarray:
    """(L, T, V) prevalences for coefficients (L, K, P) and covariates (T, P)."""
    eta = np.einsum("lkp,tp->ltk", gamma, X)
    full = np.concatenate([eta, np.zeros(eta.shape[:-1] + (1,))], axis=-1)
    full -= full.max(axis=-1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=-1, keepdims=True)


def generate_counts(config: SynthConfig) -> tuple[np.ndarray, HierParams, np.random.Generator]:
    """Daily counts (L, T, V), the truth, and the generator positioned for delay draws."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    truth = draw_truth(config, rng)
    X = config.design().X
    pi = prevalences(truth.gamma, X)
    L, T, V = pi.shape
    totals = np.asarray(config.totals, dtype=float)
    if totals.ndim == 1:
        totals = totals[:, None]
    totals = np.broadcast_to(totals, (L, T))
    n = rng.poisson(totals) if config.poisson_totals else np.rint(totals).astype(np.int64)
    if config.dm_concentration is None:
        counts = rng.multinomial(n, pi)
    else:
        eta = np.einsum("lkp,tp->ltk", truth.gamma, X)
        alpha = config.dm_concentration * np.concatenate([np.exp(eta), np.ones(eta.shape[:-1] + (1,))], axis=-1)
        g = rng.standard_gamma(alpha)
        p = g / g.sum(axis=-1, keepdims=True)
        counts = rng.multinomial(n, p)
    return counts.astype(np.int64), truth, rng


def generate(config: SynthConfig) -> tuple[list[SequenceRecord], HierParams]:
    """Sequence records with report delays plus the true parameters."""
    counts, truth, rng = generate_counts(config)
    L, T, V = counts.shape
    locs, labels = config.location_codes, config.clade_labels
    p = 1.0 / (1.0 + config.delay_mean)
    records: list[SequenceRecord] = []
    dates = [config.start_date + dt.timedelta(days=t) for t in range(T)]
    for l, t, v in zip(*np.nonzero(counts)):
        c = int(counts[l, t, v])
        delays = rng.geometric(p, size=c) - 1
        day = dates[t]
        records.extend(
            SequenceRecord(locs[l], day, day + dt.timedelta(days=int(d)), labels[v]) for d in delays
        )
    return records, truth


def truth_to_dict(truth: HierParams) -> dict:
    d = {"gamma": truth.gamma.tolist(), "mu": truth.mu.tolist(), "sigma2": np.asarray(truth.sigma2).tolist()}
    if truth.omega_chol is not None:
        d["omega"] = truth.omega.tolist()
    return d
