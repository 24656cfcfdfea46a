"""Prevalence nowcasts/forecasts from posterior draws and predictive count sets."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .ingest import FIRST_HORIZON, LAST_HORIZON, AsOfDataset, EvaluationDataset
from .model.spec import DesignMatrix, ModelSpec
from .model.transform import BaselineParams, layout
from .sampler import Draws

N_STORED = 100
SIM_REPS = 100


@dataclass(frozen=True)
class TargetGrid:
    submission_date: dt.date
    first: int = FIRST_HORIZON
    last: int = LAST_HORIZON

    @property
    def horizons(self) -> np.ndarray:
        return np.arange(self.first, self.last + 1)

    @property
    def dates(self) -> list[dt.date]:
        return [self.submission_date + dt.timedelta(days=int(h)) for h in self.horizons]

    def __len__(self) -> int:
        return self.last - self.first + 1

    def day_indices(self, train: AsOfDataset) -> np.ndarray:
        """Raw day indices of the target dates relative to the training window start."""
        return self.horizons + (self.submission_date - train.start_date).days

    def design(self, train: AsOfDataset, P: int) -> DesignMatrix:
        return DesignMatrix.for_window(train.n_days, P).at(self.day_indices(train))


def _softmax_ref(eta: np.ndarray) -> np.ndarray:
    """Append the reference logit 0 and normalise along the last axis."""
    full = np.concatenate([eta, np.zeros(eta.shape[:-1] + (1,))], axis=-1)
    full -= full.max(axis=-1, keepdims=True)
    np.exp(full, out=full)
    full /= full.sum(axis=-1, keepdims=True)
    return full


def _X(X_target, P: int) -> np.ndarray:
    if isinstance(X_target, DesignMatrix):
        X_target = X_target.with_degree(P).X
    return np.asarray(X_target, dtype=float)[:, :P]


def prevalence_from_params(params, spec: ModelSpec, X_target, n_locations: int | None = None,
                           latent_rng: np.random.Generator | None = None) -> np.ndarray:
    """Prevalences ``pi[l, t, v]`` at the rows of ``X_target``.

    The baseline has no location dimension; pass ``n_locations`` to broadcast
    it.  For Dirichlet-multinomial specs the default uses the concentration
    means; with ``latent_rng`` each cell instead draws ``pi ~ Dirichlet(exp(eta), 1)``.
    """
    if isinstance(params, BaselineParams):
        X = _X(X_target, 2)
        pi = _softmax_ref(X @ np.asarray(params.gamma_tilde).T)
        return np.broadcast_to(pi, (n_locations or 1,) + pi.shape).copy()
    X = _X(X_target, np.asarray(params.gamma).shape[-1])
    eta = np.einsum("lkp,tp->ltk", params.gamma, X)
    if latent_rng is not None and spec.is_dm:
        return _latent_dirichlet(eta, latent_rng)
    return _softmax_ref(eta)


def _latent_dirichlet(eta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    alpha = np.concatenate([np.exp(eta), np.ones(eta.shape[:-1] + (1,))], axis=-1)
    g = rng.standard_gamma(alpha)
    return g / g.sum(axis=-1, keepdims=True)


def prevalence_batch(samples: np.ndarray, spec: ModelSpec, L: int, V: int, X_target,
                     latent_rng: np.random.Generator | None = None) -> np.ndarray:
    """Prevalences for a block of unconstrained draws, shape (n, L, T, V)."""
    lay = layout(spec, L, V)
    K, P = lay.K, lay.P
    X = _X(X_target, P)
    samples = np.atleast_2d(samples)
    n = samples.shape[0]
    if lay.baseline:
        gt = samples[:, lay.gamma].reshape(n, K, 2)
        pi = _softmax_ref(np.einsum("nkp,tp->ntk", gt, X))
        return np.broadcast_to(pi[:, None], (n, L) + pi.shape[1:]).copy()
    gamma = samples[:, lay.gamma].reshape(n, L, K, P)
    eta = np.einsum("nlkp,tp->nltk", gamma, X)
    if latent_rng is not None and spec.is_dm:
        return _latent_dirichlet(eta, latent_rng)
    return _softmax_ref(eta)


def thin_indices(n: int, k: int = N_STORED) -> np.ndarray:
    """``k`` evenly spaced indices over ``range(n)``, first and last included."""
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        raise ValueError(f"need at least {k} retained draws, have {n}")
    if k == 1:
        return np.zeros(1, dtype=int)
    return np.rint(np.linspace(0, n - 1, k)).astype(int)


@dataclass(frozen=True, eq=False)
class PrevalenceDraws:
    """Stored prevalence sample set: ``values[d, l, t, v]``."""

    model: str
    submission_date: dt.date
    locations: tuple[str, ...]
    dates: tuple[dt.date, ...]
    labels: tuple[str, ...]
    values: np.ndarray
    draw_index: np.ndarray

    @property
    def n_draws(self) -> int:
        return self.values.shape[0]

    def cell(self, l: int, t: int) -> np.ndarray:
        return self.values[:, l, t, :]

    def to_frame(self):
        d, L, T, V = self.values.shape
        idx = np.indices((L, T, V, d)).reshape(4, -1)
        vals = np.transpose(self.values, (1, 2, 3, 0)).ravel()
        return pd.DataFrame({
            "model": self.model,
            "location": np.asarray(self.locations)[idx[0]],
            "target_date": np.asarray([x.isoformat() for x in self.dates])[idx[1]],
            "clade": np.asarray(self.labels)[idx[2]],
            "draw_index": self.draw_index[idx[3]],
            "value": vals,
        })

    @classmethod
    def from_frame(cls, df, submission_date: dt.date, locations, dates, labels) -> "PrevalenceDraws":
        locations, labels = tuple(locations), tuple(labels)
        dates = tuple(dates)
        draw_index = np.unique(df["draw_index"].to_numpy())
        shape = (len(locations), len(dates), len(labels), len(draw_index))
        if len(df) != np.prod(shape):
            raise ValueError(f"prediction table has {len(df)} rows, expected {np.prod(shape)}")
        df = df.sort_values(["location", "target_date", "clade", "draw_index"], kind="stable",
                            key=_order_key(locations, dates, labels))
        values = np.transpose(df["value"].to_numpy(dtype=float).reshape(shape), (3, 0, 1, 2))
        model = str(df["model"].iloc[0]) if len(df) else ""
        return cls(model, submission_date, locations, dates, labels, np.ascontiguousarray(values), draw_index)


def _order_key(locations, dates, labels):
    orders = {
        "location": {c: i for i, c in enumerate(locations)},
        "target_date": {d.isoformat(): i for i, d in enumerate(dates)},
        "clade": {c: i for i, c in enumerate(labels)},
    }

    def key(col):
        if col.name in orders:
            return col.map(orders[col.name])
        return col

    return key


@dataclass(frozen=True, eq=False)
class MeanPrevalence:
    model: str
    submission_date: dt.date
    locations: tuple[str, ...]
    dates: tuple[dt.date, ...]
    labels: tuple[str, ...]
    values: np.ndarray  # (L, T, V)

    def to_frame(self):
        L, T, V = self.values.shape
        idx = np.indices((L, T, V)).reshape(3, -1)
        return pd.DataFrame({
            "model": self.model,
            "location": np.asarray(self.locations)[idx[0]],
            "target_date": np.asarray([x.isoformat() for x in self.dates])[idx[1]],
            "clade": np.asarray(self.labels)[idx[2]],
            "value": self.values.ravel(),
        })

    @classmethod
    def from_frame(cls, df, submission_date, locations, dates, labels) -> "MeanPrevalence":
        locations, labels, dates = tuple(locations), tuple(labels), tuple(dates)
        shape = (len(locations), len(dates), len(labels))
        df = df.sort_values(["location", "target_date", "clade"], kind="stable",
                            key=_order_key(locations, dates, labels))
        model = str(df["model"].iloc[0]) if len(df) else ""
        return cls(model, submission_date, locations, dates, labels,
                   df["value"].to_numpy(dtype=float).reshape(shape))


def _context(train: AsOfDataset, grid: TargetGrid | None):
    grid = grid or TargetGrid(train.submission_date)
    return grid, len(train.locations), train.clades.V


def thin_draws(draws: Draws, spec: ModelSpec, train: AsOfDataset, k: int = N_STORED,
               grid: TargetGrid | None = None, latent_rng: np.random.Generator | None = None) -> PrevalenceDraws:
    """Stored prevalence set built from ``k`` evenly spaced retained draws."""
    grid, L, V = _context(train, grid)
    idx = thin_indices(len(draws), k)
    X = grid.design(train, spec.P if not spec.is_baseline else 2)
    values = prevalence_batch(draws.samples[idx], spec, L, V, X, latent_rng)
    return PrevalenceDraws(spec.code, grid.submission_date, tuple(train.locations), tuple(grid.dates),
                           train.clades.labels, values, idx)


def posterior_mean(draws: Draws, spec: ModelSpec, train: AsOfDataset, grid: TargetGrid | None = None,
                   chunk: int = 256) -> MeanPrevalence:
    """Average prevalence over every retained draw (not only the stored subset)."""
    if len(draws) == 0:
        raise ValueError("no draws")
    grid, L, V = _context(train, grid)
    X = grid.design(train, spec.P if not spec.is_baseline else 2)
    total = np.zeros((L, len(grid), V))
    for a in range(0, len(draws), chunk):
        total += prevalence_batch(draws.samples[a:a + chunk], spec, L, V, X).sum(axis=0)
    return MeanPrevalence(spec.code, grid.submission_date, tuple(train.locations), tuple(grid.dates),
                          train.clades.labels, total / len(draws))


def cell_seed(seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in keys)])


@dataclass(frozen=True, eq=False)
class PredictiveCounts:
    """Lazily simulated count sets; ``cell(l, t)`` returns a (|C|, V) array.

    Each cell uses its own generator derived from ``(seed, l, t)``, so a cell's
    content does not depend on which other cells were generated first.
    """

    prevs: PrevalenceDraws
    totals: np.ndarray  # (L, T) evaluation totals
    seed: int
    reps: int = SIM_REPS

    def size(self, l: int, t: int) -> int:
        return self.prevs.n_draws * self.reps if self.totals[l, t] > 0 else 0

    def cell(self, l: int, t: int) -> np.ndarray:
        n = int(self.totals[l, t])
        V = self.prevs.values.shape[-1]
        if n == 0:
            return np.zeros((0, V), dtype=np.int64)
        rng = np.random.Generator(np.random.PCG64(cell_seed(self.seed, l, t)))
        p = self.prevs.cell(l, t)
        out = rng.multinomial(n, p, size=(self.reps, p.shape[0]))
        return out.reshape(-1, V)


def simulate_counts(prevs: PrevalenceDraws, evaluation: EvaluationDataset, reps: int = SIM_REPS,
                    seed: int = 0) -> PredictiveCounts:
    if tuple(evaluation.locations) != tuple(prevs.locations) or evaluation.clades.labels != tuple(prevs.labels):
        raise ValueError("prevalence draws and evaluation data disagree on locations or clades")
    if list(evaluation.dates) != list(prevs.dates):
        raise ValueError("prevalence draws and evaluation data cover different target dates")
    return PredictiveCounts(prevs, evaluation.totals, seed, reps)
