"""Energy and Brier scores, horizon sets, and pooled aggregation against a baseline."""

from __future__ import annotations

import datetime as dt
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np
import pandas as pd
from scipy.spatial.distance import pdist

from .ingest import EvaluationDataset
from .predict import cell_seed

EUCLIDEAN = "euclidean"
SUM_OF_SQUARES = "sum_of_squares"
NORMS = (EUCLIDEAN, SUM_OF_SQUARES)
PAIRWISE_SUBSAMPLE = 500
MAX_DISTINCT_EXACT = 2000


def normalize_norm(name: str) -> str:
    """Accept ``paper`` as an alias of the sum-of-squares variant."""
    name = name.strip().lower()
    if name == "paper":
        return SUM_OF_SQUARES
    if name not in NORMS:
        raise ValueError(f"unknown norm {name!r}; expected one of {NORMS + ('paper',)}")
    return name


def _pairwise_mean_distance(F: np.ndarray) -> float:
    """Mean Euclidean distance over pairs of distinct rows."""
    if F.shape[0] < 2:
        return 0.0
    return float(pdist(F).mean())


def _weighted_pair_sum(U: np.ndarray, w: np.ndarray) -> float:
    """``sum_{i<j} w_i w_j ||U_i - U_j||`` over distinct rows ``U`` with multiplicities ``w``."""
    if U.shape[0] < 2:
        return 0.0
    i, j = np.triu_indices(U.shape[0], 1)
    return float(np.dot(pdist(U), w[i] * w[j]))


def energy_score(samples, observed, norm: str = EUCLIDEAN, *, exact: bool = False,
                 subsample: int = PAIRWISE_SUBSAMPLE,
                 rng: np.random.Generator | int | None = 0) -> float:
    """Sample-based energy score of ``samples`` (n, V) against ``observed`` (V,).

    ``mean ||z - f|| - 1/(2 n^2) sum ||f - f'||``.  Under the Euclidean norm the
    pairwise term is exact when ``exact`` is set, when ``n <= subsample``, or
    when the samples hold at most ``MAX_DISTINCT_EXACT`` distinct rows (count
    vectors repeat a lot).  Otherwise it is estimated without bias from
    ``subsample`` rows drawn without replacement.  The sum-of-squares variant is
    evaluated exactly from first and second moments.
    """
    norm = normalize_norm(norm)
    F = np.asarray(samples, dtype=float)
    z = np.asarray(observed, dtype=float)
    if F.ndim != 2 or F.shape[0] == 0:
        raise ValueError("energy score needs a non-empty (n, V) sample array")
    if F.shape[1] != z.shape[-1]:
        raise ValueError(f"sample length {F.shape[1]} != observed length {z.shape[-1]}")
    n = F.shape[0]
    if norm == SUM_OF_SQUARES:
        accuracy = float(np.mean(np.sum((F - z) ** 2, axis=1)))
        spread = float(np.mean(np.sum((F - F.mean(axis=0)) ** 2, axis=1)))
        return accuracy - spread
    accuracy = float(np.mean(np.sqrt(np.sum((F - z) ** 2, axis=1))))
    if exact or n <= subsample:
        return accuracy - 0.5 * (1.0 - 1.0 / n) * _pairwise_mean_distance(F)
    U, w = np.unique(F, axis=0, return_counts=True)
    if U.shape[0] <= MAX_DISTINCT_EXACT:
        return accuracy - _weighted_pair_sum(U, w.astype(float)) / n**2
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.PCG64(rng))
    pair_mean = _pairwise_mean_distance(F[rng.choice(n, subsample, replace=False)])
    return accuracy - 0.5 * (1.0 - 1.0 / n) * pair_mean


def brier_score(mean_prev, observed_prev) -> float:
    """Half the summed per-category quadratic loss between ``mean_prev`` and ``observed_prev``."""
    q = np.asarray(mean_prev, dtype=float)
    p = np.asarray(observed_prev, dtype=float)
    if q.shape != p.shape:
        raise ValueError(f"shape mismatch {q.shape} vs {p.shape}")
    return float(0.5 * np.sum(p * (q - 1.0) ** 2 + (1.0 - p) * q**2))


def horizon_set(evaluation: EvaluationDataset, location) -> np.ndarray:
    """Horizons at which the evaluation vintage has at least one sequence for ``location``."""
    l = location if isinstance(location, (int, np.integer)) else evaluation.locations.index(location)
    return evaluation.horizons[evaluation.totals[l] > 0]


@dataclass(frozen=True)
class ScoreRecord:
    model: str
    location: str
    submission_date: dt.date
    horizon: int
    energy_score: float
    brier_score: float


RECORD_COLUMNS = [f for f in ScoreRecord.__dataclass_fields__]


def records_frame(records: Iterable[ScoreRecord]) -> pd.DataFrame:
    rows = [asdict(r) for r in records]
    df = pd.DataFrame(rows, columns=RECORD_COLUMNS)
    df["submission_date"] = df["submission_date"].map(lambda d: d.isoformat() if isinstance(d, dt.date) else d)
    return df.sort_values(["model", "location", "submission_date", "horizon"], kind="stable").reset_index(drop=True)


LEVELS = {
    "model_location_date": ["model", "location", "submission_date"],
    "model_location": ["model", "location"],
    "model_date": ["model", "submission_date"],
    "model": ["model"],
}
AGG_COLUMNS = ["level", "model", "location", "submission_date", "n_cells", "es_mean", "es_median",
               "bs_mean", "bs_median", "log_rel_es", "log_rel_bs"]


def aggregate(records, baseline: str = "baseline") -> pd.DataFrame:
    """Pooled mean/median scores per aggregation level with log ratios to ``baseline``.

    Every (location, date, horizon) cell counts once in every pool.  Log
    relatives are ``ln(mean_model / mean_baseline)`` over the same key and are
    left empty where the baseline is absent or its mean is 0.
    """
    df = records if isinstance(records, pd.DataFrame) else records_frame(records)
    out = []
    for level, keys in LEVELS.items():
        if df.empty:
            break
        g = df.groupby(keys, sort=True)
        t = pd.DataFrame({
            "n_cells": g.size(),
            "es_mean": g["energy_score"].mean(),
            "es_median": g["energy_score"].median(),
            "bs_mean": g["brier_score"].mean(),
            "bs_median": g["brier_score"].median(),
        }).reset_index()
        rest = keys[1:]
        base = t[t["model"] == baseline].drop(columns=["model"])
        if rest:
            t = t.merge(base[rest + ["es_mean", "bs_mean"]], on=rest, how="left", suffixes=("", "_base"))
        else:
            if len(base):
                t["es_mean_base"] = base["es_mean"].iloc[0]
                t["bs_mean_base"] = base["bs_mean"].iloc[0]
            else:
                t["es_mean_base"] = np.nan
                t["bs_mean_base"] = np.nan
        for s in ("es", "bs"):
            num, den = t[f"{s}_mean"].to_numpy(float), t[f"{s}_mean_base"].to_numpy(float)
            ok = (den > 0) & (num > 0)
            rel = np.full(len(t), np.nan)
            rel[ok] = np.log(num[ok] / den[ok])
            t[f"log_rel_{s}"] = rel
        t["level"] = level
        out.append(t.reindex(columns=AGG_COLUMNS))
    if not out:
        return pd.DataFrame(columns=AGG_COLUMNS)
    table = pd.concat(out, ignore_index=True)
    return table.sort_values(["level", "model", "location", "submission_date"], kind="stable",
                             na_position="first").reset_index(drop=True)


def score_cells(predictive, mean_prev, evaluation: EvaluationDataset, model: str, norm: str = EUCLIDEAN,
                seed: int = 0, exact: bool = False) -> list[ScoreRecord]:
    """Score every (location, horizon) cell in the horizon sets of one submission date."""
    records = []
    counts = evaluation.counts
    totals = evaluation.totals
    for l, loc in enumerate(evaluation.locations):
        for t, h in enumerate(evaluation.horizons):
            n = int(totals[l, t])
            if n == 0:
                continue
            F = predictive.cell(l, t)
            z = counts[l, t]
            rng = np.random.Generator(np.random.PCG64(cell_seed(seed, l, t, 1)))
            es = energy_score(F, z, norm, exact=exact, rng=rng)
            bs = brier_score(mean_prev.values[l, t], z / n)
            records.append(ScoreRecord(model, loc, evaluation.submission_date, int(h), es, bs))
    return records
