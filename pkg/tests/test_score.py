import datetime as dt
import itertools

import numpy as np
import pandas as pd
import pytest

from hmlrcast.ingest import CladeSet, EvaluationDataset
from hmlrcast.score import (
    ScoreRecord,
    aggregate,
    brier_score,
    energy_score,
    horizon_set,
    normalize_norm,
    records_frame,
)

S1, S2 = dt.date(2023, 6, 7), dt.date(2023, 6, 14)


def es_oracle(F, z):
    n = len(F)
    first = sum(np.sqrt(np.sum((z - f) ** 2)) for f in F) / n
    second = sum(np.sqrt(np.sum((f - g) ** 2)) for f in F for g in F) / (2 * n * n)
    return first - second


def brier_oracle(q, p):
    total = 0.0
    for qv, pv in zip(q, p):
        total += pv * (qv - 1.0) ** 2 + (1.0 - pv) * qv * qv
    return total / 2.0


class TestEnergyScore:
    def test_trivial_examples(self):
        z = np.array([3.0, 1.0, 0.0])
        assert energy_score(np.tile(z, (5, 1)), z) == 0.0
        assert energy_score(np.tile(z, (5, 1)), z, "sum_of_squares") == 0.0
        assert energy_score([[1, 0]], [0, 1]) == pytest.approx(np.sqrt(2), abs=1e-15)
        assert energy_score([[1, 0]], [0, 1], "paper") == pytest.approx(2.0, abs=1e-15)

    @pytest.mark.parametrize("n,V", [(1, 2), (7, 3), (200, 4), (150, 10)])
    def test_matches_double_sum(self, n, V):
        rng = np.random.default_rng(n * 31 + V)
        F = rng.multinomial(40, rng.dirichlet(np.ones(V)), size=n).astype(float)
        z = rng.multinomial(40, rng.dirichlet(np.ones(V))).astype(float)
        assert abs(energy_score(F, z) - es_oracle(F, z)) < 1e-10

    def test_sum_of_squares_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            F = rng.normal(scale=10, size=(rng.integers(1, 300), 5))
            z = rng.normal(scale=10, size=5)
            es = energy_score(F, z, "sum_of_squares")
            assert abs(es - np.sum((z - F.mean(axis=0)) ** 2)) < 1e-12 * max(1.0, abs(es))

    def test_sharpness_term_positive(self):
        rng = np.random.default_rng(2)
        F = rng.integers(0, 20, size=(50, 3)).astype(float)
        z = np.array([5.0, 5.0, 5.0])
        accuracy = np.mean(np.linalg.norm(F - z, axis=1))
        assert energy_score(F, z) < accuracy

    def test_repeated_rows_scored_exactly(self):
        rng = np.random.default_rng(8)
        F = rng.multinomial(30, [0.2, 0.3, 0.5], size=10_000).astype(float)
        z = np.array([5.0, 10.0, 15.0])
        assert abs(energy_score(F, z) - energy_score(F, z, exact=True)) < 1e-10
        tiny = rng.multinomial(1, [0.2, 0.3, 0.5], size=10_000)
        assert energy_score(tiny, [0, 1, 0]) >= 0.0

    def test_subsample_unbiased(self):
        rng = np.random.default_rng(3)
        F = rng.normal(size=(3000, 3))
        z = np.array([0.5, 0.0, -0.5])
        exact = energy_score(F, z, exact=True)
        assert energy_score(F, z, rng=7) == energy_score(F, z, rng=7)
        est = np.array([energy_score(F, z, rng=k) for k in range(60)])
        # the subsampled pairwise term is unbiased
        assert abs(est.mean() - exact) < 3 * est.std(ddof=1) / np.sqrt(len(est))

    def test_propriety_smoke(self):
        rng = np.random.default_rng(4)
        p = np.array([0.5, 0.3, 0.2])
        shifted = np.array([0.35, 0.35, 0.3])
        good, bad = [], []
        for _ in range(200):
            z = rng.multinomial(50, p)
            good.append(energy_score(rng.multinomial(50, p, size=300), z))
            bad.append(energy_score(rng.multinomial(50, shifted, size=300), z))
        diff = np.array(bad) - np.array(good)
        assert diff.mean() > 3 * diff.std(ddof=1) / np.sqrt(len(diff))

    def test_errors(self):
        with pytest.raises(ValueError):
            energy_score(np.zeros((0, 3)), np.zeros(3))
        with pytest.raises(ValueError):
            energy_score(np.zeros((4, 2)), np.zeros(3))
        with pytest.raises(ValueError):
            normalize_norm("manhattan")
        assert normalize_norm("Paper") == "sum_of_squares"


class TestBrier:
    def test_examples(self):
        assert brier_score([0.5, 0.5], [1.0, 0.0]) == 0.25
        assert brier_score([0, 1, 0], [0, 1, 0]) == 0.0

    def test_oracle(self):
        rng = np.random.default_rng(5)
        for V in range(2, 11):
            q, p = rng.dirichlet(np.ones(V)), rng.dirichlet(np.ones(V))
            assert abs(brier_score(q, p) - brier_oracle(q, p)) < 1e-14

    def test_bounds(self):
        rng = np.random.default_rng(6)
        for _ in range(500):
            V = rng.integers(2, 8)
            bs = brier_score(rng.dirichlet(np.full(V, 0.3)), rng.dirichlet(np.full(V, 0.3)))
            assert 0.0 <= bs <= 1.0

    def test_zero_only_on_matching_one_hot(self):
        eye = np.eye(4)
        for i, j in itertools.product(range(4), range(4)):
            assert (brier_score(eye[i], eye[j]) == 0.0) == (i == j)
        assert brier_score(np.full(4, 0.25), np.full(4, 0.25)) > 0.0


def eval_with(totals):
    totals = np.asarray(totals)
    counts = np.zeros(totals.shape + (2,), dtype=int)
    counts[..., 0] = totals
    return EvaluationDataset(S1, S1 + dt.timedelta(days=91), S1 - dt.timedelta(days=31),
                             tuple(f"L{i}" for i in range(totals.shape[0])), CladeSet(("A",)), counts)


class TestHorizonSet:
    def test_cases(self):
        totals = np.zeros((3, 42), dtype=int)
        totals[0] = 5
        totals[2, 31] = 1
        ev = eval_with(totals)
        assert len(horizon_set(ev, "L0")) == 42
        assert len(horizon_set(ev, 1)) == 0
        assert horizon_set(ev, "L2").tolist() == [0]


def rec(model, loc, s, h, es, bs=0.1):
    return ScoreRecord(model, loc, s, h, es, bs)


class TestAggregate:
    def test_single_record(self):
        agg = aggregate([rec("baseline", "AL", S1, 0, 2.5, 0.2)])
        assert set(agg["level"]) == {"model_location_date", "model_location", "model_date", "model"}
        assert (agg["es_mean"] == 2.5).all() and (agg["es_median"] == 2.5).all()
        assert (agg["bs_mean"] == 0.2).all() and (agg["log_rel_es"] == 0.0).all()

    def test_identical_to_baseline(self):
        rng = np.random.default_rng(7)
        base = [rec("baseline", l, s, h, rng.uniform(1, 3), rng.uniform(0, 1))
                for l in ("AL", "AK") for s in (S1, S2) for h in range(-3, 2)]
        copy = [ScoreRecord("SLM", *[getattr(r, f) for f in ("location", "submission_date", "horizon",
                                                             "energy_score", "brier_score")]) for r in base]
        agg = aggregate(base + copy)
        assert np.allclose(agg["log_rel_es"], 0.0, atol=0) and np.allclose(agg["log_rel_bs"], 0.0, atol=0)

    @pytest.fixture
    def fixture_records(self):
        # 2 locations x 2 dates with |H| = 3, 1, 2, 4 and hand-picked scores
        cells = {("AL", S1): [1.0, 2.0, 3.0], ("AL", S2): [4.0],
                 ("AK", S1): [2.0, 6.0], ("AK", S2): [1.0, 1.0, 1.0, 5.0]}
        out = []
        for (loc, s), scores in cells.items():
            for h, es in enumerate(scores):
                out.append(rec("SLM", loc, s, h, es, es / 10))
                out.append(rec("baseline", loc, s, h, 2.0, 0.2))
        return out

    def test_pooled_means(self, fixture_records):
        agg = aggregate(fixture_records).set_index(["level", "model", "location", "submission_date"])
        slm = lambda lv, loc=np.nan, s=np.nan: agg.loc[(lv, "SLM", loc, s)]  # noqa: E731
        # ES_m...: all ten cells pooled
        assert slm("model")["es_mean"] == pytest.approx(26.0 / 10, abs=1e-15)
        assert slm("model")["es_median"] == 2.0
        assert slm("model")["n_cells"] == 10
        # ES_ml..: AL pools 4 cells, AK pools 6
        assert slm("model_location", "AL")["es_mean"] == pytest.approx(10.0 / 4, abs=1e-15)
        assert slm("model_location", "AK")["es_mean"] == pytest.approx(16.0 / 6, abs=1e-15)
        # ES_m.s.: S1 pools 5 cells, S2 pools 5
        assert slm("model_date", s=S1.isoformat())["es_mean"] == pytest.approx(14.0 / 5, abs=1e-15)
        assert slm("model_date", s=S2.isoformat())["es_mean"] == pytest.approx(12.0 / 5, abs=1e-15)
        assert slm("model_date", s=S2.isoformat())["es_median"] == 1.0
        assert slm("model_location_date", "AK", S2.isoformat())["es_median"] == 1.0
        assert slm("model_location", "AL")["log_rel_es"] == pytest.approx(np.log(2.5 / 2.0), abs=1e-15)
        assert slm("model")["log_rel_bs"] == pytest.approx(np.log(0.26 / 0.2), abs=1e-14)

    def test_consistency(self, fixture_records):
        agg = aggregate(fixture_records)
        loc = agg[(agg["level"] == "model_location") & (agg["model"] == "SLM")]
        top = agg[(agg["level"] == "model") & (agg["model"] == "SLM")]["es_mean"].iloc[0]
        weighted = np.sum(loc["es_mean"] * loc["n_cells"]) / loc["n_cells"].sum()
        assert weighted == pytest.approx(top, rel=1e-14)

    def test_missing_or_zero_baseline(self):
        agg = aggregate([rec("SLM", "AL", S1, 0, 1.0), rec("baseline", "AK", S1, 0, 0.0)])
        slm_loc = agg[(agg["model"] == "SLM") & (agg["level"] == "model_location")]
        assert slm_loc["log_rel_es"].isna().all()
        assert agg[(agg["model"] == "SLM") & (agg["level"] == "model_date")]["log_rel_es"].isna().all()

    def test_records_frame_order(self):
        rows = [rec("SLM", "AL", S2, 1, 1.0), rec("SLM", "AL", S1, 3, 1.0), rec("CCD", "AK", S1, 0, 1.0),
                rec("SLM", "AK", S1, -2, 1.0), rec("SLM", "AL", S1, -5, 1.0)]
        df = records_frame(rows)
        keys = list(zip(df["model"], df["location"], df["submission_date"], df["horizon"]))
        assert keys == sorted(keys)
        assert isinstance(df, pd.DataFrame) and len(df) == 5
