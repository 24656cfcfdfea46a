"""Batch pipeline stages with a hash-checked manifest.

Layout under ``out_dir``::

    metadata.tsv, truth.json          simulate
    datasets/train_<date>.{csv,json}  build
    datasets/eval_<date>.{csv,json}   build
    fits/<date>/<spec>.*              fit (samples .npy, diagnostics .npy, JSON header)
    predictions/<date>/<spec>.draws.csv, <spec>.mean.csv
    scores/records.csv, scores/aggregate.csv
    report/*.csv
    manifest.json

Every stage records a fingerprint of its inputs per task and skips tasks whose
fingerprint is unchanged and whose outputs still match their recorded hashes.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .ingest import (
    AsOfDataset,
    EvaluationDataset,
    MetadataFilter,
    as_table,
    build_asof_dataset,
    build_evaluation_dataset,
    build_schedule,
    parse_metadata,
    select_clades,
    write_metadata,
)
from .model import Posterior, parse_specs
from .model.spec import DesignMatrix, ModelSpec
from .predict import (
    MeanPrevalence,
    PrevalenceDraws,
    posterior_mean,
    simulate_counts,
    thin_draws,
)
from .sampler import Draws, SamplerConfig, SamplerError, diagnostics_summary, initialize, sample
from .score import aggregate, normalize_norm, records_frame, score_cells
from .synth import SynthConfig, generate, truth_to_dict

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
DEFAULT_START = dt.date(2022, 8, 3)
DEFAULT_WEEKS = 106


class PipelineError(RuntimeError):
    pass


@dataclass
class RunConfig:
    out_dir: str = "run"
    metadata: str | None = None
    start_date: str = DEFAULT_START.isoformat()
    num_weeks: int = DEFAULT_WEEKS
    specs: str = "all"
    seed: int = 0
    workers: int = 0  # 0: all available CPUs
    norm: str = "euclidean"
    locations: list[str] | None = None
    sampler: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)
    n_stored: int = 100
    sim_reps: int = 100

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides) -> "RunConfig":
        """JSON file values over defaults, then non-``None`` overrides over both."""
        values: dict = {}
        if path is not None:
            values.update(json.loads(Path(path).read_text()))
            unknown = set(values) - {f.name for f in fields(cls)}
            if unknown:
                raise PipelineError(f"unknown config keys in {path}: {sorted(unknown)}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @property
    def root(self) -> Path:
        return Path(self.out_dir)

    @property
    def schedule(self) -> list[tuple[dt.date, dt.date]]:
        return build_schedule(dt.date.fromisoformat(str(self.start_date)), int(self.num_weeks))

    @property
    def spec_list(self) -> list[ModelSpec]:
        return parse_specs(self.specs)

    @property
    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(**self.sampler)

    @property
    def n_workers(self) -> int:
        return self.workers if self.workers and self.workers > 0 else (os.cpu_count() or 1)

    def fingerprint(self) -> str:
        keep = {k: v for k, v in asdict(self).items() if k not in {"out_dir", "workers"}}
        return _digest(keep)


# --------------------------------------------------------------------------
# hashing and manifest
# --------------------------------------------------------------------------

def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Manifest:
    """``manifest.json``: task records, artifact hashes and an append-only event log."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.path = self.root / MANIFEST
        if self.path.exists():
            self.doc = json.loads(self.path.read_text())
        else:
            self.doc = {"version": __version__, "tasks": {}, "artifacts": {}, "events": []}

    def save(self):
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.doc, indent=1, sort_keys=True) + "\n")
        tmp.replace(self.path)

    def set_run(self, config: RunConfig):
        self.doc.update({
            "version": __version__,
            "config_hash": config.fingerprint(),
            "seed": config.seed,
            "schedule": [[s.isoformat(), e.isoformat()] for s, e in config.schedule],
        })

    def rel(self, path: Path) -> str:
        return Path(path).resolve().relative_to(self.root.resolve()).as_posix()

    def record(self, key: str, fingerprint: str, status: str, outputs: list[Path] = (), **info):
        hashes = {}
        for p in outputs:
            rel = self.rel(p)
            hashes[rel] = file_hash(p)
            self.doc["artifacts"][rel] = hashes[rel]
        self.doc["tasks"][key] = {"fingerprint": fingerprint, "status": status, "outputs": hashes, **info}
        self.doc["events"].append({"task": key, "status": status})

    def up_to_date(self, key: str, fingerprint: str) -> bool:
        task = self.doc["tasks"].get(key)
        if not task or task.get("fingerprint") != fingerprint or task.get("status") not in ("ok", "skipped"):
            return False
        for rel, digest in task["outputs"].items():
            p = self.root / rel
            if not p.exists() or file_hash(p) != digest:
                return False
        return True

    def task(self, key: str) -> dict | None:
        return self.doc["tasks"].get(key)

    def verify(self) -> list[str]:
        """Artifacts whose file is missing or whose content hash changed."""
        bad = []
        for rel, digest in sorted(self.doc["artifacts"].items()):
            p = self.root / rel
            if not p.exists():
                bad.append(f"missing: {rel}")
            elif file_hash(p) != digest:
                bad.append(f"hash mismatch: {rel}")
        return bad


def task_seed(seed: int, date: dt.date, spec: ModelSpec | str, stream: int = 0) -> int:
    """Seed for one (date, spec) task, independent of scheduling order."""
    code = spec.code if isinstance(spec, ModelSpec) else spec
    ss = np.random.SeedSequence([int(seed), date.toordinal(), zlib.crc32(code.encode()), stream])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _paths(root: Path, s: dt.date) -> dict[str, Path]:
    d = s.isoformat()
    return {
        "train": root / "datasets" / f"train_{d}",
        "eval": root / "datasets" / f"eval_{d}",
        "fits": root / "fits" / d,
        "pred": root / "predictions" / d,
    }


def _need(path: Path, producer: str):
    if not path.exists():
        raise PipelineError(f"missing {path}; run `hmlrcast {producer}` first")


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def run_simulate(config: RunConfig) -> dict:
    root = config.root
    root.mkdir(parents=True, exist_ok=True)
    man = Manifest(root)
    synth = SynthConfig.from_dict({"seed": config.seed, **config.synth})
    records, truth = generate(synth)
    meta, truth_path = root / "metadata.tsv", root / "truth.json"
    with open(meta, "w", newline="") as fh:
        write_metadata(records, fh)
    truth_path.write_text(json.dumps(truth_to_dict(truth), indent=1) + "\n")
    man.record("simulate", _digest(asdict(synth)), "ok", [meta, truth_path], n_records=len(records))
    man.save()
    log.info("simulated %d records into %s", len(records), meta)
    return {"ok": 1, "failed": 0}


def _metadata_path(config: RunConfig) -> Path:
    if config.metadata:
        return Path(config.metadata)
    default = config.root / "metadata.tsv"
    if default.exists():
        return default
    raise PipelineError("no metadata given; pass --metadata or run `hmlrcast simulate` first")


def run_build(config: RunConfig) -> dict:
    root = config.root
    man = Manifest(root)
    man.set_run(config)
    meta = _metadata_path(config)
    meta_hash = file_hash(meta)
    filt = MetadataFilter(locations=tuple(config.locations)) if config.locations else MetadataFilter()
    table = None
    stats = {"ok": 0, "skipped": 0, "failed": 0, "rebuilt_files": 0}
    for s, _ in config.schedule:
        paths = _paths(root, s)
        fp = _digest({"metadata": meta_hash, "locations": filt.locations, "date": s.isoformat()})
        key = f"build/{s.isoformat()}"
        if man.up_to_date(key, fp):
            stats["skipped"] += 1
            continue
        if table is None:
            with open(meta, newline="") as fh:
                records, drops = parse_metadata(fh, filt)
            table = as_table(records, filt.locations)
            side = {"drops": dict(sorted(drops.items())), "metadata_sha256": meta_hash}
            log.info("metadata %s: %d records kept, drops %s", meta, len(records), dict(drops))
        clades = select_clades(table, s)
        train = replace(build_asof_dataset(table, s, clades, filt.locations), meta=side)
        evaluation = replace(build_evaluation_dataset(table, s, clades, filt.locations), meta=side)
        paths["train"].parent.mkdir(parents=True, exist_ok=True)
        outputs = [*train.write(paths["train"]), *evaluation.write(paths["eval"])]
        degenerate = train.is_empty or clades.degenerate
        man.record(key, fp, "ok", outputs, degenerate=bool(degenerate),
                   n_train=int(train.counts.sum()), n_eval=int(evaluation.counts.sum()),
                   clades=list(clades.labels))
        stats["ok"] += 1
        stats["rebuilt_files"] += len(outputs)
    man.save()
    return stats


def _fit_task(args) -> dict:
    """Worker body for one (date, spec) fit; returns a manifest entry."""
    train_stem, out_stem, code, sampler_kw, seed = args
    spec = ModelSpec.parse(code)
    train = AsOfDataset.read(train_stem)
    if train.is_empty or train.clades.V < 2:
        return {"status": "skipped", "reason": "degenerate dataset", "outputs": []}
    design = DesignMatrix.for_window(train.n_days, spec.P if not spec.is_baseline else 2)
    post = Posterior(spec, train, design)
    cfg = SamplerConfig(**{**sampler_kw, "seed": seed})
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
    try:
        u0 = initialize(spec, post.L, post.V, post, rng)
        draws = sample(post, post.dim, cfg, init=u0)
    except SamplerError as exc:
        return {"status": "failed", "reason": str(exc), "outputs": []}
    header = {"spec": code, "layout": post.layout.blocks(), "design": design.to_dict(),
              "submission_date": train.submission_date.isoformat(), "L": post.L, "V": post.V}
    out_stem.parent.mkdir(parents=True, exist_ok=True)
    outputs = draws.save(out_stem, header)
    return {"status": "ok", "outputs": [str(p) for p in outputs],
            "diagnostics": diagnostics_summary(draws), "design": design.to_dict()}


def run_fit(config: RunConfig) -> dict:
    root = config.root
    man = Manifest(root)
    man.set_run(config)
    sampler_kw = {k: v for k, v in asdict(config.sampler_config).items() if k != "seed"}
    jobs = []
    for s, _ in config.schedule:
        paths = _paths(root, s)
        _need(paths["train"].with_suffix(".json"), "build")
        data_hash = file_hash(paths["train"].with_suffix(".csv"))
        for spec in config.spec_list:
            seed = task_seed(config.seed, s, spec)
            key = f"fit/{s.isoformat()}/{spec.code}"
            fp = _digest({"data": data_hash, "sampler": sampler_kw, "seed": seed})
            if man.up_to_date(key, fp):
                continue
            jobs.append((key, fp, (str(paths["train"]), paths["fits"] / spec.code, spec.code, sampler_kw, seed)))

    stats = {"ok": 0, "skipped": 0, "failed": 0, "up_to_date": 0}
    stats["up_to_date"] = len(config.schedule) * len(config.spec_list) - len(jobs)

    def collect(key, fp, result):
        outputs = [Path(p) for p in result.pop("outputs")]
        status = result.pop("status")
        man.record(key, fp, status, outputs, **result)
        man.save()
        stats[status] += 1
        log.info("%s: %s", key, status)

    if config.n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.n_workers) as pool:
            futures = [(key, fp, pool.submit(_fit_task, args)) for key, fp, args in jobs]
            for key, fp, fut in futures:
                try:
                    collect(key, fp, fut.result())
                except Exception as exc:  # worker crash is recorded, not fatal
                    collect(key, fp, {"status": "failed", "reason": repr(exc), "outputs": []})
    else:
        for key, fp, args in jobs:
            try:
                result = _fit_task(args)
            except Exception as exc:
                result = {"status": "failed", "reason": repr(exc), "outputs": []}
            collect(key, fp, result)
    man.save()
    return stats


def _ok_fits(man: Manifest, config: RunConfig):
    for s, _ in config.schedule:
        for spec in config.spec_list:
            task = man.task(f"fit/{s.isoformat()}/{spec.code}")
            if task is None:
                raise PipelineError(f"no fit recorded for {s} {spec.code}; run `hmlrcast fit` first")
            if task["status"] == "ok":
                yield s, spec, task


def run_predict(config: RunConfig) -> dict:
    root = config.root
    man = Manifest(root)
    stats = {"ok": 0, "up_to_date": 0}
    for s, spec, task in _ok_fits(man, config):
        paths = _paths(root, s)
        key = f"predict/{s.isoformat()}/{spec.code}"
        fp = _digest({"fit": task["outputs"], "k": config.n_stored})
        if man.up_to_date(key, fp):
            stats["up_to_date"] += 1
            continue
        train = AsOfDataset.read(paths["train"])
        draws, _ = Draws.load(paths["fits"] / spec.code)
        stored = thin_draws(draws, spec, train, k=config.n_stored)
        mean = posterior_mean(draws, spec, train)
        paths["pred"].mkdir(parents=True, exist_ok=True)
        out_draws = paths["pred"] / f"{spec.code}.draws.csv"
        out_mean = paths["pred"] / f"{spec.code}.mean.csv"
        stored.to_frame().to_csv(out_draws, index=False, lineterminator="\n")
        mean.to_frame().to_csv(out_mean, index=False, lineterminator="\n")
        man.record(key, fp, "ok", [out_draws, out_mean], draw_index=stored.draw_index.tolist())
        stats["ok"] += 1
    man.save()
    return stats


def load_predictions(root: Path, s: dt.date, code: str, evaluation: EvaluationDataset):
    paths = _paths(Path(root), s)
    f_draws = paths["pred"] / f"{code}.draws.csv"
    f_mean = paths["pred"] / f"{code}.mean.csv"
    _need(f_draws, "predict")
    args = (s, evaluation.locations, evaluation.dates, evaluation.clades.labels)
    stored = PrevalenceDraws.from_frame(pd.read_csv(f_draws, float_precision="round_trip"), *args)
    mean = MeanPrevalence.from_frame(pd.read_csv(f_mean, float_precision="round_trip"), *args)
    return stored, mean


def run_score(config: RunConfig) -> dict:
    root = config.root
    man = Manifest(root)
    norm = normalize_norm(config.norm)
    records = []
    for s, spec, _ in _ok_fits(man, config):
        paths = _paths(root, s)
        _need(paths["eval"].with_suffix(".json"), "build")
        evaluation = AsOfDataset.read(paths["eval"])
        stored, mean = load_predictions(root, s, spec.code, evaluation)
        seed = task_seed(config.seed, s, spec, stream=1)
        predictive = simulate_counts(stored, evaluation, reps=config.sim_reps, seed=seed)
        records.extend(score_cells(predictive, mean, evaluation, spec.code, norm, seed=seed))
    out = root / "scores"
    out.mkdir(parents=True, exist_ok=True)
    rec = records_frame(records)
    agg = aggregate(rec)
    rec.to_csv(out / "records.csv", index=False, lineterminator="\n")
    agg.to_csv(out / "aggregate.csv", index=False, lineterminator="\n")
    man.record("score", _digest({"norm": norm, "seed": config.seed, "reps": config.sim_reps}), "ok",
               [out / "records.csv", out / "aggregate.csv"], n_records=len(rec), norm=norm)
    man.save()
    return {"ok": 1, "records": len(rec)}


def location_volume(root: Path, config: RunConfig) -> pd.Series:
    """Total evaluation-vintage sequences per location over the schedule."""
    total: dict[str, int] = {}
    for s, _ in config.schedule:
        evaluation = AsOfDataset.read(_paths(root, s)["eval"])
        for loc, n in zip(evaluation.locations, evaluation.counts.sum(axis=(1, 2))):
            total[loc] = total.get(loc, 0) + int(n)
    return pd.Series(total, dtype="int64")


def run_report(config: RunConfig) -> dict:
    root = config.root
    man = Manifest(root)
    agg_path = root / "scores" / "aggregate.csv"
    _need(agg_path, "score")
    agg = pd.read_csv(agg_path, float_precision="round_trip")
    out = root / "report"
    out.mkdir(parents=True, exist_ok=True)

    by_date = agg[agg["level"] == "model_date"]
    models = sorted(by_date["model"].unique())
    others = [m for m in models if m != "baseline"] or models
    series = (by_date[by_date["model"].isin(others)].groupby("submission_date")["log_rel_es"]
              .agg(["median", "min", "max", "count"]).reset_index()
              .rename(columns={"count": "n_models"}))
    series.to_csv(out / "log_relative_by_date.csv", index=False, lineterminator="\n")

    heat_date = by_date.pivot(index="model", columns="submission_date", values="log_rel_es").sort_index()
    heat_date.to_csv(out / "heatmap_by_date.csv", lineterminator="\n")

    by_loc = agg[agg["level"] == "model_location"]
    volume = location_volume(root, config)
    order = sorted(volume.index, key=lambda c: (-volume[c], c))
    order = [c for c in order if c in set(by_loc["location"])]
    heat_loc = by_loc.pivot(index="model", columns="location", values="log_rel_es").reindex(columns=order).sort_index()
    heat_loc.to_csv(out / "heatmap_by_location.csv", lineterminator="\n")
    pd.DataFrame({"location": order, "n_sequences": [int(volume[c]) for c in order]}).to_csv(
        out / "location_volume.csv", index=False, lineterminator="\n")

    outputs = [out / n for n in ("log_relative_by_date.csv", "heatmap_by_date.csv",
                                 "heatmap_by_location.csv", "location_volume.csv")]
    man.record("report", file_hash(agg_path), "ok", outputs)
    man.save()
    return {"ok": 1}


def run_verify(config: RunConfig) -> dict:
    man = Manifest(config.root)
    if not man.path.exists():
        raise PipelineError(f"no manifest in {config.root}")
    bad = man.verify()
    for line in bad:
        log.error(line)
    return {"checked": len(man.doc["artifacts"]), "failed": len(bad)}
