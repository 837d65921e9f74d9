"""Cross-validated fusion experiments and tabular reports.

A run trains every (backbone, strategy) cell on every fold for every repeat,
persists the raw per-volume-averaged Dice values to ``raw.csv`` and only then
aggregates. Cell mean = mean over repeats of the mean over folds.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .data import MultiModalVolume, generate_synthetic, parse_polarity, read_dataset
from .errors import ConfigurationError, OctofuseError
from .fusion import FusionStrategy, ModelSpec
from .nn_blocks import EncoderSpec
from .training import TrainConfig, foreground_classes, train_model

log = logging.getLogger(__name__)

RAW_COLUMNS = ["cell", "fold", "repeat", "class", "dice"]
MISSING = "—"


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def tiny_densenet() -> EncoderSpec:
    return EncoderSpec("densenet", 3, 4, (6, 8, 10, 12), 2, (1, 1, 1, 1))


DEFAULT_BACKBONES = {
    "densenet": tiny_densenet(),
    "vgg": EncoderSpec("vgg", 3, 4, (6, 8, 10, 12), 2, (1, 1, 1, 1)),
    "resnet": EncoderSpec("resnet", 3, 4, (6, 8, 10, 12), 2, (1, 1, 1, 1)),
}


@dataclass(frozen=True)
class Cell:
    family: str
    strategy: FusionStrategy

    @property
    def key(self) -> str:
        return f"{self.family}/{self.strategy}"

    @classmethod
    def parse(cls, text: str) -> "Cell":
        family, _, strategy = text.partition("/")
        if not strategy:
            raise ConfigurationError(f"cell {text!r} must look like 'family/strategy'")
        return cls(family.strip(), FusionStrategy.parse(strategy))


@dataclass
class ExperimentConfig:
    cells: list[Cell]
    data_path: str | None = None
    generate: dict | None = None
    backbones: dict[str, EncoderSpec] = field(default_factory=lambda: dict(DEFAULT_BACKBONES))
    folds: int = 5
    repeats: int = 3
    base_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    n_classes: int = 2
    loss: str = "ce"
    class_names: list[str] | None = None
    modality_names: list[str] | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigurationError("folds must be ≥ 2")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be ≥ 1")
        if (self.data_path is None) == (self.generate is None):
            raise ConfigurationError("exactly one of data.path or data.generate must be given")
        for c in self.cells:
            if c.family not in self.backbones:
                raise ConfigurationError(f"cell {c.key}: no backbone named {c.family!r}")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        data = raw.pop("data", {}) or {}
        backbones = dict(DEFAULT_BACKBONES)
        for name, spec in (raw.pop("backbones", None) or {}).items():
            backbones[name] = EncoderSpec.from_dict(spec)
        train = TrainConfig.from_dict(raw.pop("train", None) or {})
        cells = [Cell.parse(c) for c in raw.pop("cells", [])]
        return cls(
            cells=cells,
            data_path=data.get("path"),
            generate=data.get("generate"),
            backbones=backbones,
            train=train,
            **raw,
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self) -> dict:
        return {
            "cells": [c.key for c in self.cells],
            "data": {"path": self.data_path} if self.data_path else {"generate": self.generate},
            "backbones": {k: v.to_dict() for k, v in self.backbones.items()},
            "folds": self.folds,
            "repeats": self.repeats,
            "base_seed": self.base_seed,
            "train": self.train.to_dict(),
            "n_classes": self.n_classes,
            "loss": self.loss,
            "class_names": self.class_names,
            "modality_names": self.modality_names,
            "output_dir": self.output_dir,
        }

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def model_spec(self, cell: Cell, n_modalities: int) -> ModelSpec:
        return ModelSpec(
            encoder=self.backbones[cell.family],
            n_modalities=n_modalities,
            strategy=cell.strategy,
            n_classes=self.n_classes,
            deep_weight=self.train.deep_weight,
            loss=self.loss,
        )


def load_volumes(config: ExperimentConfig) -> list[MultiModalVolume]:
    if config.data_path is not None:
        return read_dataset(config.data_path)
    g = dict(config.generate)
    polarity = g.get("polarity")
    if isinstance(polarity, str):
        polarity = parse_polarity(polarity)
    return generate_synthetic(
        seed=int(g.get("seed", 0)),
        n_volumes=int(g["volumes"]),
        n_modalities=int(g["modalities"]),
        dims=tuple(g["dims"]),
        lesion_count=tuple(g.get("lesion_count", (1, 3))),
        lesion_radius=tuple(g.get("lesion_radius", (1.5, 4.0))),
        noise_sigma=float(g.get("noise", 0.05)),
        polarity=polarity,
    )


# ---------------------------------------------------------------------------
# Folds and seeds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    val_ids: tuple
    train_ids: tuple
    repeat: int = 0


def kfold_split(volume_ids: Sequence, k: int, seed: int) -> list[FoldSplit]:
    """Shuffle by ``seed`` and cut into ``k`` folds whose sizes differ by ≤ 1."""
    ids = list(volume_ids)
    if k < 2:
        raise ConfigurationError("k must be ≥ 2")
    if len(ids) < k:
        raise ConfigurationError(f"{len(ids)} volumes cannot fill {k} folds")
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF01D])).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    base, extra = divmod(len(ids), k)
    folds = []
    lo = 0
    for f in range(k):
        hi = lo + base + (1 if f < extra else 0)
        folds.append(shuffled[lo:hi])
        lo = hi
    return [
        FoldSplit(f, tuple(folds[f]), tuple(x for g, fold in enumerate(folds) if g != f for x in fold))
        for f in range(k)
    ]


def job_seed(base_seed: int, cell_key: str, fold: int, repeat: int) -> int:
    digest = hashlib.sha256(f"{base_seed}|{cell_key}|{fold}|{repeat}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class RawEntry:
    cell: str
    fold: int
    repeat: int
    cls: int
    dice: float


@dataclass
class CellResult:
    cell: str
    label: str
    family: str
    entries: list[RawEntry] = field(default_factory=list)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def class_means(self) -> dict[int, float]:
        """Per class: mean over repeats of the mean over folds."""
        out = {}
        for c in sorted({e.cls for e in self.entries}):
            per_repeat = {}
            for e in self.entries:
                if e.cls == c:
                    per_repeat.setdefault(e.repeat, []).append(e.dice)
            out[c] = float(np.mean([np.mean(v) for _, v in sorted(per_repeat.items())]))
        return out

    def repeat_means(self) -> dict[int, float]:
        per = {}
        for e in self.entries:
            per.setdefault(e.repeat, {}).setdefault(e.cls, []).append(e.dice)
        return {r: float(np.mean([np.mean(v) for v in d.values()])) for r, d in sorted(per.items())}

    @property
    def mean(self) -> float:
        means = self.class_means()
        return float(np.mean(list(means.values()))) if means else math.nan


@dataclass
class ExperimentReport:
    cells: list[CellResult] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def cell(self, key: str) -> CellResult:
        for c in self.cells:
            if c.cell == key:
                return c
        raise KeyError(key)

    def raw_entries(self) -> list[RawEntry]:
        return [e for c in self.cells for e in c.entries]

    @property
    def any_failed(self) -> bool:
        return any(c.failed for c in self.cells)

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "cells": [
                {"cell": c.cell, "label": c.label, "family": c.family, "error": c.error, "mean": c.mean,
                 "class_means": {str(k): v for k, v in c.class_means().items()}}
                for c in self.cells
            ],
        }


def write_raw_csv(path, entries: Iterable[RawEntry]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RAW_COLUMNS)
        for e in entries:
            w.writerow([e.cell, e.fold, e.repeat, e.cls, repr(float(e.dice))])


def read_raw_csv(path) -> list[RawEntry]:
    with open(path, newline="") as fh:
        return [
            RawEntry(r["cell"], int(r["fold"]), int(r["repeat"]), int(r["class"]), float(r["dice"]))
            for r in csv.DictReader(fh)
        ]


def save_report(report: ExperimentReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_raw_csv(out / "raw.csv", report.raw_entries())
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def load_report(out_dir) -> ExperimentReport:
    """Rebuild a report from ``report.json`` (cell order, labels, failures) and
    ``raw.csv`` (the numbers)."""
    out = Path(out_dir)
    doc = json.loads((out / "report.json").read_text())
    by_cell: dict[str, list[RawEntry]] = {}
    for e in read_raw_csv(out / "raw.csv"):
        by_cell.setdefault(e.cell, []).append(e)
    cells = [
        CellResult(c["cell"], c["label"], c["family"], by_cell.get(c["cell"], []), c.get("error"))
        for c in doc["cells"]
    ]
    return ExperimentReport(cells, doc.get("meta", {}))


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Job:
    cell: Cell
    fold: int
    repeat: int

    def key(self) -> tuple[str, int, int]:
        return (self.cell.key, self.fold, self.repeat)


_WORKER_STATE: dict = {}


def _worker_init(config: ExperimentConfig, volumes: list[MultiModalVolume]) -> None:
    _limit_blas_threads()
    _WORKER_STATE["config"] = config
    _WORKER_STATE["volumes"] = volumes


def _limit_blas_threads() -> None:
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(1)


def run_job(config: ExperimentConfig, volumes: Sequence[MultiModalVolume], job: Job) -> tuple[list[float] | None, str | None]:
    """Train one cell on one fold; returns (per-class mean Dice over val volumes, error)."""
    by_id = {v.volume_id: v for v in volumes}
    split = kfold_split(sorted(by_id), config.folds, config.base_seed)[job.fold]
    spec = config.model_spec(job.cell, volumes[0].n_modalities)
    train_cfg = replace(config.train, seed=job_seed(config.base_seed, job.cell.key, job.fold, job.repeat))
    try:
        result = train_model(
            spec,
            [by_id[i] for i in split.train_ids],
            [by_id[i] for i in split.val_ids],
            train_cfg,
        )
    except OctofuseError as exc:
        return None, f"{type(exc).__name__}: {exc}"
    return [float(x) for x in result.val_scores.mean(axis=0)], None


def _run_job_in_worker(job: Job):
    return run_job(_WORKER_STATE["config"], _WORKER_STATE["volumes"], job)


def parallelism() -> int:
    try:
        return max(1, int(os.environ.get("OCTOFUSE_THREADS", "1")))
    except ValueError:
        raise ConfigurationError("OCTOFUSE_THREADS must be an integer") from None


def run_jobs(config: ExperimentConfig, volumes: Sequence[MultiModalVolume], jobs: Sequence[Job], cache: dict | None = None) -> dict:
    cache = {} if cache is None else cache
    todo = [j for j in jobs if j.key() not in cache]
    workers = min(parallelism(), len(todo))
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(config, list(volumes))) as pool:
            for job, res in zip(todo, pool.map(_run_job_in_worker, todo)):
                cache[job.key()] = res
    else:
        _limit_blas_threads()
        for job in todo:
            t0 = time.perf_counter()
            cache[job.key()] = run_job(config, volumes, job)
            log.info("%s fold %d repeat %d: %s (%.1fs)", job.cell.key, job.fold, job.repeat, cache[job.key()][0], time.perf_counter() - t0)
    return cache


def run_experiment(
    config: ExperimentConfig,
    volumes: Sequence[MultiModalVolume] | None = None,
    cache: dict | None = None,
) -> ExperimentReport:
    t0 = time.perf_counter()
    volumes = list(volumes) if volumes is not None else load_volumes(config)
    m = volumes[0].n_modalities
    for c in config.cells:
        c.strategy.validate(m)
    jobs = [Job(c, f, r) for c in config.cells for f in range(config.folds) for r in range(config.repeats)]
    results = run_jobs(config, volumes, jobs, cache)
    names = config.modality_names or list(volumes[0].modality_names)
    report = ExperimentReport(
        meta={
            "config_hash": config.digest(),
            "base_seed": config.base_seed,
            "folds": config.folds,
            "repeats": config.repeats,
            "n_volumes": len(volumes),
            "n_modalities": m,
            "class_names": config.class_names,
            "seeds": {f"{j.cell.key}|{j.fold}|{j.repeat}": job_seed(config.base_seed, j.cell.key, j.fold, j.repeat) for j in jobs},
        }
    )
    classes = foreground_classes(config.n_classes)
    for cell in config.cells:
        res = CellResult(cell.key, cell.strategy.label(names), cell.family)
        for f in range(config.folds):
            for r in range(config.repeats):
                scores, err = results[(cell.key, f, r)]
                if err is not None:
                    res.error = res.error or f"fold {f} repeat {r}: {err}"
                    continue
                res.entries.extend(RawEntry(cell.key, f, r, c, s) for c, s in zip(classes, scores))
        report.cells.append(res)
    report.meta["wall_time_s"] = round(time.perf_counter() - t0, 3)
    if config.output_dir:
        save_report(report, config.output_dir)
    return report


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _pct(x: float) -> str:
    return MISSING if x is None or not math.isfinite(x) else f"{100.0 * x:.2f}"


def render_report(report: ExperimentReport, format: str = "markdown", style: str = "backbones", class_names: Sequence[str] | None = None) -> str:
    """Tabulate cell means in percent.

    ``style="backbones"``: rows are strategies, columns backbone families.
    ``style="classes"``: one row per cell, a column per class plus "Ave. Dice".
    """
    if format not in ("markdown", "csv"):
        raise ConfigurationError(f"unknown report format {format!r}")
    if style == "backbones":
        families = list(dict.fromkeys(c.family for c in report.cells))
        labels = list(dict.fromkeys(c.label for c in report.cells))
        header = [""] + families
        rows = []
        for label in labels:
            row = [label]
            for fam in families:
                hit = [c for c in report.cells if c.label == label and c.family == fam]
                row.append(MISSING if not hit or hit[0].failed else _pct(hit[0].mean))
            rows.append(row)
    elif style == "classes":
        classes = sorted({e.cls for c in report.cells for e in c.entries})
        names = list(class_names or report.meta.get("class_names") or [f"class {k}" for k in classes])
        header = [""] + names + ["Ave. Dice"]
        rows = []
        for c in report.cells:
            if c.failed:
                rows.append([c.label] + [MISSING] * (len(names) + 1))
                continue
            means = c.class_means()
            rows.append([c.label] + [_pct(means.get(k, math.nan)) for k in classes] + [_pct(c.mean)])
    else:
        raise ConfigurationError(f"unknown report style {style!r}")
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] + [":---:"] * (len(header) - 1)) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def parse_markdown_table(text: str) -> tuple[list[str], dict[str, list[float | None]]]:
    """Inverse of the markdown renderer: header and row label -> fractions (None for failed)."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip().startswith("|")]
    split = lambda ln: [c.strip() for c in ln.strip("|").split("|")]  # noqa: E731
    header = split(lines[0])
    rows = {}
    for ln in lines[2:]:
        cells = split(ln)
        rows[cells[0]] = [None if v == MISSING else float(v) / 100.0 for v in cells[1:]]
    return header, rows


# ---------------------------------------------------------------------------
# Fusion comparison
# ---------------------------------------------------------------------------


@dataclass
class ComparisonSummary:
    best_modality: int
    single_scores: dict[int, float]
    rows: list[tuple[str, float]]
    deltas: dict[tuple[str, str], float]
    report: ExperimentReport

    def mean(self, label: str) -> float:
        return dict(self.rows)[label]

    def to_markdown(self) -> str:
        lines = ["| Strategy | Mean Dice (%) |", "|---|:---:|"]
        lines += [f"| {label} | {_pct(v)} |" for label, v in self.rows]
        return "\n".join(lines) + "\n"


def compare_fusion(
    config: ExperimentConfig,
    volumes: Sequence[MultiModalVolume] | None = None,
    family: str | None = None,
) -> ComparisonSummary:
    """Single (best modality), early, late, octopus and octopus + deep supervision
    under identical folds and seeds.

    The single modality is picked by validation Dice on fold 0 of repeat 0.
    """
    volumes = list(volumes) if volumes is not None else load_volumes(config)
    m = volumes[0].n_modalities
    if m < 2:
        raise ConfigurationError("compare_fusion needs at least two modalities")
    family = family or (config.cells[0].family if config.cells else "densenet")
    cache: dict = {}
    probe = [Job(Cell(family, FusionStrategy("single", i)), 0, 0) for i in range(m)]
    run_jobs(config, volumes, probe, cache)
    single_scores = {}
    for i, job in enumerate(probe):
        scores, err = cache[job.key()]
        single_scores[i] = float(np.mean(scores)) if err is None else -math.inf
    best = max(single_scores, key=lambda i: (single_scores[i], -i))
    cells = [
        Cell(family, FusionStrategy("single", best)),
        Cell(family, FusionStrategy("early")),
        Cell(family, FusionStrategy("late")),
        Cell(family, FusionStrategy("octopus")),
        Cell(family, FusionStrategy("octopus", deep_supervision=True)),
    ]
    report = run_experiment(replace(config, cells=cells), volumes, cache)
    report.meta["best_single_modality"] = best
    report.meta["single_probe"] = single_scores
    if config.output_dir:
        save_report(report, config.output_dir)
    rows = [(c.label, math.nan if c.failed else c.mean) for c in report.cells]
    deltas = {(a, b): va - vb for a, va in rows for b, vb in rows if a != b}
    return ComparisonSummary(best, single_scores, rows, deltas, report)
