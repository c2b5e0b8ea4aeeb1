"""Repeated cross-validation of BR-RF and ECC-RF on MIML or MLC data.

Every (trial, fold) cell is an independent job: its seeds derive from
``(seed, trial, fold)`` only, so results do not depend on worker count or
scheduling. Per-cell reports are kept so aggregates can be recomputed.
"""
from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .chains import (BR_TREES, ECC_CHAINS, ECC_TREES, calibrate_thresholds, model_scores,
                     predict_sets, train_br, train_ecc)
from .codebook import CodebookConfig, fit_codebook, reduce_miml
from .dataset import (DataError, FoldPlan, MimlDataset, MlcDataset, load_folds, load_miml,
                      load_mlc, load_vocabulary, make_folds)
from .forest import ForestConfig
from .metrics import (MEASURES, MetricsReport, PredictionBatch, WinLossTable, evaluate,
                      format_table, mean_report, win_loss, write_report_csv)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger(__name__)

WORKERS_ENV = "ECCBIRD_WORKERS"
CLASSIFIER_NAMES = {"br": "BR-RF", "ecc": "ECC-RF"}


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "dataset"
    segments: str | None = None
    labels: str | None = None
    mlc: str | None = None
    vocabulary: str | None = None
    folds: str | None = None
    classifiers: tuple[str, ...] = ("br", "ecc")
    chains: int = ECC_CHAINS
    ecc_trees: int = ECC_TREES
    br_trees: int = BR_TREES
    max_depth: int = 15
    k: int = 50
    fold_count: int = 5
    repetitions: int = 10
    seed: int = 0
    codebook_scope: str = "per-fold"
    threshold_mode: str = "per-class"

    def __post_init__(self):
        object.__setattr__(self, "classifiers", tuple(self.classifiers))
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.fold_count < 2:
            raise ConfigError("fold_count must be >= 2")
        for c in self.classifiers:
            if c not in CLASSIFIER_NAMES:
                raise ConfigError(f"unknown classifier {c!r} (expected br or ecc)")
        if not self.classifiers:
            raise ConfigError("no classifiers selected")
        if self.codebook_scope not in ("per-fold", "global"):
            raise ConfigError("codebook_scope must be 'per-fold' or 'global'")
        if self.threshold_mode not in ("per-class", "single"):
            raise ConfigError("threshold_mode must be 'per-class' or 'single'")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @classmethod
    def from_toml(cls, path, **overrides) -> "ExperimentConfig":
        """Load a TOML config; relative data paths resolve against its directory.

        Keys may sit at top level or under ``[experiment]``.
        """
        path = Path(path)
        with open(path, "rb") as f:
            raw = tomllib.load(f)
        data = {k: v for k, v in raw.items() if not isinstance(v, dict)}
        data.update(raw.get("experiment", {}))
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown config key(s) {', '.join(unknown)}")
        for key in ("segments", "labels", "mlc", "vocabulary", "folds"):
            if data.get(key):
                p = Path(data[key])
                data[key] = str(p if p.is_absolute() else path.parent / p)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


@dataclass(frozen=True)
class CellResult:
    trial: int
    fold: int
    classifier: str
    report: MetricsReport
    n_train: int
    n_test: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    cells: list[CellResult]
    means: dict = field(default_factory=dict)
    winloss: WinLossTable | None = None

    def cell_values(self, classifier: str, measure: str) -> np.ndarray:
        return np.array([c.report.value(measure) for c in self.cells if c.classifier == classifier])


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def load_data(config: ExperimentConfig):
    vocab = load_vocabulary(config.vocabulary) if config.vocabulary else None
    if config.mlc:
        return load_mlc(config.mlc, vocab)
    if config.segments and config.labels:
        return load_miml(config.segments, config.labels, vocab)
    raise ConfigError("config needs either 'mlc' or both 'segments' and 'labels'")


def fold_plan(config: ExperimentConfig, ids, trial: int, external: FoldPlan | None) -> FoldPlan:
    if external is not None:
        return external
    return make_folds(ids, config.fold_count, derive_seed(config.seed, trial))


def _train(classifier: str, train: MlcDataset, config: ExperimentConfig, seed: int):
    if classifier == "br":
        return train_br(train, ForestConfig(tree_count=config.br_trees, max_depth=config.max_depth), seed)
    return train_ecc(train, config.chains, ForestConfig(tree_count=config.ecc_trees, max_depth=config.max_depth),
                     seed)


def _featurize(data, train_ids, test_ids, config: ExperimentConfig, seed: int, codebook=None):
    if isinstance(data, MlcDataset):
        return data.subset(train_ids), data.subset(test_ids)
    train_bags = data.subset(train_ids)
    if codebook is None:
        codebook = fit_codebook(train_bags.pooled_segments(), CodebookConfig(k=config.k, seed=seed))
    return reduce_miml(train_bags, codebook), reduce_miml(data.subset(test_ids), codebook)


def run_cell(data, train_ids, test_ids, config: ExperimentConfig, trial: int, fold: int,
             codebook=None) -> list[CellResult]:
    """Featurize, train, calibrate and score one fold for every classifier."""
    seed = derive_seed(config.seed, trial, fold)
    try:
        train, test = _featurize(data, train_ids, test_ids, config, seed, codebook)
        out = []
        for clf in config.classifiers:
            model = _train(clf, train, config, seed)
            thresholds = calibrate_thresholds(model, train, config.threshold_mode)
            scores = model_scores(model, test.X)
            batch = PredictionBatch(test.Y, scores, predict_sets(scores, thresholds))
            out.append(CellResult(trial, fold, clf, evaluate(batch), train.n, test.n))
        return out
    except (ValueError, ArithmeticError) as exc:
        raise ExperimentError(f"trial {trial} fold {fold}: {exc}") from exc


def _run_cell_job(args):
    return run_cell(*args)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def run_experiment(config: ExperimentConfig, data=None, folds: FoldPlan | None = None,
                   workers: int | None = None) -> ExperimentResult:
    """Run ``repetitions`` x ``fold_count`` cells and aggregate them."""
    started = time.perf_counter()
    if data is None:
        data = load_data(config)
    if folds is None and config.folds:
        folds = load_folds(config.folds)
    ids = data.ids
    if folds is not None:
        missing = [i for i in ids if i not in folds.assignment]
        if missing:
            raise DataError(f"fold file has no entry for id {missing[0]!r}")
        if folds.fold_count != config.fold_count:
            logger.info("fold file defines %d folds; overriding fold_count=%d",
                        folds.fold_count, config.fold_count)
            config = replace(config, fold_count=folds.fold_count)

    jobs = []
    for trial in range(config.repetitions):
        plan = fold_plan(config, ids, trial, folds)
        codebook = None
        if isinstance(data, MimlDataset) and config.codebook_scope == "global":
            codebook = fit_codebook(data.pooled_segments(),
                                    CodebookConfig(k=config.k, seed=derive_seed(config.seed, trial)))
        for fold in range(plan.fold_count):
            train_ids, test_ids = plan.split(fold, ids)
            if not test_ids:
                continue
            jobs.append((data, train_ids, test_ids, config, trial, fold, codebook))

    workers = workers or worker_count()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_cell_job, jobs))
    else:
        results = []
        for job in jobs:
            results.append(run_cell(*job))
            logger.info("trial %d fold %d done", job[4], job[5])
    cells = [c for group in results for c in group]
    result = aggregate(config, cells)
    logger.info("experiment %s: %d cells in %.1f s", config.name, len(cells),
                time.perf_counter() - started)
    return result


def aggregate(config: ExperimentConfig, cells: list[CellResult]) -> ExperimentResult:
    means = {clf: mean_report([c.report for c in cells if c.classifier == clf])
             for clf in config.classifiers}
    table = win_loss({config.name: means})
    return ExperimentResult(config, cells, means, table)


# --------------------------------------------------------------------------
# outputs


def summary_table(result: ExperimentResult) -> str:
    rows = [(f"{result.config.name} {CLASSIFIER_NAMES[clf]}", rep) for clf, rep in result.means.items()]
    lines = [format_table(rows)]
    clfs = list(result.means)
    for i, a in enumerate(clfs):
        for b in clfs[i + 1:]:
            w = result.winloss[(a, b)]
            lines.append(f"win-loss {CLASSIFIER_NAMES[a]} vs {CLASSIFIER_NAMES[b]}: "
                         f"{w.record} ({w.ties} ties)")
    return "\n".join(lines) + "\n"


def write_outputs(result: ExperimentResult, out_dir) -> dict[str, Path]:
    """Write cells.csv, summary.csv, winloss.csv and summary.txt; return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = result.config.name
    paths = {"cells": out / "cells.csv", "summary": out / "summary.csv",
             "winloss": out / "winloss.csv", "summary_table": out / "summary.txt"}

    write_report_csv([(name, CLASSIFIER_NAMES[c.classifier], c.trial, c.fold, c.report)
                      for c in result.cells], paths["cells"])
    with open(paths["summary"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["dataset", "classifier", *MEASURES, "cells"])
        for clf, rep in result.means.items():
            n_cells = sum(1 for c in result.cells if c.classifier == clf)
            w.writerow([name, CLASSIFIER_NAMES[clf], *(repr(rep.value(m)) for m in MEASURES), n_cells])
    with open(paths["winloss"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["dataset", "classifier_a", "classifier_b", "wins", "losses", "ties"])
        for (a, b), wl in result.winloss.pairs.items():
            w.writerow([name, CLASSIFIER_NAMES[a], CLASSIFIER_NAMES[b], wl.wins, wl.losses, wl.ties])
    paths["summary_table"].write_text(summary_table(result), encoding="utf-8")
    return paths


def config_dict(config: ExperimentConfig) -> dict:
    d = asdict(config)
    d["classifiers"] = list(config.classifiers)
    return d
