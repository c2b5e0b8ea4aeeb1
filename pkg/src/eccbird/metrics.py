"""Multi-label loss measures and win-loss aggregation.

Conventions
-----------
* rank loss counts a tied relevant/irrelevant pair as half an error;
  examples with no relevant or no irrelevant label contribute 0.
* rankings order classes by descending score, ties broken by lower class
  index first (this fixes one-error and coverage).
* one-error counts an example with an empty label set as an error.
* coverage is ``max rank of a relevant label - 1`` (ranks start at 1);
  examples with an empty label set contribute 0.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from itertools import combinations

import numpy as np

#: Measure names in report column order; all are losses (lower is better).
MEASURES = ("hamming_loss", "subset_01_loss", "rank_loss", "one_error", "coverage")

MEASURE_TITLES = {
    "hamming_loss": "Hamming loss",
    "subset_01_loss": "Set 0/1 loss",
    "rank_loss": "Rank loss",
    "one_error": "1-error",
    "coverage": "Coverage",
}


class MetricsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PredictionBatch:
    truth: np.ndarray      # (n, c) 0/1
    scores: np.ndarray     # (n, c)
    predicted: np.ndarray  # (n, c) 0/1

    def __post_init__(self):
        Y = np.asarray(self.truth).astype(np.uint8)
        S = np.asarray(self.scores, dtype=np.float64)
        P = np.asarray(self.predicted).astype(np.uint8)
        if Y.ndim != 2 or Y.shape[0] == 0:
            raise MetricsError("empty prediction batch")
        if S.shape != Y.shape or P.shape != Y.shape:
            raise MetricsError(f"inconsistent shapes: truth {Y.shape}, scores {S.shape}, predicted {P.shape}")
        if not np.all(np.isfinite(S)):
            raise MetricsError("scores must be finite")
        object.__setattr__(self, "truth", Y)
        object.__setattr__(self, "scores", S)
        object.__setattr__(self, "predicted", P)

    @property
    def n(self) -> int:
        return self.truth.shape[0]

    @property
    def c(self) -> int:
        return self.truth.shape[1]


@dataclass(frozen=True)
class MetricsReport:
    hamming_loss: float
    subset_01_loss: float
    rank_loss: float
    one_error: float
    coverage: float
    n: int = 0

    def __post_init__(self):
        for m in MEASURES:
            object.__setattr__(self, m, float(getattr(self, m)))
        object.__setattr__(self, "n", int(self.n))

    def value(self, measure: str) -> float:
        if measure not in MEASURES:
            raise MetricsError(f"unknown measure {measure!r}")
        return getattr(self, measure)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def hamming_loss(batch: PredictionBatch) -> float:
    return float(np.mean(batch.truth != batch.predicted))


def subset_01_loss(batch: PredictionBatch) -> float:
    return float(np.mean(np.any(batch.truth != batch.predicted, axis=1)))


def rank_loss(batch: PredictionBatch) -> float:
    total = 0.0
    for y, s in zip(batch.truth.astype(bool), batch.scores):
        rel, irr = s[y], s[~y]
        if rel.size == 0 or irr.size == 0:
            continue
        below = (rel[:, None] < irr[None, :]).sum()
        ties = (rel[:, None] == irr[None, :]).sum()
        total += (below + 0.5 * ties) / (rel.size * irr.size)
    return float(total / batch.n)


def ranking(scores) -> np.ndarray:
    """Class indices by descending score, ties to the lower index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def one_error(batch: PredictionBatch) -> float:
    top = np.array([ranking(s)[0] for s in batch.scores])
    return float(np.mean(batch.truth[np.arange(batch.n), top] == 0))


def coverage(batch: PredictionBatch) -> float:
    total = 0
    for y, s in zip(batch.truth.astype(bool), batch.scores):
        if not y.any():
            continue
        pos = np.empty(batch.c, dtype=np.int64)
        pos[ranking(s)] = np.arange(batch.c)
        total += int(pos[y].max())
    return total / batch.n


def evaluate(batch: PredictionBatch) -> MetricsReport:
    return MetricsReport(hamming_loss(batch), subset_01_loss(batch), rank_loss(batch),
                         one_error(batch), coverage(batch), batch.n)


def mean_report(reports) -> MetricsReport:
    reports = list(reports)
    if not reports:
        raise MetricsError("no reports to average")
    vals = {m: float(np.mean([r.value(m) for r in reports])) for m in MEASURES}
    return MetricsReport(**vals, n=sum(r.n for r in reports))


# --------------------------------------------------------------------------
# win-loss


@dataclass(frozen=True)
class WinLoss:
    wins: int = 0
    losses: int = 0
    ties: int = 0

    @property
    def record(self) -> str:
        return f"{self.wins}-{self.losses}"


@dataclass(frozen=True)
class WinLossTable:
    """``pairs[(a, b)]`` counts comparisons from ``a``'s point of view."""

    pairs: dict

    def __getitem__(self, key) -> WinLoss:
        a, b = key
        if (a, b) in self.pairs:
            return self.pairs[(a, b)]
        w = self.pairs[(b, a)]
        return WinLoss(w.losses, w.wins, w.ties)

    def record(self, a: str, b: str) -> str:
        return self[(a, b)].record


def win_loss(reports: dict, measures=MEASURES) -> WinLossTable:
    """Count wins over every (dataset, measure) cell for each classifier pair.

    ``reports`` maps dataset -> classifier -> MetricsReport. The strictly
    lower value wins; equal values are ties and count for neither side.
    """
    classifiers: list[str] = []
    for per_clf in reports.values():
        for name in per_clf:
            if name not in classifiers:
                classifiers.append(name)
    pairs = {}
    for a, b in combinations(classifiers, 2):
        w = l = t = 0
        for per_clf in reports.values():
            if a not in per_clf or b not in per_clf:
                continue
            for m in measures:
                va, vb = per_clf[a].value(m), per_clf[b].value(m)
                if va < vb:
                    w += 1
                elif va > vb:
                    l += 1
                else:
                    t += 1
        pairs[(a, b)] = WinLoss(w, l, t)
    return WinLossTable(pairs)


def format_table(rows, title_col: str = "Classifier") -> str:
    """Fixed-width text table, measures in report column order.

    ``rows`` is a sequence of ``(label, MetricsReport)``.
    """
    heads = [title_col] + [MEASURE_TITLES[m] for m in MEASURES]
    body = [[label] + [f"{r.value(m):.4f}" for m in MEASURES] for label, r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(heads)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(heads, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(b, widths)))
    return "\n".join(lines)


def write_report_csv(rows, path):
    """Rows of ``(dataset, classifier, trial, fold, MetricsReport)`` in long format."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["dataset", "classifier", "trial", "fold", "measure", "value"])
        for dataset, clf, trial, fold, rep in rows:
            for m in MEASURES:
                w.writerow([dataset, clf, trial, fold, m, repr(rep.value(m))])
