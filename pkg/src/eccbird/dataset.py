"""Data model for multi-label (MLC) and multi-instance multi-label (MIML) data.

File formats
------------
MLC CSV         ``id,f1,...,fd,labels``
MIML segments   ``bag_id,f1,...,fd`` (one row per segment)
MIML labels     ``bag_id,labels``
Vocabulary      one label name per line, line order = class index
Folds           ``id,fold``

``labels`` is a ``;``-separated list of vocabulary names and may be empty.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

LABEL_SEP = ";"


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class LabelVocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise DataError("vocabulary is empty")
        seen = set()
        for name in names:
            if not name or not name.strip():
                raise DataError("vocabulary contains an empty label name")
            if LABEL_SEP in name or "," in name:
                raise DataError(f"label name {name!r} contains a reserved character")
            if name in seen:
                raise DataError(f"duplicate label name {name!r} in vocabulary")
            seen.add(name)
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    @property
    def c(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"unknown label {name!r}") from None

    def __contains__(self, name) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class LabelSet:
    """Binary view of a label set: ``bits[j] == 1`` iff class ``j`` is present."""

    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise DataError("label bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_indices(cls, indices: Iterable[int], c: int) -> "LabelSet":
        bits = [0] * c
        for j in indices:
            if not 0 <= j < c:
                raise DataError(f"class index {j} outside [0, {c})")
            bits[j] = 1
        return cls(tuple(bits))

    @classmethod
    def from_names(cls, names: Iterable[str], vocabulary: LabelVocabulary) -> "LabelSet":
        return cls.from_indices((vocabulary.index(n) for n in names), vocabulary.c)

    @property
    def c(self) -> int:
        return len(self.bits)

    def indices(self) -> list[int]:
        return [j for j, b in enumerate(self.bits) if b]

    def names(self, vocabulary: LabelVocabulary) -> list[str]:
        return [vocabulary.names[j] for j in self.indices()]

    def __len__(self) -> int:
        return sum(self.bits)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.uint8)


@dataclass(frozen=True, eq=False)
class MlcExample:
    id: str
    x: np.ndarray
    y: LabelSet


@dataclass(frozen=True, eq=False)
class MimlBag:
    id: str
    instances: np.ndarray  # shape (n_i, d_seg)
    y: LabelSet

    @property
    def size(self) -> int:
        return self.instances.shape[0]


def _check_ids(ids: Sequence[str], what: str):
    seen = set()
    for i in ids:
        if not i:
            raise DataError(f"empty {what} id")
        if i in seen:
            raise DataError(f"duplicate {what} id {i!r}")
        seen.add(i)


@dataclass(frozen=True, eq=False)
class MlcDataset:
    """A labelled set of fixed-length feature vectors.

    ``X`` (n x d) and ``Y`` (n x c, uint8) are materialized once on
    construction; examples are immutable afterwards.
    """

    vocabulary: LabelVocabulary
    examples: tuple[MlcExample, ...]
    X: np.ndarray = field(init=False, repr=False, compare=False)
    Y: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        examples = tuple(self.examples)
        object.__setattr__(self, "examples", examples)
        _check_ids([e.id for e in examples], "example")
        c = self.vocabulary.c
        dims = {e.x.shape for e in examples}
        if len(dims) > 1:
            raise DataError(f"inconsistent feature dimensions {sorted(dims)}")
        for e in examples:
            if e.x.ndim != 1:
                raise DataError(f"example {e.id!r}: feature vector must be 1-D")
            if e.y.c != c:
                raise DataError(f"example {e.id!r}: label set sized {e.y.c}, vocabulary has {c}")
            if not np.all(np.isfinite(e.x)):
                raise DataError(f"example {e.id!r}: non-finite feature value")
        d = examples[0].x.shape[0] if examples else 0
        X = np.array([e.x for e in examples], dtype=np.float64).reshape(len(examples), d)
        Y = np.array([e.y.bits for e in examples], dtype=np.uint8).reshape(len(examples), c)
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @classmethod
    def from_arrays(cls, vocabulary, ids, X, Y) -> "MlcDataset":
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y)
        return cls(vocabulary, tuple(
            MlcExample(str(i), X[r].copy(), LabelSet(tuple(Y[r])))
            for r, i in enumerate(ids)))

    @property
    def n(self) -> int:
        return len(self.examples)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.examples]

    def subset(self, ids: Iterable[str]) -> "MlcDataset":
        by_id = {e.id: e for e in self.examples}
        return MlcDataset(self.vocabulary, tuple(by_id[i] for i in ids))


@dataclass(frozen=True, eq=False)
class MimlDataset:
    vocabulary: LabelVocabulary
    bags: tuple[MimlBag, ...]

    def __post_init__(self):
        bags = tuple(self.bags)
        object.__setattr__(self, "bags", bags)
        _check_ids([b.id for b in bags], "bag")
        dims = {b.instances.shape[1] for b in bags if b.instances.ndim == 2 and b.size > 0}
        if len(dims) > 1:
            raise DataError(f"inconsistent segment dimensions {sorted(dims)}")
        for b in bags:
            if b.instances.ndim != 2:
                raise DataError(f"bag {b.id!r}: instances must be a 2-D array")
            if b.y.c != self.vocabulary.c:
                raise DataError(f"bag {b.id!r}: label set sized {b.y.c}, vocabulary has {self.vocabulary.c}")
            if not np.all(np.isfinite(b.instances)):
                raise DataError(f"bag {b.id!r}: non-finite segment feature")

    @property
    def n(self) -> int:
        return len(self.bags)

    @property
    def ids(self) -> list[str]:
        return [b.id for b in self.bags]

    @property
    def segment_dim(self) -> int:
        for b in self.bags:
            if b.size:
                return b.instances.shape[1]
        return max((b.instances.shape[1] for b in self.bags), default=0)

    def pooled_segments(self) -> np.ndarray:
        """All instances of all bags stacked in bag order."""
        d = self.segment_dim
        parts = [b.instances for b in self.bags if b.size]
        if not parts:
            return np.empty((0, d))
        return np.vstack(parts)

    def subset(self, ids: Iterable[str]) -> "MimlDataset":
        by_id = {b.id: b for b in self.bags}
        return MimlDataset(self.vocabulary, tuple(by_id[i] for i in ids))


@dataclass(frozen=True)
class FoldPlan:
    fold_count: int
    assignment: dict
    seed: int | None = None

    def __post_init__(self):
        if self.fold_count < 2:
            raise DataError("fold_count must be at least 2")
        for i, f in self.assignment.items():
            if not 0 <= f < self.fold_count:
                raise DataError(f"id {i!r} assigned to fold {f} outside [0, {self.fold_count})")

    def folds(self) -> list[list[str]]:
        out = [[] for _ in range(self.fold_count)]
        for i, f in self.assignment.items():
            out[f].append(i)
        return out

    def split(self, fold: int, ids: Sequence[str]) -> tuple[list[str], list[str]]:
        """(train ids, test ids) for ``fold``, preserving the order of ``ids``."""
        missing = [i for i in ids if i not in self.assignment]
        if missing:
            raise DataError(f"fold plan has no entry for id {missing[0]!r}")
        train = [i for i in ids if self.assignment[i] != fold]
        test = [i for i in ids if self.assignment[i] == fold]
        return train, test


def make_folds(ids: Sequence[str], fold_count: int, seed: int = 0) -> FoldPlan:
    """Uniform random partition of ``ids`` into near-equal folds."""
    ids = list(ids)
    n = len(ids)
    if fold_count < 2:
        raise DataError("fold_count must be at least 2")
    if fold_count > n:
        raise DataError(f"fold_count {fold_count} exceeds number of examples {n}")
    _check_ids(ids, "example")
    order = np.random.default_rng(seed).permutation(n)
    assignment = {ids[int(r)]: pos % fold_count for pos, r in enumerate(order)}
    # keep insertion order equal to input order for stable exports
    assignment = {i: assignment[i] for i in ids}
    return FoldPlan(fold_count, assignment, seed)


# --------------------------------------------------------------------------
# file I/O


def _fmt(v: float) -> str:
    return repr(float(v))


def _parse_labels(field_value: str, vocabulary: LabelVocabulary | None, row: int,
                  seen: list[str] | None = None) -> list[str]:
    names = [s.strip() for s in field_value.split(LABEL_SEP)] if field_value.strip() else []
    for s in names:
        if not s:
            raise DataError(f"row {row}: empty label name in {field_value!r}")
        if vocabulary is not None and s not in vocabulary:
            raise DataError(f"row {row}: unknown label {s!r}")
        if seen is not None and s not in seen:
            seen.append(s)
    return names


def _parse_float(s: str, row: int, col: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise DataError(f"row {row}: column {col!r} value {s!r} is not a number") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}: column {col!r} value {s!r} is not finite")
    return v


def _open_read(path):
    return open(path, newline="", encoding="utf-8")


def _open_write(path):
    return open(path, "w", newline="", encoding="utf-8")


def _writer(f):
    return csv.writer(f, lineterminator="\n")


def load_vocabulary(path) -> LabelVocabulary:
    with open(path, encoding="utf-8") as f:
        names = [line.strip() for line in f if line.strip()]
    return LabelVocabulary(tuple(names))


def write_vocabulary(vocabulary: LabelVocabulary, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        for name in vocabulary.names:
            f.write(name + "\n")


def load_mlc(path, vocabulary: LabelVocabulary | None = None) -> MlcDataset:
    """Read an MLC CSV.

    Without ``vocabulary`` the class order is the order of first appearance
    in the file.
    """
    with _open_read(path) as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        if len(header) < 2 or header[0] != "id" or header[-1] != "labels":
            raise DataError(f"{path}: header must be 'id,f1,...,fd,labels'")
        feature_cols = header[1:-1]
        d = len(feature_cols)
        seen_names: list[str] = []
        rows = []
        for rownum, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != d + 2:
                raise DataError(f"row {rownum}: expected {d + 2} fields, got {len(rec)}")
            x = np.array([_parse_float(v, rownum, c) for v, c in zip(rec[1:-1], feature_cols)])
            labels = _parse_labels(rec[-1], vocabulary, rownum, seen_names)
            rows.append((rownum, rec[0], x, labels))
    if vocabulary is None:
        if not seen_names:
            raise DataError(f"{path}: no labels found and no vocabulary given")
        vocabulary = LabelVocabulary(tuple(seen_names))
    ids = set()
    examples = []
    for rownum, i, x, labels in rows:
        if not i:
            raise DataError(f"row {rownum}: empty id")
        if i in ids:
            raise DataError(f"row {rownum}: duplicate id {i!r}")
        ids.add(i)
        examples.append(MlcExample(i, x, LabelSet.from_names(labels, vocabulary)))
    return MlcDataset(vocabulary, tuple(examples))


def write_mlc(dataset: MlcDataset, path):
    with _open_write(path) as f:
        w = _writer(f)
        w.writerow(["id", *[f"f{j + 1}" for j in range(dataset.d)], "labels"])
        for e in dataset.examples:
            w.writerow([e.id, *map(_fmt, e.x), LABEL_SEP.join(e.y.names(dataset.vocabulary))])


def load_segments(path) -> tuple[dict[str, np.ndarray], int]:
    """Segment rows grouped by bag id (file order) and the segment dimension."""
    segs: dict[str, list[np.ndarray]] = {}
    with _open_read(path) as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or not header or header[0] != "bag_id":
            raise DataError(f"{path}: header must be 'bag_id,f1,...,fd'")
        cols = header[1:]
        d = len(cols)
        for rownum, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != d + 1:
                raise DataError(f"{path} row {rownum}: expected {d + 1} fields, got {len(rec)}")
            if not rec[0]:
                raise DataError(f"{path} row {rownum}: empty bag id")
            x = np.array([_parse_float(v, rownum, c) for v, c in zip(rec[1:], cols)])
            segs.setdefault(rec[0], []).append(x)
    return {k: np.vstack(v) for k, v in segs.items()}, d


def load_miml(features_path, labels_path, vocabulary: LabelVocabulary | None = None) -> MimlDataset:
    """Assemble bags from a segment CSV and a label CSV.

    Bags listed in the label file without segments become empty bags; a bag
    with segments but no label row is an error.
    """
    segs, d = load_segments(features_path)

    seen_names: list[str] = []
    labels: dict[str, tuple[int, list[str]]] = {}
    with _open_read(labels_path) as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["bag_id", "labels"]:
            raise DataError(f"{labels_path}: header must be 'bag_id,labels'")
        for rownum, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 2:
                raise DataError(f"{labels_path} row {rownum}: expected 2 fields, got {len(rec)}")
            if rec[0] in labels:
                raise DataError(f"{labels_path} row {rownum}: duplicate bag id {rec[0]!r}")
            labels[rec[0]] = (rownum, _parse_labels(rec[1], vocabulary, rownum, seen_names))

    for bag_id in segs:
        if bag_id not in labels:
            raise DataError(f"bag {bag_id!r} has segments but no label row")
    if vocabulary is None:
        if not seen_names:
            raise DataError(f"{labels_path}: no labels found and no vocabulary given")
        vocabulary = LabelVocabulary(tuple(seen_names))

    bags = []
    for bag_id, (_, names) in labels.items():
        inst = segs.get(bag_id, np.empty((0, d)))
        bags.append(MimlBag(bag_id, inst, LabelSet.from_names(names, vocabulary)))
    return MimlDataset(vocabulary, tuple(bags))


def write_miml(dataset: MimlDataset, features_path, labels_path):
    d = dataset.segment_dim
    with _open_write(features_path) as f:
        w = _writer(f)
        w.writerow(["bag_id", *[f"f{j + 1}" for j in range(d)]])
        for b in dataset.bags:
            for x in b.instances:
                w.writerow([b.id, *map(_fmt, x)])
    with _open_write(labels_path) as f:
        w = _writer(f)
        w.writerow(["bag_id", "labels"])
        for b in dataset.bags:
            w.writerow([b.id, LABEL_SEP.join(b.y.names(dataset.vocabulary))])


def load_folds(path) -> FoldPlan:
    assignment = {}
    with _open_read(path) as f:
        reader = csv.reader(f)
        if next(reader, None) != ["id", "fold"]:
            raise DataError(f"{path}: header must be 'id,fold'")
        for rownum, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 2:
                raise DataError(f"{path} row {rownum}: expected 2 fields")
            if rec[0] in assignment:
                raise DataError(f"{path} row {rownum}: duplicate id {rec[0]!r}")
            try:
                assignment[rec[0]] = int(rec[1])
            except ValueError:
                raise DataError(f"{path} row {rownum}: fold {rec[1]!r} is not an integer") from None
    if not assignment:
        raise DataError(f"{path}: no fold rows")
    return FoldPlan(max(assignment.values()) + 1, assignment)


def write_folds(plan: FoldPlan, path):
    with _open_write(path) as f:
        w = _writer(f)
        w.writerow(["id", "fold"])
        for i, fold in plan.assignment.items():
            w.writerow([i, fold])


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the correlated-label bag generator.

    Labels follow a chain of conditional flips: class 0 is Bernoulli(p) with
    ``p = mean_labels_per_bag / c``; class ``j`` copies class ``j-1`` with
    probability ``label_correlation`` and is otherwise a fresh Bernoulli(p).
    Every marginal stays at ``p`` and adjacent classes have correlation
    ``label_correlation``. Unless ``allow_empty`` is set, empty label sets
    are redrawn, which lifts the mean label count slightly above
    ``mean_labels_per_bag``.
    """

    c: int = 6
    k_true: int = 12
    n: int = 300
    mean_labels_per_bag: float = 2.0
    label_correlation: float = 0.5
    noise_rate: float = 0.1
    seed: int = 0
    segment_dim: int = 6
    segments_per_label: float = 3.0
    cluster_spread: float = 0.6
    box: float = 10.0
    allow_empty: bool = False

    def __post_init__(self):
        if self.c < 2:
            raise DataError("c must be at least 2")
        if self.n < 10:
            raise DataError("n must be at least 10")
        if not 1 <= self.mean_labels_per_bag <= self.c:
            raise DataError("mean_labels_per_bag must lie in [1, c]")
        if not 0.0 <= self.label_correlation <= 1.0:
            raise DataError("label_correlation must lie in [0, 1]")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise DataError("noise_rate must lie in [0, 1]")
        if self.k_true < 1 or self.segment_dim < 1:
            raise DataError("k_true and segment_dim must be positive")
        if self.segments_per_label < 0:
            raise DataError("segments_per_label must be non-negative")


def _label_chain(rows: int, c: int, p: float, rho: float, rng: np.random.Generator) -> np.ndarray:
    Y = np.zeros((rows, c), dtype=np.uint8)
    Y[:, 0] = rng.random(rows) < p
    for j in range(1, c):
        tie = rng.random(rows) < rho
        fresh = rng.random(rows) < p
        Y[:, j] = np.where(tie, Y[:, j - 1], fresh)
    return Y


def synthetic_labels(config: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    p = config.mean_labels_per_bag / config.c
    Y = _label_chain(config.n, config.c, p, config.label_correlation, rng)
    if not config.allow_empty:
        # redraw empty label sets; keeps tied classes tied
        empty = np.flatnonzero(Y.sum(axis=1) == 0)
        while empty.size:
            Y[empty] = _label_chain(empty.size, config.c, p, config.label_correlation, rng)
            empty = empty[Y[empty].sum(axis=1) == 0]
    return Y


def generate_synthetic(config: SyntheticConfig) -> MimlDataset:
    rng = np.random.default_rng(config.seed)
    vocabulary = LabelVocabulary(tuple(f"class{j + 1}" for j in range(config.c)))
    centers = rng.uniform(0.0, config.box, size=(config.k_true, config.segment_dim))
    per_class = max(1, config.k_true // config.c)
    class_clusters = [rng.choice(config.k_true, size=per_class, replace=False)
                      for _ in range(config.c)]
    Y = synthetic_labels(config, rng)

    width = len(str(config.n - 1))
    bags = []
    for i in range(config.n):
        rows = []
        for j in np.flatnonzero(Y[i]):
            m = 1 + rng.poisson(max(config.segments_per_label - 1.0, 0.0))
            picks = rng.choice(class_clusters[j], size=m)
            rows.append(centers[picks] + rng.normal(0.0, config.cluster_spread,
                                                    size=(m, config.segment_dim)))
        inst = np.vstack(rows) if rows else np.empty((0, config.segment_dim))
        if len(inst):
            noisy = rng.random(len(inst)) < config.noise_rate
            inst[noisy] = rng.uniform(0.0, config.box, size=(int(noisy.sum()), config.segment_dim))
        bags.append(MimlBag(f"bag{i:0{width}d}", inst, LabelSet(tuple(Y[i]))))
    return MimlDataset(vocabulary, tuple(bags))
