"""Binary relevance and ensembles of classifier chains over random forests.

Both learners expose per-class scores in [0, 1]; label sets come from
per-class thresholds calibrated on out-of-bag estimates of the training
data.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dataset import DataError, LabelSet, LabelVocabulary, MlcDataset
from .forest import ForestConfig, RandomForest, oob_with_fallback, predict_proba, train_forest

logger = logging.getLogger(__name__)

FORMAT_VERSION = "eccbird.model/1"

BR_TREES = 25 ** 2
ECC_CHAINS = 25
ECC_TREES = 25

#: Candidate thresholds 0.001, 0.002, ..., 0.999.
THRESHOLD_GRID = np.arange(1, 1000) / 1000.0


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ChainOrder:
    """Class visiting order of one chain: position ``j`` predicts class ``pi[j]``."""

    pi: tuple[int, ...]

    def __post_init__(self):
        pi = tuple(int(v) for v in self.pi)
        if sorted(pi) != list(range(len(pi))):
            raise ModelError(f"{pi} is not a permutation of 0..{len(pi) - 1}")
        object.__setattr__(self, "pi", pi)

    def __len__(self):
        return len(self.pi)


@dataclass(frozen=True, eq=False)
class ThresholdVector:
    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        if t.ndim != 1 or np.any(t <= 0) or np.any(t >= 1):
            raise ModelError("thresholds must be a vector of values in (0, 1)")
        object.__setattr__(self, "t", t)

    @classmethod
    def single(cls, value: float, c: int) -> "ThresholdVector":
        return cls(np.full(c, float(value)))

    def __len__(self):
        return len(self.t)


@dataclass(eq=False)
class Chain:
    order: ChainOrder
    forests: list[RandomForest]


@dataclass(eq=False)
class BrModel:
    vocabulary: LabelVocabulary
    d: int
    forests: list[RandomForest]
    thresholds: ThresholdVector | None = None

    mode = "br"

    def scores(self, X) -> np.ndarray:
        return br_scores(self, X)


@dataclass(eq=False)
class EccModel:
    vocabulary: LabelVocabulary
    d: int
    chains: list[Chain]
    thresholds: ThresholdVector | None = None

    mode = "ecc"

    @property
    def chain_count(self) -> int:
        return len(self.chains)

    def scores(self, X) -> np.ndarray:
        return ecc_scores(self, X)


def _forest_seed(seed: int, index: int) -> int:
    return seed + index


def _check_training(dataset: MlcDataset):
    if dataset.n < 2:
        raise ModelError(f"need at least 2 training examples, got {dataset.n}")


def train_br(dataset: MlcDataset, config: ForestConfig | None = None, seed: int = 0) -> BrModel:
    """One forest per class on ``(x_i, Y_i^j)``; class ``j`` uses seed ``seed + j``."""
    config = config or ForestConfig(tree_count=BR_TREES)
    _check_training(dataset)
    forests = [train_forest(dataset.X, dataset.Y[:, j], config.replace(seed=_forest_seed(seed, j)))
               for j in range(dataset.vocabulary.c)]
    return BrModel(dataset.vocabulary, dataset.d, forests)


def chain_orders(c: int, chain_count: int, seed: int) -> list[ChainOrder]:
    """Independent uniform permutations; chain ``l`` depends only on ``(seed, l)``."""
    return [ChainOrder(tuple(np.random.default_rng([seed, l, 1]).permutation(c)))
            for l in range(chain_count)]


def chain_training_features(X, Y, order: ChainOrder, position: int) -> np.ndarray:
    """Inputs of chain position ``position``: x followed by the true bits of earlier classes."""
    prev = list(order.pi[:position])
    return np.hstack([np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)[:, prev]])


def train_ecc(dataset: MlcDataset, chain_count: int = ECC_CHAINS,
              config: ForestConfig | None = None, seed: int = 0) -> EccModel:
    """Train ``chain_count`` chains, each over its own random class order.

    Position ``j`` of chain ``l`` sees ``d + j`` inputs (0-based ``j``) and
    uses forest seed ``seed + l * c + j``.
    """
    config = config or ForestConfig(tree_count=ECC_TREES)
    _check_training(dataset)
    if chain_count < 1:
        raise ModelError("chain_count must be >= 1")
    c = dataset.vocabulary.c
    chains = []
    for l, order in enumerate(chain_orders(c, chain_count, seed)):
        forests = []
        for j, cls in enumerate(order.pi):
            Xj = chain_training_features(dataset.X, dataset.Y, order, j)
            forests.append(train_forest(Xj, dataset.Y[:, cls],
                                        config.replace(seed=_forest_seed(seed, l * c + j))))
        chains.append(Chain(order, forests))
    return EccModel(dataset.vocabulary, dataset.d, chains)


def _as_matrix(x, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != d:
        raise ModelError(f"expected {d} features, got shape {x.shape}")
    return X, single


def chain_outputs(chain: Chain, X) -> np.ndarray:
    """Per-position probabilities of one chain, (m, c) in chain order.

    Each position receives x followed by the probabilities produced at the
    earlier positions, so position ``j`` sees exactly ``d + j`` inputs.
    """
    X = np.asarray(X, dtype=np.float64)
    c = len(chain.order)
    out = np.empty((X.shape[0], c))
    Xp = np.empty((X.shape[0], X.shape[1] + c - 1))
    Xp[:, :X.shape[1]] = X
    d = X.shape[1]
    for j, forest in enumerate(chain.forests):
        out[:, j] = predict_proba(forest, Xp[:, :d + j])
        if j < c - 1:
            Xp[:, d + j] = out[:, j]
    return out


def ecc_scores(model: EccModel, x) -> np.ndarray:
    """Class scores: chain probabilities summed into class slots, divided by L."""
    X, single = _as_matrix(x, model.d)
    c = model.vocabulary.c
    scores = np.zeros((X.shape[0], c))
    for chain in model.chains:
        scores[:, list(chain.order.pi)] += chain_outputs(chain, X)
    scores /= len(model.chains)
    return scores[0] if single else scores


def br_scores(model: BrModel, x) -> np.ndarray:
    X, single = _as_matrix(x, model.d)
    scores = np.column_stack([predict_proba(f, X) for f in model.forests])
    return scores[0] if single else scores


def model_scores(model, x) -> np.ndarray:
    if isinstance(model, EccModel):
        return ecc_scores(model, x)
    if isinstance(model, BrModel):
        return br_scores(model, x)
    raise ModelError(f"not a model: {type(model).__name__}")


# --------------------------------------------------------------------------
# thresholds


def oob_scores(model, dataset: MlcDataset) -> np.ndarray:
    """(n, c) out-of-bag class scores on the model's own training data.

    For ECC the chain-``l`` estimate for a class is computed on the input the
    forest was trained with (x plus the true earlier bits) and the estimates
    are averaged over chains.
    """
    _check_same_data(model, dataset)
    if isinstance(model, BrModel):
        return np.column_stack([oob_with_fallback(f, dataset.X, f"class {model.vocabulary.names[j]}")
                                for j, f in enumerate(model.forests)])
    c = model.vocabulary.c
    total = np.zeros((dataset.n, c))
    for l, chain in enumerate(model.chains):
        for j, (cls, forest) in enumerate(zip(chain.order.pi, chain.forests)):
            Xj = chain_training_features(dataset.X, dataset.Y, chain.order, j)
            total[:, cls] += oob_with_fallback(
                forest, Xj, f"chain {l} class {model.vocabulary.names[cls]}")
    return total / len(model.chains)


def _check_same_data(model, dataset: MlcDataset):
    if model.vocabulary != dataset.vocabulary:
        raise ModelError("dataset vocabulary differs from the model's")
    if dataset.d != model.d:
        raise ModelError(f"model expects {model.d} features, dataset has {dataset.d}")
    forests = model.forests if isinstance(model, BrModel) else model.chains[0].forests
    in_bag = forests[0].in_bag
    if in_bag is None:
        raise ModelError("model has no bootstrap records; cannot calibrate")
    if in_bag.shape[1] != dataset.n:
        raise ModelError(f"model was trained on {in_bag.shape[1]} examples, dataset has {dataset.n}")


def threshold_errors(scores, labels) -> np.ndarray:
    """0/1 error count of ``I[score > t]`` for every grid threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pred = scores[None, :] > THRESHOLD_GRID[:, None]
    return (pred != labels[None, :]).sum(axis=1)


def best_threshold(scores, labels) -> float:
    """Smallest grid value with the fewest 0/1 errors."""
    return float(THRESHOLD_GRID[int(np.argmin(threshold_errors(scores, labels)))])


def calibrate_thresholds(model, dataset: MlcDataset, mode: str = "per-class") -> ThresholdVector:
    """Choose thresholds minimizing OOB 0/1 error on the training data.

    ``mode="per-class"`` scans each class separately; ``mode="single"``
    picks one threshold for all classes from the pooled scan.
    """
    S = oob_scores(model, dataset)
    Y = dataset.Y
    if mode == "per-class":
        return ThresholdVector(np.array([best_threshold(S[:, j], Y[:, j]) for j in range(S.shape[1])]))
    if mode == "single":
        return ThresholdVector.single(best_threshold(S.ravel(), Y.ravel()), S.shape[1])
    raise ModelError(f"unknown threshold mode {mode!r}")


def predict_set(scores, thresholds: ThresholdVector) -> LabelSet:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != thresholds.t.shape:
        raise ModelError(f"{scores.shape[0] if scores.ndim else 0} scores but {len(thresholds)} thresholds")
    return LabelSet(tuple((scores > thresholds.t).astype(int)))


def predict_sets(scores, thresholds: ThresholdVector) -> np.ndarray:
    """Batch form of :func:`predict_set`, returns an (m, c) uint8 matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != len(thresholds):
        raise ModelError(f"scores shape {scores.shape} does not match {len(thresholds)} thresholds")
    return (scores > thresholds.t[None, :]).astype(np.uint8)


# --------------------------------------------------------------------------
# serialization


def model_to_dict(model, include_in_bag: bool = True) -> dict:
    out = {
        "format": FORMAT_VERSION,
        "mode": model.mode,
        "vocabulary": list(model.vocabulary.names),
        "d": model.d,
        "thresholds": None if model.thresholds is None else model.thresholds.t.tolist(),
    }
    if isinstance(model, BrModel):
        out["forests"] = [f.to_dict(include_in_bag) for f in model.forests]
    else:
        out["chains"] = [{"permutation": list(ch.order.pi),
                          "forests": [f.to_dict(include_in_bag) for f in ch.forests]}
                         for ch in model.chains]
    return out


def model_from_dict(data: dict):
    if data.get("format") != FORMAT_VERSION:
        raise ModelError(f"unsupported model format {data.get('format')!r}")
    try:
        vocabulary = LabelVocabulary(tuple(data["vocabulary"]))
    except DataError as exc:
        raise ModelError(f"bad vocabulary in model: {exc}") from None
    d = int(data["d"])
    thresholds = None if data.get("thresholds") is None else ThresholdVector(data["thresholds"])
    if data["mode"] == "br":
        forests = [RandomForest.from_dict(f) for f in data["forests"]]
        if len(forests) != vocabulary.c:
            raise ModelError("BR model must have one forest per class")
        return BrModel(vocabulary, d, forests, thresholds)
    if data["mode"] == "ecc":
        chains = [Chain(ChainOrder(tuple(ch["permutation"])),
                        [RandomForest.from_dict(f) for f in ch["forests"]])
                  for ch in data["chains"]]
        for ch in chains:
            if len(ch.order) != vocabulary.c or len(ch.forests) != vocabulary.c:
                raise ModelError("every chain must cover all classes")
            for j, f in enumerate(ch.forests):
                if f.n_features != d + j:
                    raise ModelError(f"chain position {j} expects {f.n_features} inputs, not {d + j}")
        return EccModel(vocabulary, d, chains, thresholds)
    raise ModelError(f"unknown model mode {data['mode']!r}")
