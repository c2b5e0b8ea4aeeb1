"""Depth-limited random forest for binary targets.

Leaves keep the histogram of (bootstrap-weighted) training targets, so a
tree outputs ``count1 / (count0 + count1)`` and the forest the mean over
trees. Every tree keeps its bootstrap multiplicities, which is what makes
out-of-bag replay possible.

Tree ``t`` of a forest seeded with ``seed`` draws its bootstrap sample and
its per-node feature subsets from one RNG stream keyed on ``(seed, t)``, so
trees can be built in any order (or in parallel) with identical results.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

logger = logging.getLogger(__name__)

FORMAT_VERSION = "eccbird.forest/1"


class ForestError(ValueError):
    pass


@dataclass(frozen=True)
class ForestConfig:
    tree_count: int = 25
    max_depth: int = 15
    min_leaf: int = 1
    features_per_split: int | str = "sqrt"
    seed: int = 0

    def __post_init__(self):
        if self.tree_count < 1:
            raise ForestError("tree_count must be >= 1")
        if self.max_depth < 1:
            raise ForestError("max_depth must be >= 1")
        if self.min_leaf < 1:
            raise ForestError("min_leaf must be >= 1")
        if isinstance(self.features_per_split, str):
            if self.features_per_split not in ("sqrt", "all"):
                raise ForestError(f"features_per_split {self.features_per_split!r} not understood")
        elif self.features_per_split < 1:
            raise ForestError("features_per_split must be >= 1")
        if self.seed < 0:
            raise ForestError("seed must be non-negative")

    def split_features(self, d: int) -> int:
        if self.features_per_split == "sqrt":
            return max(1, math.ceil(math.sqrt(d)))
        if self.features_per_split == "all":
            return d
        return min(int(self.features_per_split), d)

    def replace(self, **kw) -> "ForestConfig":
        return ForestConfig(**{**self.to_dict(), **kw})

    def to_dict(self) -> dict:
        return {"tree_count": self.tree_count, "max_depth": self.max_depth,
                "min_leaf": self.min_leaf, "features_per_split": self.features_per_split,
                "seed": self.seed}


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Array form of one tree. ``feature[i] == -1`` marks a leaf.

    Internal nodes send ``x[feature] <= threshold`` to ``left``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    hist: np.ndarray  # (nodes, 2): counts of target 0 / target 1

    @property
    def node_count(self) -> int:
        return len(self.feature)

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] < 0

    def leaf_probability(self, i: int) -> float:
        c0, c1 = self.hist[i]
        return c1 / (c0 + c1)

    def depth(self) -> int:
        best = 0
        stack = [(0, 0)]
        while stack:
            i, dpt = stack.pop()
            if self.is_leaf(i):
                best = max(best, dpt)
            else:
                stack.append((int(self.left[i]), dpt + 1))
                stack.append((int(self.right[i]), dpt + 1))
        return best

    def predict_proba(self, x) -> float:
        i = 0
        while not self.is_leaf(i):
            i = self.left[i] if x[self.feature[i]] <= self.threshold[i] else self.right[i]
        return self.leaf_probability(i)


# --------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _scan_split(vals, ys, ws, cnt, w0, w1, W, min_leaf, f, best):
    """Scan one feature's sorted (value, target, weight) triples; update ``best`` in place.

    ``best`` holds (proxy, feature, threshold). Only strictly better splits
    replace it, so features scanned in ascending index order and thresholds
    in ascending value order resolve ties to the lowest of each.
    """
    l0 = 0.0
    l1 = 0.0
    for p in range(cnt - 1):
        if ys[p]:
            l1 += ws[p]
        else:
            l0 += ws[p]
        v = vals[p]
        vn = vals[p + 1]
        if v == vn:
            continue
        WL = l0 + l1
        WR = W - WL
        if WL < min_leaf or WR < min_leaf:
            continue
        r0 = w0 - l0
        r1 = w1 - l1
        proxy = (l0 * l0 + l1 * l1) / WL + (r0 * r0 + r1 * r1) / WR
        if proxy > best[0]:
            thr = v + (vn - v) / 2.0
            if thr >= vn:
                thr = v
            best[0] = proxy
            best[1] = f
            best[2] = thr


@njit(cache=True)
def _build_tree(X, y, gorder, inbag, seed, max_depth, min_leaf, mtry,
                feature, threshold, left, right, hist):
    n, d = X.shape
    np.random.seed(seed)
    for _ in range(n):
        inbag[np.random.randint(0, n)] += 1

    m = 0
    for i in range(n):
        if inbag[i] > 0:
            m += 1
    order = np.empty(m, dtype=np.int64)
    member = np.full(n, -1, dtype=np.int64)
    k = 0
    for i in range(n):
        if inbag[i] > 0:
            order[k] = i
            member[i] = 0
            k += 1

    feats = np.arange(d)
    chosen = np.empty(mtry, dtype=np.int64)
    vals = np.empty(m, dtype=np.float64)
    svals = np.empty(m, dtype=np.float64)
    sys_ = np.empty(m, dtype=np.uint8)
    sws = np.empty(m, dtype=np.float64)
    best = np.empty(3, dtype=np.float64)

    st_node = np.empty(2 * m + 1, dtype=np.int64)
    st_start = np.empty(2 * m + 1, dtype=np.int64)
    st_end = np.empty(2 * m + 1, dtype=np.int64)
    st_depth = np.empty(2 * m + 1, dtype=np.int64)
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = m
    st_depth[0] = 0
    sp = 1
    next_node = 1

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        start = st_start[sp]
        end = st_end[sp]
        depth = st_depth[sp]

        w0 = 0.0
        w1 = 0.0
        for p in range(start, end):
            i = order[p]
            if y[i]:
                w1 += inbag[i]
            else:
                w0 += inbag[i]
        hist[node, 0] = w0
        hist[node, 1] = w1
        feature[node] = -1
        W = w0 + w1
        if depth >= max_depth or w0 == 0.0 or w1 == 0.0 or W < 2 * min_leaf:
            continue

        # partial Fisher-Yates: the first mtry entries become the subset
        for a in range(mtry):
            b = a + np.random.randint(0, d - a)
            tmp = feats[a]
            feats[a] = feats[b]
            feats[b] = tmp
        for a in range(mtry):
            chosen[a] = feats[a]
        chosen.sort()

        best[0] = -1.0
        best[1] = -1.0
        best[2] = 0.0
        cnt = end - start
        # large nodes filter the presorted global order, small ones sort locally
        use_global = cnt * np.log2(cnt + 1.0) > n
        for a in range(mtry):
            f = chosen[a]
            if use_global:
                q = 0
                for r in range(n):
                    i = gorder[r, f]
                    if member[i] == node:
                        svals[q] = X[i, f]
                        sys_[q] = y[i]
                        sws[q] = inbag[i]
                        q += 1
            elif cnt <= 32:
                # insertion sort straight into the scan buffers
                for p in range(cnt):
                    i = order[start + p]
                    v = X[i, f]
                    q = p
                    while q > 0 and svals[q - 1] > v:
                        svals[q] = svals[q - 1]
                        sys_[q] = sys_[q - 1]
                        sws[q] = sws[q - 1]
                        q -= 1
                    svals[q] = v
                    sys_[q] = y[i]
                    sws[q] = inbag[i]
            else:
                for p in range(cnt):
                    vals[p] = X[order[start + p], f]
                srt = np.argsort(vals[:cnt])
                for p in range(cnt):
                    i = order[start + srt[p]]
                    svals[p] = vals[srt[p]]
                    sys_[p] = y[i]
                    sws[p] = inbag[i]
            _scan_split(svals, sys_, sws, cnt, w0, w1, W, min_leaf, f, best)

        if best[1] < 0:
            continue
        best_f = int(best[1])
        best_thr = best[2]

        lo = start
        hi = end - 1
        while lo <= hi:
            if X[order[lo], best_f] <= best_thr:
                member[order[lo]] = next_node
                lo += 1
            else:
                member[order[lo]] = next_node + 1
                tmp = order[lo]
                order[lo] = order[hi]
                order[hi] = tmp
                hi -= 1
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = next_node
        right[node] = next_node + 1
        # push right first so the left subtree is expanded first
        st_node[sp] = next_node + 1
        st_start[sp] = lo
        st_end[sp] = end
        st_depth[sp] = depth + 1
        sp += 1
        st_node[sp] = next_node
        st_start[sp] = start
        st_end[sp] = lo
        st_depth[sp] = depth + 1
        sp += 1
        next_node += 2
    return next_node


@njit(cache=True)
def _build_forest(X, y, gorder, seeds, max_depth, min_leaf, mtry,
                  inbag, feature, threshold, left, right, hist, node_count):
    for t in range(seeds.shape[0]):
        node_count[t] = _build_tree(X, y, gorder, inbag[t], seeds[t], max_depth, min_leaf, mtry,
                                    feature[t], threshold[t], left[t], right[t], hist[t])


@njit(cache=True)
def _tree_outputs(X, feature, threshold, left, right, leaf_prob):
    T = feature.shape[0]
    m = X.shape[0]
    out = np.empty((T, m), dtype=np.float64)
    for t in range(T):
        for r in range(m):
            i = 0
            while feature[t, i] >= 0:
                if X[r, feature[t, i]] <= threshold[t, i]:
                    i = left[t, i]
                else:
                    i = right[t, i]
            out[t, r] = leaf_prob[t, i]
    return out


@njit(cache=True)
def _forest_mean(X, feature, threshold, left, right, leaf_prob):
    T = feature.shape[0]
    m = X.shape[0]
    out = np.zeros(m, dtype=np.float64)
    for r in range(m):
        s = 0.0
        for t in range(T):
            i = 0
            while feature[t, i] >= 0:
                if X[r, feature[t, i]] <= threshold[t, i]:
                    i = left[t, i]
                else:
                    i = right[t, i]
            s += leaf_prob[t, i]
        out[r] = s / T
    return out


# --------------------------------------------------------------------------


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def tree_seeds(seed: int, tree_count: int) -> np.ndarray:
    """Per-tree 32-bit seeds; tree ``t`` depends only on ``(seed, t)``."""
    with np.errstate(over="ignore"):
        base = _splitmix64(np.array([seed], dtype=np.uint64))[0]
        z = _splitmix64(base ^ np.arange(tree_count, dtype=np.uint64))
    return (z >> np.uint64(32)).astype(np.uint32)


@dataclass(eq=False)
class RandomForest:
    """Packed forest: node arrays are ``(T, max_nodes)``; row ``t`` is tree ``t``."""

    config: ForestConfig
    n_features: int
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    hist: np.ndarray
    node_count: np.ndarray
    in_bag: np.ndarray | None = None  # (T, n) bootstrap multiplicities
    leaf_prob: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        h = self.hist.astype(np.float64)
        tot = h[..., 0] + h[..., 1]
        with np.errstate(invalid="ignore", divide="ignore"):
            self.leaf_prob = np.where(tot > 0, h[..., 1] / np.where(tot > 0, tot, 1.0), 0.0)

    @property
    def tree_count(self) -> int:
        return self.feature.shape[0]

    @property
    def trees(self) -> list[DecisionTree]:
        out = []
        for t in range(self.tree_count):
            k = int(self.node_count[t])
            out.append(DecisionTree(self.feature[t, :k].copy(), self.threshold[t, :k].copy(),
                                    self.left[t, :k].copy(), self.right[t, :k].copy(),
                                    self.hist[t, :k].copy()))
        return out

    @classmethod
    def from_trees(cls, trees, config: ForestConfig, n_features: int, in_bag=None) -> "RandomForest":
        T = len(trees)
        if T == 0:
            raise ForestError("a forest needs at least one tree")
        M = max(tr.node_count for tr in trees)
        feature = np.full((T, M), -1, dtype=np.int64)
        threshold = np.zeros((T, M))
        left = np.zeros((T, M), dtype=np.int64)
        right = np.zeros((T, M), dtype=np.int64)
        hist = np.zeros((T, M, 2), dtype=np.int64)
        counts = np.zeros(T, dtype=np.int64)
        for t, tr in enumerate(trees):
            k = tr.node_count
            _validate_tree(tr, n_features)
            feature[t, :k] = tr.feature
            threshold[t, :k] = tr.threshold
            left[t, :k] = tr.left
            right[t, :k] = tr.right
            hist[t, :k] = tr.hist
            counts[t] = k
        if in_bag is not None:
            in_bag = np.asarray(in_bag, dtype=np.int64)
            if in_bag.ndim != 2 or in_bag.shape[0] != T:
                raise ForestError("in_bag must have one row per tree")
        return cls(config, n_features, feature, threshold, left, right, hist, counts, in_bag)

    def subforest(self, trees) -> "RandomForest":
        """Forest restricted to the given tree indices (bootstrap records kept)."""
        idx = np.asarray(list(trees), dtype=np.int64)
        return RandomForest(self.config, self.n_features, self.feature[idx], self.threshold[idx],
                            self.left[idx], self.right[idx], self.hist[idx], self.node_count[idx],
                            None if self.in_bag is None else self.in_bag[idx])

    def _check_X(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ForestError(f"expected {self.n_features} features, got shape {X.shape}")
        return X

    def tree_outputs(self, X) -> np.ndarray:
        """(T, m) matrix of per-tree class-1 probabilities."""
        X = self._check_X(X)
        return _tree_outputs(X, self.feature, self.threshold, self.left, self.right, self.leaf_prob)

    def predict_proba(self, X):
        return predict_proba(self, X)

    # serialization ------------------------------------------------------

    def to_dict(self, include_in_bag: bool = True) -> dict:
        trees = []
        for tr in self.trees:
            trees.append({
                "feature": tr.feature.tolist(),
                "threshold": tr.threshold.tolist(),
                "left": tr.left.tolist(),
                "right": tr.right.tolist(),
                "hist": tr.hist.tolist(),
            })
        out = {"format": FORMAT_VERSION, "config": self.config.to_dict(),
               "n_features": self.n_features, "trees": trees}
        if include_in_bag and self.in_bag is not None:
            out["in_bag"] = self.in_bag.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RandomForest":
        if data.get("format") != FORMAT_VERSION:
            raise ForestError(f"unsupported forest format {data.get('format')!r}")
        trees = [DecisionTree(np.asarray(t["feature"], dtype=np.int64),
                              np.asarray(t["threshold"], dtype=np.float64),
                              np.asarray(t["left"], dtype=np.int64),
                              np.asarray(t["right"], dtype=np.int64),
                              np.asarray(t["hist"], dtype=np.int64).reshape(-1, 2))
                 for t in data["trees"]]
        return cls.from_trees(trees, ForestConfig(**data["config"]), int(data["n_features"]),
                              data.get("in_bag"))


def _validate_tree(tree: DecisionTree, n_features: int):
    k = tree.node_count
    if k == 0:
        raise ForestError("empty tree")
    for i in range(k):
        if tree.feature[i] < 0:
            if tree.hist[i].min() < 0 or tree.hist[i].sum() <= 0:
                raise ForestError(f"leaf {i} has an invalid histogram")
        else:
            if tree.feature[i] >= n_features:
                raise ForestError(f"node {i} splits on feature {tree.feature[i]} >= {n_features}")
            if not (0 < tree.left[i] < k and 0 < tree.right[i] < k):
                raise ForestError(f"node {i} has a missing child")


def train_forest(features, targets, config: ForestConfig | None = None) -> RandomForest:
    """Grow ``config.tree_count`` bootstrap trees on a binary target."""
    config = config or ForestConfig()
    X = np.ascontiguousarray(features, dtype=np.float64)
    y = np.ascontiguousarray(targets).astype(np.uint8)
    if X.ndim != 2:
        raise ForestError("features must be a 2-D matrix")
    n, d = X.shape
    if n < 2:
        raise ForestError(f"need at least 2 training examples, got {n}")
    if d == 0:
        raise ForestError("need at least one feature")
    if y.shape != (n,):
        raise ForestError(f"targets must have shape ({n},), got {y.shape}")
    if np.any(y > 1):
        raise ForestError("targets must be binary")
    if not np.all(np.isfinite(X)):
        raise ForestError("features must be finite")

    T = config.tree_count
    M = 2 * n + 1
    seeds = tree_seeds(config.seed, T)
    in_bag = np.zeros((T, n), dtype=np.int64)
    feature = np.full((T, M), -1, dtype=np.int64)
    threshold = np.zeros((T, M))
    left = np.zeros((T, M), dtype=np.int64)
    right = np.zeros((T, M), dtype=np.int64)
    hist = np.zeros((T, M, 2))
    node_count = np.zeros(T, dtype=np.int64)
    gorder = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable"))
    _build_forest(X, y, gorder, seeds, config.max_depth, config.min_leaf, config.split_features(d),
                  in_bag, feature, threshold, left, right, hist, node_count)
    used = int(node_count.max())
    return RandomForest(config, d, feature[:, :used].copy(), threshold[:, :used].copy(),
                        left[:, :used].copy(), right[:, :used].copy(),
                        hist[:, :used].astype(np.int64), node_count, in_bag)


def predict_proba(forest: RandomForest, x):
    """Mean leaf probability over trees; a scalar for one vector, an array for a matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = forest._check_X(x[None, :] if single else x)
    p = _forest_mean(X, forest.feature, forest.threshold, forest.left, forest.right,
                     forest.leaf_prob)
    return float(p[0]) if single else p


@dataclass(frozen=True, eq=False)
class OobEstimates:
    probs: np.ndarray    # NaN where undefined
    covered: np.ndarray  # bool
    counts: np.ndarray   # number of trees contributing per instance

    def filled(self, fallback) -> np.ndarray:
        """``probs`` with uncovered entries replaced from ``fallback``."""
        return np.where(self.covered, self.probs, fallback)


def oob_estimates(forest: RandomForest, features, targets=None) -> OobEstimates:
    """Out-of-bag class-1 probability for each training instance.

    ``targets`` is accepted for symmetry with training; only its length is
    checked.
    """
    if forest.in_bag is None:
        raise ForestError("forest has no bootstrap records; OOB replay impossible")
    X = forest._check_X(features)
    n = forest.in_bag.shape[1]
    if X.shape[0] != n or (targets is not None and len(targets) != n):
        raise ForestError(f"forest was trained on {n} instances, got {X.shape[0]}")
    out = forest.tree_outputs(X)
    mask = forest.in_bag == 0
    counts = mask.sum(axis=0)
    sums = np.where(mask, out, 0.0).sum(axis=0)
    covered = counts > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(covered, sums / np.maximum(counts, 1), np.nan)
    return OobEstimates(probs, covered, counts)


def oob_with_fallback(forest: RandomForest, features, what: str = "forest") -> np.ndarray:
    """OOB probabilities, using the full-forest prediction where no tree left an instance out."""
    est = oob_estimates(forest, features)
    if est.covered.all():
        return est.probs
    missing = int((~est.covered).sum())
    logger.warning("%s: %d instance(s) in every bootstrap sample; using full-forest prediction",
                   what, missing)
    return est.filled(predict_proba(forest, np.asarray(features, dtype=np.float64)))
