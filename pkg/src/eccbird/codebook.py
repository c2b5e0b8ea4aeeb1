"""k-means++ codebook over segment features and histogram-of-segments reduction."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .dataset import MimlBag, MimlDataset, MlcDataset, MlcExample

FORMAT_VERSION = "eccbird.codebook/1"


class CodebookError(ValueError):
    pass


@dataclass(frozen=True)
class CodebookConfig:
    k: int = 50
    max_iterations: int = 100
    tolerance: float = 1e-6
    seed: int = 0
    standardize: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise CodebookError("k must be >= 1")
        if self.max_iterations < 0:
            raise CodebookError("max_iterations must be >= 0")
        if self.tolerance < 0:
            raise CodebookError("tolerance must be >= 0")

    def to_dict(self) -> dict:
        return {"k": self.k, "max_iterations": self.max_iterations, "tolerance": self.tolerance,
                "seed": self.seed, "standardize": self.standardize}


@dataclass(frozen=True, eq=False)
class Codebook:
    centers: np.ndarray           # (k, dim), in the (optionally standardized) space
    inertia: float
    config: CodebookConfig = field(default_factory=CodebookConfig)
    offset: np.ndarray | None = None
    scale: np.ndarray | None = None
    fingerprint: str = ""
    inertia_history: tuple[float, ...] = ()

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def transform(self, segments) -> np.ndarray:
        S = np.asarray(segments, dtype=np.float64)
        if S.ndim == 1:
            S = S[None, :]
        if S.shape[1] != self.dim:
            raise CodebookError(f"segment dimension {S.shape[1]} does not match codebook dimension {self.dim}")
        if self.offset is not None:
            S = (S - self.offset) / self.scale
        return S

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "k": self.k,
            "dimension": self.dim,
            "centers": self.centers.tolist(),
            "inertia": self.inertia,
            "config": self.config.to_dict(),
            "offset": None if self.offset is None else self.offset.tolist(),
            "scale": None if self.scale is None else self.scale.tolist(),
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Codebook":
        if data.get("format") != FORMAT_VERSION:
            raise CodebookError(f"unsupported codebook format {data.get('format')!r}")
        centers = np.asarray(data["centers"], dtype=np.float64).reshape(int(data["k"]), int(data["dimension"]))
        opt = lambda v: None if v is None else np.asarray(v, dtype=np.float64)
        return cls(centers, float(data["inertia"]), CodebookConfig(**data["config"]),
                   opt(data.get("offset")), opt(data.get("scale")), data.get("fingerprint", ""))


def fingerprint(segments: np.ndarray) -> str:
    S = np.ascontiguousarray(segments, dtype=np.float64)
    h = hashlib.sha256()
    h.update(np.asarray(S.shape, dtype=np.int64).tobytes())
    h.update(S.tobytes())
    return h.hexdigest()


def squared_distances(points, centers) -> np.ndarray:
    """(n, k) squared Euclidean distances, computed from explicit differences."""
    P = np.asarray(points, dtype=np.float64)
    C = np.asarray(centers, dtype=np.float64)
    out = np.empty((P.shape[0], C.shape[0]))
    step = max(1, 2_000_000 // max(1, C.size))
    for a in range(0, P.shape[0], step):
        diff = P[a:a + step, None, :] - C[None, :, :]
        out[a:a + step] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def kmeans_plusplus(points, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2 seeding: returns indices of the ``k`` chosen points.

    The first index is uniform; each later one is drawn with probability
    proportional to the squared distance to the nearest chosen center.
    """
    P = np.asarray(points, dtype=np.float64)
    n = P.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = squared_distances(P, P[chosen[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise CodebookError("fewer distinct points than requested centers")
        idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        while d2[idx] == 0:  # guard against landing on a zero-weight point at a float boundary
            idx -= 1
        chosen.append(idx)
        d2 = np.minimum(d2, squared_distances(P, P[idx][None, :])[:, 0])
    return np.asarray(chosen, dtype=np.int64)


def _assign(P, C):
    D = squared_distances(P, C)
    labels = np.argmin(D, axis=1)  # first minimum = lowest index on ties
    return labels, D[np.arange(P.shape[0]), labels]


def fit_codebook(segments, config: CodebookConfig | None = None) -> Codebook:
    """k-means++ seeding followed by Lloyd iterations.

    Iteration stops when no center moves more than ``tolerance`` or after
    ``max_iterations`` updates. A cluster left empty by an update is re-seeded
    with the point currently farthest from its center.
    """
    config = config or CodebookConfig()
    raw = np.asarray(segments, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] == 0:
        raise CodebookError("cannot fit a codebook on an empty segment pool")
    if not np.all(np.isfinite(raw)):
        raise CodebookError("segment features must be finite")
    distinct = np.unique(raw, axis=0).shape[0]
    if config.k > distinct:
        raise CodebookError(f"k={config.k} exceeds the {distinct} distinct segment(s); use a smaller k")

    offset = scale = None
    P = raw
    if config.standardize:
        offset = raw.mean(axis=0)
        scale = raw.std(axis=0)
        scale[scale == 0] = 1.0
        P = (raw - offset) / scale

    rng = np.random.default_rng(config.seed)
    C = P[kmeans_plusplus(P, config.k, rng)].copy()
    labels, d2 = _assign(P, C)
    history = [float(d2.sum())]
    for _ in range(config.max_iterations):
        newC = C.copy()
        counts = np.bincount(labels, minlength=config.k)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, P)
        filled = counts > 0
        newC[filled] = sums[filled] / counts[filled, None]
        for j in np.flatnonzero(~filled):
            far = int(np.argmax(d2))
            newC[j] = P[far]
            d2[far] = 0.0
        shift = np.sqrt(((newC - C) ** 2).sum(axis=1)).max()
        C = newC
        labels, d2 = _assign(P, C)
        history.append(float(d2.sum()))
        if shift < config.tolerance:
            break
    return Codebook(C, history[-1], config, offset, scale, fingerprint(raw), tuple(history))


def assign(codebook: Codebook, segment) -> int:
    """Index of the nearest center; ties go to the lowest index."""
    S = codebook.transform(segment)
    if S.shape[0] != 1:
        raise CodebookError("assign expects a single segment")
    return int(np.argmin(squared_distances(S, codebook.centers)[0]))


def assign_many(codebook: Codebook, segments) -> np.ndarray:
    S = codebook.transform(segments)
    if S.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    return np.argmin(squared_distances(S, codebook.centers), axis=1)


def histogram_features(codebook: Codebook, bag: MimlBag | np.ndarray) -> np.ndarray:
    """Fraction of the bag's segments assigned to each cluster; zeros for an empty bag."""
    inst = bag.instances if isinstance(bag, MimlBag) else np.asarray(bag, dtype=np.float64)
    h = np.zeros(codebook.k)
    if inst.shape[0] == 0:
        return h
    if inst.ndim != 2 or inst.shape[1] != codebook.dim:
        raise CodebookError(f"segment dimension {inst.shape[-1]} does not match codebook dimension {codebook.dim}")
    counts = np.bincount(assign_many(codebook, inst), minlength=codebook.k)
    return counts / inst.shape[0]


def reduce_miml(miml: MimlDataset, codebook: Codebook) -> MlcDataset:
    """One MLC example per bag: its histogram of segments, with labels copied."""
    return MlcDataset(miml.vocabulary, tuple(
        MlcExample(b.id, histogram_features(codebook, b), b.y) for b in miml.bags))
