"""Spectrogram front-end: STFT, supervised pixel segmentation, segment descriptors.

Spectrogram matrices are ``(frames, bins)``: axis 0 is time, axis 1 is
frequency. The frequency bin index is the pixel y-coordinate.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.io import wavfile

from .forest import ForestConfig, RandomForest, predict_proba, train_forest

logger = logging.getLogger(__name__)

WINDOW_SIZE = 17
PIXEL_FEATURES = WINDOW_SIZE * WINDOW_SIZE + 2
SEGMENTER_TREES = 100
SEGMENTER_DEPTH = 10
FORMAT_VERSION = "eccbird.segmenter/1"

DESCRIPTOR_NAMES = (
    "duration_s",
    "bandwidth_hz",
    "min_frequency_hz",
    "max_frequency_hz",
    "area_pixels",
    "density",
    "total_energy",
    "mean_intensity",
    "time_centroid",
    "frequency_centroid",
    "intensity_std",
    "frequency_entropy",
)


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Spectrogram:
    magnitudes: np.ndarray  # (frames, bins), non-negative
    sample_rate: float
    hop: int
    window: int

    def __post_init__(self):
        M = np.asarray(self.magnitudes, dtype=np.float64)
        if M.ndim != 2:
            raise SegmentationError("spectrogram must be a 2-D matrix")
        if not np.all(np.isfinite(M)) or np.any(M < 0):
            raise SegmentationError("spectrogram magnitudes must be finite and non-negative")
        object.__setattr__(self, "magnitudes", M)

    @property
    def shape(self):
        return self.magnitudes.shape

    @property
    def bin_hz(self) -> float:
        return self.sample_rate / self.window

    @property
    def frame_seconds(self) -> float:
        return self.hop / self.sample_rate


@dataclass(frozen=True, eq=False)
class Segment:
    pixels: np.ndarray  # (area, 2) rows of (frame, bin)

    @property
    def area(self) -> int:
        return self.pixels.shape[0]

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(first frame, last frame, lowest bin, highest bin), inclusive."""
        t, f = self.pixels[:, 0], self.pixels[:, 1]
        return int(t.min()), int(t.max()), int(f.min()), int(f.max())


def load_wav(path) -> tuple[np.ndarray, int]:
    """Read PCM or float WAV as float64 in [-1, 1], downmixing to mono."""
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        x = data / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return x, int(rate)


def compute_spectrogram(waveform, sample_rate: float = 16000, window: int = 512, hop: int = 256) -> Spectrogram:
    """Magnitude STFT with a periodic Hann window and no padding."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise SegmentationError("waveform must be mono (1-D)")
    if x.shape[0] < window:
        raise SegmentationError(f"waveform of {x.shape[0]} samples is shorter than the {window}-sample window")
    if hop < 1:
        raise SegmentationError("hop must be positive")
    frames = (x.shape[0] - window) // hop + 1
    idx = np.arange(window)[None, :] + hop * np.arange(frames)[:, None]
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(window) / window)
    mags = np.abs(np.fft.rfft(x[idx] * hann, axis=1))
    return Spectrogram(mags, float(sample_rate), hop, window)


def pixel_features(spectrogram, rows: slice | None = None) -> np.ndarray:
    """Per-pixel segmentation features, one row per pixel in row-major order.

    Each row is the 17x17 neighbourhood (zero outside the image), the
    frequency-bin index of the pixel and the neighbourhood mean.
    """
    M = spectrogram.magnitudes if isinstance(spectrogram, Spectrogram) else np.asarray(spectrogram, dtype=np.float64)
    h = WINDOW_SIZE // 2
    padded = np.pad(M, h)
    view = np.lib.stride_tricks.sliding_window_view(padded, (WINDOW_SIZE, WINDOW_SIZE))
    if rows is not None:
        view = view[rows]
    F, B = view.shape[:2]
    out = np.empty((F * B, PIXEL_FEATURES))
    win = view.reshape(F * B, WINDOW_SIZE * WINDOW_SIZE)
    out[:, :-2] = win
    out[:, -2] = np.tile(np.arange(B, dtype=np.float64), F)
    out[:, -1] = win.mean(axis=1)
    return out


@dataclass(eq=False)
class Segmenter:
    """Pixel classifier: probability that a pixel belongs to a vocalization."""

    forest: RandomForest

    def probability_map(self, spectrogram: Spectrogram, chunk_frames: int = 64) -> np.ndarray:
        F, B = spectrogram.shape
        out = np.empty((F, B))
        for a in range(0, F, chunk_frames):
            feats = pixel_features(spectrogram, slice(a, a + chunk_frames))
            out[a:a + chunk_frames] = predict_proba(self.forest, feats).reshape(-1, B)
        return out

    def to_dict(self) -> dict:
        return {"format": FORMAT_VERSION, "forest": self.forest.to_dict(include_in_bag=False)}

    @classmethod
    def from_dict(cls, data: dict) -> "Segmenter":
        if data.get("format") != FORMAT_VERSION:
            raise SegmentationError(f"unsupported segmenter format {data.get('format')!r}")
        return cls(RandomForest.from_dict(data["forest"]))


def train_segmenter(spectrograms, masks, config: ForestConfig | None = None,
                    pixels_per_image: int | None = 4000, seed: int = 0) -> Segmenter:
    """Fit the pixel forest on annotated spectrograms.

    ``pixels_per_image`` caps the pixels sampled from each annotation (half
    from the mask when possible); ``None`` uses every pixel.
    """
    config = config or ForestConfig(tree_count=SEGMENTER_TREES, max_depth=SEGMENTER_DEPTH, seed=seed)
    spectrograms = list(spectrograms)
    masks = list(masks)
    if not spectrograms:
        raise SegmentationError("no annotated spectrograms")
    if len(spectrograms) != len(masks):
        raise SegmentationError("need one mask per spectrogram")
    rng = np.random.default_rng(seed)
    Xs, ys = [], []
    for s, m in zip(spectrograms, masks):
        m = np.asarray(m).astype(bool)
        if m.shape != s.shape:
            raise SegmentationError(f"mask shape {m.shape} does not match spectrogram {s.shape}")
        flat = m.ravel()
        idx = np.arange(flat.size)
        if pixels_per_image is not None and flat.size > pixels_per_image:
            pos, neg = idx[flat], idx[~flat]
            n_pos = min(pos.size, pixels_per_image // 2)
            n_neg = min(neg.size, pixels_per_image - n_pos)
            idx = np.sort(np.concatenate([rng.choice(pos, n_pos, replace=False),
                                          rng.choice(neg, n_neg, replace=False)]))
        Xs.append(pixel_features(s)[idx])
        ys.append(flat[idx])
    return Segmenter(train_forest(np.vstack(Xs), np.concatenate(ys).astype(np.uint8), config))


def components(mask) -> list[Segment]:
    """4-connected components of a boolean mask, in scan order."""
    lab, count = ndimage.label(np.asarray(mask, dtype=bool))
    out = []
    for i in range(1, count + 1):
        out.append(Segment(np.argwhere(lab == i)))
    return out


def segment(spectrogram: Spectrogram, segmenter, prob_threshold: float = 0.5,
            min_pixels: int = 20) -> list[Segment]:
    """Threshold the segmenter's probability map and keep large components.

    ``segmenter`` is anything with ``probability_map(spectrogram)``.
    """
    probs = np.asarray(segmenter.probability_map(spectrogram))
    if probs.shape != spectrogram.shape:
        raise SegmentationError(f"probability map {probs.shape} does not match spectrogram {spectrogram.shape}")
    return [s for s in components(probs > prob_threshold) if s.area >= min_pixels]


def describe_segment(spectrogram: Spectrogram, seg: Segment) -> np.ndarray:
    """Twelve descriptors, ordered as :data:`DESCRIPTOR_NAMES`.

    Frequencies use bin lower edges, so a segment covering bins ``lo..hi``
    spans ``[lo, hi + 1) * bin_hz``. Centroids are intensity-weighted and
    expressed as a fraction of the bounding box (pixel centres at +0.5).
    """
    if seg.area == 0:
        raise SegmentationError("cannot describe an empty segment")
    t0, t1, f0, f1 = seg.bbox
    width = t1 - t0 + 1
    height = f1 - f0 + 1
    t = seg.pixels[:, 0]
    f = seg.pixels[:, 1]
    v = spectrogram.magnitudes[t, f]
    energy = float(v.sum())
    w = v if energy > 0 else np.ones_like(v)
    time_c = float(np.sum(w * (t - t0 + 0.5)) / w.sum() / width)
    freq_c = float(np.sum(w * (f - f0 + 0.5)) / w.sum() / height)
    profile = np.bincount(f - f0, weights=w, minlength=height)
    p = profile[profile > 0] / profile.sum()
    entropy = float(-(p * np.log(p)).sum())
    return np.array([
        width * spectrogram.frame_seconds,
        height * spectrogram.bin_hz,
        f0 * spectrogram.bin_hz,
        (f1 + 1) * spectrogram.bin_hz,
        float(seg.area),
        seg.area / (width * height),
        energy,
        float(v.mean()),
        time_c,
        freq_c,
        float(v.std()),
        entropy,
    ])


def load_mask(path) -> np.ndarray:
    """Binary annotation mask from a PNG (non-zero = segment) or a CSV of 0/1."""
    path = str(path)
    if path.lower().endswith(".png"):
        from PIL import Image

        return np.asarray(Image.open(path).convert("L")) > 0
    return np.loadtxt(path, delimiter=",", ndmin=2) > 0


def segments_json(recording_id: str, spectrogram: Spectrogram, segs) -> str:
    return json.dumps({
        "recording": recording_id,
        "frames": spectrogram.shape[0],
        "bins": spectrogram.shape[1],
        "segments": [{"bbox": {"frame_start": b[0], "frame_end": b[1], "bin_low": b[2], "bin_high": b[3]},
                      "area": s.area} for s, b in ((s, s.bbox) for s in segs)],
    }, indent=2)
