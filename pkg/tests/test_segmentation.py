import json

import numpy as np
import pytest
from PIL import Image
from scipy.io import wavfile

from eccbird.forest import ForestConfig
from eccbird.segmentation import (DESCRIPTOR_NAMES, PIXEL_FEATURES, SEGMENTER_DEPTH, SEGMENTER_TREES,
                                  Segment, SegmentationError, Segmenter, Spectrogram, components,
                                  compute_spectrogram, describe_segment, load_mask, load_wav,
                                  pixel_features, segment, segments_json, train_segmenter)


class OracleSegmenter:
    """Probability 1 exactly where the spectrogram is non-zero."""

    def probability_map(self, spec):
        return (spec.magnitudes > 0).astype(float)


def spec_of(M):
    return Spectrogram(np.asarray(M, dtype=float), 16000.0, 256, 512)


def rectangles(shape, boxes, value=1.0):
    M = np.zeros(shape)
    for t0, t1, f0, f1 in boxes:
        M[t0:t1 + 1, f0:f1 + 1] = value
    return M


class TestSpectrogram:
    def test_bin_centred_sine(self):
        sr, win, k = 16000, 512, 40
        t = np.arange(sr) / sr
        spec = compute_spectrogram(np.sin(2 * np.pi * k * sr / win * t), sr, win, 256)
        E = spec.magnitudes ** 2
        share = E / E.sum(axis=1, keepdims=True)
        assert np.all(np.argmax(E, axis=1) == k)
        # Hann window: main bin carries 1/4 / (1/4 + 2/16) of the frame energy
        np.testing.assert_allclose(share[:, k], 2 / 3, atol=1e-9)
        assert np.all(share[:, k - 1:k + 2].sum(axis=1) >= 1 - 1e-12)

    def test_silence(self):
        assert np.all(compute_spectrogram(np.zeros(2048)).magnitudes == 0)

    def test_frame_count(self):
        assert compute_spectrogram(np.ones(512)).shape == (1, 257)
        assert compute_spectrogram(np.ones(512 + 255)).shape[0] == 1
        assert compute_spectrogram(np.ones(512 + 256)).shape[0] == 2
        assert compute_spectrogram(np.ones(10000)).shape[0] == (10000 - 512) // 256 + 1

    def test_errors(self):
        with pytest.raises(SegmentationError):
            compute_spectrogram(np.zeros(100))
        with pytest.raises(SegmentationError):
            compute_spectrogram(np.zeros((1024, 2)))
        with pytest.raises(SegmentationError):
            Spectrogram(-np.ones((2, 2)), 1.0, 1, 1)

    def test_load_wav(self, tmp_path):
        x = (np.sin(np.arange(2000) / 5) * 16000).astype(np.int16)
        wavfile.write(tmp_path / "m.wav", 8000, np.column_stack([x, x]))
        y, sr = load_wav(tmp_path / "m.wav")
        assert sr == 8000 and y.ndim == 1
        np.testing.assert_allclose(y, x / 32768.0)


class TestPixelFeatures:
    def test_dimension(self):
        assert PIXEL_FEATURES == 291
        assert pixel_features(spec_of(np.ones((4, 5)))).shape == (20, 291)

    def test_single_pixel_zero_padding(self):
        f = pixel_features(spec_of([[3.0]]))[0]
        window = f[:289].reshape(17, 17)
        assert window[8, 8] == 3.0 and window.sum() == 3.0
        assert f[289] == 0.0 and f[290] == pytest.approx(3.0 / 289)

    def test_window_orientation(self, rng):
        M = rng.random((20, 30))
        F = pixel_features(spec_of(M))
        i, j = 10, 12
        row = F[i * 30 + j]
        np.testing.assert_array_equal(row[:289].reshape(17, 17), M[i - 8:i + 9, j - 8:j + 9])
        assert row[289] == j

    def test_row_slices_match(self, rng):
        M = rng.random((10, 6))
        np.testing.assert_array_equal(pixel_features(M, slice(3, 7)), pixel_features(M)[18:42])


class TestSegmentation:
    def test_one_rectangle(self):
        M = rectangles((60, 40), [(5, 34, 12, 21)])
        segs = segment(spec_of(M), OracleSegmenter())
        assert len(segs) == 1 and segs[0].bbox == (5, 34, 12, 21) and segs[0].area == 300

    def test_two_rectangles(self):
        M = rectangles((80, 60), [(2, 31, 3, 12), (40, 69, 30, 49)])
        segs = segment(spec_of(M), OracleSegmenter())
        assert sorted(s.bbox for s in segs) == [(2, 31, 3, 12), (40, 69, 30, 49)]

    def test_below_threshold_empty(self):
        class Low:
            def probability_map(self, spec):
                return np.full(spec.shape, 0.5)
        assert segment(spec_of(np.ones((30, 30))), Low()) == []

    def test_min_pixels_and_diagonal(self):
        M = np.zeros((30, 30))
        M[0, 0] = M[1, 1] = 1  # diagonal neighbours are separate components
        M[10:15, 10:14] = 1
        assert len(components(M > 0)) == 3
        assert [s.area for s in segment(spec_of(M), OracleSegmenter())] == [20]

    def test_components_consistency(self, rng):
        mask = rng.random((40, 40)) > 0.6
        segs = components(mask)
        seen = set()
        for s in segs:
            pix = {tuple(p) for p in s.pixels}
            assert not pix & seen
            seen |= pix
            assert all(mask[p] for p in pix)
            # connectivity: flood fill from one pixel reaches all
            todo, reach = [next(iter(pix))], set()
            while todo:
                p = todo.pop()
                if p in reach:
                    continue
                reach.add(p)
                for dt, df in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    q = (p[0] + dt, p[1] + df)
                    if q in pix:
                        todo.append(q)
            assert reach == pix
        assert len(seen) == mask.sum()

    def test_shape_mismatch(self):
        class Bad:
            def probability_map(self, spec):
                return np.zeros((2, 2))
        with pytest.raises(SegmentationError):
            segment(spec_of(np.ones((3, 3))), Bad())


class TestSegmenter:
    def test_all_zero_masks(self, rng):
        M = rng.random((20, 12))
        seg = train_segmenter([spec_of(M)], [np.zeros((20, 12))], ForestConfig(tree_count=3, max_depth=3))
        assert np.all(seg.probability_map(spec_of(rng.random((9, 12)))) == 0)

    def test_defaults_and_learning(self, rng):
        M = rng.random((40, 30)) * 0.1
        mask = np.zeros((40, 30), bool)
        mask[10:25, 5:15] = True
        M[mask] += 1.0
        seg = train_segmenter([spec_of(M)], [mask], pixels_per_image=600, seed=1)
        assert seg.forest.config.tree_count == SEGMENTER_TREES == 100
        assert seg.forest.config.max_depth == SEGMENTER_DEPTH == 10
        assert seg.forest.n_features == 291
        got = segment(spec_of(M), seg)
        assert len(got) == 1 and got[0].bbox == (10, 24, 5, 14)
        back = Segmenter.from_dict(json.loads(json.dumps(seg.to_dict())))
        np.testing.assert_array_equal(back.probability_map(spec_of(M)), seg.probability_map(spec_of(M)))

    def test_errors(self):
        with pytest.raises(SegmentationError):
            train_segmenter([], [])
        with pytest.raises(SegmentationError):
            train_segmenter([spec_of(np.ones((3, 3)))], [np.ones((2, 3))])


class TestDescriptors:
    def test_names(self):
        assert len(DESCRIPTOR_NAMES) == 12

    def test_uniform_full_box(self):
        M = rectangles((20, 20), [(3, 8, 4, 7)], 2.0)
        d = dict(zip(DESCRIPTOR_NAMES, describe_segment(spec_of(M), components(M > 0)[0])))
        assert d["density"] == 1.0
        assert d["time_centroid"] == pytest.approx(0.5) and d["frequency_centroid"] == pytest.approx(0.5)
        assert d["area_pixels"] == 24 and d["total_energy"] == 48 and d["intensity_std"] == 0
        assert d["duration_s"] == pytest.approx(6 * 256 / 16000)
        assert d["min_frequency_hz"] == pytest.approx(4 * 31.25)
        assert d["max_frequency_hz"] == pytest.approx(8 * 31.25)
        assert d["frequency_entropy"] == pytest.approx(np.log(4))

    def test_single_pixel(self):
        s = spec_of(rectangles((5, 5), [(2, 2, 3, 3)]))
        d = dict(zip(DESCRIPTOR_NAMES, describe_segment(s, Segment(np.array([[2, 3]])))))
        assert d["area_pixels"] == 1 and d["bandwidth_hz"] == pytest.approx(s.bin_hz)
        assert d["frequency_entropy"] == 0

    def test_scaling(self, rng):
        M = rng.random((30, 30))
        mask = rng.random((30, 30)) > 0.4
        seg = max(components(mask), key=lambda s: s.area)
        a = describe_segment(spec_of(M), seg)
        b = describe_segment(spec_of(2 * M), seg)
        names = list(DESCRIPTOR_NAMES)
        for n in ("total_energy", "mean_intensity", "intensity_std"):
            assert b[names.index(n)] == pytest.approx(2 * a[names.index(n)], rel=1e-12)
        for n in ("density", "time_centroid", "frequency_centroid", "frequency_entropy", "area_pixels"):
            assert b[names.index(n)] == pytest.approx(a[names.index(n)], rel=1e-12)
        assert np.all(np.isfinite(a))
        np.testing.assert_array_equal(a, describe_segment(spec_of(M), seg))

    def test_empty(self):
        with pytest.raises(SegmentationError):
            describe_segment(spec_of(np.ones((2, 2))), Segment(np.zeros((0, 2), dtype=int)))


class TestIO:
    def test_masks(self, tmp_path):
        m = np.zeros((4, 6), np.uint8)
        m[1:3, 2:5] = 255
        Image.fromarray(m).save(tmp_path / "m.png")
        np.savetxt(tmp_path / "m.csv", (m > 0).astype(int), delimiter=",", fmt="%d")
        np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), m > 0)
        np.testing.assert_array_equal(load_mask(tmp_path / "m.csv"), m > 0)

    def test_json(self):
        M = rectangles((10, 10), [(1, 2, 3, 4)])
        data = json.loads(segments_json("r1", spec_of(M), components(M > 0)))
        assert data["segments"][0]["bbox"] == {"frame_start": 1, "frame_end": 2, "bin_low": 3, "bin_high": 4}
