"""Acceptance suite: one pass/fail line per criterion in the terminal summary.

Criterion 7 needs external HJA data. Point ``ECCBIRD_HJA_MLC`` (histogram
features as an MLC CSV, or ``ECCBIRD_HJA_SEGMENTS`` + ``ECCBIRD_HJA_LABELS``)
and ``ECCBIRD_HJA_FOLDS`` at the files to enable it; otherwise it is skipped.
"""
import os
import time

import numpy as np
import pytest
from scipy import stats

import oracles
from eccbird.chains import (THRESHOLD_GRID, calibrate_thresholds, oob_scores, threshold_errors,
                            train_br, train_ecc)
from eccbird.cli import main
from eccbird.codebook import CodebookConfig, fit_codebook, kmeans_plusplus
from eccbird.dataset import SyntheticConfig, generate_synthetic
from eccbird.experiment import ExperimentConfig, run_experiment
from eccbird.forest import ForestConfig, RandomForest, predict_proba, train_forest
from eccbird.metrics import PredictionBatch, evaluate
from eccbird.segmentation import PIXEL_FEATURES, Spectrogram, pixel_features, segment

from conftest import make_mlc


def test_metric_oracle_equivalence(criterion):
    with criterion(1, "metric oracle equivalence, 200 batches, <= 1e-12, < 10 s") as c:
        rng = np.random.default_rng(1)
        start = time.perf_counter()
        worst = 0.0
        for _ in range(200):
            cc, n = int(rng.integers(1, 7)), int(rng.integers(1, 21))
            Y, P = rng.integers(0, 2, (n, cc)), rng.integers(0, 2, (n, cc))
            S = rng.integers(0, 5, (n, cc)) / 4.0 if rng.random() < 0.5 else rng.random((n, cc))
            r = evaluate(PredictionBatch(Y, S, P))
            Yl, Sl, Pl = Y.tolist(), S.tolist(), P.tolist()
            ref = [oracles.hamming(Yl, Pl), oracles.subset01(Yl, Pl), oracles.rank_loss(Yl, Sl),
                   oracles.one_error(Yl, Sl), oracles.coverage(Yl, Sl)]
            got = [r.hamming_loss, r.subset_01_loss, r.rank_loss, r.one_error, r.coverage]
            worst = max(worst, max(abs(a - b) for a, b in zip(got, ref)))
        elapsed = time.perf_counter() - start
        c.detail = f"max deviation {worst:.1e}, {elapsed:.2f} s"
        assert worst <= 1e-12
        assert elapsed < 10


def test_chain_dimension_invariant(criterion):
    with criterion(2, "chain position j consumes d+j-1 inputs, 20 configs, < 30 s") as c:
        rng = np.random.default_rng(2)
        start = time.perf_counter()
        checked = 0
        for _ in range(20):
            d, cc, L = int(rng.integers(1, 12)), int(rng.integers(1, 7)), int(rng.integers(1, 6))
            ds = make_mlc(rng.random((25, d)), rng.integers(0, 2, (25, cc)))
            m = train_ecc(ds, L, ForestConfig(tree_count=2, max_depth=4), int(rng.integers(1000)))
            for ch in m.chains:
                for j, f in enumerate(ch.forests, start=1):
                    assert f.n_features == d + j - 1
                    checked += 1
        elapsed = time.perf_counter() - start
        c.detail = f"{checked} chain positions, {elapsed:.2f} s"
        assert elapsed < 30


def test_oob_purity_and_threshold_optimality(criterion, monkeypatch):
    with criterion(3, "OOB purity from bootstrap logs and grid re-scan optimality, < 30 s") as c:
        start = time.perf_counter()
        ds = generate_synthetic(SyntheticConfig(c=4, n=80, seed=3))
        mlc = make_mlc(np.vstack([b.instances.mean(axis=0) for b in ds.bags]),
                       [b.y.bits for b in ds.bags])
        models = [train_br(mlc, ForestConfig(tree_count=30, max_depth=8), 1),
                  train_ecc(mlc, 5, ForestConfig(tree_count=10, max_depth=8), 1)]
        clean = [oob_scores(m, mlc) for m in models]

        # instrument per-tree outputs: every in-bag (tree, instance) entry becomes NaN,
        # so any in-bag tree reaching an OOB average would surface as a NaN score
        log = []
        real = RandomForest.tree_outputs

        def poisoned(self, X):
            out = real(self, X).copy()
            out[self.in_bag > 0] = np.nan
            log.append(int((self.in_bag > 0).sum()))
            return out

        monkeypatch.setattr(RandomForest, "tree_outputs", poisoned)
        for model, ref in zip(models, clean):
            S = oob_scores(model, mlc)
            assert np.all(np.isfinite(S))
            np.testing.assert_array_equal(S, ref)
        monkeypatch.undo()

        for model, S in zip(models, clean):
            t = calibrate_thresholds(model, mlc)
            for j in range(mlc.vocabulary.c):
                errs = threshold_errors(S[:, j], mlc.Y[:, j])
                assert len(errs) == len(THRESHOLD_GRID) == 999
                mine = int(((S[:, j] > t.t[j]) != mlc.Y[:, j]).sum())
                assert errs.min() >= mine
        elapsed = time.perf_counter() - start
        c.detail = f"{len(log)} forests replayed, {sum(log)} in-bag entries poisoned, {elapsed:.2f} s"
        assert len(log) == 4 + 5 * 4
        assert elapsed < 30


def test_kmeanspp_statistics(criterion):
    with criterion(4, "Lloyd monotone on 50 datasets; D^2 seeding chi-square p > 0.001, < 30 s") as c:
        start = time.perf_counter()
        for seed in range(50):
            rng = np.random.default_rng(seed)
            P = rng.normal(size=(int(rng.integers(30, 200)), int(rng.integers(1, 6))))
            h = np.array(fit_codebook(P, CodebookConfig(k=int(rng.integers(2, 10)), seed=seed)).inertia_history)
            assert np.all(np.diff(h) <= 1e-12 * h[:-1])
        P = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 3.0]])
        counts = np.zeros((4, 4))
        rng = np.random.default_rng(4)
        for _ in range(10_000):
            a, b = kmeans_plusplus(P, 2, rng)
            counts[a, b] += 1
        pvals = []
        for a in range(4):
            w = ((P - P[a]) ** 2).sum(axis=1)
            keep = w > 0
            assert counts[a, ~keep].sum() == 0
            pvals.append(stats.chisquare(counts[a, keep], counts[a].sum() * w[keep] / w.sum()).pvalue)
        first = stats.chisquare(counts.sum(axis=1)).pvalue
        elapsed = time.perf_counter() - start
        c.detail = f"min p {min(pvals + [first]):.3f}, {elapsed:.2f} s"
        assert min(pvals) > 0.001 and first > 0.001
        assert elapsed < 30


def test_degenerate_equivalence(criterion):
    with criterion(5, "c=1: BR, ECC and plain forest scores identical") as c:
        rng = np.random.default_rng(5)
        X = rng.normal(size=(60, 4))
        ds = make_mlc(X, (X[:, :1] + 0.3 * rng.normal(size=(60, 1)) > 0).astype(int))
        cfg = ForestConfig(tree_count=25, max_depth=15)
        Q = rng.normal(size=(40, 4))
        plain = predict_proba(train_forest(X, ds.Y[:, 0], cfg.replace(seed=17)), Q)
        br = train_br(ds, cfg, 17).scores(Q)[:, 0]
        ecc = train_ecc(ds, 1, cfg, 17).scores(Q)[:, 0]
        c.detail = f"max |BR-plain| {np.abs(br - plain).max():.0e}, max |ECC-plain| {np.abs(ecc - plain).max():.0e}"
        np.testing.assert_array_equal(br, plain)
        np.testing.assert_array_equal(ecc, plain)


# Frozen at the first verified run of the default-seed benchmark.
SYNTHETIC_WINLOSS = "4-1"


@pytest.mark.slow
def test_synthetic_benchmark(criterion):
    with criterion(6, "synthetic c=6 n=300 rho=0.8 k=20, 10x10-fold, < 5 min, frozen ECC vs BR record") as c:
        start = time.perf_counter()
        data = generate_synthetic(SyntheticConfig(c=6, n=300, label_correlation=0.8))
        res = run_experiment(ExperimentConfig(name="synthetic", k=20, fold_count=10, repetitions=10), data)
        elapsed = time.perf_counter() - start
        record = res.winloss.record("ecc", "br")
        c.detail = f"ECC-RF vs BR-RF {record}, {elapsed:.0f} s"
        assert len(res.cells) == 2 * 10 * 10
        assert record == SYNTHETIC_WINLOSS
        assert elapsed < 300


REFERENCE_ROWS = {
    "ecc": {"hamming_loss": 0.0485, "rank_loss": 0.0246, "one_error": 0.0482, "coverage": 1.6555},
    "br": {"hamming_loss": 0.0489, "rank_loss": 0.0258, "one_error": 0.044, "coverage": 1.6805},
}
TOLERANCE = {"hamming_loss": 0.010, "rank_loss": 0.010, "one_error": 0.05, "coverage": 0.20}


@pytest.mark.slow
def test_hja_reproduction(criterion):
    with criterion(7, "HJA 10x5-fold reproduction within stated tolerances (needs external data)") as c:
        folds = os.environ.get("ECCBIRD_HJA_FOLDS")
        mlc = os.environ.get("ECCBIRD_HJA_MLC")
        segs, labels = os.environ.get("ECCBIRD_HJA_SEGMENTS"), os.environ.get("ECCBIRD_HJA_LABELS")
        if not folds or not (mlc or (segs and labels)):
            pytest.skip("HJA features/folds not supplied (set ECCBIRD_HJA_MLC or "
                        "ECCBIRD_HJA_SEGMENTS+ECCBIRD_HJA_LABELS, and ECCBIRD_HJA_FOLDS)")
        cfg = ExperimentConfig(name="hja", mlc=mlc, segments=None if mlc else segs,
                               labels=None if mlc else labels, folds=folds,
                               vocabulary=os.environ.get("ECCBIRD_HJA_VOCABULARY"),
                               fold_count=5, repetitions=10)
        start = time.perf_counter()
        res = run_experiment(cfg)
        elapsed = time.perf_counter() - start
        misses = [f"{clf} {m} {res.means[clf].value(m):.4f} vs {ref}"
                  for clf, row in REFERENCE_ROWS.items() for m, ref in row.items()
                  if abs(res.means[clf].value(m) - ref) > TOLERANCE[m]]
        c.detail = f"{elapsed:.0f} s; " + ("; ".join(misses) if misses else "all within tolerance")
        assert not misses


def test_segmentation_sanity(criterion):
    with criterion(8, "two rectangles -> 2 segments with exact boxes; pixel features 291-d") as c:
        M = np.zeros((100, 80))
        boxes = [(10, 39, 5, 14), (50, 89, 40, 71)]
        for t0, t1, f0, f1 in boxes:
            M[t0:t1 + 1, f0:f1 + 1] = 1.0
        spec = Spectrogram(M, 16000.0, 256, 512)

        class Oracle:
            def probability_map(self, s):
                return (s.magnitudes > 0).astype(float)

        got = sorted(s.bbox for s in segment(spec, Oracle()))
        dim = pixel_features(spec, slice(0, 1)).shape[1]
        c.detail = f"boxes {got}, feature dim {dim}"
        assert got == boxes
        assert dim == PIXEL_FEATURES == 291


def _pipeline(d):
    steps = [
        ["synth", "--c", 4, "--n", 40, "--seed", 1, "--out", d],
        ["codebook", "fit", "--segments", d / "segments.csv", "--k", 8, "--seed", 2, "--out", d / "cb.json"],
        ["featurize", "--segments", d / "segments.csv", "--labels", d / "labels.csv", "--vocabulary",
         d / "vocabulary.txt", "--codebook", d / "cb.json", "--out", d / "mlc.csv"],
        ["train", "--data", d / "mlc.csv", "--classifier", "br", "--trees", 20, "--seed", 3,
         "--out", d / "br.json"],
        ["train", "--data", d / "mlc.csv", "--classifier", "ecc", "--chains", 3, "--trees", 8, "--seed", 3,
         "--out", d / "ecc.json"],
        ["calibrate", "--model", d / "ecc.json", "--data", d / "mlc.csv", "--out", d / "ecc_cal.json"],
        ["predict", "--model", d / "ecc_cal.json", "--data", d / "mlc.csv", "--out", d / "pred.csv"],
        ["evaluate", "--model", d / "ecc_cal.json", "--data", d / "mlc.csv", "--out", d / "eval.csv"],
        ["experiment", "--segments", d / "segments.csv", "--labels", d / "labels.csv", "--k", 6,
         "--chains", 2, "--ecc-trees", 4, "--br-trees", 8, "--repetitions", 2, "--fold-count", 3,
         "--seed", 4, "--out", d / "exp"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv


def test_reproducibility(criterion, tmp_path, capsys):
    with criterion(9, "reruns with identical config and seed give byte-identical files") as c:
        _pipeline(tmp_path / "a")
        _pipeline(tmp_path / "b")
        capsys.readouterr()
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
        c.detail = f"{len(files)} files compared, {len(differ)} differ"
        assert len(files) >= 12 and not differ
