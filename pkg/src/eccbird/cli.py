"""Command-line entry point.

Every command accepts ``--config FILE``: a TOML file whose top-level keys or
``[<command>]`` table supply option defaults (option names with ``_`` for
``-``). Explicit flags override the file.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .chains import (ECC_CHAINS, ECC_TREES, BR_TREES, ModelError, ThresholdVector,
                     calibrate_thresholds, model_from_dict, model_scores, model_to_dict,
                     predict_sets, train_br, train_ecc)
from .codebook import Codebook, CodebookConfig, CodebookError, fit_codebook, reduce_miml
from .dataset import (LABEL_SEP, DataError, SyntheticConfig, generate_synthetic, load_miml,
                      load_mlc, load_segments, load_vocabulary, write_miml, write_mlc,
                      write_vocabulary)
from .experiment import (ConfigError, ExperimentConfig, ExperimentError, run_experiment,
                         summary_table, write_outputs)
from .forest import ForestConfig, ForestError
from .metrics import MetricsError, PredictionBatch, evaluate, format_table
from .segmentation import (SEGMENTER_DEPTH, SEGMENTER_TREES, SegmentationError, Segmenter,
                           compute_spectrogram, describe_segment, load_mask, load_wav, segment,
                           segments_json, train_segmenter)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXPECTED_ERRORS = (DataError, ModelError, ForestError, CodebookError, SegmentationError,
                   MetricsError, ConfigError, ExperimentError, OSError, KeyError,
                   json.JSONDecodeError, tomllib.TOMLDecodeError)


def _read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, separators=(",", ":"))
        f.write("\n")


def _load_model(path):
    return model_from_dict(_read_json(path))


def _load_data_for_model(model, data_path, vocabulary_path=None):
    if vocabulary_path:
        vocab = load_vocabulary(vocabulary_path)
        if vocab != model.vocabulary:
            raise ModelError("vocabulary mismatch: model has [{}], data vocabulary has [{}]".format(
                ", ".join(model.vocabulary.names), ", ".join(vocab.names)))
    try:
        data = load_mlc(data_path, model.vocabulary)
    except DataError as exc:
        raise ModelError(f"{data_path} does not match the model vocabulary: {exc}") from None
    if data.d != model.d:
        raise ModelError(f"model expects {model.d} features, {data_path} has {data.d}")
    return data


# --------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = SyntheticConfig(c=args.c, n=args.n, k_true=args.k_true,
                          mean_labels_per_bag=args.mean_labels, label_correlation=args.correlation,
                          noise_rate=args.noise, seed=args.seed, segment_dim=args.segment_dim)
    miml = generate_synthetic(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_miml(miml, out / "segments.csv", out / "labels.csv")
    write_vocabulary(miml.vocabulary, out / "vocabulary.txt")
    print(f"wrote {miml.n} bags ({sum(b.size for b in miml.bags)} segments) to {out}")


def cmd_train_segmenter(args):
    if len(args.audio) != len(args.mask):
        raise SegmentationError("give one --mask per --audio file")
    specs = []
    for wav in args.audio:
        x, rate = load_wav(wav)
        specs.append(compute_spectrogram(x, rate, args.window, args.hop))
    masks = [load_mask(m) for m in args.mask]
    cfg = ForestConfig(tree_count=args.trees, max_depth=args.max_depth, seed=args.seed)
    seg = train_segmenter(specs, masks, cfg, args.pixels_per_image, seed=args.seed)
    _write_json(seg.to_dict(), args.out)
    print(f"segmenter trained on {len(specs)} annotated spectrogram(s) -> {args.out}")


def cmd_segment(args):
    segmenter = Segmenter.from_dict(_read_json(args.segmenter))
    json_dir = Path(args.json_dir) if args.json_dir else None
    if json_dir:
        json_dir.mkdir(parents=True, exist_ok=True)
    total = 0
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bag_id", *[f"f{j + 1}" for j in range(12)]])
        for wav in args.audio:
            rec = Path(wav).stem
            x, rate = load_wav(wav)
            spec = compute_spectrogram(x, rate, args.window, args.hop)
            segs = segment(spec, segmenter, args.threshold, args.min_pixels)
            for s in segs:
                w.writerow([rec, *(repr(float(v)) for v in describe_segment(spec, s))])
            total += len(segs)
            if json_dir:
                (json_dir / f"{rec}.json").write_text(segments_json(rec, spec, segs) + "\n", encoding="utf-8")
    print(f"{total} segment(s) from {len(args.audio)} recording(s) -> {args.out}")


def cmd_codebook_fit(args):
    segs, _ = load_segments(args.segments)
    if not segs:
        raise CodebookError(f"{args.segments} contains no segments")
    pooled = np.vstack(list(segs.values()))
    cb = fit_codebook(pooled, CodebookConfig(k=args.k, max_iterations=args.max_iterations,
                                             tolerance=args.tolerance, seed=args.seed,
                                             standardize=args.standardize))
    _write_json(cb.to_dict(), args.out)
    print(f"codebook k={cb.k} inertia={cb.inertia:.6g} -> {args.out}")


def cmd_featurize(args):
    vocab = load_vocabulary(args.vocabulary) if args.vocabulary else None
    miml = load_miml(args.segments, args.labels, vocab)
    cb = Codebook.from_dict(_read_json(args.codebook))
    mlc = reduce_miml(miml, cb)
    write_mlc(mlc, args.out)
    if args.vocabulary_out:
        write_vocabulary(mlc.vocabulary, args.vocabulary_out)
    print(f"{mlc.n} examples x {mlc.d} features -> {args.out}")


def cmd_train(args):
    vocab = load_vocabulary(args.vocabulary) if args.vocabulary else None
    data = load_mlc(args.data, vocab)
    if args.classifier == "br":
        cfg = ForestConfig(tree_count=args.trees or BR_TREES, max_depth=args.max_depth)
        model = train_br(data, cfg, args.seed)
    else:
        cfg = ForestConfig(tree_count=args.trees or ECC_TREES, max_depth=args.max_depth)
        model = train_ecc(data, args.chains, cfg, args.seed)
    _write_json(model_to_dict(model), args.out)
    print(f"trained {args.classifier} on {data.n} examples, {data.vocabulary.c} classes -> {args.out}")


def cmd_calibrate(args):
    model = _load_model(args.model)
    data = _load_data_for_model(model, args.data, args.vocabulary)
    model.thresholds = calibrate_thresholds(model, data, args.mode)
    _write_json(model_to_dict(model), args.out or args.model)
    print("thresholds: " + ", ".join(f"{n}={t:.3f}" for n, t in zip(model.vocabulary.names, model.thresholds.t)))


def _thresholds(model, args) -> ThresholdVector:
    if args.threshold is not None:
        return ThresholdVector.single(args.threshold, model.vocabulary.c)
    if model.thresholds is None:
        raise ModelError("model has no calibrated thresholds; run 'calibrate' or pass --threshold")
    return model.thresholds


def cmd_predict(args):
    model = _load_model(args.model)
    data = _load_data_for_model(model, args.data, args.vocabulary)
    t = _thresholds(model, args)
    scores = model_scores(model, data.X)
    pred = predict_sets(scores, t)
    names = model.vocabulary.names
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["id", "predicted", *[f"score_{n}" for n in names]])
        for i, e in enumerate(data.examples):
            labels = LABEL_SEP.join(n for n, b in zip(names, pred[i]) if b)
            w.writerow([e.id, labels, *(repr(float(s)) for s in scores[i])])
    finally:
        if args.out:
            out.close()


def cmd_evaluate(args):
    model = _load_model(args.model)
    data = _load_data_for_model(model, args.data, args.vocabulary)
    t = _thresholds(model, args)
    scores = model_scores(model, data.X)
    report = evaluate(PredictionBatch(data.Y, scores, predict_sets(scores, t)))
    print(format_table([(Path(args.data).stem, report)], title_col="Data"))
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["measure", "value"])
            for k, v in report.as_dict().items():
                w.writerow([k, repr(v)])


def cmd_experiment(args):
    overrides = {k: getattr(args, k) for k in ("repetitions", "fold_count", "seed", "k", "chains",
                                               "ecc_trees", "br_trees", "max_depth",
                                               "codebook_scope", "threshold_mode", "folds")}
    if args.classifiers:
        overrides["classifiers"] = tuple(args.classifiers.split(","))
    if args.config:
        cfg = ExperimentConfig.from_toml(args.config, **overrides)
    else:
        data_keys = {k: getattr(args, k) for k in ("segments", "labels", "mlc", "vocabulary")}
        cfg = ExperimentConfig(**{k: v for k, v in {**data_keys, **overrides}.items() if v is not None})
    if args.name:
        cfg = replace(cfg, name=args.name)
    result = run_experiment(cfg)
    text = summary_table(result)
    if args.out:
        write_outputs(result, args.out)
    print(text, end="")


# --------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--config", help="TOML file supplying option defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eccbird", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"eccbird {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic MIML dataset")
    _common(p)
    p.add_argument("--c", type=int, default=6)
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--k-true", type=int, default=12)
    p.add_argument("--mean-labels", type=float, default=2.0)
    p.add_argument("--correlation", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--segment-dim", type=int, default=6)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_synth, section="synth")

    p = sub.add_parser("train-segmenter", help="fit the pixel forest on annotated recordings")
    _common(p)
    p.add_argument("--audio", nargs="+", required=True)
    p.add_argument("--mask", nargs="+", required=True, help="PNG or CSV masks, frames x bins")
    p.add_argument("--trees", type=int, default=SEGMENTER_TREES)
    p.add_argument("--max-depth", type=int, default=SEGMENTER_DEPTH)
    p.add_argument("--pixels-per-image", type=int, default=4000)
    p.add_argument("--window", type=int, default=512)
    p.add_argument("--hop", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_segmenter, section="train-segmenter")

    p = sub.add_parser("segment", help="audio -> MIML segment CSV")
    _common(p)
    p.add_argument("--segmenter", required=True)
    p.add_argument("--audio", nargs="+", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-pixels", type=int, default=20)
    p.add_argument("--window", type=int, default=512)
    p.add_argument("--hop", type=int, default=256)
    p.add_argument("--json-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment, section="segment")

    p = sub.add_parser("codebook", help="codebook operations")
    csub = p.add_subparsers(dest="codebook_command", required=True)
    q = csub.add_parser("fit", help="k-means++ codebook from a segment CSV")
    _common(q)
    q.add_argument("--segments", required=True)
    q.add_argument("--k", type=int, default=50)
    q.add_argument("--max-iterations", type=int, default=100)
    q.add_argument("--tolerance", type=float, default=1e-6)
    q.add_argument("--standardize", action="store_true")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_codebook_fit, section="codebook")

    p = sub.add_parser("featurize", help="MIML -> histogram-of-segments MLC CSV")
    _common(p)
    p.add_argument("--segments", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--vocabulary")
    p.add_argument("--codebook", required=True)
    p.add_argument("--vocabulary-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize, section="featurize")

    p = sub.add_parser("train", help="train BR-RF or ECC-RF on an MLC CSV")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vocabulary")
    p.add_argument("--classifier", choices=("br", "ecc"), default="ecc")
    p.add_argument("--chains", type=int, default=ECC_CHAINS)
    p.add_argument("--trees", type=int, help=f"trees per forest (default {BR_TREES} for br, {ECC_TREES} for ecc)")
    p.add_argument("--max-depth", type=int, default=15)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train, section="train")

    for name, func, help_ in (("calibrate", cmd_calibrate, "OOB-calibrate per-class thresholds"),
                              ("predict", cmd_predict, "predict label sets and scores"),
                              ("evaluate", cmd_evaluate, "compute the five multi-label losses")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--vocabulary")
        p.add_argument("--out")
        if name == "calibrate":
            p.add_argument("--mode", choices=("per-class", "single"), default="per-class")
        else:
            p.add_argument("--threshold", type=float, help="single threshold instead of calibrated ones")
        p.set_defaults(func=func, section=name)

    p = sub.add_parser("experiment", help="repeated cross-validation of BR-RF and ECC-RF")
    p.add_argument("--config", help="experiment TOML")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--name")
    p.add_argument("--segments")
    p.add_argument("--labels")
    p.add_argument("--mlc")
    p.add_argument("--vocabulary")
    p.add_argument("--folds")
    p.add_argument("--classifiers", help="comma-separated: br,ecc")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--fold-count", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--ecc-trees", type=int)
    p.add_argument("--br-trees", type=int)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--codebook-scope", choices=("per-fold", "global"))
    p.add_argument("--threshold-mode", choices=("per-class", "single"))
    p.add_argument("--out", help="directory for cells/summary/winloss CSVs")
    p.set_defaults(func=cmd_experiment, section=None)
    return parser


def _subparser_for(parser, argv):
    """The innermost subparser selected by ``argv``."""
    p = parser
    for tok in argv:
        acts = [a for a in p._actions if isinstance(a, argparse._SubParsersAction)]
        if not acts:
            break
        if tok in acts[0].choices:
            p = acts[0].choices[tok]
    return p


def _apply_config_defaults(parser, argv):
    """Install defaults from ``--config`` on the selected subparser.

    ``experiment`` has its own config handling and is skipped here.
    """
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    sp = _subparser_for(parser, argv)
    section = sp.get_default("section")
    if section is None:
        return
    with open(known.config, "rb") as f:
        raw = tomllib.load(f)
    values = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    values.update(raw.get(section, {}))
    dests = {a.dest for a in sp._actions}
    defaults = {}
    for key, v in values.items():
        dest = key.replace("-", "_")
        if dest not in dests or dest in ("config", "func", "section"):
            raise ConfigError(f"{known.config}: unknown option {key!r} for '{section}'")
        defaults[dest] = v
    sp.set_defaults(**defaults)
    for a in sp._actions:
        if a.dest in defaults:
            a.required = False


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_defaults(parser, argv)
    except EXPECTED_ERRORS as exc:
        print(f"eccbird: error: {exc}", file=sys.stderr)
        return 1
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"eccbird {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
