"""Command-line entry point: ``evmaf {extract,train,predict,evaluate,compare-pairs}``.

Exit codes: 0 success, 1 usage or configuration error, 2 partial data
failure (unreadable media, missing cache or MOS), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from . import pipeline
from .errors import (ComputationError, ConfigurationError, EvmafError, InputError,
                     MalformedInputError, SchemaVersionError, TrainingError)
from .evaluation import compare_pairwise, read_pairs_csv
from .fusion import FusionModel, config_hash
from .manifest import load_manifest
from .pool import resolve_pool_spec
from .video_io import VideoSpec, open_sequence

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("evmaf")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="JSON config (alpha, alpha_grid, beta, svr, grid_step, pool)")
    p.add_argument("--seed", type=int, default=0,
                   help="recorded in the config hash; all pipelines are deterministic")
    p.add_argument("--threads", type=int, default=1, help="worker processes for extraction")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="evmaf", description="Full-reference video quality with E-ADM and "
                                           "two-model SVR fusion.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", help="compute and cache per-frame features")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--cache", required=True, help="feature cache directory")
    p.add_argument("--pool", default=None, help="pool spec name or path (default from config)")
    _common(p)

    p = sub.add_parser("train", help="select features, train both models, tune weights")
    p.add_argument("manifest1", help="training database for model 1")
    p.add_argument("manifest2", help="training database for model 2")
    p.add_argument("--cache", required=True)
    p.add_argument("--model", required=True, help="output model file (JSON)")
    _common(p)

    p = sub.add_parser("predict", help="score one reference/test pair")
    p.add_argument("--model", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--bit-depth", type=int, default=8)
    p.add_argument("--test-width", type=int, help="test geometry if re-sampled")
    p.add_argument("--test-height", type=int)
    p.add_argument("--out", help="per-frame CSV path")
    _common(p)

    p = sub.add_parser("evaluate", help="SROCC, F-test and pairwise report on test databases")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--model", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--baselines", default="PSNR-Y-S1,SSIM-Y-S1,MSSSIM-Y-S1,VIF-Y-S1,E-ADM",
                   help="comma-separated feature keys scored as stand-alone metrics")
    p.add_argument("--anchor", default="PSNR-Y-S1", help="metric the F-test compares against")
    _common(p)

    p = sub.add_parser("compare-pairs", help="exact test between two pair files")
    p.add_argument("pairs_a")
    p.add_argument("pairs_b")
    _common(p)
    return ap


def _config(args, **extra):
    cfg = pipeline.load_config(args.config)
    cfg["seed"] = args.seed
    return cfg, config_hash({**cfg, **extra})


def cmd_extract(args) -> int:
    cfg, chash = _config(args)
    pool = resolve_pool_spec(args.pool or cfg["pool"])
    alpha, extra = pipeline.extraction_alphas(cfg)
    code = EXIT_OK
    for path in args.manifests:
        man = load_manifest(path)
        res = pipeline.extract_database(man, pool, args.cache, alpha, extra, args.threads)
        print(f"{man.database}: {res.frames_recomputed} frames recomputed, "
              f"{res.frames_cached} cached, {len(res.errors) + len(res.numerical_errors)} "
              f"failed [config {chash}]")
        for sid, msg in {**res.errors, **res.numerical_errors}.items():
            print(f"  {sid}: {msg}", file=sys.stderr)
        if res.numerical_errors:
            code = max(code, EXIT_NUMERIC)
        elif res.errors:
            code = max(code, EXIT_DATA)
    return code


def cmd_train(args) -> int:
    cfg, chash = _config(args)
    pool = resolve_pool_spec(cfg["pool"])
    tables = []
    for path in (args.manifest1, args.manifest2):
        man = load_manifest(path)
        table, frames = pipeline.sequence_table(man, args.cache, pool)
        tables.append((table, frames[0].alpha))
    if tables[0][1] != tables[1][1]:
        raise ConfigurationError("the two caches were extracted with different alphas")
    res = pipeline.train_fusion(tables[0][0], tables[1][0], pool, cfg, tables[0][1])
    res.model.config_hash = chash
    res.model.save(args.model)
    print(f"model 1: {', '.join(res.model.model1.feature_keys)}")
    print(f"model 2: {', '.join(res.model.model2.feature_keys)}")
    print(f"alpha={res.model.alpha:g} beta={res.model.beta:g} -> {args.model} [config {chash}]")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = FusionModel.load(args.model)
    ref_spec = VideoSpec(args.width, args.height, args.frames, args.bit_depth)
    resampled = args.test_width is not None or args.test_height is not None
    test_spec = VideoSpec(args.test_width or args.width, args.test_height or args.height,
                          args.frames, args.bit_depth)
    ref = open_sequence(args.ref, ref_spec)
    test = open_sequence(args.test, test_spec)
    scores = pipeline.predict_sequence(model, ref, test, "bilinear" if resampled else None)
    if args.out:
        pipeline.write_prediction_csv(args.out, scores, model)
    print(f"Q={scores[:, 0].mean():.4f} frames={len(scores)} "
          f"M1={scores[:, 1].mean():.4f} M2={scores[:, 2].mean():.4f} "
          f"beta={model.beta:g} alpha={model.alpha:g} [config {model.config_hash}]")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = FusionModel.load(args.model)
    baselines = [b.strip() for b in args.baselines.split(",") if b.strip()]
    anchor = args.anchor or None
    if anchor is not None and anchor not in baselines:
        baselines.append(anchor)
    manifests = [load_manifest(p) for p in args.manifests]
    report, refused = pipeline.evaluate_model(model, manifests, args.cache, baselines, anchor,
                                              args.out_dir, model.config_hash)
    sys.stdout.write(report.to_text())
    for db, why in refused.items():
        print(f"{db}: evaluation refused: {why}", file=sys.stderr)
    return EXIT_DATA if refused else EXIT_OK


def cmd_compare_pairs(args) -> int:
    a, b = read_pairs_csv(args.pairs_a), read_pairs_csv(args.pairs_b)
    if len(a) != len(b):
        raise InputError(f"pair files differ in length: {len(a)} vs {len(b)}")
    acc_a, acc_b, table, p = compare_pairwise(a, b)
    print(f"A: {acc_a.accuracy:.4f} ({acc_a.correct}/{acc_a.correct + acc_a.incorrect})")
    print(f"B: {acc_b.accuracy:.4f} ({acc_b.correct}/{acc_b.correct + acc_b.incorrect})")
    print(f"table={table} p={p:.3e}")
    return EXIT_OK


COMMANDS = {
    "extract": cmd_extract,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "compare-pairs": cmd_compare_pairs,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ComputationError, TrainingError, FloatingPointError) as exc:
        print(f"evmaf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pipeline.CacheMissError, MalformedInputError, FileNotFoundError) as exc:
        print(f"evmaf: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InputError as exc:
        print(f"evmaf: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigurationError, SchemaVersionError, EvmafError) as exc:
        print(f"evmaf: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
