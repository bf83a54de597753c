"""Command-line entry point.

Subcommands: synth, train, predict, evaluate, ensemble, params, dump-image.
Logs go to stderr (level from NIMBUS_LOG: error, info, or debug); data goes
to files only.  Exit codes: 0 success, 1 validation/usage error, 2 runtime
or data error, 3 partial failure of regional training jobs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import data as D
from . import metrics as M
from . import optim as O
from .config import RunConfig
from .errors import (ConfigError, NimbusError, ShapeError, SizeError,
                     ValidationError)
from .model import (ModelConfig, PRESETS, _atomic_write,
                    baseline_reference_param_count, build_model,
                    load_checkpoint)

log = logging.getLogger("nimbus")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_PARTIAL = 3


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems on stderr and exits 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _setup_logging():
    level_name = os.environ.get("NIMBUS_LOG", "info")
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        raise ValidationError(
            f"NIMBUS_LOG must be one of {sorted(levels)}, got {level_name!r}")
    logging.basicConfig(stream=sys.stderr, level=levels[level_name],
                        format="%(levelname)s %(name)s: %(message)s")


def _comma_list(text):
    return tuple(part for part in text.split(",") if part)


def _comma_ints(text):
    try:
        return tuple(int(part) for part in _comma_list(text))
    except ValueError as exc:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from exc


def _load_run_config(args):
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "preset", None):
        config = dataclasses.replace(config, model=ModelConfig(preset=args.preset))
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(
            config, train=dataclasses.replace(config.train, seed=args.seed))
    if getattr(args, "threshold", None) is not None:
        config = dataclasses.replace(
            config,
            train=dataclasses.replace(config.train, threshold=args.threshold),
            eval=dataclasses.replace(config.eval, threshold=args.threshold))
    return config


def _manifest_from(args, config):
    path = getattr(args, "manifest", None) or config.data.manifest
    if not path:
        raise ValidationError("a manifest is required: pass --manifest or set data.manifest")
    manifest = D.load_manifest(path)
    if config.data.filter_threshold is not None:
        manifest.filter_threshold = config.data.filter_threshold
    return manifest


def _eval_config(config):
    if config.data.drop_bands and not config.eval.drop_bands:
        return dataclasses.replace(config.eval, drop_bands=config.data.drop_bands)
    return config.eval


def _write_json(path, payload):
    _atomic_write(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n")
                  .encode("utf-8"))


def cmd_synth(args):
    n_val = args.n_val if args.n_val is not None else max(16, args.n // 4)
    n_test = args.n_test if args.n_test is not None else max(16, args.n // 4)
    cfg = D.SynthConfig(n_train=args.n, n_val=n_val, n_test=n_test,
                        grid=args.grid, bands=_comma_list(args.bands),
                        regions=_comma_list(args.regions),
                        years=_comma_ints(args.years), seed=args.seed)
    path = D.synth_generate(cfg, args.out)
    echo = dataclasses.asdict(cfg)
    echo["bands"] = list(cfg.bands)
    echo["regions"] = list(cfg.regions)
    echo["years"] = list(cfg.years)
    _write_json(os.path.join(args.out, "synth-config.json"), echo)
    log.info("wrote %d samples under %s (manifest %s)",
             cfg.n_train + cfg.n_val + cfg.n_test, args.out, path)
    return EXIT_OK


def cmd_train(args):
    config = _load_run_config(args)
    manifest = _manifest_from(args, config)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "run-config.json"), config.to_json_dict())
    if args.regions or args.years:
        regions = _comma_list(args.regions) if args.regions else \
            tuple(sorted({r for r, _ in manifest.region_years()}))
        years = _comma_ints(args.years) if args.years else \
            tuple(sorted({y for _, y in manifest.region_years()}))
        jobs = [(r, y) for r in regions for y in years]
        results, failures = O.train_regional(manifest, jobs, config.model,
                                             config.train, args.out,
                                             drop=config.data.drop_bands)
        report = {
            "jobs": [{"region": r, "year": y, "checkpoint": results.get((r, y)),
                      "error": failures.get((r, y))} for r, y in jobs],
            "config": config.to_json_dict(),
        }
        _write_json(os.path.join(args.out, "train-report.json"), report)
        for job, err in failures.items():
            log.error("job %s failed: %s", job, err)
        if failures and results:
            return EXIT_PARTIAL
        if failures:
            return EXIT_RUNTIME
        log.info("trained %d regional models into %s", len(results), args.out)
        return EXIT_OK
    path = O.train_single(manifest, config.model, config.train, args.out,
                          drop=config.data.drop_bands)
    log.info("trained model: %s", path)
    return EXIT_OK


def cmd_predict(args):
    config = _load_run_config(args)
    manifest = _manifest_from(args, config)
    model = load_checkpoint(args.checkpoint)
    eval_cfg = _eval_config(config)
    paths = M.predict_to_files(model, manifest, args.split, args.out, eval_cfg)
    _write_json(os.path.join(args.out, "predictions-config.json"),
                {"checkpoint": args.checkpoint, "split": args.split,
                 "config": config.to_json_dict()})
    log.info("wrote %d prediction files to %s", len(paths), args.out)
    return EXIT_OK


def cmd_evaluate(args):
    config = _load_run_config(args)
    manifest = _manifest_from(args, config)
    eval_cfg = _eval_config(config)
    if bool(args.checkpoint) == bool(args.predictions):
        raise ValidationError("pass exactly one of --checkpoint or --predictions")
    source = args.predictions if args.predictions else load_checkpoint(args.checkpoint)
    report = M.evaluate(source, manifest, args.split, eval_cfg)
    payload = report.to_json_dict()
    payload["run_config"] = config.to_json_dict()
    if not args.no_baselines:
        payload["baselines"] = M.trivial_baselines(manifest, args.split, eval_cfg)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "report.json"), payload)
    _atomic_write(os.path.join(args.out, "report.tsv"),
                  report.to_tsv().encode("utf-8"))
    log.info("pooled CSI %.6f over %d samples (reports in %s)",
             report.pooled_csi, report.n_samples, args.out)
    return EXIT_OK


def cmd_ensemble(args):
    config = _load_run_config(args)
    manifest = _manifest_from(args, config)
    paths = _comma_list(args.checkpoints)
    if not paths:
        raise ValidationError("--checkpoints needs at least one path")
    models = [load_checkpoint(p) for p in paths]
    eval_cfg = _eval_config(config)
    written = M.ensemble_to_files(models, manifest, args.split, args.out, eval_cfg)
    _write_json(os.path.join(args.out, "predictions-config.json"),
                {"checkpoints": list(paths), "split": args.split,
                 "mode": "average", "config": config.to_json_dict()})
    log.info("wrote %d averaged prediction files to %s", len(written), args.out)
    return EXIT_OK


def cmd_params(args):
    if args.config:
        model_cfg = RunConfig.from_file(args.config).model
    else:
        model_cfg = ModelConfig(preset=args.preset or "default")
    total = build_model(model_cfg, seed=0).count_params()
    baseline = baseline_reference_param_count(model_cfg)
    print(f"total_params {total}")
    print(f"baseline_reference {baseline}")
    print(f"ratio {total / baseline:.4f}")
    return EXIT_OK


def dump_image(tensor_path, channel, frame, out_path):
    """Write one (H, W) slice of a tensor file as a binary P5 graymap.

    Values are min-max scaled to 0..255; a constant slice maps to 128.
    """
    x = D.read_tensor_file(tensor_path)
    if x.ndim == 2:
        plane = x
    elif x.ndim == 3:
        if not 0 <= channel < x.shape[0]:
            raise ValidationError(f"channel {channel} out of range for dims {x.shape}")
        plane = x[channel]
    elif x.ndim == 4:
        if not 0 <= frame < x.shape[0]:
            raise ValidationError(f"frame {frame} out of range for dims {x.shape}")
        if not 0 <= channel < x.shape[1]:
            raise ValidationError(f"channel {channel} out of range for dims {x.shape}")
        plane = x[frame, channel]
    else:
        raise ValidationError(f"cannot render a {x.ndim}-d tensor as an image")
    lo = float(plane.min())
    hi = float(plane.max())
    if hi > lo:
        scaled = np.rint((plane.astype(np.float64) - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.full(plane.shape, 128.0)
    body = scaled.astype(np.uint8).tobytes()
    header = f"P5\n{plane.shape[1]} {plane.shape[0]}\n255\n".encode("ascii")
    _atomic_write(out_path, header + body)


def cmd_dump_image(args):
    dump_image(args.input, args.channel, args.frame, args.out)
    log.info("wrote graymap %s", args.out)
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="nimbus",
                     description="Precipitation nowcasting with a small "
                                 "attention U-Net: data synthesis, training, "
                                 "prediction, and CSI evaluation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic advected-rain dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=256, help="train samples (default 256)")
    p.add_argument("--n-val", type=int, default=None,
                   help="val samples (default max(16, n/4))")
    p.add_argument("--n-test", type=int, default=None,
                   help="test samples (default max(16, n/4))")
    p.add_argument("--grid", type=int, default=64,
                   help="crop size in pixels, multiple of 16 (default 64)")
    p.add_argument("--bands", default=",".join(D.DEFAULT_BAND_NAMES),
                   help="comma-separated band names (default: all 9)")
    p.add_argument("--regions", default="regionA", help="comma-separated regions")
    p.add_argument("--years", default="2019", help="comma-separated years")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model, or one per (region, year)")
    p.add_argument("--config", help="RunConfig JSON path")
    p.add_argument("--manifest", help="dataset manifest path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="seed override (default 0)")
    p.add_argument("--preset", choices=PRESETS,
                   help="model preset: default (36 in / 16 out) or "
                        "single-frame (11 in / 1 out)")
    p.add_argument("--threshold", type=float, default=None,
                   help="rain-rate event threshold in mm/h (default 0.2)")
    p.add_argument("--regions", default="",
                   help="comma-separated regions: train one model per "
                        "(region, year) instead of one pooled model")
    p.add_argument("--years", default="", help="comma-separated years")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write per-sample prediction files")
    p.add_argument("--checkpoint", required=True, help="model checkpoint path")
    p.add_argument("--manifest", help="dataset manifest path")
    p.add_argument("--config", help="RunConfig JSON path")
    p.add_argument("--split", default="test", help="split to predict (default test)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a checkpoint or prediction files")
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--predictions", help="directory of prediction files")
    p.add_argument("--manifest", help="dataset manifest path")
    p.add_argument("--config", help="RunConfig JSON path")
    p.add_argument("--split", default="test", help="split to score (default test)")
    p.add_argument("--threshold", type=float, default=None,
                   help="rain-rate event threshold in mm/h (default 0.2)")
    p.add_argument("--no-baselines", action="store_true",
                   help="skip the all-zeros / all-ones / persistence baselines")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ensemble", help="average predictions from checkpoints")
    p.add_argument("--checkpoints", required=True,
                   help="comma-separated checkpoint paths")
    p.add_argument("--manifest", help="dataset manifest path")
    p.add_argument("--config", help="RunConfig JSON path")
    p.add_argument("--split", default="test", help="split to predict (default test)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("params", help="parameter audit vs the standard-conv reference")
    p.add_argument("--config", help="RunConfig JSON path")
    p.add_argument("--preset", choices=PRESETS,
                   help="model preset (default: default)")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("dump-image", help="render a tensor slice as a P5 graymap")
    p.add_argument("--input", required=True, help="tensor file path")
    p.add_argument("--frame", type=int, default=0, help="frame index (default 0)")
    p.add_argument("--channel", type=int, default=0, help="channel index (default 0)")
    p.add_argument("--out", required=True, help="graymap output path")
    p.set_defaults(func=cmd_dump_image)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_VALIDATION
    try:
        _setup_logging()
        return args.func(args)
    except (ConfigError, ValidationError, ShapeError, SizeError) as exc:
        print(f"nimbus: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NimbusError, OSError) as exc:
        print(f"nimbus: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
