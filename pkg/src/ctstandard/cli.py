"""Command-line entry point: ``ctstandard <command> [options]``.

Commands follow the workflow stages: ``phantom-gen`` writes a synthetic
volume, ``make-patches`` caches aligned training pairs, ``train`` fits the
networks, ``standardize`` rewrites a DICOM series and ``evaluate`` tabulates
GLCM errors.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 pipeline error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

from . import __version__
from .autodiff.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, field_docs, format_value, load_config, parse_assignments
from .dicomio import DicomError, read_volume, write_volume
from .gan import unpack_models
from .glcm import FEATURES, PairingError, evaluate_dataset, write_error_table
from .patches import PatchExhaustedError, read_pair_cache, sample_patch_pairs, write_pair_cache
from .phantom import apply_protocol, generate_phantom_volume, get_protocol, protocol_seed
from .reconstruct import SliceError, reconstruct_dicom
from .trainer import DataExhaustedError, PairSet, TrainingAborted, train, write_telemetry

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PIPELINE = 0, 2, 3, 4

log = logging.getLogger("ctstandard")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --- config plumbing --------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser, names: Sequence[str]) -> None:
    docs = field_docs()
    p.add_argument("--config", help="key = value config file (default: built-in defaults)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    for name in names:
        doc, default = docs[name]
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, metavar="V",
                       help=f"{doc} (default: {format_value(default)})")


def _config(args, names: Sequence[str]) -> RunConfig:
    overrides: Dict[str, object] = parse_assignments(args.set)
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = str(args.threads)
    return load_config(args.config, overrides)


TRAIN_FLAGS = ("seed", "lr", "lr_d", "momentum", "lambda1", "lambda2", "lambda3", "clip_c", "theta_g",
               "theta_d", "t_max", "max_epochs", "batch_size", "net_size", "gen_channels", "critic_channels")
PATCH_FLAGS = ("seed", "patch_min", "patch_max", "net_size", "min_patches")
RECON_FLAGS = ("seed", "variant", "patch_min", "patch_max", "seam_factor", "crop", "max_repairs",
               "drop_min_offset", "recon_batch")


# --- commands ---------------------------------------------------------------------

def cmd_phantom_gen(args) -> int:
    try:
        sim = get_protocol(args.protocol)
        truth = generate_phantom_volume(args.seed, args.size, n_blobs=args.n_blobs)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    vol = apply_protocol(truth, sim, protocol_seed(args.seed, sim.name))
    paths = write_volume(args.out_dir, vol)
    print(f"wrote {len(paths)} slices ({sim.name}, seed {args.seed}) to {args.out_dir}")
    return EXIT_OK


def _pairs_from_dirs(standard: str, nonstandard: str, cfg: RunConfig):
    std, non = read_volume(standard), read_volume(nonstandard)
    return sample_patch_pairs(std, non, (cfg.patch_min, cfg.patch_max), cfg.seed, cfg.net_size, cfg.min_patches)


def cmd_make_patches(args) -> int:
    cfg = _config(args, PATCH_FLAGS)
    src, tgt = _pairs_from_dirs(args.standard, args.nonstandard, cfg)
    write_pair_cache(args.out, src, tgt)
    print(f"wrote {len(src)} aligned patch pairs to {args.out}")
    return EXIT_OK


def _load_pairs(cache: Optional[str], standard: Optional[str], nonstandard: Optional[str], cfg, what: str):
    if cache:
        try:
            src, tgt = read_pair_cache(cache)
        except ValueError as exc:
            raise CliError(f"{what}: {cache}: {exc}", EXIT_DATA) from exc
    elif standard and nonstandard:
        src, tgt = _pairs_from_dirs(standard, nonstandard, cfg)
    elif standard or nonstandard:
        raise CliError(f"{what}: give both the standard and the non-standard directory", EXIT_CONFIG)
    else:
        return None
    if src and src[0].gray.shape[0] != cfg.net_size:
        raise CliError(f"{what}: patches are {src[0].gray.shape[0]} px but net_size is {cfg.net_size}", EXIT_CONFIG)
    return PairSet.from_patches(src, tgt)


def cmd_train(args) -> int:
    cfg = _config(args, TRAIN_FLAGS)
    tcfg = cfg.train_config()
    pairs = _load_pairs(args.patches, args.standard, args.nonstandard, cfg, "training data")
    if pairs is None:
        raise CliError("training data: pass --patches or --standard/--nonstandard", EXIT_CONFIG)
    val = _load_pairs(args.val_patches, args.val_standard, args.val_nonstandard, cfg, "validation data")

    def progress(epoch, errors):
        log.info("epoch %d validation %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in errors.items()))

    try:
        result = train(tcfg, pairs, val, progress=progress)
    except TrainingAborted as exc:
        if args.telemetry:
            write_telemetry(args.telemetry, exc.telemetry)
        raise CliError(f"training aborted: {exc}", EXIT_PIPELINE) from exc
    save_checkpoint(args.checkpoint, result.checkpoint)
    if args.telemetry:
        write_telemetry(args.telemetry, result.telemetry)
    print(f"epochs run: {result.epochs_run}, best epoch: {result.best_epoch}, rollbacks: {result.rollbacks}")
    if result.validation:
        final = result.validation[-1]
        print("validation GLCM error: " + " ".join(f"{k}={final[k]:.4f}" for k in FEATURES if k in final))
    print(f"checkpoint written to {args.checkpoint}")
    return EXIT_OK


def cmd_standardize(args) -> int:
    cfg = _config(args, RECON_FLAGS)
    if not os.path.isfile(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}", EXIT_DATA)
    try:
        g, critics = unpack_models(load_checkpoint(args.checkpoint))
    except ValueError as exc:
        raise CliError(f"bad checkpoint {args.checkpoint}: {exc}", EXIT_DATA) from exc
    reports = reconstruct_dicom(args.in_dir, args.out_dir, g, critics, cfg.reconstruct_config(), args.report)
    qualified = sum(r.qualified for r in reports)
    total = sum(r.patches for r in reports)
    print(f"standardized {len(reports)} slices into {args.out_dir} ({qualified}/{total} patches qualified)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args, ("glcm_levels",))
    syn: Dict[str, str] = {}
    for item in args.synth:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = os.path.basename(os.path.normpath(item)) or "synthesized", item
        if label in syn:
            raise CliError(f"duplicate label {label!r}", EXIT_CONFIG)
        syn[label] = path
    summaries = evaluate_dataset(syn, args.target, levels=cfg.glcm_levels)
    if args.out:
        write_error_table(args.out, summaries)
    width = max(len(k) for k in syn)
    print("feature".ljust(14) + " ".join(lab.rjust(max(width, 10)) for lab in syn))
    for name in FEATURES:
        cells = [f"{summaries[lab].errors[name]:.4f}".rjust(max(width, 10)) for lab in syn]
        print(name.ljust(14) + " ".join(cells))
    return EXIT_OK


# --- parser -----------------------------------------------------------------------

class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Append argparse defaults only where the help text does not state one, and never for unset options."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "(default" in text or action.default in (None, [], argparse.SUPPRESS) or action.required:
            return text
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="ctstandard", description=__doc__.split("\n\n")[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None, help="worker cap (default: 1)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="write a synthetic phantom volume as DICOM", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help="phantom and noise seed")
    p.add_argument("--size", default="16x128x128", help="depth x rows x cols, or one side for a cube")
    p.add_argument("--n-blobs", type=int, default=3, help="dense blobs inside the body")
    p.add_argument("--protocol", default="BL64-sim", help="acquisition simulation name")
    p.add_argument("--out-dir", "--out", dest="out_dir", required=True, help="output directory")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("make-patches", help="cache aligned (non-standard, standard) patch pairs", formatter_class=fmt)
    p.add_argument("--standard", required=True, help="standard-protocol DICOM directory")
    p.add_argument("--nonstandard", required=True, help="non-standard DICOM directory")
    p.add_argument("--out", required=True, help="output patch cache")
    _add_config_flags(p, PATCH_FLAGS)
    p.set_defaults(func=cmd_make_patches)

    p = sub.add_parser("train", help="train generators and critics", formatter_class=fmt)
    p.add_argument("--patches", help="training pair cache from make-patches")
    p.add_argument("--standard", help="standard DICOM directory (instead of --patches)")
    p.add_argument("--nonstandard", help="non-standard DICOM directory (instead of --patches)")
    p.add_argument("--val-patches", help="validation pair cache")
    p.add_argument("--val-standard", help="validation standard DICOM directory")
    p.add_argument("--val-nonstandard", help="validation non-standard DICOM directory")
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--telemetry", help="output telemetry CSV path")
    _add_config_flags(p, TRAIN_FLAGS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("standardize", help="standardize a DICOM series with a checkpoint", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint from train")
    p.add_argument("--in-dir", required=True, help="non-standard DICOM directory")
    p.add_argument("--out-dir", required=True, help="output DICOM directory")
    p.add_argument("--report", help="JSON-lines report path (default: OUT_DIR/report.jsonl)")
    _add_config_flags(p, RECON_FLAGS)
    p.set_defaults(func=cmd_standardize)

    p = sub.add_parser("evaluate", help="GLCM error table against a target series", formatter_class=fmt)
    p.add_argument("--target", required=True, help="standard (target) DICOM directory")
    p.add_argument("--synth", required=True, action="append", metavar="[LABEL=]DIR",
                   help="series to score; repeatable")
    p.add_argument("--out", help="CSV output path")
    _add_config_flags(p, ("glcm_levels",))
    p.set_defaults(func=cmd_evaluate)
    return parser


def _classify(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DicomError, PairingError, CheckpointError, PatchExhaustedError,
                        DataExhaustedError, OSError)):
        return EXIT_DATA
    if isinstance(exc, SliceError) and isinstance(exc.__cause__, (DicomError, OSError)):
        return EXIT_DATA
    return EXIT_PIPELINE


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, DicomError, PairingError, CheckpointError, PatchExhaustedError,
            DataExhaustedError, OSError, SliceError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _classify(exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
