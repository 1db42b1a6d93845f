"""Command-line entry point.

Subcommands: gen-synth, train, eval, gradcheck, ablate, inspect. Configuration
comes from a UTF-8 key-value file with dotted keys (``train.lr0 = 3e-4``,
``#`` comments), overridable on the command line as ``--train.lr0 1e-3``.
Precedence: built-in default < config file < --seed < dotted override. The
fully resolved configuration is echoed to the output directory so any run can
be reproduced byte for byte.

Exit codes (stable contract):
    0 success, 2 config error, 3 I/O failure, 4 training failure,
    5 checkpoint corruption/missing, 6 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import gradsuite, serialize
from .autodiff import FAULT_INJECT
from .datapipe import (
    AugmentConfig,
    build_pair_dataset,
    load_recording,
    parse_split,
    read_manifest,
    save_recording,
    write_manifest,
)
from .errors import ConfigError, FormatError, SdanetError, TrainingAbort
from .model import SdanetConfig, load_model_checkpoint
from .synth import (
    SynthConfig,
    compare_sampling,
    evaluate,
    generate_synthetic,
    render_arm_table,
    run_ablation,
)
from .trainer import TrainConfig, fit

log = logging.getLogger("sdanet.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_TRAINING = 4
EXIT_CHECKPOINT = 5
EXIT_VERIFY = 6


# ---------------------------------------------------------------------------
# configuration schema


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(part) for part in s.split(","))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default)
SCHEMA: dict = {
    "model.feature_channels": (int, 16),
    "model.kernel_size": (int, 3),
    "model.dilations": (_parse_ints, (1, 2, 4, 8)),
    "model.shallow_index": (int, 1),
    "model.deep_index": (int, 3),
    "model.acm_enabled": (_parse_bool, True),
    "model.sscm_enabled": (_parse_bool, True),
    "model.ff_hidden": (int, 0),  # 0 -> 2 * feature_channels
    "model.eeg_channels": (int, 64),
    "model.stimulus_channels": (int, 1),
    "model.window_samples": (int, 192),
    "train.lr0": (float, 3e-4),
    "train.weight_decay": (float, 1e-4),
    "train.dropout": (float, 0.2),
    "train.epochs": (int, 100),
    "train.batch_size": (int, 64),
    "train.subjects_per_batch": (int, 8),
    "train.plateau_patience": (int, 5),
    "train.lr_factor": (float, 3.0),
    "train.min_lr": (float, 1e-6),
    "train.average_last_k": (int, 10),
    "train.steps_per_epoch": (int, 0),
    "train.seed": (int, 0),
    "augment.enabled": (_parse_bool, True),
    "augment.n_time_masks": (int, 2),
    "augment.max_time_mask_frac": (float, 0.1),
    "augment.n_channel_masks": (int, 2),
    "augment.max_channel_mask_frac": (float, 0.1),
    "augment.max_warp_samples": (int, 9),
    "synth.n_subjects": (int, 10),
    "synth.recordings_per_subject": (int, 3),
    "synth.duration_s": (float, 60.0),
    "synth.snr": (float, 2.0),
    "synth.lag_samples": (int, 8),
    "synth.mixing_channels": (int, 16),
    "synth.fs_audio": (int, 1024),
    "synth.seed": (int, 0),
    "data.manifest": (str, ""),
    "data.split": (str, "0.6:0.2:0.2"),
}


class RunConfig:
    """Fully resolved key-value configuration."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

    def model_config(self) -> SdanetConfig:
        v = self.values
        try:
            return SdanetConfig(
                feature_channels=v["model.feature_channels"],
                kernel_size=v["model.kernel_size"],
                dilations=v["model.dilations"],
                shallow_index=v["model.shallow_index"],
                deep_index=v["model.deep_index"],
                acm_enabled=v["model.acm_enabled"],
                sscm_enabled=v["model.sscm_enabled"],
                ff_hidden=v["model.ff_hidden"] or None,
                dropout_rate=v["train.dropout"],
                eeg_channels=v["model.eeg_channels"],
                stimulus_channels=v["model.stimulus_channels"],
                window_samples=v["model.window_samples"],
            )
        except ValueError as e:
            raise ConfigError(f"invalid model configuration: {e}")

    def train_config(self) -> TrainConfig:
        v = self.values
        try:
            return TrainConfig(
                lr0=v["train.lr0"],
                weight_decay=v["train.weight_decay"],
                dropout=v["train.dropout"],
                epochs=v["train.epochs"],
                batch_size=v["train.batch_size"],
                subjects_per_batch=v["train.subjects_per_batch"],
                plateau_patience=v["train.plateau_patience"],
                lr_factor=v["train.lr_factor"],
                min_lr=v["train.min_lr"],
                average_last_k=v["train.average_last_k"],
                seed=v["train.seed"],
                steps_per_epoch=v["train.steps_per_epoch"],
            )
        except ValueError as e:
            raise ConfigError(f"invalid train configuration: {e}")

    def augment_config(self) -> AugmentConfig:
        v = self.values
        try:
            return AugmentConfig(
                n_time_masks=v["augment.n_time_masks"],
                max_time_mask_frac=v["augment.max_time_mask_frac"],
                n_channel_masks=v["augment.n_channel_masks"],
                max_channel_mask_frac=v["augment.max_channel_mask_frac"],
                max_warp_samples=v["augment.max_warp_samples"],
                enabled=v["augment.enabled"],
            )
        except ValueError as e:
            raise ConfigError(f"invalid augment configuration: {e}")

    def synth_config(self) -> SynthConfig:
        v = self.values
        try:
            return SynthConfig(
                n_subjects=v["synth.n_subjects"],
                recordings_per_subject=v["synth.recordings_per_subject"],
                duration_s=v["synth.duration_s"],
                snr=v["synth.snr"],
                lag_samples=v["synth.lag_samples"],
                mixing_channels=v["synth.mixing_channels"],
                fs_audio=v["synth.fs_audio"],
                seed=v["synth.seed"],
            )
        except ValueError as e:
            raise ConfigError(f"invalid synth configuration: {e}")

    def split_fractions(self):
        try:
            return parse_split(self.values["data.split"])
        except ValueError as e:
            raise ConfigError(str(e))

    def echo(self, path):
        lines = [f"{key} = {_fmt(self.values[key])}" for key in sorted(self.values)]
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")


def _parse_value(key: str, raw: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown configuration key {key!r}")
    parser, _ = SCHEMA[key]
    try:
        return parser(raw.strip())
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad value for {key!r}: {e}")


def read_config_file(path) -> dict:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {body!r}")
        key, raw = body.split("=", 1)
        values[key.strip()] = _parse_value(key.strip(), raw)
    return values


def extract_overrides(tokens: list[str]) -> list[tuple[str, str]]:
    """Turn leftover ``--section.key value`` / ``--section.key=value`` argv
    tokens into (key, raw value) pairs."""
    out = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, raw = body.split("=", 1)
            i += 1
        else:
            key = body
            if i + 1 >= len(tokens):
                raise ConfigError(f"flag --{key} needs a value")
            raw = tokens[i + 1]
            i += 2
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        out.append((key, raw))
    return out


def resolve_config(config_path, seed, override_tokens) -> RunConfig:
    values = {key: default for key, (_, default) in SCHEMA.items()}
    if config_path:
        values.update(read_config_file(config_path))
    if seed is not None:
        values["train.seed"] = int(seed)
        values["synth.seed"] = int(seed)
    for key, raw in extract_overrides(override_tokens):
        values[key] = _parse_value(key, raw)
    return RunConfig(values)


# ---------------------------------------------------------------------------
# helpers


def _prepare_out(cfg: RunConfig, out: str | None) -> str:
    if not out:
        raise ConfigError("this command requires --out DIR")
    os.makedirs(out, exist_ok=True)
    cfg.echo(os.path.join(out, "resolved.cfg"))
    return out


def _load_dataset(cfg: RunConfig):
    manifest = cfg["data.manifest"]
    if not manifest:
        raise ConfigError("data.manifest is required (point it at a gen-synth manifest)")
    recordings = [load_recording(p) for p in read_manifest(manifest)]
    return recordings, build_pair_dataset(recordings, cfg["train.seed"], cfg.split_fractions())


def _load_checkpoint_or_exit5(path):
    try:
        return load_model_checkpoint(path)
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(cfg: RunConfig, out: str) -> int:
    out = _prepare_out(cfg, out)
    synth_cfg = cfg.synth_config()
    recordings = generate_synthetic(synth_cfg)
    rec_dir = os.path.join(out, "recordings")
    os.makedirs(rec_dir, exist_ok=True)
    paths = []
    seen: dict[str, int] = {}
    for rec in recordings:
        idx = seen.get(rec.subject_id, 0)
        seen[rec.subject_id] = idx + 1
        path = os.path.join(rec_dir, f"{rec.subject_id}_rec{idx:02d}.sdrc")
        save_recording(rec, path)
        paths.append(path)
    manifest_path = os.path.join(out, "manifest.txt")
    write_manifest(paths, manifest_path)
    hours = len(recordings) * synth_cfg.duration_s / 3600.0
    print(json.dumps({
        "manifest": manifest_path,
        "subjects": synth_cfg.n_subjects,
        "recordings": len(recordings),
        "hours": round(hours, 4),
        "snr": synth_cfg.snr,
    }, sort_keys=True))
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: str) -> int:
    out = _prepare_out(cfg, out)
    _, dataset = _load_dataset(cfg)
    result = fit(dataset, cfg.model_config(), cfg.train_config(), out, cfg.augment_config())
    print(json.dumps({
        "epochs": len(result.records),
        "final_checkpoint": result.final_checkpoint,
        "metrics": result.metrics_path,
        "averaged_val_loss": result.averaged_val_loss,
        "averaged_val_accuracy": result.averaged_val_accuracy,
    }, sort_keys=True))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: str, split: str) -> int:
    store, model_cfg, meta, _ = _load_checkpoint_or_exit5(checkpoint)
    _, dataset = _load_dataset(cfg)
    if split == "train":
        pairs = [p for s in sorted(dataset.train) for p in dataset.train[s]]
    elif split == "val":
        pairs = dataset.val
    elif split == "test":
        pairs = dataset.test
    else:
        raise ConfigError(f"unknown split {split!r}")
    report = evaluate(store, pairs, model_cfg, name=f"{split}@{os.path.basename(checkpoint)}")
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


KNOWN_FAULTS = ("conv_backward", "dense_backward")


def cmd_gradcheck(cfg: RunConfig, fault: str | None) -> int:
    if fault is not None and fault not in KNOWN_FAULTS:
        raise ConfigError(f"unknown fault {fault!r}, known: {', '.join(KNOWN_FAULTS)}")
    started = time.monotonic()
    if fault:
        FAULT_INJECT.add(fault)
    try:
        op_reports = gradsuite.run_op_checks(n_seeds=20)
        model_report = gradsuite.model_grad_check()
    finally:
        if fault:
            FAULT_INJECT.discard(fault)
    ok = True
    for name, rep in op_reports.items():
        status = "PASS" if rep.passed else "FAIL"
        ok = ok and rep.passed
        print(f"{name:24s} max rel err {rep.max_rel_err:.3e}  {status}")
    status = "PASS" if model_report.passed else "FAIL"
    ok = ok and model_report.passed
    print(f"{'full_model':24s} max rel err {model_report.max_rel_err:.3e}  {status}")
    print(f"elapsed {time.monotonic() - started:.1f}s")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_ablate(cfg: RunConfig, out: str) -> int:
    out = _prepare_out(cfg, out)
    recordings, dataset = _load_dataset(cfg)
    model_cfg = cfg.model_config()
    train_cfg = cfg.train_config()
    aug_cfg = cfg.augment_config()
    ablation = run_ablation(dataset, model_cfg, train_cfg, os.path.join(out, "ablation"), aug_cfg)
    sampling = compare_sampling(recordings, model_cfg, train_cfg, os.path.join(out, "sampling"),
                                cfg.split_fractions(), aug_cfg)
    table_arms = {
        "baseline_sampling_approx": sampling["baseline_sampling_approx"],
        "backbone_dscm": ablation["backbone_dscm"],
        "acm": ablation["acm"],
        "acm_sscm": ablation["acm_sscm"],
    }
    payload = {
        # the table is a list: row order mirrors the experiment grid
        "table": [v.to_dict() for v in table_arms.values()],
        "sampling": {k: v.to_dict() for k, v in sampling.items()},
        "ablation": {k: v.to_dict() for k, v in ablation.items()},
    }
    with open(os.path.join(out, "ablation.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
    text = render_arm_table(table_arms)
    with open(os.path.join(out, "ablation.txt"), "w", encoding="utf-8") as f:
        f.write(text + "\n")
    print(text)
    failed = [k for k, v in {**ablation, **sampling}.items() if v.error]
    if failed:
        print(f"failed arms: {', '.join(failed)}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK


def cmd_inspect(checkpoint: str) -> int:
    try:
        meta, entries = serialize.load_checkpoint(checkpoint)
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {checkpoint}: {e}")
    print(json.dumps(meta, sort_keys=True))
    rows = [("tensor", "shape", "l2")]
    for name in sorted(entries):
        arr = entries[name]
        rows.append((name, "x".join(str(d) for d in arr.shape) or "scalar",
                     f"{np.linalg.norm(arr):.6g}"))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    for i, row in enumerate(rows):
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            print("  ".join("-" * w for w in widths))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdanet",
        description="EEG/speech match-mismatch pipeline: synthetic data, training, "
                    "evaluation, gradient checks, ablation, checkpoint inspection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key-value config file with dotted keys")
        p.add_argument("--seed", type=int, help="override train.seed and synth.seed")
        p.add_argument("--out", help="output directory")

    common(sub.add_parser("gen-synth", help="generate a synthetic dataset + manifest"))
    common(sub.add_parser("train", help="train and write checkpoints/metrics"))
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="test", choices=("train", "val", "test"))
    p_grad = sub.add_parser("gradcheck", help="finite-difference verification suite")
    common(p_grad)
    p_grad.add_argument("--fault-inject", dest="fault", default=None,
                        help="corrupt a named backward rule; the suite must then fail")
    common(sub.add_parser("ablate", help="ablation grid + sampling comparison"))
    p_inspect = sub.add_parser("inspect", help="print checkpoint metadata and tensors")
    p_inspect.add_argument("checkpoint")
    return parser


def main(argv=None) -> int:
    level = {"0": logging.WARNING, "1": logging.INFO, "2": logging.DEBUG}.get(
        os.environ.get("SDANET_VERBOSE", "1"), logging.INFO)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(name)s: %(message)s")
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "inspect":
            if extra:
                raise ConfigError(f"unexpected arguments: {' '.join(extra)}")
            return cmd_inspect(args.checkpoint)
        cfg = resolve_config(args.config, args.seed, extra)
        if args.command == "gen-synth":
            return cmd_gen_synth(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.split)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.fault)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.out)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbort as e:
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_TRAINING
    except FormatError as e:
        print(f"checkpoint/container error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except SdanetError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_TRAINING


def console_main():
    sys.exit(main())
