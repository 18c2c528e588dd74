"""Command-line interface.

Subcommands cover the full workflow: `build-dataset` synthesizes audio and
manifests, `train` runs one named pipeline phase against a run directory,
`iterate` runs the retraining loop from existing checkpoints, `evaluate`
scores a checkpoint on a manifest, `noise-exp` sweeps label corruption
rates, and `report` summarizes a run directory.

Configuration comes from an optional JSON file of flat dotted keys
(for example {"train.lr_initial": 0.001}); `--set key=value` and dedicated
flags override it, flags winning. The merged config is written into the run
directory before any work starts. Exit codes: 0 success, 2 config error,
3 missing prerequisite, 4 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .dataset import (
    Catalog,
    DatasetConfig,
    build_dataset,
    load_tsd_samples,
    read_manifest,
)
from .evaluation import DecodeConfig, write_report_csv
from .models import (
    ConditionalNet,
    DomainDiscriminator,
    StudentModel,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    PHASE_NAMES,
    EmbeddingCache,
    TrainConfig,
    _phase_seed,
    evaluate_student,
    iterate_two_students,
    noise_robustness_experiment,
    train_conditional,
    train_phase,
    write_iterations_csv,
    write_metrics_csv,
)

RUN_ROOT_ENV = "TSDLEARN_RUN_ROOT"


class ConfigError(Exception):
    exit_code = 2


class PrerequisiteError(Exception):
    exit_code = 3


class DataError(Exception):
    exit_code = 4


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _known_keys() -> set[str]:
    keys = {"dataset." + f for f in DatasetConfig.__dataclass_fields__}
    keys |= {"train." + f for f in TrainConfig.__dataclass_fields__}
    keys |= {"decode.threshold", "decode.median_window"}
    keys |= {"metrics.segment_length", "metrics.collar", "metrics.offset_frac"}
    keys |= {"paths.data_dir", "paths.run_dir"}
    return keys


KNOWN_KEYS = _known_keys()


def load_flat_config(path: str | None, sets: list[str] | None) -> dict:
    """Merge a JSON config file of flat dotted keys with --set overrides."""
    flat: dict = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in loaded.items():
            if isinstance(value, dict):
                raise ConfigError(
                    f"config key {key!r} is nested; use flat dotted keys")
            flat[key] = value
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            flat[key] = json.loads(raw)
        except json.JSONDecodeError:
            flat[key] = raw
    unknown = sorted(set(flat) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return flat


def _section(flat: dict, prefix: str) -> dict:
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in flat.items() if k.startswith(prefix + ".")}


def train_config_from(flat: dict, args) -> TrainConfig:
    try:
        cfg = TrainConfig.from_dict(_section(flat, "train"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "no_adversarial", False):
        cfg.adversarial = False
    if getattr(args, "max_iterations", None) is not None:
        cfg.max_iterations = args.max_iterations
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    if getattr(args, "retrain_epochs", None) is not None:
        cfg.retrain_epochs = args.retrain_epochs
    if getattr(args, "pseudo_epochs", None) is not None:
        cfg.pseudo_epochs = args.pseudo_epochs
    if getattr(args, "no_early_stop", False):
        cfg.early_stop = False
    return cfg


def decode_config_from(flat: dict, args) -> DecodeConfig:
    kwargs = {}
    if "decode.threshold" in flat:
        kwargs["threshold"] = flat["decode.threshold"]
    if "decode.median_window" in flat:
        kwargs["median_window"] = flat["decode.median_window"]
    if getattr(args, "threshold", None) is not None:
        kwargs["threshold"] = args.threshold
    if getattr(args, "median_window", None) is not None:
        kwargs["median_window"] = args.median_window
    try:
        return DecodeConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def metric_args_from(flat: dict, args) -> dict:
    out = {
        "segment_length": flat.get("metrics.segment_length", 1.0),
        "collar": flat.get("metrics.collar", 0.2),
        "offset_frac": flat.get("metrics.offset_frac", 0.2),
    }
    for key in out:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def resolve_run_dir(args) -> str:
    if getattr(args, "run_dir", None):
        return args.run_dir
    root = os.environ.get(RUN_ROOT_ENV, "runs")
    return os.path.join(root, getattr(args, "name", None) or "run")


def write_snapshot(out_dir: str, command: str, flat: dict, effective: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = {"command": command, "config": flat, "effective": effective}
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Shared loading helpers
# ---------------------------------------------------------------------------

def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise PrerequisiteError(f"missing {what}: {path}")
    return path


def _read_manifest(path: str, what: str):
    _require(path, what)
    try:
        records = read_manifest(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    if not records:
        raise DataError(f"manifest is empty: {path}")
    return records


def _load_samples(records, memo, weak_only=False):
    try:
        return load_tsd_samples(records, feature_memo=memo, weak_only=weak_only)
    except (OSError, ValueError) as exc:
        raise DataError(f"failed to load samples: {exc}") from exc


def _load_model(path: str, expected, what: str):
    _require(path, what)
    try:
        model, extra = load_checkpoint(path)
    except (ValueError, RuntimeError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(model, expected):
        raise DataError(
            f"checkpoint {path} holds {type(model).__name__}, "
            f"expected {expected.__name__}")
    return model, extra


def _get_conditional(run_dir: str, data_dir: str, cfg: TrainConfig, memo: dict):
    """Load the run's conditional encoder, training and saving it first if
    this is the first phase to need it."""
    path = os.path.join(run_dir, "conditional.pt")
    if os.path.exists(path):
        model, _ = _load_model(path, ConditionalNet, "conditional checkpoint")
        return model
    catalog_path = _require(os.path.join(data_dir, "catalog_source.json"),
                            "source catalog")
    catalog = Catalog.load(catalog_path)
    classes = list(catalog.classes)
    target_path = os.path.join(data_dir, "catalog_target.json")
    if os.path.exists(target_path):
        classes += Catalog.load(target_path).classes
    model, info = train_conditional(catalog, cfg, feature_memo=memo)
    save_checkpoint(model, path, extra={"classes": sorted(set(classes)),
                                        "val_acc": info["val_acc"]})
    print(f"trained conditional encoder (val acc {info['val_acc']:.2f}) -> {path}")
    return model


def _phase_metric_rows(result, adversarial: bool,
                       val_report=None) -> list[dict]:
    """Per-epoch rows for the run-level metrics.csv. Validation F-scores are
    measured once per phase and land on its final epoch row."""
    rows = []
    last = len(result.task_losses) - 1
    for i, task in enumerate(result.task_losses):
        row = {"phase": result.name, "epoch": i + 1, "task_loss": task,
               "kd_loss": result.kd_losses[i] if result.kd_losses else ""}
        if adversarial:
            row["domain_loss"] = result.domain_losses[i]
            row["objective"] = result.objectives[i]
        has_val = i == last and val_report is not None
        row["val_segment_f"] = val_report.segment_f if has_val else ""
        row["val_event_f"] = val_report.event_f if has_val else ""
        rows.append(row)
    return rows


def _append_metrics(path: str, rows: list[dict]) -> None:
    """Append rows to a CSV, merging headers with any existing content."""
    existing: list[dict] = []
    fieldnames: list[str] = []
    if os.path.exists(path):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            fieldnames = list(reader.fieldnames or [])
            existing = list(reader)
    for row in rows:
        for key in row:
            if key not in fieldnames:
                fieldnames.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, restval="")
        writer.writeheader()
        for row in existing + rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v)
                             for k, v in row.items()})


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_build_dataset(args) -> int:
    flat = load_flat_config(args.config, args.set)
    section = _section(flat, "dataset")
    if args.out_dir:
        section["out_dir"] = args.out_dir
    if args.seed is not None:
        section["seed"] = args.seed
    if "out_dir" not in section:
        raise ConfigError("build-dataset needs --out-dir or dataset.out_dir")
    try:
        cfg = DatasetConfig(**section)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc

    write_snapshot(cfg.out_dir, "build-dataset", flat,
                   {f"dataset.{k}": v for k, v in vars(cfg).items()})
    try:
        paths = build_dataset(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    print(f"dataset written to {paths.root}")
    print("samples per split:")
    for split, info in paths.summary["per_split"].items():
        print(f"  {split}: {info['samples']} samples ({info['positives']} "
              f"positive) from {info['scenes']} scenes")
    print("samples per class:")
    for cls, count in paths.summary["per_class"].items():
        print(f"  {cls}: {count}")
    return 0


def cmd_train(args) -> int:
    flat = load_flat_config(args.config, args.set)
    cfg = train_config_from(flat, args)
    data_dir = args.data_dir or flat.get("paths.data_dir")
    if not data_dir:
        raise ConfigError("train needs --data-dir or paths.data_dir")
    run_dir = resolve_run_dir(args)
    write_snapshot(run_dir, f"train:{args.phase}", flat,
                   {f"train.{k}": v for k, v in cfg.to_dict().items()})

    memo: dict = {}
    conditional = _get_conditional(run_dir, data_dir, cfg, memo)
    embed_cache = EmbeddingCache(conditional)

    def fresh_student(pooling, tag):
        import torch
        torch.manual_seed(_phase_seed(cfg.seed, tag))
        return StudentModel(pooling=pooling)

    def load_student(name):
        model, _ = _load_model(os.path.join(run_dir, name), StudentModel,
                               f"checkpoint {name} (run the earlier phase first)")
        return model

    def get_disc(name, tag):
        if not cfg.adversarial:
            return None
        path = os.path.join(run_dir, name)
        if os.path.exists(path):
            return _load_model(path, DomainDiscriminator, name)[0]
        import torch
        torch.manual_seed(_phase_seed(cfg.seed, tag))
        return DomainDiscriminator()

    source_train = target_weak = None
    if args.phase in ("f_source", "w_source_kd"):
        records = _read_manifest(os.path.join(data_dir, "source_train.jsonl"),
                                 "source training manifest")
        source_train = _load_samples(records, memo)
    if args.phase in ("w_target", "f_pseudo") or cfg.adversarial:
        records = _read_manifest(
            os.path.join(data_dir, "target_train_weak.jsonl"),
            "target weak training manifest")
        target_weak = _load_samples(records, memo, weak_only=True)
    if cfg.adversarial and source_train is None:
        records = _read_manifest(os.path.join(data_dir, "source_train.jsonl"),
                                 "source training manifest")
        source_train = _load_samples(records, memo, weak_only=True)

    kwargs = dict(source_train=source_train, target_weak=target_weak)
    pseudo_path = os.path.join(run_dir, "pseudo_labels.npz")
    if args.phase == "f_source":
        kwargs["f_student"] = fresh_student("none", "init_f")
        kwargs["disc_f"] = get_disc("disc_f.pt", "init_disc_f")
    elif args.phase == "w_source_kd":
        kwargs["f_student"] = load_student("f_student.pt")
        kwargs["w_student"] = fresh_student("linsoft", "init_w")
        kwargs["disc_w"] = get_disc("disc_w.pt", "init_disc_w")
    elif args.phase == "w_target":
        kwargs["f_student"] = load_student("f_student.pt")
        kwargs["w_student"] = load_student("w_student.pt")
        kwargs["disc_w"] = get_disc("disc_w.pt", "init_disc_w")
    else:
        kwargs["f_student"] = load_student("f_student.pt")
        kwargs["disc_f"] = get_disc("disc_f.pt", "init_disc_f")
        _require(pseudo_path, "pseudo labels (run the w_target phase first)")
        with np.load(pseudo_path) as npz:
            kwargs["pseudo"] = {k: npz[k] for k in npz.files}

    try:
        result, new_pseudo = train_phase(args.phase, cfg, embed_cache, **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    for key, name in (("f_student", "f_student.pt"), ("w_student", "w_student.pt"),
                      ("disc_f", "disc_f.pt"), ("disc_w", "disc_w.pt")):
        model = kwargs.get(key)
        if model is not None:
            save_checkpoint(model, os.path.join(run_dir, name))
    if new_pseudo is not None:
        np.savez(pseudo_path, **new_pseudo)

    val_name = ("source_val.jsonl" if args.phase in ("f_source", "w_source_kd")
                else "target_val.jsonl")
    val_report = None
    val_path = os.path.join(data_dir, val_name)
    if os.path.exists(val_path):
        trained = kwargs["w_student" if args.phase.startswith("w") else "f_student"]
        val_report = evaluate_student(
            trained, _read_manifest(val_path, "validation manifest"),
            embed_cache, decode=decode_config_from(flat, args),
            feature_memo=memo)

    _append_metrics(os.path.join(run_dir, "metrics.csv"),
                    _phase_metric_rows(result, cfg.adversarial, val_report))
    line = (f"phase {args.phase}: final task loss {result.final_loss:.4f} "
            f"({result.epochs} epochs, {result.seconds:.1f}s)")
    if val_report is not None:
        line += (f"  val segment-F {val_report.segment_f:.4f} "
                 f"event-F {val_report.event_f:.4f}")
    print(line + f" -> {run_dir}")
    return 0


def cmd_iterate(args) -> int:
    flat = load_flat_config(args.config, args.set)
    cfg = train_config_from(flat, args)
    data_dir = args.data_dir or flat.get("paths.data_dir")
    if not data_dir:
        raise ConfigError("iterate needs --data-dir or paths.data_dir")
    run_dir = resolve_run_dir(args)
    write_snapshot(run_dir, "iterate", flat,
                   {f"train.{k}": v for k, v in cfg.to_dict().items()})

    conditional, _ = _load_model(os.path.join(run_dir, "conditional.pt"),
                                 ConditionalNet,
                                 "conditional checkpoint (run train phases first)")
    f_student, _ = _load_model(os.path.join(run_dir, "f_student.pt"),
                               StudentModel,
                               "f_student checkpoint (run train phases first)")
    w_student, _ = _load_model(os.path.join(run_dir, "w_student.pt"),
                               StudentModel,
                               "w_student checkpoint (run train phases first)")
    disc_f = disc_w = None
    if cfg.adversarial and cfg.adversarial_in_loop:
        for name in ("disc_f.pt", "disc_w.pt"):
            path = os.path.join(run_dir, name)
            if os.path.exists(path):
                disc = _load_model(path, DomainDiscriminator, name)[0]
                if name == "disc_f.pt":
                    disc_f = disc
                else:
                    disc_w = disc

    memo: dict = {}
    embed_cache = EmbeddingCache(conditional)
    weak_records = _read_manifest(
        os.path.join(data_dir, "target_train_weak.jsonl"),
        "target weak training manifest")
    target_weak = _load_samples(weak_records, memo, weak_only=True)
    val_records = _read_manifest(os.path.join(data_dir, "target_val.jsonl"),
                                 "target validation manifest")
    source_pool = None
    if cfg.adversarial and cfg.adversarial_in_loop:
        src_records = _read_manifest(os.path.join(data_dir, "source_train.jsonl"),
                                     "source training manifest")
        source_pool = _load_samples(src_records, memo, weak_only=True)

    decode = decode_config_from(flat, args)
    phases, iterations, best_iteration, pseudo, stopped_early = \
        iterate_two_students(f_student, w_student, target_weak, val_records,
                             cfg, embed_cache, disc_f=disc_f, disc_w=disc_w,
                             source_pool=source_pool, feature_memo=memo,
                             decode=decode)

    write_iterations_csv(iterations, os.path.join(run_dir, "iterations.csv"))
    save_checkpoint(f_student, os.path.join(run_dir, "f_student.pt"))
    save_checkpoint(w_student, os.path.join(run_dir, "w_student.pt"))
    np.savez(os.path.join(run_dir, "pseudo_labels.npz"), **pseudo)
    loop_adv = cfg.adversarial and cfg.adversarial_in_loop
    for phase in phases:
        _append_metrics(os.path.join(run_dir, "metrics.csv"),
                        _phase_metric_rows(phase, loop_adv))

    lines = []
    for rec in iterations:
        lines.append(f"iteration {rec.iteration}: "
                     f"f event-F {rec.f_event_f:.4f} "
                     f"segment-F {rec.f_segment_f:.4f} | "
                     f"w event-F {rec.w_event_f:.4f} "
                     f"segment-F {rec.w_segment_f:.4f}")
    if stopped_early:
        lines.append("stopped: no improvement")
    lines.append(f"best iteration: {best_iteration}")
    with open(os.path.join(run_dir, "iterate.log"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_evaluate(args) -> int:
    flat = load_flat_config(args.config, args.set)
    decode = decode_config_from(flat, args)
    metrics = metric_args_from(flat, args)

    student, extra = _load_model(args.checkpoint, StudentModel, "checkpoint")
    conditional, cond_extra = _load_model(args.conditional, ConditionalNet,
                                          "conditional checkpoint")
    records = _read_manifest(args.manifest, "evaluation manifest")
    if any(rec.events is None for rec in records):
        raise DataError(
            f"manifest {args.manifest} lacks events; evaluation needs a "
            "strong manifest")

    known = extra.get("classes") or cond_extra.get("classes")
    if known:
        stray = sorted({r.target_class for r in records} - set(known))
        if stray:
            raise DataError(
                f"manifest classes not in the checkpoint's catalog: {stray}")

    memo: dict = {}
    embed_cache = EmbeddingCache(conditional)
    report = evaluate_student(student, records, embed_cache, decode=decode,
                              feature_memo=memo, **metrics)

    out = args.out or os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)),
        f"eval_{os.path.splitext(os.path.basename(args.manifest))[0]}.csv")
    header = [
        f"checkpoint={args.checkpoint}",
        f"manifest={args.manifest}",
        f"threshold={decode.threshold} median_window={decode.median_window}",
        f"segment_length={metrics['segment_length']} "
        f"collar={metrics['collar']} offset_frac={metrics['offset_frac']}",
    ]
    write_report_csv(report, out, header=header)
    print(f"macro segment-F {report.segment_f:.4f}  "
          f"macro event-F {report.event_f:.4f}  "
          f"({report.n_clips} clips) -> {out}")
    return 0


def cmd_noise_exp(args) -> int:
    flat = load_flat_config(args.config, args.set)
    cfg = train_config_from(flat, args)
    try:
        rates = [float(r) for r in args.rates.split(",") if r.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad rate list {args.rates!r}: {exc}") from exc
    if not rates:
        raise ConfigError("noise-exp needs at least one corruption rate")
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise ConfigError("corruption rates must lie in [0, 1]")

    run_dir = resolve_run_dir(args)
    write_snapshot(run_dir, "noise-exp", flat, {"rates": rates})

    records = _read_manifest(args.manifest, "strong-labeled manifest")
    if any(rec.events is None for rec in records):
        raise DataError(f"manifest {args.manifest} lacks frame labels")
    val_records = _read_manifest(args.val_manifest, "validation manifest")

    memo: dict = {}
    if args.conditional:
        conditional, _ = _load_model(args.conditional, ConditionalNet,
                                     "conditional checkpoint")
    else:
        data_dir = os.path.dirname(os.path.abspath(args.manifest))
        conditional = _get_conditional(run_dir, data_dir, cfg, memo)

    samples = _load_samples(records, memo)
    rows = noise_robustness_experiment(samples, val_records, conditional, cfg,
                                       rates=rates, feature_memo=memo)
    out = os.path.join(run_dir, "noise_curve.csv")
    write_metrics_csv(rows, out)
    for row in rows:
        print(f"rate {row['rate']:.2f}: segment-F {row['segment_f']:.4f}  "
              f"event-F {row['event_f']:.4f}")
    print(f"curve -> {out}")

    if args.plot:
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            print("matplotlib not installed; skipping plot", file=sys.stderr)
            return 0
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([r["rate"] for r in rows], [r["segment_f"] for r in rows],
                marker="o", label="segment F")
        ax.plot([r["rate"] for r in rows], [r["event_f"] for r in rows],
                marker="s", label="event F")
        ax.set_xlabel("label corruption rate")
        ax.set_ylabel("F-score")
        ax.legend()
        fig.tight_layout()
        fig.savefig(args.plot, dpi=120)
        print(f"plot -> {args.plot}")
    return 0


def cmd_report(args) -> int:
    run_dir = resolve_run_dir(args)
    _require(run_dir, "run directory")
    config_path = os.path.join(run_dir, "config.json")
    if os.path.exists(config_path):
        with open(config_path) as fh:
            snapshot = json.load(fh)
        print(f"run: {run_dir} (command {snapshot.get('command', '?')})")
    else:
        print(f"run: {run_dir}")

    found = False
    for name in sorted(os.listdir(run_dir)):
        if name.endswith(".pt"):
            print(f"  checkpoint: {name}")
            found = True
    iter_path = os.path.join(run_dir, "iterations.csv")
    if os.path.exists(iter_path):
        found = True
        print("iterations:")
        with open(iter_path) as fh:
            for line in fh.read().strip().splitlines():
                print(f"  {line}")
    metrics_path = os.path.join(run_dir, "metrics.csv")
    if os.path.exists(metrics_path):
        found = True
        with open(metrics_path, newline="") as fh:
            final_rows: dict[str, dict] = {}
            for row in csv.DictReader(fh):
                final_rows[row["phase"]] = row
        for phase, row in final_rows.items():
            parts = [f"epoch {row['epoch']}", f"task loss {row['task_loss']}"]
            if row.get("val_event_f"):
                parts.append(f"val event-F {row['val_event_f']}")
            print(f"phase {phase}: " + ", ".join(parts))
    for name in sorted(os.listdir(run_dir)):
        if name.startswith("eval_") and name.endswith(".csv"):
            found = True
            print(f"evaluation {name}:")
            with open(os.path.join(run_dir, name)) as fh:
                for line in fh.read().strip().splitlines():
                    print(f"  {line}")
    if not found:
        print("  (no artifacts yet)")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(parser, seed=True):
    parser.add_argument("--config", help="JSON config file with flat dotted keys")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    if seed:
        parser.add_argument("--seed", type=int, help="random seed")


def _add_run_dir(parser):
    parser.add_argument("--run-dir", help="run directory (default: "
                        f"${RUN_ROOT_ENV}/NAME)")
    parser.add_argument("--name", help="run name under the run root")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsdlearn",
        description="Target sound detection with mixed supervision")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="synthesize audio and manifests")
    _add_common(p)
    p.add_argument("--out-dir", help="dataset output directory")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="run one training phase")
    _add_common(p)
    _add_run_dir(p)
    p.add_argument("--phase", required=True, choices=PHASE_NAMES)
    p.add_argument("--data-dir", help="dataset directory from build-dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--retrain-epochs", type=int)
    p.add_argument("--pseudo-epochs", type=int,
                   help="epochs for the first pseudo-label fit")
    p.add_argument("--no-adversarial", action="store_true",
                   help="disable domain-adversarial training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("iterate", help="run the two-student retraining loop")
    _add_common(p)
    _add_run_dir(p)
    p.add_argument("--data-dir", help="dataset directory from build-dataset")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--retrain-epochs", type=int)
    p.add_argument("--no-early-stop", action="store_true",
                   help="always run max-iterations passes")
    p.add_argument("--no-adversarial", action="store_true")
    p.add_argument("--threshold", type=float)
    p.add_argument("--median-window", type=int)
    p.set_defaults(func=cmd_iterate)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest")
    _add_common(p, seed=False)
    p.add_argument("--checkpoint", required=True, help="student checkpoint")
    p.add_argument("--conditional", required=True,
                   help="conditional encoder checkpoint")
    p.add_argument("--manifest", required=True, help="strong manifest to score")
    p.add_argument("--out", help="report CSV path")
    p.add_argument("--threshold", type=float)
    p.add_argument("--median-window", type=int)
    p.add_argument("--segment-length", type=float, dest="segment_length")
    p.add_argument("--collar", type=float)
    p.add_argument("--offset-frac", type=float, dest="offset_frac")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("noise-exp", help="label corruption robustness sweep")
    _add_common(p)
    _add_run_dir(p)
    p.add_argument("--manifest", required=True, help="strong-labeled manifest")
    p.add_argument("--val-manifest", required=True,
                   help="clean strong manifest for scoring")
    p.add_argument("--rates", default="0,0.2,0.5",
                   help="comma-separated corruption rates")
    p.add_argument("--conditional", help="conditional encoder checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--plot", help="write a PNG of the curve here")
    p.set_defaults(func=cmd_noise_exp)

    p = sub.add_parser("report", help="summarize a run directory")
    _add_run_dir(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PrerequisiteError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return type(exc).exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
