"""Command-line entry point.

Every subcommand builds one effective configuration from, in order: the
preset, an optional JSON config file, ``--set key.path=value`` overrides and
finally ``--seed``. The effective configuration is written to the output
directory as ``config.json``; feeding that file back through ``--config``
reproduces the run.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .augment import AugmentConfig
from .checkpoint import CheckpointError, load_checkpoint
from .data import AGES, DatasetConfig, DatasetError, build_manifest, read_dataset, samples_for, write_dataset
from .evaluation import evaluate, predict_masks, token_policy
from .gradcheck import check_model, format_table, run_op_checks
from .model import PRESETS, ModelConfig, UNetConfig, build_model, count_parameters, map_slice_location, preset_config, unet_preset_config
from .studies import StudyConfig, StudyError, emit_report, load_study_config, run_study
from .training import AdamW, ScheduleConfig, TrainRunConfig, TrainingDiverged, deterministic_mode, resume, train

log = logging.getLogger("conunetr")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# -- effective configuration ---------------------------------------------------------
def _train_defaults(preset: str) -> dict:
    if preset == "paper-full":
        return dict(epochs=700, batch_size=45, crop_size=512, lr=1e-4, lr_min=0.0, weight_decay=1e-3)
    return dict(epochs=80, batch_size=1, crop_size=None, lr=2e-3, lr_min=0.0, weight_decay=1e-3)


def base_config(preset: str) -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    model = preset_config(preset)
    return {
        "preset": preset,
        "arch": "conunetr",
        "seed": 0,
        "deterministic": True,
        "model": model.to_dict(),
        "unet": unet_preset_config(preset).to_dict(),
        "data": {**asdict(DatasetConfig(img_size=model.img_size)), "cohorts": [list(c) for c in DatasetConfig().cohorts]},
        "train": {
            **_train_defaults(preset),
            "ages": [0, 1, 2],
            "mutation": 0,
            "checkpoint_every": 0,
            "augment": asdict(AugmentConfig(bezier_p=0.0)),
        },
    }


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"{where}: unknown config key")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key.path=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.split(".")
    node = cfg
    for i, key in enumerate(keys):
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"{'.'.join(keys[: i + 1])}: unknown config key")
        if i == len(keys) - 1:
            node[key] = _parse_value(raw)
        else:
            node = node[key]


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config file {path} is unreadable: {exc}") from None


def effective_config(args) -> dict:
    file_cfg = read_config_file(args.config) if args.config else {}
    preset = args.preset or file_cfg.get("preset") or "desk"
    cfg = base_config(preset)
    _merge(cfg, {k: v for k, v in file_cfg.items() if k != "preset"})
    for assignment in args.set or []:
        apply_override(cfg, assignment)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.deterministic:
        cfg["deterministic"] = True
    cfg["model"]["seed"] = cfg["unet"]["seed"] = cfg["data"]["seed"] = cfg["seed"]
    return cfg


def model_config(cfg: dict):
    try:
        if cfg["arch"] == "unet":
            return UNetConfig.from_dict(cfg["unet"])
        if cfg["arch"] == "conunetr":
            return ModelConfig.from_dict(cfg["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None
    raise ConfigError(f"arch: must be 'conunetr' or 'unet', got {cfg['arch']!r}")


def dataset_config(cfg: dict) -> DatasetConfig:
    data = dict(cfg["data"])
    data["cohorts"] = tuple(tuple(c) for c in data["cohorts"])
    try:
        return DatasetConfig(**data)
    except TypeError as exc:
        raise ConfigError(f"data: {exc}") from None


def run_config(cfg: dict) -> tuple[TrainRunConfig, ScheduleConfig]:
    t = cfg["train"]
    try:
        run = TrainRunConfig(
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            crop_size=t["crop_size"],
            seed=cfg["seed"],
            augment=AugmentConfig(**t["augment"]),
            checkpoint_every=t["checkpoint_every"],
            deterministic=cfg["deterministic"],
        )
        sched = ScheduleConfig(t["lr"], t["lr_min"], t["epochs"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None
    return run, sched


def _out_dir(args, required: bool = True) -> Optional[Path]:
    if args.out is None:
        if required:
            raise ConfigError(f"{args.command} needs --out")
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(cfg: dict, out: Optional[Path]) -> None:
    if out is not None:
        (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# -- subcommands ----------------------------------------------------------------------
def cmd_gen_data(args, cfg) -> int:
    out = _out_dir(args)
    _echo(cfg, out)
    path = write_dataset(build_manifest(dataset_config(cfg)), out / "dataset")
    print(f"wrote {path}")
    return EXIT_OK


def _load_data(args):
    if not args.data:
        raise ConfigError(f"{args.command} needs --data (a directory written by gen-data)")
    return read_dataset(args.data)


def cmd_train(args, cfg) -> int:
    out = _out_dir(args)
    _echo(cfg, out)
    manifest, samples = _load_data(args)
    mconf = model_config(cfg)
    size = cfg["train"]["crop_size"] or manifest.config.img_size
    if mconf.img_size != size:
        raise ConfigError(
            f"model.img_size: {mconf.img_size} does not match the training extent {size} of dataset {args.data}"
        )
    ages = sorted(cfg["train"]["ages"])
    vols = manifest.select("train", cfg["train"]["mutation"], ages)
    if not vols:
        raise ConfigError(f"train.ages: no training volumes for ages {ages} in {args.data}")
    data = samples_for(manifest, samples, vols)
    run, sched = run_config(cfg)
    meta = {"trained_ages": ages}
    if args.resume:
        _, _, records = resume(args.resume, data, run, sched, out, weight_decay=cfg["train"]["weight_decay"])
    else:
        model = build_model(mconf)
        opt = AdamW(model.named_parameters(), lr=sched.lr_init, weight_decay=cfg["train"]["weight_decay"])
        records = train(model, data, run, sched, opt, out, meta=meta)
    if records:
        print(f"epoch {records[-1]['epoch']}: mean loss {records[-1]['mean_loss']:.5f}")
    print(f"wrote {out / 'final.bin'}")
    return EXIT_OK


def _checkpoint_model(args):
    if not args.checkpoint:
        raise ConfigError(f"{args.command} needs --checkpoint")
    return load_checkpoint(args.checkpoint)


def cmd_eval(args, cfg) -> int:
    out = _out_dir(args)
    _echo(cfg, out)
    model, meta = _checkpoint_model(args)
    manifest, samples = _load_data(args)
    mutation = args.mutation
    ages = args.ages if args.ages else sorted({v.age_id for v in manifest.select(args.split, mutation)})
    vols = manifest.select(args.split, mutation, ages)
    if not vols:
        raise ConfigError(f"--ages: no {args.split} volumes for mutation {mutation}, ages {ages}")
    trained = meta.get("trained_ages") or list(range(getattr(model.config, "k_ages", 1)))
    with deterministic_mode(cfg["deterministic"]):
        results, means = evaluate(model, {v.volume_id: samples[v.volume_id] for v in vols}, token_policy(trained))
    with (out / "dice.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["volume_id", "age", "mutation_id", "dice"])
        for r in results:
            w.writerow([r.volume_id, AGES[r.age_id].name, r.mutation_id, f"{r.dice:.6f}"])
    with (out / "age_means.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["age", "mean_dice"])
        for age, d in means.items():
            w.writerow([AGES[age].name, f"{d:.6f}"])
    for age, d in means.items():
        print(f"{AGES[age].name}: {d:.4f}")
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    out = _out_dir(args)
    _echo(cfg, out)
    model, meta = _checkpoint_model(args)
    n = model.config.img_size
    if args.image:
        if args.age_id is None or args.loc is None:
            raise ConfigError("--image needs --age-id and --loc")
        raw = Path(args.image).read_bytes() if Path(args.image).exists() else None
        if raw is None:
            raise ConfigError(f"--image: file not found: {args.image}")
        if len(raw) != n * n * 4:
            raise ConfigError(f"--image: {args.image} holds {len(raw)} bytes, expected {n}x{n} float32")
        image = np.frombuffer(raw, dtype="<f4").reshape(1, 1, n, n).astype(np.float32)
        with T.no_grad(), deterministic_mode(cfg["deterministic"]):
            logits = model.logits(T.Tensor(image), args.age_id, args.loc).data
        pred = (logits[:, 1] > logits[:, 0]).astype("u1")[0]
        target = out / (Path(args.image).stem + "_pred.raw")
        target.write_bytes(pred.tobytes())
        print(f"wrote {target}")
        return EXIT_OK
    if not args.volume:
        raise ConfigError("infer needs either --image (with --age-id, --loc) or --data with --volume")
    manifest, samples = _load_data(args)
    if args.volume not in samples:
        raise ConfigError(f"--volume: {args.volume!r} is not in the manifest of {args.data}")
    trained = meta.get("trained_ages") or list(range(getattr(model.config, "k_ages", 1)))
    policy = token_policy(trained)
    chosen = samples[args.volume]
    with deterministic_mode(cfg["deterministic"]):
        preds = predict_masks(model, chosen, policy if args.age_id is None else (lambda _a: args.age_id))
    for s, pred in zip(chosen, preds):
        target = out / f"{args.volume}_mask_{s.slice_index}.raw"
        target.write_bytes(pred.astype("u1").tobytes())
        print(f"wrote {target} (loc {map_slice_location(s.slice_index, s.total_slices)})")
    return EXIT_OK


def cmd_study(args, cfg) -> int:
    out = _out_dir(args)
    if args.config:
        study = load_study_config(args.config)
        doc = study.to_dict()
    elif args.kind:
        doc = {"kind": args.kind}
    else:
        raise ConfigError("study needs --config (a study JSON file) or --kind")
    doc = StudyConfig(**doc).to_dict()
    for assignment in args.set or []:
        apply_override(doc, assignment)
    if args.preset:
        doc["preset"] = args.preset
    if args.seed is not None:
        doc["seeds"] = [args.seed + r for r in range(doc["repetitions"])]
    study = StudyConfig.from_dict(doc)
    (out / "study_config.json").write_text(json.dumps(study.to_dict(), indent=2, sort_keys=True) + "\n")
    data = _load_data(args) if args.data else None
    report = run_study(study, data)
    for path in emit_report(report, out):
        print(f"wrote {path}")
    failed = [r for r in report.rows if r.status != "ok"]
    if failed:
        print(f"{len(failed)} cell(s) failed", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    out = _out_dir(args, required=False)
    _echo(cfg, out)
    results = run_op_checks(cfg["seed"])
    mconf = model_config(cfg)
    if isinstance(mconf, ModelConfig):
        results.append(check_model(mconf, cfg["seed"]))
    table = format_table(results)
    print(table)
    if out is not None:
        (out / "gradcheck.txt").write_text(table + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_params(args, cfg) -> int:
    out = _out_dir(args, required=False)
    _echo(cfg, out)
    report = {}
    for arch in ("conunetr", "unet"):
        conf = model_config({**cfg, "arch": arch})
        counts = count_parameters(build_model(conf))
        report[arch] = counts
        print(f"[{arch}]")
        for name, n in counts.items():
            print(f"  {name:<16} {n:>12,d}")
    if out is not None:
        (out / "params.json").write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "study": cmd_study,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--preset", choices=sorted(PRESETS), help="named model/run bundle (default desk)")
    common.add_argument("--config", help="JSON config file (a study file for the study command)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="single source of randomness")
    common.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bitwise repeatability")
    common.add_argument("--verbose", action="store_true")

    parser = _Parser(prog="conunetr", description="Conditional transformer U-Net segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic phantom dataset")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("eval", parents=[common], help="per-volume Dice on a dataset split")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--mutation", type=int, default=0)
    p.add_argument("--ages", type=int, nargs="+")
    p = sub.add_parser("infer", parents=[common], help="predict masks for slices")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--volume")
    p.add_argument("--image", help="raw little-endian float32 slice of the model's size")
    p.add_argument("--age-id", type=int)
    p.add_argument("--loc", type=int, help="slice location in [1, 100]")
    p = sub.add_parser("study", parents=[common], help="run a study and emit its report")
    p.add_argument("--kind", choices=("individual", "joint", "cross_mutation", "data_scaling", "ablation"))
    p.add_argument("--data")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    sub.add_parser("params", parents=[common], help="parameter counts per component")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args) if args.command != "study" else {}
        if args.command != "study":
            # validate the model section up front so errors name the key
            model_config(cfg)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, StudyError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDiverged, T.NonFiniteError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - last-resort reporting for the CLI
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
