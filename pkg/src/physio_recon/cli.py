"""The physio-recon command line interface.

    physio-recon <command> --config <path> [--set key=value ...] --out <dir>
                 [--seed N] [--keep-going] [--raw-mode]

Commands: synth, preprocess, train, evaluate, predict. Configuration is
file-first (JSON) with dotted --set overrides, so every hyperparameter lives
in a versionable artifact. PHYSIO_RECON_THREADS caps worker parallelism.

Exit codes: 0 success, 64 usage, 1 data error, 2 hash mismatch, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from physio_recon import dataset_io, evaluation, synth, training
from physio_recon.errors import (
    DataError,
    HashMismatchError,
    NumericError,
    PhysioReconError,
    UsageError,
)
from physio_recon.models import config_from_dict
from physio_recon.signal_prep import PrepSettings

EXIT_OK = 0
EXIT_DATA = 1
EXIT_HASH = 2
EXIT_NUMERIC = 3
EXIT_USAGE = 64


def worker_count() -> int:
    raw = os.environ.get("PHYSIO_RECON_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"PHYSIO_RECON_THREADS must be an integer, got {raw!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="physio-recon", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", type=Path, required=False, help="JSON configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override, value parsed as JSON")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.needs_config = needs_config

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, needs_config=False)
    p.add_argument("--raw-mode", action="store_true", help="emit 400 Hz respiration and beat trains")

    p = sub.add_parser("preprocess", help="condition a dataset into a preprocessed cache")
    common(p)
    p.add_argument("--keep-going", action="store_true", help="collect all scan failures before exiting")

    p = sub.add_parser("train", help="run a training strategy over the folds")
    common(p)
    p.add_argument("--strategy", default=None, help="strategy kind override")
    p.add_argument("--source", default=None, help="source preprocessed-cache directory")
    p.add_argument("--target", default=None, help="target preprocessed-cache directory")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a preprocessed cache")
    common(p)

    p = sub.add_parser("predict", help="dump per-scan measured/predicted series")
    common(p)
    return parser


def load_config(args) -> dict:
    if args.config is None:
        cfg = {}
    else:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        try:
            cfg = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON: {exc}") from exc
    for kv in args.overrides:
        key, sep, raw = kv.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {kv!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        *path, leaf = key.split(".")
        for part in path:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set {key}: {part} is not an object")
        node[leaf] = value
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg_dict = load_config(args)
    if args.raw_mode:
        cfg_dict["raw_mode"] = True
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    try:
        cfg = synth.SynthConfig.from_dict(cfg_dict)
    except DataError as exc:
        raise UsageError(str(exc)) from exc
    manifest = synth.generate_dataset(cfg, args.out)
    print(f"wrote {len(manifest.scans)} scans to {args.out}")
    return EXIT_OK


def _preprocess_one(entry, manifest, prep, out_dir, existing):
    """Returns (entry_dict, status) where status is 'cached' or 'skipped'."""
    cached = existing.get(entry.scan_id)
    path = Path(out_dir) / f"{entry.scan_id}.csv"
    if cached is not None and path.exists() and dataset_io._file_hash(path) == cached["content_hash"]:
        return cached, "skipped"
    scan = dataset_io.load_scan(entry, manifest, prep)
    rel, digest = dataset_io.write_scan_cache(scan, out_dir)
    return (
        {
            "scan_id": scan.scan_id,
            "subject_id": scan.subject_id,
            "age": scan.age,
            "path": rel,
            "content_hash": digest,
        },
        "cached",
    )


def cmd_preprocess(args) -> int:
    cfg = load_config(args)
    if "manifest" not in cfg:
        raise UsageError("preprocess config must name a 'manifest' file")
    manifest_path = Path(cfg["manifest"])
    if not manifest_path.is_absolute() and args.config is not None:
        manifest_path = (args.config.parent / manifest_path).resolve()
    manifest = dataset_io.load_manifest(manifest_path)
    prep = PrepSettings.from_dict(cfg.get("settings", {}))

    out_dir = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    existing = {}
    cache_mf = out_dir / dataset_io.CACHE_MANIFEST
    if cache_mf.exists():
        doc = json.loads(cache_mf.read_text())
        if doc.get("settings_hash") == prep.content_hash():
            existing = {e["scan_id"]: e for e in doc["scans"]}

    entries, failures = [], []
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        futures = {
            e.scan_id: pool.submit(_preprocess_one, e, manifest, prep, out_dir, existing)
            for e in manifest.scans
        }
        for scan_id in sorted(futures):
            try:
                entry, status = futures[scan_id].result()
                entries.append(entry)
                print(f"{scan_id}: {status}" + (" (hash match)" if status == "skipped" else ""))
            except PhysioReconError as exc:
                failures.append((scan_id, exc))
                print(f"{scan_id}: FAILED: {exc}", file=sys.stderr)
                if not args.keep_going:
                    raise DataError(f"scan '{scan_id}': {exc}") from exc
    if failures:
        raise DataError(f"{len(failures)} scan(s) failed preprocessing")
    dataset_io.write_cache_manifest(out_dir, manifest.dataset_name, prep, entries)
    print(f"cache manifest written to {cache_mf}")
    return EXIT_OK


def _require(cfg: dict, key: str, command: str):
    if key not in cfg:
        raise UsageError(f"{command} config must define '{key}'")
    return cfg[key]


def cmd_train(args) -> int:
    cfg = load_config(args)
    strategy_cfg = dict(cfg.get("strategy", {}))
    if args.strategy is not None:
        strategy_cfg["kind"] = args.strategy
    if args.source is not None:
        strategy_cfg["source"] = args.source
    if args.target is not None:
        strategy_cfg["target"] = args.target
    if "kind" not in strategy_cfg:
        raise UsageError("train needs a strategy kind (config strategy.kind or --strategy)")
    if "target" not in strategy_cfg:
        raise UsageError("train needs a target preprocessed cache (strategy.target or --target)")

    try:
        spec = training.StrategySpec(
            kind=strategy_cfg["kind"],
            target_dataset="target",
            source_dataset="source" if strategy_cfg.get("source") else None,
        )
    except DataError as exc:
        raise UsageError(str(exc)) from exc

    model_cfg = config_from_dict(_require(cfg, "model", "train"))
    train_dict = dict(cfg.get("train", {}))
    if args.seed is not None:
        train_dict["seed"] = args.seed
    train_cfg = training.TrainConfig.from_dict(train_dict)
    k = int(cfg.get("folds", {}).get("k", 5))

    datasets = {}
    target_scans, target_prep = dataset_io.read_cache(strategy_cfg["target"])
    datasets["target"] = target_scans
    if strategy_cfg.get("source"):
        source_scans, source_prep = dataset_io.read_cache(strategy_cfg["source"])
        if source_prep.content_hash() != target_prep.content_hash():
            raise HashMismatchError(
                "source and target caches were preprocessed with different settings"
            )
        datasets["source"] = source_scans

    dtype = np.float64 if train_cfg.dtype == "float64" else np.float32
    result = training.run_strategy(spec, datasets, model_cfg, train_cfg, k=k, dtype=dtype)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    if result.pretrain_checkpoint is not None:
        result.pretrain_checkpoint.save(out / "pretrain.ckpt")
    for i, ckpt in enumerate(result.checkpoints):
        ckpt.save(out / f"fold{i}.ckpt")
    for i, hist in enumerate(result.histories):
        training.write_epoch_log(out / f"epochs_{i}.csv", hist)
    result.report.write_json(out / "report.json")
    result.report.write_scan_csv(out / "scans.csv")
    for task, summ in result.report.summaries.items():
        print(f"{task}: pooled median r = {summ.pooled:.4f} over {summ.n_scans} scans")
    return EXIT_OK


def _load_eval_inputs(args, command: str):
    cfg = load_config(args)
    ckpt = training.Checkpoint.load(Path(_require(cfg, "checkpoint", command)))
    scans, prep = dataset_io.read_cache(Path(_require(cfg, "data", command)))
    if ckpt.provenance.get("prep_hash") not in (None, prep.content_hash()):
        raise HashMismatchError(
            "checkpoint was trained on data with different preprocessing settings"
        )
    task = cfg.get("task", ckpt.train_config.get("task", "RV"))
    return cfg, ckpt, scans, task


def cmd_evaluate(args) -> int:
    cfg, ckpt, scans, task = _load_eval_inputs(args, "evaluate")
    results = evaluation.evaluate_scans(ckpt, scans, task, fold=int(ckpt.provenance.get("fold", -1)))
    report = evaluation.build_report(
        strategy=str(ckpt.provenance.get("strategy", "evaluate")),
        model_name=ckpt.arch,
        results=results,
        prep_hash=scans[0].prep_hash if scans else "",
    )
    args.out.mkdir(parents=True, exist_ok=True)
    report.write_json(args.out / "report.json")
    report.write_scan_csv(args.out / "scans.csv")
    for task_name, summ in report.summaries.items():
        print(f"{task_name}: pooled median r = {summ.pooled:.4f} over {summ.n_scans} scans")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg, ckpt, scans, task = _load_eval_inputs(args, "predict")
    args.out.mkdir(parents=True, exist_ok=True)
    model = ckpt.build_model()
    tasks = evaluation.TASKS if task == "joint" else (task,)
    for scan in scans:
        idx = model.prediction_time_indices(scan.roi.shape[0])
        out = model.forward(scan.roi, train=False, rng=None).data
        for col, name in enumerate(tasks):
            measured = (scan.rv if name == "RV" else scan.hr)[idx]
            evaluation.write_prediction_dump(
                args.out / f"pred_{scan.scan_id}_{name}.csv", scan, idx, measured, out[:, col]
            )
    print(f"wrote predictions for {len(scans)} scans to {args.out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except HashMismatchError as exc:
        print(f"hash mismatch: {exc}", file=sys.stderr)
        return EXIT_HASH
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PhysioReconError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
