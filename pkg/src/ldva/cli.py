"""Command-line surface: train, eval, dump-pi, gradcheck, gen-synth.

Configs are strict JSON (unknown keys are rejected with their field path).
Exit codes: 0 success, 1 check failure, 2 usage/config error. The LDVA_SEED
environment variable overrides the configured seed and is recorded in the
run manifest. Outputs carry no timestamps so identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from ldva import data as datamod
from ldva import heads, trainer


class ConfigError(ValueError):
    """Invalid or unknown configuration content; message carries the field path."""


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 2


def _round6(value: float) -> float:
    return round(float(value), 6)


def _expect_keys(doc: dict, allowed, path: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")


# -- run configuration -------------------------------------------------------------


_DATASET_KEYS = {"kind", "spec", "images", "labels", "semantics_csv", "of", "ops", "seed"}
_DATA_KEYS = {"source", "target", "gzsl", "fsl", "da"}
_GZSL_KEYS = {"seen_fraction", "split_seed", "train_fraction"}
_FSL_KEYS = {"train_fraction", "split_seed", "rotations"}
_DA_KEYS = {"target_test_fraction", "split_seed"}
_SHIFT_OP_KEYS = {"kind", "magnitude"}


def load_run_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    _expect_keys(doc, {"train", "data"}, "config")
    if "train" not in doc or "data" not in doc:
        raise ConfigError("config: both 'train' and 'data' sections are required")
    train_doc = doc["train"]
    try:
        cfg = trainer.TrainConfig.from_dict(train_doc)
    except TypeError as exc:
        raise ConfigError(f"config.train: {exc}") from exc
    except ValueError as exc:
        message = str(exc)
        if "unknown train config keys" in message:
            key = message.split("[")[-1].strip("]'\" ")
            raise ConfigError(f"config.train.{key}: unknown key") from exc
        raise ConfigError(f"config.train: {message}") from exc
    data_doc = doc["data"]
    _expect_keys(data_doc, _DATA_KEYS, "config.data")
    if "source" not in data_doc:
        raise ConfigError("config.data.source: required")
    for name in ("source", "target"):
        if name in data_doc:
            _validate_dataset_doc(data_doc[name], f"config.data.{name}")
    for name, keys in (("gzsl", _GZSL_KEYS), ("fsl", _FSL_KEYS), ("da", _DA_KEYS)):
        if name in data_doc:
            _expect_keys(data_doc[name], keys, f"config.data.{name}")
    seed_env = os.environ.get("LDVA_SEED")
    if seed_env is not None:
        try:
            cfg.seed = int(seed_env)
        except ValueError as exc:
            raise ConfigError(f"LDVA_SEED: not an integer: {seed_env!r}") from exc
    return {"train": cfg, "data": data_doc}


def _validate_dataset_doc(doc: dict, path: str) -> None:
    _expect_keys(doc, _DATASET_KEYS, path)
    kind = doc.get("kind")
    if kind == "synthetic":
        if "spec" not in doc:
            raise ConfigError(f"{path}.spec: required for synthetic datasets")
    elif kind == "idx":
        for key in ("images", "labels"):
            if key not in doc:
                raise ConfigError(f"{path}.{key}: required for idx datasets")
    elif kind == "shift":
        if "ops" not in doc:
            raise ConfigError(f"{path}.ops: required for shift datasets")
        for i, op in enumerate(doc["ops"]):
            _expect_keys(op, _SHIFT_OP_KEYS, f"{path}.ops[{i}]")
    else:
        raise ConfigError(f"{path}.kind: expected synthetic|idx|shift, got {kind!r}")


def _load_dataset(doc: dict, path: str, base: datamod.LabeledImageSet | None = None,
                  domain: str | None = None) -> datamod.LabeledImageSet:
    kind = doc["kind"]
    if kind == "synthetic":
        try:
            spec = datamod.SynthSpec.from_json(doc["spec"])
            dataset = datamod.generate_synthetic(spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}.spec: {exc}") from exc
    elif kind == "idx":
        try:
            dataset = datamod.load_idx(doc["images"], doc["labels"])
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if "semantics_csv" in doc:
            table = heads.load_semantics_csv(doc["semantics_csv"])
            dataset.semantics = {int(y): v for y, v in
                                 zip(table.labels, table.vectors)}
    else:  # shift
        if base is None:
            raise ConfigError(f"{path}: shift dataset requires a source dataset")
        dataset = base
        for op in doc["ops"]:
            dataset = datamod.domain_shift(dataset, op["kind"],
                                           float(op["magnitude"]),
                                           seed=int(doc.get("seed", 0)))
    if domain is not None:
        dataset.domain = domain
    return dataset


def _resolve_datasets(run: dict):
    data_doc = run["data"]
    source = _load_dataset(data_doc["source"], "config.data.source", domain="source")
    target = None
    if "target" in data_doc:
        target = _load_dataset(data_doc["target"], "config.data.target",
                               base=source, domain="target")
    return source, target


def build_bundle(run: dict, source, target):
    cfg: trainer.TrainConfig = run["train"]
    data_doc = run["data"]
    if cfg.task == "gzsl":
        opts = data_doc.get("gzsl", {})
        return trainer.prepare_gzsl_data(
            source,
            seen_fraction=float(opts.get("seen_fraction", 0.75)),
            split_seed=int(opts.get("split_seed", cfg.seed)),
            train_fraction=float(opts.get("train_fraction", 0.8)))
    if cfg.task == "fsl":
        opts = data_doc.get("fsl", {})
        train_classes, test_classes = datamod.class_split(
            source, float(opts.get("train_fraction", 0.75)),
            int(opts.get("split_seed", cfg.seed)))
        if opts.get("rotations", False):
            train_classes = datamod.augment_rotations(train_classes)
            test_classes = datamod.augment_rotations(test_classes)
        train_set, _ = datamod.remap_contiguous(train_classes)
        return trainer.FslBundle(train=train_set, test=test_classes)
    if target is None:
        raise ConfigError("config.data.target: required for da")
    opts = data_doc.get("da", {})
    target_train, target_test = datamod.sample_split(
        target, 1.0 - float(opts.get("target_test_fraction", 0.5)),
        int(opts.get("split_seed", cfg.seed)))
    return trainer.DaBundle(source_train=source, target_train=target_train,
                            target_test=target_test)


# -- commands ---------------------------------------------------------------------


def cmd_train(args) -> int:
    try:
        run = load_run_config(args.config)
        cfg: trainer.TrainConfig = run["train"]
        if cfg.task != args.task:
            raise ConfigError(f"config.train.task: {cfg.task!r} does not match "
                              f"--task {args.task!r}")
        if args.phase is not None:
            cfg.da_phase = args.phase.replace("-", "_")
        init_from = None
        if cfg.task == "da" and cfg.da_phase == "joint_pi":
            if args.init is None:
                raise ConfigError("--init: required for da joint-pi")
            init_from = trainer.load_checkpoint(args.init)
        source, target = _resolve_datasets(run)
        bundle = build_bundle(run, source, target)
        run_result = trainer.train(cfg, bundle, init_from=init_from)
    except (ConfigError, ValueError) as exc:
        return _fail(str(exc))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = trainer.make_checkpoint(run_result, cfg)
    trainer.save_checkpoint(ckpt, out_dir / "checkpoint.ldva")
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for record in run_result.metrics:
            row = {k: (_round6(v) if isinstance(v, float) else v)
                   for k, v in record.items()}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    manifest = {"task": cfg.task, "phase": cfg.da_phase if cfg.task == "da" else None,
                "seed": cfg.seed, "epochs_run": run_result.epoch,
                "config_hash": trainer.config_hash(cfg), "config": cfg.to_dict()}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True,
                                                      indent=2) + "\n")
    print(f"checkpoint written to {out_dir / 'checkpoint.ldva'}")
    return 0


def _format_eval_metrics(task: str, metrics: dict) -> dict:
    if task == "gzsl":
        ts = _round6(metrics["ts"])
        tr = _round6(metrics["tr"])
        out = {"ts": ts, "tr": tr,
               # H is kept at full precision so it satisfies the harmonic-mean
               # identity on the emitted (rounded) ts/tr exactly
               "H": (0.0 if ts + tr == 0 else heads.harmonic_mean(ts, tr)),
               "c_cs": _round6(metrics["c_cs"]),
               "ts_uncalibrated": _round6(metrics["ts_uncalibrated"]),
               "tr_uncalibrated": _round6(metrics["tr_uncalibrated"]),
               "H_uncalibrated": _round6(metrics["H_uncalibrated"]),
               "zsl_unseen_acc": _round6(metrics["zsl_unseen_acc"])}
        return out
    if task == "fsl":
        return {"mean_acc": _round6(metrics["mean_acc"]),
                "stderr": _round6(metrics["stderr"]),
                "episodes": metrics["episodes"]}
    return {"target_acc": _round6(metrics["target_acc"])}


def cmd_eval(args) -> int:
    try:
        run = load_run_config(args.config)
        cfg: trainer.TrainConfig = run["train"]
        ckpt = trainer.load_checkpoint(args.checkpoint)
        if ckpt.config.get("task") != cfg.task:
            raise ConfigError(f"checkpoint task {ckpt.config.get('task')!r} does not "
                              f"match config.train.task {cfg.task!r}")
        model, _, _, _ = trainer.model_from_checkpoint(ckpt)
        source, target = _resolve_datasets(run)
        bundle = build_bundle(run, source, target)
        if cfg.task == "gzsl":
            c_cs = args.c_cs
            metrics = trainer.evaluate_gzsl(model, bundle, c_cs=c_cs)
        elif cfg.task == "fsl":
            metrics = trainer.evaluate_fsl(model, bundle.test, m=args.ways,
                                           k=args.shots, q=args.queries,
                                           n_episodes=args.episodes, seed=cfg.seed)
        else:
            metrics = trainer.evaluate_da(model, bundle.target_test)
    except (ConfigError, ValueError) as exc:
        return _fail(str(exc))

    out = _format_eval_metrics(cfg.task, metrics)
    blob = json.dumps(out, sort_keys=True, indent=2) + "\n"
    print(blob, end="")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(blob)
    return 0


def cmd_dump_pi(args) -> int:
    try:
        run = load_run_config(args.config)
        ckpt = trainer.load_checkpoint(args.checkpoint)
        model, _, _, _ = trainer.model_from_checkpoint(ckpt)
        source, target = _resolve_datasets(run)
    except (ConfigError, ValueError) as exc:
        return _fail(str(exc))

    code_dim = model.code_dim
    header = "label,domain," + ",".join(f"pi_{i}" for i in range(code_dim))
    lines = [header]
    for dataset in (source, target):
        if dataset is None:
            continue
        codes = trainer.encode_dataset(model, dataset.images)
        domain = dataset.domain or "data"
        for label, row in zip(dataset.labels, codes):
            values = ",".join(repr(float(v)) for v in row)
            lines.append(f"{int(label)},{domain},{values}")
    text = "\n".join(lines) + "\n"
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text)
    print(f"wrote {len(lines) - 1} rows to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = trainer.gradcheck_suite(seed=args.seed, tol=args.tol,
                                      fault_loss=args.fault)
    print(f"{'loss':<12} {'max_rel_err':>12}   worst parameter")
    failed = []
    for name, report in results:
        worst = max(report.entries, key=lambda e: e.max_rel_err)
        status = "ok" if report.passed() else "FAIL"
        print(f"{name:<12} {report.max_rel_err:>12.3e}   {worst.name} [{status}]")
        if not report.passed():
            failed.append((name, worst.name))
    if failed:
        for loss_name, param_name in failed:
            print(f"gradient check failed: {loss_name} (parameter {param_name})",
                  file=sys.stderr)
        return 1
    return 0


def cmd_gen_synth(args) -> int:
    try:
        doc = json.loads(Path(args.spec).read_text())
        spec = datamod.SynthSpec.from_json(doc)
        seed_env = os.environ.get("LDVA_SEED")
        if seed_env is not None:
            spec.seed = int(seed_env)
        dataset = datamod.generate_synthetic(spec)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        return _fail(f"spec: {exc}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    datamod.write_idx(dataset, out_dir / "images.idx", out_dir / "labels.idx")
    sem_lines = []
    for label in sorted(dataset.semantics):
        vec = dataset.semantics[label]
        sem_lines.append(f"{label}," + ",".join(repr(float(v)) for v in vec))
    (out_dir / "semantics.csv").write_text("\n".join(sem_lines) + "\n")
    manifest = {"spec": spec.to_json(), "seed": spec.seed,
                "num_classes": spec.num_classes, "num_images": len(dataset)}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True,
                                                      indent=2) + "\n")
    print(f"wrote {len(dataset)} images across {spec.num_classes} classes to {out_dir}")
    return 0


# -- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ldva",
        description="Train and evaluate the part-probability encoding pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--task", required=True, choices=list(trainer.TASKS))
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--phase", choices=["source-pi", "joint-pi"], default=None)
    p_train.add_argument("--init", default=None,
                         help="checkpoint to warm-start from (required for joint-pi)")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--ways", type=int, default=5)
    p_eval.add_argument("--shots", type=int, default=1)
    p_eval.add_argument("--queries", type=int, default=15)
    p_eval.add_argument("--episodes", type=int, default=200)
    p_eval.add_argument("--c-cs", dest="c_cs", type=float, default=None,
                        help="fix the stacking constant instead of sweeping")
    p_eval.set_defaults(func=cmd_eval)

    p_dump = sub.add_parser("dump-pi", help="dump part-probability codes as CSV")
    p_dump.add_argument("--checkpoint", required=True)
    p_dump.add_argument("--config", required=True)
    p_dump.add_argument("--out", required=True)
    p_dump.set_defaults(func=cmd_dump_pi)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--tol", type=float, default=1e-4)
    p_grad.add_argument("--fault", default=None, help=argparse.SUPPRESS)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_gen = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    p_gen.add_argument("--spec", required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
