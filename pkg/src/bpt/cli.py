"""``bpt`` command-line interface.

Configuration comes from one JSON file with optional sections ``model``,
``train``, ``data`` and ``eval``.  Precedence, lowest to highest: built-in
defaults, the config file, command-line flags (``--seed`` and ``--twin``).

Exit codes: 0 ok, 2 config error, 3 data error, 4 checkpoint error,
5 selftest failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from . import datasets, evalkit, learning, selftest
from .model import BINARY, CLASSIFIER, DESCRIPTOR, FULL_PRECISION, ConfigError, ModelConfig, PointTransformer, desk_config, paper_config

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_SELFTEST = 0, 2, 3, 4, 5

DATA_DEFAULTS = {
    "classification": {"n_classes": 4, "n_per_class": 70, "test_per_class": 20, "points_per_cloud": 256},
    "place_recognition": {"n_places": 50, "revisits_per_place": 5, "points_per_cloud": 128},
}
# desk-scale overrides of the training presets; the 5e-5 place-recognition
# rate is sized for far longer runs than a desk budget allows
TRAIN_DEFAULTS = {"classification": {}, "place_recognition": {"lr": 3e-3}}
EVAL_DEFAULTS = {"positive_radius": None, "max_n": 25, "batch_size": 64}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- configuration ------------------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file {p} not found", EXIT_CONFIG)
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"config file {p}: {e}", EXIT_CONFIG) from None
    if not isinstance(cfg, dict):
        raise CliError("config file must hold a JSON object", EXIT_CONFIG)
    unknown = set(cfg) - {"model", "train", "data", "eval"}
    if unknown:
        raise CliError(f"unknown config sections {sorted(unknown)}", EXIT_CONFIG)
    return cfg


def model_config(section: dict, head: str, twin: str | None, num_classes: int | None = None) -> ModelConfig:
    """Preset ("desk" or "paper") plus per-field overrides; ``twin`` (from
    the flag) wins over the file."""
    section = dict(section)
    preset = section.pop("preset", "desk")
    if preset not in ("desk", "paper"):
        raise ConfigError(f"unknown model preset {preset!r}")
    twin = twin or section.pop("twin", BINARY)
    section.pop("twin", None)
    if num_classes is not None:
        section.setdefault("num_classes", num_classes)
    base = desk_config(head, twin) if preset == "desk" else paper_config(head, twin)
    merged = {**base.to_dict(), **section, "head": head, "twin": twin}
    return ModelConfig.from_dict(merged)


def train_config(section: dict, task: str, seed: int | None) -> learning.TrainConfig:
    section = {**TRAIN_DEFAULTS[task], **section}
    if seed is not None:
        section["seed"] = seed
    factory = learning.TrainConfig.classification if task == learning.CLASSIFICATION else learning.TrainConfig.place_recognition
    known = learning.TrainConfig.from_dict({}).to_dict().keys()
    unknown = set(section) - set(known)
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    section.pop("task", None)
    return factory(**section)


# -- helpers --------------------------------------------------------------------------


def write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_data(path, task: str):
    if path is None:
        raise CliError("--data is required", EXIT_DATA)
    try:
        manifest, clouds = datasets.load_dataset(path)
    except datasets.DataError as e:
        raise CliError(str(e), EXIT_DATA) from None
    if manifest.task != task:
        raise CliError(f"dataset is for {manifest.task!r}, command needs {task!r}", EXIT_DATA)
    return manifest, clouds


def _split(manifest, name: str, required: bool = True) -> np.ndarray:
    ids = manifest.splits.get(name)
    if not ids:
        if required:
            raise CliError(f"dataset split {name!r} is missing or empty", EXIT_DATA)
        return np.zeros(0, dtype=np.int64)
    return np.asarray(ids, dtype=np.int64)


def batched_forward(model: PointTransformer, clouds: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with ad.no_grad():
        for s in range(0, len(clouds), batch_size):
            out.append(model(clouds[s:s + batch_size]).data)
    return np.concatenate(out, axis=0)


def _inference_mode(model: PointTransformer) -> PointTransformer:
    model.eval()
    if model.cfg.binary:
        model.set_packed(True)
    return model


def _load_checkpoint(path, seed=0):
    if path is None:
        raise CliError("--checkpoint is required", EXIT_CHECKPOINT)
    try:
        return ckpt_io.load(path, seed)
    except (ckpt_io.CheckpointError, OSError) as e:
        raise CliError(str(e), EXIT_CHECKPOINT) from None


def classification_eval(model, clouds, labels, batch_size=64) -> dict:
    logits = batched_forward(_inference_mode(model), clouds, batch_size)
    oa, macc = evalkit.classification_metrics(logits.argmax(-1), labels)
    return {"overall_accuracy": oa, "mean_class_accuracy": macc, "n_test": int(len(labels))}


def place_eval(model, manifest, clouds, positive_radius: float | None, max_n: int = 25, batch_size=64) -> dict:
    db_ids, q_ids = _split(manifest, "database"), _split(manifest, "query")
    radius = positive_radius if positive_radius is not None else (manifest.positive_radius or 0.5)
    poses = np.asarray(manifest.poses, dtype=np.float64)
    desc = batched_forward(_inference_mode(model), clouds[np.concatenate([db_ids, q_ids])], batch_size)
    db = evalkit.DescriptorDB(db_ids, poses[db_ids], desc[:len(db_ids)])
    queries = evalkit.DescriptorDB(q_ids, poses[q_ids], desc[len(db_ids):])
    n_pct = evalkit.one_percent_n(len(db))
    try:
        curve = evalkit.recall_curve(db, queries, max(max_n, n_pct), radius)
    except ValueError as e:
        raise CliError(str(e), EXIT_DATA) from None
    return {
        "recall@1": float(curve[0]),
        "recall@1%": float(curve[n_pct - 1]),
        "one_percent_n": n_pct,
        "recall_curve": [float(v) for v in curve[:max_n]],
        "database_size": int(len(db)),
        "n_queries": int(len(queries)),
        "positive_radius": radius,
    }


class _NdjsonLog:
    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = path.open("w")

    def __call__(self, rec: dict):
        self.fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self):
        self.fh.close()


# -- commands -------------------------------------------------------------------------


def cmd_gen(args, cfg: dict, task: str) -> int:
    params = {**DATA_DEFAULTS[task], **cfg.get("data", {})}
    seed = args.seed if args.seed is not None else params.pop("seed", 0)
    params.pop("seed", None)
    gen = datasets.gen_synthetic_classification if task == learning.CLASSIFICATION else datasets.gen_synthetic_places
    try:
        manifest, clouds = gen(seed=seed, **params)
    except TypeError as e:
        raise CliError(f"bad data config: {e}", EXIT_CONFIG) from None
    except datasets.DataError as e:
        raise CliError(str(e), EXIT_DATA) from None
    out = Path(args.out)
    datasets.save_dataset(out, manifest, clouds)
    print(f"wrote {len(clouds)} clouds to {out}")
    return EXIT_OK


def cmd_train(args, cfg: dict, task: str) -> int:
    manifest, clouds = _load_data(args.data, task)
    seed = args.seed if args.seed is not None else cfg.get("train", {}).get("seed", 0)
    tcfg = train_config(cfg.get("train", {}), task, seed)
    out = Path(args.out)
    log = _NdjsonLog(out / "train_log.ndjson")
    train_ids = _split(manifest, "train")
    try:
        if task == learning.CLASSIFICATION:
            mcfg = model_config(cfg.get("model", {}), CLASSIFIER, args.twin, len(manifest.class_names or []) or None)
            labels = np.asarray(manifest.labels)
            if labels[train_ids].max() >= mcfg.num_classes:
                raise CliError("labels exceed the model's num_classes", EXIT_CONFIG)
            model = PointTransformer(mcfg, seed)
            result = learning.train_classification(model, clouds[train_ids], labels[train_ids], tcfg, log=log)
        else:
            mcfg = model_config(cfg.get("model", {}), DESCRIPTOR, args.twin)
            poses = np.asarray(manifest.poses)[train_ids]
            index = learning.PlaceIndex(poses, manifest.positive_radius or 0.5, manifest.negative_radius or 2.0)
            model = PointTransformer(mcfg, seed)
            result = learning.train_place_recognition(model, clouds[train_ids], index, tcfg, log=log)
    finally:
        log.close()
    ckpt_io.save(out / "checkpoint.bptc", model, meta={"train": tcfg.to_dict(), "epochs_done": tcfg.epochs})
    doc = {"task": task, "twin": mcfg.twin, "seed": seed, "model": mcfg.to_dict(), "train": tcfg.to_dict(),
           "epochs": [{k: v for k, v in r.items()} for r in result.epoch_records]}
    ev = {**EVAL_DEFAULTS, **cfg.get("eval", {})}
    if task == learning.CLASSIFICATION and manifest.splits.get("test"):
        test = _split(manifest, "test")
        doc["test"] = classification_eval(model, clouds[test], np.asarray(manifest.labels)[test], ev["batch_size"])
    if task == learning.PLACE_RECOGNITION and manifest.splits.get("database") and manifest.splits.get("query"):
        doc["test"] = place_eval(model, manifest, clouds, ev["positive_radius"], ev["max_n"], ev["batch_size"])
    write_json(out / "train_metrics.json", doc)
    print(json.dumps(doc.get("test", {}), sort_keys=True))
    return EXIT_OK


def cmd_eval(args, cfg: dict, task: str) -> int:
    model, ck = _load_checkpoint(args.checkpoint)
    manifest, clouds = _load_data(args.data, task)
    ev = {**EVAL_DEFAULTS, **cfg.get("eval", {})}
    if task == learning.CLASSIFICATION:
        if model.cfg.head != CLASSIFIER:
            raise CliError("checkpoint has no classifier head", EXIT_CHECKPOINT)
        test = _split(manifest, "test")
        doc = classification_eval(model, clouds[test], np.asarray(manifest.labels)[test], ev["batch_size"])
        name = "eval_cls.json"
    else:
        if model.cfg.head != DESCRIPTOR:
            raise CliError("checkpoint has no descriptor head", EXIT_CHECKPOINT)
        doc = place_eval(model, manifest, clouds, ev["positive_radius"], ev["max_n"], ev["batch_size"])
        name = "eval_pr.json"
    doc["checkpoint_kind"] = "deploy" if ck.kind == ckpt_io.DEPLOY else "training"
    doc["twin"] = model.cfg.twin
    write_json(Path(args.out) / name, doc)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_cost_report(args, cfg: dict) -> int:
    section = dict(cfg.get("model", {}))
    section.setdefault("preset", "paper")
    head = section.pop("head", CLASSIFIER)
    mcfg = model_config(section, head, args.twin or BINARY)
    n_points = int(cfg.get("eval", {}).get("n_points", 1024 if section["preset"] == "paper" else 256))
    report = evalkit.cost_report(mcfg, n_points=n_points, lane=int(cfg.get("eval", {}).get("lane", 64)))
    write_json(Path(args.out) / "cost_report.json", report.to_dict())
    print(report.to_table())
    return EXIT_OK


def verify_two_paths(model: PointTransformer, clouds: np.ndarray, tol: float = 1e-6) -> float:
    """Relative difference between dense-expansion and bit-packed forwards."""
    model.eval()
    model.set_packed(False)
    dense = batched_forward(model, clouds)
    model.set_packed(True)
    packed = batched_forward(model, clouds)
    return float(np.abs(dense - packed).max() / max(np.abs(dense).max(), 1e-300))


def cmd_export(args, cfg: dict) -> int:
    model, ck = _load_checkpoint(args.checkpoint)
    if ck.kind != ckpt_io.TRAINING:
        raise CliError("export-binary needs a training checkpoint", EXIT_CHECKPOINT)
    if not model.cfg.binary:
        raise CliError("only the binary twin can be exported", EXIT_CONFIG)
    if args.data:
        _, clouds = datasets.load_dataset(args.data)
        clouds = clouds[:16]
    else:
        rng = np.random.default_rng(args.seed or 0)
        clouds = np.stack([datasets.normalize(rng.normal(size=(256, 3))) for _ in range(4)])
    err = verify_two_paths(model, clouds)
    if not err <= 1e-6:
        raise CliError(f"two-path equivalence failed (relative error {err:.3e})", EXIT_CHECKPOINT)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = ckpt_io.save(out / "deploy.bptc", model, deploy=True, meta=ck.meta)
    print(f"deploy checkpoint: {len(data)} bytes (training {Path(args.checkpoint).stat().st_size}); "
          f"two-path relative error {err:.2e}")
    return EXIT_OK


def cmd_selftest(args, cfg: dict) -> int:
    results = selftest.run(args.seed or 0)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_SELFTEST


COMMANDS = {
    "gen-cls": lambda a, c: cmd_gen(a, c, learning.CLASSIFICATION),
    "gen-pr": lambda a, c: cmd_gen(a, c, learning.PLACE_RECOGNITION),
    "train-cls": lambda a, c: cmd_train(a, c, learning.CLASSIFICATION),
    "train-pr": lambda a, c: cmd_train(a, c, learning.PLACE_RECOGNITION),
    "eval-cls": lambda a, c: cmd_eval(a, c, learning.CLASSIFICATION),
    "eval-pr": lambda a, c: cmd_eval(a, c, learning.PLACE_RECOGNITION),
    "cost-report": cmd_cost_report,
    "export-binary": cmd_export,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpt", description="Binary point-cloud transformer engine")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="JSON config with model/train/data/eval sections")
    p.add_argument("--seed", type=int, help="seed for data generation, init and batching")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--data", help="dataset directory holding manifest.json")
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--twin", choices=[BINARY, FULL_PRECISION])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ckpt_io.CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except datasets.DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
