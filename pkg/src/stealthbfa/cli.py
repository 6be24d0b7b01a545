"""Command-line front end: ``python -m stealthbfa {train,protect,attack,evaluate}``.

Exit status: 0 success, 1 operational failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import checkpoint
from . import tensor as T
from .attack import AttackError, iterative_bit_search
from .checkpoint import CheckpointError, Provenance
from .config import ConfigFileError, ExperimentConfig, load_config, load_datasets
from .data import DatasetError, IdxParseError, LabeledDataset
from .metrics import RobustnessError, deepfool_batch, empirical_robustness, evaluate
from .models import ConfigError, Model, build_model, forward
from .reports import OutputSet, curve_csv, format_flip_list, results_table, samples_table, to_json, trajectory_table
from .training import TrainingError, train

log = logging.getLogger("stealthbfa")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

ORIGINAL = "original.bvq"
PROTECTED = "protected.bvq"
ATTACKED = "attacked.bvq"


def _datasets(cfg: ExperimentConfig, model: Model):
    train_ds, test_ds = load_datasets(cfg)
    for ds in (train_ds, test_ds):
        ds.check_classes(model.class_count)
    return train_ds, test_ds


def _empirical(model: Model, ds: LabeledDataset, count: int) -> Optional[float]:
    if count <= 0:
        return None
    return empirical_robustness(model, ds.head(min(count, len(ds)))).value


def _load_checkpoint(path) -> tuple:
    model, prov = checkpoint.load(path)
    log.info("loaded %s (%s, %d epochs)", path, model.name, prov.epochs)
    return model, prov


def cmd_train(cfg: ExperimentConfig, args) -> int:
    model = build_model(cfg.model, seed=cfg.seed)
    train_ds, test_ds = _datasets(cfg, model)
    result = train(model, train_ds, cfg.train)
    stats = evaluate(result.model, test_ds)
    summary = {
        "schema": "train-summary/1",
        "model": cfg.model,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "epochs": cfg.train.epochs,
        "test_accuracy": stats["accuracy"],
        "test_loss": stats["loss"],
        "test_robustness": stats["robustness"],
        "weights": result.model.weight_count,
        "parameters": result.model.parameter_count,
    }
    prov = Provenance(cfg.digest(), cfg.train.epochs, {"stage": "original", "seed": cfg.seed})
    out = OutputSet(cfg.out)
    out.add(ORIGINAL, checkpoint.dumps(result.model, prov))
    out.add("train_curve.csv", curve_csv(result.history))
    out.add("train_summary.json", to_json(summary))
    for path in out.commit():
        print(path)
    return EXIT_OK


def cmd_protect(cfg: ExperimentConfig, args) -> int:
    base, base_prov = _load_checkpoint(args.checkpoint or cfg.out / ORIGINAL)
    train_ds, test_ds = _datasets(cfg, base)
    opts = cfg.protect
    protected = train(base, train_ds, opts.train)
    probe = test_ds.head(min(opts.robustness_samples, len(test_ds)))
    rows = []
    summary = {"schema": "protect-summary/1", "model": base.name, "config_hash": cfg.digest(), "seed": cfg.seed}
    states = [("base", base), ("protected", protected.model)]
    twin = None
    if opts.twin:
        clean_cfg = type(opts.train)(**{**opts.train.as_dict(), "adv_fraction": 0.0, "consistency_weight": 0.0})
        twin = train(base, train_ds, clean_cfg).model
        states.append(("twin", twin))
    for label, model in states:
        stats = evaluate(model, test_ds)
        emp = _empirical(model, probe, len(probe))
        for key, value in stats.items():
            summary[f"{label}_{key}"] = value
        summary[f"{label}_empirical_robustness"] = emp
        rows.append({"label": label, "accuracy": stats["accuracy"], "robustness": stats["robustness"], "empirical": emp})
    if twin is not None:
        summary["empirical_ratio_vs_twin"] = summary["protected_empirical_robustness"] / summary["twin_empirical_robustness"]
    prov = Provenance(cfg.digest(), base_prov.epochs + opts.train.epochs, {"stage": "protected", "seed": cfg.seed})
    out = OutputSet(cfg.out)
    out.add(PROTECTED, checkpoint.dumps(protected.model, prov))
    if twin is not None:
        out.add("twin.bvq", checkpoint.dumps(twin, Provenance(cfg.digest(), prov.epochs, {"stage": "twin", "seed": cfg.seed})))
    out.add("protect_curve.csv", curve_csv(protected.history))
    out.add("protect_summary.json", to_json(summary))
    out.add("protect_summary.txt", results_table(rows))
    for path in out.commit():
        print(path)
    print(results_table(rows), end="")
    return EXIT_OK


def attack_report(cfg: ExperimentConfig, protected: Model, attacked: Model, report, test_ds: LabeledDataset) -> dict:
    before = evaluate(protected, test_ds)
    after = evaluate(attacked, test_ds)
    probe = test_ds.head(min(cfg.deepfool_samples, len(test_ds)))
    out = {
        "schema": "attack-report/1",
        "model": protected.name,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
    }
    for key in ("accuracy", "loss", "robustness"):
        out[f"baseline_{key}"] = before[key]
    out["baseline_empirical_robustness"] = _empirical(protected, probe, len(probe))
    for key in ("accuracy", "loss", "robustness"):
        out[f"final_{key}"] = after[key]
    out["final_empirical_robustness"] = _empirical(attacked, probe, len(probe))
    for key, value in report.baseline.items():
        out[f"search_baseline_{key}"] = value
    for key, value in report.final.items():
        out[f"search_final_{key}"] = value
    out["robustness_drop"] = (before["robustness"] - after["robustness"]) / before["robustness"]
    out["flip_count"] = report.flip_count
    out["total_weights"] = report.total_weights
    out["total_bits"] = 8 * report.total_weights
    out["flip_percentage"] = round(report.flip_percentage, 4)
    out["termination_reason"] = report.termination_reason
    out["trajectory"] = [vars(row) for row in report.trajectory]
    out["config"] = report.config
    return out


def cmd_attack(cfg: ExperimentConfig, args) -> int:
    protected, prov = _load_checkpoint(args.checkpoint or cfg.out / PROTECTED)
    train_ds, test_ds = _datasets(cfg, protected)
    attacked, report = iterative_bit_search(protected, train_ds, test_ds, cfg.attack)
    rep = attack_report(cfg, protected, attacked, report, test_ds)
    rows = [
        {"label": "protected", "accuracy": rep["baseline_accuracy"], "robustness": rep["baseline_robustness"],
         "empirical": rep["baseline_empirical_robustness"]},
        {"label": "attacked", "accuracy": rep["final_accuracy"], "robustness": rep["final_robustness"],
         "empirical": rep["final_empirical_robustness"], "drop": rep["robustness_drop"],
         "flips": rep["flip_count"], "flip_percentage": report.flip_percentage},
    ]
    text = results_table(rows) + f"\ntermination: {report.termination_reason}\n\n" + trajectory_table(rep["trajectory"])
    new_prov = Provenance(cfg.digest(), prov.epochs, {"stage": "attacked", "seed": cfg.seed, "flips": report.flip_count})
    out = OutputSet(cfg.out)
    out.add(ATTACKED, checkpoint.dumps(attacked, new_prov))
    out.add("attack_report.json", to_json(rep))
    out.add("attack_report.txt", text)
    out.add("flips.txt", format_flip_list(report.committed_flips))
    for path in out.commit():
        print(path)
    print(text, end="")
    return EXIT_OK


def per_sample(model: Model, ds: LabeledDataset, count: int, max_iter: int, overshoot: float) -> List[dict]:
    """(prediction, confidence, DeepFool norm) for the first ``count`` samples."""
    head = ds.head(min(count, len(ds)))
    with T.no_grad():
        probs = T.softmax(forward(model, head.inputs)).data
    results = deepfool_batch(model, head.inputs, max_iter, overshoot)
    rows = []
    for i, (p, res) in enumerate(zip(probs, results)):
        rows.append({
            "index": i,
            "label": int(head.labels[i]),
            "prediction": int(np.argmax(p)),
            "confidence": float(np.max(p)),
            "perturbation_norm": res.norm if res.succeeded else None,
            "adversarial_prediction": res.new_label if res.succeeded else None,
            "deepfool_iterations": res.iterations,
        })
    return rows


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    path = Path(args.checkpoint)
    model, prov = _load_checkpoint(path)
    _, test_ds = _datasets(cfg, model)
    opts = cfg.evaluate
    if opts.limit:
        test_ds = test_ds.head(opts.limit)
    stats = evaluate(model, test_ds)
    emp = empirical_robustness(model, test_ds, opts.deepfool_max_iter, opts.deepfool_overshoot)
    rep = {
        "schema": "evaluate-report/1",
        "checkpoint": path.name,
        "model": model.name,
        "checkpoint_config_hash": prov.config_hash,
        "samples_evaluated": len(test_ds),
        "accuracy": stats["accuracy"],
        "loss": stats["loss"],
        "robustness": stats["robustness"],
        "empirical_robustness": emp.value,
        "deepfool_successes": emp.successes,
        "deepfool_failures": emp.failures,
    }
    text = results_table([{"label": path.stem, "accuracy": stats["accuracy"], "robustness": stats["robustness"], "empirical": emp.value}])
    if opts.samples:
        rep["per_sample"] = per_sample(model, test_ds, opts.samples, opts.deepfool_max_iter, opts.deepfool_overshoot)
        text += "\n" + samples_table(rep["per_sample"])
    out = OutputSet(cfg.out)
    out.add(f"eval_{path.stem}.json", to_json(rep))
    out.add(f"eval_{path.stem}.txt", text)
    for p in out.commit():
        print(p)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "protect": cmd_protect, "attack": cmd_attack, "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stealthbfa", description="Stealthy bit-flip attack experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", help="output directory (overrides [experiment] out)")
        p.add_argument("--seed", type=int, help="seed (overrides [experiment] seed)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("protect", "attack"):
            p.add_argument("--checkpoint", help="input checkpoint (default: from the output directory)")
        elif name == "evaluate":
            p.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, out=args.out, seed=args.seed)
    except (ConfigFileError, ConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args)
    except (ConfigFileError, ConfigError, DatasetError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, CheckpointError, IdxParseError, TrainingError, AttackError, RobustnessError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
