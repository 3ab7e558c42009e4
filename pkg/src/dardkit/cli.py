"""Single entry point: ``dardkit <subcommand> --config cfg.yaml [--set k=v ...]``.

Subcommands:

* ``train``    - train a teacher-free model (natural or sat strategy);
* ``distill``  - train a student against a teacher checkpoint;
* ``attack``   - run the configured attack over the test split, dump a summary;
* ``eval``     - full attack matrix, emits report.json/csv/md;
* ``report``   - re-render an existing report.json;
* ``ablate``   - dard vs pgdard vs onlyadv_ard under identical budgets;
* ``pipeline`` - teacher -> distill -> eval with manifest-based stage skipping.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical error,
5 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .config import (
    attack_config,
    config_digest,
    dataset_spec,
    distill_config,
    load_config,
)
from .data import load_dataset
from .distill import DistillConfig, TEACHER_STRATEGIES, pretrain_teacher, train
from .errors import CheckpointError, ConfigError, DardkitError, exit_code_for
from .evaluate import (
    EvalReport,
    comparison_markdown,
    emit_report,
    evaluate_model,
    report_from_json,
    report_to_csv,
    report_to_markdown,
)
from .models import build_model, load_checkpoint, save_checkpoint
from .attacks import attack_display_name, run_attack
from .data import batches as make_batches


def _load_datasets(resolved: dict):
    spec = dataset_spec(resolved)
    train_ds = load_dataset(spec, "train")
    if spec.kind == "synthetic-blobs":
        test_ds = load_dataset(spec, "test")
    else:
        test_path = resolved["dataset"]["test_path"] or spec.path
        from dataclasses import replace

        test_ds = load_dataset(replace(spec, path=test_path), "test")
    return spec, train_ds, test_ds


def _dataset_id(resolved: dict) -> str:
    d = resolved["dataset"]
    if d["kind"] == "synthetic-blobs":
        return f"blobs-{d['num_classes']}x{d['dim']}-s{d['seed']}"
    return d["kind"]


def _write_manifest(out_dir: Path, resolved: dict, extra: dict | None = None) -> dict:
    manifest = {
        "tool_version": __version__,
        "seed": resolved["seed"],
        "config_hash": config_digest(resolved),
        "resolved_config": resolved,
    }
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )
    return manifest


def _write_trainlog(out_dir: Path, name: str, log) -> None:
    lines = [json.dumps(rec.to_json_dict(), sort_keys=True) for rec in log]
    (out_dir / name).write_text("\n".join(lines) + "\n")


def _require_checkpoint(path_str: str | None, what: str):
    if not path_str:
        raise ConfigError(f"{what} checkpoint path is not configured")
    path = Path(path_str)
    if not path.exists():
        raise CheckpointError(f"{what} checkpoint not found: {path}")
    return load_checkpoint(path)


def _model_from_checkpoint(state, dataset):
    model = build_model(state.architecture_id, dataset.input_shape, dataset.num_classes)
    model.load_state(state)
    return model


def _eval_attack_configs(resolved: dict):
    return [attack_config(resolved["attack"], kind=k) for k in resolved["eval"]["attacks"]]


def _limit(dataset, resolved):
    cap = resolved["eval"]["max_samples"]
    if cap is None or cap >= len(dataset):
        return dataset
    from .data import Dataset

    return Dataset(
        dataset.inputs[:cap], dataset.labels[:cap], dataset.num_classes
    )


# -- subcommands ---------------------------------------------------------------


def cmd_train(resolved: dict) -> int:
    out = Path(resolved["output_dir"])
    strategy = resolved["distill"]["strategy"]
    if strategy in TEACHER_STRATEGIES:
        raise ConfigError(
            f"`train` handles teacher-free strategies only; use `distill` for {strategy!r}"
        )
    _, train_ds, _ = _load_datasets(resolved)
    cfg = distill_config(resolved)
    t0 = time.perf_counter()
    model = build_model(
        resolved["model"]["architecture"],
        train_ds.input_shape,
        train_ds.num_classes,
        seed=resolved["seed"],
    )
    state, log = train(model, None, train_ds, cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out / "model.ckpt", metadata={"strategy": strategy})
    _write_trainlog(out, "trainlog.jsonl", log)
    _write_manifest(out, resolved, {"wall_time": time.perf_counter() - t0})
    print(f"trained {strategy} model -> {out / 'model.ckpt'}")
    return 0


def cmd_distill(resolved: dict) -> int:
    out = Path(resolved["output_dir"])
    strategy = resolved["distill"]["strategy"]
    if strategy not in TEACHER_STRATEGIES:
        raise ConfigError(f"`distill` needs a distillation strategy, got {strategy!r}")
    _, train_ds, _ = _load_datasets(resolved)
    t0 = time.perf_counter()
    teacher = _resolve_teacher(resolved, train_ds, out)
    cfg = distill_config(resolved)
    student = build_model(
        resolved["model"]["architecture"],
        train_ds.input_shape,
        train_ds.num_classes,
        seed=resolved["seed"],
    )
    state, log = train(student, teacher, train_ds, cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out / "student.ckpt", metadata={"strategy": strategy})
    _write_trainlog(out, "trainlog.jsonl", log)
    _write_manifest(out, resolved, {"wall_time": time.perf_counter() - t0})
    print(f"distilled {strategy} student -> {out / 'student.ckpt'}")
    return 0


def _resolve_teacher(resolved: dict, train_ds, out: Path):
    """Load the configured teacher checkpoint, or pretrain one if absent."""
    ckpt = resolved["model"]["teacher_checkpoint"]
    if ckpt and Path(ckpt).exists():
        return _model_from_checkpoint(load_checkpoint(ckpt), train_ds)
    if ckpt:
        raise CheckpointError(f"teacher checkpoint not found: {ckpt}")
    recipe = resolved["distill"]["teacher_recipe"]
    cfg = distill_config(resolved, strategy=recipe)
    out.mkdir(parents=True, exist_ok=True)
    state = pretrain_teacher(
        resolved["model"]["teacher_architecture"],
        train_ds,
        recipe,
        cfg,
        checkpoint_path=out / "teacher.ckpt",
    )
    return _model_from_checkpoint(state, train_ds)


def cmd_attack(resolved: dict) -> int:
    out = Path(resolved["output_dir"])
    state = _require_checkpoint(resolved["model"]["checkpoint"], "model")
    _, _, test_ds = _load_datasets(resolved)
    test_ds = _limit(test_ds, resolved)
    model = _model_from_checkpoint(state, test_ds)
    cfg = attack_config(resolved["attack"])

    rng = np.random.default_rng([resolved["seed"], 1])
    eval_batches = make_batches(
        test_ds, resolved["eval"]["batch_size"], seed=resolved["seed"], epoch=0
    )
    n = 0
    still_correct = 0
    clean_correct = 0
    max_linf = 0.0
    linf_sum = 0.0
    dumps = []
    for b in eval_batches:
        adv = run_attack(model, b, cfg, rng)
        clean_preds = model.forward(b.inputs).argmax(axis=1)
        adv_preds = model.forward(adv.adversarials).argmax(axis=1)
        clean_correct += int((clean_preds == b.labels).sum())
        still_correct += int((adv_preds == b.labels).sum())
        n += len(b)
        per_linf = np.abs(adv.perturbation).reshape(len(b), -1).max(axis=1)
        linf_sum += float(per_linf.sum())
        max_linf = max(max_linf, float(per_linf.max()) if len(b) else 0.0)
        if resolved["attack_dump"]:
            dumps.append(adv.adversarials.astype("<f4"))

    summary = {
        "attack": attack_display_name(cfg),
        "epsilon": cfg.epsilon,
        "n_samples": n,
        "clean_accuracy": 100.0 * clean_correct / n,
        "robust_accuracy": 100.0 * still_correct / n,
        "success_rate": 100.0 * (n - still_correct) / n,
        "mean_linf": linf_sum / n,
        "max_linf": max_linf,
    }
    out.mkdir(parents=True, exist_ok=True)
    if dumps:
        stacked = np.concatenate(dumps, axis=0)
        (out / "adversarials.f32").write_bytes(stacked.tobytes())
        summary["dump"] = {"path": "adversarials.f32", "shape": list(stacked.shape)}
    (out / "attack_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )
    _write_manifest(out, resolved)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(resolved: dict) -> int:
    out = Path(resolved["output_dir"])
    state = _require_checkpoint(resolved["model"]["checkpoint"], "model")
    _, _, test_ds = _load_datasets(resolved)
    test_ds = _limit(test_ds, resolved)
    model = _model_from_checkpoint(state, test_ds)
    report = evaluate_model(
        model,
        test_ds,
        _eval_attack_configs(resolved),
        model_id=state.architecture_id,
        dataset_id=_dataset_id(resolved),
        seed=resolved["seed"],
        batch_size=resolved["eval"]["batch_size"],
    )
    emit_report(report, out)
    _write_manifest(out, resolved)
    print((out / "report.md").read_text())
    return 0


def cmd_report(resolved: dict) -> int:
    out = Path(resolved["output_dir"])
    src = out / "report.json"
    if not src.exists():
        raise CheckpointError(f"no report.json under {out}")
    report = report_from_json(src.read_text())
    (out / "report.csv").write_text(report_to_csv(report))
    (out / "report.md").write_text(report_to_markdown(report))
    print((out / "report.md").read_text())
    return 0


ABLATION_STRATEGIES = ("dard", "pgdard", "onlyadv_ard")


def cmd_ablate(resolved: dict) -> int:
    """Train the three ablation strategies under identical seeds and budgets."""
    out = Path(resolved["output_dir"])
    _, train_ds, test_ds = _load_datasets(resolved)
    test_ds = _limit(test_ds, resolved)
    t0 = time.perf_counter()
    teacher = _resolve_teacher(resolved, train_ds, out)

    # identical config hash apart from the strategy field
    base_resolved = json.loads(json.dumps(resolved))
    base_resolved["distill"]["strategy"] = "<ablation>"
    base_hash = config_digest(base_resolved)

    reports: dict[str, EvalReport] = {}
    losses_by_strategy: dict[str, list[float]] = {}
    runs = []
    for strategy in ABLATION_STRATEGIES:
        cfg = distill_config(resolved, strategy=strategy)
        student = build_model(
            resolved["model"]["architecture"],
            train_ds.input_shape,
            train_ds.num_classes,
            seed=resolved["seed"],
        )
        state, log = train(student, teacher, train_ds, cfg)
        save_checkpoint(state, out / f"{strategy}.ckpt", metadata={"strategy": strategy})
        losses_by_strategy[strategy] = [rec.train_loss for rec in log]
        report = evaluate_model(
            student,
            test_ds,
            _eval_attack_configs(resolved),
            model_id=strategy,
            dataset_id=_dataset_id(resolved),
            seed=resolved["seed"],
            batch_size=resolved["eval"]["batch_size"],
        )
        reports[strategy] = report
        emit_report(report, out / strategy)
        runs.append({"strategy": strategy, "base_config_hash": base_hash})

    (out / "comparison.md").write_text(comparison_markdown(reports))
    epochs = range(1, resolved["distill"]["epochs"] + 1)
    rows = ["epoch," + ",".join(ABLATION_STRATEGIES)]
    for i, epoch in enumerate(epochs):
        rows.append(
            f"{epoch},"
            + ",".join(f"{losses_by_strategy[s][i]:.6f}" for s in ABLATION_STRATEGIES)
        )
    (out / "loss_curves.csv").write_text("\n".join(rows) + "\n")
    _write_manifest(
        out, resolved, {"runs": runs, "wall_time": time.perf_counter() - t0}
    )
    print((out / "comparison.md").read_text())
    return 0


# -- pipeline ------------------------------------------------------------------

_STAGE_DEPS = {
    "teacher": lambda r: {
        "dataset": r["dataset"],
        "teacher_architecture": r["model"]["teacher_architecture"],
        "recipe": r["distill"]["teacher_recipe"],
        "epochs": r["distill"]["epochs"],
        "batch_size": r["distill"]["batch_size"],
        "sgd": r["distill"]["sgd"],
        "inner_attack": r["distill"]["attack"],
        "seed": r["seed"],
    },
    "distill": lambda r: {
        "dataset": r["dataset"],
        "architecture": r["model"]["architecture"],
        "distill": r["distill"],
        "seed": r["seed"],
    },
    "eval": lambda r: {
        "attack": r["attack"],
        "eval": r["eval"],
        "seed": r["seed"],
    },
}


def _stage_hashes(resolved: dict) -> dict[str, str]:
    """Chained content hashes: downstream stages include their inputs' hashes."""
    hashes = {}
    hashes["teacher"] = config_digest(_STAGE_DEPS["teacher"](resolved))
    hashes["distill"] = config_digest(
        {"deps": _STAGE_DEPS["distill"](resolved), "teacher": hashes["teacher"]}
    )
    hashes["eval"] = config_digest(
        {"deps": _STAGE_DEPS["eval"](resolved), "distill": hashes["distill"]}
    )
    return hashes


_STAGE_OUTPUTS = {
    "teacher": ("teacher.ckpt",),
    "distill": ("student.ckpt", "trainlog.jsonl"),
    "eval": ("report.json", "report.csv", "report.md"),
}


def cmd_pipeline(resolved: dict) -> int:
    """teacher -> distill -> eval, skipping stages whose inputs are unchanged."""
    out = Path(resolved["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    strategy = resolved["distill"]["strategy"]
    if strategy not in TEACHER_STRATEGIES:
        raise ConfigError(f"`pipeline` needs a distillation strategy, got {strategy!r}")

    manifest_path = out / "manifest.json"
    previous = {}
    if manifest_path.exists():
        previous = json.loads(manifest_path.read_text()).get("stages", {})

    hashes = _stage_hashes(resolved)
    stages: dict[str, dict] = {}
    _, train_ds, test_ds = _load_datasets(resolved)
    test_ds = _limit(test_ds, resolved)
    t0 = time.perf_counter()

    def fresh(stage: str) -> bool:
        prior = previous.get(stage)
        outputs_exist = all((out / f).exists() for f in _STAGE_OUTPUTS[stage])
        return bool(prior) and prior.get("hash") == hashes[stage] and outputs_exist

    # teacher
    if fresh("teacher"):
        stages["teacher"] = {"hash": hashes["teacher"], "skipped": True}
    else:
        recipe = resolved["distill"]["teacher_recipe"]
        pretrain_teacher(
            resolved["model"]["teacher_architecture"],
            train_ds,
            recipe,
            distill_config(resolved, strategy=recipe),
            checkpoint_path=out / "teacher.ckpt",
        )
        stages["teacher"] = {"hash": hashes["teacher"], "skipped": False}

    # distill
    teacher = _model_from_checkpoint(load_checkpoint(out / "teacher.ckpt"), train_ds)
    if fresh("distill"):
        stages["distill"] = {"hash": hashes["distill"], "skipped": True}
    else:
        student = build_model(
            resolved["model"]["architecture"],
            train_ds.input_shape,
            train_ds.num_classes,
            seed=resolved["seed"],
        )
        state, log = train(student, teacher, train_ds, distill_config(resolved))
        save_checkpoint(state, out / "student.ckpt", metadata={"strategy": strategy})
        _write_trainlog(out, "trainlog.jsonl", log)
        stages["distill"] = {"hash": hashes["distill"], "skipped": False}

    # eval
    if fresh("eval"):
        stages["eval"] = {"hash": hashes["eval"], "skipped": True}
    else:
        student = _model_from_checkpoint(load_checkpoint(out / "student.ckpt"), test_ds)
        report = evaluate_model(
            student,
            test_ds,
            _eval_attack_configs(resolved),
            model_id=strategy,
            dataset_id=_dataset_id(resolved),
            seed=resolved["seed"],
            batch_size=resolved["eval"]["batch_size"],
        )
        emit_report(report, out)
        stages["eval"] = {"hash": hashes["eval"], "skipped": False}

    _write_manifest(
        out, resolved, {"stages": stages, "wall_time": time.perf_counter() - t0}
    )
    done = [s for s in stages if not stages[s]["skipped"]]
    skipped = [s for s in stages if stages[s]["skipped"]]
    print(f"pipeline complete; ran {done or 'nothing'}, skipped {skipped or 'nothing'}")
    return 0


# -- entry point ---------------------------------------------------------------

_COMMANDS = {
    "train": cmd_train,
    "distill": cmd_distill,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "report": cmd_report,
    "ablate": cmd_ablate,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dardkit",
        description="Adversarial attack, robust distillation, and evaluation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY.PATH=VALUE",
            help="override a config key (repeatable)",
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        resolved = load_config(args.config, args.overrides)
        return _COMMANDS[args.command](resolved)
    except DardkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


def script() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
