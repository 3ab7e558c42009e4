"""Clean, robust, and weighted-robust accuracy with report rendering.

Evaluation is white-box: adversarial inputs are generated against the same
model being scored.  Accuracies aggregate integer counts, so results are
invariant to batch order; percentages are reported half-up at two decimals,
and the weighted-robust score is the arithmetic mean of the reported clean
and robust numbers.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import AttackConfig, attack_display_name, run_attack
from .data import Batch, Dataset, batches
from .errors import ConfigError, ContractViolation

from decimal import ROUND_HALF_UP, Decimal


def round2(value: float) -> float:
    """Round half-up to two decimals in decimal (not binary) arithmetic."""
    return float(Decimal(repr(float(value))).quantize(Decimal("0.01"), ROUND_HALF_UP))


def config_hash(obj) -> str:
    """Short stable hash of a dataclass or plain dict."""
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    blob = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class AttackResult:
    attack: str
    config_hash: str
    clean_acc: float
    robust_acc: float
    w_robust: float


@dataclass
class EvalReport:
    """Per-attack accuracies for one model on one dataset."""

    model_id: str
    dataset_id: str
    seed: int
    n_samples: int
    results: list[AttackResult] = field(default_factory=list)


def _count_correct(model, batch: Batch) -> int:
    preds = model.forward(batch.inputs).argmax(axis=1)
    return int((preds == batch.labels).sum())


def accuracy(model, eval_batches: list[Batch]) -> float:
    """Percent of argmax predictions matching the labels (ties to index 0)."""
    if not eval_batches or sum(len(b) for b in eval_batches) == 0:
        raise ConfigError("cannot evaluate on an empty set")
    correct = sum(_count_correct(model, b) for b in eval_batches)
    total = sum(len(b) for b in eval_batches)
    return 100.0 * correct / total


def robust_accuracy(
    model, eval_batches: list[Batch], attack_cfg: AttackConfig, rng=None
) -> float:
    """Accuracy on adversarial inputs generated against this same model."""
    if not eval_batches or sum(len(b) for b in eval_batches) == 0:
        raise ConfigError("cannot evaluate on an empty set")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    correct = 0
    total = 0
    for b in eval_batches:
        adv = run_attack(model, b, attack_cfg, rng)
        preds = model.forward(adv.adversarials).argmax(axis=1)
        correct += int((preds == b.labels).sum())
        total += len(b)
    return 100.0 * correct / total


def w_robust(clean: float, robust: float) -> float:
    """Arithmetic mean of clean and robust accuracy, half-up at two decimals."""
    for v in (clean, robust):
        if not 0.0 <= v <= 100.0:
            raise ContractViolation(f"accuracy {v} outside [0, 100]")
    mean = (Decimal(repr(float(clean))) + Decimal(repr(float(robust)))) / 2
    return float(mean.quantize(Decimal("0.01"), ROUND_HALF_UP))


def evaluate_model(
    model,
    dataset: Dataset,
    attack_cfgs: list[AttackConfig],
    *,
    model_id: str,
    dataset_id: str,
    seed: int = 0,
    batch_size: int = 256,
) -> EvalReport:
    """Score a model under every attack config; one report, one row per attack."""
    eval_batches = batches(dataset, batch_size, seed=seed, epoch=0)
    clean = round2(accuracy(model, eval_batches))
    report = EvalReport(
        model_id=model_id,
        dataset_id=dataset_id,
        seed=seed,
        n_samples=len(dataset),
    )
    for cfg in attack_cfgs:
        rng = np.random.default_rng([seed, 1])
        robust = round2(robust_accuracy(model, eval_batches, cfg, rng))
        if robust > clean + 2.0:
            # untargeted attacks cannot systematically help; soft sanity flag
            import warnings

            warnings.warn(
                f"robust accuracy {robust} exceeds clean {clean} by more than 2 "
                f"points under {attack_display_name(cfg)}",
                stacklevel=2,
            )
        report.results.append(
            AttackResult(
                attack=attack_display_name(cfg),
                config_hash=config_hash(cfg),
                clean_acc=clean,
                robust_acc=robust,
                w_robust=w_robust(clean, robust),
            )
        )
    return report


# -- rendering ----------------------------------------------------------------


def report_to_json(report: EvalReport) -> str:
    """Canonical JSON (sorted keys, fixed indentation); byte-stable."""
    return json.dumps(asdict(report), sort_keys=True, indent=2) + "\n"


def report_from_json(text: str) -> EvalReport:
    raw = json.loads(text)
    results = [AttackResult(**r) for r in raw.pop("results")]
    return EvalReport(results=results, **raw)


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["attack", "config_hash", "clean_acc", "robust_acc", "w_robust"])
    for r in report.results:
        writer.writerow(
            [r.attack, r.config_hash, f"{r.clean_acc:.2f}", f"{r.robust_acc:.2f}", f"{r.w_robust:.2f}"]
        )
    return buf.getvalue()


def report_to_markdown(report: EvalReport) -> str:
    lines = [
        f"Model `{report.model_id}` on `{report.dataset_id}` "
        f"({report.n_samples} samples, seed {report.seed})",
        "",
        "| Attack | Clean | Robust | W-Robust |",
        "| --- | --- | --- | --- |",
    ]
    for r in report.results:
        lines.append(
            f"| {r.attack} | {r.clean_acc:.2f}% | {r.robust_acc:.2f}% | {r.w_robust:.2f}% |"
        )
    return "\n".join(lines) + "\n"


def comparison_markdown(reports: dict[str, EvalReport]) -> str:
    """Defense-by-attack robust-accuracy table; best value per column in bold.

    Rows are defenses (one per report); columns are clean accuracy followed by
    each attack's robust accuracy.
    """
    if not reports:
        raise ConfigError("no reports to compare")
    attack_names = [r.attack for r in next(iter(reports.values())).results]
    for rep in reports.values():
        if [r.attack for r in rep.results] != attack_names:
            raise ContractViolation("reports cover different attack sets")

    rows = {}
    for name, rep in reports.items():
        if not rep.results:
            raise ContractViolation(f"report {name!r} holds no attack results")
        rows[name] = [rep.results[0].clean_acc] + [r.robust_acc for r in rep.results]

    columns = ["Clean"] + attack_names
    col_max = [max(vals[i] for vals in rows.values()) for i in range(len(columns))]

    lines = [
        "| Defense | " + " | ".join(columns) + " |",
        "| --- |" + " --- |" * len(columns),
    ]
    for name, vals in rows.items():
        cells = []
        for i, v in enumerate(vals):
            cell = f"{v:.2f}%"
            if v == col_max[i]:
                cell = f"**{cell}**"
            cells.append(cell)
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, out_dir, formats=("json", "csv", "md")) -> dict:
    """Write report files under out_dir; returns {format: path}."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    renderers = {
        "json": ("report.json", report_to_json),
        "csv": ("report.csv", report_to_csv),
        "md": ("report.md", report_to_markdown),
    }
    paths = {}
    for fmt in formats:
        if fmt not in renderers:
            raise ConfigError(f"unknown report format: {fmt!r}")
        fname, render = renderers[fmt]
        path = out / fname
        path.write_text(render(report))
        paths[fmt] = path
    return paths
