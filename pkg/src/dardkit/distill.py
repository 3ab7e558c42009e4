"""Training strategies: natural, adversarial, and distillation-based.

Seven strategies share one loop:

* ``natural``      - cross-entropy on clean inputs;
* ``sat``          - equal mix of clean and adversarial cross-entropy, inner PGD;
* ``ard``          - CE on adversarial inputs + KL to the teacher's natural
  soft labels, inner PGD;
* ``dard``         - CE on adversarial inputs + KL to a mixture of the
  teacher's natural and adversarial soft labels, inner DPGD;
* ``tdard``        - dard with the CE term on clean inputs;
* ``pgdard``       - dard with the inner attack swapped to PGD;
* ``onlyadv_ard``  - dard with the soft-label mix collapsed to the
  adversarial distribution only.

Inner attacks always target the current student; the teacher is frozen and
its forward passes reuse the student-generated adversarial examples.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses
from .attacks import AttackConfig, run_attack
from .data import Dataset, batches
from .errors import ConfigError, NumericalError
from .models import (
    DifferentiableClassifier,
    ModelState,
    SgdConfig,
    build_model,
    save_checkpoint,
    sgd_step,
)

STRATEGIES = ("natural", "sat", "ard", "dard", "tdard", "pgdard", "onlyadv_ard")
TEACHER_STRATEGIES = frozenset({"ard", "dard", "tdard", "pgdard", "onlyadv_ard"})

# strategies whose inner attack kind is pinned rather than defaulted
_FORCED_ATTACK_KIND = {"sat": "pgd", "ard": "pgd", "pgdard": "pgd"}
_DEFAULT_ATTACK_KIND = {"dard": "dpgd", "tdard": "dpgd", "onlyadv_ard": "dpgd"}


@dataclass(frozen=True)
class DistillConfig:
    """Everything one training run needs besides the data and the models."""

    strategy: str
    alpha_kd: float = 0.9
    tau: float = 1.0
    mix_beta: float = 0.5
    attack: AttackConfig | None = None
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    sgd: SgdConfig = field(default_factory=SgdConfig)
    kl_orientation: str = "teacher-student"
    dice_smooth: float = 1.0

    def resolved(self) -> "DistillConfig":
        """Fill in strategy-dependent defaults and enforce pinned fields."""
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy: {self.strategy!r}")
        cfg = self
        if cfg.strategy == "onlyadv_ard" and cfg.mix_beta != 0.0:
            cfg = replace(cfg, mix_beta=0.0)
        kind = _FORCED_ATTACK_KIND.get(cfg.strategy)
        if kind is None:
            kind = _DEFAULT_ATTACK_KIND.get(cfg.strategy)
            if kind is not None and cfg.attack is not None:
                kind = cfg.attack.kind
        if kind is not None:
            attack = cfg.attack or AttackConfig()
            cfg = replace(cfg, attack=replace(attack, kind=kind))
        if not 0.0 <= cfg.mix_beta <= 1.0:
            raise ConfigError(f"mix_beta must be in [0, 1], got {cfg.mix_beta}")
        return cfg

    def loss_config(self) -> losses.DistillLossConfig:
        return losses.DistillLossConfig(
            alpha_kd=self.alpha_kd,
            tau=self.tau,
            dice_smooth=self.dice_smooth,
            kl_orientation=self.kl_orientation,
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    clean_acc: float
    adv_acc: float | None
    wall_time: float

    def to_json_dict(self) -> dict:
        d = {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "clean_acc": self.clean_acc,
            "wall_time": self.wall_time,
        }
        if self.adv_acc is not None:
            d["adv_acc"] = self.adv_acc
        return d


TrainLog = list[EpochRecord]


def teacher_soft_label(
    teacher, x, x_adv, mix_beta: float, tau: float
) -> np.ndarray:
    """Convex mix of the teacher's tempered distributions on clean and adversarial inputs.

    mix_beta weights the natural distribution; 0 keeps only the adversarial
    one, 1 only the natural one.  Rows stay on the simplex.
    """
    if not 0.0 <= mix_beta <= 1.0:
        raise ConfigError(f"mix_beta must be in [0, 1], got {mix_beta}")
    nat = losses.softmax_t(teacher.forward(x), tau)
    adv = losses.softmax_t(teacher.forward(x_adv), tau)
    return mix_beta * nat + (1.0 - mix_beta) * adv


def _distill_logit_grad(student_logits_adv, teacher_soft, lcfg):
    """(1 - a) weightless here; returns the KL part (value, dlogits)."""
    return losses.distill_kl_logit_grad(
        student_logits_adv, teacher_soft, lcfg.tau, lcfg.kl_orientation
    )


def _strategy_step(student, teacher, batch, cfg, lcfg, attack_rng):
    """One batch: returns (loss, flat param grads, clean_correct, adv_correct|None)."""
    x, y = batch.inputs, batch.labels
    n = len(batch)
    a = cfg.alpha_kd

    if cfg.strategy == "natural":
        logits, cache = student.forward_cached(x)
        value, dlogits = losses.cross_entropy_logit_grad(logits, y)
        grads, _ = student.backward(cache, dlogits)
        clean_correct = int((logits.argmax(axis=1) == y).sum())
        return value, grads, clean_correct, None

    adv = run_attack(student, batch, cfg.attack, attack_rng)
    x_adv = adv.adversarials

    if cfg.strategy == "sat":
        logits_c, cache_c = student.forward_cached(x)
        logits_a, cache_a = student.forward_cached(x_adv)
        v_c, g_c = losses.cross_entropy_logit_grad(logits_c, y)
        v_a, g_a = losses.cross_entropy_logit_grad(logits_a, y)
        grads_c, _ = student.backward(cache_c, g_c)
        grads_a, _ = student.backward(cache_a, g_a)
        value = 0.5 * v_c + 0.5 * v_a
        grads = 0.5 * grads_c + 0.5 * grads_a
        clean_correct = int((logits_c.argmax(axis=1) == y).sum())
        adv_correct = int((logits_a.argmax(axis=1) == y).sum())
        return value, grads, clean_correct, adv_correct

    # distillation strategies
    if cfg.strategy == "ard":
        tsoft = losses.softmax_t(teacher.forward(x), cfg.tau)
    else:
        tsoft = teacher_soft_label(teacher, x, x_adv, cfg.mix_beta, cfg.tau)

    logits_a, cache_a = student.forward_cached(x_adv)
    kl_v, kl_g = _distill_logit_grad(logits_a, tsoft, lcfg)

    if cfg.strategy == "tdard":
        logits_c, cache_c = student.forward_cached(x)
        ce_v, ce_g = losses.cross_entropy_logit_grad(logits_c, y)
        grads_ce, _ = student.backward(cache_c, ce_g)
        grads_kl, _ = student.backward(cache_a, kl_g)
        grads = (1.0 - a) * grads_ce + a * cfg.tau**2 * grads_kl
        clean_correct = int((logits_c.argmax(axis=1) == y).sum())
    else:
        ce_v, ce_g = losses.cross_entropy_logit_grad(logits_a, y)
        dlogits = (1.0 - a) * ce_g + a * cfg.tau**2 * kl_g
        grads, _ = student.backward(cache_a, dlogits)
        clean_logits = student.forward(x)
        clean_correct = int((clean_logits.argmax(axis=1) == y).sum())

    value = (1.0 - a) * ce_v + a * cfg.tau**2 * kl_v
    adv_correct = int((logits_a.argmax(axis=1) == y).sum())
    return value, grads, clean_correct, adv_correct


def train(
    student: DifferentiableClassifier,
    teacher: DifferentiableClassifier | None,
    dataset: Dataset,
    cfg: DistillConfig,
) -> tuple[ModelState, TrainLog]:
    """Run one training strategy to completion.

    Mutates the student in place and returns its final state plus the
    per-epoch log.  The teacher (when present) is read-only.
    """
    cfg = cfg.resolved()
    cfg.sgd.validate()
    needs_teacher = cfg.strategy in TEACHER_STRATEGIES
    if needs_teacher and teacher is None:
        raise ConfigError(f"strategy {cfg.strategy!r} requires a teacher")
    if not needs_teacher and teacher is not None:
        raise ConfigError(f"strategy {cfg.strategy!r} does not take a teacher")
    if teacher is not None and teacher.num_classes != student.num_classes:
        raise ConfigError(
            f"teacher has {teacher.num_classes} classes, student "
            f"{student.num_classes}"
        )

    lcfg = cfg.loss_config()
    lcfg.validate()
    buf = np.zeros(student.n_params, dtype=np.float64)
    log: TrainLog = []

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        loss_sum = 0.0
        clean_correct = 0
        adv_correct = 0
        n_seen = 0
        track_adv = cfg.strategy != "natural"

        for i, batch in enumerate(batches(dataset, cfg.batch_size, cfg.seed, epoch)):
            attack_rng = np.random.default_rng([cfg.seed, epoch, i])
            value, grads, c_ok, a_ok = _strategy_step(
                student, teacher, batch, cfg, lcfg, attack_rng
            )
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch}, batch {i}"
                )
            state, buf = sgd_step(student.state(), grads, cfg.sgd, buf)
            student.load_state(state)
            loss_sum += value * len(batch)
            clean_correct += c_ok
            if a_ok is not None:
                adv_correct += a_ok
            n_seen += len(batch)

        log.append(
            EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / n_seen,
                clean_acc=100.0 * clean_correct / n_seen,
                adv_acc=100.0 * adv_correct / n_seen if track_adv else None,
                wall_time=time.perf_counter() - t0,
            )
        )
    return student.state(), log


def pretrain_teacher(
    architecture_id: str,
    dataset: Dataset,
    recipe: str,
    cfg: DistillConfig,
    checkpoint_path=None,
) -> ModelState:
    """Train a teacher from scratch with the given recipe (natural or sat).

    Delegates to :func:`train` without a teacher; when a checkpoint path is
    given, the saved file carries the recipe as provenance metadata.
    """
    if recipe not in ("natural", "sat"):
        raise ConfigError(f"teacher recipe must be 'natural' or 'sat', got {recipe!r}")
    model = build_model(
        architecture_id, dataset.input_shape, dataset.num_classes, seed=cfg.seed
    )
    state, log = train(model, None, dataset, replace(cfg, strategy=recipe))
    if checkpoint_path is not None:
        save_checkpoint(
            state,
            checkpoint_path,
            metadata={"recipe": recipe, "epochs": cfg.epochs, "seed": cfg.seed},
        )
    return state
