"""L-infinity attack family: FGSM, BIM, PGD, targeted PGD, and DPGD.

All attacks maximize a loss over the intersection of an epsilon-ball around
the original inputs and the [0, 1] domain, moving along the elementwise sign
of the input gradient (sign(0) = 0, so exactly-zero gradients inject no
perturbation).  DPGD replaces cross-entropy with a per-sample overlap (dice)
loss and re-weights the batch each step: correctly classified samples carry
weight (1 - lambda), misclassified ones lambda, with lambda ramping from 0
toward 1/2 over the iterations.

Attacks are pure with respect to the model and per-sample independent
(deterministic kinds produce the same result batched or one sample at a
time); PGD's optional random start draws batch-level noise from the supplied
generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models as _models
from .data import Batch
from .errors import ConfigError, ContractViolation, NumericalError

LINF_TOL = 1e-9

ATTACK_KINDS = ("fgsm", "bim", "pgd", "tpgd", "dpgd")


@dataclass(frozen=True)
class AttackConfig:
    """Budget and behavior of one attack.

    ``random_start=None`` resolves per kind: PGD starts at a uniform point of
    the epsilon-ball, everything else starts at the clean input (which keeps
    DPGD's first-step correctness partition aligned with the clean
    predictions).  FGSM ignores ``step_size`` and ``iterations``. The target
    rule applies to tpgd only: ``least-likely`` picks the smallest clean
    logit among non-true classes, ``fixed-class`` uses ``target_class``.
    """

    kind: str = "pgd"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    iterations: int = 20
    random_start: bool | None = None
    target_rule: str = "least-likely"
    target_class: int | None = None
    dpgd_loss: str = "dice"
    dice_smooth: float = 1.0

    def validate(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind: {self.kind!r}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be nonnegative, got {self.epsilon}")
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.target_rule not in ("least-likely", "fixed-class"):
            raise ConfigError(f"unknown target_rule: {self.target_rule!r}")
        if self.target_rule == "fixed-class" and self.target_class is None:
            raise ConfigError("target_rule 'fixed-class' requires target_class")
        if self.dpgd_loss not in ("dice", "ce"):
            raise ConfigError(f"dpgd_loss must be 'dice' or 'ce', got {self.dpgd_loss!r}")

    def resolved_random_start(self) -> bool:
        if self.random_start is None:
            return self.kind == "pgd"
        return self.random_start


@dataclass
class AdvBatch:
    """Attack output: originals, adversarials, and the iteration count used."""

    originals: Batch
    adversarials: np.ndarray
    iterations_used: int
    epsilon: float

    def __post_init__(self):
        self.adversarials = np.asarray(self.adversarials, dtype=np.float64)
        if self.adversarials.shape != self.originals.inputs.shape:
            raise ContractViolation("adversarials must match the original shape")
        pert = self.adversarials - self.originals.inputs
        if pert.size and np.abs(pert).max() > self.epsilon + LINF_TOL:
            raise ContractViolation(
                f"perturbation exceeds the budget: "
                f"{np.abs(pert).max()} > {self.epsilon}"
            )
        if self.adversarials.size and (
            self.adversarials.min() < 0.0 or self.adversarials.max() > 1.0
        ):
            raise ContractViolation("adversarials left the [0, 1] domain")

    @property
    def perturbation(self) -> np.ndarray:
        return self.adversarials - self.originals.inputs


def project(x_adv: np.ndarray, x_orig: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp to the epsilon-ball around x_orig, then to [0, 1]; idempotent."""
    if epsilon < 0:
        raise ConfigError(f"epsilon must be nonnegative, got {epsilon}")
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x_orig = np.asarray(x_orig, dtype=np.float64)
    if x_adv.shape != x_orig.shape:
        raise ContractViolation(
            f"shape mismatch: {x_adv.shape} vs {x_orig.shape}"
        )
    out = np.clip(x_adv, x_orig - epsilon, x_orig + epsilon)
    return np.clip(out, 0.0, 1.0)


def lambda_schedule(t: int, total_steps: int) -> float:
    """Misclassified-subset weight at iteration t of total_steps: (t-1)/(2T).

    Zero at the first step, strictly increasing, always below 1/2.
    """
    if total_steps < 1:
        raise ContractViolation(f"total_steps must be >= 1, got {total_steps}")
    if not 1 <= t <= total_steps:
        raise ContractViolation(f"iteration {t} outside 1..{total_steps}")
    return (t - 1) / (2 * total_steps)


def _check_finite(grad: np.ndarray, context: str) -> None:
    flat = grad.reshape(grad.shape[0], -1)
    bad = np.nonzero(~np.isfinite(flat).all(axis=1))[0]
    if bad.size:
        raise NumericalError(f"non-finite gradient in {context} at sample {bad[0]}")


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(0 if rng is None else rng)


def fgsm(model, batch: Batch, cfg: AttackConfig, rng=None) -> AdvBatch:
    """Single sign-gradient step of magnitude epsilon."""
    cfg.validate()
    x = batch.inputs
    grad = _models.input_gradient(model, x, batch.labels, "ce")
    _check_finite(grad, "fgsm")
    x_adv = np.clip(x + cfg.epsilon * np.sign(grad), 0.0, 1.0)
    return AdvBatch(batch, x_adv, 1, cfg.epsilon)


def _iterated_sign_attack(model, batch, cfg, rng, labels, sign: float) -> np.ndarray:
    x0 = batch.inputs
    x = x0.copy()
    if cfg.resolved_random_start():
        x = np.clip(
            x + _rng(rng).uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), 0.0, 1.0
        )
    for _ in range(cfg.iterations):
        grad = _models.input_gradient(model, x, labels, "ce")
        _check_finite(grad, cfg.kind)
        x = project(x + sign * cfg.step_size * np.sign(grad), x0, cfg.epsilon)
    return x


def pgd(model, batch: Batch, cfg: AttackConfig, rng=None) -> AdvBatch:
    """Iterated projected sign-gradient ascent, random start by default."""
    cfg.validate()
    x_adv = _iterated_sign_attack(model, batch, cfg, rng, batch.labels, +1.0)
    return AdvBatch(batch, x_adv, cfg.iterations, cfg.epsilon)


def bim(model, batch: Batch, cfg: AttackConfig, rng=None) -> AdvBatch:
    """PGD without the random start; otherwise identical."""
    cfg.validate()
    if cfg.resolved_random_start():
        raise ConfigError("bim never uses a random start")
    x_adv = _iterated_sign_attack(model, batch, cfg, rng, batch.labels, +1.0)
    return AdvBatch(batch, x_adv, cfg.iterations, cfg.epsilon)


def resolve_targets(model, batch: Batch, cfg: AttackConfig) -> np.ndarray:
    """Per-sample target classes for tpgd; always differs from the true label."""
    if cfg.target_rule == "fixed-class":
        targets = np.full(len(batch), cfg.target_class, dtype=np.int64)
    else:
        logits = model.forward(batch.inputs).copy()
        # mask the true class so the least-likely target can never equal it
        logits[np.arange(len(batch)), batch.labels] = np.inf
        targets = logits.argmin(axis=1)
    if np.any(targets == batch.labels):
        raise ContractViolation("resolved attack target equals the true label")
    return targets


def tpgd(model, batch: Batch, cfg: AttackConfig, rng=None) -> AdvBatch:
    """Targeted PGD: descend the cross-entropy toward the target class."""
    cfg.validate()
    targets = resolve_targets(model, batch, cfg)
    x_adv = _iterated_sign_attack(model, batch, cfg, rng, targets, -1.0)
    return AdvBatch(batch, x_adv, cfg.iterations, cfg.epsilon)


def dpgd(model, batch: Batch, cfg: AttackConfig, rng=None) -> AdvBatch:
    """Dice-loss PGD with the dynamic correct/wrong weighting.

    Each step partitions the batch by current-prediction correctness and
    ascends the sign gradient of
        (1 - lambda) * mean(loss | correct) + lambda * mean(loss | wrong),
    lambda following :func:`lambda_schedule`.
    """
    cfg.validate()
    x0 = batch.inputs
    x = x0.copy()
    if cfg.resolved_random_start():
        x = np.clip(
            x + _rng(rng).uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), 0.0, 1.0
        )
    for t in range(1, cfg.iterations + 1):
        lam = lambda_schedule(t, cfg.iterations)
        grad = _models.input_gradient(
            model,
            x,
            batch.labels,
            "dpgd",
            lam=lam,
            base=cfg.dpgd_loss,
            smooth=cfg.dice_smooth,
        )
        _check_finite(grad, "dpgd")
        x = project(x + cfg.step_size * np.sign(grad), x0, cfg.epsilon)
    return AdvBatch(batch, x, cfg.iterations, cfg.epsilon)


_ATTACK_FNS = {"fgsm": fgsm, "bim": bim, "pgd": pgd, "tpgd": tpgd, "dpgd": dpgd}


def run_attack(model, batch: Batch, cfg: AttackConfig, rng=None) -> AdvBatch:
    """Dispatch on cfg.kind."""
    cfg.validate()
    return _ATTACK_FNS[cfg.kind](model, batch, cfg, rng)


def attack_display_name(cfg: AttackConfig) -> str:
    """Human-facing attack label (iterated attacks carry their step count)."""
    if cfg.kind == "fgsm":
        return "FGSM"
    if cfg.kind == "tpgd":
        return "T-PGD"
    if cfg.kind == "bim":
        return "BIM"
    return f"{cfg.kind.upper()}{cfg.iterations}"
