"""Scalar losses and their logit-space gradients.

Everything here works on plain numpy arrays: ``logits`` are (n, k) float
matrices, ``labels`` are (n,) integer class ids, and soft labels are (n, k)
probability matrices (rows on the simplex).  Losses are mean-reduced over the
batch unless noted; functions suffixed ``_logit_grad`` return both the scalar
value and its gradient with respect to the logits, which the model backward
pass turns into input or parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation

# Floor applied to probabilities before any logarithm.  Prevents NaN under
# saturated softmax without materially changing finite losses.
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ATLossConfig:
    """Mixing weight for the clean/adversarial cross-entropy combination."""

    alpha_at: float = 0.5


@dataclass(frozen=True)
class DistillLossConfig:
    """Weights for the distillation objective.

    ``kl_orientation`` selects which distribution leads the divergence:
    ``"teacher-student"`` (the default) computes KL(teacher || student), the
    direction that pulls student mass toward the teacher; ``"student-teacher"``
    computes KL(student || teacher).
    """

    alpha_kd: float = 0.9
    tau: float = 1.0
    dice_smooth: float = 1.0
    kl_orientation: str = "teacher-student"

    def validate(self) -> None:
        if not 0.0 <= self.alpha_kd <= 1.0:
            raise ConfigError(f"alpha_kd must be in [0, 1], got {self.alpha_kd}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.dice_smooth <= 0:
            raise ConfigError(f"dice_smooth must be positive, got {self.dice_smooth}")
        if self.kl_orientation not in ("teacher-student", "student-teacher"):
            raise ConfigError(f"unknown kl_orientation: {self.kl_orientation!r}")


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ContractViolation(
            f"labels shape {labels.shape} does not match batch of {logits.shape[0]}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractViolation(
            f"label out of range for {logits.shape[1]} classes: "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels.astype(np.int64)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log softmax via the shifted log-sum-exp form."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_t(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax; tau=1 is the plain softmax."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    return softmax(np.asarray(logits, dtype=np.float64) / tau)


def check_soft_labels(probs: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    """Validate an (n, k) matrix of soft labels: nonnegative rows summing to 1."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ContractViolation(f"soft labels must be 2-D, got shape {probs.shape}")
    if probs.size and probs.min() < 0:
        raise ContractViolation("soft labels contain negative entries")
    sums = probs.sum(axis=1)
    if probs.size and np.abs(sums - 1.0).max() > atol:
        raise ContractViolation(f"soft label rows must sum to 1, worst sum {sums}")
    return probs


def cross_entropy_per_sample(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = _check_labels(np.asarray(logits), labels)
    ls = log_softmax(logits)
    return -ls[np.arange(len(labels)), labels]


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy between logits and integer labels."""
    return float(cross_entropy_per_sample(logits, labels).mean())


def cross_entropy_logit_grad(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean CE and its gradient with respect to the logits: (p - onehot)/n."""
    labels = _check_labels(np.asarray(logits), labels)
    n = len(labels)
    value = float(cross_entropy_per_sample(logits, labels).mean())
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return value, grad


def kl_div(student_probs: np.ndarray, target_probs: np.ndarray) -> float:
    """Mean KL(target || student) over the batch.

    Target entries equal to zero contribute nothing; student probabilities are
    floored at PROB_FLOOR so the result is always finite.
    """
    s = check_soft_labels(student_probs)
    t = check_soft_labels(target_probs)
    if s.shape != t.shape:
        raise ContractViolation(f"shape mismatch: {s.shape} vs {t.shape}")
    s = np.maximum(s, PROB_FLOOR)
    terms = np.where(t > 0, t * (np.log(np.maximum(t, PROB_FLOOR)) - np.log(s)), 0.0)
    return float(terms.sum(axis=1).mean())


def dice_loss(
    probs: np.ndarray, labels: np.ndarray, smooth: float = 1.0
) -> np.ndarray:
    """Per-sample soft overlap loss between a predicted distribution and a one-hot target.

    For each sample with true-class probability p_y:
        1 - (2 p_y + s) / (sum_i p_i^2 + 1 + s)
    which is 0 for a one-hot correct prediction and approaches 1 as the
    predicted mass concentrates away from the true class.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = _check_labels(probs, labels)
    p_y = probs[np.arange(len(labels)), labels]
    denom = (probs**2).sum(axis=1) + 1.0 + smooth
    return 1.0 - (2.0 * p_y + smooth) / denom


def _dice_prob_grad(
    probs: np.ndarray, labels: np.ndarray, smooth: float
) -> np.ndarray:
    """d(dice)/d(probs), row i holding the gradient of sample i's loss."""
    n, k = probs.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    num = 2.0 * probs[np.arange(n), labels] + smooth
    denom = (probs**2).sum(axis=1) + 1.0 + smooth
    return (2.0 * num[:, None] * probs - 2.0 * denom[:, None] * onehot) / (
        denom**2
    )[:, None]


def _softmax_vjp(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Pull a probability-space gradient back through the softmax."""
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def dice_loss_logit_grad(
    logits: np.ndarray,
    labels: np.ndarray,
    sample_weights: np.ndarray,
    smooth: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Weighted sum of per-sample dice losses and its logit gradient."""
    probs = softmax(logits)
    labels = _check_labels(probs, labels)
    per = dice_loss(probs, labels, smooth)
    dprobs = _dice_prob_grad(probs, labels, smooth)
    dlogits = _softmax_vjp(probs, dprobs) * np.asarray(sample_weights)[:, None]
    return float((per * sample_weights).sum()), dlogits


def _ce_logit_grad_weighted(
    logits: np.ndarray, labels: np.ndarray, sample_weights: np.ndarray
) -> tuple[float, np.ndarray]:
    labels = _check_labels(np.asarray(logits), labels)
    per = cross_entropy_per_sample(logits, labels)
    grad = softmax(logits)
    grad[np.arange(len(labels)), labels] -= 1.0
    grad *= np.asarray(sample_weights)[:, None]
    return float((per * sample_weights).sum()), grad


def partitioned_loss_logit_grad(
    logits: np.ndarray,
    labels: np.ndarray,
    lam: float,
    base: str = "dice",
    smooth: float = 1.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Correct/wrong partitioned batch loss and its logit gradient.

    The batch is split by current-prediction correctness (argmax, ties to the
    smallest class index).  The correctly classified subset contributes its
    mean loss with weight (1 - lam), the misclassified subset with weight lam.
    An empty subset contributes 0 and its weight is left unused.

    Returns (value, dlogits, correct_mask).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    preds = logits.argmax(axis=1)
    correct = preds == labels

    n_c = int(correct.sum())
    n_w = int((~correct).sum())
    weights = np.zeros(len(labels))
    if n_c:
        weights[correct] = (1.0 - lam) / n_c
    if n_w:
        weights[~correct] = lam / n_w

    if base == "dice":
        value, dlogits = dice_loss_logit_grad(logits, labels, weights, smooth)
    elif base == "ce":
        value, dlogits = _ce_logit_grad_weighted(logits, labels, weights)
    else:
        raise ConfigError(f"unsupported partition base loss: {base!r}")
    return value, dlogits, correct


def loss_logit_grad(
    kind: str, logits: np.ndarray, labels: np.ndarray, **params
) -> tuple[float, np.ndarray]:
    """Dispatch table used by input-gradient computation.

    Supported kinds: ``"ce"``, ``"dice"`` (mean-reduced) and ``"dpgd"`` (the
    partitioned loss; requires ``lam=`` and accepts ``base=`` / ``smooth=``).
    """
    n = np.asarray(logits).shape[0]
    if kind == "ce":
        return cross_entropy_logit_grad(logits, labels)
    if kind == "dice":
        weights = np.full(n, 1.0 / n)
        return dice_loss_logit_grad(
            logits, labels, weights, params.get("smooth", 1.0)
        )
    if kind == "dpgd":
        if "lam" not in params:
            raise ConfigError("loss kind 'dpgd' requires a lam= parameter")
        value, dlogits, _ = partitioned_loss_logit_grad(
            logits,
            labels,
            params["lam"],
            params.get("base", "dice"),
            params.get("smooth", 1.0),
        )
        return value, dlogits
    raise ConfigError(f"unsupported loss kind: {kind!r}")


def distill_kl_logit_grad(
    student_logits: np.ndarray,
    target_probs: np.ndarray,
    tau: float,
    orientation: str = "teacher-student",
) -> tuple[float, np.ndarray]:
    """Batch-mean KL between a teacher distribution and the tempered student.

    Returns the divergence and its gradient with respect to the raw student
    logits (temperature applied internally).
    """
    t = check_soft_labels(target_probs)
    s = softmax_t(student_logits, tau)
    n = s.shape[0]
    if orientation == "teacher-student":
        value = kl_div(s, t)
        dlogits = (s - t) / (tau * n)
    elif orientation == "student-teacher":
        value = kl_div(t, s)
        log_ratio = np.log(np.maximum(s, PROB_FLOOR)) - np.log(
            np.maximum(t, PROB_FLOOR)
        )
        per_kl = (s * log_ratio).sum(axis=1, keepdims=True)
        dlogits = s * (log_ratio - per_kl) / (tau * n)
    else:
        raise ConfigError(f"unknown kl_orientation: {orientation!r}")
    return value, dlogits


def at_loss(model, x, x_adv, y, cfg: ATLossConfig = ATLossConfig()) -> float:
    """Convex mix of clean and adversarial cross-entropy.

    alpha_at weights the clean term: alpha * CE(f(x), y) + (1 - alpha) * CE(f(x_adv), y).
    """
    if not 0.0 <= cfg.alpha_at <= 1.0:
        raise ConfigError(f"alpha_at must be in [0, 1], got {cfg.alpha_at}")
    clean = cross_entropy(model.forward(x), y)
    adv = cross_entropy(model.forward(x_adv), y)
    return cfg.alpha_at * clean + (1.0 - cfg.alpha_at) * adv


def dard_loss(
    student,
    teacher_soft: np.ndarray,
    x,
    x_adv,
    y,
    cfg: DistillLossConfig,
    strategy: str = "dard",
) -> float:
    """Distillation objective: hard-label CE plus tau^2-scaled KL to the teacher.

    The CE term reads adversarial inputs for every strategy except ``tdard``,
    which feeds clean inputs; the KL term always compares the tempered student
    on adversarial inputs against the teacher's soft labels.
    """
    cfg.validate()
    if strategy in ("dard", "pgdard", "onlyadv_ard"):
        x_ce = x_adv
    elif strategy == "tdard":
        x_ce = x
    else:
        raise ConfigError(f"dard_loss does not apply to strategy {strategy!r}")
    ce = cross_entropy(student.forward(x_ce), y)
    student_soft = softmax_t(student.forward(x_adv), cfg.tau)
    if cfg.kl_orientation == "teacher-student":
        kl = kl_div(student_soft, teacher_soft)
    else:
        kl = kl_div(teacher_soft, student_soft)
    return (1.0 - cfg.alpha_kd) * ce + cfg.alpha_kd * cfg.tau**2 * kl
