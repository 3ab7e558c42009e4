"""dardkit: l-infinity adversarial attacks, robustness distillation, evaluation."""

__version__ = "0.1.0"

from .attacks import (  # noqa: F401
    AdvBatch,
    AttackConfig,
    bim,
    dpgd,
    fgsm,
    lambda_schedule,
    pgd,
    project,
    run_attack,
    tpgd,
)
from .data import Batch, Dataset, DatasetSpec, batches, default_fixture, synth_blobs  # noqa: F401
from .distill import DistillConfig, pretrain_teacher, teacher_soft_label, train  # noqa: F401
from .evaluate import EvalReport, accuracy, evaluate_model, robust_accuracy, w_robust  # noqa: F401
from .losses import (  # noqa: F401
    ATLossConfig,
    DistillLossConfig,
    at_loss,
    cross_entropy,
    dard_loss,
    dice_loss,
    kl_div,
    softmax_t,
)
from .models import (  # noqa: F401
    DifferentiableClassifier,
    ModelState,
    SgdConfig,
    build_model,
    forward_logits,
    input_gradient,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
