"""Training objective: L2-constrained softmax on two class tokens plus the attention-weighted patch loss."""
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from core.errors import InvalidArgumentError
from core.vit import attention_class_weights, l2_rescale

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    """Batch-mean loss terms; ``total`` keeps the graph for backward."""
    l_class: float
    l_tap: float
    l_apl: float
    l_overall: float
    total: torch.Tensor = field(default=None, repr=False, compare=False)

    def to_record(self):
        return {"l_class": self.l_class, "l_tap": self.l_tap, "l_apl": self.l_apl, "l_overall": self.l_overall}


def _as_labels(labels, device=None):
    if isinstance(labels, torch.Tensor):
        return labels.long()
    return torch.as_tensor(np.asarray(labels, dtype=np.int64), device=device)


def l2softmax(features, weight, bias, labels, alpha):
    """Per-sample -log softmax(W f_hat + b)[y] with f_hat = alpha * f / |f|.

    Returns (losses, degenerate); zero-norm features skip the rescale and are flagged.
    """
    if alpha <= 0:
        raise InvalidArgumentError(f"alpha must be positive, got {alpha}")
    single = features.ndim == 1
    if single:
        features = features.unsqueeze(0)
    labels = _as_labels([labels] if single and not isinstance(labels, torch.Tensor) else labels)
    labels = labels.reshape(-1)
    if labels.shape[0] != features.shape[0]:
        raise InvalidArgumentError(f"{features.shape[0]} feature vectors but {labels.shape[0]} labels")
    scaled, degenerate = l2_rescale(features, alpha)
    if bool(degenerate.any()):
        logger.debug("l2softmax: %d zero-norm feature(s), rescale skipped", int(degenerate.sum()))
    losses = F.cross_entropy(F.linear(scaled, weight, bias), labels, reduction="none")
    if single:
        return losses[0], degenerate[0]
    return losses, degenerate


def apl(patch_logits, patch_labels, weights):
    """Attention-weighted patch loss per sample: sum_j w_j * CE(logits_j, label_j).

    patch_logits is (B, P, C) or (P, C); patch_labels and weights are (B, P) or (P,).
    """
    single = patch_logits.ndim == 2
    if single:
        patch_logits = patch_logits.unsqueeze(0)
        patch_labels = _as_labels(patch_labels).reshape(1, -1)
        weights = weights.reshape(1, -1)
    patch_labels = _as_labels(patch_labels)
    b, p, c = patch_logits.shape
    if tuple(patch_labels.shape) != (b, p):
        raise InvalidArgumentError(f"patch labels of shape {tuple(patch_labels.shape)} do not match logits {(b, p)}")
    if tuple(weights.shape) != (b, p):
        raise InvalidArgumentError(f"weights of shape {tuple(weights.shape)} do not match logits {(b, p)}")
    tol = 1e-9 if weights.dtype == torch.float64 else 1e-4
    mass = weights.detach().sum(dim=-1)
    if bool(((mass - 1.0).abs() > tol * p).any()):
        raise InvalidArgumentError("patch weights must sum to 1 per sample")
    ce = F.cross_entropy(patch_logits.reshape(b * p, c), patch_labels.reshape(-1), reduction="none")
    losses = (weights * ce.reshape(b, p)).sum(dim=-1)
    return losses[0] if single else losses


def overall_loss(acts, labels, patch_labels, config):
    """L_class + L_tap + L_apl over a batch; disabled terms are exactly zero.

    The class and tap heads read the logits already produced by the model, so
    the l2softmax rescale happens inside the heads.
    """
    labels = _as_labels(labels, acts.logits_final.device)
    b = acts.logits_final.shape[0]
    if labels.shape[0] != b:
        raise InvalidArgumentError(f"{b} activations but {labels.shape[0]} labels")
    if patch_labels is None:
        patch_labels = labels.unsqueeze(1).expand(b, acts.logits_patch.shape[1])
    zero = acts.logits_final.new_zeros(())
    terms = {}
    terms["l_class"] = F.cross_entropy(acts.logits_final, labels) if config.use_class else zero
    terms["l_tap"] = F.cross_entropy(acts.logits_tap, labels) if config.use_tap else zero
    if config.use_apl:
        terms["l_apl"] = apl(acts.logits_patch, patch_labels, attention_class_weights(acts)).mean()
    else:
        terms["l_apl"] = zero
    degenerate = {k: int(v.sum()) for k, v in acts.degenerate.items() if bool(v.any())}
    if degenerate:
        logger.debug("overall_loss: degenerate features %s", degenerate)
    total = terms["l_class"] + terms["l_tap"] + terms["l_apl"]
    return LossBreakdown(
        l_class=float(terms["l_class"]),
        l_tap=float(terms["l_tap"]),
        l_apl=float(terms["l_apl"]),
        l_overall=float(total),
        total=total,
    )
