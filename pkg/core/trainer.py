"""Mini-batch training with Nesterov momentum and loss-gated augmentation.

Each epoch shuffles the training set with a seeded permutation, augments every
sample (FAS-Aug, flip, brightness, then PDA on spoofs), and takes one
optimizer step per mini-batch. Once the epoch-mean overall loss falls below
the gate threshold, FAS-Aug and PDA stay off for the rest of the run.
"""
import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from core.augment import AugOp, apply_fas_aug, apply_pda, random_brightness, random_flip
from core.config import EvalConfig, ModelConfig, RunConfig, derive_seed
from core.errors import InvalidArgumentError, NumericError
from core.imagecore import make_rng, unit_image
from core.losses import overall_loss
from core.samples import Label, Sample
from core.vit import build_model, forward, normalize_images

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "l_class", "l_tap", "l_apl", "l_overall", "aug_enabled")


class NesterovOptimizer:
    """Nesterov momentum with the gradient taken at the current parameters:

        v <- mu * v - lr * g
        theta <- theta + mu * v - lr * g
    """

    def __init__(self, named_parameters, learning_rate, momentum):
        if learning_rate <= 0:
            raise InvalidArgumentError("learning_rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise InvalidArgumentError("momentum must be in [0, 1)")
        self.params = dict(named_parameters)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {name: torch.zeros_like(p) for name, p in self.params.items()}

    def step(self, grads=None):
        """Apply one update; grads defaults to each parameter's .grad."""
        if grads is None:
            grads = {name: p.grad for name, p in self.params.items()}
        nesterov_update(self.params, self.velocity, grads, self.learning_rate, self.momentum)


def nesterov_update(params, velocity, grads, lr, momentum):
    for name, grad in grads.items():
        if grad is not None and not bool(torch.isfinite(grad).all()):
            raise NumericError("non-finite gradient", tensor=name)
    with torch.no_grad():
        for name, param in params.items():
            grad = grads.get(name)
            if grad is None:
                continue
            v = velocity[name]
            v.mul_(momentum).sub_(lr * grad)
            param.add_(momentum * v - lr * grad)


@dataclass
class TrainState:
    model: object
    optimizer: NesterovOptimizer
    epoch: int = 0
    augmentation_enabled: bool = True
    history: list = field(default_factory=list)
    aug_counts: list = field(default_factory=list)

    @property
    def velocity(self):
        return self.optimizer.velocity

    @classmethod
    def create(cls, model, train_config):
        optimizer = NesterovOptimizer(model.named_parameters(), train_config.learning_rate, train_config.momentum)
        return cls(model=model, optimizer=optimizer)


def nesterov_step(state, grads, lr, momentum):
    """Update the state's model parameters in place from a name -> gradient map."""
    params = dict(state.model.named_parameters())
    nesterov_update(params, state.velocity, grads, lr, momentum)
    return state


def augment_batch(batch, rng, config, enabled, counts):
    """Per-sample FAS-Aug and photometric jitter, then PDA on spoof samples."""
    aug = config.augment
    out = []
    for sample in batch:
        if enabled:
            outcome = apply_fas_aug(sample, rng, config.train.p_fas, aug)
            if outcome.op_applied is not AugOp.NONE:
                counts["fas"] += 1
                sample = outcome.apply_to(sample)
        sample = random_flip(sample, rng, aug.p_flip)
        sample = random_brightness(sample, rng, aug.brightness)
        out.append(sample)
    if not enabled or config.train.p_pda == 0.0:
        return out
    live = [s for s in out if s.label == Label.LIVE]
    for i, sample in enumerate(out):
        if sample.label != Label.SPOOF or rng.random() >= config.train.p_pda:
            continue
        if not live:
            counts["pda_skipped"] += 1
            logger.debug("PDA skipped for '%s': no live sample in batch", sample.sample_id)
            continue
        partner = live[int(rng.integers(len(live)))]
        out[i] = apply_pda(sample, partner, rng, aug.pda_patch_prob, config.model.patch_size)
        counts["pda"] += 1
    return out


def batch_targets(samples, n_patches):
    labels = torch.as_tensor([int(s.label) for s in samples], dtype=torch.long)
    patch_labels = torch.as_tensor(np.stack([s.patch_label_vector(n_patches) for s in samples]))
    return labels, patch_labels


def train_epoch(state, dataset, rng, config):
    """One pass over the dataset; returns the updated state."""
    if not dataset:
        raise InvalidArgumentError("cannot train on an empty dataset")
    if not isinstance(config, RunConfig):
        raise InvalidArgumentError("train_epoch expects a RunConfig")
    model = state.model
    model.train()
    aug_rng = make_rng(int(rng.integers(2 ** 63)))
    order = rng.permutation(len(dataset))
    enabled = state.augmentation_enabled
    counts = {"fas": 0, "pda": 0, "pda_skipped": 0}
    sums = {"l_class": 0.0, "l_tap": 0.0, "l_apl": 0.0, "l_overall": 0.0}
    n_patches = config.model.n_patches
    batch_size = config.train.batch_size
    for start in range(0, len(order), batch_size):
        batch = [dataset[i] for i in order[start:start + batch_size]]
        batch = augment_batch(batch, aug_rng, config, enabled, counts)
        labels, patch_labels = batch_targets(batch, n_patches)
        model.zero_grad(set_to_none=True)
        acts = forward(model, normalize_images([s.image for s in batch], config.eval))
        losses = overall_loss(acts, labels, patch_labels, config.model)
        if not np.isfinite(losses.l_overall):
            raise NumericError(f"non-finite loss at epoch {state.epoch + 1}", tensor="l_overall")
        losses.total.backward()
        state.optimizer.step()
        for key, value in losses.to_record().items():
            sums[key] += value * len(batch)
    means = {key: value / len(dataset) for key, value in sums.items()}
    state.epoch += 1
    state.history.append({"epoch": state.epoch, **means, "aug_enabled": enabled})
    state.aug_counts.append(counts)
    logger.debug("epoch %d: %s augmentations %s", state.epoch, means, counts)
    if enabled and means["l_overall"] < config.train.gate_threshold:
        state.augmentation_enabled = False
        logger.info("Epoch %d mean loss %.6g below %g; augmentation disabled",
                    state.epoch, means["l_overall"], config.train.gate_threshold)
    return state


def write_loss_log(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({**row, "aug_enabled": int(row["aug_enabled"])})
    return path


def fit(samples, config, model=None, callback=None, log_path=None):
    """Train a model from the config's seed for config.train.epochs epochs."""
    def log(msg, progress=None):
        logger.info(msg)
        if callback:
            try:
                if progress is not None:
                    callback(msg, progress)
                else:
                    callback(msg)
            except Exception:
                pass

    if model is None:
        model = build_model(config.model, derive_seed(config.seed, "init"))
    state = TrainState.create(model, config.train)
    rng = make_rng(config.train_seed)
    epochs = config.train.epochs
    log(f"Training on {len(samples)} samples for {epochs} epochs...", 0.0)
    for _ in range(epochs):
        train_epoch(state, samples, rng, config)
        last = state.history[-1]
        log(f"Epoch {state.epoch}/{epochs}: l_overall={last['l_overall']:.6f}", state.epoch / epochs)
    if log_path is not None:
        write_loss_log(state.history, log_path)
    model.eval()
    return state


@dataclass
class GradCheckReport:
    """Relative errors are measured against max(|analytic|, |numeric|, floor).

    Near-zero gradients are compared absolutely up to the floor, so
    max_abs_error is reported alongside.
    """
    max_rel_error: float
    per_tensor: dict
    n_checked: int
    worst: tuple
    seed: int
    max_abs_error: float = 0.0
    floor: float = 1e-3

    def to_record(self):
        return {"max_rel_error": self.max_rel_error, "max_abs_error": self.max_abs_error, "floor": self.floor,
                "per_tensor": self.per_tensor, "n_checked": self.n_checked, "worst": list(self.worst),
                "seed": self.seed}


def tiny_config():
    return ModelConfig(image_size=16, patch_size=8, depth=2, embed_dim=8, heads=2, dtype="float64")


def _grad_check_batch(config, rng, n_samples):
    """Random images with alternating labels; spoofs get random patch-label grids."""
    samples = []
    for i in range(n_samples):
        image = unit_image(rng.random((config.image_size, config.image_size, 3)))
        if i % 2 == 0:
            samples.append(Sample(image, Label.LIVE, sample_id=f"gc{i}"))
        else:
            grid = rng.integers(0, 2, size=(config.grid, config.grid))
            samples.append(Sample(image, Label.SPOOF, "SYNTH_PRINT", patch_labels=grid, sample_id=f"gc{i}"))
    return samples


def grad_check(config=None, seed=0, n_samples=4, step=1e-4, floor=1e-3, max_per_tensor=None):
    """Compare autograd gradients of l_overall with central finite differences.

    The numeric derivative uses the five-point central stencil
    (-L(x+2h) + 8 L(x+h) - 8 L(x-h) + L(x-2h)) / 12h. Relative error per
    element is |a - n| / max(|a|, |n|, floor). The model is always evaluated
    in float64.
    """
    if config is None:
        config = tiny_config()
    if not 1 <= n_samples <= 4:
        raise InvalidArgumentError("grad_check uses between 1 and 4 samples")
    if config.dtype != "float64":
        config = dataclasses.replace(config, dtype="float64")
    rng = make_rng(seed)
    model = build_model(config, derive_seed(seed, "init"))
    samples = _grad_check_batch(config, rng, n_samples)
    inputs = [normalize_images([s.image], EvalConfig())[0] for s in samples]
    labels, patch_labels = batch_targets(samples, config.n_patches)

    def loss():
        return overall_loss(forward(model, inputs), labels, patch_labels, config).total

    model.zero_grad(set_to_none=True)
    loss().backward()
    per_tensor = {}
    worst = ("", -1, 0.0)
    max_abs = 0.0
    n_checked = 0
    pick_rng = make_rng(derive_seed(seed, "pick"))
    with torch.no_grad():
        for name, param in model.named_parameters():
            analytic = param.grad.detach().reshape(-1).clone()
            flat = param.data.view(-1)
            indices = np.arange(flat.numel())
            if max_per_tensor is not None and flat.numel() > max_per_tensor:
                indices = np.sort(pick_rng.choice(flat.numel(), size=max_per_tensor, replace=False))
            tensor_max = 0.0
            for idx in indices:
                original = float(flat[idx])
                values = {}
                for k in (-2, -1, 1, 2):
                    flat[idx] = original + k * step
                    values[k] = float(loss())
                flat[idx] = original
                numeric = (values[-2] - 8 * values[-1] + 8 * values[1] - values[2]) / (12 * step)
                a = float(analytic[idx])
                max_abs = max(max_abs, abs(a - numeric))
                rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                tensor_max = max(tensor_max, rel)
                if rel > worst[2]:
                    worst = (name, int(idx), rel)
            per_tensor[name] = tensor_max
            n_checked += len(indices)
    report = GradCheckReport(max_rel_error=max(per_tensor.values()), per_tensor=per_tensor,
                             n_checked=n_checked, worst=worst, seed=seed, max_abs_error=max_abs, floor=floor)
    logger.info("grad_check: %d elements, max relative error %.3e at %s[%d] (floor %g), max absolute error %.3e",
                n_checked, report.max_rel_error, worst[0], worst[1], floor, max_abs)
    return report
