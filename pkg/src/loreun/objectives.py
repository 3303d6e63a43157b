"""Forgetting and retaining losses, the combined batch objective, and saliency masks."""
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .weighting import WeightingConfig

METHODS = ("GA", "RL", "GAR", "GAR-m", "SalUn")
MASKED_METHODS = ("GAR-m", "SalUn")
TASKS = ("classifier", "diffusion")


class ContractViolation(ValueError):
    pass


class InvalidTask(ValueError):
    pass


@dataclass
class UnlearnRecipe:
    method: str = "GAR"
    alpha: float = 1.0
    weighting: WeightingConfig = field(default_factory=WeightingConfig)
    epochs: int = 10
    lr: float = 0.01
    batch_size: int = 256
    mask_fraction: float = 0.5
    seed: int = 0
    task: str = "classifier"
    momentum: float = 0.0
    weight_decay: float = 0.0
    rl_redraw: str = "step"
    saliency_timesteps: int = 10
    optimizer: str = "sgd"

    def __post_init__(self):
        if isinstance(self.weighting, dict):
            self.weighting = WeightingConfig(**self.weighting)
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.rl_redraw not in ("step", "epoch"):
            raise ValueError("rl_redraw must be 'step' or 'epoch'")

    @property
    def masked(self):
        return self.method in MASKED_METHODS

    @property
    def forget_kind(self):
        """'ga' (negated true-label loss) or 'rl' (fit a wrong label)."""
        return "ga" if self.method in ("GA", "GAR", "GAR-m") else "rl"

    @property
    def uses_retain(self):
        return self.method != "GA"

    def to_dict(self):
        d = asdict(self)
        d["weighting"] = asdict(self.weighting)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @property
    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


# ----------------------------------------------------------- classifiers

def random_wrong_labels(labels, num_classes, gen):
    """One label per example, uniform over the other ``num_classes - 1`` classes."""
    if num_classes < 2:
        raise InvalidTask("random labelling needs at least two classes")
    labels = torch.as_tensor(labels)
    offset = torch.randint(1, num_classes, labels.shape, generator=gen)
    return (labels + offset) % num_classes


def rl_forget_loss(model, features, labels, gen, num_classes=None, logits=None):
    """Cross-entropy towards freshly drawn wrong labels. Returns ``(losses, wrong_labels)``."""
    if logits is None:
        logits = model(torch.as_tensor(features))
    if num_classes is None:
        num_classes = logits.shape[1]
    y_wrong = random_wrong_labels(labels, num_classes, gen)
    return F.cross_entropy(logits, y_wrong, reduction="none"), y_wrong


def gar_forget_loss(model, features, labels, logits=None):
    if logits is None:
        logits = model(torch.as_tensor(features))
    return -F.cross_entropy(logits, torch.as_tensor(labels), reduction="none")


def retain_loss(model, batch, task, gen=None):
    """Per-example retaining loss: cross-entropy for classifiers, noise MSE for diffusion.

    ``batch`` is ``(features, labels)`` for classifiers and
    ``(x, labels, t, noise)`` (model-space ``x``) for diffusion.
    """
    from .diffusion import DiffusionCheckpoint, diffusion_noise_loss

    is_diffusion = isinstance(model, DiffusionCheckpoint)
    if task == "classifier":
        if is_diffusion:
            raise ValueError("classifier retain loss on a diffusion model")
        features, labels = batch
        return F.cross_entropy(model(torch.as_tensor(features)), torch.as_tensor(labels), reduction="none")
    if task == "diffusion":
        if not is_diffusion:
            raise ValueError("diffusion retain loss needs a DiffusionCheckpoint")
        x, labels, t, noise = batch
        return diffusion_noise_loss(model, x, labels, t, noise)
    raise ValueError(f"unknown task {task!r}")


# ------------------------------------------------------------- diffusion

def dm_forget_loss(model, x, y, y_prime, t, noise, return_eps=False):
    """||eps(x_t | y') - eps(x_t | y)||^2 with the y'-branch as a fixed target.

    Both branches see the same noised input. With ``return_eps`` the
    y-branch prediction is returned too, so the caller can reuse it for the
    dynamic evaluation loss without another forward pass.
    """
    y = torch.as_tensor(y)
    y_prime = torch.as_tensor(y_prime)
    if torch.any(y == y_prime):
        raise ValueError("y' must differ from y for every example")
    t = model.check_t(t)
    x_t = model.q_sample(x, t, noise)
    with torch.no_grad():
        target = model.eps(x_t, t, y_prime)
    pred = model.eps(x_t, t, y)
    loss = ((target - pred) ** 2).flatten(1).sum(1)
    return (loss, pred) if return_eps else loss


# ------------------------------------------------------------- objective

def combined_objective(forget_losses, weights, retain_losses=None, alpha=1.0, tol=1e-6):
    """sum_i w_i * forget_i + alpha * mean(retain). Works on tensors or arrays."""
    as_torch = isinstance(forget_losses, torch.Tensor)
    if as_torch:
        weights = torch.as_tensor(weights, dtype=forget_losses.dtype)
        wsum = float(weights.sum())
    else:
        forget_losses = np.asarray(forget_losses, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        wsum = float(weights.sum())
    if weights.shape != forget_losses.shape:
        raise ContractViolation("weights and forgetting losses differ in shape")
    if abs(wsum - 1.0) > tol:
        raise ContractViolation(f"weights sum to {wsum}, not 1")
    total = (weights * forget_losses).sum()
    if retain_losses is not None and alpha != 0:
        total = total + alpha * retain_losses.mean()
    return total if as_torch else float(total)


# --------------------------------------------------------------- saliency

@dataclass
class SaliencyMask:
    masks: list
    fraction_kept: float

    @property
    def num_kept(self):
        return int(sum(int(m.sum()) for m in self.masks))

    @property
    def num_params(self):
        return int(sum(m.numel() for m in self.masks))

    def apply_to_grads(self, params):
        for p, m in zip(params, self.masks):
            if p.grad is not None:
                p.grad.mul_(m)


def top_fraction_mask(scores, fraction):
    """Binary masks keeping the ``round(fraction * P)`` largest scores over all tensors jointly.

    Ties are broken towards the earlier parameter position.
    """
    if not 0 < fraction <= 1:
        raise ValueError("mask_fraction must be in (0, 1]")
    flat = torch.cat([s.reshape(-1) for s in scores]).double().numpy()
    k = int(round(fraction * flat.size))
    keep = np.zeros(flat.size, dtype=np.float32)
    keep[np.argsort(-flat, kind="stable")[:k]] = 1.0
    out, pos = [], 0
    for s in scores:
        n = s.numel()
        out.append(torch.from_numpy(keep[pos:pos + n].copy()).reshape(s.shape))
        pos += n
    return SaliencyMask(out, k / flat.size)


def saliency_gradients(model_o, dataset, forget_indices, task="classifier", batch_size=256, seed=0,
                       timesteps=10):
    """Accumulated gradient of the true-label forgetting loss at the original parameters."""
    from .diffusion import diffusion_noise_loss, to_model_space

    module = model_o.model
    params = list(module.parameters())
    grads = [torch.zeros_like(p) for p in params]
    forget_indices = np.asarray(forget_indices, dtype=np.int64)
    gen = torch.Generator().manual_seed(seed)
    module.eval()
    for i in range(0, len(forget_indices), batch_size):
        feats, labels = dataset.view(forget_indices[i:i + batch_size])
        if task == "classifier":
            loss = -F.cross_entropy(model_o(torch.from_numpy(feats)), torch.from_numpy(labels), reduction="sum")
        else:
            x = to_model_space(feats)
            loss = 0.0
            for _ in range(timesteps):
                t = torch.randint(1, model_o.T + 1, (len(x),), generator=gen)
                noise = torch.randn(x.shape, generator=gen)
                loss = loss - diffusion_noise_loss(model_o, x, torch.from_numpy(labels), t, noise).sum()
        g = torch.autograd.grad(loss, params, allow_unused=True)
        for acc, gi in zip(grads, g):
            if gi is not None:
                acc += gi
    return grads


def build_saliency_mask(model_o, dataset, forget_indices, mask_fraction, task="classifier", **kwargs):
    """Mark the ``mask_fraction`` of parameters with the largest |gradient| of the forgetting loss."""
    if not 0 < mask_fraction <= 1:
        raise ValueError("mask_fraction must be in (0, 1]")
    params = list(model_o.model.parameters())
    if mask_fraction == 1:
        return SaliencyMask([torch.ones_like(p) for p in params], 1.0)
    grads = saliency_gradients(model_o, dataset, forget_indices, task, **kwargs)
    return top_fraction_mask([g.abs() for g in grads], mask_fraction)
