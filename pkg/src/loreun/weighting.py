"""Loss-based example weights: w = exp(-loss / tau), renormalised within each forget batch.

Low-loss examples are the ones the original model fits best and the
hardest to forget, so they receive the largest weight.
"""
import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

VARIANTS = ("off", "static", "dynamic")
WEIGHT_FLOOR = 1e-30


class IncompleteTableError(KeyError):
    pass


@dataclass(frozen=True)
class WeightingConfig:
    tau: float = 10.0
    variant: str = "off"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")

    @property
    def enabled(self):
        return self.variant != "off"


def default_tau(method):
    """10 for gradient-ascent recipes, 50 for random-label recipes."""
    return 50.0 if method in ("RL", "SalUn") else 10.0


def raw_weight(eval_loss, tau):
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    eval_loss = np.asarray(eval_loss, dtype=np.float64)
    if np.any(eval_loss < 0):
        raise ValueError("evaluation loss must be non-negative")
    w = np.maximum(np.exp(-eval_loss / tau), WEIGHT_FLOOR)
    return float(w) if w.ndim == 0 else w


def normalize_batch_weights(raw):
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("cannot normalise an empty batch")
    if np.any(raw <= 0):
        raise ValueError("raw weights must be positive")
    return raw / raw.sum()


def dynamic_batch_weights(eval_losses, tau):
    """Normalised weights of one batch, computed in the log domain.

    Raw weights are taken relative to the batch maximum and floored at
    WEIGHT_FLOOR before normalising, so every weight stays positive and the
    result is exactly invariant to shifting all losses by a constant. Equal
    to ``normalize_batch_weights(raw_weight(l, tau))`` wherever neither floor
    is active. Accepts numpy arrays or (detached) torch tensors.
    """
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if isinstance(eval_losses, torch.Tensor):
        if eval_losses.numel() == 0:
            raise ValueError("cannot normalise an empty batch")
        z = -eval_losses.detach().double() / tau
        e = torch.exp(z - z.max()).clamp_min(WEIGHT_FLOOR)
        return (e / e.sum()).to(eval_losses.dtype)
    z = -np.asarray(eval_losses, dtype=np.float64) / tau
    if z.size == 0:
        raise ValueError("cannot normalise an empty batch")
    e = np.maximum(np.exp(z - z.max()), WEIGHT_FLOOR)
    return e / e.sum()


class WeightTable:
    """Per-example reference losses of the original model and their raw weights."""

    def __init__(self, indices, reference_losses, tau, source_model_digest="", variant="static"):
        indices = np.asarray(indices, dtype=np.int64)
        losses = np.asarray(reference_losses, dtype=np.float64)
        if len(indices) != len(losses):
            raise ValueError("indices and losses differ in length")
        if np.any(losses < 0):
            raise ValueError("reference losses must be non-negative")
        self.indices = indices
        self.reference_losses = losses
        self.raw_weights = raw_weight(losses, tau) if len(losses) else np.zeros(0)
        self.tau = float(tau)
        self.variant = variant
        self.source_model_digest = source_model_digest
        self._pos = {int(i): k for k, i in enumerate(indices)}

    def __len__(self):
        return len(self.indices)

    def __contains__(self, index):
        return int(index) in self._pos

    def losses_for(self, indices):
        try:
            return self.reference_losses[[self._pos[int(i)] for i in indices]]
        except KeyError as e:
            raise IncompleteTableError(f"no reference loss for example {e.args[0]}") from None

    def batch_weights(self, indices):
        """Static weights of a batch, renormalised within the batch."""
        return dynamic_batch_weights(self.losses_for(indices), self.tau)

    def require(self, indices):
        missing = [int(i) for i in indices if int(i) not in self._pos]
        if missing:
            raise IncompleteTableError(f"{len(missing)} forgetting examples missing, e.g. {missing[:5]}")

    @property
    def header(self):
        return {"tau": self.tau, "variant": self.variant, "model_digest": self.source_model_digest}

    def to_csv(self):
        buf = io.StringIO()
        buf.write("# " + json.dumps(self.header, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "reference_loss", "raw_weight"])
        for i, l, r in zip(self.indices, self.reference_losses, self.raw_weights):
            w.writerow([int(i), repr(float(l)), repr(float(r))])
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text().splitlines()
        header = json.loads(lines[0][2:])
        rows = list(csv.DictReader(lines[1:]))
        return cls([int(r["index"]) for r in rows], [float(r["reference_loss"]) for r in rows],
                   header["tau"], header.get("model_digest", ""), header.get("variant", "static"))


def build_static_table(model_o, dataset, forget_indices, tau, loss_fn=None):
    """Reference losses of every forgetting example on the original model.

    ``loss_fn(model, features, labels) -> array`` defaults to per-example
    cross-entropy; diffusion callers pass the timestep-averaged noise loss.
    """
    from .models import per_sample_ce_numpy

    forget_indices = np.asarray(forget_indices, dtype=np.int64)
    if loss_fn is None:
        loss_fn = per_sample_ce_numpy
    losses = np.asarray(loss_fn(model_o, *dataset.view(forget_indices)), dtype=np.float64)
    if len(losses) != len(forget_indices):
        raise IncompleteTableError("loss function returned the wrong number of entries")
    return WeightTable(forget_indices, np.maximum(losses, 0.0), tau, getattr(model_o, "digest", ""))


def weight_summary(raw):
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        return {"min": math.nan, "median": math.nan, "max": math.nan}
    return {"min": float(raw.min()), "median": float(np.median(raw)), "max": float(raw.max())}
