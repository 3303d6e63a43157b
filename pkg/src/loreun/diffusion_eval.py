"""Evaluation losses for diffusion models.

The original model's mean forgetting-set loss at each timestep, m(t), is
used twice: timesteps are drawn with probability proportional to 1/m(t),
and a per-example loss at t is divided by m(t) so losses taken at
different timesteps become comparable.
"""
import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import OptimizeWarning, curve_fit

from .diffusion import diffusion_noise_loss, to_model_space

REFERENCE_FLOOR = 1e-8


class DegenerateTableError(ValueError):
    pass


def exp_curve(t, a, b, c):
    return a * np.exp(b * t) + c


@dataclass
class TimestepLossTable:
    T: int
    mean_loss: np.ndarray
    source: str = "exhaustive"
    fit_params: tuple = None
    sample_plan: tuple = None
    fallback: bool = False
    model_digest: str = ""
    seed: int = 0
    evaluations: int = 0
    sampled_t: np.ndarray = field(default=None, repr=False)
    sampled_means: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.mean_loss = np.asarray(self.mean_loss, dtype=np.float64)
        if self.mean_loss.shape != (self.T,):
            raise ValueError(f"mean_loss must have length T={self.T}")
        if not np.all(np.isfinite(self.mean_loss)) or np.any(self.mean_loss <= 0):
            raise DegenerateTableError("reference losses must be finite and positive at every timestep")

    def m(self, t):
        """Reference loss at 1-based timestep(s) ``t``, floored."""
        t = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t, dtype=np.int64)
        return np.maximum(self.mean_loss[t - 1], REFERENCE_FLOOR)

    @property
    def probabilities(self):
        inv = 1.0 / np.maximum(self.mean_loss, REFERENCE_FLOOR)
        return inv / inv.sum()

    @property
    def header(self):
        return {
            "source": self.source,
            "fit_params": list(self.fit_params) if self.fit_params is not None else None,
            "sample_plan": list(self.sample_plan) if self.sample_plan is not None else None,
            "fallback": self.fallback,
            "model_digest": self.model_digest,
            "seed": self.seed,
            "evaluations": self.evaluations,
            "T": self.T,
        }

    def to_csv(self):
        buf = io.StringIO()
        buf.write("# " + json.dumps(self.header, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "m"])
        for t, m in enumerate(self.mean_loss, start=1):
            w.writerow([t, repr(float(m))])
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text().splitlines()
        h = json.loads(lines[0][2:])
        rows = list(csv.DictReader(lines[1:]))
        return cls(h["T"], [float(r["m"]) for r in rows], h["source"],
                   tuple(h["fit_params"]) if h["fit_params"] else None,
                   tuple(h["sample_plan"]) if h["sample_plan"] else None,
                   h.get("fallback", False), h.get("model_digest", ""), h.get("seed", 0),
                   h.get("evaluations", 0))


@torch.no_grad()
def timestep_loss_matrix(model, x, y, timesteps, gen, batch_size=512):
    """Loss of every example at every timestep, shape (N, len(timesteps)).

    One noise tensor of shape ``x.shape`` is drawn from ``gen`` per timestep,
    in the order given.
    """
    model.model.eval()
    y = torch.as_tensor(y)
    out = torch.empty(len(x), len(timesteps), dtype=torch.float64)
    for j, t in enumerate(timesteps):
        noise = torch.randn(x.shape, generator=gen)
        tt = torch.full((len(x),), int(t), dtype=torch.long)
        for i in range(0, len(x), batch_size):
            sl = slice(i, i + batch_size)
            out[sl, j] = diffusion_noise_loss(model, x[sl], y[sl], tt[sl], noise[sl]).double()
    return out.numpy()


def build_reference_table_exhaustive(model_o, dataset, forget_indices, noise_seed=0):
    """m(t) from all N x T evaluations on the original model."""
    feats, labels = dataset.view(forget_indices)
    gen = torch.Generator().manual_seed(noise_seed)
    timesteps = np.arange(1, model_o.T + 1)
    losses = timestep_loss_matrix(model_o, to_model_space(feats), labels, timesteps, gen)
    return TimestepLossTable(model_o.T, losses.mean(axis=0), "exhaustive", model_digest=model_o.digest,
                             seed=noise_seed, evaluations=losses.size)


def stratified_timesteps(T, k, rng):
    """One uniform draw from each of ``k`` equal-width strata of [1, T]; the full grid when k == T."""
    if k >= T:
        return np.arange(1, T + 1)
    edges = np.linspace(1, T + 1, k + 1)
    lo = np.floor(edges[:-1]).astype(np.int64)
    hi = np.maximum(np.floor(edges[1:]).astype(np.int64), lo + 1)
    return np.array([rng.integers(a, b) for a, b in zip(lo, hi)], dtype=np.int64)


def fit_exponential(t, m, T=None):
    """Fit a*exp(b*t)+c to sampled means. Returns (a, b, c) or None when the fit fails.

    Residuals are relative (sigma = m): the curve spans orders of magnitude
    between small and large t, and an absolute fit ignores the tail and can
    go negative there.
    """
    t = np.asarray(t, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if len(t) < 3 or np.any(m <= 0):
        return None
    T = T or t.max()
    decreasing = m[0] >= m[-1]
    c0 = float(m.min()) * 0.5
    b0 = -5.0 / T if decreasing else 1.0 / T
    a0 = float((m[0] - c0) / np.exp(b0 * t[0]))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", OptimizeWarning)
            params, _ = curve_fit(exp_curve, t, m, p0=(a0, b0, c0), sigma=m, maxfev=20000)
    except (RuntimeError, OptimizeWarning, ValueError):
        return None
    if not np.all(np.isfinite(params)):
        return None
    return tuple(float(p) for p in params)


def table_from_samples(T, t, means, curve="exp", floor=REFERENCE_FLOOR):
    """Turn sampled timestep means into a full-length curve. Returns (curve, params, fallback)."""
    grid = np.arange(1, T + 1, dtype=np.float64)
    order = np.argsort(t)
    t, means = np.asarray(t)[order], np.asarray(means)[order]
    params = fit_exponential(t, means, T) if curve == "exp" else None
    if params is not None:
        values = exp_curve(grid, *params)
        if np.all(np.isfinite(values)) and np.all(values > 0):
            return np.maximum(values, floor), params, False
        params = None
    return np.maximum(np.interp(grid, t, means), floor), None, curve == "exp"


def fit_reference_table(model_o, dataset, forget_indices, num_examples=50, num_timesteps=10, seed=0,
                        curve="exp"):
    """Estimate m(t) from a sampled subset of examples and timesteps.

    With ``curve="interp"`` the sampled means are linearly interpolated
    instead of fitted; with the full example set and full grid that equals
    the exhaustive table for the same seed.
    """
    forget_indices = np.asarray(forget_indices, dtype=np.int64)
    T = model_o.T
    if num_examples > len(forget_indices) or num_timesteps > T:
        raise ValueError("sample plan exceeds the available examples or timesteps")
    rng = np.random.default_rng(seed)
    if num_examples == len(forget_indices):
        chosen = forget_indices
    else:
        chosen = np.sort(rng.choice(forget_indices, num_examples, replace=False))
    timesteps = stratified_timesteps(T, num_timesteps, rng)
    feats, labels = dataset.view(chosen)
    gen = torch.Generator().manual_seed(seed)
    losses = timestep_loss_matrix(model_o, to_model_space(feats), labels, timesteps, gen)
    means = losses.mean(axis=0)
    values, params, fallback = table_from_samples(T, timesteps, means, curve)
    table = TimestepLossTable(T, values, "fitted", params, (num_examples, num_timesteps), fallback,
                              model_o.digest, seed, losses.size)
    table.sampled_t, table.sampled_means = timesteps, means
    return table


def sample_timestep(table, rng, size=None):
    """Draw t in [1, T] with probability proportional to 1/m(t)."""
    p = table.probabilities
    if isinstance(rng, torch.Generator):
        n = 1 if size is None else size
        draws = torch.multinomial(torch.as_tensor(p), n, replacement=True, generator=rng) + 1
        return int(draws[0]) if size is None else draws
    return int(rng.choice(table.T, p=p) + 1) if size is None else rng.choice(table.T, size=size, p=p) + 1


def rescale_losses(losses, t, table):
    """Divide per-example losses taken at timesteps ``t`` by the reference m(t)."""
    ref = table.m(t)
    if isinstance(losses, torch.Tensor):
        return losses / torch.as_tensor(ref, dtype=losses.dtype)
    return np.asarray(losses, dtype=np.float64) / ref


@torch.no_grad()
def estimated_eval_loss(model, x, y, t, noise, table):
    """l(model; x, y, t) / m(t), dimensionless."""
    return rescale_losses(diffusion_noise_loss(model, x, y, t, noise).double(), t, table)


@torch.no_grad()
def static_eval_loss(model_o, x, y, timesteps=None, seed=0):
    """Uniform average over timesteps of each example's loss on the original model.

    ``timesteps`` defaults to the full grid 1..T; pass a subsample (e.g.
    from ``stratified_timesteps``) when T is large.
    """
    if timesteps is None:
        timesteps = np.arange(1, model_o.T + 1)
    gen = torch.Generator().manual_seed(seed)
    return timestep_loss_matrix(model_o, x, y, timesteps, gen).mean(axis=1)


def static_loss_fn(timesteps=None, seed=0):
    """Adapter for ``weighting.build_static_table`` on diffusion checkpoints."""
    def fn(model, features, labels):
        return static_eval_loss(model, to_model_space(features), labels, timesteps, seed)
    return fn
