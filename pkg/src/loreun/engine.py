"""The unlearning loop: paired forget/retain minibatches, per-example reweighting, masked SGD."""
import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import clamp_batch_size
from .diffusion import DiffusionCheckpoint, diffusion_noise_loss, to_model_space
from .diffusion_eval import rescale_losses, sample_timestep
from .objectives import (build_saliency_mask, combined_objective, dm_forget_loss,
                         random_wrong_labels)
from .weighting import dynamic_batch_weights, weight_summary

TRAJECTORY_FIELDS = ["epoch", "ua", "forget_loss_mean", "retain_loss_mean", "wall_seconds"]


class MissingTableError(ValueError):
    pass


class UnlearningDiverged(RuntimeError):
    def __init__(self, epoch, run):
        super().__init__(f"non-finite unlearning loss at epoch {epoch}")
        self.epoch = epoch
        self.run = run


@dataclass
class UnlearnRun:
    recipe: object
    start_digest: str
    final: object = None
    trajectory: list = field(default_factory=list)
    weight_snapshots: list = field(default_factory=list)
    setup_seconds: float = 0.0

    @property
    def recipe_digest(self):
        return self.recipe.digest

    @property
    def wall_seconds(self):
        loop = self.trajectory[-1]["wall_seconds"] if self.trajectory else 0.0
        return self.setup_seconds + loop

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.recipe.save(out / "recipe.json")
        with open(out / "trajectory.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=TRAJECTORY_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(self.trajectory)
        for snap in self.weight_snapshots:
            with open(out / f"weights_epoch{snap['epoch']}.csv", "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["index", "raw_weight"])
                w.writerows(zip(snap["indices"], snap["raw"]))
        if self.final is not None:
            self.final.save(out / "final.pt")
        meta = {"recipe_digest": self.recipe_digest, "start_checkpoint": self.start_digest,
                "final_checkpoint": self.final.digest if self.final is not None else None,
                "setup_seconds": self.setup_seconds,
                "weight_summaries": [{k: v for k, v in s.items() if k not in ("indices", "raw")}
                                     for s in self.weight_snapshots]}
        (out / "run.json").write_text(json.dumps(meta, indent=2))
        return out


def pair_batches(forget_indices, retain_indices, batch_size, seed, epoch):
    """Yield ``(forget_batch, retain_batch)`` index arrays for one epoch.

    Every forgetting example appears exactly once per epoch. Each forget
    batch is paired with a fresh retain batch of the same nominal size,
    drawn without replacement within the batch; ``retain_batch`` is None when
    ``retain_indices`` is None.
    """
    forget_indices = np.asarray(forget_indices, dtype=np.int64)
    if len(forget_indices) == 0:
        raise ValueError("empty forgetting set")
    bs = clamp_batch_size(batch_size, len(forget_indices), "forget")
    rng = np.random.default_rng([seed, epoch])
    order = forget_indices[rng.permutation(len(forget_indices))]
    rs = None
    if retain_indices is not None:
        retain_indices = np.asarray(retain_indices, dtype=np.int64)
        if len(retain_indices) == 0:
            raise ValueError("empty retaining set")
        rs = clamp_batch_size(batch_size, len(retain_indices), "retain")
    for i in range(0, len(order), bs):
        bf = order[i:i + bs]
        br = None if rs is None else rng.choice(retain_indices, rs, replace=False)
        yield bf, br


def _uniform(n):
    return torch.full((n,), 1.0 / n)


class _Stepper:
    """Per-task forward computations; returns (forget, eval, weights, retain) for one batch pair."""

    def __init__(self, ckpt, dataset, recipe, weight_table, timestep_table, gen):
        self.ckpt = ckpt
        self.recipe = recipe
        self.weight_table = weight_table
        self.timestep_table = timestep_table
        self.gen = gen
        self.num_classes = dataset.num_classes
        self.labels = torch.from_numpy(dataset.labels)
        self.diffusion = isinstance(ckpt, DiffusionCheckpoint)
        self.x = to_model_space(dataset.features) if self.diffusion else torch.from_numpy(dataset.features)
        self.epoch_labels = {}

    def new_epoch(self, forget_indices):
        needs_fixed = self.recipe.forget_kind == "rl" and (self.diffusion or self.recipe.rl_redraw == "epoch")
        if needs_fixed:
            idx = torch.from_numpy(np.asarray(forget_indices))
            wrong = random_wrong_labels(self.labels[idx], self.num_classes, self.gen)
            self.epoch_labels = dict(zip(idx.tolist(), wrong.tolist()))

    def wrong_labels(self, bf, y):
        if self.epoch_labels:
            return torch.tensor([self.epoch_labels[int(i)] for i in bf])
        return random_wrong_labels(y, self.num_classes, self.gen)

    def weights(self, bf, eval_losses):
        w = self.recipe.weighting
        if w.variant == "off":
            return _uniform(len(bf))
        if w.variant == "static":
            return torch.as_tensor(self.weight_table.batch_weights(bf), dtype=torch.float32)
        return dynamic_batch_weights(eval_losses, w.tau).float()

    def forget(self, bf):
        b = torch.from_numpy(bf)
        x, y = self.x[b], self.labels[b]
        if not self.diffusion:
            logits = self.ckpt.model(x)
            ce_true = F.cross_entropy(logits, y, reduction="none")
            if self.recipe.forget_kind == "ga":
                forget = -ce_true
            else:
                forget = F.cross_entropy(logits, self.wrong_labels(bf, y), reduction="none")
            return forget, ce_true.detach()
        dynamic = self.recipe.weighting.variant == "dynamic"
        if dynamic:
            t = sample_timestep(self.timestep_table, self.gen, len(b))
        else:
            t = torch.randint(1, self.ckpt.T + 1, (len(b),), generator=self.gen)
        noise = torch.randn(x.shape, generator=self.gen)
        if self.recipe.forget_kind == "ga":
            mse = diffusion_noise_loss(self.ckpt, x, y, t, noise)
            forget, eval_loss = -mse, mse.detach()
        else:
            forget, pred = dm_forget_loss(self.ckpt, x, y, self.wrong_labels(bf, y), t, noise, return_eps=True)
            eval_loss = ((noise - pred.detach()) ** 2).flatten(1).sum(1)
        if dynamic:
            eval_loss = rescale_losses(eval_loss.double(), t, self.timestep_table)
        return forget, eval_loss

    def retain(self, br):
        b = torch.from_numpy(br)
        x, y = self.x[b], self.labels[b]
        if not self.diffusion:
            return F.cross_entropy(self.ckpt.model(x), y, reduction="none")
        t = torch.randint(1, self.ckpt.T + 1, (len(b),), generator=self.gen)
        noise = torch.randn(x.shape, generator=self.gen)
        return diffusion_noise_loss(self.ckpt, x, y, t, noise)


@torch.no_grad()
def forget_accuracy(ckpt, dataset, forget_indices):
    pred = ckpt.logits(dataset.features[forget_indices]).argmax(1).numpy()
    return 100.0 * float((pred == dataset.labels[forget_indices]).mean())


def run_unlearning(model_o, dataset, split, recipe, weight_table=None, timestep_table=None, mask=None,
                   epoch_eval=None, snapshot_weights=False):
    """Unlearn ``split.forget`` from ``model_o`` following ``recipe``. ``model_o`` is not modified.

    ``epoch_eval(ckpt) -> float`` fills the per-epoch UA column; it defaults
    to forgetting-set accuracy for classifiers and is skipped (NaN) for
    diffusion models. Its cost is excluded from the timings.
    """
    diffusion = isinstance(model_o, DiffusionCheckpoint)
    if (recipe.task == "diffusion") != diffusion:
        raise ValueError(f"recipe task {recipe.task!r} does not match the checkpoint type")
    forget = np.asarray(split.forget, dtype=np.int64)
    retain = np.asarray(split.retain, dtype=np.int64) if recipe.uses_retain else None
    variant = recipe.weighting.variant
    if variant == "static":
        if weight_table is None:
            raise MissingTableError("static weighting needs a prebuilt WeightTable")
        weight_table.require(forget)
    if variant == "dynamic" and diffusion and timestep_table is None:
        raise MissingTableError("dynamic weighting on a diffusion model needs a TimestepLossTable")
    if epoch_eval is None and not diffusion:
        epoch_eval = lambda ck: forget_accuracy(ck, dataset, forget)  # noqa: E731

    ckpt = model_o.clone()
    run = UnlearnRun(recipe=recipe, start_digest=model_o.digest)
    setup_start = time.perf_counter()
    if recipe.masked and mask is None:
        mask = build_saliency_mask(model_o, dataset, forget, recipe.mask_fraction, task=recipe.task,
                                   seed=recipe.seed, timesteps=recipe.saliency_timesteps)
    run.setup_seconds = time.perf_counter() - setup_start
    params = list(ckpt.model.parameters())
    keep = [m.bool() for m in mask.masks] if recipe.masked else None
    if recipe.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=recipe.lr, weight_decay=recipe.weight_decay)
    else:
        opt = torch.optim.SGD(params, lr=recipe.lr, momentum=recipe.momentum, weight_decay=recipe.weight_decay)
    gen = torch.Generator().manual_seed(recipe.seed)
    stepper = _Stepper(ckpt, dataset, recipe, weight_table, timestep_table, gen)
    elapsed = 0.0

    for epoch in range(1, recipe.epochs + 1):
        ckpt.model.train()
        tick = time.perf_counter()
        stepper.new_epoch(forget)
        f_sum = r_sum = 0.0
        f_n = r_n = 0
        seen, raw = [], []
        for bf, br in pair_batches(forget, retain, recipe.batch_size, recipe.seed, epoch):
            f_loss, eval_loss = stepper.forget(bf)
            w = stepper.weights(bf, eval_loss)
            r_loss = stepper.retain(br) if br is not None else None
            obj = combined_objective(f_loss, w, r_loss, recipe.alpha if r_loss is not None else 0.0)
            if not torch.isfinite(obj):
                run.final = ckpt
                raise UnlearningDiverged(epoch, run)
            opt.zero_grad()
            obj.backward()
            if keep is not None:
                frozen = [p.detach().clone() for p in params]
                mask.apply_to_grads(params)
            opt.step()
            if keep is not None:
                with torch.no_grad():
                    for p, k, old in zip(params, keep, frozen):
                        p.copy_(torch.where(k, p, old))
            f_sum += float(f_loss.detach().sum())
            f_n += len(bf)
            if r_loss is not None:
                r_sum += float(r_loss.detach().sum())
                r_n += len(br)
            if snapshot_weights and recipe.weighting.enabled:
                seen.extend(bf.tolist())
                if variant == "static":
                    raw.extend(np.exp(-weight_table.losses_for(bf) / recipe.weighting.tau).tolist())
                else:
                    raw.extend(np.exp(-eval_loss.double().numpy() / recipe.weighting.tau).tolist())
        elapsed += time.perf_counter() - tick
        ckpt.model.eval()
        ua = float(epoch_eval(ckpt)) if epoch_eval is not None else math.nan
        run.trajectory.append({"epoch": epoch, "ua": ua, "forget_loss_mean": f_sum / f_n,
                               "retain_loss_mean": r_sum / r_n if r_n else math.nan,
                               "wall_seconds": elapsed})
        if snapshot_weights and recipe.weighting.enabled:
            run.weight_snapshots.append({"epoch": epoch, **weight_summary(raw), "indices": seen, "raw": raw})
    ckpt.model.eval()
    run.final = ckpt
    return run
