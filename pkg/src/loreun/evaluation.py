"""Unlearning metrics and the loss-versus-difficulty analyses.

All accuracy-like numbers are percentages. Gaps are absolute differences
to a Retrain model evaluated on the same split.
"""
import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .datasets import make_difficulty_split
from .models import per_sample_ce_numpy, train_classifier


@dataclass
class EvalReport:
    ua: float
    ra: float
    ta: float
    mia: float
    tow: float = 100.0
    avg_gap: float = 0.0
    rte_minutes: float = 0.0
    gaps: tuple = (0.0, 0.0, 0.0, 0.0)
    provenance: dict = field(default_factory=dict)

    METRIC_FIELDS = ("ua", "ra", "ta", "mia", "tow", "avg_gap", "gap_ua", "gap_ra", "gap_ta", "gap_mia")

    def metric_row(self):
        """Deterministic metrics only (no timings), for byte-stable CSVs."""
        row = {k: getattr(self, k) for k in ("ua", "ra", "ta", "mia", "tow", "avg_gap")}
        row.update(zip(("gap_ua", "gap_ra", "gap_ta", "gap_mia"), self.gaps))
        return row

    def to_json(self):
        d = asdict(self)
        d["gaps"] = list(self.gaps)
        return json.dumps(d, indent=2, sort_keys=True)

    def csv_row(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=[*self.METRIC_FIELDS, "rte_minutes"], lineterminator="\n")
        w.writeheader()
        w.writerow({**{k: repr(float(v)) for k, v in self.metric_row().items()},
                    "rte_minutes": repr(float(self.rte_minutes))})
        return buf.getvalue()


@dataclass
class DifficultyRecord:
    index: int
    loss_on_original: float
    forgotten: bool


def _predict(model, features):
    if callable(getattr(model, "logits", None)):
        return model.logits(features).argmax(1).numpy()
    with torch.no_grad():
        return np.asarray(model(torch.as_tensor(features)).argmax(1))


def accuracy(model, dataset, indices):
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ValueError("accuracy of an empty view")
    pred = _predict(model, dataset.features[indices])
    return 100.0 * float(np.mean(pred == dataset.labels[indices]))


def tow(acc_u, acc_r):
    """Tug-of-war: product over forget/retain/test of (1 - |accuracy gap| / 100), in percent."""
    prod = 1.0
    for a, b in zip(acc_u, acc_r):
        prod *= 1.0 - abs(float(a) - float(b)) / 100.0
    return 100.0 * prod


def tow_from_gaps(gaps):
    return tow(gaps, [0.0] * len(gaps))


def avg_gap(gaps):
    gaps = [abs(float(g)) for g in gaps]
    if len(gaps) != 4:
        raise ValueError("avg_gap takes the four gaps (UA, RA, TA, MIA)")
    return sum(gaps) / 4.0


# -------------------------------------------------------------------- MIA

@dataclass
class ThresholdAttack:
    threshold: float
    balanced_accuracy: float
    degenerate: bool

    def nonmember(self, losses):
        return np.asarray(losses) > self.threshold


def fit_threshold_attack(member_losses, nonmember_losses):
    """Single loss threshold maximising balanced accuracy; loss > threshold means non-member.

    Thresholds are chosen among observed losses (or -inf), so the attack
    only depends on the rank order of losses.
    """
    m = np.sort(np.asarray(member_losses, dtype=np.float64))
    n = np.sort(np.asarray(nonmember_losses, dtype=np.float64))
    if len(m) == 0 or len(n) == 0:
        raise ValueError("member and non-member losses must be non-empty")
    cands = np.concatenate([[-np.inf], np.unique(np.concatenate([m, n]))])
    tpr_member = np.searchsorted(m, cands, side="right") / len(m)
    tnr_nonmember = 1.0 - np.searchsorted(n, cands, side="right") / len(n)
    bal = 0.5 * (tpr_member + tnr_nonmember)
    best = int(np.argmax(bal))
    degenerate = bool(bal[best] <= 0.5 + 1e-12)
    return ThresholdAttack(float(cands[best]), float(bal[best]), degenerate)


def mia_from_losses(member_losses, nonmember_losses, forget_losses):
    """Percentage of forgetting examples the attack calls non-members (50 if the attack is degenerate)."""
    attack = fit_threshold_attack(member_losses, nonmember_losses)
    if attack.degenerate:
        return 50.0, attack
    forget_losses = np.asarray(forget_losses, dtype=np.float64)
    if len(forget_losses) == 0:
        raise ValueError("empty forgetting set")
    return 100.0 * float(np.mean(attack.nonmember(forget_losses))), attack


def mia_score(model_u, dataset, retain_indices, test_indices, forget_indices, with_attack=False):
    for name, v in (("retain", retain_indices), ("test", test_indices), ("forget", forget_indices)):
        if len(v) == 0:
            raise ValueError(f"empty {name} view")
    losses = [per_sample_ce_numpy(model_u, *dataset.view(v))
              for v in (retain_indices, test_indices, forget_indices)]
    score, attack = mia_from_losses(*losses)
    return (score, attack) if with_attack else score


# ---------------------------------------------------------------- reports

def classifier_metrics(model, dataset, split):
    return {
        "ua": accuracy(model, dataset, split.forget),
        "ra": accuracy(model, dataset, split.retain),
        "ta": accuracy(model, dataset, split.test),
        "mia": mia_score(model, dataset, split.retain, split.test, split.forget),
    }


def rte(run):
    """Unlearning wall time in minutes."""
    seconds = run if isinstance(run, (int, float)) else run.wall_seconds
    return float(seconds) / 60.0


def compare(metrics_u, metrics_r, rte_minutes=0.0, provenance=None):
    gaps = tuple(abs(metrics_u[k] - metrics_r[k]) for k in ("ua", "ra", "ta", "mia"))
    return EvalReport(
        ua=metrics_u["ua"], ra=metrics_u["ra"], ta=metrics_u["ta"], mia=metrics_u["mia"],
        tow=tow((metrics_u["ua"], metrics_u["ra"], metrics_u["ta"]),
                (metrics_r["ua"], metrics_r["ra"], metrics_r["ta"])),
        avg_gap=avg_gap(gaps), rte_minutes=rte_minutes, gaps=gaps, provenance=provenance or {},
    )


def evaluate_unlearned(model_u, model_r, dataset, split, run=None, retrain_metrics=None):
    mu = classifier_metrics(model_u, dataset, split)
    mr = retrain_metrics if retrain_metrics is not None else classifier_metrics(model_r, dataset, split)
    prov = {"model_digest": model_u.digest,
            "retrain_digest": model_r.digest if model_r is not None else None,
            "split_digest": split.digest}
    return compare(mu, mr, rte(run) if run is not None else 0.0, prov)


# ------------------------------------------------------------- generation

def generation_ua(sampler, forgotten_class, external_classifier, count, seed=0, guidance_scale=2.0):
    """Percentage of images generated for ``forgotten_class`` that the classifier assigns to it.

    ``sampler`` is a DiffusionCheckpoint or any ``f(class_id, count, seed) -> images``.
    """
    from .diffusion import DiffusionCheckpoint, sample_diffusion

    if count <= 0:
        raise ValueError("count must be positive")
    if isinstance(sampler, DiffusionCheckpoint):
        images = sample_diffusion(sampler, forgotten_class, count, guidance_scale, seed)
    else:
        images = sampler(forgotten_class, count, seed)
    pred = _predict(external_classifier, torch.as_tensor(np.asarray(images), dtype=torch.float32))
    return 100.0 * float(np.mean(pred == forgotten_class))


# -------------------------------------------------------------- difficulty

def difficulty_scatter(model_o, model_u, dataset, forget_indices):
    forget_indices = np.asarray(forget_indices, dtype=np.int64)
    losses = per_sample_ce_numpy(model_o, *dataset.view(forget_indices))
    pred = _predict(model_u, dataset.features[forget_indices])
    wrong = pred != dataset.labels[forget_indices]
    return [DifficultyRecord(int(i), float(l), bool(w)) for i, l, w in zip(forget_indices, losses, wrong)]


def loss_table_for(model_o, dataset, indices=None):
    """Original-model loss of every training example, as {index: loss}."""
    indices = dataset.train_indices if indices is None else np.asarray(indices)
    losses = per_sample_ce_numpy(model_o, *dataset.view(indices))
    return {int(i): float(l) for i, l in zip(indices, losses)}


def easy_hard_comparison(engine, model_o, dataset, loss_table, recipe, fraction, train_config,
                         retrain=None):
    """Run the same recipe on the top-loss (easy) and bottom-loss (hard) forgetting sets.

    ``engine(model_o, dataset, split, recipe) -> run``; ``retrain(split)``
    returns the reference model for a split and defaults to training
    ``train_config`` on its retain set. Returns ``{"easy": report, "hard": report}``.
    """
    out = {}
    for mode in ("easy", "hard"):
        split = make_difficulty_split(loss_table, fraction, mode, dataset=dataset)
        model_r = retrain(split) if retrain else train_classifier(dataset, split.retain, train_config)[0]
        run = engine(model_o, dataset, split, recipe)
        out[mode] = evaluate_unlearned(run.final, model_r, dataset, split, run)
    return out
