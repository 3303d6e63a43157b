"""Long-format CSVs for the standard figures, read from a finished plan directory.

kinds:
  scatter    original-model loss of each forgetting example and whether it was forgotten
  easy-hard  metrics of recipes run on the difficulty-easy / difficulty-hard splits
  set-losses mean loss on the forget / retain / test sets for the original and each unlearned model
  ua-epoch   forgetting-set accuracy after every unlearning epoch
"""
import csv
import json
from pathlib import Path

import numpy as np

from .datasets import SplitSpec, load_dataset


def _ctx(root):
    root = Path(root)
    idx = json.loads((root / "index.json").read_text())["artifacts"]
    plan = json.loads((root / "plan.json").read_text())
    return root, idx, plan


def _dir(root, idx, label):
    return root / idx[label]["dir"]


def _selected(plan, recipes):
    rs = plan.get("recipes", [])
    return [r for r in rs if not recipes or r["name"] in recipes]


def _write(out, header, rows):
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return out


def scatter(root, out, recipes=None):
    root, idx, plan = _ctx(root)
    rows = []
    for r in _selected(plan, recipes):
        with open(_dir(root, idx, f"reports:{r['name']}") / "difficulty.csv") as f:
            rows += [(r["name"], rec["index"], rec["loss"], rec["forgotten"]) for rec in csv.DictReader(f)]
    return _write(out, ["recipe", "index", "loss", "forgotten"], rows)


def easy_hard(root, out, recipes=None):
    root, idx, plan = _ctx(root)
    modes = {s["name"]: s["mode"] for s in plan["splits"]}
    rows = []
    for r in _selected(plan, recipes):
        mode = modes[r["split"]]
        if not mode.startswith("difficulty"):
            continue
        with open(_dir(root, idx, f"reports:{r['name']}") / "metrics.csv") as f:
            m = next(csv.DictReader(f))
        rows.append((r["name"], r["method"], mode.split("-")[1], m["ua"], m["ra"], m["ta"], m["mia"],
                     m["tow"], m["avg_gap"]))
    return _write(out, ["recipe", "method", "difficulty", "ua", "ra", "ta", "mia", "tow", "avg_gap"], rows)


def set_losses(root, out, recipes=None):
    from .harness import load_checkpoint
    from .models import per_sample_ce_numpy

    root, idx, plan = _ctx(root)
    ds = load_dataset(plan["dataset"])
    model_o = load_checkpoint(_dir(root, idx, "pretrain:original") / "model.pt")
    rows = []
    for r in _selected(plan, recipes):
        split = SplitSpec.load(_dir(root, idx, f"splits:{r['split']}") / "split.json")
        model_u = load_checkpoint(_dir(root, idx, f"runs:{r['name']}") / "final.pt")
        for label, model in (("original", model_o), ("unlearned", model_u)):
            for name, v in (("forget", split.forget), ("retain", split.retain), ("test", split.test)):
                rows.append((r["name"], label, name, repr(float(np.mean(per_sample_ce_numpy(model, *ds.view(v)))))))
    return _write(out, ["recipe", "model", "set", "mean_loss"], rows)


def ua_epoch(root, out, recipes=None):
    root, idx, plan = _ctx(root)
    rows = []
    for r in _selected(plan, recipes):
        with open(_dir(root, idx, f"runs:{r['name']}") / "trajectory.csv") as f:
            rows += [(r["name"], t["epoch"], t["ua"]) for t in csv.DictReader(f)]
    return _write(out, ["recipe", "epoch", "ua"], rows)


EXPORTERS = {"scatter": scatter, "easy-hard": easy_hard, "set-losses": set_losses, "ua-epoch": ua_epoch}


def export(kind, root, out, recipes=None):
    return EXPORTERS[kind](root, out, recipes)
