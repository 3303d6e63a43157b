"""``unlearn`` command line: individual stages plus whole-plan execution.

Exit codes: 0 success, 2 validation failure, 3 diverged run.
"""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import datasets as D
from .engine import UnlearningDiverged, run_unlearning
from .harness import PlanValidationError, StageFailed, load_checkpoint, run_plan, validate_plan
from .models import TrainingDiverged, TrainConfig, train_classifier, write_training_log

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3


def _json_arg(value):
    """Inline JSON or a path to a JSON file."""
    if value is None:
        return None
    p = Path(value)
    if p.exists():
        return json.loads(p.read_text())
    return json.loads(value)


def _dataset(value):
    spec = _json_arg(value) if value.lstrip().startswith("{") or value.endswith(".json") else {"kind": value}
    return D.load_dataset(spec)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_pretrain(a):
    ds = _dataset(a.dataset)
    cfg = _json_arg(a.config) or {}
    if a.seed is not None:
        cfg["seed"] = a.seed
    indices = ds.train_indices
    if a.split:
        indices = D.SplitSpec.load(a.split).retain
    out = Path(a.out)
    if a.task == "diffusion":
        from .diffusion import DiffusionConfig, train_diffusion
        ckpt, rows = train_diffusion(ds, indices, DiffusionConfig(**cfg))
    else:
        ckpt, rows = train_classifier(ds, indices, TrainConfig(**cfg))
    ckpt.save(out)
    write_training_log(rows, out.with_suffix(".log.csv"))
    print(ckpt.digest)


def cmd_split(a):
    ds = _dataset(a.dataset)
    if a.mode == "random":
        s = D.make_random_forget_split(ds, a.fraction, a.seed or 0)
    elif a.mode == "classwise":
        s = D.make_classwise_forget_split(ds, a.class_id)
    else:
        from .evaluation import loss_table_for
        table = loss_table_for(load_checkpoint(a.model), ds)
        s = D.make_difficulty_split(table, a.fraction, a.mode.split("-")[1], dataset=ds)
    s.save(a.out)
    print(f"{s.digest} forget={len(s.forget)} retain={len(s.retain)} test={len(s.test)}")


def cmd_table(a):
    ds = _dataset(a.dataset)
    model = load_checkpoint(a.model)
    split = D.SplitSpec.load(a.split)
    seed = a.seed or 0
    if a.kind == "exhaustive":
        from .diffusion_eval import build_reference_table_exhaustive
        table = build_reference_table_exhaustive(model, ds, split.forget, seed)
    elif a.kind == "fitted":
        from .diffusion_eval import fit_reference_table
        table = fit_reference_table(model, ds, split.forget, a.num_examples, a.num_timesteps, seed)
    else:
        from .weighting import build_static_table
        fn = None
        if getattr(model, "T", None):
            from .diffusion_eval import static_loss_fn, stratified_timesteps
            fn = static_loss_fn(stratified_timesteps(model.T, a.num_timesteps, np.random.default_rng(seed)), seed)
        table = build_static_table(model, ds, split.forget, a.tau, fn)
    table.save(a.out)


def cmd_run(a):
    from .diffusion_eval import TimestepLossTable
    from .objectives import UnlearnRecipe
    from .weighting import WeightTable, build_static_table

    ds = _dataset(a.dataset)
    model = load_checkpoint(a.model)
    split = D.SplitSpec.load(a.split)
    recipe = UnlearnRecipe.from_dict(_json_arg(a.recipe))
    if a.seed is not None:
        recipe.seed = a.seed
    wt = tt = None
    if a.table:
        first = Path(a.table).read_text().splitlines()[1]
        if first.startswith("t,"):
            tt = TimestepLossTable.load(a.table)
        else:
            t = WeightTable.load(a.table)
            wt = WeightTable(t.indices, t.reference_losses, recipe.weighting.tau, t.source_model_digest)
    elif recipe.weighting.variant == "static" and recipe.task == "classifier":
        wt = build_static_table(model, ds, split.forget, recipe.weighting.tau)
    run = run_unlearning(model, ds, split, recipe, weight_table=wt, timestep_table=tt,
                         snapshot_weights=a.snapshot_weights)
    run.save(a.out)
    print(run.final.digest)


def cmd_eval(a):
    from .evaluation import classifier_metrics, compare

    ds = _dataset(a.dataset)
    split = D.SplitSpec.load(a.split)
    model_u = load_checkpoint(a.model)
    mu = classifier_metrics(model_u, ds, split)
    mr = classifier_metrics(load_checkpoint(a.retrain), ds, split) if a.retrain else mu
    minutes = 0.0
    if a.run:
        rows = list(csv.DictReader(open(Path(a.run) / "trajectory.csv")))
        meta = json.loads((Path(a.run) / "run.json").read_text())
        minutes = ((float(rows[-1]["wall_seconds"]) if rows else 0.0) + meta["setup_seconds"]) / 60.0
    rep = compare(mu, mr, minutes, {"model_digest": model_u.digest, "split_digest": split.digest})
    text = rep.to_json()
    if a.out:
        Path(a.out).write_text(text)
    print(text)


def cmd_analyze(a):
    from .evaluation import difficulty_scatter

    ds = _dataset(a.dataset)
    split = D.SplitSpec.load(a.split)
    recs = difficulty_scatter(load_checkpoint(a.original), load_checkpoint(a.model), ds, split.forget)
    _write_rows(a.out, ["index", "loss", "forgotten"],
                [(r.index, repr(r.loss_on_original), int(r.forgotten)) for r in recs])
    lf = [r.loss_on_original for r in recs if r.forgotten]
    ln = [r.loss_on_original for r in recs if not r.forgotten]
    print(f"forgotten={len(lf)} mean_loss={np.mean(lf) if lf else float('nan'):.4f} "
          f"not_forgotten={len(ln)} mean_loss={np.mean(ln) if ln else float('nan'):.4f}")


def cmd_plan(a):
    plan = _json_arg(a.plan)
    diags = validate_plan(plan)
    if diags:
        for d in diags:
            print(d, file=sys.stderr)
        return EXIT_INVALID
    out = Path(a.out or plan.get("output_root", "runs"))
    state = out / "state.json"
    if state.exists() and not a.resume and json.loads(state.read_text()).get("status") == "failed":
        print(f"{out} holds a failed plan; pass --resume to continue it", file=sys.stderr)
        return EXIT_INVALID
    runner = run_plan(plan, out, seed=a.seed, jobs=a.jobs)
    print(f"computed={len(runner.computed)} skipped={len(runner.skipped)} -> {runner.out / 'index.json'}")
    return EXIT_OK


def cmd_plot_data(a):
    """Emit the CSV behind one of the standard figures from a finished plan directory."""
    from . import plotdata
    path = plotdata.export(a.kind, Path(a.input), Path(a.out), **({"recipes": a.recipes} if a.recipes else {}))
    print(path)


def build_parser():
    p = argparse.ArgumentParser(prog="unlearn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        s = sub.add_parser(name, help=help)
        s.set_defaults(fn=fn)
        return s

    s = add("pretrain", cmd_pretrain, "train an original (or, with --split, a retrain) model")
    s.add_argument("--dataset", required=True, help="dataset kind, inline JSON or a .json file")
    s.add_argument("--config", help="training config JSON (inline or file)")
    s.add_argument("--task", choices=["classifier", "diffusion"], default="classifier")
    s.add_argument("--split", help="train on this split's retain set")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)

    s = add("split", cmd_split, "build a forgetting split")
    s.add_argument("--dataset", required=True)
    s.add_argument("--mode", choices=D.SPLIT_MODES, default="random")
    s.add_argument("--fraction", type=float, default=0.1)
    s.add_argument("--class-id", type=int)
    s.add_argument("--model", help="original model (difficulty splits)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)

    s = add("table", cmd_table, "build a static weight table or a timestep reference table")
    s.add_argument("--dataset", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--kind", choices=["static-weights", "exhaustive", "fitted"], default="static-weights")
    s.add_argument("--tau", type=float, default=10.0)
    s.add_argument("--num-examples", type=int, default=50)
    s.add_argument("--num-timesteps", type=int, default=10)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)

    s = add("run", cmd_run, "run one unlearning recipe")
    s.add_argument("--dataset", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--recipe", required=True)
    s.add_argument("--table")
    s.add_argument("--snapshot-weights", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)

    s = add("eval", cmd_eval, "UA/RA/TA/MIA, gaps, ToW and Avg.G against a retrain model")
    s.add_argument("--dataset", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--retrain")
    s.add_argument("--split", required=True)
    s.add_argument("--run", help="run directory, for RTE")
    s.add_argument("--out")

    s = add("analyze", cmd_analyze, "original-model loss vs forgotten/not-forgotten")
    s.add_argument("--dataset", required=True)
    s.add_argument("--original", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--out", required=True)

    s = add("plan", cmd_plan, "validate and execute an experiment plan")
    s.add_argument("--plan", required=True)
    s.add_argument("--out")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--seed", type=int)

    s = add("plot-data", cmd_plot_data, "export figure data as CSV")
    s.add_argument("--kind", required=True, choices=["scatter", "easy-hard", "set-losses", "ua-epoch"])
    s.add_argument("--input", required=True, help="plan output directory")
    s.add_argument("--recipes", nargs="*")
    s.add_argument("--out", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        code = args.fn(args)
    except PlanValidationError as e:
        for d in e.diagnostics:
            print(d, file=sys.stderr)
        return EXIT_INVALID
    except (UnlearningDiverged, TrainingDiverged) as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except StageFailed as e:
        if isinstance(e.cause, (UnlearningDiverged, TrainingDiverged)):
            print(f"diverged: {e}", file=sys.stderr)
            return EXIT_DIVERGED
        raise
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
