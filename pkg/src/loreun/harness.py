"""Config-driven experiment plans: pretrain -> split -> retrain -> tables -> unlearn -> evaluate.

Every stage output lives in a directory named by a digest of the stage's
config and input digests. A stage whose directory already holds a
``done.json`` with matching file hashes is loaded instead of recomputed,
so rerunning a finished plan is free and a failed plan resumes where it
stopped.

Seeds: every stage seed is ``derive_seed(global_seed, *labels)``, i.e. the
first word of ``numpy.random.SeedSequence(global_seed, spawn_key=crc32(labels))``.
Pretraining and every Retrain share ``derive_seed(g, "train")``.
"""
import copy
import csv
import hashlib
import json
import logging
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import datasets as D
from .diffusion import DiffusionCheckpoint, DiffusionConfig, train_diffusion
from .diffusion_eval import (TimestepLossTable, build_reference_table_exhaustive, fit_reference_table,
                             static_loss_fn)
from .engine import UnlearningDiverged, run_unlearning
from .evaluation import classifier_metrics, compare, difficulty_scatter, generation_ua, loss_table_for
from .models import (ClassifierCheckpoint, TrainConfig, digest_of, train_classifier,
                     train_external_classifier, write_training_log)
from .objectives import METHODS, UnlearnRecipe
from .weighting import VARIANTS, WeightingConfig, WeightTable, build_static_table, default_tau

log = logging.getLogger(__name__)

TABLE_KINDS = ("exhaustive", "fitted", "static-weights")


class PlanValidationError(ValueError):
    def __init__(self, diagnostics):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


class StageFailed(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


def derive_seed(global_seed, *labels):
    key = [zlib.crc32(str(label).encode()) for label in labels]
    return int(np.random.SeedSequence(int(global_seed), spawn_key=key).generate_state(1)[0])


def load_checkpoint(path):
    meta = json.loads(Path(path).with_suffix(".json").read_text())
    if meta.get("kind") == "diffusion":
        return DiffusionCheckpoint.load(path)
    return ClassifierCheckpoint.load(path)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------- validation

def _recipe_fields(r):
    return {k: v for k, v in r.items() if k not in ("name", "split", "table")}


def validate_plan(plan):
    """Return a list of ``"field.path: problem"`` strings; empty means runnable."""
    diags = []
    if not isinstance(plan, dict):
        return ["plan: must be a JSON object"]
    task = plan.get("task", "classifier")
    if task not in ("classifier", "diffusion"):
        diags.append(f"task: unknown task {task!r}")
    if not isinstance(plan.get("seed", 0), int):
        diags.append("seed: must be an integer")
    ds = plan.get("dataset")
    if not isinstance(ds, dict) or "kind" not in ds:
        diags.append("dataset.kind: missing")
    elif ds["kind"] not in ("synthetic", "digits", "cifar10", "dir", "toy"):
        diags.append(f"dataset.kind: unknown dataset kind {ds['kind']!r}")

    splits = plan.get("splits", [])
    names = set()
    for i, s in enumerate(splits):
        p = f"splits[{i}]"
        name = s.get("name")
        if not name:
            diags.append(f"{p}.name: missing")
        elif name in names:
            diags.append(f"{p}.name: duplicate split name {name!r}")
        names.add(name)
        mode = s.get("mode")
        if mode not in D.SPLIT_MODES:
            diags.append(f"{p}.mode: must be one of {D.SPLIT_MODES}")
        if mode in ("random", "difficulty-easy", "difficulty-hard"):
            f = s.get("fraction")
            if not isinstance(f, (int, float)) or not 0 < f < 1:
                diags.append(f"{p}.fraction: must be in (0, 1)")
        if mode == "classwise" and not isinstance(s.get("class_id"), int):
            diags.append(f"{p}.class_id: must be an integer")
        if mode and mode.startswith("difficulty") and task != "classifier":
            diags.append(f"{p}.mode: difficulty splits need a classifier task")
    if not splits:
        diags.append("splits: at least one split is required")

    pre = plan.get("pretrain", {})
    known = set((TrainConfig if task == "classifier" else DiffusionConfig).__dataclass_fields__)
    for k in pre:
        if k not in known:
            diags.append(f"pretrain.{k}: unknown field")
    if isinstance(pre.get("epochs", 1), int) and pre.get("epochs", 1) < 0:
        diags.append("pretrain.epochs: must be >= 0")

    tables = {}
    for i, t in enumerate(plan.get("tables", [])):
        p = f"tables[{i}]"
        if t.get("kind") not in TABLE_KINDS:
            diags.append(f"{p}.kind: must be one of {TABLE_KINDS}")
        if t.get("split") not in names:
            diags.append(f"{p}.split: unknown split {t.get('split')!r}")
        if t.get("kind") in ("exhaustive", "fitted") and task != "diffusion":
            diags.append(f"{p}.kind: timestep tables only apply to diffusion plans")
        if not t.get("name"):
            diags.append(f"{p}.name: missing")
        tables[t.get("name")] = t

    recipe_names = set()
    for i, r in enumerate(plan.get("recipes", [])):
        p = f"recipes[{i}]"
        if not r.get("name"):
            diags.append(f"{p}.name: missing")
        elif r["name"] in recipe_names:
            diags.append(f"{p}.name: duplicate recipe name")
        recipe_names.add(r.get("name"))
        if r.get("split") not in names:
            diags.append(f"{p}.split: unknown split {r.get('split')!r}")
        if r.get("method") not in METHODS:
            diags.append(f"{p}.method: must be one of {METHODS}")
        if r.get("task", task) != task:
            diags.append(f"{p}.task: recipe task differs from plan task {task!r}")
        w = r.get("weighting", {})
        tau = w.get("tau", 1.0)
        if not isinstance(tau, (int, float)) or not tau > 0:
            diags.append(f"{p}.weighting.tau: must be > 0, got {tau!r}")
        variant = w.get("variant", "off")
        if variant not in VARIANTS:
            diags.append(f"{p}.weighting.variant: must be one of {VARIANTS}")
        mf = r.get("mask_fraction", 0.5)
        if not isinstance(mf, (int, float)) or not 0 < mf <= 1:
            diags.append(f"{p}.mask_fraction: must be in (0, 1]")
        for k in ("epochs", "batch_size"):
            v = r.get(k, 1)
            if not isinstance(v, int) or v < (0 if k == "epochs" else 1):
                diags.append(f"{p}.{k}: invalid value {v!r}")
        lr = r.get("lr", 0.01)
        if not isinstance(lr, (int, float)) or not lr > 0:
            diags.append(f"{p}.lr: must be > 0")
        if task == "diffusion" and variant in ("static", "dynamic"):
            need = "static-weights" if variant == "static" else ("exhaustive", "fitted")
            t = tables.get(r.get("table"))
            if t is None:
                diags.append(f"{p}.table: {variant} diffusion recipe needs a table stage")
            elif (t.get("kind") not in need) if isinstance(need, tuple) else t.get("kind") != need:
                diags.append(f"{p}.table: {variant} weighting needs a {need} table, got {t.get('kind')!r}")
            elif t.get("split") != r.get("split"):
                diags.append(f"{p}.table: table built on a different split")
        elif r.get("table") is not None and r.get("table") not in tables:
            diags.append(f"{p}.table: unknown table {r.get('table')!r}")
    return diags


# ----------------------------------------------------------------- runner

class PlanRunner:
    def __init__(self, plan, out_dir=None, seed=None):
        self.plan = copy.deepcopy(plan)
        if seed is not None:
            self.plan["seed"] = int(seed)
        self.seed = int(self.plan.get("seed", 0))
        self.task = self.plan.get("task", "classifier")
        self.out = Path(out_dir or self.plan.get("output_root", "runs"))
        self.index = {}
        self.computed = []
        self.skipped = []
        self._cache = {}

    # -- bookkeeping
    @property
    def plan_digest(self):
        return digest_of(self.plan)

    def _stage(self, kind, name, config, inputs, compute, files):
        """Load-or-compute one stage. ``compute(dir)`` writes ``files`` into ``dir``."""
        key = digest_of({"kind": kind, "config": config, "inputs": inputs})
        d = self.out / kind / f"{name}-{key}"
        done = d / "done.json"
        label = f"{kind}:{name}"
        if done.exists():
            rec = json.loads(done.read_text())
            if all((d / f).exists() and sha256_file(d / f) == h for f, h in rec["files"].items()):
                self.skipped.append(label)
                self._record(label, key, d, rec["files"])
                return d, key
        d.mkdir(parents=True, exist_ok=True)
        self._write_state("running", current=label)
        try:
            compute(d)
        except UnlearningDiverged:
            raise
        except Exception as e:  # noqa: BLE001
            raise StageFailed(label, e) from e
        hashes = {f: sha256_file(d / f) for f in files}
        done.write_text(json.dumps({"files": hashes, "key": key}, indent=1))
        self.computed.append(label)
        self._record(label, key, d, hashes)
        return d, key

    def _record(self, label, key, d, hashes):
        self.index[label] = {"key": key, "dir": str(d.relative_to(self.out)),
                             "files": {f: h for f, h in hashes.items()}}

    def _write_state(self, status, **extra):
        state = {"status": status, "plan_digest": self.plan_digest,
                 "completed": sorted(set(self.computed) | set(self.skipped)), **extra}
        (self.out / "state.json").write_text(json.dumps(state, indent=1, default=str))

    def write_index(self):
        idx = {"plan_digest": self.plan_digest, "seed": self.seed, "artifacts": self.index}
        (self.out / "index.json").write_text(json.dumps(idx, indent=1, sort_keys=True))
        (self.out / "plan.json").write_text(json.dumps(self.plan, indent=1, sort_keys=True))

    # -- stages
    def dataset(self):
        if "dataset" not in self._cache:
            self._cache["dataset"] = D.load_dataset(self.plan["dataset"])
        return self._cache["dataset"]

    def train_seed(self):
        return derive_seed(self.seed, "train")

    def _train_config(self):
        cfg = dict(self.plan.get("pretrain", {}))
        cfg["seed"] = self.train_seed()
        return TrainConfig(**cfg) if self.task == "classifier" else DiffusionConfig(**cfg)

    def _train(self, indices, d):
        ds = self.dataset()
        cfg = self._train_config()
        if self.task == "classifier":
            ckpt, rows = train_classifier(ds, indices, cfg)
        else:
            ckpt, rows = train_diffusion(ds, indices, cfg)
        ckpt.save(d / "model.pt")
        write_training_log(rows, d / "train_log.csv")

    def pretrain(self):
        if "pretrain" in self._cache:
            return self._cache["pretrain"]
        ds = self.dataset()
        cfg = self._train_config()
        d, key = self._stage("pretrain", "original", {"cfg": vars(cfg), "task": self.task}, [ds.digest],
                             lambda d: self._train(ds.train_indices, d), ["model.pt", "model.json"])
        ckpt = load_checkpoint(d / "model.pt")
        self._cache["pretrain"] = (ckpt, key)
        return ckpt, key

    def split(self, name):
        ck = ("split", name)
        if ck in self._cache:
            return self._cache[ck]
        spec = next(s for s in self.plan["splits"] if s["name"] == name)
        ds = self.dataset()
        inputs = [ds.digest]
        if spec["mode"].startswith("difficulty"):
            inputs.append(self.pretrain()[1])
        seed = spec.get("seed", derive_seed(self.seed, "split", name))

        def compute(d):
            mode = spec["mode"]
            if mode == "random":
                s = D.make_random_forget_split(ds, spec["fraction"], seed)
            elif mode == "classwise":
                s = D.make_classwise_forget_split(ds, spec["class_id"])
            else:
                table = loss_table_for(self.pretrain()[0], ds)
                s = D.make_difficulty_split(table, spec["fraction"], mode.split("-")[1], dataset=ds)
            s.save(d / "split.json")

        d, key = self._stage("splits", name, {**spec, "seed": seed}, inputs, compute, ["split.json"])
        out = (D.SplitSpec.load(d / "split.json"), key)
        self._cache[ck] = out
        return out

    def retrain(self, split_name):
        ck = ("retrain", split_name)
        if ck in self._cache:
            return self._cache[ck]
        split, skey = self.split(split_name)
        cfg = self._train_config()
        d, key = self._stage("retrain", split_name, {"cfg": vars(cfg), "task": self.task},
                             [self.dataset().digest, skey],
                             lambda d: self._train(split.retain, d), ["model.pt", "model.json"])
        out = (load_checkpoint(d / "model.pt"), key)
        self._cache[ck] = out
        return out

    def table(self, name):
        ck = ("table", name)
        if ck in self._cache:
            return self._cache[ck]
        spec = next(t for t in self.plan.get("tables", []) if t["name"] == name)
        split, skey = self.split(spec["split"])
        model_o, okey = self.pretrain()
        ds = self.dataset()
        seed = spec.get("seed", derive_seed(self.seed, "table", name))
        kind = spec["kind"]

        def compute(d):
            if kind == "exhaustive":
                build_reference_table_exhaustive(model_o, ds, split.forget, seed).save(d / "table.csv")
            elif kind == "fitted":
                fit_reference_table(model_o, ds, split.forget, spec.get("num_examples", 50),
                                    spec.get("num_timesteps", 10), seed).save(d / "table.csv")
            else:
                fn = None
                if self.task == "diffusion":
                    from .diffusion_eval import stratified_timesteps
                    k = spec.get("num_timesteps")
                    ts = stratified_timesteps(model_o.T, k, np.random.default_rng(seed)) if k else None
                    fn = static_loss_fn(ts, seed)
                build_static_table(model_o, ds, split.forget, spec.get("tau", 10.0), fn).save(d / "table.csv")

        t0 = time.perf_counter()
        d, key = self._stage("tables", name, {**spec, "seed": seed}, [okey, skey], compute, ["table.csv"])
        path = d / "table.csv"
        table = TimestepLossTable.load(path) if kind != "static-weights" else WeightTable.load(path)
        out = (table, key, time.perf_counter() - t0)
        self._cache[ck] = out
        return out

    def external_classifier(self):
        if "external" in self._cache:
            return self._cache["external"]
        ds = self.dataset()
        ev = self.plan.get("evaluation", {})
        cfg = ev.get("external_classifier")

        def compute(d):
            c = TrainConfig(**cfg) if cfg else None
            ckpt, rows = train_external_classifier(ds, ds.train_indices, c)
            ckpt.save(d / "model.pt")

        d, key = self._stage("external", "classifier", cfg or {}, [ds.digest], compute, ["model.pt", "model.json"])
        out = (ClassifierCheckpoint.load(d / "model.pt"), key)
        self._cache["external"] = out
        return out

    def recipe(self, spec):
        fields = _recipe_fields(spec)
        fields.setdefault("task", self.task)
        fields.setdefault("seed", derive_seed(self.seed, "recipe", spec["name"]))
        w = dict(fields.get("weighting", {}))
        w.setdefault("tau", default_tau(fields.get("method", "GAR")))
        fields["weighting"] = WeightingConfig(**w)
        return UnlearnRecipe.from_dict(fields)

    def unlearn(self, spec):
        recipe = self.recipe(spec)
        split, skey = self.split(spec["split"])
        model_o, okey = self.pretrain()
        ds = self.dataset()
        inputs = [okey, skey]
        wt = tt = None
        if spec.get("table"):
            table, tkey, _ = self.table(spec["table"])
            inputs.append(tkey)
            if isinstance(table, WeightTable):
                wt = WeightTable(table.indices, table.reference_losses, recipe.weighting.tau,
                                 table.source_model_digest)
            else:
                tt = table
        if recipe.weighting.variant == "static" and wt is None and self.task == "classifier":
            wt = build_static_table(model_o, ds, split.forget, recipe.weighting.tau)

        def compute(d):
            run = run_unlearning(model_o, ds, split, recipe, weight_table=wt, timestep_table=tt,
                                 snapshot_weights=spec.get("snapshot_weights", False))
            run.save(d)

        d, key = self._stage("runs", spec["name"], recipe.to_dict(), inputs, compute,
                             ["recipe.json", "trajectory.csv", "final.pt", "final.json"])
        return d, key

    def report(self, spec):
        run_dir, rkey = self.unlearn(spec)
        split, skey = self.split(spec["split"])
        ds = self.dataset()
        ev = self.plan.get("evaluation", {})
        inputs = [rkey, skey]
        retrain = self.plan.get("retrain", True) and self.task == "classifier"
        if retrain:
            inputs.append(self.retrain(spec["split"])[1])

        def compute(d):
            model_u = load_checkpoint(run_dir / "final.pt")
            with open(run_dir / "trajectory.csv") as f:
                rows = list(csv.DictReader(f))
            run_meta = json.loads((run_dir / "run.json").read_text())
            seconds = (float(rows[-1]["wall_seconds"]) if rows else 0.0) + run_meta["setup_seconds"]
            if self.task == "classifier":
                mu = classifier_metrics(model_u, ds, split)
                if retrain:
                    model_r = self.retrain(spec["split"])[0]
                    mr = classifier_metrics(model_r, ds, split)
                    rdig = model_r.digest
                else:
                    mr, rdig = mu, None
                rep = compare(mu, mr, seconds / 60.0, {"model_digest": model_u.digest,
                                                       "retrain_digest": rdig, "split_digest": split.digest})
                metrics = rep.metric_row()
                (d / "report.json").write_text(rep.to_json())
                recs = difficulty_scatter(self.pretrain()[0], model_u, ds, split.forget)
                with open(d / "difficulty.csv", "w", newline="") as f:
                    w = csv.writer(f, lineterminator="\n")
                    w.writerow(["index", "loss", "forgotten"])
                    w.writerows((r.index, repr(r.loss_on_original), int(r.forgotten)) for r in recs)
            else:
                clf = self.external_classifier()[0]
                count = ev.get("generation_count", 100)
                scale = ev.get("guidance_scale", 2.0)
                forgotten = sorted(set(ds.labels[split.forget].tolist()))
                per_class = {}
                for c in range(ds.num_classes):
                    per_class[c] = generation_ua(model_u, c, clf, count, derive_seed(self.seed, "gen", c), scale)
                retained = [v for c, v in per_class.items() if c not in forgotten]
                metrics = {"forget_ua": float(np.mean([per_class[c] for c in forgotten])),
                           "retain_ua_mean": float(np.mean(retained)) if retained else math.nan,
                           **{f"ua_class_{c}": v for c, v in per_class.items()}}
                (d / "report.json").write_text(json.dumps({**metrics, "rte_minutes": seconds / 60.0}, indent=2))
            with open(d / "metrics.csv", "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(list(metrics))
                w.writerow([repr(float(v)) for v in metrics.values()])
            with open(d / "timing.csv", "w", newline="") as f:
                f.write(f"rte_minutes\n{seconds / 60.0!r}\n")

        files = ["report.json", "metrics.csv", "timing.csv"] + (["difficulty.csv"] if self.task == "classifier" else [])
        d, key = self._stage("reports", spec["name"], {"evaluation": ev, "retrain": retrain}, inputs,
                             compute, files)
        return d, key

    def run_recipe_stage(self, spec):
        d, _ = self.report(spec)
        return spec["name"], d

    def run(self, jobs=1):
        diags = validate_plan(self.plan)
        if diags:
            raise PlanValidationError(diags)
        self.out.mkdir(parents=True, exist_ok=True)
        self._write_state("running")
        try:
            self.pretrain()
            for s in self.plan["splits"]:
                self.split(s["name"])
            if self.plan.get("retrain", True) and self.task == "classifier":
                for name in sorted({r["split"] for r in self.plan.get("recipes", [])}):
                    self.retrain(name)
            for t in self.plan.get("tables", []):
                self.table(t["name"])
            if self.task == "diffusion" and self.plan.get("recipes"):
                self.external_classifier()
            recipes = self.plan.get("recipes", [])
            if jobs > 1 and len(recipes) > 1:
                with ProcessPoolExecutor(jobs) as ex:
                    futures = [ex.submit(_worker, self.plan, str(self.out), r) for r in recipes]
                    for fut in futures:
                        computed, skipped, index = fut.result()
                        self.computed += computed
                        self.skipped += skipped
                        self.index.update(index)
            else:
                for r in recipes:
                    self.run_recipe_stage(r)
            self._write_metrics_table()
        except UnlearningDiverged as e:
            self._write_state("failed", failed_stage="runs", error=str(e))
            self.write_index()
            raise
        except StageFailed as e:
            self._write_state("failed", failed_stage=e.stage, error=repr(e.cause))
            self.write_index()
            raise
        self._write_state("complete")
        self.write_index()
        return self.out

    def _write_metrics_table(self):
        rows = []
        for r in self.plan.get("recipes", []):
            label = f"reports:{r['name']}"
            d = self.out / self.index[label]["dir"]
            with open(d / "metrics.csv") as f:
                rec = next(csv.DictReader(f))
            rows.append({"recipe": r["name"], **rec})
        if not rows:
            return
        fields = list(dict.fromkeys(k for row in rows for k in row))
        with open(self.out / "metrics.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        self.index["summary:metrics"] = {"key": self.plan_digest, "dir": ".",
                                         "files": {"metrics.csv": sha256_file(self.out / "metrics.csv")}}


def _worker(plan, out, spec):
    import torch

    torch.set_num_threads(1)
    runner = PlanRunner(plan, out)
    runner.out.mkdir(parents=True, exist_ok=True)
    runner.run_recipe_stage(spec)
    return runner.computed, runner.skipped, runner.index


def run_plan(plan, out_dir=None, seed=None, jobs=1):
    """Execute a plan dict; returns the PlanRunner (``.out``, ``.computed``, ``.skipped``)."""
    runner = PlanRunner(plan, out_dir, seed)
    runner.run(jobs=jobs)
    return runner


def verify_index(out_dir):
    """Check every artifact listed in index.json against its recorded hash; returns mismatches."""
    out = Path(out_dir)
    idx = json.loads((out / "index.json").read_text())
    bad = []
    for label, rec in idx["artifacts"].items():
        for f, h in rec["files"].items():
            p = out / rec["dir"] / f
            if not p.exists() or sha256_file(p) != h:
                bad.append(f"{label}/{f}")
    return bad
