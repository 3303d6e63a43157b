"""Acceptance checks at desk scale. Each test records one pass/fail line shown in the run summary."""
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from loreun.datasets import (make_classwise_forget_split, make_difficulty_split, make_random_forget_split,
                             make_synthetic_images)
from loreun.diffusion import DiffusionCheckpoint
from loreun.diffusion_eval import (TimestepLossTable, build_reference_table_exhaustive, estimated_eval_loss,
                                   exp_curve, fit_exponential, fit_reference_table, sample_timestep)
from loreun.diffusion import to_model_space
from loreun.engine import run_unlearning
from loreun.evaluation import (avg_gap, classifier_metrics, difficulty_scatter, evaluate_unlearned, generation_ua,
                               loss_table_for, tow_from_gaps)
from loreun.harness import run_plan
from loreun.models import ClassifierCheckpoint, TrainConfig, parameter_vector, train_classifier
from loreun.objectives import UnlearnRecipe
from loreun.weighting import WeightingConfig, dynamic_batch_weights

SEEDS = (0, 1, 2)


# ------------------------------------------------------------------ shared models

@pytest.fixture(scope="module")
def bench():
    """5k-train CIFAR-shaped synthetic benchmark with one original model per seed."""
    ds = make_synthetic_images(seed=0)
    originals = {s: train_classifier(ds, ds.train_indices, TrainConfig(seed=s))[0] for s in SEEDS}
    return ds, originals


@pytest.fixture(scope="module")
def random_splits(bench):
    ds, originals = bench
    out = {}
    for s in SEEDS:
        sp = make_random_forget_split(ds, 0.1, s)
        out[s] = (sp, train_classifier(ds, sp.retain, TrainConfig(seed=s))[0])
    return out


def recipe(method, variant="off", tau=1.0, **kw):
    return UnlearnRecipe(method=method, weighting=WeightingConfig(tau, variant), **kw)


# ------------------------------------------------------------------ 1

def test_c1_metric_arithmetic(criterion):
    t = tow_from_gaps([0.14, 0.25, 0.50])
    g = avg_gap([0.14, 0.25, 0.50, 4.29])
    z = tow_from_gaps([0.0, 0.0, 0.0])
    ok = 99.11 <= t <= 99.13 and 1.29 <= g <= 1.30 and z == 100.0
    criterion(1, ok, f"tow={t:.4f} avg_gap={g:.4f} tow(0)={z:.2f}")
    assert ok


# ------------------------------------------------------------------ 2

losses = st.lists(st.floats(-50, 50), min_size=1, max_size=64)
taus = st.floats(0.05, 100)


@settings(max_examples=300, deadline=None)
@given(losses, taus, st.floats(-100, 100))
def _weighting_laws(ls, tau, shift):
    x = np.array(ls)
    w = dynamic_batch_weights(x, tau)
    assert abs(w.sum() - 1) < 1e-9
    np.testing.assert_allclose(dynamic_batch_weights(x + shift, tau), w, rtol=1e-9, atol=1e-300)
    # strict order needs a gap float64 can resolve and a ratio above the weight floor
    if 1e-12 < np.ptp(x) / tau < 60:
        i, j = np.argmax(x), np.argmin(x)
        assert w[i] < w[j]
    np.testing.assert_allclose(dynamic_batch_weights(x, 1e9), 1 / len(x), atol=1e-6)
    assert dynamic_batch_weights(x[:1], tau)[0] == 1.0


def test_c2_weighting_laws(criterion):
    try:
        _weighting_laws()
        ok, detail = True, "normalization, inversion, shift covariance, uniform limit, singleton batch"
    except AssertionError as e:
        ok, detail = False, str(e).splitlines()[0]
    criterion(2, ok, detail)
    assert ok


# ------------------------------------------------------------------ 3

def test_c3_baseline_recovery(criterion, small_classifier, small_images):
    sp = make_random_forget_split(small_images, 0.1, 0)
    dists = {}
    for method, lr in (("RL", 0.01), ("GAR", 0.005)):
        a = run_unlearning(small_classifier, small_images, sp, recipe(method, "off", epochs=1, lr=lr)).final
        b = run_unlearning(small_classifier, small_images, sp, recipe(method, "dynamic", 1e9, epochs=1, lr=lr)).final
        va, vb = parameter_vector(a.model), parameter_vector(b.model)
        dists[method] = float((va - vb).norm() / va.norm())
    gar = run_unlearning(small_classifier, small_images, sp, recipe("GAR", epochs=2, lr=0.005))
    garm = run_unlearning(small_classifier, small_images, sp, recipe("GAR-m", epochs=2, lr=0.005, mask_fraction=1.0))
    same = torch.equal(parameter_vector(gar.final.model), parameter_vector(garm.final.model)) and \
        gar.trajectory[-1]["forget_loss_mean"] == garm.trajectory[-1]["forget_loss_mean"]
    ok = max(dists.values()) < 1e-5 and same
    criterion(3, ok, f"rel L2 RL={dists['RL']:.2e} GAR={dists['GAR']:.2e}; GAR-m(1.0)==GAR: {same}")
    assert ok


# ------------------------------------------------------------------ 4

def test_c4_difficulty_loss_correlation(criterion, bench, random_splits):
    ds, originals = bench
    pvals, diffs = [], []
    for s in SEEDS:
        sp, _ = random_splits[s]
        run = run_unlearning(originals[s], ds, sp, recipe("RL", lr=0.01, seed=s))
        recs = difficulty_scatter(originals[s], run.final, ds, sp.forget)
        a = np.array([r.loss_on_original for r in recs if r.forgotten])
        b = np.array([r.loss_on_original for r in recs if not r.forgotten])
        pvals.append(stats.ttest_ind(a, b, alternative="greater", equal_var=False).pvalue)
        diffs.append(a.mean() - b.mean())
    ok = float(np.mean(pvals)) < 0.05
    criterion(4, ok, f"mean p={np.mean(pvals):.2e} per-seed p={[f'{p:.1e}' for p in pvals]} "
                     f"mean-loss diff={np.round(diffs, 4).tolist()}")
    assert ok


# ------------------------------------------------------------------ 5

def test_c5_easy_vs_hard(criterion, bench):
    ds, originals = bench
    gaps = []
    for s in SEEDS:
        table = loss_table_for(originals[s], ds)
        ag = {}
        for mode in ("easy", "hard"):
            sp = make_difficulty_split(table, 0.1, mode, dataset=ds)
            model_r = train_classifier(ds, sp.retain, TrainConfig(seed=s))[0]
            run = run_unlearning(originals[s], ds, sp, recipe("RL", lr=0.01, seed=s))
            ag[mode] = evaluate_unlearned(run.final, model_r, ds, sp, run).avg_gap
        gaps.append((ag["easy"], ag["hard"]))
    wins = sum(h > e for e, h in gaps)
    ok = wins >= 2
    criterion(5, ok, f"hard > easy Avg.G in {wins}/3 seeds; (easy, hard)={[(round(e, 2), round(h, 2)) for e, h in gaps]}")
    assert ok


# ------------------------------------------------------------------ 6

def test_c6_loreun_tradeoff(criterion, bench, random_splits):
    ds, originals = bench
    tow_pairs = []
    for s in SEEDS:
        sp, model_r = random_splits[s]
        mr = classifier_metrics(model_r, ds, sp)
        tw = {}
        for variant in ("off", "dynamic"):
            r = recipe("GAR", variant, 10.0, lr=0.06, epochs=10, batch_size=256, seed=s)
            run = run_unlearning(originals[s], ds, sp, r)
            tw[variant] = evaluate_unlearned(run.final, model_r, ds, sp, run, retrain_metrics=mr).tow
        tow_pairs.append((tw["off"], tw["dynamic"]))
    gar_wins = sum(d >= o for o, d in tow_pairs)

    cw = make_classwise_forget_split(ds, 3)
    rl_wins, curves = 0, []
    for s in SEEDS:
        ua = {}
        for variant in ("off", "dynamic"):
            run = run_unlearning(originals[s], ds, cw, recipe("RL", variant, 50.0, lr=0.01, seed=s))
            ua[variant] = [t["ua"] for t in run.trajectory]
        rl_wins += all(d <= o for o, d in zip(ua["off"][1:], ua["dynamic"][1:]))
        curves.append((ua["off"][1], ua["dynamic"][1], ua["off"][-1], ua["dynamic"][-1]))
    ok = gar_wins >= 2 and rl_wins >= 2
    criterion(6, ok, f"GAR ToW dyn>=off in {gar_wins}/3 {[(round(o, 2), round(d, 2)) for o, d in tow_pairs]}; "
                     f"RL class-wise UA dyn<=off every epoch>=2 in {rl_wins}/3")
    assert ok


# ------------------------------------------------------------------ 7

def test_c7_estimator_properties(criterion, digits):
    from loreun.diffusion import DiffusionConfig, init_diffusion

    ck = init_diffusion(DiffusionConfig(T=20, base=8, seed=2), 1, 8, 10)
    idx = digits.train_indices[:1]
    table = build_reference_table_exhaustive(ck, digits, idx, noise_seed=5)
    x, y = to_model_space(digits.features[idx]), torch.from_numpy(digits.labels[idx])
    gen = torch.Generator().manual_seed(5)
    est = [estimated_eval_loss(ck, x, y, torch.tensor([t]), torch.randn(x.shape, generator=gen), table).item()
           for t in range(1, 21)]
    spread = float(np.ptp(est))

    curve = TimestepLossTable(200, exp_curve(np.arange(1, 201), 3.0, -0.02, 0.2))
    draws = np.asarray(sample_timestep(curve, np.random.default_rng(0), 100_000))
    pval = stats.chisquare(np.bincount(draws - 1, minlength=200), 100_000 * curve.probabilities).pvalue

    true = np.array([2.0, -0.03, 0.1])
    t = np.arange(1, 201, dtype=float)
    worst = 0.0
    for seed in range(20):
        m = exp_curve(t, *true) * (1 + 0.01 * np.random.default_rng(seed).standard_normal(200))
        worst = max(worst, float(np.max(np.abs(np.array(fit_exponential(t, m, 200)) / true - 1))))
    ok = spread < 1e-9 and pval > 0.01 and worst < 0.10
    criterion("7a", ok, f"zero-variance spread={spread:.1e}; chi-square p={pval:.3f}; "
                        f"synthetic (a,b,c) worst rel err={worst:.3f}")
    assert ok


@pytest.mark.xfail(strict=True, reason="the trained toy DDPM's loss curve is not a 3-parameter exponential")
def test_c7_fitted_matches_exhaustive(criterion, digits, trained_ddpm):
    sp = make_random_forget_split(digits, 200 / len(digits.train_indices), 0)
    forget = sp.forget[:200]
    ex = build_reference_table_exhaustive(trained_ddpm, digits, forget, 0)
    fit = fit_reference_table(trained_ddpm, digits, forget, 50, 10, 1)
    rel = np.abs(fit.mean_loss / ex.mean_loss - 1)
    ok = len(forget) == 200 and trained_ddpm.T == 200 and rel.max() <= 0.15
    criterion("7b", ok, f"fitted vs exhaustive max pointwise rel err={rel.max():.3f} at t={np.argmax(rel) + 1} "
                        f"(median {np.median(rel):.3f}); fit={fit.fit_params}")
    assert ok


# ------------------------------------------------------------------ 8

@pytest.mark.slow
def test_c8_toy_diffusion_forgetting(criterion, digits, trained_ddpm, digit_classifier):
    forgotten, count = 3, 50
    sp = make_classwise_forget_split(digits, forgotten)
    table = fit_reference_table(trained_ddpm, digits, sp.forget, 50, 10, 0)

    def gen_ua(model):
        return np.array([generation_ua(model, c, digit_classifier, count, seed=100 + c) for c in range(10)])

    before = gen_ua(trained_ddpm)
    runs = {}
    for variant in ("dynamic", "off"):
        r = UnlearnRecipe(method="SalUn", task="diffusion", lr=2e-3, epochs=40, batch_size=32,
                          weighting=WeightingConfig(1.0, variant), optimizer="adam")
        # best of two timings; the trained weights are identical across repeats
        reps = [run_unlearning(trained_ddpm, digits, sp, r, timestep_table=table) for _ in range(2)]
        runs[variant] = (reps[0].final, min(x.wall_seconds for x in reps))
    after = gen_ua(runs["dynamic"][0])
    keep = np.arange(10) != forgotten
    ratio = after[keep] / np.maximum(before[keep], 1e-9)
    rte = runs["dynamic"][1] / runs["off"][1]
    ok = after[forgotten] < 10 and np.all(ratio >= 0.9) and rte <= 1.15
    criterion(8, ok, f"forgotten UA {before[forgotten]:.0f}->{after[forgotten]:.0f}; retained min ratio "
                     f"{ratio.min():.2f}; RTE ratio {rte:.3f} ({runs['dynamic'][1]:.1f}s vs {runs['off'][1]:.1f}s)")
    assert ok


# ------------------------------------------------------------------ 9

def test_c9_determinism_and_persistence(criterion, tmp_path, small_classifier, trained_ddpm):
    plan = {"seed": 0, "dataset": {"kind": "synthetic", "n_train": 600, "n_test": 200, "size": 8, "seed": 1},
            "splits": [{"name": "r", "mode": "random", "fraction": 0.1}], "pretrain": {"epochs": 2},
            "retrain": True,
            "recipes": [{"name": "rl", "split": "r", "method": "RL", "epochs": 2, "lr": 0.01,
                         "weighting": {"variant": "dynamic"}},
                        {"name": "gar", "split": "r", "method": "GAR", "epochs": 2, "lr": 0.01,
                         "weighting": {"variant": "static"}}]}
    run_plan(plan, tmp_path / "a")
    run_plan(plan, tmp_path / "b")
    same_csv = (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    rerun = run_plan(plan, tmp_path / "a")

    small_classifier.save(tmp_path / "c.pt")
    trained_ddpm.save(tmp_path / "d.pt")
    c2 = ClassifierCheckpoint.load(tmp_path / "c.pt")
    d2 = DiffusionCheckpoint.load(tmp_path / "d.pt")
    exact = all(torch.equal(a, b) for a, b in zip(small_classifier.model.state_dict().values(),
                                                 c2.model.state_dict().values())) and \
        all(torch.equal(a, b) for a, b in zip(trained_ddpm.model.state_dict().values(),
                                             d2.model.state_dict().values())) and \
        c2.digest == small_classifier.digest and d2.digest == trained_ddpm.digest
    ok = same_csv and rerun.computed == [] and exact
    criterion(9, ok, f"identical metrics.csv: {same_csv}; rerun recomputed {len(rerun.computed)} stages "
                     f"(skipped {len(rerun.skipped)}); bit-exact checkpoints: {exact}")
    assert ok
