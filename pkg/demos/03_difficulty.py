# %% [markdown]
# # Which examples get forgotten?
#
# After a round of random-label unlearning, split the forgetting set into
# examples the model now misclassifies and examples it still gets right,
# and compare their losses under the original model.

# %%
import numpy as np
import torch
from scipy import stats

from loreun.datasets import make_difficulty_split, make_random_forget_split, make_synthetic_images
from loreun.engine import run_unlearning
from loreun.evaluation import difficulty_scatter, evaluate_unlearned, loss_table_for
from loreun.models import TrainConfig, train_classifier
from loreun.objectives import UnlearnRecipe

torch.set_num_threads(1)
ds = make_synthetic_images(seed=0)
model_o, _ = train_classifier(ds, ds.train_indices, TrainConfig(seed=0))
split = make_random_forget_split(ds, 0.1, seed=0)
recipe = UnlearnRecipe(method="RL", lr=0.01)
run = run_unlearning(model_o, ds, split, recipe)

recs = difficulty_scatter(model_o, run.final, ds, split.forget)
gone = np.array([r.loss_on_original for r in recs if r.forgotten])
kept = np.array([r.loss_on_original for r in recs if not r.forgotten])
print(f"forgotten: n={len(gone)} mean loss {gone.mean():.4f}")
print(f"kept:      n={len(kept)} mean loss {kept.mean():.4f}")
print("one-sided Welch p =", stats.ttest_ind(gone, kept, alternative="greater", equal_var=False).pvalue)

# %% [markdown]
# Low-loss examples resist forgetting. Build forgetting sets from the two
# ends of the loss ranking and unlearn each with the same recipe.

# %%
table = loss_table_for(model_o, ds)
for mode in ("easy", "hard"):
    sp = make_difficulty_split(table, 0.1, mode, dataset=ds)
    model_r, _ = train_classifier(ds, sp.retain, TrainConfig(seed=0))
    run = run_unlearning(model_o, ds, sp, recipe)
    rep = evaluate_unlearned(run.final, model_r, ds, sp, run)
    print(f"{mode}: UA {rep.ua:.1f}  Avg.G {rep.avg_gap:.2f}")
