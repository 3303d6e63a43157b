# %% [markdown]
# # Forgetting a class in a toy conditional DDPM
#
# 8x8 digits, T=200, classifier-free guidance. The weight for a diffusion
# example depends on the timestep, so losses are first divided by a
# reference curve m(t) (the original model's mean loss on the forgetting
# set at t), and timesteps are drawn with probability proportional to
# 1/m(t). m(t) is fitted from 50 examples x 10 timesteps.

# %%
import numpy as np
import torch

from loreun.datasets import load_digits_dataset, make_classwise_forget_split
from loreun.diffusion import DiffusionConfig, train_diffusion
from loreun.diffusion_eval import fit_reference_table
from loreun.engine import run_unlearning
from loreun.evaluation import generation_ua
from loreun.models import train_external_classifier
from loreun.objectives import UnlearnRecipe
from loreun.weighting import WeightingConfig

torch.set_num_threads(1)
ds = load_digits_dataset(seed=0)
model_o, _ = train_diffusion(ds, ds.train_indices, DiffusionConfig())
clf, _ = train_external_classifier(ds)
split = make_classwise_forget_split(ds, 3)
table = fit_reference_table(model_o, ds, split.forget, 50, 10, seed=0)
print("fitted a, b, c:", table.fit_params)
print("p(t) at t=1, 100, 200:", table.probabilities[[0, 99, 199]])

# %%
def ua_per_class(model):
    return np.array([generation_ua(model, c, clf, 50, seed=100 + c) for c in range(10)])

print("before", ua_per_class(model_o))
for variant in ("off", "dynamic"):
    recipe = UnlearnRecipe(method="SalUn", task="diffusion", lr=2e-3, epochs=40, batch_size=32,
                           optimizer="adam", weighting=WeightingConfig(1.0, variant))
    run = run_unlearning(model_o, ds, split, recipe, timestep_table=table)
    print(f"{variant:8s}", ua_per_class(run.final), f"{run.wall_seconds:.1f}s")
