# %% [markdown]
# # Loss-based weights
#
# Forgetting examples with a small loss under the original model are the
# hard ones to unlearn. LoReUn gives each example in a batch the weight
# exp(-loss / tau), normalised over the batch, so low-loss examples pull
# harder on the forgetting objective.

# %%
import numpy as np

from loreun.weighting import WeightTable, dynamic_batch_weights, weight_summary

losses = np.array([0.05, 0.3, 1.2, 4.0])
for tau in (0.5, 1.0, 10.0, 1e9):
    print(f"tau={tau:<8g}", np.round(dynamic_batch_weights(losses, tau), 4))

# %% [markdown]
# Small tau concentrates almost all the mass on the easiest-to-fit example,
# a huge tau gives back the uniform 1/B average of the plain objective.
# Adding a constant to every loss changes nothing:

# %%
print(np.allclose(dynamic_batch_weights(losses + 7.0, 1.0), dynamic_batch_weights(losses, 1.0)))

# %% [markdown]
# The static variant freezes the reference losses once, before unlearning.

# %%
table = WeightTable(indices=[10, 11, 12, 13], reference_losses=losses, tau=1.0)
print(table.batch_weights([12, 10]))
print(weight_summary(np.exp(-losses)))
