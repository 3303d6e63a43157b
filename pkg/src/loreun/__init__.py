"""Loss-based reweighting for machine unlearning (LoReUn) on classifiers and conditional DDPMs."""
from .weighting import WeightingConfig, WeightTable, dynamic_batch_weights
from .objectives import UnlearnRecipe
from .engine import run_unlearning
from .harness import run_plan

__version__ = "0.1.0"
