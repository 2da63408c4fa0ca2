"""trainbench: a statistically grounded model-development harness.

Hold-out and k-fold splitting with a sample-size procedure, hypothesis-test
based split selection, one-at-a-time parameter sweeps, layer-freezing and
augmentation selection, on a small numpy CNN.
"""

from .core import Dataset, Image, RngStream, SyntheticSpec, derive_rng, generate_synthetic, load_dataset
from .augment import AugmentSpec
from .model import Architecture, FreezeMask, ModelParams, init_model
from .train import TrainConfig, train_loop, evaluate
from .pipeline import Campaign, run_full_pipeline

__version__ = "0.1.0"

__all__ = [
    "AugmentSpec", "Architecture", "Campaign", "Dataset", "FreezeMask", "Image", "ModelParams", "RngStream",
    "SyntheticSpec", "TrainConfig", "derive_rng", "evaluate", "generate_synthetic", "init_model", "load_dataset",
    "run_full_pipeline", "train_loop",
]
