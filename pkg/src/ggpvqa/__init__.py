"""Gradient-guided weight perturbation for a small numpy vision-language model.

Submodules:

* ``autodiff``   reverse-mode differentiation over float64 arrays
* ``optim``      AdamW and the linear warm-up schedule
* ``ggp``        moment-aligned weight perturbation around an optimizer step
* ``nn``         the image/text/fusion encoders, heads and answer decoder
* ``objectives`` contrastive, matching, masked-token and answer losses
* ``synthdata``  the shape-world corpus and VQA splits
* ``harness``    pre-training, fine-tuning, ablation and metrics files
"""
from .config import ExperimentConfig
from .ggp import PerturbationConfig, perturbed_training_step
from .nn import ModelConfig, MultiModalModel
from .optim import AdamW, WarmupSchedule

__version__ = "0.1.0"

__all__ = ["AdamW", "ExperimentConfig", "ModelConfig", "MultiModalModel", "PerturbationConfig",
           "WarmupSchedule", "perturbed_training_step", "__version__"]
