"""Few-shot tabular classification that stays fair under scarce support data.

A small reverse-mode autodiff core, tabular episode sampling, a fairness
adaptation loss built on a mutual-information term between a support set and
an auxiliary set, a gradient-keyed dictionary of auxiliary sets with a learned
selector, and an episodic meta-training engine.
"""

from .engine import TrainConfig, TrainState, evaluate, load_checkpoint, save_checkpoint, train

__all__ = ["TrainConfig", "TrainState", "evaluate", "load_checkpoint", "save_checkpoint", "train"]
__version__ = "0.1.0"
