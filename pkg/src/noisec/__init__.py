"""Noise-based detection of adversarial and backdoor inputs.

A denoising autoencoder strips an input down to its reconstruction noise, the
target classifier embeds that noise, and an anomaly detector trained on benign
noise embeddings flags inputs whose noise carries attack structure.
"""

from .config import ExperimentConfig, load_config
from .experiment import load_data, run_experiment, train_models
from .pipeline import calibrate_threshold, detect, extract_noise_features, fit_detector

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "calibrate_threshold",
    "detect",
    "extract_noise_features",
    "fit_detector",
    "load_config",
    "load_data",
    "run_experiment",
    "train_models",
]
