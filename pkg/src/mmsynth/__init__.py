"""Multimodal (tabular + feature-image) latent diffusion synthesizer for
network-intrusion tables.

Typical use goes through :mod:`mmsynth.synth` (``train_per_class``,
``balance``) and :mod:`mmsynth.evalkit` (``evaluate_dataset``), or the
``mmsynth`` command line.
"""
from .dataio import FeatureSchema, Preprocessor, fit_preprocessor, load_csv, split
from .evalkit import MetricReport, evaluate_dataset
from .synth import ModelBundle, PipelineConfig, SyntheticDataset, balance, generate, train_per_class, train_pipeline

__version__ = "0.1.0"

__all__ = [
    "FeatureSchema", "Preprocessor", "fit_preprocessor", "load_csv", "split",
    "MetricReport", "evaluate_dataset",
    "ModelBundle", "PipelineConfig", "SyntheticDataset", "balance", "generate", "train_per_class", "train_pipeline",
]
