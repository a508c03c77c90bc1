"""Semi-supervised estimation of classifier performance from few labels and
many unlabeled classifier outputs."""

from .data import EvaluationDataset, ExampleRecord, load_dataset, validate_dataset
from .metrics import MetricKind, MetricReport, MetricRequest, estimate_metrics
from .mixture import FitConfig, FittedMixture, fit, posterior

__all__ = [
    "EvaluationDataset",
    "ExampleRecord",
    "FitConfig",
    "FittedMixture",
    "MetricKind",
    "MetricReport",
    "MetricRequest",
    "estimate_metrics",
    "fit",
    "load_dataset",
    "posterior",
    "validate_dataset",
]

__version__ = "0.1.0"
