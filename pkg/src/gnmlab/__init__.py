"""gnmlab: a desk-scale laboratory for Gaussian-neighborhood minimization.

Trains small classifiers on synthetic long-tailed data with SGD, SAM, or GNM
(one-pass Gaussian neighborhood minimization), under a two-stage deferred
re-weighting schedule, and slices the resulting loss landscapes.
"""

from gnmlab.autodiff import ParamSet, Tensor, backward, finite_diff_gradient
from gnmlab.config import RunConfig, parse_config
from gnmlab.data import LongTailSpec, longtail_counts, split_classes, synth_dataset
from gnmlab.estimator import GNMClassifier
from gnmlab.harness import RunReport, compare_runs, run_experiment

__version__ = "0.1.0"

__all__ = [
    "GNMClassifier",
    "LongTailSpec",
    "ParamSet",
    "RunConfig",
    "RunReport",
    "Tensor",
    "backward",
    "compare_runs",
    "finite_diff_gradient",
    "longtail_counts",
    "parse_config",
    "run_experiment",
    "split_classes",
    "synth_dataset",
    "__version__",
]
