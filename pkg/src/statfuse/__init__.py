"""Statistical fusion of semantic segmentation experts.

Bayes categorical fusion from confusion matrices, Dirichlet fusion with
regularised concentration fits, and averaging / certainty-weighted
baselines, plus calibration, evaluation and synthetic-data tooling.
"""

from statfuse.calibration import (
    RegularizationConfig,
    calibrate,
    fit_dirichlet_mle,
    fit_dirichlet_regularized,
    fit_model,
    grid_search,
)
from statfuse.core import ClassPrior, ClassSet, ExpertModel, FusionModel
from statfuse.errors import StatfuseError
from statfuse.fusion import fuse, fuse_average, fuse_bayes, fuse_dirichlet, fuse_variance
from statfuse.metrics import EvalReport, evaluate, evaluate_batch

__version__ = "0.1.0"

__all__ = [
    "ClassPrior",
    "ClassSet",
    "EvalReport",
    "ExpertModel",
    "FusionModel",
    "RegularizationConfig",
    "StatfuseError",
    "calibrate",
    "evaluate",
    "evaluate_batch",
    "fit_dirichlet_mle",
    "fit_dirichlet_regularized",
    "fit_model",
    "fuse",
    "fuse_average",
    "fuse_bayes",
    "fuse_dirichlet",
    "fuse_variance",
    "grid_search",
]
