"""Conformal test of covariate shift.

Tests whether Y | X has the same law in a training and a testing
population, using weighted conformal p-values whose weights and scores
come from classifier-based density-ratio estimates.
"""

from .classifiers import (
    ClassifierKind,
    FitConfig,
    PrecomputedClassifier,
    ProbClassifier,
    expand_quadratic,
    fit_logistic,
    fit_mlp,
    fit_quadratic_logistic,
    fit_sparse_logistic,
    predict_proba,
)
from .conformal import (
    ConformalRun,
    Minibatch,
    median_p,
    normal_quantile,
    run_test,
    unweighted_pvalue,
    weighted_pvalue,
)
from .dataset import LabeledSample, Population, SplitPlan, default_k, load_csv, plan_split, write_csv
from .metrics import err_p, err_v, mce
from .models import Hypothesis, ModelSpec
from .ratio import RatioModel, clip_ratio, estimate_conditional_ratio, estimate_marginal_ratio, oracle_ratio
from .simulation import ExperimentReport, exponential_tilt_resample, generate, lambda_sweep, run_experiment

__version__ = "0.1.0"
