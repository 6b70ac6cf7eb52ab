"""Marginal and conditional density-ratio estimators built from classifiers.

Ratios are only identified up to a positive constant; nothing downstream
depends on that constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .classifiers import FitConfig, fit_classifier
from .dataset import LabeledSample
from .models import ModelSpec

CLIP_LO = 1.0 / 100.0
CLIP_HI = 100.0


def clip_ratio(value, lo: float = CLIP_LO, hi: float = CLIP_HI):
    if not (0 < lo < hi):
        raise ValueError("need 0 < lo < hi")
    out = np.minimum(hi, np.maximum(lo, value))
    return float(out) if np.ndim(out) == 0 else out


def _labels(n_train: int, n_test: int) -> np.ndarray:
    # class 1 is the training population
    return np.concatenate([np.ones(n_train), np.zeros(n_test)])


class MarginalRatio:
    """g_hat(x) = (1 - eta(x)) / eta(x) with eta = P(train | x)."""

    def __init__(self, classifier):
        self.classifier = classifier

    def __call__(self, x) -> np.ndarray:
        eta = self.classifier.predict_proba(x)
        return (1.0 - eta) / eta


class ConditionalRatio:
    """v_hat(x, y) = joint_ratio(x, y) * g_hat(x)."""

    def __init__(self, classifier, g_hat: Callable):
        self.classifier = classifier
        self.g_hat = g_hat

    def joint_ratio(self, x, y) -> np.ndarray:
        xy = np.column_stack([np.atleast_2d(x), np.asarray(y, dtype=float).reshape(-1)])
        eta = self.classifier.predict_proba(xy)
        return eta / (1.0 - eta)

    def __call__(self, x, y) -> np.ndarray:
        return self.joint_ratio(x, y) * self.g_hat(x)


def constant_one(x) -> np.ndarray:
    return np.ones(np.atleast_2d(x).shape[0])


def estimate_marginal_ratio(fit_train: LabeledSample, fit_test: LabeledSample, classifier_kind, config=FitConfig()):
    """Fit a train-vs-test classifier on covariates only; returns (g_hat, classifier)."""
    x = np.vstack([fit_train.features, fit_test.features])
    clf = fit_classifier(classifier_kind, x, _labels(fit_train.n, fit_test.n), config)
    return MarginalRatio(clf), clf


def estimate_conditional_ratio(
    fit_train: LabeledSample, fit_test: LabeledSample, classifier_kind, config=FitConfig(), g_hat=None
) -> ConditionalRatio:
    """Fit a train-vs-test classifier on (x, y) and divide out the marginal part."""
    xy = np.vstack([fit_train.joint(), fit_test.joint()])
    clf = fit_classifier(classifier_kind, xy, _labels(fit_train.n, fit_test.n), config)
    return ConditionalRatio(clf, constant_one if g_hat is None else g_hat)


@dataclass(frozen=True)
class RatioModel:
    g_hat: Callable
    v_hat: Callable
    provenance: str
    marginal_classifier: object = None
    joint_classifier: object = None


def estimate_ratios(
    fit_train: LabeledSample,
    fit_test: LabeledSample,
    classifier_kind,
    config: FitConfig = FitConfig(),
    equal_marginals: bool = False,
) -> RatioModel:
    """Both estimators; with ``equal_marginals`` g_hat is the constant 1."""
    name = getattr(classifier_kind, "value", None) or getattr(classifier_kind, "__name__", str(classifier_kind))
    if equal_marginals:
        g_hat, mclf = constant_one, None
    else:
        g_hat, mclf = estimate_marginal_ratio(fit_train, fit_test, classifier_kind, config.with_seed(config.seed * 2 + 1))
    v_hat = estimate_conditional_ratio(fit_train, fit_test, classifier_kind, config.with_seed(config.seed * 2 + 2), g_hat)
    return RatioModel(g_hat, v_hat, f"classifier:{name}", mclf, v_hat.classifier)


def oracle_ratio(model, hypothesis=None) -> RatioModel:
    """Exact ratios for a :class:`ModelSpec` (or a model id plus hypothesis)."""
    spec = model if isinstance(model, ModelSpec) else ModelSpec.make(model, hypothesis or "null")

    def g(x):
        return np.exp(spec.log_g(x))

    def v(x, y):
        return np.exp(spec.log_v(x, y))

    return RatioModel(g, v, f"oracle:{spec.model}/{spec.hypothesis.value}")


CONSTANT_ONE = RatioModel(constant_one, lambda x, y: constant_one(x), "constant-one")
