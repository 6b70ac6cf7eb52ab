"""Accuracy metrics for estimated weights, scores and classifiers."""

from __future__ import annotations

import numpy as np


def err_p(p_hat, p) -> float:
    """Mean over minibatches of the L1 distance between weight rows.

    Both arguments are K x (m + 1) arrays whose rows sum to one.
    """
    p_hat = np.atleast_2d(np.asarray(p_hat, dtype=float))
    p = np.atleast_2d(np.asarray(p, dtype=float))
    if p_hat.shape != p.shape:
        raise ValueError(f"shape mismatch: {p_hat.shape} vs {p.shape}")
    for name, w in (("p_hat", p_hat), ("p", p)):
        if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-10):
            raise ValueError(f"rows of {name} must sum to 1")
    return float(np.mean(np.abs(p_hat - p).sum(axis=1)))


def err_v(v_hat, v) -> float:
    """Mean squared difference over all (m + 1) K score slots."""
    v_hat = np.asarray(v_hat, dtype=float)
    v = np.asarray(v, dtype=float)
    if v_hat.shape != v.shape:
        raise ValueError(f"shape mismatch: {v_hat.shape} vs {v.shape}")
    return float(np.mean((v_hat - v) ** 2))


def mce(classifier, holdout_features, holdout_labels) -> float:
    """Holdout misclassification rate of the 0.5-thresholded classifier.

    The holdout must not overlap the classifier's fitting sample; that is
    the caller's job.
    """
    y = np.asarray(holdout_labels).reshape(-1)
    if y.size == 0:
        raise ValueError("empty holdout")
    pred = classifier.predict_proba(holdout_features) > 0.5
    return float(np.mean(pred != (y == 1)))
