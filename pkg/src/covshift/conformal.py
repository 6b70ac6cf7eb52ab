"""Weighted conformal p-values and the conformal test of covariate shift."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Callable

import numpy as np

from .classifiers import FitConfig
from .dataset import LabeledSample, SplitPlan, default_k, plan_split
from .metrics import err_p, err_v
from .ratio import CLIP_HI, CLIP_LO, clip_ratio, constant_one, estimate_conditional_ratio, estimate_marginal_ratio

# p-values are reported on a dyadic grid so that rescaling the ratio inputs
# (which are only defined up to a constant) cannot change a single bit
U_GRID = 2.0**24

ZETA_STREAM = 3
DEFAULT_B = 9
DEFAULT_M = 10


class RatioFitError(RuntimeError):
    """A density-ratio subroutine failed inside :func:`run_test`."""


def _quantize(u):
    return np.clip(np.round(np.asarray(u, dtype=float) * U_GRID) / U_GRID, 0.0, 1.0)


@dataclass(frozen=True)
class Minibatch:
    """Scores and marginal ratios for m training points plus one test point."""

    train_scores: np.ndarray
    test_score: float
    train_g: np.ndarray
    test_g: float
    zeta: float

    def __post_init__(self):
        s = np.asarray(self.train_scores, dtype=float).reshape(-1)
        g = np.asarray(self.train_g, dtype=float).reshape(-1)
        if s.shape != g.shape or s.size < 1:
            raise ValueError("train_scores and train_g must be non-empty and of equal length")
        if not 0.0 <= self.zeta < 1.0:
            raise ValueError("zeta must lie in [0, 1)")
        if not (np.all(np.isfinite(s)) and math.isfinite(self.test_score)):
            raise ValueError("scores must be finite")
        if not (np.all(g > 0) and self.test_g > 0 and np.all(np.isfinite(g)) and math.isfinite(self.test_g)):
            raise ValueError("marginal ratios must be finite and positive")
        object.__setattr__(self, "train_scores", s)
        object.__setattr__(self, "train_g", g)


def batch_weights(train_g, test_g):
    """Normalized weights (K x m for training points, K for test points)."""
    train_g = np.atleast_2d(np.asarray(train_g, dtype=float))
    test_g = np.asarray(test_g, dtype=float).reshape(-1)
    total = train_g.sum(axis=1) + test_g
    if np.any(total <= 0):
        raise RuntimeError("marginal ratios sum to zero; weights undefined")
    return train_g / total[:, None], test_g / total


def weighted_pvalues(train_scores, test_scores, train_g, test_g, zetas) -> np.ndarray:
    """Vectorized weighted conformal p-values, one per row (minibatch)."""
    s = np.atleast_2d(np.asarray(train_scores, dtype=float))
    t = np.asarray(test_scores, dtype=float).reshape(-1, 1)
    p_train, p_test = batch_weights(train_g, test_g)
    below = np.sum(p_train * (s < t), axis=1)
    tied = p_test + np.sum(p_train * (s == t), axis=1)
    return _quantize(below + np.asarray(zetas, dtype=float) * tied)


def weighted_pvalue(batch: Minibatch) -> float:
    """Weighted rank of the test score among the m + 1 scores, ties split by zeta."""
    u = weighted_pvalues(batch.train_scores[None, :], [batch.test_score], batch.train_g[None, :], [batch.test_g], [batch.zeta])
    return float(u[0])


def unweighted_pvalue(train_scores, test_score, zeta: float, zeta_tie_seed: int = 0) -> float:
    """(R - 1 + zeta) / (m + 1) with the rank R drawn uniformly among tied ranks."""
    s = np.asarray(train_scores, dtype=float).reshape(-1)
    m = s.size
    if m < 1:
        raise ValueError("need at least one training score")
    if not 0.0 <= zeta < 1.0:
        raise ValueError("zeta must lie in [0, 1)")
    r_lo = 1 + int(np.sum(s < test_score))
    r_hi = int(np.sum(s <= test_score)) + 1
    r = int(np.random.default_rng(zeta_tie_seed).integers(r_lo, r_hi + 1))
    return float(_quantize((r - 1 + zeta) / (m + 1)))


def zeta_stream(seed: int, K: int) -> np.ndarray:
    """zeta_k drawn from a sub-stream of ``seed`` indexed by k."""
    return np.array([np.random.default_rng([int(seed), ZETA_STREAM, k]).random() for k in range(K)])


# -- normal distribution ------------------------------------------------------

_STD_NORMAL = NormalDist()


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_sf(x: float) -> float:
    # erfc keeps precision in the upper tail, where 1 - cdf would cancel
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def normal_quantile(q: float) -> float:
    """Inverse standard normal CDF."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    return _STD_NORMAL.inv_cdf(q)


def t_statistic(u_values) -> float:
    u = np.asarray(u_values, dtype=float)
    return float(math.sqrt(12 * u.size) * (0.5 - np.mean(u)))


def median_p(p_values) -> float:
    """min(1, 2 * median); the median of an even count averages the middle pair."""
    p = np.asarray(p_values, dtype=float).reshape(-1)
    if p.size == 0:
        raise ValueError("need at least one p-value")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    return float(min(1.0, 2.0 * np.median(p)))


# -- the test -----------------------------------------------------------------


@dataclass
class ConformalRun:
    u_values: np.ndarray
    t_statistic: float
    p_value: float
    alpha: float
    reject: bool
    plan: SplitPlan
    diagnostics: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    weights: np.ndarray | None = field(default=None, repr=False)
    scores: np.ndarray | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return self.plan.K

    @property
    def m(self) -> int:
        return self.plan.m

    def to_dict(self, include_plan: bool = False) -> dict:
        d = {
            "alpha": self.alpha,
            "m": self.m,
            "K": self.K,
            "seed": self.plan.seed,
            "t": self.t_statistic,
            "p_value": self.p_value,
            "reject": self.reject,
            "u_values": [float(u) for u in self.u_values],
            "diagnostics": self.diagnostics,
            "seeds": self.seeds,
            "timing": self.timing,
        }
        if include_plan:
            d["plan"] = self.plan.to_dict()
        return d


def decide(u_values, alpha: float) -> tuple[float, float, bool]:
    """(T, one-sided p-value, reject) for a vector of conformal p-values."""
    t = t_statistic(u_values)
    return t, normal_sf(t), t >= normal_quantile(1.0 - alpha)


def conformal_from_ratios(
    train: LabeledSample,
    test: LabeledSample,
    plan: SplitPlan,
    g_hat: Callable,
    v_hat: Callable,
    alpha: float = 0.05,
    clip: tuple[float, float] | None = (CLIP_LO, CLIP_HI),
    oracle=None,
) -> ConformalRun:
    """Rank the held-out minibatches with fitted ratio functions.

    ``clip`` bounds the marginal ratios before they are normalized into
    weights. With an ``oracle`` RatioModel the run also records Err_p and,
    for non-null oracles, Err_V.
    """
    batches = plan.batches
    tx = test.features[plan.rank_test_idx]
    ty = test.response[plan.rank_test_idx]
    bx = train.features[batches.reshape(-1)]
    by = train.response[batches.reshape(-1)]
    K, m = batches.shape

    train_g = np.asarray(g_hat(bx), dtype=float).reshape(K, m)
    test_g = np.asarray(g_hat(tx), dtype=float).reshape(K)
    diagnostics: dict = {}
    if clip is not None:
        n_clipped = int(np.sum((train_g < clip[0]) | (train_g > clip[1])) + np.sum((test_g < clip[0]) | (test_g > clip[1])))
        train_g = clip_ratio(train_g, *clip)
        test_g = clip_ratio(test_g, *clip)
        diagnostics["weight_ratios_clipped"] = n_clipped
    train_s = np.asarray(v_hat(bx, by), dtype=float).reshape(K, m)
    test_s = np.asarray(v_hat(tx, ty), dtype=float).reshape(K)
    if not (np.all(np.isfinite(train_s)) and np.all(np.isfinite(test_s))):
        raise FloatingPointError("conditional ratio estimate produced non-finite scores")
    if not (np.all(train_g > 0) and np.all(test_g > 0) and np.all(np.isfinite(train_g)) and np.all(np.isfinite(test_g))):
        raise FloatingPointError("marginal ratio estimate produced non-positive or non-finite values")

    zetas = zeta_stream(plan.seed, K)
    u = weighted_pvalues(train_s, test_s, train_g, test_g, zetas)
    t, pval, reject = decide(u, alpha)

    p_train, p_test = batch_weights(train_g, test_g)
    weights = np.column_stack([p_train, p_test])
    scores = np.column_stack([train_s, test_s])
    diagnostics["max_weight"] = float(weights.max())
    diagnostics["mean_effective_batch"] = float(np.mean(1.0 / np.sum(weights**2, axis=1)))
    if oracle is not None:
        og_train = np.asarray(oracle.g_hat(bx), dtype=float).reshape(K, m)
        og_test = np.asarray(oracle.g_hat(tx), dtype=float).reshape(K)
        o_train, o_test = batch_weights(og_train, og_test)
        diagnostics["err_p"] = err_p(weights, np.column_stack([o_train, o_test]))
        if not oracle.provenance.endswith("/null"):
            ov = np.column_stack([np.asarray(oracle.v_hat(bx, by)).reshape(K, m), np.asarray(oracle.v_hat(tx, ty)).reshape(K)])
            diagnostics["err_v"] = err_v(scores, ov)
    return ConformalRun(
        u_values=u,
        t_statistic=t,
        p_value=pval,
        alpha=alpha,
        reject=bool(reject),
        plan=plan,
        diagnostics=diagnostics,
        seeds={"run": plan.seed, "split": [plan.seed, 1], "zeta": [plan.seed, ZETA_STREAM]},
        weights=weights,
        scores=scores,
    )


def _g_moments(g_hat, fit_train: LabeledSample, fit_test: LabeledSample) -> dict:
    # scale-free versions of E g^2 and E g^-2 under each population
    out = {}
    for name, s in (("train", fit_train), ("test", fit_test)):
        g = np.asarray(g_hat(s.features), dtype=float)
        g = g / np.mean(g)
        out[f"{name}_g_sq"] = float(np.mean(g**2))
        out[f"{name}_inv_g_sq"] = float(np.mean(g**-2))
    return out


def fit_ratio_pair(fit_train: LabeledSample, fit_test: LabeledSample, classifier_kind, config: FitConfig, seed: int, equal_marginals: bool = False):
    """(g_hat, v_hat) from the fitting subsamples, with failures labeled by stage."""
    if equal_marginals:
        g_hat = constant_one
    else:
        try:
            g_hat, _ = estimate_marginal_ratio(fit_train, fit_test, classifier_kind, config.with_seed(2 * seed + 1))
        except Exception as exc:
            raise RatioFitError(f"marginal ratio estimation failed: {exc}") from exc
    try:
        v_hat = estimate_conditional_ratio(fit_train, fit_test, classifier_kind, config.with_seed(2 * seed + 2), g_hat)
    except Exception as exc:
        raise RatioFitError(f"conditional ratio estimation failed: {exc}") from exc
    return g_hat, v_hat


def annotate(run: ConformalRun, weight_source: str, weights_from, fit_train, fit_test) -> ConformalRun:
    run.diagnostics["weight_source"] = weight_source
    run.diagnostics["equal_marginals"] = weight_source == "constant-one"
    if weight_source == "constant-one":
        run.diagnostics.pop("err_p", None)
    else:
        run.diagnostics["g_moments"] = _g_moments(weights_from, fit_train, fit_test)
    return run


def run_test(
    train: LabeledSample,
    test: LabeledSample,
    m: int = DEFAULT_M,
    K: int | None = None,
    classifier_kind="ll",
    config: FitConfig = FitConfig(),
    alpha: float = 0.05,
    seed: int = 0,
    equal_marginals: bool = False,
    weight_fn: Callable | None = None,
    oracle=None,
    clip: tuple[float, float] | None = (CLIP_LO, CLIP_HI),
) -> ConformalRun:
    """Conformal test of covariate shift on one random split.

    Splits the data, fits g_hat on the covariates and v_hat on (x, y) using
    the fitting subsamples, then turns each of the K ranking minibatches
    into one weighted conformal p-value. ``weight_fn`` replaces g_hat in the
    weights only (e.g. the true ratio in simulations); scores always come
    from the fitted v_hat.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0,1)")
    if train.p != test.p:
        raise ValueError(f"train has {train.p} covariates but test has {test.p}")
    if K is None:
        K = default_k(test.n, train.n, m)
    t0 = time.perf_counter()
    plan = plan_split(train.n, test.n, m, K, seed)
    fit_train = train.subset(plan.fit_train_idx)
    fit_test = test.subset(plan.fit_test_idx)
    g_hat, v_hat = fit_ratio_pair(fit_train, fit_test, classifier_kind, config, seed, equal_marginals)
    t1 = time.perf_counter()

    weights_from = g_hat if weight_fn is None else weight_fn
    run = conformal_from_ratios(train, test, plan, weights_from, v_hat, alpha, clip, oracle)
    source = "supplied" if weight_fn is not None else ("constant-one" if equal_marginals else "estimated")
    annotate(run, source, weights_from, fit_train, fit_test)
    run.timing = {"fit_seconds": t1 - t0, "total_seconds": time.perf_counter() - t0}
    return run
