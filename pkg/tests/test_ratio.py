import math

import numpy as np
import pytest
from scipy import stats

from covshift.classifiers import ClassifierKind, FeatureTransform, FitConfig, PrecomputedClassifier, ProbClassifier
from covshift.dataset import LabeledSample, Population
from covshift.models import ModelSpec
from covshift.ratio import (
    CONSTANT_ONE,
    ConditionalRatio,
    MarginalRatio,
    clip_ratio,
    estimate_conditional_ratio,
    estimate_marginal_ratio,
    estimate_ratios,
    oracle_ratio,
)
from covshift.simulation import generate


def _const(p):
    return PrecomputedClassifier(lambda x: np.full(x.shape[0], p))


@pytest.mark.parametrize("value,expected", [(0.001, 0.01), (50.0, 50.0), (1e6, 100.0)])
def test_clip_examples(value, expected):
    assert clip_ratio(value) == expected


def test_clip_array_and_bounds():
    np.testing.assert_array_equal(clip_ratio(np.array([1e-9, 1.0, 1e9])), [0.01, 1.0, 100.0])
    with pytest.raises(ValueError):
        clip_ratio(1.0, 2.0, 1.0)


def test_marginal_from_half_is_one():
    np.testing.assert_array_equal(MarginalRatio(_const(0.5))(np.zeros((3, 2))), 1.0)


def test_marginal_from_point_eight():
    assert MarginalRatio(_const(0.8))(np.zeros((1, 2)))[0] == pytest.approx(0.25)


def test_conditional_from_half_and_one():
    v = ConditionalRatio(_const(0.5), CONSTANT_ONE.g_hat)
    np.testing.assert_array_equal(v(np.zeros((4, 2)), np.zeros(4)), 1.0)


def test_composition_identity():
    rng = np.random.default_rng(0)
    coef = rng.standard_normal(4)
    joint = ProbClassifier(ClassifierKind.LL, {"coef": coef}, FeatureTransform(3))
    g = MarginalRatio(ProbClassifier(ClassifierKind.LL, {"coef": coef[:3]}, FeatureTransform(2)))
    v = ConditionalRatio(joint, g)
    x, y = rng.standard_normal((50, 2)), rng.standard_normal(50)
    np.testing.assert_array_equal(v(x, y), v.joint_ratio(x, y) * g(x))


def test_oracle_model_a_values():
    o = oracle_ratio("A", "null")
    assert o.g_hat(np.zeros((1, 5)))[0] == pytest.approx(math.exp(-2.0), rel=1e-14)
    x = np.random.default_rng(1).standard_normal((20, 5))
    np.testing.assert_array_equal(o.v_hat(x, np.ones(20)), 1.0)
    assert o.provenance == "oracle:A/null"


@pytest.mark.parametrize("p", [1, 5, 7])
def test_oracle_model_d_origin(p):
    o = oracle_ratio(ModelSpec.make("D", "null", p=p))
    # N(0, 2I) / N(0, I) density ratio at the origin
    expected = stats.multivariate_normal(np.zeros(p), 2 * np.eye(p)).pdf(np.zeros(p)) / stats.multivariate_normal(
        np.zeros(p), np.eye(p)
    ).pdf(np.zeros(p))
    assert o.g_hat(np.zeros((1, p)))[0] == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(2 ** (-p / 2))


def test_oracle_model_c_matches_scipy():
    spec = ModelSpec.make("C", "alt")
    x = np.random.default_rng(2).standard_normal((10, 5))
    f2 = stats.multivariate_normal(spec.mu, spec.sigma).logpdf(x)
    f1 = stats.multivariate_normal(np.zeros(5), spec.sigma).logpdf(x)
    np.testing.assert_allclose(np.log(oracle_ratio(spec).g_hat(x)), f2 - f1, atol=1e-10)


def test_oracle_conditional_ratios_match_scipy():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((10, 5))
    y = rng.standard_normal(10) * 2
    a = ModelSpec.make("A", "alt")
    m = x @ a.beta
    np.testing.assert_allclose(
        np.log(oracle_ratio(a).v_hat(x, y)), stats.norm.logpdf(y, m) - stats.norm.logpdf(y, m + 0.5), atol=1e-12
    )
    b = ModelSpec.make("B", "alt")
    mb = b.mean_function(x)
    np.testing.assert_allclose(
        np.log(oracle_ratio(b).v_hat(x, y)), stats.t.logpdf(y - mb, 5) - stats.t.logpdf(y - mb - 1, 5), atol=1e-12
    )
    c = ModelSpec.make("C", "alt")
    sd1 = np.sqrt(4 / (1 + x[:, 0] ** 2))
    sd2 = np.sqrt(1 / (1 + x[:, 0] ** 2))
    mc = x @ c.beta
    np.testing.assert_allclose(
        np.log(oracle_ratio(c).v_hat(x, y)),
        stats.norm.logpdf(y, mc, sd1) - stats.norm.logpdf(y, mc, sd2),
        atol=1e-12,
    )
    d = ModelSpec.make("D", "alt")
    md = x @ d.beta
    np.testing.assert_allclose(
        np.log(oracle_ratio(d).v_hat(x, y)),
        stats.norm.logpdf(y, md, 1) - stats.norm.logpdf(y, md, math.sqrt(2)),
        atol=1e-12,
    )


def test_model_a_alt_crossing_point():
    # at x = 0 the two conditional laws N(0,1) and N(0.5,1) cross at y = 0.25
    spec = ModelSpec.make("A", "alt")
    assert oracle_ratio(spec).v_hat(np.zeros((1, 5)), [0.25])[0] == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("model", ["A", "B", "C", "D"])
def test_oracle_g_has_unit_mean_under_train(model):
    spec = ModelSpec.make(model, "alt")
    tr, _, o = generate(spec, 100_000, 1, seed=[4], filtered=False)
    g = o.g_hat(tr.features)
    assert abs(g.mean() - 1) < 3 * g.std() / math.sqrt(g.size)


@pytest.mark.parametrize("model", ["A", "B", "C", "D"])
def test_inverse_v_has_unit_mean_under_train(model):
    spec = ModelSpec.make(model, "alt")
    tr, _, o = generate(spec, 100_000, 1, seed=[5], filtered=False)
    w = 1.0 / o.v_hat(tr.features, tr.response)
    assert abs(w.mean() - 1) < 3 * w.std() / math.sqrt(w.size)


def _model_a_fit(n, hyp, seed):
    tr, te, o = generate(ModelSpec.make("A", hyp), n, n, seed=[seed])
    return tr, te, o


def test_marginal_estimate_near_truth_at_origin():
    tr, te, _ = _model_a_fit(10_000, "null", 6)
    g, _ = estimate_marginal_ratio(tr, te, "ll")
    # equal class sizes, so the estimate needs no calibration constant
    assert g(np.zeros((1, 5)))[0] == pytest.approx(math.exp(-2), rel=0.3)


def test_marginal_rank_agreement():
    tr, te, o = _model_a_fit(10_000, "null", 7)
    g, _ = estimate_marginal_ratio(tr, te, "ll")
    hold, _, _ = _model_a_fit(2000, "null", 8)
    rho = stats.spearmanr(g(hold.features), o.g_hat(hold.features)).statistic
    assert rho > 0.95


def test_conditional_nearly_constant_under_null():
    tr, te, _ = _model_a_fit(10_000, "null", 9)
    g, _ = estimate_marginal_ratio(tr, te, "ll")
    v = estimate_conditional_ratio(tr, te, "ll", FitConfig(), g)
    hold, _, _ = _model_a_fit(2000, "null", 10)
    vals = v(hold.features, hold.response)
    c = np.median(vals)
    assert np.median(np.abs(vals - c) / c) < 0.2


def test_conditional_near_one_at_crossing_point():
    tr, te, _ = _model_a_fit(10_000, "alt", 11)
    g, _ = estimate_marginal_ratio(tr, te, "ll")
    v = estimate_conditional_ratio(tr, te, "ll", FitConfig(), g)
    assert v(np.zeros((1, 5)), [0.25])[0] == pytest.approx(1.0, rel=0.3)


def test_positivity_and_clip_range():
    tr, te, _ = _model_a_fit(500, "alt", 12)
    rm = estimate_ratios(tr, te, "ll")
    rng = np.random.default_rng(13)
    x = rng.standard_normal((100_000, 5)) * 5
    y = rng.standard_normal(100_000) * 5
    for vals in (rm.g_hat(x), rm.v_hat(x, y)):
        assert np.all(np.isfinite(vals)) and np.all(vals > 0)
        c = clip_ratio(vals)
        assert np.all((c >= 0.01) & (c <= 100))


def test_equal_marginals_uses_constant_one():
    tr, te, _ = _model_a_fit(300, "null", 14)
    rm = estimate_ratios(tr, te, "ll", equal_marginals=True)
    np.testing.assert_array_equal(rm.g_hat(tr.features), 1.0)
    assert rm.marginal_classifier is None
    assert rm.provenance == "classifier:ll"


def test_train_is_class_one():
    x = np.r_[np.zeros(50), np.ones(50)][:, None]
    tr = LabeledSample(x[:50], np.zeros(50), Population.TRAIN)
    te = LabeledSample(x[50:] + np.random.default_rng(0).normal(0, 0.5, (50, 1)), np.zeros(50), Population.TEST)
    g, _ = estimate_marginal_ratio(tr, te, "ll")
    # test points live near 1, so f_test / f_train grows with x
    assert g(np.array([[1.0]]))[0] > g(np.array([[0.0]]))[0]
