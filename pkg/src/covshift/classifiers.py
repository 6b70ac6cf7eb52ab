"""Probabilistic binary classifiers used as density-ratio engines.

All classifiers model P(label = 1 | features). They are fitted from scratch
with numpy: iteratively reweighted least squares for the (quadratic)
logistic models, proximal gradient for the L1-penalized logistic model,
and minibatch SGD for the sigmoid network.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

EPS = 1e-6
JITTER = 1e-8


class ClassifierKind(str, Enum):
    LL = "ll"
    QL = "ql"
    NN = "nn"
    SPARSE_LL = "sparse-ll"


class FitError(RuntimeError):
    """Classifier could not be fitted."""


class DivergenceError(FitError):
    """SGD produced non-finite losses even after learning-rate halving."""


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 100
    tolerance: float = 1e-8
    l1_lambda: float = 0.0
    hidden_layers: tuple[int, ...] = (10,)
    learning_rate: float = 0.1
    epochs: int = 200
    batch_size: int = 32
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.l1_lambda < 0:
            raise ValueError("l1_lambda must be >= 0")
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden layer widths must be >= 1")
        if self.max_iterations < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("max_iterations, epochs and batch_size must be >= 1")

    def with_seed(self, seed: int) -> "FitConfig":
        return FitConfig(**{**self.__dict__, "seed": int(seed)})


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def expand_quadratic(features) -> np.ndarray:
    """Linear terms, then squares, then cross products x_i x_j (i < j)."""
    x = np.atleast_2d(np.asarray(features, dtype=float))
    p = x.shape[1]
    cross = [x[:, i] * x[:, j] for i in range(p) for j in range(i + 1, p)]
    return np.column_stack([x, x**2, *cross]) if cross else np.column_stack([x, x**2])


@dataclass(frozen=True)
class FeatureTransform:
    """Input mapping: optional quadratic expansion, then standardization."""

    n_inputs: int
    expansion: str = "identity"
    means: np.ndarray | None = None
    sds: np.ndarray | None = None

    @classmethod
    def fit(cls, x: np.ndarray, expansion: str = "identity", standardize: bool = True):
        z = expand_quadratic(x) if expansion == "quadratic" else x
        if not standardize:
            return cls(x.shape[1], expansion)
        sds = z.std(axis=0)
        sds[sds == 0] = 1.0
        return cls(x.shape[1], expansion, z.mean(axis=0), sds)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} features, got {x.shape[1]}")
        z = expand_quadratic(x) if self.expansion == "quadratic" else x
        if self.means is not None:
            z = (z - self.means) / self.sds
        return z

    def to_dict(self) -> dict:
        return {
            "n_inputs": self.n_inputs,
            "expansion": self.expansion,
            "means": None if self.means is None else self.means.tolist(),
            "sds": None if self.sds is None else self.sds.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureTransform":
        arr = lambda v: None if v is None else np.asarray(v, dtype=float)  # noqa: E731
        return cls(int(d["n_inputs"]), d["expansion"], arr(d["means"]), arr(d["sds"]))


@dataclass
class FitDiagnostics:
    iterations: int = 0
    objective: float = float("nan")
    converged: bool = False
    separated: bool = False
    ridge_jitter: bool = False
    lr_halvings: int = 0
    history: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d.pop("history")
        return d


@dataclass(frozen=True)
class ProbClassifier:
    """A fitted classifier; ``params`` holds kind-specific arrays.

    Linear kinds store ``coef`` (intercept first). The network stores
    ``weights`` and ``biases`` lists, input layer first.
    """

    kind: ClassifierKind
    params: dict
    transform: FeatureTransform
    diagnostics: FitDiagnostics = field(default_factory=FitDiagnostics)

    def predict_proba(self, x) -> np.ndarray:
        return predict_proba(self, x)

    def to_dict(self) -> dict:
        params = {
            k: [np.asarray(a).tolist() for a in v] if isinstance(v, list) else np.asarray(v).tolist()
            for k, v in self.params.items()
        }
        return {
            "kind": self.kind.value,
            "transform": self.transform.to_dict(),
            "params": params,
            "diagnostics": self.diagnostics.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProbClassifier":
        params = {
            k: [np.asarray(a, dtype=float) for a in v] if k in ("weights", "biases") else np.asarray(v, dtype=float)
            for k, v in d["params"].items()
        }
        return cls(
            ClassifierKind(d["kind"]),
            params,
            FeatureTransform.from_dict(d["transform"]),
            FitDiagnostics(**d.get("diagnostics", {})),
        )


@dataclass(frozen=True)
class PrecomputedClassifier:
    """Adapter for externally produced probabilities, e.g. a random forest."""

    func: Callable[[np.ndarray], np.ndarray]
    kind: str = "precomputed"

    def predict_proba(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.clip(np.asarray(self.func(x), dtype=float).reshape(-1), EPS, 1 - EPS)


def predict_proba(clf: ProbClassifier, x) -> np.ndarray:
    """P(label = 1 | x) for each row of ``x``, clamped to [1e-6, 1 - 1e-6]."""
    z = clf.transform(x)
    if clf.kind == ClassifierKind.NN:
        logit = _mlp_forward(clf.params["weights"], clf.params["biases"], z)[-1]
    else:
        coef = clf.params["coef"]
        logit = coef[0] + z @ coef[1:]
    return np.clip(sigmoid(logit), EPS, 1 - EPS)


def _check_labels(features, labels):
    x = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(labels, dtype=float).reshape(-1)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("features and labels must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise FitError("both classes must be present")
    return x, y


# -- logistic regression ------------------------------------------------------


def logistic_nll(coef, design, labels) -> float:
    """Negative Bernoulli log-likelihood; ``design`` excludes the intercept column."""
    eta = coef[0] + design @ coef[1:]
    return float(np.sum(np.logaddexp(0.0, eta) - labels * eta))


def logistic_grad(coef, design, labels) -> np.ndarray:
    """Gradient of :func:`logistic_nll` with respect to (intercept, slopes)."""
    r = sigmoid(coef[0] + design @ coef[1:]) - labels
    return np.concatenate([[r.sum()], design.T @ r])


def _solve_newton(h, g, diag):
    try:
        return np.linalg.solve(h, g)
    except np.linalg.LinAlgError:
        diag.ridge_jitter = True
        return np.linalg.solve(h + JITTER * np.eye(h.shape[0]), g)


def _irls(z, y, cfg: FitConfig, diag: FitDiagnostics) -> np.ndarray:
    n, q = z.shape
    a = np.column_stack([np.ones(n), z])
    coef = np.zeros(q + 1)
    obj = logistic_nll(coef, z, y)
    diag.history.append(obj)
    for it in range(1, cfg.max_iterations + 1):
        mu = sigmoid(a @ coef)
        w = mu * (1 - mu)
        h = a.T @ (w[:, None] * a)
        if np.linalg.cond(h) > 1e14:
            diag.ridge_jitter = True
            h = h + JITTER * np.eye(q + 1)
        step = _solve_newton(h, a.T @ (mu - y), diag)
        t = 1.0
        for _ in range(50):
            cand = coef - t * step
            new_obj = logistic_nll(cand, z, y)
            if new_obj <= obj + 1e-12 * max(1.0, abs(obj)):
                break
            t *= 0.5
        else:
            cand, new_obj = coef, obj
        diag.iterations = it
        eta = a @ cand
        if np.all((eta > 0) == (y == 1)):
            # the iterate separates the classes: no finite maximizer exists
            diag.separated = True
            coef, obj = cand, new_obj
            diag.history.append(obj)
            break
        change = obj - new_obj
        coef, obj = cand, new_obj
        diag.history.append(obj)
        if abs(change) < cfg.tolerance:
            diag.converged = True
            break
    diag.objective = obj
    return coef


def fit_logistic(features, labels, config: FitConfig = FitConfig(), *, quadratic: bool = False) -> ProbClassifier:
    """Maximum-likelihood logistic regression by IRLS.

    Stops once the objective changes by less than ``config.tolerance``.
    Perfect separation stops the iteration with ``diagnostics.separated``
    set; a singular weighted Gram matrix gets a 1e-8 ridge.
    """
    x, y = _check_labels(features, labels)
    tf = FeatureTransform.fit(x, "quadratic" if quadratic else "identity", config.standardize)
    z = tf(x)
    if z.shape[0] <= z.shape[1]:
        warnings.warn(f"n = {z.shape[0]} <= number of terms {z.shape[1]}; the fit is ill-posed", stacklevel=2)
    diag = FitDiagnostics()
    coef = _irls(z, y, config, diag)
    kind = ClassifierKind.QL if quadratic else ClassifierKind.LL
    return ProbClassifier(kind, {"coef": coef}, tf, diag)


def fit_quadratic_logistic(features, labels, config: FitConfig = FitConfig()) -> ProbClassifier:
    return fit_logistic(features, labels, config, quadratic=True)


def sparse_objective(coef, design, labels, l1_lambda) -> float:
    return logistic_nll(coef, design, labels) + l1_lambda * float(np.abs(coef[1:]).sum())


def _soft_threshold(v, thr):
    return np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)


def fit_sparse_logistic(
    features, labels, l1_lambda: float, config: FitConfig = FitConfig(), init=None
) -> ProbClassifier:
    """L1-penalized logistic regression by proximal gradient with backtracking.

    Minimizes ``nll(coef) + l1_lambda * ||slopes||_1``; the intercept is not
    penalized. ``init`` warm-starts from a coefficient vector (e.g. the
    previous point on a lambda path).
    """
    if l1_lambda < 0:
        raise ValueError("l1_lambda must be >= 0")
    x, y = _check_labels(features, labels)
    tf = FeatureTransform.fit(x, "identity", config.standardize)
    z = tf(x)
    n, q = z.shape
    coef = np.zeros(q + 1) if init is None else np.array(init, dtype=float)
    if init is None:
        ybar = y.mean()
        coef[0] = np.log(ybar / (1 - ybar))
    diag = FitDiagnostics()
    obj = sparse_objective(coef, z, y, l1_lambda)
    diag.history.append(obj)
    # 1/L for the unpenalized part, L = ||[1, z]||_2^2 / 4
    t = 4.0 / (np.linalg.norm(np.column_stack([np.ones(n), z]), 2) ** 2)
    max_iter = max(config.max_iterations, 5000)
    thr = np.zeros(q + 1)
    for it in range(1, max_iter + 1):
        f0 = logistic_nll(coef, z, y)
        g = logistic_grad(coef, z, y)
        t *= 2.0
        while True:
            thr[1:] = t * l1_lambda
            cand = _soft_threshold(coef - t * g, thr)
            d = cand - coef
            f1 = logistic_nll(cand, z, y)
            if f1 <= f0 + g @ d + (d @ d) / (2 * t) + 1e-12 * max(1.0, abs(f0)):
                break
            t *= 0.5
        new_obj = f1 + l1_lambda * float(np.abs(cand[1:]).sum())
        change = obj - new_obj
        coef, obj = cand, new_obj
        diag.history.append(obj)
        diag.iterations = it
        if abs(change) < config.tolerance and np.max(np.abs(d)) < 1e-7:
            diag.converged = True
            break
    diag.objective = obj
    return ProbClassifier(ClassifierKind.SPARSE_LL, {"coef": coef}, tf, diag)


# -- sigmoid network -----------------------------------------------------------


def init_mlp(n_inputs: int, hidden: tuple[int, ...], rng: np.random.Generator):
    widths = [n_inputs, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return weights, biases


def _mlp_forward(weights, biases, z):
    """Hidden activations followed by the output logit (last element)."""
    acts = [z]
    h = z
    for w, b in zip(weights[:-1], biases[:-1]):
        h = sigmoid(h @ w + b)
        acts.append(h)
    acts.append((h @ weights[-1] + biases[-1]).reshape(-1))
    return acts


def mlp_loss_and_grad(weights, biases, z, y):
    """Mean cross-entropy and its gradients (lists matching weights, biases)."""
    acts = _mlp_forward(weights, biases, z)
    logit = acts[-1]
    n = z.shape[0]
    loss = float(np.mean(np.logaddexp(0.0, logit) - y * logit))
    delta = ((sigmoid(logit) - y) / n)[:, None]
    gw = [None] * len(weights)
    gb = [None] * len(biases)
    for i in range(len(weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            h = acts[i]
            delta = (delta @ weights[i].T) * h * (1 - h)
    return loss, gw, gb


def fit_mlp(features, labels, config: FitConfig = FitConfig()) -> ProbClassifier:
    """Sigmoid network trained by minibatch SGD on cross-entropy.

    A non-finite epoch loss restarts that epoch with half the learning rate;
    the third failed restart raises :class:`DivergenceError`.
    """
    if not config.hidden_layers:
        raise ValueError("hidden_layers must be non-empty")
    x, y = _check_labels(features, labels)
    tf = FeatureTransform.fit(x, "identity", config.standardize)
    z = tf(x)
    n = z.shape[0]
    rng = np.random.default_rng([int(config.seed), 17])
    weights, biases = init_mlp(z.shape[1], config.hidden_layers, rng)
    lr = config.learning_rate
    diag = FitDiagnostics()
    bs = config.batch_size
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            snapshot = ([w.copy() for w in weights], [b.copy() for b in biases])
            order = rng.permutation(n)
            while True:
                total = 0.0
                for start in range(0, n, bs):
                    idx = order[start : start + bs]
                    loss, gw, gb = mlp_loss_and_grad(weights, biases, z[idx], y[idx])
                    total += loss * len(idx)
                    for w, g in zip(weights, gw):
                        w -= lr * g
                    for b, g in zip(biases, gb):
                        b -= lr * g
                if np.isfinite(total) and all(np.all(np.isfinite(w)) for w in weights):
                    break
                if diag.lr_halvings == 3:
                    raise DivergenceError(f"non-finite loss in epoch {epoch} after 3 learning-rate halvings")
                diag.lr_halvings += 1
                lr *= 0.5
                weights = [w.copy() for w in snapshot[0]]
                biases = [b.copy() for b in snapshot[1]]
            diag.history.append(total / n)
    diag.iterations = config.epochs
    diag.objective = diag.history[-1]
    diag.converged = True
    return ProbClassifier(ClassifierKind.NN, {"weights": weights, "biases": biases}, tf, diag)


def fit_classifier(kind, features, labels, config: FitConfig = FitConfig()):
    """Dispatch on ``kind``; a callable ``kind(features, labels, config)`` is used as is."""
    if callable(kind) and not isinstance(kind, (str, ClassifierKind)):
        return kind(features, labels, config)
    kind = ClassifierKind(kind)
    if kind == ClassifierKind.LL:
        return fit_logistic(features, labels, config)
    if kind == ClassifierKind.QL:
        return fit_quadratic_logistic(features, labels, config)
    if kind == ClassifierKind.NN:
        return fit_mlp(features, labels, config)
    return fit_sparse_logistic(features, labels, config.l1_lambda, config)
