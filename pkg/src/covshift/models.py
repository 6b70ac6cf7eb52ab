"""Data-generating processes for the simulation models A-D.

Each model is a regression y = alpha_l + h(x) + noise for populations
l = 1 (train) and l = 2 (test). Log densities are available in closed form,
which gives the oracle marginal ratio g(x) = f_2X(x) / f_1X(x) and the
oracle conditional ratio V(x, y) = f_1(y|x) / f_2(y|x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

LOG_CLIP = math.log(100.0)


class Hypothesis(str, Enum):
    NULL = "null"
    ALT = "alt"


MODELS = ("A", "B", "C", "D")


def model_c_sigma(p: int) -> np.ndarray:
    i = np.arange(1, p + 1)
    sigma = 1.0 / np.maximum.outer(i, i)
    np.fill_diagonal(sigma, 1.0)
    return sigma


def _t5_logpdf(r):
    nu = 5.0
    c = math.lgamma((nu + 1) / 2) - math.lgamma(nu / 2) - 0.5 * math.log(nu * math.pi)
    return c - (nu + 1) / 2 * np.log1p(r**2 / nu)


def _norm_logpdf(r, var):
    return -0.5 * np.log(2 * np.pi * var) - r**2 / (2 * var)


@dataclass(frozen=True)
class ModelSpec:
    """Parameters of one simulation model under one hypothesis.

    Build with :meth:`make`, which draws the +-1 coefficient signs from
    ``seed``. ``s`` is the number of signal coordinates; the remaining
    entries of ``beta`` and ``mu`` are zero.
    """

    model: str
    hypothesis: Hypothesis
    p: int
    s: int
    beta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray | None
    alphas: tuple[float, float]
    seed: int

    @classmethod
    def make(cls, model: str, hypothesis="null", p: int = 5, seed: int = 0, s: int | None = None):
        model = str(model).upper()
        if model not in MODELS:
            raise ValueError(f"unknown model {model!r}; valid models: {', '.join(MODELS)}")
        hyp = Hypothesis(hypothesis)
        if s is None:
            s = min(p, 5) if model == "A" else p
        if model == "B" and p != 5:
            raise ValueError("model B is defined for p = 5")
        if model != "A" and s != p:
            raise ValueError("only model A supports a sparse (s < p) design")
        if not 1 <= s <= p:
            raise ValueError("need 1 <= s <= p")
        rng = np.random.default_rng([int(seed), 99])
        beta = np.zeros(p)
        beta[:s] = rng.choice([-1.0, 1.0], size=s)
        mu = np.zeros(p)
        if model != "D":
            mu[: min(s, 5)] = np.array([1.0, 1.0, -1.0, -1.0, 0.0])[: min(s, 5)]
        sigma = model_c_sigma(p) if model == "C" else None
        alt = hyp == Hypothesis.ALT
        alphas = {"A": (0.0, 0.5 if alt else 0.0), "B": (0.0, 1.0 if alt else 0.0)}.get(model, (0.0, 0.0))
        return cls(model, hyp, p, s, beta, mu, sigma, alphas, int(seed))

    @property
    def is_null(self) -> bool:
        return self.hypothesis == Hypothesis.NULL

    def describe(self) -> dict:
        noise = {
            "A": "N(0,1) both populations",
            "B": "t(5) both populations",
            "C": "N(0, 4/(1+x1^2)); test population N(0, 1/(1+x1^2)) under alt",
            "D": "N(0,1); test population N(0,2) under alt",
        }[self.model]
        return {
            "model": self.model,
            "hypothesis": self.hypothesis.value,
            "p": self.p,
            "s": self.s,
            "beta": self.beta.tolist(),
            "mu": self.mu.tolist(),
            "sigma": None if self.sigma is None else self.sigma.tolist(),
            "alphas": list(self.alphas),
            "noise": noise,
            "sign_seed": self.seed,
        }

    # -- structural pieces ---------------------------------------------------

    def mean_function(self, x: np.ndarray) -> np.ndarray:
        if self.model == "B":
            b = self.beta
            return b[0] * x[:, 0] + b[1] * x[:, 1] + b[2] * x[:, 2] ** 2 + b[3] * x[:, 3] ** 2 + b[4] * x[:, 4] ** 3
        return x @ self.beta

    def noise_var(self, x: np.ndarray, population: int) -> np.ndarray | float:
        if self.model == "C":
            scale = 1.0 if (population == 2 and not self.is_null) else 4.0
            return scale / (1.0 + x[:, 0] ** 2)
        if self.model == "D" and population == 2 and not self.is_null:
            return 2.0
        return 1.0

    def sample_x(self, n: int, population: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.p))
        if self.model == "C":
            z = z @ np.linalg.cholesky(self.sigma).T
        if self.model == "D":
            return z * (math.sqrt(2.0) if population == 2 else 1.0)
        return z + (self.mu if population == 2 else 0.0)

    def sample_y(self, x: np.ndarray, population: int, rng: np.random.Generator) -> np.ndarray:
        n = x.shape[0]
        if self.model == "B":
            eps = rng.standard_t(5, size=n)
        else:
            eps = rng.standard_normal(n) * np.sqrt(self.noise_var(x, population))
        return self.alphas[population - 1] + self.mean_function(x) + eps

    # -- oracle log ratios -----------------------------------------------------

    def log_g(self, x) -> np.ndarray:
        """log f_2X(x) - log f_1X(x)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.model == "D":
            return -0.5 * self.p * math.log(2.0) + 0.25 * np.sum(x**2, axis=1)
        if self.model == "C":
            a = np.linalg.solve(self.sigma, self.mu)
        else:
            a = self.mu
        return x @ a - 0.5 * float(self.mu @ a)

    def log_cond(self, x, y, population: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.asarray(y, dtype=float).reshape(-1) - self.alphas[population - 1] - self.mean_function(x)
        if self.model == "B":
            return _t5_logpdf(r)
        return _norm_logpdf(r, self.noise_var(x, population))

    def log_v(self, x, y) -> np.ndarray:
        """log f_1(y|x) - log f_2(y|x); identically zero under the null."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.is_null:
            return np.zeros(x.shape[0])
        return self.log_cond(x, y, 1) - self.log_cond(x, y, 2)

    def keep_mask(self, x, y) -> np.ndarray:
        """Points whose true marginal and joint ratios lie in [1/100, 100]."""
        lg = self.log_g(x)
        lj = self.log_v(x, y) - lg
        return (np.abs(lg) <= LOG_CLIP) & (np.abs(lj) <= LOG_CLIP)
