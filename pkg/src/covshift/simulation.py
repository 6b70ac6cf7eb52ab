"""Simulation lab: data generation, replicated experiments and reports."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .classifiers import FitConfig, PrecomputedClassifier
from .conformal import annotate, conformal_from_ratios, fit_ratio_pair
from .dataset import LabeledSample, Population, plan_split
from .metrics import err_p, err_v, mce  # noqa: F401  (re-exported)
from .models import ModelSpec
from .ratio import ConditionalRatio, RatioModel, oracle_ratio

MIN_ACCEPTANCE = 0.01
CSV_COLUMNS = (
    "model", "hypothesis", "estimator", "weight_mode", "n2", "m", "K", "reps",
    "reject_frac", "err_p", "err_v", "mce", "failures",
)


class GenerationError(RuntimeError):
    """The ratio filter rejects too many draws for the requested model."""


def _draw(spec: ModelSpec, population: int, n: int, rng, filtered: bool):
    xs, ys = [], []
    got = drawn = 0
    while got < n:
        chunk = int((n - got) * 1.1) + 32
        x = spec.sample_x(chunk, population, rng)
        y = spec.sample_y(x, population, rng)
        drawn += chunk
        if filtered:
            keep = spec.keep_mask(x, y)
            x, y = x[keep], y[keep]
        xs.append(x)
        ys.append(y)
        got += x.shape[0]
        if got / drawn < MIN_ACCEPTANCE and drawn >= 1000:
            raise GenerationError(
                f"model {spec.model}: ratio filter keeps {got}/{drawn} draws (< 1%); review the model parameters"
            )
    return np.concatenate(xs)[:n], np.concatenate(ys)[:n]


def generate(spec: ModelSpec, n1: int, n2: int, seed, filtered: bool = True):
    """Draw a training and a testing sample plus the matching oracle ratios.

    With ``filtered`` (the default) points whose true marginal or joint
    density ratio falls outside [1/100, 100] are rejected and redrawn, so
    the samples have exactly n1 and n2 rows.
    """
    if n1 < 1 or n2 < 1:
        raise ValueError("n1 and n2 must be >= 1")
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 2])
    x1, y1 = _draw(spec, 1, n1, rng, filtered)
    x2, y2 = _draw(spec, 2, n2, rng, filtered)
    return (
        LabeledSample(x1, y1, Population.TRAIN),
        LabeledSample(x2, y2, Population.TEST),
        oracle_ratio(spec),
    )


def recipe_sizes(n2: int, m: int) -> tuple[int, int, int]:
    """(K, n1, n_fit): K = ceil(n2 / log n2), n1 = n2 + (m - 1) K, n_fit = n2 - K."""
    K = math.ceil(n2 / math.log(n2))
    n1 = n2 + (m - 1) * K
    n_fit = n2 - K
    if n1 - m * K != n_fit:
        raise AssertionError("inconsistent recipe sizes")
    return K, n1, n_fit


def exponential_tilt_resample(sample: LabeledSample, alpha_vector, fraction: float, seed) -> LabeledSample:
    """Resample ceil(fraction * n) rows with replacement, P(row) proportional to exp(x . alpha)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    a = np.asarray(alpha_vector, dtype=float).reshape(-1)
    if a.size != sample.p:
        raise ValueError(f"alpha_vector has {a.size} entries for {sample.p} covariates")
    with np.errstate(invalid="ignore", over="ignore"):
        logw = sample.features @ a
    if not np.all(np.isfinite(logw)):
        raise ValueError("tilting weights are not finite")
    w = np.exp(logw - logw.max())
    total = w.sum()
    if not (total > 0 and np.isfinite(total)):
        raise ValueError("tilting weights are degenerate")
    size = math.ceil(fraction * sample.n)
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 5])
    idx = rng.choice(sample.n, size=size, replace=True, p=w / total)
    return sample.subset(idx)


# -- experiments -------------------------------------------------------------------


@dataclass
class ExperimentReport:
    spec: dict
    rows: list[dict]
    reps: int
    base_seed: int
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0
    replications: list[dict] = field(default_factory=list, repr=False)

    def row(self, **keys) -> dict:
        hits = [r for r in self.rows if all(r.get(k) == v for k, v in keys.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {keys}")
        return hits[0]

    def to_csv(self, path=None) -> str:
        cols = list(CSV_COLUMNS) + [c for c in ("l1_lambda",) if any(c in r for r in self.rows)]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in cols})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    def to_dict(self, full: bool = False) -> dict:
        d = {
            "spec": self.spec,
            "reps": self.reps,
            "base_seed": self.base_seed,
            "config": self.config,
            "rows": self.rows,
            "wall_time": self.wall_time,
        }
        if full:
            d["replications"] = self.replications
        return d

    def to_json(self, full: bool = False) -> str:
        return json.dumps(self.to_dict(full), indent=2, sort_keys=True)


def _holdout_mce(spec: ModelSpec, n: int, seed: int, classifier) -> float:
    tr, te, _ = generate(spec, n, n, [seed, 7])
    x = np.vstack([tr.features, te.features])
    labels = np.concatenate([np.ones(n), np.zeros(n)])
    return mce(classifier, x, labels)


def _mis_g(g_hat):
    # squares the odds: probabilities pushed towards 0/1
    return lambda x: np.asarray(g_hat(x)) ** 2


def replicate(spec: ModelSpec, n2: int, m: int, seed: int, estimators, weight_modes, config: FitConfig, alpha: float):
    """One replication at (n2, m): a list of per-(estimator, weight_mode) results."""
    K, n1, n_fit = recipe_sizes(n2, m)
    train, test, oracle = generate(spec, n1, n2, seed)
    plan = plan_split(n1, n2, m, K, seed)
    fit_train = train.subset(plan.fit_train_idx)
    fit_test = test.subset(plan.fit_test_idx)
    out = []
    for est_obj in estimators:
        kind, cfg = _estimator(est_obj, config)
        est = _label(est_obj)
        try:
            g_hat, v_hat = fit_ratio_pair(fit_train, fit_test, kind, cfg, seed)
        except Exception as exc:  # recorded, never retried
            out.extend({"estimator": est, "weight_mode": wm, "error": str(exc)} for wm in weight_modes)
            continue
        for wm in weight_modes:
            weights_from, scores_from = {"oracle": oracle.g_hat, "estimated": g_hat, "miscalibrated": _mis_g(g_hat)}[wm], v_hat
            if wm == "miscalibrated":
                # the distorted marginal ratio replaces g_hat everywhere, scores included
                scores_from = ConditionalRatio(v_hat.classifier, weights_from)
            try:
                run = conformal_from_ratios(train, test, plan, weights_from, scores_from, alpha, oracle=oracle)
                annotate(run, "supplied" if wm == "oracle" else wm, weights_from, fit_train, fit_test)
            except Exception as exc:
                out.append({"estimator": est, "weight_mode": wm, "error": str(exc)})
                continue
            res = {
                "estimator": est,
                "weight_mode": wm,
                "reject": run.reject,
                "t": run.t_statistic,
                "p_value": run.p_value,
                "err_p": run.diagnostics.get("err_p"),
                "err_v": run.diagnostics.get("err_v"),
            }
            if wm == "estimated":
                res["mce"] = _holdout_mce(spec, n_fit, seed, g_hat.classifier)
            out.append(res)
    return out


def _label(est) -> str:
    # plugin fitters are callables; name them for the report
    return est if isinstance(est, str) else getattr(est, "__name__", repr(est))


def _estimator(est, config: FitConfig):
    if isinstance(est, str) and est.startswith("sparse-ll@"):
        lam = float(est.split("@", 1)[1])
        return "sparse-ll", FitConfig(**{**config.__dict__, "l1_lambda": lam})
    return est, config


def _task(args):
    spec, n2, m, rep, seed, estimators, weight_modes, config, alpha = args
    try:
        results = replicate(spec, n2, m, seed, estimators, weight_modes, config, alpha)
    except Exception as exc:
        results = [{"estimator": _label(e), "weight_mode": w, "error": str(exc)} for e in estimators for w in weight_modes]
    return {"n2": n2, "m": m, "rep": rep, "seed": seed, "results": results}


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def run_experiment(
    spec: ModelSpec,
    grid: dict,
    reps: int,
    base_seed: int = 0,
    config: FitConfig = FitConfig(),
    alpha: float = 0.05,
    threads: int = 1,
) -> ExperimentReport:
    """Replicate the test over a grid of (n2, m, estimator, weight mode) cells.

    ``grid`` has keys ``n2``, ``m``, ``estimators`` and ``weight_modes``
    (any of ``oracle``, ``estimated``, ``miscalibrated``). Replication r
    uses seed ``base_seed + r`` for data, split and auxiliary randomness.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    estimators = list(grid.get("estimators", ["ll"]))
    weight_modes = list(grid.get("weight_modes", ["oracle", "estimated"]))
    tasks = [
        (spec, int(n2), int(m), r, base_seed + r, estimators, weight_modes, config, alpha)
        for n2 in grid["n2"]
        for m in grid["m"]
        for r in range(reps)
    ]
    t0 = time.perf_counter()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            detail = list(pool.map(_task, tasks, chunksize=max(1, len(tasks) // (4 * threads))))
    else:
        detail = [_task(t) for t in tasks]
    rows = []
    for n2 in grid["n2"]:
        for m in grid["m"]:
            K, _, _ = recipe_sizes(int(n2), int(m))
            cell = [d for d in detail if d["n2"] == n2 and d["m"] == m]
            for est in map(_label, estimators):
                for wm in weight_modes:
                    res = [r for d in cell for r in d["results"] if r["estimator"] == est and r["weight_mode"] == wm]
                    ok = [r for r in res if "error" not in r]
                    row = {
                        "model": spec.model,
                        "hypothesis": spec.hypothesis.value,
                        "estimator": est.split("@")[0],
                        "weight_mode": wm,
                        "n2": int(n2),
                        "m": int(m),
                        "K": K,
                        "reps": len(ok),
                        "reject_frac": float(np.mean([r["reject"] for r in ok])) if ok else None,
                        "err_p": _mean(r["err_p"] for r in ok),
                        "err_v": _mean(r["err_v"] for r in ok) if not spec.is_null else None,
                        "mce": _mean(r.get("mce") for r in ok),
                        "failures": len(res) - len(ok),
                    }
                    if "@" in est:
                        row["l1_lambda"] = float(est.split("@")[1])
                    rows.append(row)
    return ExperimentReport(
        spec=spec.describe(),
        rows=rows,
        reps=reps,
        base_seed=base_seed,
        config={"grid": {k: [_label(e) for e in v] if k == "estimators" else list(v) for k, v in grid.items()}, "alpha": alpha, "fit": _config_dict(config)},
        wall_time=time.perf_counter() - t0,
        replications=detail,
    )


def lambda_sweep(
    spec: ModelSpec,
    n2: int,
    m: int,
    lambdas,
    reps: int,
    base_seed: int = 0,
    config: FitConfig = FitConfig(),
    alpha: float = 0.05,
    threads: int = 1,
) -> ExperimentReport:
    """Sparse-logistic experiment over a grid of L1 penalties (one row per lambda and weight mode)."""
    grid = {
        "n2": [n2],
        "m": [m],
        "estimators": [f"sparse-ll@{float(lam)!r}" for lam in lambdas],
        "weight_modes": ["oracle", "estimated"],
    }
    return run_experiment(spec, grid, reps, base_seed, config, alpha, threads)


def _config_dict(config: FitConfig) -> dict:
    d = dict(config.__dict__)
    d["hidden_layers"] = list(d["hidden_layers"])
    return d


__all__ = [
    "ExperimentReport",
    "GenerationError",
    "PrecomputedClassifier",
    "RatioModel",
    "err_p",
    "err_v",
    "exponential_tilt_resample",
    "generate",
    "lambda_sweep",
    "mce",
    "recipe_sizes",
    "replicate",
    "run_experiment",
]
