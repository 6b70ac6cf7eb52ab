"""Command-line front end: ``covshift test | simulate | aggregate``.

Exit status 0 means the command ran; a rejection is a result, not a fault.
Failures map to 2 (configuration), 3 (data) and 4 (numerical fitting).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .classifiers import ClassifierKind, FitConfig, FitError
from .conformal import DEFAULT_B, DEFAULT_M, RatioFitError, median_p, run_test
from .dataset import DataError, Population, SizingError, default_k, fingerprint_file, load_csv
from .models import MODELS, ModelSpec
from .simulation import GenerationError, lambda_sweep, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ESTIMATORS = [k.value for k in ClassifierKind]


class CliError(Exception):
    def __init__(self, code: int, stage: str, message: str):
        super().__init__(message)
        self.code = code
        self.stage = stage


def _fail_config(msg: str):
    raise CliError(EXIT_CONFIG, "config", msg)


def _threads(value) -> int:
    return max(1, int(value)) if value is not None else (os.cpu_count() or 1)


def _fit_config(args) -> FitConfig:
    kw = {}
    if getattr(args, "l1_lambda", None) is not None and not isinstance(args.l1_lambda, list):
        kw["l1_lambda"] = args.l1_lambda
    if getattr(args, "hidden", None):
        kw["hidden_layers"] = tuple(args.hidden)
    try:
        return FitConfig(**kw)
    except ValueError as exc:
        _fail_config(str(exc))


def _config_dict(cfg: FitConfig) -> dict:
    d = dict(cfg.__dict__)
    d["hidden_layers"] = list(d["hidden_layers"])
    return d


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
        return
    try:
        Path(out).write_text(text, encoding="utf-8")
    except OSError as exc:
        _fail_config(f"cannot write {out}: {exc}")


# -- test ------------------------------------------------------------------------


def _one_run(job):
    train, test, m, K, kind, cfg, alpha, seed, equal_marginals, fp = job
    run = run_test(train, test, m=m, K=K, classifier_kind=kind, config=cfg, alpha=alpha, seed=seed,
                   equal_marginals=equal_marginals)
    d = run.to_dict()
    d["data_fingerprint"] = fp
    return d


def cmd_test(args) -> int:
    if not 0.0 < args.alpha < 1.0:
        _fail_config("alpha must be in (0,1)")
    if args.b < 1:
        _fail_config("--b must be >= 1")
    if args.m < 1:
        _fail_config("--m must be >= 1")
    cfg = _fit_config(args)
    for p in (args.train, args.test):
        if not Path(p).is_file():
            raise CliError(EXIT_DATA, "load", f"no such file: {p}")
    try:
        train = load_csv(args.train, args.response, Population.TRAIN)
        test = load_csv(args.test, args.response, Population.TEST)
    except DataError as exc:
        raise CliError(EXIT_DATA, "load", str(exc)) from None
    if train.columns != test.columns:
        raise CliError(EXIT_DATA, "load", f"covariate columns differ: {list(train.columns)} vs {list(test.columns)}")
    fp = {"train": fingerprint_file(args.train), "test": fingerprint_file(args.test)}
    fingerprint = f"{fp['train']}:{fp['test']}"

    K = args.k
    if K is None:
        if test.n < 3 or train.n < 2 * args.m + 1:
            _fail_config(f"samples too small to choose K automatically (n1={train.n}, n2={test.n}, m={args.m})")
        K = default_k(test.n, train.n, args.m)
    seeds = list(range(args.seed, args.seed + args.b))
    jobs = [(train, test, args.m, K, args.estimator, cfg, args.alpha, s, args.equal_marginals, fingerprint) for s in seeds]
    threads = min(_threads(args.threads), len(jobs))
    try:
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                runs = list(pool.map(_one_run, jobs))
        else:
            runs = [_one_run(j) for j in jobs]
    except SizingError as exc:
        raise CliError(EXIT_CONFIG, "split", str(exc)) from None
    except (RatioFitError, FitError, FloatingPointError, ArithmeticError) as exc:
        raise CliError(EXIT_NUMERIC, "fit", str(exc)) from None

    p_values = [r["p_value"] for r in runs]
    warnings = []
    if args.equal_marginals:
        warnings.append("equal marginals assumed: weights were forced to 1/(m+1); the test is invalid if the covariate laws differ")
    report = {
        "command": "test",
        "version": __version__,
        "config": {
            "train": str(args.train),
            "test": str(args.test),
            "response": args.response,
            "m": args.m,
            "K": K,
            "alpha": args.alpha,
            "estimator": args.estimator,
            "equal_marginals": args.equal_marginals,
            "B": args.b,
            "seed": args.seed,
            "fit": _config_dict(cfg),
        },
        "data": {"train": {"n": train.n, "p": train.p, "fingerprint": fp["train"]},
                 "test": {"n": test.n, "p": test.p, "fingerprint": fp["test"]}},
        "data_fingerprint": fingerprint,
        "seeds": seeds,
        "runs": runs,
        "B": args.b,
        "p_values": p_values,
        "combined_p": median_p(p_values),
        "reject": median_p(p_values) <= args.alpha,
        "warnings": warnings,
    }
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "m", "K", "t", "p_value", "reject"])
        for r in runs:
            w.writerow([r["seed"], r["m"], r["K"], repr(r["t"]), repr(r["p_value"]), r["reject"]])
        _emit(buf.getvalue(), args.out)
    else:
        _emit(json.dumps(report, indent=2, sort_keys=True), args.out)
    print(f"B={args.b} combined_p={report['combined_p']:.6g} reject={report['reject']}", file=sys.stderr)
    return EXIT_OK


# -- simulate ----------------------------------------------------------------------


def cmd_simulate(args) -> int:
    if not 0.0 < args.alpha < 1.0:
        _fail_config("alpha must be in (0,1)")
    if args.reps < 1:
        _fail_config("--reps must be >= 1")
    if any(m < 1 for m in args.m) or any(n < 3 for n in args.n2):
        _fail_config("--m must be >= 1 and --n2 >= 3")
    try:
        spec = ModelSpec.make(args.model, args.hypothesis, p=args.p, seed=args.seed, s=args.s)
    except ValueError as exc:
        _fail_config(str(exc))
    lambdas = args.l1_lambda or []
    args_cfg = argparse.Namespace(hidden=args.hidden)
    cfg = _fit_config(args_cfg)
    threads = _threads(args.threads)
    try:
        if "sparse-ll" in args.estimator and len(lambdas) > 0:
            if len(args.n2) != 1 or len(args.m) != 1:
                _fail_config("a lambda sweep takes a single --n2 and --m")
            report = lambda_sweep(spec, args.n2[0], args.m[0], lambdas, args.reps, args.seed, cfg, args.alpha, threads)
        else:
            grid = {"n2": args.n2, "m": args.m, "estimators": args.estimator, "weight_modes": args.weights}
            report = run_experiment(spec, grid, args.reps, args.seed, cfg, args.alpha, threads)
    except GenerationError as exc:
        raise CliError(EXIT_NUMERIC, "generate", str(exc)) from None
    except SizingError as exc:
        raise CliError(EXIT_CONFIG, "split", str(exc)) from None

    for row in report.rows:
        lam = f" lambda={row['l1_lambda']:g}" if "l1_lambda" in row else ""
        rf = "nan" if row["reject_frac"] is None else f"{row['reject_frac']:.3f}"
        ep = "" if row["err_p"] is None else f" err_p={row['err_p']:.3f}"
        print(
            f"model={row['model']} {row['hypothesis']} {row['estimator']}{lam} weights={row['weight_mode']} "
            f"n2={row['n2']} m={row['m']} K={row['K']} reject={rf}{ep} failures={row['failures']}",
            file=sys.stderr,
        )
    if args.format == "csv":
        _emit(report.to_csv(), args.out)
    else:
        d = report.to_dict(full=args.full)
        d["version"] = __version__
        d["command"] = "simulate"
        d["config"]["model"] = {"model": spec.model, "hypothesis": spec.hypothesis.value, "p": spec.p, "s": spec.s}
        d["config"]["seed"] = args.seed
        d["config"]["reps"] = args.reps
        d["seeds"] = [args.seed + r for r in range(args.reps)]
        _emit(json.dumps(d, indent=2, sort_keys=True), args.out)
    return EXIT_OK


# -- aggregate -----------------------------------------------------------------------


def _collect(paths) -> list[Path]:
    files: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.glob("*.json")))
        elif p.is_file():
            files.append(p)
        else:
            raise CliError(EXIT_DATA, "load", f"no such file or directory: {p}")
    if not files:
        raise CliError(EXIT_DATA, "load", "no JSON run files found")
    return files


def _runs_in(doc) -> list[dict]:
    if isinstance(doc, dict) and "runs" in doc:
        return [dict(r, data_fingerprint=r.get("data_fingerprint", doc.get("data_fingerprint"))) for r in doc["runs"]]
    if isinstance(doc, dict) and "p_value" in doc:
        return [doc]
    if isinstance(doc, list):
        return [r for item in doc for r in _runs_in(item)]
    raise ValueError("not a conformal run")


def cmd_aggregate(args) -> int:
    runs = []
    for f in _collect(args.inputs):
        try:
            runs.extend(_runs_in(json.loads(f.read_text(encoding="utf-8"))))
        except (OSError, ValueError) as exc:
            raise CliError(EXIT_DATA, "load", f"{f}: {exc}") from None
    fps = {r.get("data_fingerprint") for r in runs}
    if len(fps) > 1:
        raise CliError(EXIT_DATA, "provenance", f"runs come from different data (fingerprints: {sorted(map(str, fps))})")
    p_values = []
    for r in runs:
        p = r["p_value"]
        if not isinstance(p, (int, float)) or not 0.0 <= p <= 1.0:
            raise CliError(EXIT_DATA, "load", f"invalid p-value {p!r}")
        p_values.append(float(p))
    out = {"B": len(p_values), "p_values": p_values, "combined_p": median_p(p_values),
           "data_fingerprint": fps.pop(), "version": __version__}
    if args.format == "csv":
        _emit(f"B,combined_p\n{out['B']},{out['combined_p']!r}\n", args.out)
    else:
        _emit(json.dumps(out, indent=2, sort_keys=True), args.out)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="covshift", description="Conformal test of covariate shift.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None, help="worker processes (default: all cores)")
        p.add_argument("--out", default=None, help="output file (default: stdout)")
        p.add_argument("--format", choices=["json", "csv"], default="json")
        p.add_argument("--hidden", type=int, nargs="+", default=None, help="NN hidden layer widths")

    t = sub.add_parser("test", help="run the test on two CSV files")
    t.add_argument("--train", required=True)
    t.add_argument("--test", required=True)
    t.add_argument("--response", default="y")
    t.add_argument("--m", type=int, default=DEFAULT_M)
    t.add_argument("--k", type=int, default=None)
    t.add_argument("--estimator", choices=ESTIMATORS, default="ll")
    t.add_argument("--l1-lambda", type=float, default=None)
    t.add_argument("--equal-marginals", action="store_true")
    t.add_argument("--b", type=int, default=DEFAULT_B, help="auxiliary-randomization replays")
    common(t)
    t.set_defaults(func=cmd_test)

    s = sub.add_parser("simulate", help="replicate the test on a simulation model")
    s.add_argument("--model", type=str.upper, choices=MODELS, required=True)
    s.add_argument("--hypothesis", choices=["null", "alt"], default="null")
    s.add_argument("--p", type=int, default=5)
    s.add_argument("--s", type=int, default=None, help="signal coordinates (model A only)")
    s.add_argument("--n2", type=int, nargs="+", default=[200])
    s.add_argument("--m", type=int, nargs="+", default=[DEFAULT_M])
    s.add_argument("--estimator", choices=ESTIMATORS, nargs="+", default=["ll"])
    s.add_argument("--l1-lambda", type=float, nargs="+", default=None, help="lambda grid for sparse-ll")
    s.add_argument("--weights", choices=["estimated", "oracle"], nargs="+", default=["estimated"])
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--full", action="store_true", help="include per-replication detail in JSON")
    common(s)
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("aggregate", help="median-p combination of saved runs")
    a.add_argument("inputs", nargs="+", help="run JSON files or directories")
    a.add_argument("--out", default=None)
    a.add_argument("--format", choices=["json", "csv"], default="json")
    a.set_defaults(func=cmd_aggregate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return exc.code
    except (DataError,) as exc:
        print(f"error [data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SizingError, ValueError) as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FitError, RatioFitError, FloatingPointError, ArithmeticError) as exc:
        print(f"error [numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
