"""Labeled samples, CSV ingestion and the randomized sample split."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Raised when input data cannot be loaded or violates the data model."""


class SizingError(ValueError):
    """Raised when (m, K) cannot be realized with the available sample sizes."""


class Population(str, Enum):
    TRAIN = "train"
    TEST = "test"


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LabeledSample:
    """Covariates ``features`` (n x p) and ``response`` (n,) from one population."""

    features: np.ndarray
    response: np.ndarray
    population: Population = Population.TRAIN
    columns: tuple[str, ...] | None = None

    def __post_init__(self):
        x = _frozen(self.features)
        y = _frozen(self.response).reshape(-1)
        if x.ndim == 1:
            x = _frozen(x.reshape(-1, 1))
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DataError(f"features must be a non-empty n x p matrix, got shape {x.shape}")
        if y.shape[0] != x.shape[0]:
            raise DataError(f"response has {y.shape[0]} rows but features have {x.shape[0]}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DataError("features and response must be finite")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "population", Population(self.population))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledSample":
        idx = np.asarray(idx, dtype=int)
        return LabeledSample(self.features[idx], self.response[idx], self.population, self.columns)

    def joint(self) -> np.ndarray:
        """The (x, y) design used by the joint classifier."""
        return np.column_stack([self.features, self.response])


def load_csv(path, response: str, population: Population | str = Population.TRAIN) -> LabeledSample:
    """Read a headed CSV file; ``response`` names the response column.

    Every other column is a covariate, kept in file order. Any cell that
    does not parse as a finite real aborts the load with its location.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if response not in header:
        raise DataError(f"{path}: response column {response!r} not found in header {header}")
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    resp_col = header.index(response)
    values = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: line {i} has {len(row)} fields, expected {len(header)}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: line {i}, column {header[j]!r}: cannot parse {cell!r} as a real"
                ) from None
            if not math.isfinite(v):
                raise DataError(f"{path}: line {i}, column {header[j]!r}: non-finite value {cell!r}")
            values[i - 2, j] = v
    feat_cols = [j for j in range(len(header)) if j != resp_col]
    if not feat_cols:
        raise DataError(f"{path}: no covariate columns besides the response")
    return LabeledSample(
        values[:, feat_cols],
        values[:, resp_col],
        Population(population),
        tuple(header[j] for j in feat_cols),
    )


def write_csv(sample: LabeledSample, path, response: str = "y", precision: int = 17) -> None:
    """Write ``sample`` with covariate columns first and the response last."""
    cols = list(sample.columns or [f"x{j + 1}" for j in range(sample.p)])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols + [response])
        for x, y in zip(sample.features, sample.response):
            w.writerow([f"{v:.{precision}g}" for v in x] + [f"{y:.{precision}g}"])


def fingerprint_bytes(data: bytes) -> str:
    """64-bit hex hash of CSV bytes after normalizing line endings and blank lines."""
    text = data.decode("utf-8").replace("\r\n", "\n").replace("\r", "\n")
    canon = "\n".join(line.strip() for line in text.split("\n") if line.strip())
    return hashlib.blake2b(canon.encode("utf-8"), digest_size=8).hexdigest()


def fingerprint_file(path) -> str:
    return fingerprint_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class SplitPlan:
    """Index sets of one random split; all indices are zero-based.

    ``batches[k]`` is paired with ``rank_test_idx[k]``.
    """

    seed: int
    m: int
    K: int
    fit_train_idx: np.ndarray
    rank_train_idx: np.ndarray
    fit_test_idx: np.ndarray
    rank_test_idx: np.ndarray
    batches: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "m": int(self.m),
            "K": int(self.K),
            "i11": self.fit_train_idx.tolist(),
            "i12": self.rank_train_idx.tolist(),
            "i21": self.fit_test_idx.tolist(),
            "i22": self.rank_test_idx.tolist(),
            "batches": self.batches.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(
            seed=int(d["seed"]),
            m=int(d["m"]),
            K=int(d["K"]),
            fit_train_idx=_frozen(d["i11"], int),
            rank_train_idx=_frozen(d["i12"], int),
            fit_test_idx=_frozen(d["i21"], int),
            rank_test_idx=_frozen(d["i22"], int),
            batches=_frozen(d["batches"], int).reshape(int(d["K"]), int(d["m"])),
        )


def check_sizes(n1: int, n2: int, m: int, K: int) -> None:
    if m < 1 or K < 1:
        raise SizingError(f"m and K must be >= 1 (got m={m}, K={K})")
    if m * K > n1 - 1:
        raise SizingError(f"need m*K <= n1 - 1, but m*K = {m * K} and n1 - 1 = {n1 - 1}")
    if K > n2 - 1:
        raise SizingError(f"need K <= n2 - 1, but K = {K} and n2 - 1 = {n2 - 1}")


def plan_split(n1: int, n2: int, m: int, K: int, seed: int) -> SplitPlan:
    """Randomly carve out K ranking batches of size m and K ranking test points.

    The remaining indices form the fitting subsamples. The result depends
    only on the arguments.
    """
    check_sizes(n1, n2, m, K)
    rng = np.random.default_rng([int(seed), 1])
    perm1 = rng.permutation(n1)
    perm2 = rng.permutation(n2)
    ranked = perm1[: m * K]
    return SplitPlan(
        seed=int(seed),
        m=int(m),
        K=int(K),
        fit_train_idx=_frozen(np.sort(perm1[m * K :]), int),
        rank_train_idx=_frozen(np.sort(ranked), int),
        fit_test_idx=_frozen(np.sort(perm2[K:]), int),
        rank_test_idx=_frozen(perm2[:K], int),
        batches=_frozen(ranked.reshape(K, m), int),
    )


def default_k(n2: int, n1: int, m: int) -> int:
    """min(ceil(n2 / ln n2), floor(n1 / 2m)), capped at n2 - 1."""
    if n2 < 3:
        raise SizingError(f"default K needs n2 >= 3, got {n2}")
    if m < 1 or n1 < 2 * m + 1:
        raise SizingError(f"default K needs n1 >= 2m + 1, got n1={n1}, m={m}")
    return int(min(math.ceil(n2 / math.log(n2)), n1 // (2 * m), n2 - 1))
