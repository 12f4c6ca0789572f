"""Tabular fairness data: CSV ingestion, subset splits, episode sampling, synthetic data."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import norm

log = logging.getLogger(__name__)

MAX_QUERY_ATTEMPTS = 1000


class SchemaError(ValueError):
    pass


class DataValidationError(ValueError):
    pass


class SamplingInfeasibleError(RuntimeError):
    pass


@dataclass(frozen=True)
class Schema:
    """Column roles of a CSV file. Every other column must be numeric and becomes a feature."""

    label: str
    sensitive: str
    subset: str
    categorical: tuple[str, ...] = ()
    drop: tuple[str, ...] = ()
    sensitive_as_feature: bool = True


@dataclass(frozen=True, eq=False)
class DatasetTable:
    features: np.ndarray
    labels: np.ndarray
    sensitive: np.ndarray
    subset: np.ndarray
    subset_names: tuple[str, ...]
    feature_names: tuple[str, ...]
    sensitive_feature: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.features.shape[0]
        if not (self.labels.shape == self.sensitive.shape == self.subset.shape == (n,)):
            raise DataValidationError("features, labels, sensitive and subset must be row-aligned")
        for name, col in (("label", self.labels), ("sensitive", self.sensitive)):
            if not np.isin(col, (0, 1)).all():
                raise DataValidationError(f"{name} values must be 0/1")
        if n and (self.subset.min() < 0 or self.subset.max() >= len(self.subset_names)):
            raise DataValidationError("subset codes out of range")
        for code in range(len(self.subset_names)):
            if not np.any(self.subset == code):
                raise DataValidationError(f"subset {self.subset_names[code]!r} is empty")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_subsets(self) -> int:
        return len(self.subset_names)

    @cached_property
    def _rows_by_subset(self) -> list[np.ndarray]:
        order = np.argsort(self.subset, kind="stable")
        bounds = np.searchsorted(self.subset[order], np.arange(self.n_subsets + 1))
        return [order[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]

    def subset_rows(self, code: int) -> np.ndarray:
        return self._rows_by_subset[code]

    def without_sensitive_feature(self) -> DatasetTable:
        """Copy with the sensitive feature column zeroed (the sensitive-attribute-removed baseline)."""
        if self.sensitive_feature is None:
            return self
        x = self.features.copy()
        x[:, self.sensitive_feature] = 0.0
        return replace(self, features=x)

    def batch(self, rows) -> Batch:
        rows = np.asarray(rows, dtype=np.intp)
        return Batch(self.features[rows], self.labels[rows], self.sensitive[rows], rows)


@dataclass(frozen=True, eq=False)
class Batch:
    x: np.ndarray
    y: np.ndarray
    a: np.ndarray
    rows: np.ndarray

    def __len__(self):
        return self.x.shape[0]


@dataclass(frozen=True, eq=False)
class Episode:
    support: Batch
    query: Batch
    subset: int


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        parts = (set(self.train), set(self.val), set(self.test))
        if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
            raise DataValidationError("train/val/test subsets must be disjoint")

    def validate(self, table: DatasetTable) -> None:
        known = set(range(table.n_subsets))
        extra = (set(self.train) | set(self.val) | set(self.test)) - known
        if extra:
            raise DataValidationError(f"split names unknown subset codes {sorted(extra)}")


def make_split(table: DatasetTable, n_train: int | None = None, n_val: int | None = None,
               n_test: int | None = None, seed: int = 0) -> SplitSpec:
    """Random disjoint subset split; unspecified counts follow a 22:6:6 proportion."""
    n = table.n_subsets
    if n_val is None:
        n_val = max(1, round(n * 6 / 34)) if n_train is None or n_test is None else n - n_train - n_test
    if n_test is None:
        n_test = max(1, round(n * 6 / 34)) if n_train is None else n - n_train - n_val
    if n_train is None:
        n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 0 or n_train + n_val + n_test > n or n_train < 1:
        raise DataValidationError(f"cannot split {n} subsets into {n_train}/{n_val}/{n_test}")
    perm = np.random.default_rng(seed).permutation(n)
    train = tuple(sorted(int(i) for i in perm[:n_train]))
    val = tuple(sorted(int(i) for i in perm[n_train:n_train + n_val]))
    test = tuple(sorted(int(i) for i in perm[n_train + n_val:n_train + n_val + n_test]))
    return SplitSpec(train, val, test, seed)


# -- CSV ingestion ------------------------------------------------------------

def read_csv(path, schema: Schema) -> DatasetTable:
    """Read a CSV into an unnormalized table; rows with missing values are dropped."""
    df = pd.read_csv(path, sep=",", decimal=".", encoding="utf-8", float_precision="round_trip")
    for role, col in (("label", schema.label), ("sensitive", schema.sensitive), ("subset", schema.subset)):
        if col not in df.columns:
            raise SchemaError(f"missing {role} column {col!r}")
    for col in schema.categorical + schema.drop:
        if col not in df.columns:
            raise SchemaError(f"missing column {col!r}")
    df = df.drop(columns=list(schema.drop))
    n_before = len(df)
    df = df.dropna().reset_index(drop=True)
    dropped = n_before - len(df)
    if dropped:
        log.info("dropped %d rows with missing values from %s", dropped, path)
    if schema.categorical:
        df = pd.get_dummies(df, columns=list(schema.categorical), dtype=float)

    labels = _binary_column(df[schema.label], "label")
    sensitive = _binary_column(df[schema.sensitive], "sensitive")
    names, codes = np.unique(df[schema.subset].astype(str).to_numpy(), return_inverse=True)

    feature_cols = [c for c in df.columns if c not in (schema.label, schema.sensitive, schema.subset)]
    non_numeric = [c for c in feature_cols if not pd.api.types.is_numeric_dtype(df[c])]
    if non_numeric:
        raise SchemaError(f"non-numeric feature columns {non_numeric}; declare them categorical")
    features = df[feature_cols].to_numpy(dtype=np.float64)
    sensitive_feature = None
    if schema.sensitive_as_feature:
        features = np.column_stack([features, sensitive.astype(np.float64)])
        feature_cols.append(schema.sensitive)
        sensitive_feature = len(feature_cols) - 1
    return DatasetTable(features, labels, sensitive, codes.astype(np.intp), tuple(str(n) for n in names),
                        tuple(feature_cols), sensitive_feature, {"dropped_rows": dropped, "source": str(path)})


def _binary_column(col: pd.Series, role: str) -> np.ndarray:
    values = pd.to_numeric(col, errors="coerce").to_numpy()
    if np.isnan(values).any() or not np.isin(values, (0, 1)).all():
        bad = sorted(set(col[~np.isin(values, (0, 1))].astype(str)))[:5]
        raise DataValidationError(f"{role} column must be binary 0/1, found {bad}")
    return values.astype(np.intp)


def standardize(table: DatasetTable, subsets) -> DatasetTable:
    """Z-score every feature column using statistics from the given subsets only."""
    mask = np.isin(table.subset, np.asarray(list(subsets)))
    if not mask.any():
        raise DataValidationError("no rows in the subsets used for normalization statistics")
    ref = table.features[mask]
    mu = ref.mean(axis=0)
    sd = ref.std(axis=0)
    sd[sd == 0] = 1.0
    meta = dict(table.meta, feature_mean=mu.tolist(), feature_std=sd.tolist())
    return replace(table, features=(table.features - mu) / sd, meta=meta)


def load_csv(path, schema: Schema, train_subsets=None) -> DatasetTable:
    """Read and z-score a CSV. Statistics come from ``train_subsets`` (subset names), or all rows."""
    table = read_csv(path, schema)
    if train_subsets is None:
        codes = range(table.n_subsets)
    else:
        lookup = {name: i for i, name in enumerate(table.subset_names)}
        missing = [s for s in train_subsets if str(s) not in lookup]
        if missing:
            raise SchemaError(f"unknown subsets {missing}")
        codes = [lookup[str(s)] for s in train_subsets]
    return standardize(table, codes)


# -- episodes -----------------------------------------------------------------

def _eligible_subsets(table: DatasetTable, subsets, k_shot: int, query_size: int, n_way: int):
    reasons = {"class": 0, "size": 0, "groups": 0}
    eligible = []
    for s in subsets:
        rows = table.subset_rows(s)
        if np.bincount(table.labels[rows], minlength=n_way).min() < k_shot:
            reasons["class"] += 1
        elif len(rows) < n_way * k_shot + query_size:
            reasons["size"] += 1
        elif np.unique(table.sensitive[rows]).size < 2:
            reasons["groups"] += 1
        else:
            eligible.append(s)
    return eligible, reasons


def sample_episode(table: DatasetTable, subsets, k_shot: int, query_size: int,
                   rng: np.random.Generator, n_way: int = 2) -> Episode:
    """Draw an N-way K-shot episode from one uniformly chosen subset.

    The query always contains both sensitive groups; it is resampled up to
    ``MAX_QUERY_ATTEMPTS`` times before giving up.
    """
    if n_way != 2:
        raise ValueError("only binary (2-way) episodes are supported")
    subsets = list(subsets)
    eligible, reasons = _eligible_subsets(table, subsets, k_shot, query_size, n_way)
    if not eligible:
        raise SamplingInfeasibleError(
            f"no eligible subset among {len(subsets)}: {reasons['class']} lack {k_shot} samples per class, "
            f"{reasons['size']} are smaller than {n_way * k_shot + query_size} rows, "
            f"{reasons['groups']} contain a single sensitive group")
    for _ in range(MAX_QUERY_ATTEMPTS):
        s = eligible[rng.integers(len(eligible))]
        rows = table.subset_rows(s)
        labels = table.labels[rows]
        picked = np.concatenate([rng.choice(rows[labels == c], size=k_shot, replace=False)
                                 for c in range(n_way)])
        rest = np.setdiff1d(rows, picked, assume_unique=True)
        query = rng.choice(rest, size=query_size, replace=False)
        if np.unique(table.sensitive[query]).size == 2:
            return Episode(table.batch(picked), table.batch(query), int(s))
    raise SamplingInfeasibleError(
        f"query with both sensitive groups not found after {MAX_QUERY_ATTEMPTS} attempts")


# -- synthetic data -----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Generating parameters for biased tabular data.

    Each subset draws its own sensitive-group rate and bias multiplier. Given
    ``(y, a)``, features are Gaussian with unit noise: ``n_signal`` columns
    carry the label only, ``n_proxy`` columns carry the label plus a group
    shift ``delta * (a - 1/2)`` scaled by the subset's multiplier, and the
    remaining columns are noise. The label rate also depends on the group,
    ``P(y=1 | a) = Phi(label_coupling * delta * (a - 1/2))``, so ``delta = 0``
    gives independent labels and groups. The sensitive attribute itself is
    appended as the last feature column.
    """

    delta: float = 2.0
    n_features: int = 12
    n_signal: int = 4
    n_proxy: int = 3
    signal: float = 0.5
    p_sensitive: float = 0.5
    group_rate_spread: float = 0.3
    bias_spread: float = 0.5
    label_coupling: float = 0.25
    subset_shift: float = 0.3

    def validate(self) -> None:
        if self.delta < 0:
            raise DataValidationError("delta must be non-negative")
        if not 0.0 < self.p_sensitive < 1.0:
            raise DataValidationError("p_sensitive must lie in (0, 1)")
        if self.n_signal + self.n_proxy > self.n_features - 1:
            raise DataValidationError("signal and proxy blocks exceed the feature count")
        if not 0.0 <= self.group_rate_spread < 1.0 or not 0.0 <= self.bias_spread < 1.0:
            raise DataValidationError("spreads must lie in [0, 1)")


def make_synthetic(spec: SyntheticSpec, n_samples: int, n_subsets: int, seed: int) -> DatasetTable:
    spec.validate()
    if n_subsets < 1 or n_samples < n_subsets:
        raise DataValidationError("need at least one sample per subset")
    rng = np.random.default_rng(seed)
    n_cont = spec.n_features - 1

    subset = np.sort(rng.integers(n_subsets, size=n_samples))
    subset[:n_subsets] = np.arange(n_subsets)  # every subset non-empty
    subset.sort()
    # per-subset group rate (imbalance), bias multiplier and mean offset
    logit_p = np.log(spec.p_sensitive / (1 - spec.p_sensitive))
    spread = np.log((1 + spec.group_rate_spread) / (1 - spec.group_rate_spread)) * 2
    group_rate = 1.0 / (1.0 + np.exp(-(logit_p + rng.uniform(-spread, spread, n_subsets))))
    bias_mult = 1.0 + rng.uniform(-spec.bias_spread, spec.bias_spread, n_subsets)
    offset = rng.normal(0.0, spec.subset_shift, size=(n_subsets, n_cont))

    a = (rng.random(n_samples) < group_rate[subset]).astype(np.intp)
    p_y = norm.cdf(spec.label_coupling * spec.delta * (a - 0.5))
    y = (rng.random(n_samples) < p_y).astype(np.intp)

    x = rng.normal(size=(n_samples, n_cont)) + offset[subset]
    sig = slice(0, spec.n_signal)
    prox = slice(spec.n_signal, spec.n_signal + spec.n_proxy)
    x[:, sig] += (spec.signal * (y - 0.5))[:, None]
    x[:, prox] += (spec.signal * (y - 0.5) + spec.delta * bias_mult[subset] * (a - 0.5))[:, None]

    features = np.column_stack([x, a.astype(np.float64)])
    names = tuple(f"x{i}" for i in range(n_cont)) + ("a",)
    meta = {"generator": asdict(spec), "n_samples": n_samples, "n_subsets": n_subsets, "seed": seed,
            "group_rate": group_rate.tolist(), "bias_mult": bias_mult.tolist()}
    return DatasetTable(features, y, a, subset.astype(np.intp),
                        tuple(f"s{i:02d}" for i in range(n_subsets)), names, n_cont, meta)


SYNTHETIC_SCHEMA = Schema(label="y", sensitive="a", subset="subset")


def write_synthetic(table: DatasetTable, path) -> Path:
    """Write ``table`` as CSV (schema ``SYNTHETIC_SCHEMA``) with a JSON sidecar of generating parameters."""
    path = Path(path)
    cols = [i for i in range(table.n_features) if i != table.sensitive_feature]
    df = pd.DataFrame(table.features[:, cols], columns=[table.feature_names[i] for i in cols])
    df["a"] = table.sensitive
    df["y"] = table.labels
    df["subset"] = [table.subset_names[c] for c in table.subset]
    df.to_csv(path, index=False, float_format="%.17g")
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(table.meta, indent=2, sort_keys=True))
    return sidecar
