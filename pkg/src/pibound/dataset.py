"""Tabular datasets: CSV ingestion, deterministic splits, segments, curation.

A :class:`Dataset` is an immutable ordered collection of samples with a shared
feature dimension. Row order is treated as stream/time order, which is what
the recency term of :func:`curate_uncertain` keys on.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError

FLOAT_DIGITS = 17  # significant digits; round-trips float64 exactly

QUANTILE_BINS = "feature-quantile-bins"
PROVIDED_LABEL = "provided-label"


@dataclass(frozen=True)
class Sample:
    """One observation: feature vector ``x`` and scalar target ``y``."""

    x: np.ndarray
    y: float
    id: int
    segment: str | None = None


@dataclass(frozen=True)
class Dataset:
    """Ordered, immutable collection of samples sharing feature dimension d.

    ``ids`` are unique within the dataset; fresh CSV loads use row indices and
    stream batches use global stream positions.
    """

    X: np.ndarray
    y: np.ndarray
    ids: np.ndarray | None = None
    segments: tuple[str, ...] | None = None
    name: str = "dataset"
    feature_names: tuple[str, ...] = ()
    target_name: str = "y"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if X.ndim != 2:
            raise DataError(f"X must be 2-d, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DataError(f"y shape {y.shape} does not match {X.shape[0]} rows")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
            raise DataError("features and targets must be finite")
        ids = self.ids
        if ids is None:
            ids = np.arange(X.shape[0], dtype=np.int64)
        else:
            ids = np.asarray(ids, dtype=np.int64)
            if ids.shape != (X.shape[0],):
                raise DataError("ids length does not match number of rows")
            if len(np.unique(ids)) != len(ids):
                raise DataError(f"duplicate sample ids in dataset '{self.name}'")
        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataError("feature_names length does not match feature dimension")
        if self.segments is not None and len(self.segments) != X.shape[0]:
            raise DataError("segments length does not match number of rows")
        for arr in (X, y, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "feature_names", names)
        if self.segments is not None:
            object.__setattr__(self, "segments", tuple(str(s) for s in self.segments))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.n

    def sample(self, i: int) -> Sample:
        seg = self.segments[i] if self.segments is not None else None
        return Sample(x=self.X[i], y=float(self.y[i]), id=int(self.ids[i]), segment=seg)

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(self.n)]

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        segs = tuple(self.segments[i] for i in idx) if self.segments is not None else None
        return Dataset(
            X=self.X[idx],
            y=self.y[idx],
            ids=self.ids[idx],
            segments=segs,
            name=name or self.name,
            feature_names=self.feature_names,
            target_name=self.target_name,
        )

    def with_segments(self, labels) -> "Dataset":
        return replace(self, segments=tuple(str(s) for s in labels))

    def segment_labels(self) -> list[str]:
        """Distinct segment labels in sorted order."""
        if self.segments is None:
            raise DataError(f"dataset '{self.name}' has no segments assigned")
        return sorted(set(self.segments))


def fingerprint_dataset(ds: Dataset) -> str:
    """Content hash over rows, ids, and targets (order-sensitive)."""
    h = hashlib.sha256()
    h.update(str(ds.X.shape).encode())
    h.update(np.ascontiguousarray(ds.X).tobytes())
    h.update(np.ascontiguousarray(ds.y).tobytes())
    h.update(np.ascontiguousarray(ds.ids).tobytes())
    return h.hexdigest()


def concatenate(datasets: list[Dataset], name: str = "concat") -> Dataset:
    """Stack datasets in order; ids must stay unique across the parts."""
    if not datasets:
        raise DataError("cannot concatenate zero datasets")
    first = datasets[0]
    if any(ds.d != first.d for ds in datasets):
        raise DataError("feature dimensions differ across datasets")
    segs = None
    if all(ds.segments is not None for ds in datasets):
        segs = tuple(s for ds in datasets for s in ds.segments)
    return Dataset(
        X=np.concatenate([ds.X for ds in datasets]),
        y=np.concatenate([ds.y for ds in datasets]),
        ids=np.concatenate([ds.ids for ds in datasets]),
        segments=segs,
        name=name,
        feature_names=first.feature_names,
        target_name=first.target_name,
    )


@dataclass(frozen=True)
class SplitSpec:
    """Train / calibration / test fractions plus the shuffle seed."""

    train: float
    calibration: float
    test: float
    seed: int

    def __post_init__(self):
        for label, frac in (("train", self.train), ("calibration", self.calibration), ("test", self.test)):
            if not 0.0 <= frac <= 1.0:
                raise ConfigError(f"split fraction '{label}' must be in [0, 1], got {frac}")
        total = self.train + self.calibration + self.test
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1 (got {total!r})")


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministically shuffle and partition a dataset.

    Calibration and test sizes are floor(N * fraction); the remainder goes to
    train, so calibration/test sizes are exactly predictable. The same seed
    always produces the same assignment.
    """
    n_positive = sum(1 for f in (spec.train, spec.calibration, spec.test) if f > 0)
    if ds.n < n_positive:
        raise DataError(
            f"dataset '{ds.name}' has {ds.n} samples, too small for {n_positive} positive splits"
        )
    n_cal = math.floor(ds.n * spec.calibration)
    n_test = math.floor(ds.n * spec.test)
    n_train = ds.n - n_cal - n_test
    perm = np.random.default_rng(spec.seed).permutation(ds.n)
    train = ds.subset(perm[:n_train], name=f"{ds.name}/train")
    cal = ds.subset(perm[n_train:n_train + n_cal], name=f"{ds.name}/calibration")
    test = ds.subset(perm[n_train + n_cal:], name=f"{ds.name}/test")
    return train, cal, test


@dataclass(frozen=True)
class SegmentRule:
    """How samples map to segments.

    ``feature-quantile-bins`` bins one feature at its empirical quantiles;
    fitted bin edges are recorded on the rule so future data lands in the
    same segments. ``provided-label`` takes the labels verbatim.
    """

    kind: str = QUANTILE_BINS
    feature_index: int = 0
    bins: int = 1
    labels: tuple[str, ...] | None = None
    edges: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in (QUANTILE_BINS, PROVIDED_LABEL):
            raise ConfigError(f"unknown segment rule kind {self.kind!r}")
        if self.kind == QUANTILE_BINS:
            if self.bins < 1:
                raise ConfigError(f"bin count must be >= 1, got {self.bins}")
            if self.feature_index < 0:
                raise ConfigError("feature index must be nonnegative")
        if self.kind == PROVIDED_LABEL and self.labels is None:
            raise ConfigError("provided-label rule needs labels")


def fit_segment_rule(ds: Dataset, rule: SegmentRule) -> SegmentRule:
    """Record quantile bin edges learned from ``ds`` on the rule."""
    if rule.kind != QUANTILE_BINS:
        return rule
    if rule.feature_index >= ds.d:
        raise ConfigError(f"feature index {rule.feature_index} out of range for d={ds.d}")
    qs = np.arange(1, rule.bins) / rule.bins
    edges = tuple(float(e) for e in np.quantile(ds.X[:, rule.feature_index], qs))
    return replace(rule, edges=edges)


def assign_segments(ds: Dataset, rule: SegmentRule) -> Dataset:
    """Label every sample with its segment.

    Quantile-bin rules without recorded edges are fitted on ``ds`` first.
    A value equal to a bin edge falls in the upper bin.
    """
    if rule.kind == PROVIDED_LABEL:
        if len(rule.labels) != ds.n:
            raise DataError(f"provided {len(rule.labels)} labels for {ds.n} samples")
        return ds.with_segments(rule.labels)
    if rule.edges is None:
        rule = fit_segment_rule(ds, rule)
    elif rule.feature_index >= ds.d:
        raise ConfigError(f"feature index {rule.feature_index} out of range for d={ds.d}")
    bins = np.searchsorted(np.asarray(rule.edges), ds.X[:, rule.feature_index], side="right")
    return ds.with_segments(str(int(b)) for b in bins)


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def curate_uncertain(
    pool: Dataset,
    widths,
    budget: int,
    recency_weight: float,
) -> Dataset:
    """Select the ``budget`` samples scoring highest on width and recency.

    score = (1 - w) * normalized_width + w * normalized_recency, where the
    normalizations are min-max over the pool and recency is row position
    (stream order). Ties break toward the smaller sample id; the selection is
    returned in the pool's original order.
    """
    widths = np.asarray(widths, dtype=np.float64)
    if widths.shape != (pool.n,):
        raise DataError(f"got {widths.shape[0] if widths.ndim else 0} widths for {pool.n} samples")
    if not 0 <= budget <= pool.n:
        raise DataError(f"budget {budget} outside [0, {pool.n}]")
    if not 0.0 <= recency_weight <= 1.0:
        raise ConfigError(f"recency_weight must be in [0, 1], got {recency_weight}")
    score = (1.0 - recency_weight) * _minmax(widths)
    score += recency_weight * _minmax(np.arange(pool.n, dtype=np.float64))
    # lexsort: descending score, then ascending id
    order = np.lexsort((pool.ids, -score))
    chosen = np.sort(order[:budget])
    return pool.subset(chosen, name=f"{pool.name}/curated")


def load_csv(path, target_column: str, segment_column: str | None = None) -> Dataset:
    """Load a dataset from a UTF-8, comma-separated file with a header row.

    All non-target columns are features in header order; every cell must
    parse as a finite real. Row indices become sample ids.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        if len(set(header)) != len(header):
            dupes = sorted({c for c in header if header.count(c) > 1})
            raise DataError(f"{path}: duplicate header names {dupes}")
        if target_column not in header:
            raise DataError(f"{path}: target column {target_column!r} not in header {header}")
        if segment_column is not None and segment_column not in header:
            raise DataError(f"{path}: segment column {segment_column!r} not in header")
        target_idx = header.index(target_column)
        segment_idx = header.index(segment_column) if segment_column is not None else None
        feature_idx = [
            j for j in range(len(header)) if j != target_idx and j != segment_idx
        ]
        rows, targets, segs = [], [], []
        for i, row in enumerate(reader):
            if len(row) != len(header):
                raise DataError(f"{path}: row {i} has {len(row)} cells, expected {len(header)}")
            values = []
            for j in feature_idx + [target_idx]:
                try:
                    v = float(row[j])
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric cell at row {i}, column {header[j]!r}: {row[j]!r}"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(
                        f"{path}: non-finite cell at row {i}, column {header[j]!r}: {row[j]!r}"
                    )
                values.append(v)
            rows.append(values[:-1])
            targets.append(values[-1])
            if segment_idx is not None:
                segs.append(row[segment_idx])
    d = len(feature_idx)
    return Dataset(
        X=np.asarray(rows, dtype=np.float64).reshape(len(rows), d),
        y=np.asarray(targets, dtype=np.float64),
        segments=tuple(segs) if segment_idx is not None else None,
        name=str(path),
        feature_names=tuple(header[j] for j in feature_idx),
        target_name=target_column,
    )


def save_csv(ds: Dataset, path) -> None:
    """Write features, target, and (if present) segments with 17 significant digits."""
    fmt = f"%.{FLOAT_DIGITS}g"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = list(ds.feature_names) + [ds.target_name]
        if ds.segments is not None:
            header.append("segment")
        writer.writerow(header)
        for i in range(ds.n):
            row = [fmt % v for v in ds.X[i]] + [fmt % ds.y[i]]
            if ds.segments is not None:
                row.append(ds.segments[i])
            writer.writerow(row)
