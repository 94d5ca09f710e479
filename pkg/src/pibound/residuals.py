"""Residual datasets and the bound models trained on them.

Each sample of an edge dataset lands on exactly one side of the deployed
model: where the target is at or above the prediction, the residual magnitude
``y - f(x)`` feeds the upper bound model; where it falls below, ``f(x) - y``
feeds the lower bound model. Ties go to the upper side.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import Dataset, save_csv
from .errors import DataError, FingerprintMismatchError, OneSidedResidualsError
from .regressor import (
    OUTPUT_NONNEGATIVE,
    Regressor,
    RegressorSpec,
    fingerprint,
    fit,
    predict_batch,
)
from .seeding import derive_seed

UPPER = "upper"
LOWER = "lower"


@dataclass(frozen=True)
class ResidualSplit:
    """The two residual-magnitude datasets derived from one model and dataset.

    ``upper`` holds samples with target >= prediction (targets are the
    nonnegative overshoot), ``lower`` the strict undershoots (targets are the
    strictly positive shortfall). Together they partition the parent dataset.
    """

    upper: Dataset
    lower: Dataset
    parent_n: int
    model_fingerprint: str

    def __post_init__(self):
        if self.upper.n + self.lower.n != self.parent_n:
            raise DataError(
                f"sides hold {self.upper.n}+{self.lower.n} samples, parent had {self.parent_n}"
            )
        if self.upper.n and self.upper.y.min() < 0.0:
            raise DataError("upper-side residuals must be >= 0")
        if self.lower.n and self.lower.y.min() <= 0.0:
            raise DataError("lower-side residuals must be > 0")


def split_residuals(model: Regressor, edge: Dataset) -> ResidualSplit:
    """Partition ``edge`` by residual sign against ``model``.

    Sample ids are preserved, so the original target is always recoverable as
    prediction + residual (upper side) or prediction - residual (lower side).
    """
    if edge.n < 1:
        raise DataError("cannot split residuals of an empty dataset")
    if edge.d != model.d:
        raise DataError(f"dataset has d={edge.d}, model expects d={model.d}")
    pred = predict_batch(model, edge.X)
    above = edge.y >= pred
    idx_up = np.flatnonzero(above)
    idx_lo = np.flatnonzero(~above)
    upper = replace(
        edge.subset(idx_up, name=f"{edge.name}/residuals-upper"),
        y=edge.y[idx_up] - pred[idx_up],
        target_name="residual",
    )
    lower = replace(
        edge.subset(idx_lo, name=f"{edge.name}/residuals-lower"),
        y=pred[idx_lo] - edge.y[idx_lo],
        target_name="residual",
    )
    return ResidualSplit(
        upper=upper, lower=lower, parent_n=edge.n, model_fingerprint=fingerprint(model)
    )


def check_fingerprint(split: ResidualSplit, model: Regressor) -> None:
    if split.model_fingerprint != fingerprint(model):
        raise FingerprintMismatchError(
            "residual split was built from a different model (stale residuals)"
        )


def fit_bound_models(
    split: ResidualSplit, spec: RegressorSpec
) -> tuple[Regressor, Regressor]:
    """Train the upper and lower bound models on the residual datasets.

    Both use ``spec`` with the nonnegative output constraint forced on and
    independently derived seeds, so the two fits never share initialization.
    """
    if split.upper.n == 0:
        raise OneSidedResidualsError(UPPER)
    if split.lower.n == 0:
        raise OneSidedResidualsError(LOWER)
    upper_spec = replace(spec, output=OUTPUT_NONNEGATIVE, seed=derive_seed(spec.seed, UPPER))
    lower_spec = replace(spec, output=OUTPUT_NONNEGATIVE, seed=derive_seed(spec.seed, LOWER))
    return fit(upper_spec, split.upper), fit(lower_spec, split.lower)


def export_csv(split: ResidualSplit, upper_path, lower_path) -> None:
    """Write both sides in the dataset module's CSV format for inspection."""
    save_csv(split.upper, upper_path)
    save_csv(split.lower, lower_path)
