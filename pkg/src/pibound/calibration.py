"""Interval calibration: tail counting functions, bisection, and [L(x), U(x)].

The upper interval bound is prediction + alpha * upper_model(x); the lower is
prediction - beta * lower_model(x). alpha and beta are solved by bisection so
that each tail's exceedance count on the calibration residuals lands at
parent_n * (1 - gamma) / 2, to step resolution. Because bound-model outputs
are strictly positive (softplus) and alpha, beta >= 0, both counting functions
are non-increasing, which is what makes bisection sound.
"""

from __future__ import annotations

import bisect as _bisect_mod
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Dataset
from .errors import (
    BracketingError,
    CalibrationError,
    ConfigError,
    DataError,
    FingerprintMismatchError,
    NonMonotoneError,
    SerializationError,
)
from .regressor import Regressor, RegressorSpec, fingerprint, predict, predict_batch
from .residuals import ResidualSplit, check_fingerprint, fit_bound_models, split_residuals

RESULT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Confidence:
    """Target coverage level, strictly inside (0, 1).

    The endpoints are rejected: at 1 the tail target is zero and a root need
    not exist under finite bound models, and 0 asks for an empty interval.
    """

    gamma: float

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")


@dataclass(frozen=True)
class PredictionInterval:
    """A closed interval [lower, upper] around one prediction."""

    lower: float
    upper: float
    center: float

    def __post_init__(self):
        if not (self.lower <= self.center <= self.upper):
            raise DataError(
                f"interval must satisfy lower <= center <= upper, got "
                f"[{self.lower}, {self.center}, {self.upper}]"
            )

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, y: float) -> bool:
        return self.lower <= y <= self.upper


@dataclass(frozen=True)
class BisectionDiagnostics:
    doublings: int
    iterations: int
    bracket_width: float


@dataclass(frozen=True)
class CalibrationResult:
    """Calibrated tail coefficients plus everything needed to audit them."""

    alpha: float
    beta: float
    gamma: Confidence
    parent_n: int
    target_count_per_tail: float
    achieved_upper_exceedances: int
    achieved_lower_exceedances: int
    upper_diagnostics: BisectionDiagnostics
    lower_diagnostics: BisectionDiagnostics
    model_fingerprint: str
    upper_model_fingerprint: str
    lower_model_fingerprint: str
    segment: str | None = None
    fallback: bool = False
    upper_model: Regressor | None = field(default=None, repr=False, compare=False)
    lower_model: Regressor | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for label, value in (("alpha", self.alpha), ("beta", self.beta)):
            if not np.isfinite(value) or value < 0.0:
                raise CalibrationError(f"{label} must be finite and >= 0, got {value}")


def _reconstruct_upper(model: Regressor, data: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pred = predict_batch(model, data.X)
    return pred, pred + data.y, data.y  # (f(x), reconstructed y, residual)


def _reconstruct_lower(model: Regressor, data: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pred = predict_batch(model, data.X)
    return pred, pred - data.y, data.y


def q_upper(
    alpha: float,
    model: Regressor,
    upper_model: Regressor,
    upper_data: Dataset,
    parent_n: int,
    gamma: Confidence,
) -> float:
    """Count of upper-side targets above prediction + alpha * bound, minus the tail target.

    Targets are reconstructed from the stored residuals, so the count is
    exactly consistent with the residual split that produced ``upper_data``.
    """
    if alpha < 0.0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    pred, y, _ = _reconstruct_upper(model, upper_data)
    bound = predict_batch(upper_model, upper_data.X)
    count = int(np.count_nonzero(y > pred + alpha * bound))
    return count - parent_n * (1.0 - gamma.gamma) / 2.0


def q_lower(
    beta: float,
    model: Regressor,
    lower_model: Regressor,
    lower_data: Dataset,
    parent_n: int,
    gamma: Confidence,
) -> float:
    """Mirror image of :func:`q_upper` for targets below prediction - beta * bound."""
    if beta < 0.0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    pred, y, _ = _reconstruct_lower(model, lower_data)
    bound = predict_batch(lower_model, lower_data.X)
    count = int(np.count_nonzero(y < pred - beta * bound))
    return count - parent_n * (1.0 - gamma.gamma) / 2.0


def _bisect(q, bracket_growth: float, tol: float, max_iter: int):
    """Root of a non-increasing step function on [0, inf).

    Returns (root, diagnostics) with q(root) <= 0 and the root within ``tol``
    of the point where q last changes sign. Every evaluation is recorded and
    cross-checked so a non-monotone q is reported instead of silently
    returning a wrong root.
    """
    if bracket_growth <= 1.0:
        raise ConfigError(f"bracket growth factor must exceed 1, got {bracket_growth}")
    if tol <= 0.0:
        raise ConfigError(f"tol must be > 0, got {tol}")
    seen_x: list[float] = []
    seen_q: list[float] = []

    def eval_q(x: float) -> float:
        value = q(x)
        pos = _bisect_mod.bisect_left(seen_x, x)
        if pos > 0 and seen_q[pos - 1] < value:
            raise NonMonotoneError(
                f"q({seen_x[pos - 1]}) = {seen_q[pos - 1]} < q({x}) = {value}"
            )
        if pos < len(seen_x) and seen_q[pos] > value:
            raise NonMonotoneError(
                f"q({x}) = {value} < q({seen_x[pos]}) = {seen_q[pos]}"
            )
        seen_x.insert(pos, x)
        seen_q.insert(pos, value)
        return value

    if eval_q(0.0) <= 0.0:
        return 0.0, BisectionDiagnostics(doublings=0, iterations=0, bracket_width=0.0)

    lo, hi = 0.0, 1.0
    doublings = 0
    while eval_q(hi) > 0.0:
        doublings += 1
        if doublings > max_iter:
            raise BracketingError(
                f"no sign change found up to {hi} after {max_iter} doublings; "
                "the bound model may be zero on exceeding points or the tail "
                "target unreachable"
            )
        lo, hi = hi, hi * bracket_growth

    iterations = 0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:  # float resolution exhausted
            break
        iterations += 1
        if eval_q(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    root = mid if eval_q(mid) <= 0.0 else hi
    return root, BisectionDiagnostics(
        doublings=doublings, iterations=iterations, bracket_width=hi - lo
    )


def bisect_root(q, bracket_growth: float = 2.0, tol: float = 1e-6, max_iter: int = 64) -> float:
    """Smallest-coefficient reading of the root of a non-increasing step function.

    q(0) <= 0 short-circuits to 0: the tail is already at or below target and
    negative coefficients would invert the interval.
    """
    root, _ = _bisect(q, bracket_growth, tol, max_iter)
    return root


def calibrate(
    model: Regressor,
    split: ResidualSplit,
    spec: RegressorSpec,
    gamma: Confidence,
    tol: float = 1e-6,
    bound_models: tuple[Regressor, Regressor] | None = None,
) -> CalibrationResult:
    """Train bound models and solve both tail coefficients by bisection.

    ``bound_models`` lets a caller supply already-trained bound models (the
    adaptation loop's warm-start path); by default they are fit from scratch
    on the residual datasets.
    """
    check_fingerprint(split, model)
    if bound_models is None:
        upper_model, lower_model = fit_bound_models(split, spec)
    else:
        upper_model, lower_model = bound_models
    target = split.parent_n * (1.0 - gamma.gamma) / 2.0

    pred_up, y_up, _ = _reconstruct_upper(model, split.upper)
    bound_up = predict_batch(upper_model, split.upper.X)
    pred_lo, y_lo, _ = _reconstruct_lower(model, split.lower)
    bound_lo = predict_batch(lower_model, split.lower.X)

    def q_up(alpha: float) -> float:
        return int(np.count_nonzero(y_up > pred_up + alpha * bound_up)) - target

    def q_lo(beta: float) -> float:
        return int(np.count_nonzero(y_lo < pred_lo - beta * bound_lo)) - target

    alpha, upper_diag = _bisect(q_up, 2.0, tol, 64)
    beta, lower_diag = _bisect(q_lo, 2.0, tol, 64)
    return CalibrationResult(
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        parent_n=split.parent_n,
        target_count_per_tail=target,
        achieved_upper_exceedances=int(q_up(alpha) + target),
        achieved_lower_exceedances=int(q_lo(beta) + target),
        upper_diagnostics=upper_diag,
        lower_diagnostics=lower_diag,
        model_fingerprint=split.model_fingerprint,
        upper_model_fingerprint=fingerprint(upper_model),
        lower_model_fingerprint=fingerprint(lower_model),
        upper_model=upper_model,
        lower_model=lower_model,
    )


def _check_triple(
    model: Regressor,
    upper_model: Regressor,
    lower_model: Regressor,
    result: CalibrationResult,
) -> None:
    if fingerprint(model) != result.model_fingerprint:
        raise FingerprintMismatchError("deployed model does not match the calibration result")
    if fingerprint(upper_model) != result.upper_model_fingerprint:
        raise FingerprintMismatchError("upper bound model does not match the calibration result")
    if fingerprint(lower_model) != result.lower_model_fingerprint:
        raise FingerprintMismatchError("lower bound model does not match the calibration result")


def predict_interval(
    model: Regressor,
    upper_model: Regressor,
    lower_model: Regressor,
    result: CalibrationResult,
    x,
) -> PredictionInterval:
    """Calibrated interval at a single point."""
    _check_triple(model, upper_model, lower_model, result)
    center = predict(model, x)
    return PredictionInterval(
        lower=center - result.beta * predict(lower_model, x),
        upper=center + result.alpha * predict(upper_model, x),
        center=center,
    )


def predict_intervals(
    model: Regressor,
    upper_model: Regressor,
    lower_model: Regressor,
    result: CalibrationResult,
    X,
) -> list[PredictionInterval]:
    """Calibrated intervals for a batch of points."""
    _check_triple(model, upper_model, lower_model, result)
    center = predict_batch(model, X)
    lower = center - result.beta * predict_batch(lower_model, X)
    upper = center + result.alpha * predict_batch(upper_model, X)
    return [
        PredictionInterval(lower=float(lo), upper=float(up), center=float(c))
        for lo, up, c in zip(lower, upper, center)
    ]


def calibrate_per_segment(
    model: Regressor,
    edge: Dataset,
    spec: RegressorSpec,
    gamma: Confidence,
    tol: float = 1e-6,
    min_segment: int = 50,
) -> dict[str, CalibrationResult]:
    """Independent calibration per segment, falling back to global when thin.

    Segments with fewer than ``min_segment`` samples reuse the global result
    and are flagged via ``fallback=True``. Each segment is treated as its own
    parent dataset, so its tail targets use the segment population.
    """
    if edge.segments is None:
        raise DataError(f"dataset '{edge.name}' has no segments assigned")
    try:
        global_result = calibrate(model, split_residuals(model, edge), spec, gamma, tol)
    except CalibrationError:
        global_result = None
    labels = edge.segment_labels()
    seg_array = np.asarray(edge.segments)
    results: dict[str, CalibrationResult] = {}
    for label in labels:
        subset = edge.subset(np.flatnonzero(seg_array == label), name=f"{edge.name}/{label}")
        if subset.n < min_segment:
            if global_result is None:
                raise CalibrationError(
                    f"segment {label!r} is below the minimum ({subset.n} < {min_segment}) "
                    "and no global result is available to fall back to"
                )
            results[label] = replace(global_result, segment=label, fallback=True)
            continue
        seg_result = calibrate(model, split_residuals(model, subset), spec, gamma, tol)
        results[label] = replace(seg_result, segment=label)
    if not results:
        raise CalibrationError("dataset has no segments to calibrate")
    return results


def _diag_to_dict(diag: BisectionDiagnostics) -> dict:
    return {
        "doublings": diag.doublings,
        "iterations": diag.iterations,
        "bracket_width": diag.bracket_width,
    }


def result_to_dict(result: CalibrationResult) -> dict:
    """Serializable form: fingerprints stand in for the live model references."""
    return {
        "format_version": RESULT_FORMAT_VERSION,
        "alpha": result.alpha,
        "beta": result.beta,
        "gamma": result.gamma.gamma,
        "parent_n": result.parent_n,
        "target_count_per_tail": result.target_count_per_tail,
        "achieved_upper_exceedances": result.achieved_upper_exceedances,
        "achieved_lower_exceedances": result.achieved_lower_exceedances,
        "upper_diagnostics": _diag_to_dict(result.upper_diagnostics),
        "lower_diagnostics": _diag_to_dict(result.lower_diagnostics),
        "model_fingerprint": result.model_fingerprint,
        "upper_model_fingerprint": result.upper_model_fingerprint,
        "lower_model_fingerprint": result.lower_model_fingerprint,
        "segment": result.segment,
        "fallback": result.fallback,
    }


def result_to_json(result: CalibrationResult) -> str:
    return json.dumps(result_to_dict(result), sort_keys=True, indent=2)


def result_from_json(text: str) -> CalibrationResult:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SerializationError(f"corrupted calibration record: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise SerializationError("calibration record is missing its format_version")
    if payload["format_version"] != RESULT_FORMAT_VERSION:
        raise SerializationError(
            f"unsupported calibration record version {payload['format_version']!r}"
        )
    try:
        return CalibrationResult(
            alpha=payload["alpha"],
            beta=payload["beta"],
            gamma=Confidence(payload["gamma"]),
            parent_n=payload["parent_n"],
            target_count_per_tail=payload["target_count_per_tail"],
            achieved_upper_exceedances=payload["achieved_upper_exceedances"],
            achieved_lower_exceedances=payload["achieved_lower_exceedances"],
            upper_diagnostics=BisectionDiagnostics(**payload["upper_diagnostics"]),
            lower_diagnostics=BisectionDiagnostics(**payload["lower_diagnostics"]),
            model_fingerprint=payload["model_fingerprint"],
            upper_model_fingerprint=payload["upper_model_fingerprint"],
            lower_model_fingerprint=payload["lower_model_fingerprint"],
            segment=payload["segment"],
            fallback=payload["fallback"],
        )
    except (KeyError, TypeError) as exc:
        raise SerializationError(f"corrupted calibration record: {exc}") from exc
