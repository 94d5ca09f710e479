"""Interval quality metrics and width-based out-of-distribution flagging.

Coverage uses closed intervals (a target exactly on a bound counts as
covered), complementing the calibration module's strict exceedance rule, so
covered + upper exceedances + lower exceedances always equals n exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .calibration import PredictionInterval
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class IntervalReport:
    """Empirical coverage (picp), mean width (mpiw), and width quantiles."""

    picp: float
    mpiw: float
    n: int
    width_median: float
    width_p90: float
    width_p99: float
    per_segment: dict[str, "IntervalReport"] = field(default_factory=dict)


@dataclass(frozen=True)
class OodRule:
    """Flag inputs whose interval width exceeds a calibration-time quantile."""

    quantile: float = 0.99
    multiplier: float = 1.0
    reference_width: float | None = None

    def __post_init__(self):
        if not 0.0 < self.quantile < 1.0:
            raise ConfigError(f"quantile must be in (0, 1), got {self.quantile}")
        if self.multiplier <= 0.0:
            raise ConfigError(f"multiplier must be > 0, got {self.multiplier}")


def _report(lower: np.ndarray, upper: np.ndarray, ys: np.ndarray) -> IntervalReport:
    widths = upper - lower
    covered = np.count_nonzero((ys >= lower) & (ys <= upper))
    return IntervalReport(
        picp=covered / len(ys),
        mpiw=float(widths.mean()),
        n=len(ys),
        width_median=float(np.quantile(widths, 0.5)),
        width_p90=float(np.quantile(widths, 0.9)),
        width_p99=float(np.quantile(widths, 0.99)),
    )


def evaluate(
    intervals: list[PredictionInterval], ys, segments=None
) -> IntervalReport:
    """Exact coverage/width accounting, with a per-segment breakdown when given."""
    ys = np.asarray(ys, dtype=np.float64)
    if len(intervals) == 0:
        raise DataError("cannot evaluate zero intervals")
    if ys.shape != (len(intervals),):
        raise DataError(f"{len(intervals)} intervals but {ys.size} targets")
    if segments is not None and len(segments) != len(intervals):
        raise DataError(f"{len(intervals)} intervals but {len(segments)} segment labels")
    lower = np.asarray([iv.lower for iv in intervals])
    upper = np.asarray([iv.upper for iv in intervals])
    report = _report(lower, upper, ys)
    if segments is None:
        return report
    seg_array = np.asarray([str(s) for s in segments])
    breakdown = {}
    for label in sorted(set(seg_array)):
        mask = seg_array == label
        breakdown[label] = _report(lower[mask], upper[mask], ys[mask])
    return replace(report, per_segment=breakdown)


def learn_ood_reference(calibration_widths, rule: OodRule) -> OodRule:
    """Store the empirical quantile of calibration-time widths on the rule."""
    widths = np.asarray(calibration_widths, dtype=np.float64)
    if widths.size == 0:
        raise DataError("cannot learn a width reference from zero widths")
    # linear interpolation between order statistics
    reference = float(np.quantile(widths, rule.quantile))
    return replace(rule, reference_width=reference)


def ood_flag(interval: PredictionInterval, rule: OodRule) -> bool:
    """True iff the interval is strictly wider than multiplier * reference."""
    if rule.reference_width is None:
        raise ConfigError("OOD rule has no learned reference width")
    return interval.width > rule.multiplier * rule.reference_width


def report_to_dict(report: IntervalReport) -> dict:
    payload = {
        "picp": report.picp,
        "mpiw": report.mpiw,
        "n": report.n,
        "width_median": report.width_median,
        "width_p90": report.width_p90,
        "width_p99": report.width_p99,
    }
    if report.per_segment:
        payload["per_segment"] = {
            label: report_to_dict(sub) for label, sub in report.per_segment.items()
        }
    return payload


def report_to_json(report: IntervalReport) -> str:
    return json.dumps(report_to_dict(report), sort_keys=True, indent=2)


def format_report_table(report: IntervalReport) -> str:
    """Human-readable table, one row per scope."""
    rows = [("all", report)] + sorted(report.per_segment.items())
    lines = [
        f"{'scope':<12} {'n':>8} {'picp':>8} {'mpiw':>12} {'w_med':>12} {'w_p90':>12} {'w_p99':>12}"
    ]
    for label, rep in rows:
        lines.append(
            f"{label:<12} {rep.n:>8d} {rep.picp:>8.4f} {rep.mpiw:>12.5g} "
            f"{rep.width_median:>12.5g} {rep.width_p90:>12.5g} {rep.width_p99:>12.5g}"
        )
    return "\n".join(lines)
