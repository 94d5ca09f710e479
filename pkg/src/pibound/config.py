"""Run configuration: one YAML document drives every CLI command.

Unknown keys are rejected at every nesting level and each sub-spec's own
invariants are checked while the document loads, so a bad config fails
before any work starts.
"""

from __future__ import annotations

from dataclasses import dataclass

import yaml

from .adaptation import LoopConfig
from .calibration import Confidence
from .dataset import SegmentRule, SplitSpec
from .driftsim import DriftScenario
from .errors import ConfigError
from .regressor import RegressorSpec


@dataclass(frozen=True)
class RunConfig:
    target_column: str
    segment_column: str | None
    split: SplitSpec
    model: RegressorSpec
    bounds: RegressorSpec
    gamma: Confidence
    tol: float
    per_segment: bool
    min_segment: int
    segment_rule: SegmentRule | None
    scenario: DriftScenario | None
    n_samples: int | None
    loop: LoopConfig | None
    initial_size: int | None


def _mapping(node, path: str) -> dict:
    if not isinstance(node, dict):
        raise ConfigError(f"section '{path}' must be a mapping, got {type(node).__name__}")
    return node


def _check_keys(node: dict, allowed: set[str], path: str) -> None:
    unknown = sorted(set(node) - allowed)
    if unknown:
        raise ConfigError(f"unknown key '{path}.{unknown[0]}'" if path else f"unknown key '{unknown[0]}'")


def _require(node: dict, key: str, path: str):
    if key not in node:
        raise ConfigError(f"missing required key '{path}.{key}'" if path else f"missing required key '{key}'")
    return node[key]


def _wrap(path: str, builder):
    try:
        return builder()
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _parse_dataset(node, path="dataset"):
    node = _mapping(node, path)
    _check_keys(node, {"target_column", "segment_column"}, path)
    target = _require(node, "target_column", path)
    if not isinstance(target, str):
        raise ConfigError(f"{path}.target_column must be a string")
    segment = node.get("segment_column")
    if segment is not None and not isinstance(segment, str):
        raise ConfigError(f"{path}.segment_column must be a string or null")
    return target, segment


def _parse_split(node, path="split"):
    node = _mapping(node, path)
    _check_keys(node, {"train", "calibration", "test", "seed"}, path)
    return _wrap(path, lambda: SplitSpec(
        train=_require(node, "train", path),
        calibration=_require(node, "calibration", path),
        test=_require(node, "test", path),
        seed=_require(node, "seed", path),
    ))


_MODEL_KEYS = {
    "kind", "hidden", "activation", "learning_rate", "epochs",
    "batch_size", "l2", "output", "seed",
}


def _parse_model(node, path):
    node = _mapping(node, path)
    _check_keys(node, _MODEL_KEYS, path)
    kwargs = dict(node)
    if "hidden" in kwargs:
        kwargs["hidden"] = tuple(kwargs["hidden"])
    return _wrap(path, lambda: RegressorSpec(**kwargs))


def _parse_confidence(node, path="confidence"):
    node = _mapping(node, path)
    _check_keys(node, {"gamma"}, path)
    return _wrap(path, lambda: Confidence(gamma=_require(node, "gamma", path)))


def _parse_calibration(node, path="calibration"):
    node = _mapping(node, path)
    _check_keys(node, {"tol", "per_segment", "min_segment"}, path)
    tol = node.get("tol", 1e-6)
    if not isinstance(tol, (int, float)) or tol <= 0:
        raise ConfigError(f"{path}.tol must be a positive number")
    per_segment = node.get("per_segment", False)
    if not isinstance(per_segment, bool):
        raise ConfigError(f"{path}.per_segment must be a boolean")
    min_segment = node.get("min_segment", 50)
    if not isinstance(min_segment, int) or min_segment < 1:
        raise ConfigError(f"{path}.min_segment must be a positive integer")
    return float(tol), per_segment, min_segment


def _parse_segments(node, path="segments"):
    node = _mapping(node, path)
    _check_keys(node, {"kind", "feature_index", "bins"}, path)
    return _wrap(path, lambda: SegmentRule(
        kind=node.get("kind", "feature-quantile-bins"),
        feature_index=node.get("feature_index", 0),
        bins=node.get("bins", 1),
    ))


_SCENARIO_KEYS = {
    "kind", "base", "noise_scale", "magnitude", "onset",
    "duration", "period", "d", "seed", "channel",
}


def _parse_scenario(node, path="scenario"):
    node = _mapping(node, path)
    _check_keys(node, _SCENARIO_KEYS, path)
    return _wrap(path, lambda: DriftScenario(**node))


def _parse_simulate(node, path="simulate"):
    node = _mapping(node, path)
    _check_keys(node, {"n_samples"}, path)
    n = _require(node, "n_samples", path)
    if not isinstance(n, int) or n < 0:
        raise ConfigError(f"{path}.n_samples must be a nonnegative integer")
    return n


_LOOP_KEYS = {
    "initial_size", "window_size", "n_windows", "delta_cov", "delta_ood",
    "budget", "recency_weight", "fine_tune_epochs", "fine_tune_lr",
    "max_cycles", "gamma", "seed", "pool_windows", "ood_quantile",
    "ood_multiplier", "warm_start_bounds", "tol",
}


def _parse_loop(node, path="loop"):
    node = _mapping(node, path)
    _check_keys(node, _LOOP_KEYS, path)
    initial_size = _require(node, "initial_size", path)
    if not isinstance(initial_size, int) or initial_size < 1:
        raise ConfigError(f"{path}.initial_size must be a positive integer")
    kwargs = {k: v for k, v in node.items() if k != "initial_size"}
    return _wrap(path, lambda: LoopConfig(**kwargs)), initial_size


_TOP_KEYS = {
    "dataset", "split", "model", "bounds", "confidence", "calibration",
    "segments", "scenario", "simulate", "loop",
}


def parse_config(document: dict) -> RunConfig:
    document = _mapping(document, "<config>")
    _check_keys(document, _TOP_KEYS, "")
    target_column, segment_column = _parse_dataset(_require(document, "dataset", ""))
    split_spec = _parse_split(_require(document, "split", ""))
    model = _parse_model(_require(document, "model", ""), "model")
    bounds = _parse_model(document["bounds"], "bounds") if "bounds" in document else model
    gamma = _parse_confidence(_require(document, "confidence", ""))
    tol, per_segment, min_segment = _parse_calibration(document.get("calibration", {}))
    segment_rule = _parse_segments(document["segments"]) if "segments" in document else None
    scenario = _parse_scenario(document["scenario"]) if "scenario" in document else None
    n_samples = _parse_simulate(document["simulate"]) if "simulate" in document else None
    loop, initial_size = (None, None)
    if "loop" in document:
        loop, initial_size = _parse_loop(document["loop"])
    if per_segment and segment_rule is None and segment_column is None:
        raise ConfigError(
            "calibration.per_segment needs either a 'segments' rule or dataset.segment_column"
        )
    return RunConfig(
        target_column=target_column,
        segment_column=segment_column,
        split=split_spec,
        model=model,
        bounds=bounds,
        gamma=gamma,
        tol=tol,
        per_segment=per_segment,
        min_segment=min_segment,
        segment_rule=segment_rule,
        scenario=scenario,
        n_samples=n_samples,
        loop=loop,
        initial_size=initial_size,
    )


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            document = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if document is None:
        raise ConfigError(f"config {path} is empty")
    return parse_config(document)
