"""Closed-loop monitoring, curation, fine-tuning, recalibration, redeployment.

The loop watches per-window interval coverage and OOD flag rates on a stream.
A breach of either threshold starts one adaptation cycle: curate the most
uncertain/recent samples from the recent pool, fine-tune the deployed model
on them, recalibrate on the remaining (disjoint) pool samples, and register
the result as the next deployed version. A failed recalibration is logged
and the previous version stays live.

Everything downstream of the config seeds is deterministic, so a finished
run can be replayed byte-for-byte from its manifest alone.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, replace

from .calibration import (
    CalibrationResult,
    Confidence,
    calibrate,
    predict_intervals,
    result_to_dict,
)
from .dataset import Dataset, SplitSpec, concatenate, curate_uncertain, fingerprint_dataset, split
from .driftsim import DriftScenario, make_stream, next_batch, scenario_from_dict, scenario_to_dict
from .errors import CalibrationError, ConfigError, FingerprintMismatchError, SerializationError
from .metrics import OodRule, evaluate, learn_ood_reference, ood_flag
from .regressor import (
    Regressor,
    RegressorSpec,
    fine_tune,
    fingerprint,
    fit,
    spec_from_dict,
    spec_to_dict,
)
from .residuals import split_residuals
from .seeding import derive_seed

MANIFEST_FORMAT_VERSION = 1
CYCLE_COMPLETION = "recalibrated"

EVENT_KINDS = (
    "window-evaluated",
    "breach-detected",
    "curated",
    "fine-tuned",
    "recalibrated",
    "redeployed",
    "calibration-failed",
)


@dataclass(frozen=True)
class LoopConfig:
    """Thresholds and budgets of the adaptation loop."""

    window_size: int
    n_windows: int
    delta_cov: float
    delta_ood: float
    budget: int
    recency_weight: float
    fine_tune_epochs: int
    fine_tune_lr: float
    max_cycles: int
    gamma: float
    seed: int
    pool_windows: int = 4
    ood_quantile: float = 0.99
    ood_multiplier: float = 1.0
    warm_start_bounds: bool = False
    tol: float = 1e-6

    def __post_init__(self):
        Confidence(self.gamma)
        if self.window_size < 1:
            raise ConfigError(f"window size must be >= 1, got {self.window_size}")
        if self.n_windows < 0:
            raise ConfigError(f"n_windows must be >= 0, got {self.n_windows}")
        if not 0.0 < self.delta_cov < self.gamma:
            raise ConfigError(
                f"coverage breach threshold must satisfy 0 < delta_cov < gamma, got {self.delta_cov}"
            )
        if not 0.0 < self.delta_ood < 1.0:
            raise ConfigError(f"OOD breach threshold must be in (0, 1), got {self.delta_ood}")
        if self.budget < 1:
            raise ConfigError(f"curation budget must be >= 1, got {self.budget}")
        if not 0.0 <= self.recency_weight <= 1.0:
            raise ConfigError(f"recency weight must be in [0, 1], got {self.recency_weight}")
        if self.fine_tune_epochs < 0:
            raise ConfigError(f"fine-tune epochs must be >= 0, got {self.fine_tune_epochs}")
        if self.fine_tune_lr <= 0.0:
            raise ConfigError(f"fine-tune learning rate must be > 0, got {self.fine_tune_lr}")
        if self.max_cycles < 0:
            raise ConfigError(f"max cycles must be >= 0, got {self.max_cycles}")
        if self.pool_windows < 1:
            raise ConfigError(f"pool windows must be >= 1, got {self.pool_windows}")
        if self.tol <= 0.0:
            raise ConfigError(f"tol must be > 0, got {self.tol}")


@dataclass(frozen=True)
class LoopEvent:
    """One entry of the totally ordered event log."""

    seq: int
    step: int  # stream position at emission (end of the active window)
    kind: str
    payload: dict


@dataclass(frozen=True)
class ModelVersion:
    """A deployed triple plus the provenance of how it came to be."""

    version: int
    model: Regressor
    upper_model: Regressor
    lower_model: Regressor
    calibration: CalibrationResult
    ood_rule: OodRule
    parent: int | None
    trigger: str
    data_fingerprint: str
    deployed_at_window: int


@dataclass(frozen=True)
class ModelRegistry:
    versions: tuple[ModelVersion, ...]

    def current(self) -> ModelVersion:
        return self.versions[-1]

    def __len__(self) -> int:
        return len(self.versions)


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to reproduce a run, plus fingerprints to verify it."""

    scenario: DriftScenario
    initial_size: int
    config: LoopConfig
    model_spec: RegressorSpec
    split_spec: SplitSpec
    registry_fingerprint: str
    event_log_fingerprint: str
    version_fingerprints: tuple[dict, ...]
    format_version: int = MANIFEST_FORMAT_VERSION
    cycle_completion: str = CYCLE_COMPLETION


def default_split_spec(seed: int) -> SplitSpec:
    return SplitSpec(train=0.5, calibration=0.4, test=0.1, seed=derive_seed(seed, "split"))


def _version_fingerprint_record(v: ModelVersion) -> dict:
    return {
        "version": v.version,
        "model": fingerprint(v.model),
        "upper_model": fingerprint(v.upper_model),
        "lower_model": fingerprint(v.lower_model),
        "calibration": result_to_dict(v.calibration),
        "ood_reference": v.ood_rule.reference_width,
        "parent": v.parent,
        "trigger": v.trigger,
        "data_fingerprint": v.data_fingerprint,
        "deployed_at_window": v.deployed_at_window,
    }


def registry_fingerprint(registry: ModelRegistry) -> str:
    canonical = json.dumps(
        [_version_fingerprint_record(v) for v in registry.versions], sort_keys=True
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def events_to_jsonl(events: list[LoopEvent]) -> str:
    lines = [
        json.dumps(
            {"seq": e.seq, "step": e.step, "kind": e.kind, "payload": e.payload},
            sort_keys=True,
        )
        for e in events
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def events_from_jsonl(text: str) -> list[LoopEvent]:
    events = []
    for line in text.splitlines():
        if not line.strip():
            continue
        payload = json.loads(line)
        events.append(
            LoopEvent(
                seq=payload["seq"], step=payload["step"], kind=payload["kind"],
                payload=payload["payload"],
            )
        )
    return events


def event_log_fingerprint(events: list[LoopEvent]) -> str:
    return hashlib.sha256(events_to_jsonl(events).encode("utf-8")).hexdigest()


class _EventLog:
    def __init__(self):
        self.events: list[LoopEvent] = []

    def emit(self, step: int, kind: str, **payload) -> LoopEvent:
        event = LoopEvent(seq=len(self.events), step=step, kind=kind, payload=payload)
        self.events.append(event)
        return event


def _deploy_bootstrap(
    initial: Dataset,
    config: LoopConfig,
    model_spec: RegressorSpec,
    split_spec: SplitSpec,
) -> ModelVersion:
    train, cal, _ = split(initial, split_spec)
    model = fit(model_spec, train)
    result = calibrate(
        model, split_residuals(model, cal), model_spec, Confidence(config.gamma), config.tol
    )
    intervals = predict_intervals(
        model, result.upper_model, result.lower_model, result, cal.X
    )
    rule = learn_ood_reference(
        [iv.width for iv in intervals],
        OodRule(quantile=config.ood_quantile, multiplier=config.ood_multiplier),
    )
    return ModelVersion(
        version=0,
        model=model,
        upper_model=result.upper_model,
        lower_model=result.lower_model,
        calibration=result,
        ood_rule=rule,
        parent=None,
        trigger="bootstrap",
        data_fingerprint=fingerprint_dataset(initial),
        deployed_at_window=-1,
    )


def _adaptation_cycle(
    current: ModelVersion,
    pool: Dataset,
    config: LoopConfig,
    model_spec: RegressorSpec,
    window: int,
    step: int,
    log: _EventLog,
) -> ModelVersion | None:
    """One curate/fine-tune/recalibrate/redeploy pass; None if recalibration failed."""
    pool_intervals = predict_intervals(
        current.model, current.upper_model, current.lower_model, current.calibration, pool.X
    )
    curated = curate_uncertain(
        pool,
        [iv.width for iv in pool_intervals],
        min(config.budget, pool.n),
        config.recency_weight,
    )
    log.emit(
        step,
        "curated",
        window=window,
        n=curated.n,
        pool_n=pool.n,
        id_min=int(curated.ids.min()),
        id_max=int(curated.ids.max()),
    )
    candidate = fine_tune(current.model, curated, config.fine_tune_epochs, config.fine_tune_lr)
    log.emit(
        step,
        "fine-tuned",
        window=window,
        parent_version=current.version,
        final_loss=candidate.final_loss,
        epochs=config.fine_tune_epochs,
    )
    curated_ids = set(int(i) for i in curated.ids)
    keep = [i for i in range(pool.n) if int(pool.ids[i]) not in curated_ids]
    recal_data = pool.subset(keep, name=f"{pool.name}/recalibration")
    try:
        if recal_data.n < 2:
            raise CalibrationError(
                f"only {recal_data.n} samples left for recalibration after curation"
            )
        splitset = split_residuals(candidate, recal_data)
        bounds = None
        if config.warm_start_bounds:
            if splitset.upper.n == 0 or splitset.lower.n == 0:
                raise CalibrationError("one-sided residuals on the recalibration slice")
            bounds = (
                fine_tune(
                    current.upper_model, splitset.upper,
                    config.fine_tune_epochs, config.fine_tune_lr,
                ),
                fine_tune(
                    current.lower_model, splitset.lower,
                    config.fine_tune_epochs, config.fine_tune_lr,
                ),
            )
        result = calibrate(
            candidate, splitset, model_spec, Confidence(config.gamma), config.tol,
            bound_models=bounds,
        )
    except CalibrationError as exc:
        log.emit(
            step,
            "calibration-failed",
            window=window,
            error=type(exc).__name__,
            detail=str(exc),
        )
        return None
    log.emit(
        step,
        "recalibrated",
        window=window,
        alpha=result.alpha,
        beta=result.beta,
        upper_exceedances=result.achieved_upper_exceedances,
        lower_exceedances=result.achieved_lower_exceedances,
        calibration_n=result.parent_n,
    )
    recal_intervals = predict_intervals(
        candidate, result.upper_model, result.lower_model, result, recal_data.X
    )
    rule = learn_ood_reference(
        [iv.width for iv in recal_intervals],
        OodRule(quantile=config.ood_quantile, multiplier=config.ood_multiplier),
    )
    new_version = ModelVersion(
        version=current.version + 1,
        model=candidate,
        upper_model=result.upper_model,
        lower_model=result.lower_model,
        calibration=result,
        ood_rule=rule,
        parent=current.version,
        trigger=f"breach@window={window}",
        data_fingerprint=hashlib.sha256(
            (fingerprint_dataset(curated) + fingerprint_dataset(recal_data)).encode()
        ).hexdigest(),
        deployed_at_window=window,
    )
    log.emit(step, "redeployed", window=window, version=new_version.version)
    return new_version


def run_loop(
    scenario: DriftScenario,
    initial_size: int,
    config: LoopConfig,
    model_spec: RegressorSpec,
    split_spec: SplitSpec | None = None,
) -> tuple[ModelRegistry, list[LoopEvent], RunManifest]:
    """Bootstrap a deployment, then monitor and adapt for ``n_windows`` windows.

    ``max_cycles`` caps how many breach-handling cycles may run; monitoring
    always continues through the configured stream length.
    """
    if initial_size < config.window_size:
        raise ConfigError(
            f"initial training size {initial_size} is below the window size {config.window_size}"
        )
    if split_spec is None:
        split_spec = default_split_spec(config.seed)

    stream = make_stream(scenario)
    log = _EventLog()
    initial = next_batch(stream, initial_size).data
    versions = [_deploy_bootstrap(initial, config, model_spec, split_spec)]
    cycles_used = 0

    for window in range(config.n_windows):
        batch = next_batch(stream, config.window_size)
        if window == 0:
            recent = deque(maxlen=config.pool_windows)
        recent.append(batch.data)
        current = versions[-1]
        intervals = predict_intervals(
            current.model, current.upper_model, current.lower_model,
            current.calibration, batch.data.X,
        )
        report = evaluate(intervals, batch.data.y)
        ood_rate = sum(ood_flag(iv, current.ood_rule) for iv in intervals) / len(intervals)
        log.emit(
            batch.stop,
            "window-evaluated",
            window=window,
            start=batch.start,
            stop=batch.stop,
            picp=report.picp,
            mpiw=report.mpiw,
            ood_rate=ood_rate,
            version=current.version,
        )
        coverage_breach = report.picp < config.gamma - config.delta_cov
        ood_breach = ood_rate > config.delta_ood
        if (coverage_breach or ood_breach) and cycles_used < config.max_cycles:
            reasons = [r for r, hit in (("coverage", coverage_breach), ("ood", ood_breach)) if hit]
            log.emit(
                batch.stop,
                "breach-detected",
                window=window,
                reasons=reasons,
                picp=report.picp,
                ood_rate=ood_rate,
                threshold_picp=config.gamma - config.delta_cov,
                threshold_ood=config.delta_ood,
                version=current.version,
            )
            cycles_used += 1
            pool = concatenate(list(recent), name=f"pool@window{window}")
            new_version = _adaptation_cycle(
                current, pool, config, model_spec, window, batch.stop, log
            )
            if new_version is not None:
                versions.append(new_version)

    registry = ModelRegistry(versions=tuple(versions))
    manifest = RunManifest(
        scenario=scenario,
        initial_size=initial_size,
        config=config,
        model_spec=model_spec,
        split_spec=split_spec,
        registry_fingerprint=registry_fingerprint(registry),
        event_log_fingerprint=event_log_fingerprint(log.events),
        version_fingerprints=tuple(_version_fingerprint_record(v) for v in registry.versions),
    )
    return registry, log.events, manifest


def _config_to_dict(config: LoopConfig) -> dict:
    return {
        "window_size": config.window_size,
        "n_windows": config.n_windows,
        "delta_cov": config.delta_cov,
        "delta_ood": config.delta_ood,
        "budget": config.budget,
        "recency_weight": config.recency_weight,
        "fine_tune_epochs": config.fine_tune_epochs,
        "fine_tune_lr": config.fine_tune_lr,
        "max_cycles": config.max_cycles,
        "gamma": config.gamma,
        "seed": config.seed,
        "pool_windows": config.pool_windows,
        "ood_quantile": config.ood_quantile,
        "ood_multiplier": config.ood_multiplier,
        "warm_start_bounds": config.warm_start_bounds,
        "tol": config.tol,
    }


def manifest_to_json(manifest: RunManifest) -> str:
    payload = {
        "format_version": manifest.format_version,
        "cycle_completion": manifest.cycle_completion,
        "scenario": scenario_to_dict(manifest.scenario),
        "initial_size": manifest.initial_size,
        "config": _config_to_dict(manifest.config),
        "model_spec": spec_to_dict(manifest.model_spec),
        "split_spec": {
            "train": manifest.split_spec.train,
            "calibration": manifest.split_spec.calibration,
            "test": manifest.split_spec.test,
            "seed": manifest.split_spec.seed,
        },
        "registry_fingerprint": manifest.registry_fingerprint,
        "event_log_fingerprint": manifest.event_log_fingerprint,
        "version_fingerprints": list(manifest.version_fingerprints),
    }
    return json.dumps(payload, sort_keys=True, indent=2)


def manifest_from_json(text: str) -> RunManifest:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SerializationError(f"corrupted manifest: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise SerializationError("manifest is missing its format_version")
    if payload["format_version"] != MANIFEST_FORMAT_VERSION:
        raise SerializationError(
            f"unsupported manifest format version {payload['format_version']!r}"
        )
    try:
        return RunManifest(
            scenario=scenario_from_dict(payload["scenario"]),
            initial_size=payload["initial_size"],
            config=LoopConfig(**payload["config"]),
            model_spec=spec_from_dict(payload["model_spec"]),
            split_spec=SplitSpec(**payload["split_spec"]),
            registry_fingerprint=payload["registry_fingerprint"],
            event_log_fingerprint=payload["event_log_fingerprint"],
            version_fingerprints=tuple(payload["version_fingerprints"]),
            cycle_completion=payload["cycle_completion"],
        )
    except (KeyError, TypeError) as exc:
        raise SerializationError(f"corrupted manifest: {exc}") from exc


def replay(manifest: RunManifest) -> tuple[ModelRegistry, list[LoopEvent]]:
    """Re-run from the manifest and verify the outputs match it exactly."""
    registry, events, fresh = run_loop(
        manifest.scenario,
        manifest.initial_size,
        manifest.config,
        manifest.model_spec,
        manifest.split_spec,
    )
    if fresh.registry_fingerprint != manifest.registry_fingerprint:
        raise FingerprintMismatchError(
            "replayed registry fingerprint does not match the manifest"
        )
    if fresh.event_log_fingerprint != manifest.event_log_fingerprint:
        raise FingerprintMismatchError(
            "replayed event log fingerprint does not match the manifest"
        )
    return registry, events
