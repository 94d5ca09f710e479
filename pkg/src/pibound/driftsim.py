"""Deterministic synthetic data streams with injectable distribution drift.

Every sample is a pure function of (scenario, stream position): the noise
comes from a counter-based generator keyed by the scenario seed with the
position as the counter, so batches can be regenerated or produced out of
order without any stored stream state. Drift moves either the target
function (an additive shift of its offset parameter, "concept"), the feature
distribution (a shift of its mean, "covariate"), or both.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .errors import ConfigError

KINDS = ("none", "sudden", "gradual", "recurring")
BASES = ("sine", "piecewise-linear", "quadratic")
CHANNELS = ("concept", "covariate", "both")


@dataclass(frozen=True)
class DriftScenario:
    """A drifting data-generating process.

    ``magnitude`` is the full parameter shift; ``onset`` the step where drift
    begins; ``duration`` the ramp length for gradual drift; ``period`` the
    cycle length for recurring drift (on for the first half of each cycle,
    measured from onset).
    """

    kind: str = "none"
    base: str = "sine"
    noise_scale: float = 0.1
    magnitude: float = 0.0
    onset: int = 0
    duration: int = 1
    period: int = 2
    d: int = 1
    seed: int = 0
    channel: str = "concept"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown drift kind {self.kind!r}")
        if self.base not in BASES:
            raise ConfigError(f"unknown base function {self.base!r}")
        if self.channel not in CHANNELS:
            raise ConfigError(f"unknown drift channel {self.channel!r}")
        if self.noise_scale <= 0.0:
            raise ConfigError(f"noise scale must be > 0, got {self.noise_scale}")
        if not np.isfinite(self.magnitude):
            raise ConfigError("drift magnitude must be finite")
        if self.onset < 0:
            raise ConfigError(f"onset must be >= 0, got {self.onset}")
        if self.duration < 1:
            raise ConfigError(f"duration must be >= 1, got {self.duration}")
        if self.period < 2:
            raise ConfigError(f"period must be >= 2, got {self.period}")
        if self.d < 1:
            raise ConfigError(f"feature dimension must be >= 1, got {self.d}")


def shift_fraction(scenario: DriftScenario, position: int) -> float:
    """Fraction of the full magnitude in effect at a stream position."""
    if scenario.kind == "none" or position < scenario.onset:
        return 0.0
    if scenario.kind == "sudden":
        return 1.0
    if scenario.kind == "gradual":
        return min((position - scenario.onset) / scenario.duration, 1.0)
    # recurring: on for the first half of each cycle
    return 1.0 if (position - scenario.onset) % scenario.period < scenario.period / 2 else 0.0


def base_value(scenario: DriftScenario, x: np.ndarray, offset: float) -> float:
    s = float(np.mean(x))
    if scenario.base == "sine":
        return float(np.sin(3.0 * s)) + offset
    if scenario.base == "piecewise-linear":
        return abs(s) + offset
    return s * s + offset


def sample_at(scenario: DriftScenario, position: int) -> tuple[np.ndarray, float]:
    """The (x, y) pair at a stream position; pure in (scenario, position)."""
    if position < 0:
        raise ConfigError(f"stream positions are nonnegative, got {position}")
    rng = np.random.Generator(
        np.random.Philox(seed=scenario.seed, counter=[0, position, 0, 0])
    )
    z = rng.standard_normal(scenario.d + 1)
    shift = shift_fraction(scenario, position) * scenario.magnitude
    feature_loc = shift if scenario.channel in ("covariate", "both") else 0.0
    offset = shift if scenario.channel in ("concept", "both") else 0.0
    x = feature_loc + z[: scenario.d]
    y = base_value(scenario, x, offset) + scenario.noise_scale * z[scenario.d]
    return x, y


def scenario_fingerprint(scenario: DriftScenario) -> str:
    canonical = json.dumps(scenario_to_dict(scenario), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def scenario_to_dict(scenario: DriftScenario) -> dict:
    return {
        "kind": scenario.kind,
        "base": scenario.base,
        "noise_scale": scenario.noise_scale,
        "magnitude": scenario.magnitude,
        "onset": scenario.onset,
        "duration": scenario.duration,
        "period": scenario.period,
        "d": scenario.d,
        "seed": scenario.seed,
        "channel": scenario.channel,
    }


def scenario_from_dict(payload: dict) -> DriftScenario:
    return DriftScenario(**payload)


@dataclass(frozen=True)
class StreamBatch:
    """A contiguous run of stream samples; ids are global stream positions."""

    data: Dataset
    start: int
    stop: int
    scenario_fingerprint: str


def generate(scenario: DriftScenario, start: int, stop: int) -> Dataset:
    """Materialize positions [start, stop) as a dataset."""
    positions = range(start, stop)
    xs, ys = [], []
    for p in positions:
        x, y = sample_at(scenario, p)
        xs.append(x)
        ys.append(y)
    return Dataset(
        X=np.asarray(xs, dtype=np.float64).reshape(len(xs), scenario.d),
        y=np.asarray(ys, dtype=np.float64),
        ids=np.arange(start, stop, dtype=np.int64),
        name=f"stream[{start}:{stop})",
    )


class Stream:
    """Cursor over a scenario's sample sequence."""

    def __init__(self, scenario: DriftScenario):
        self.scenario = scenario
        self.position = 0

    def __repr__(self):
        return f"Stream(kind={self.scenario.kind!r}, position={self.position})"


def make_stream(scenario: DriftScenario) -> Stream:
    return Stream(scenario)


def next_batch(stream: Stream, batch_size: int) -> StreamBatch:
    """The next ``batch_size`` samples; contiguous with the previous batch."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    start = stream.position
    stop = start + batch_size
    data = generate(stream.scenario, start, stop)
    stream.position = stop
    return StreamBatch(
        data=data,
        start=start,
        stop=stop,
        scenario_fingerprint=scenario_fingerprint(stream.scenario),
    )
