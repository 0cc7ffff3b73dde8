"""Residue threshold detector and auxiliary measurement monitors.

The residue detector raises an alarm at step k when ||z_k|| >= Th[k]; an
attack is stealthy at k only while ||z_k|| < Th[k] (strict). Auxiliary
monitors (range, gradient, relation) flag per-step violations and raise an
alarm only after `dead_zone_samples` consecutive flagged steps.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ClosedLoopTrace, ConfigurationError


class Norm(enum.Enum):
    INF = "inf"
    ONE = "one"
    TWO = "two"

    @classmethod
    def parse(cls, name: str) -> "Norm":
        for kind in cls:
            if kind.value == name or kind.name.lower() == name.lower():
                return kind
        raise ConfigurationError(f"unknown norm {name!r}")


def residue_norms(z, norm: Norm = Norm.INF) -> np.ndarray:
    """Per-step ||z_k|| for a (T, m) residue series."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if norm is Norm.INF:
        return np.max(np.abs(z), axis=1)
    if norm is Norm.ONE:
        return np.sum(np.abs(z), axis=1)
    return np.sqrt(np.sum(z * z, axis=1))


class ThresholdVector:
    """Per-step residue thresholds; entries may be unset (no check at that step).

    Internally a dense float array with NaN marking unset entries. Indexing
    is 0-based like any array; serialized step labels are 1-based.
    """

    def __init__(self, values):
        vals = np.asarray(values, dtype=float).reshape(-1).copy()
        if vals.size < 1:
            raise ConfigurationError("threshold vector needs length >= 1")
        set_vals = vals[~np.isnan(vals)]
        if np.any(set_vals < 0):
            raise ConfigurationError("set thresholds must be >= 0")
        self.values = vals

    @classmethod
    def empty(cls, length: int) -> "ThresholdVector":
        return cls(np.full(length, np.nan))

    @classmethod
    def constant(cls, value: float, length: int) -> "ThresholdVector":
        return cls(np.full(length, float(value)))

    @classmethod
    def from_pairs(cls, length: int, pairs) -> "ThresholdVector":
        vals = np.full(length, np.nan)
        for idx, value in dict(pairs).items():
            vals[idx] = value
        return cls(vals)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ThresholdVector):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(
            np.all((self.values == other.values)
                   | (np.isnan(self.values) & np.isnan(other.values)))
        )

    def copy(self) -> "ThresholdVector":
        return ThresholdVector(self.values)

    def is_set(self, idx: int) -> bool:
        return not math.isnan(self.values[idx])

    def set_indices(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(~np.isnan(self.values))]

    def num_set(self) -> int:
        return int(np.sum(~np.isnan(self.values)))

    def is_monotone_nonincreasing(self) -> bool:
        set_vals = self.values[~np.isnan(self.values)]
        return bool(np.all(np.diff(set_vals) <= 0)) if set_vals.size > 1 else True

    def pointwise_leq(self, other: "ThresholdVector") -> bool:
        """True if self is set wherever other is, and self <= other there."""
        for idx in other.set_indices():
            if idx >= len(self) or not self.is_set(idx):
                return False
            if self.values[idx] > other.values[idx]:
                return False
        return True


@dataclass(frozen=True)
class StepsVector:
    """Staircase edges: maps edge index (0-based, end of a step) to its height."""

    edges: dict

    def __post_init__(self):
        object.__setattr__(self, "edges", dict(self.edges))

    def sorted_edges(self) -> list[tuple[int, float]]:
        return sorted(self.edges.items())

    def heights_nonincreasing(self) -> bool:
        hs = [h for _, h in self.sorted_edges()]
        return all(hs[i] >= hs[i + 1] for i in range(len(hs) - 1))

    def to_threshold(self, length: int) -> ThresholdVector:
        """Dense staircase threshold over [0, last edge]; beyond it unset."""
        vals = np.full(length, np.nan)
        start = 0
        for edge, height in self.sorted_edges():
            vals[start:edge + 1] = height
            start = edge + 1
        return ThresholdVector(vals)

    def consistent_with(self, th: ThresholdVector) -> bool:
        if not self.edges:
            return th.num_set() == 0
        dense = self.to_threshold(len(th))
        return dense == th


def residue_alarm(z_k, th: ThresholdVector, idx: int, norm: Norm = Norm.INF) -> bool:
    """Alarm at step idx iff a threshold is set there and ||z_k|| >= Th[idx]."""
    if idx < 0 or idx >= len(th):
        raise ConfigurationError(f"step index {idx} outside threshold vector")
    if not th.is_set(idx):
        return False
    value = residue_norms(np.atleast_2d(z_k), norm)[0]
    return bool(value >= th.values[idx])


def residue_alarm_flags(z, th: ThresholdVector, norm: Norm = Norm.INF) -> np.ndarray:
    """Per-step alarm flags for a residue series; unset entries never alarm."""
    norms = residue_norms(z, norm)
    upto = min(len(norms), len(th))
    flags = np.zeros(len(norms), dtype=bool)
    vals = th.values[:upto]
    set_mask = ~np.isnan(vals)
    flags[:upto][set_mask] = norms[:upto][set_mask] >= vals[set_mask]
    return flags


@dataclass(frozen=True)
class ChannelMonitor:
    """Range and gradient check on one measurement channel."""

    channel: int
    low: float
    high: float
    gradient: float | None = None
    name: str = ""


@dataclass(frozen=True)
class RelationMonitor:
    """|measured - (scale * companion + offset)| >= allowed_diff flags a violation."""

    measured: int
    companion: int
    scale: float
    offset: float
    allowed_diff: float
    name: str = ""


@dataclass(frozen=True)
class MonitorSpec:
    """The measurement sanity checks running alongside the residue detector."""

    ts: float
    dead_zone_samples: int
    channels: tuple = ()
    relations: tuple = ()

    def __post_init__(self):
        if self.ts <= 0:
            raise ConfigurationError("sampling period must be positive")
        if self.dead_zone_samples < 1:
            raise ConfigurationError("dead zone must be >= 1 sample")
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "relations", tuple(self.relations))

    @staticmethod
    def dead_zone_from_seconds(dead_zone_seconds: float, ts: float) -> int:
        return int(math.floor(dead_zone_seconds / ts))

    def max_channel(self) -> int:
        idx = [c.channel for c in self.channels]
        idx += [r.measured for r in self.relations]
        idx += [r.companion for r in self.relations]
        return max(idx) if idx else -1


def range_gradient_flags(signal, low, high, grad_bound, ts) -> np.ndarray:
    """Per-step violation flags: out of [low, high], or |step change|/ts > bound.

    The first sample is checked against the range only.
    """
    s = np.asarray(signal, dtype=float).reshape(-1)
    flags = (s < low) | (s > high)
    if grad_bound is not None and s.size >= 2:
        rates = np.abs(np.diff(s)) / ts
        flags[1:] |= rates > grad_bound
    return flags


def relation_flags(measured, companion, scale, offset, allowed_diff) -> np.ndarray:
    """Per-step flags where the measured signal strays from its companion estimate."""
    a = np.asarray(measured, dtype=float).reshape(-1)
    b = np.asarray(companion, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ConfigurationError("relation monitor series must have equal length")
    return np.abs(a - (scale * b + offset)) >= allowed_diff


def dead_zone_alarm(flags, dead_zone_samples: int):
    """(alarm, first_alarm_step): alarm iff `dead_zone_samples` consecutive flags.

    `first_alarm_step` is the 1-based step at the end of the first qualifying
    run, or None.
    """
    if dead_zone_samples < 1:
        raise ConfigurationError("dead zone must be >= 1 sample")
    run = 0
    for j, flagged in enumerate(np.asarray(flags, dtype=bool).reshape(-1)):
        run = run + 1 if flagged else 0
        if run >= dead_zone_samples:
            return True, j + 1
    return False, None


@dataclass
class MonitorReport:
    """Outcome of every monitor on one trace; passed means no alarm anywhere."""

    passed: bool
    monitor_flags: dict = field(default_factory=dict)
    first_alarm_steps: dict = field(default_factory=dict)


def monitor_report(trace_or_y, spec: MonitorSpec) -> MonitorReport:
    """Run every monitor in `spec` over the measured outputs with dead-zone semantics."""
    y = trace_or_y.y if isinstance(trace_or_y, ClosedLoopTrace) else \
        np.atleast_2d(np.asarray(trace_or_y, dtype=float))
    if spec.max_channel() >= y.shape[1]:
        raise ConfigurationError(
            f"monitor references channel {spec.max_channel()} but trace has {y.shape[1]}"
        )
    report = MonitorReport(passed=True)
    for i, mon in enumerate(spec.channels):
        flags = range_gradient_flags(y[:, mon.channel], mon.low, mon.high,
                                     mon.gradient, spec.ts)
        alarm, first = dead_zone_alarm(flags, spec.dead_zone_samples)
        key = mon.name or f"channel{mon.channel}"
        report.monitor_flags[key] = flags
        report.first_alarm_steps[key] = first
        report.passed = report.passed and not alarm
    for i, rel in enumerate(spec.relations):
        flags = relation_flags(y[:, rel.measured], y[:, rel.companion],
                               rel.scale, rel.offset, rel.allowed_diff)
        alarm, first = dead_zone_alarm(flags, spec.dead_zone_samples)
        key = rel.name or f"relation{i}"
        report.monitor_flags[key] = flags
        report.first_alarm_steps[key] = first
        report.passed = report.passed and not alarm
    return report


def evaluate_mdc(trace_or_y, spec: MonitorSpec) -> bool:
    """True iff no monitor raises a dead-zone alarm on the trace."""
    return monitor_report(trace_or_y, spec).passed
