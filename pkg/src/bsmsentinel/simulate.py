"""Synthetic CV traffic traces with labeled attack injection.

A straight multi-lane segment stands in for the road network: vehicles
arrive as a Poisson process per lane, travel a constant-acceleration-to-
speed-limit profile, and broadcast BSMs on their own 1/rate grid. Three
injectors rewrite a generated trace to embed flooding, duplicated-ID, and
fabricated-GPS attacks, keeping per-record ground-truth labels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .geo import METERS_PER_DEG
from .trace import BsmRecord

KIND_DOS = "DOS"
KIND_IMPERSONATION = "IMPERSONATION"
KIND_FALSE_INFO = "FALSE_INFO"
ATTACK_KINDS = (KIND_DOS, KIND_IMPERSONATION, KIND_FALSE_INFO)

LABELS_HEADER = ("timestamp", "vehicle_id", "label", "attack_kind")


class InjectionError(ValueError):
    """Attack cannot be applied to the given trace (e.g. target absent)."""


@dataclass
class ScenarioConfig:
    duration: float = 200.0
    lanes: int = 4
    flow: float = 200.0  # vehicles/hour/lane
    speed_limit: float = 15.65  # 35 mph
    bsm_rate: float = 10.0
    seed: int = 0
    accel: float = 2.0
    # entry speed; None means vehicles enter at the speed limit
    entry_speed: Optional[float] = None
    # None sizes the segment so transit at the limit takes `duration`
    segment_length: Optional[float] = None
    anchor_lat: float = 34.68
    anchor_lon: float = -82.85
    lane_width: float = 3.5
    # pre-populate the segment so the road is in steady state at t=0
    warm_start: bool = True

    def validate(self) -> None:
        positives = {
            "duration": self.duration,
            "lanes": self.lanes,
            "flow": self.flow,
            "speed_limit": self.speed_limit,
            "bsm_rate": self.bsm_rate,
            "accel": self.accel,
            "lane_width": self.lane_width,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.bsm_rate < 1:
            raise ValueError("bsm_rate must be at least 1 message/second")

    @property
    def effective_entry_speed(self) -> float:
        return self.speed_limit if self.entry_speed is None else self.entry_speed

    @property
    def effective_segment_length(self) -> float:
        if self.segment_length is not None:
            return self.segment_length
        return self.speed_limit * self.duration


@dataclass
class AttackSpec:
    kind: str
    target_vehicle: int
    onset: float
    duration: float
    rate: float = 1000.0  # DoS flood, messages/second
    victim_id: Optional[int] = None  # impersonation
    lon_halfwidth: float = 0.8  # false-info perturbation box, degrees
    lat_halfwidth: float = 0.5

    def validate(self, scenario: Optional[ScenarioConfig] = None) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind: {self.kind!r}")
        if self.onset < 0 or self.duration <= 0:
            raise ValueError("attack window must have onset >= 0 and duration > 0")
        if scenario is not None and self.onset + self.duration > scenario.duration:
            raise ValueError("attack window extends past the scenario duration")
        if self.kind == KIND_DOS:
            floor = scenario.bsm_rate if scenario is not None else 0.0
            if self.rate <= floor:
                raise ValueError("DoS rate must exceed the nominal BSM rate")
        if self.kind == KIND_IMPERSONATION and self.victim_id is None:
            raise ValueError("impersonation requires a victim_id")

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass
class LabeledTrace:
    """Records plus an aligned per-record ground-truth label (None = normal)."""

    records: List[BsmRecord]
    labels: List[Optional[str]]

    def __post_init__(self):
        if len(self.records) != len(self.labels):
            raise ValueError("records and labels must have equal length")


def _sorted_trace(
    pairs: Iterable[Tuple[BsmRecord, Optional[str]]]
) -> LabeledTrace:
    ordered = sorted(pairs, key=lambda p: (p[0].timestamp, p[0].vehicle_id))
    return LabeledTrace([p[0] for p in ordered], [p[1] for p in ordered])


def _exit_time(config: ScenarioConfig) -> float:
    """Time for one vehicle to traverse the segment from entry."""
    length = config.effective_segment_length
    v0 = config.effective_entry_speed
    vmax = config.speed_limit
    if v0 >= vmax:
        return length / vmax
    t_acc = (vmax - v0) / config.accel
    x_acc = v0 * t_acc + 0.5 * config.accel * t_acc**2
    if x_acc >= length:
        # exits while still accelerating
        return (-v0 + math.sqrt(v0**2 + 2.0 * config.accel * length)) / config.accel
    return t_acc + (length - x_acc) / vmax


def _kinematics(config: ScenarioConfig, tau: float) -> Tuple[float, float]:
    """(distance along segment, speed) at time ``tau`` since entry."""
    v0 = config.effective_entry_speed
    vmax = config.speed_limit
    if v0 >= vmax:
        return vmax * tau, vmax
    t_acc = (vmax - v0) / config.accel
    if tau <= t_acc:
        return v0 * tau + 0.5 * config.accel * tau**2, v0 + config.accel * tau
    x_acc = v0 * t_acc + 0.5 * config.accel * t_acc**2
    return x_acc + vmax * (tau - t_acc), vmax


def vehicle_records(
    config: ScenarioConfig, vehicle_id: int, entry_time: float, lane: int
) -> List[BsmRecord]:
    """BSMs for one vehicle entering the segment at ``entry_time`` (may be
    negative for warm-start traffic); only records with t >= 0 are emitted."""
    lat = config.anchor_lat + lane * config.lane_width / METERS_PER_DEG
    lon_scale = METERS_PER_DEG * math.cos(math.radians(lat))
    exit_tau = _exit_time(config)
    end = min(config.duration, entry_time + exit_tau)
    step = 1.0 / config.bsm_rate
    n = 0 if entry_time >= 0 else math.ceil(-entry_time / step - 1e-9)
    records = []
    while True:
        t = entry_time + n * step
        if t >= end:
            break
        x, v = _kinematics(config, t - entry_time)
        records.append(
            BsmRecord(
                timestamp=t,
                vehicle_id=vehicle_id,
                latitude=lat,
                longitude=config.anchor_lon + x / lon_scale,
                speed=v,
                msg_rate=config.bsm_rate,
            )
        )
        n += 1
    return records


def generate_baseline(
    config: ScenarioConfig, rng: Optional[np.random.Generator] = None
) -> LabeledTrace:
    """Generate an attack-free labeled trace.

    Draw order (fixed for reproducibility): per lane in index order, one
    Poisson arrival count then that many uniform arrival times.
    """
    config.validate()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    start = -_exit_time(config) if config.warm_start else 0.0
    lam = config.flow / 3600.0
    arrivals: List[Tuple[float, int]] = []
    for lane in range(config.lanes):
        count = int(rng.poisson(lam * (config.duration - start)))
        times = np.sort(rng.uniform(start, config.duration, count))
        arrivals.extend((float(t), lane) for t in times)
    arrivals.sort()

    pairs: List[Tuple[BsmRecord, Optional[str]]] = []
    for vid, (entry, lane) in enumerate(arrivals, start=1):
        for rec in vehicle_records(config, vid, entry, lane):
            pairs.append((rec, None))
    return _sorted_trace(pairs)


def spawned_vehicle_ids(trace: LabeledTrace, config: ScenarioConfig) -> set:
    """Vehicles whose first report lies within the simulated interval and
    that did not enter before t=0 (i.e. excludes warm-start traffic)."""
    first_seen: dict[int, float] = {}
    for rec in trace.records:
        first_seen.setdefault(rec.vehicle_id, rec.timestamp)
    # warm-start vehicles are already mid-segment at t=0, so their first
    # report falls in the very first reporting interval
    step = 1.0 / config.bsm_rate
    return {vid for vid, t in first_seen.items() if t >= step}


def vehicles_covering(trace: LabeledTrace, t0: float, t1: float) -> set:
    """IDs with reports both at/before t0 and at/after t1."""
    first: dict[int, float] = {}
    last: dict[int, float] = {}
    for rec in trace.records:
        first.setdefault(rec.vehicle_id, rec.timestamp)
        last[rec.vehicle_id] = rec.timestamp
    return {vid for vid in first if first[vid] <= t0 and last[vid] >= t1}


def _window_indices(trace: LabeledTrace, spec: AttackSpec, vehicle_id: int) -> List[int]:
    return [
        i
        for i, rec in enumerate(trace.records)
        if rec.vehicle_id == vehicle_id and spec.onset <= rec.timestamp < spec.end
    ]


def inject_dos(trace: LabeledTrace, spec: AttackSpec) -> LabeledTrace:
    """Replace the target's reports in the attack window with a flood at
    ``spec.rate``, carrying zero speed and a frozen position."""
    spec.validate()
    targets = _window_indices(trace, spec, spec.target_vehicle)
    if not targets:
        raise InjectionError(
            f"vehicle {spec.target_vehicle} has no records in "
            f"[{spec.onset}, {spec.end})"
        )
    # freeze at the last pre-onset position, falling back to the first in-window one
    frozen = trace.records[targets[0]]
    for i, rec in enumerate(trace.records):
        if rec.vehicle_id == spec.target_vehicle and rec.timestamp < spec.onset:
            frozen = rec
    drop = set(targets)
    pairs = [
        (rec, label)
        for i, (rec, label) in enumerate(zip(trace.records, trace.labels))
        if i not in drop
    ]
    count = int(round(spec.rate * spec.duration))
    for n in range(count):
        pairs.append(
            (
                BsmRecord(
                    timestamp=spec.onset + n / spec.rate,
                    vehicle_id=spec.target_vehicle,
                    latitude=frozen.latitude,
                    longitude=frozen.longitude,
                    speed=0.0,
                    msg_rate=spec.rate,
                ),
                KIND_DOS,
            )
        )
    return _sorted_trace(pairs)


def inject_impersonation(trace: LabeledTrace, spec: AttackSpec) -> LabeledTrace:
    """Re-stamp the attacker's in-window reports with the victim's ID, so the
    victim ID carries two simultaneous streams. Record count is unchanged."""
    spec.validate()
    attacker_idx = set(_window_indices(trace, spec, spec.target_vehicle))
    if not attacker_idx:
        raise InjectionError(
            f"attacker {spec.target_vehicle} has no records in "
            f"[{spec.onset}, {spec.end})"
        )
    if not _window_indices(trace, spec, spec.victim_id):
        raise InjectionError(
            f"victim {spec.victim_id} has no records in [{spec.onset}, {spec.end})"
        )
    pairs = []
    for i, (rec, label) in enumerate(zip(trace.records, trace.labels)):
        if i in attacker_idx:
            pairs.append((replace(rec, vehicle_id=spec.victim_id), KIND_IMPERSONATION))
        else:
            pairs.append((rec, label))
    return _sorted_trace(pairs)


def inject_false_info(
    trace: LabeledTrace, spec: AttackSpec, rng: Optional[np.random.Generator] = None
) -> LabeledTrace:
    """Overwrite the target's in-window coordinates with uniform draws from a
    box centered on each report's true position, and its speed with a draw
    unrelated to the implied displacement.

    Draw order per perturbed record: latitude offset, longitude offset, speed.
    A zero-size box leaves the records untouched (labels only).
    """
    spec.validate()
    if rng is None:
        rng = np.random.default_rng(0)
    targets = set(_window_indices(trace, spec, spec.target_vehicle))
    if not targets:
        raise InjectionError(
            f"vehicle {spec.target_vehicle} has no records in "
            f"[{spec.onset}, {spec.end})"
        )
    degenerate = spec.lat_halfwidth == 0.0 and spec.lon_halfwidth == 0.0
    pairs = []
    for i, (rec, label) in enumerate(zip(trace.records, trace.labels)):
        if i not in targets:
            pairs.append((rec, label))
            continue
        if degenerate:
            pairs.append((rec, KIND_FALSE_INFO))
            continue
        lat = rec.latitude + float(rng.uniform(-spec.lat_halfwidth, spec.lat_halfwidth))
        lon = rec.longitude + float(rng.uniform(-spec.lon_halfwidth, spec.lon_halfwidth))
        speed = float(rng.uniform(0.0, 30.0))
        pairs.append(
            (
                replace(
                    rec,
                    latitude=max(-90.0, min(90.0, lat)),
                    longitude=max(-180.0, min(180.0, lon)),
                    speed=speed,
                ),
                KIND_FALSE_INFO,
            )
        )
    return _sorted_trace(pairs)


def apply_attacks(
    trace: LabeledTrace,
    specs: Sequence[AttackSpec],
    rng: Optional[np.random.Generator] = None,
) -> LabeledTrace:
    """Apply attack specs in order, sharing one random generator."""
    for spec in specs:
        if spec.kind == KIND_DOS:
            trace = inject_dos(trace, spec)
        elif spec.kind == KIND_IMPERSONATION:
            trace = inject_impersonation(trace, spec)
        elif spec.kind == KIND_FALSE_INFO:
            trace = inject_false_info(trace, spec, rng)
        else:
            raise InjectionError(f"unknown attack kind: {spec.kind!r}")
    return trace


def write_labels(path, trace: LabeledTrace) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABELS_HEADER)
        for rec, kind in zip(trace.records, trace.labels):
            writer.writerow(
                [
                    repr(rec.timestamp),
                    rec.vehicle_id,
                    "normal" if kind is None else "attack",
                    "" if kind is None else kind,
                ]
            )


def read_labels(path) -> List[Tuple[float, int, Optional[str]]]:
    rows: List[Tuple[float, int, Optional[str]]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        idx = {name.strip().lower(): i for i, name in enumerate(header)}
        for row in reader:
            if not row:
                continue
            kind = row[idx["attack_kind"]].strip() or None
            rows.append((float(row[idx["timestamp"]]), int(row[idx["vehicle_id"]]), kind))
    return rows
