"""GPS telemetry: speed / bearing derivation, maneuver classification and synthetic drive traces."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

import config

logger = logging.getLogger(__name__)

TRACE_HEADER = ["timestamp_s", "lat_deg", "lng_deg", "alt_m"]
LABELS_HEADER = ["timestamp_s", "in_maneuver"]


class UndefinedBearingError(ValueError):
    """Bearing between two identical positions."""


class InvalidTraceError(ValueError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class ManeuverMode(str, Enum):
    NORMAL = "normal"
    SENSITIVE = "sensitive"


@dataclass(frozen=True)
class GeoSample:
    timestamp: float
    lat: float
    lng: float
    alt: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.timestamp, self.lat, self.lng, self.alt)):
            raise ValueError(f"Non-finite GPS sample at t={self.timestamp}")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"Latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lng <= 180.0:
            raise ValueError(f"Longitude {self.lng} outside [-180, 180]")


@dataclass(frozen=True)
class VehicleState:
    timestamp: float
    speed: float    # m/s
    bearing: float  # degrees in [0, 360)

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError(f"Negative speed {self.speed} at t={self.timestamp}")
        if not 0.0 <= self.bearing < 360.0:
            raise ValueError(f"Bearing {self.bearing} outside [0, 360)")


class ManeuverThresholds(BaseModel):
    model_config = ConfigDict(frozen=True)

    s_thd: float = Field(default=config.S_THD, ge=0.0)
    d_thd: float = Field(default=config.D_THD, ge=0.0)


@dataclass(frozen=True)
class ManeuverState:
    timestamp: float
    state: ManeuverMode
    delta_s: float
    delta_d: float

    def to_dict(self) -> dict:
        return {"timestamp_s": self.timestamp, "state": self.state.value,
                "delta_s": self.delta_s, "delta_d": self.delta_d}


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def haversine_distance(a: GeoSample, b: GeoSample) -> float:
    """Great-circle distance in meters on a sphere of radius EARTH_RADIUS_M."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lng - a.lng)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2.0 * config.EARTH_RADIUS_M * math.asin(math.sqrt(min(max(h, 0.0), 1.0)))


def _normalize_bearing(degrees: float) -> float:
    bearing = degrees % 360.0
    return 0.0 if bearing >= 360.0 else bearing


def initial_bearing(a: GeoSample, b: GeoSample) -> float:
    """Forward azimuth from a to b in [0, 360)."""
    if a.lat == b.lat and a.lng == b.lng:
        raise UndefinedBearingError(f"Bearing undefined between identical positions ({a.lat}, {a.lng})")
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dlam = math.radians(b.lng - a.lng)
    y = math.sin(dlam) * math.cos(phi2)
    x = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(dlam)
    return _normalize_bearing(math.degrees(math.atan2(y, x)))


def angular_difference(a: float, b: float) -> float:
    """Minimal angle between two bearings, in [0, 180]."""
    diff = abs(a - b) % 360.0
    return min(diff, 360.0 - diff)


def derive_states(trace: Sequence[GeoSample]) -> list[VehicleState]:
    """
    Speed and bearing for each consecutive pair of samples.

    Args:
        trace: GPS samples with strictly increasing timestamps

    Returns:
        len(trace) - 1 states stamped with the later sample's timestamp;
        stationary pairs keep the previous bearing (0 for the first pair)
    """
    if len(trace) < 2:
        raise InvalidTraceError(f"Need at least 2 GPS samples, got {len(trace)}")
    states = []
    bearing = 0.0
    for i in range(1, len(trace)):
        prev, cur = trace[i - 1], trace[i]
        dt = cur.timestamp - prev.timestamp
        if dt <= 0:
            raise InvalidTraceError(f"Timestamps not strictly increasing at index {i}", index=i)
        distance = haversine_distance(prev, cur)
        if distance >= config.STATIONARY_DISTANCE_M:
            bearing = initial_bearing(prev, cur)
        states.append(VehicleState(cur.timestamp, distance / dt, bearing))
    return states


def _smoothed(states: Sequence[VehicleState], window: int) -> tuple[np.ndarray, np.ndarray]:
    speeds = np.array([s.speed for s in states])
    bearings = np.array([s.bearing for s in states])
    if window <= 1:
        return speeds, bearings
    kernel_speed = np.empty_like(speeds)
    kernel_bearing = np.empty_like(bearings)
    radians = np.radians(bearings)
    for i in range(len(states)):
        lo = max(0, i - window + 1)
        kernel_speed[i] = speeds[lo:i + 1].mean()
        mean_angle = math.atan2(np.sin(radians[lo:i + 1]).mean(), np.cos(radians[lo:i + 1]).mean())
        kernel_bearing[i] = _normalize_bearing(math.degrees(mean_angle))
    return kernel_speed, kernel_bearing


def classify_maneuver(states: Sequence[VehicleState], thresholds: ManeuverThresholds | None = None,
                      window: int = 1) -> list[ManeuverState]:
    """Sensitive iff the speed change and the bearing change both strictly exceed their thresholds.

    `window` > 1 replaces speed and bearing by their trailing (circular) mean
    before differencing; the first state is always normal.
    """
    thresholds = thresholds or ManeuverThresholds()
    if not states:
        return []
    speeds, bearings = _smoothed(states, window)
    result = [ManeuverState(states[0].timestamp, ManeuverMode.NORMAL, 0.0, 0.0)]
    for i in range(1, len(states)):
        delta_s = abs(float(speeds[i] - speeds[i - 1]))
        delta_d = angular_difference(float(bearings[i]), float(bearings[i - 1]))
        sensitive = delta_s > thresholds.s_thd and delta_d > thresholds.d_thd
        mode = ManeuverMode.SENSITIVE if sensitive else ManeuverMode.NORMAL
        result.append(ManeuverState(states[i].timestamp, mode, delta_s, delta_d))
    return result


def maneuver_states(trace: Sequence[GeoSample], thresholds: ManeuverThresholds | None = None,
                    window: int = 1) -> list[ManeuverState]:
    """derive_states + classify_maneuver; traces with fewer than 2 samples yield no states."""
    if len(trace) < 2:
        logger.warning(f"Trace has {len(trace)} samples; no maneuver states can be derived")
        return []
    return classify_maneuver(derive_states(trace), thresholds, window)


def sensitive_runs(states: Sequence[ManeuverState]) -> list[tuple[float, float]]:
    """(first, last) timestamps of each maximal run of sensitive states."""
    runs = []
    start = None
    last = None
    for state in states:
        if state.state is ManeuverMode.SENSITIVE:
            if start is None:
                start = state.timestamp
            last = state.timestamp
        elif start is not None:
            runs.append((start, last))
            start = None
    if start is not None:
        runs.append((start, last))
    return runs


# ---------------------------------------------------------------------------
# Synthetic trajectories
# ---------------------------------------------------------------------------

TrajectoryKind = Literal["straight", "turn", "u_turn", "roundabout"]

# duration_s, minimum speed, time of the speed minimum, heading phases (duration_s, change_deg)
_MANEUVERS = {
    "straight": (0.0, None, 0.0, []),
    "turn": (6.0, 5.0, 2.0, [(6.0, 90.0)]),
    "u_turn": (10.0, 0.5, 3.0, [(10.0, 180.0)]),
    "roundabout": (12.0, 6.0, 3.0, [(3.0, 36.0), (6.0, -162.0), (3.0, 36.0)]),
}


class TrajectoryParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    cruise_speed: float = Field(default=12.0, gt=0.0)
    min_speed: float | None = Field(default=None, ge=0.0)
    lead_in_s: float = Field(default=30.0, ge=0.0)
    lead_out_s: float = Field(default=30.0, ge=0.0)
    sample_rate_hz: float = Field(default=config.GPS_RATE_HZ, gt=0.0)
    noise_sigma_m: float = Field(default=0.0, ge=0.0)
    initial_heading_deg: float = 0.0
    origin_lat: float = Field(default=39.96, ge=-89.0, le=89.0)
    origin_lng: float = Field(default=116.35, ge=-180.0, le=180.0)
    alt_m: float = 50.0
    start_time: float = 0.0


@dataclass(frozen=True, eq=False)
class Trajectory:
    kind: str
    samples: tuple[GeoSample, ...]
    labels: np.ndarray  # 1 inside the maneuver window
    maneuver_start: float
    maneuver_end: float

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([s.timestamp for s in self.samples])


def _speed_profile(t: np.ndarray, params: TrajectoryParams, duration: float, min_speed: float,
                   min_at: float) -> np.ndarray:
    """Cruise, a linear slow-down to `min_speed` at `min_at`, then a linear recovery."""
    cruise = params.cruise_speed
    v = np.full_like(t, cruise)
    if duration <= 0:
        return v
    down = (t >= 0) & (t < min_at)
    up = (t >= min_at) & (t <= duration)
    v[down] = cruise - (cruise - min_speed) * t[down] / min_at
    v[up] = min_speed + (cruise - min_speed) * (t[up] - min_at) / (duration - min_at)
    return v


def _heading_profile(t: np.ndarray, params: TrajectoryParams, phases) -> np.ndarray:
    heading = np.full_like(t, params.initial_heading_deg)
    elapsed = 0.0
    for phase_len, change in phases:
        inside = (t > elapsed) & (t <= elapsed + phase_len)
        after = t > elapsed + phase_len
        heading[inside] += change * (t[inside] - elapsed) / phase_len
        heading[after] += change
        elapsed += phase_len
    return heading


def generate_trajectory(kind: TrajectoryKind, params: TrajectoryParams | None = None,
                        seed: int = config.SEED) -> Trajectory:
    """
    Sample a synthetic drive at `sample_rate_hz`.

    The vehicle cruises for `lead_in_s`, performs the maneuver (slowing down
    first and speeding up again while its heading changes), then cruises for
    `lead_out_s`. Positions are integrated in a local east/north frame and
    projected around the origin.

    Args:
        kind: straight, turn, u_turn or roundabout
        params: Speeds, timing, noise and origin
        seed: Seed for the optional Gaussian coordinate noise

    Returns:
        Trajectory with per-sample ground-truth labels
    """
    if kind not in _MANEUVERS:
        raise ValueError(f"Unknown trajectory kind {kind!r}; choose from {sorted(_MANEUVERS)}")
    params = params or TrajectoryParams()
    duration, default_min, min_at, phases = _MANEUVERS[kind]
    min_speed = params.min_speed if params.min_speed is not None else default_min
    if min_speed is not None and min_speed > params.cruise_speed:
        raise ValueError(f"min_speed {min_speed} exceeds cruise speed {params.cruise_speed}")

    total = params.lead_in_s + duration + params.lead_out_s
    substeps = 100
    dt = 1.0 / (params.sample_rate_hz * substeps)
    n_samples = int(math.floor(total * params.sample_rate_hz + 1e-9)) + 1
    n_fine = (n_samples - 1) * substeps

    mid = (np.arange(n_fine) + 0.5) * dt - params.lead_in_s  # relative to maneuver start
    speed = _speed_profile(mid, params, duration, min_speed or 0.0, min_at)
    heading = np.radians(_heading_profile(mid, params, phases))
    east = np.concatenate([[0.0], np.cumsum(speed * np.sin(heading) * dt)])[::substeps]
    north = np.concatenate([[0.0], np.cumsum(speed * np.cos(heading) * dt)])[::substeps]

    if params.noise_sigma_m > 0:
        rng = np.random.default_rng(seed)
        east = east + rng.normal(0.0, params.noise_sigma_m, east.shape)
        north = north + rng.normal(0.0, params.noise_sigma_m, north.shape)

    lat0 = math.radians(params.origin_lat)
    lats = params.origin_lat + np.degrees(north / config.EARTH_RADIUS_M)
    lngs = params.origin_lng + np.degrees(east / (config.EARTH_RADIUS_M * math.cos(lat0)))
    times = params.start_time + np.arange(n_samples) / params.sample_rate_hz

    start = params.start_time + params.lead_in_s
    end = start + duration
    labels = ((times >= start - 1e-9) & (times <= end + 1e-9) & (duration > 0)).astype(np.int64)
    samples = tuple(GeoSample(float(t), float(la), float(lo), params.alt_m) for t, la, lo in zip(times, lats, lngs))
    logger.debug(f"Generated {kind} trajectory: {n_samples} samples, maneuver {start:.1f}-{end:.1f} s")
    return Trajectory(kind, samples, labels, start, end)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_trace_csv(path, samples: Sequence[GeoSample]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_HEADER)
        for s in samples:
            writer.writerow([repr(s.timestamp), repr(s.lat), repr(s.lng), repr(s.alt)])
    return path


def read_trace_csv(path) -> list[GeoSample]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Trace file not found: {path}")
    samples = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(TRACE_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise InvalidTraceError(f"Trace {path} lacks columns {sorted(missing)}")
        for i, row in enumerate(reader):
            try:
                samples.append(GeoSample(float(row["timestamp_s"]), float(row["lat_deg"]),
                                         float(row["lng_deg"]), float(row["alt_m"])))
            except (TypeError, ValueError) as e:
                raise InvalidTraceError(f"Bad trace row {i} in {path}: {e}", index=i) from e
    for i in range(1, len(samples)):
        if samples[i].timestamp <= samples[i - 1].timestamp:
            raise InvalidTraceError(f"Timestamps not strictly increasing at index {i} in {path}", index=i)
    return samples


def write_labels_csv(path, trajectory: Trajectory) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LABELS_HEADER)
        for sample, label in zip(trajectory.samples, trajectory.labels):
            writer.writerow([repr(sample.timestamp), int(label)])
    return path


def write_states_jsonl(path, states: Sequence[ManeuverState]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for state in states:
            f.write(json.dumps(state.to_dict()) + "\n")
    return path
