import logging
import math
import random
from dataclasses import dataclass, field
from itertools import islice
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

from ..core.exceptions import ClockViolationError
from ..models.schemas import LoadModel, WorkloadSpec
from ..utils.geo import compass_heading, offset_to_latlon
from ..utils.hashing import sha256_lines

logger = logging.getLogger(__name__)

# waypoints stay strictly inside the radius so every interpolated position does too
_INNER_RADIUS_FACTOR = 0.98
_MAX_HOPS_PER_STEP = 32


@dataclass(frozen=True)
class GeoPoint:
    latitude: float
    longitude: float


@dataclass(frozen=True)
class UpdateMessage:
    vehicle_id: str
    vehicle_type: str
    location: GeoPoint
    speed_mps: float
    heading_deg: float
    event_time_ms: int

    def to_line(self) -> str:
        return (
            f"{self.vehicle_id},{self.vehicle_type},"
            f"{self.location.latitude:.6f},{self.location.longitude:.6f},"
            f"{self.speed_mps:.2f},{self.heading_deg:.2f},{self.event_time_ms}"
        )

    @classmethod
    def from_line(cls, line: str) -> "UpdateMessage":
        parts = line.rstrip("\n").split(",")
        if len(parts) != 7:
            raise ValueError(f"expected 7 fields, got {len(parts)}: {line!r}")
        return cls(
            vehicle_id=parts[0],
            vehicle_type=parts[1],
            location=GeoPoint(float(parts[2]), float(parts[3])),
            speed_mps=float(parts[4]),
            heading_deg=float(parts[5]),
            event_time_ms=int(parts[6]),
        )


@dataclass
class Vehicle:
    vehicle_id: str
    vehicle_type: str
    x_m: float
    y_m: float
    speed_mps: float = 0.0
    heading_deg: float = 0.0
    route: List[int] = field(default_factory=list)
    spawned_at_s: int = 0


def target_vehicle_count(model: LoadModel, t: float) -> int:
    """Sinusoidal time-of-day load: mid + amp * sin(2*pi*(t - phase)/period), rounded half-up"""
    mid = (model.v_min + model.v_max) / 2.0
    amp = (model.v_max - model.v_min) / 2.0
    value = mid + amp * math.sin(2.0 * math.pi * (t - model.phase_s) / model.period_s)
    count = int(math.floor(value + 0.5))
    return min(model.v_max, max(model.v_min, count))


class TrafficGenerator:
    """
    Vehicle population inside a circular area around the configured center.
    Vehicles follow routes over a synthetic waypoint set and each active vehicle
    emits one update per simulated second.
    """

    def __init__(self, workload: WorkloadSpec, model: LoadModel, seed: int):
        self.workload = workload
        self.model = model
        self.seed = seed
        self.rng = random.Random(seed)
        self._types = list(workload.type_weights.keys())
        self._weights = [workload.type_weights[t] for t in self._types]
        self._waypoints = self._build_waypoints()
        self._active: Dict[str, Vehicle] = {}
        self._next_id = 0
        self._last_t: Optional[int] = None

    @property
    def active_count(self) -> int:
        return len(self._active)

    @property
    def vehicles(self) -> List[Vehicle]:
        return list(self._active.values())

    def _build_waypoints(self) -> List[Tuple[float, float]]:
        inner = self.workload.radius_m * _INNER_RADIUS_FACTOR
        points = []
        for _ in range(self.workload.waypoint_count):
            r = inner * math.sqrt(self.rng.random())
            theta = 2.0 * math.pi * self.rng.random()
            points.append((r * math.cos(theta), r * math.sin(theta)))
        return points

    def _new_route(self) -> List[int]:
        n = len(self._waypoints)
        return [self.rng.randrange(n) for _ in range(self.workload.route_length)]

    def _spawn(self, t: int) -> Vehicle:
        vehicle_type = self.rng.choices(self._types, weights=self._weights, k=1)[0]
        x, y = self._waypoints[self.rng.randrange(len(self._waypoints))]
        vehicle = Vehicle(
            vehicle_id=f"v-{self._next_id:07d}",
            vehicle_type=vehicle_type,
            x_m=x,
            y_m=y,
            route=self._new_route(),
            spawned_at_s=t,
        )
        self._next_id += 1
        return vehicle

    def _resize(self, target: int, t: int):
        surplus = len(self._active) - target
        if surplus > 0:
            # longest-active vehicles leave first
            for vehicle_id in list(islice(self._active, surplus)):
                del self._active[vehicle_id]
        while len(self._active) < target:
            vehicle = self._spawn(t)
            self._active[vehicle.vehicle_id] = vehicle

    def _move(self, vehicle: Vehicle):
        max_speed = self.workload.type_max_speed_mps[vehicle.vehicle_type]
        vehicle.speed_mps = self.rng.uniform(0.3, 1.0) * max_speed
        remaining = vehicle.speed_mps
        hops = 0
        while remaining > 0 and hops < _MAX_HOPS_PER_STEP:
            hops += 1
            if not vehicle.route:
                vehicle.route = self._new_route()
            tx, ty = self._waypoints[vehicle.route[0]]
            dx, dy = tx - vehicle.x_m, ty - vehicle.y_m
            dist = math.hypot(dx, dy)
            if dist > 0:
                vehicle.heading_deg = compass_heading(dx, dy)
            if dist <= remaining:
                vehicle.x_m, vehicle.y_m = tx, ty
                remaining -= dist
                vehicle.route.pop(0)
            else:
                vehicle.x_m += dx / dist * remaining
                vehicle.y_m += dy / dist * remaining
                remaining = 0.0

    def _message(self, vehicle: Vehicle, t: int) -> UpdateMessage:
        center = self.workload.center
        lat, lon = offset_to_latlon(center.lat, center.lon, vehicle.x_m, vehicle.y_m)
        return UpdateMessage(
            vehicle_id=vehicle.vehicle_id,
            vehicle_type=vehicle.vehicle_type,
            location=GeoPoint(round(lat, 6), round(lon, 6)),
            speed_mps=round(vehicle.speed_mps, 2),
            heading_deg=round(vehicle.heading_deg, 2) % 360.0,
            event_time_ms=t * 1000,
        )

    def step(self, t: int) -> List[UpdateMessage]:
        """Advance the simulation to second t and emit one message per active vehicle"""
        if t < 0:
            raise ClockViolationError(f"simulated time must be nonnegative, got {t}")
        if self._last_t is not None and t != self._last_t + 1:
            raise ClockViolationError(f"expected t={self._last_t + 1}, got t={t}")

        self._resize(target_vehicle_count(self.model, t), t)
        messages = []
        for vehicle in self._active.values():
            self._move(vehicle)
            messages.append(self._message(vehicle, t))
        self._last_t = t
        return messages


def generate_trace(
    model: LoadModel,
    duration_s: int,
    seed: int,
    workload: Optional[WorkloadSpec] = None,
    start_s: int = 0,
) -> Iterator[UpdateMessage]:
    """Concatenated step output for t = start_s .. start_s + duration_s - 1"""
    if duration_s <= 0:
        raise ValueError(f"duration_s must be positive, got {duration_s}")
    generator = TrafficGenerator(workload or WorkloadSpec(), model, seed)

    def _stream() -> Iterator[UpdateMessage]:
        for t in range(start_s, start_s + duration_s):
            yield from generator.step(t)

    return _stream()


def trace_digest(messages: Iterable[UpdateMessage]) -> str:
    return sha256_lines(m.to_line() for m in messages)


def write_trace(messages: Iterable[UpdateMessage], path: str) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for message in messages:
            f.write(message.to_line())
            f.write("\n")
            count += 1
    logger.info(f"Wrote {count} trace records to {path}")
    return count


def read_trace(path: str) -> List[UpdateMessage]:
    with open(path, "r", encoding="utf-8") as f:
        return [UpdateMessage.from_line(line) for line in f if line.strip()]
