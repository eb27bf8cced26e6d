"""Ground-truth vehicle kinematics on a straight multi-lane highway.

Vehicles follow the Intelligent Driver Model (IDM) in their lane; there is
no lane changing.  Longitudinal coordinates run along x in [0, road_length];
each direction has its own set of lanes offset laterally.  Arrivals at the
road ends are Poisson with a mild feedback term that holds the vehicle count
near the configured density.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# IDM defaults (Treiber et al.): max accel, comfortable decel, headway,
# min gap, acceleration exponent.
IDM_MAX_ACCEL = 1.5     # m/s^2
IDM_COMFORT_DECEL = 2.0  # m/s^2
IDM_HEADWAY = 1.2       # s
IDM_MIN_GAP = 2.0       # m
IDM_DELTA = 4.0


class ConfigError(ValueError):
    """Raised when a configuration field fails validation."""


@dataclass
class ScenarioSpec:
    """Highway geometry, density regime and vehicle population parameters.

    target_density counts vehicles per km of road, both directions combined,
    split evenly between directions.
    """

    road_length: float = 5000.0
    lanes_per_direction: int = 3
    comms_region: tuple[float, float] = (1500.0, 3500.0)
    logging_region: tuple[float, float] = (2000.0, 3000.0)
    target_density: float = 60.0          # veh/km, both directions
    desired_speed_mean: float = 27.0      # m/s
    desired_speed_stddev: float = 3.0     # m/s
    vehicle_length: float = 4.5
    vehicle_width: float = 1.8
    lane_width: float = 3.5
    penetration_rate: float = 1.0

    def validate(self) -> None:
        if self.target_density <= 0:
            raise ConfigError("scenario.target_density: density must be positive")
        if self.road_length <= 0:
            raise ConfigError("scenario.road_length: must be positive")
        if self.lanes_per_direction < 1:
            raise ConfigError("scenario.lanes_per_direction: must be >= 1")
        c0, c1 = self.comms_region
        l0, l1 = self.logging_region
        if not (0.0 <= c0 < c1 <= self.road_length):
            raise ConfigError("scenario.comms_region: must lie within [0, road_length]")
        if not (c0 <= l0 < l1 <= c1):
            raise ConfigError("scenario.logging_region: must lie within comms_region")
        if self.desired_speed_mean <= 0:
            raise ConfigError("scenario.desired_speed_mean: must be positive")
        if not (0.0 <= self.penetration_rate <= 1.0):
            raise ConfigError("scenario.penetration_rate: must be in [0, 1]")
        if self.vehicle_length <= 0 or self.vehicle_width <= 0:
            raise ConfigError("scenario.vehicle_length/width: must be positive")

    def lane_center(self, direction: int, lane: int) -> float:
        """Lateral offset of a lane center.  Eastbound (dir 0) lanes sit at
        negative y, westbound at positive y."""
        off = (lane + 0.5) * self.lane_width
        return -off if direction == 0 else off


@dataclass
class Vehicle:
    id: int
    direction: int            # 0 = +x travel, 1 = -x travel
    lane: int                 # 0 = innermost lane of its direction
    x: float                  # longitudinal centroid, global frame
    y: float                  # lateral centroid (lane center)
    speed: float              # m/s, >= 0
    heading: float            # rad; 0.0 eastbound, pi westbound
    desired_speed: float
    length: float
    width: float
    is_station: bool

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    def travel_pos(self, road_length: float) -> float:
        """Distance traveled since the entry end of the road."""
        return self.x if self.direction == 0 else road_length - self.x


class World:
    """Mutable ground-truth state: per-(direction, lane) vehicle queues kept
    sorted by travel distance (downstream-most last)."""

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        self.lanes: dict[tuple[int, int], list[Vehicle]] = {
            (d, l): [] for d in (0, 1) for l in range(spec.lanes_per_direction)
        }
        self.next_id = 0
        self.removed_ids: list[int] = []
        # deferred arrivals per lane key, waiting for a safe entry gap
        self._pending: dict[tuple[int, int], int] = {k: 0 for k in self.lanes}

    # -- access helpers ----------------------------------------------------

    def vehicles(self) -> list[Vehicle]:
        out: list[Vehicle] = []
        for key in sorted(self.lanes):
            out.extend(self.lanes[key])
        out.sort(key=lambda v: v.id)
        return out

    def count(self, direction: int | None = None) -> int:
        n = 0
        for (d, _), vs in self.lanes.items():
            if direction is None or d == direction:
                n += len(vs)
        return n

    def snapshot(self) -> "WorldSnapshot":
        return WorldSnapshot(self.vehicles())

    # -- population ---------------------------------------------------------

    def _new_vehicle(self, direction: int, lane: int, travel: float,
                     speed: float, desired: float, is_station: bool) -> Vehicle:
        spec = self.spec
        x = travel if direction == 0 else spec.road_length - travel
        v = Vehicle(
            id=self.next_id,
            direction=direction,
            lane=lane,
            x=x,
            y=spec.lane_center(direction, lane),
            speed=speed,
            heading=0.0 if direction == 0 else np.pi,
            desired_speed=desired,
            length=spec.vehicle_length,
            width=spec.vehicle_width,
            is_station=is_station,
        )
        self.next_id += 1
        return v

    def _draw_desired_speed(self, rng: np.random.Generator) -> float:
        spec = self.spec
        lo = 0.5 * spec.desired_speed_mean
        while True:
            v = rng.normal(spec.desired_speed_mean, spec.desired_speed_stddev)
            if v >= lo:
                return v

    def _draw_station_flag(self, rng: np.random.Generator) -> bool:
        p = self.spec.penetration_rate
        if p >= 1.0:
            return True
        return bool(rng.random() < p)

    def populate(self, rng: np.random.Generator) -> None:
        """Place the initial population at the target density with jittered
        uniform spacing, at the drawn desired speed."""
        spec = self.spec
        per_lane = spec.target_density / 2.0 / spec.lanes_per_direction  # veh/km
        n_lane = int(round(per_lane * spec.road_length / 1000.0))
        if n_lane == 0:
            return
        spacing = spec.road_length / n_lane
        for key in sorted(self.lanes):
            direction, lane = key
            travels = []
            for i in range(n_lane):
                jitter = rng.uniform(-0.25, 0.25) * spacing
                travels.append((i + 0.5) * spacing + jitter)
            travels.sort()
            for t in travels:
                desired = self._draw_desired_speed(rng)
                veh = self._new_vehicle(direction, lane, t, desired, desired,
                                        self._draw_station_flag(rng))
                self.lanes[key].append(veh)


class WorldSnapshot:
    """Immutable per-tick array view of the world, used by sensing, the
    channel and metrics.  Index order is ascending vehicle id."""

    def __init__(self, vehicles: list[Vehicle]):
        self.vehicle_list = vehicles
        n = len(vehicles)
        self.ids = np.fromiter((v.id for v in vehicles), dtype=np.int64, count=n)
        self.x = np.fromiter((v.x for v in vehicles), dtype=float, count=n)
        self.y = np.fromiter((v.y for v in vehicles), dtype=float, count=n)
        self.speed = np.fromiter((v.speed for v in vehicles), dtype=float, count=n)
        self.heading = np.fromiter((v.heading for v in vehicles), dtype=float, count=n)
        self.vx = self.speed * np.cos(self.heading)
        self.vy = self.speed * np.sin(self.heading)
        self.length = np.fromiter((v.length for v in vehicles), dtype=float, count=n)
        self.width = np.fromiter((v.width for v in vehicles), dtype=float, count=n)
        self.row_of = {int(i): k for k, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.vehicle_list)


def idm_acceleration(speed, desired, gap, lead_speed):
    """IDM acceleration; gap/lead_speed may be None for a free road.
    Accepts scalars or aligned numpy arrays (with np.inf gap for free road)."""
    speed = np.asarray(speed, dtype=float)
    free = 1.0 - (speed / np.asarray(desired, dtype=float)) ** IDM_DELTA
    if gap is None:
        return IDM_MAX_ACCEL * free
    gap = np.maximum(np.asarray(gap, dtype=float), 1e-3)
    dv = speed - np.asarray(lead_speed, dtype=float)
    s_star = IDM_MIN_GAP + np.maximum(
        0.0, speed * IDM_HEADWAY + speed * dv / (2.0 * np.sqrt(IDM_MAX_ACCEL * IDM_COMFORT_DECEL))
    )
    return IDM_MAX_ACCEL * (free - (s_star / gap) ** 2)


def advance(world: World, dt: float, rng: np.random.Generator) -> None:
    """One IDM step for every vehicle; despawns vehicles leaving the road.

    Ballistic update: v' = max(0, v + a*dt), then x advances by v'*dt so the
    per-tick displacement equals the post-update speed times dt exactly.
    """
    if dt <= 0:
        return
    spec = world.spec
    for key in sorted(world.lanes):
        vs = world.lanes[key]
        if not vs:
            continue
        n = len(vs)
        travel = np.fromiter((v.travel_pos(spec.road_length) for v in vs), float, count=n)
        speed = np.fromiter((v.speed for v in vs), float, count=n)
        desired = np.fromiter((v.desired_speed for v in vs), float, count=n)
        length = np.fromiter((v.length for v in vs), float, count=n)

        gap = np.full(n, np.inf)
        lead_speed = np.zeros(n)
        if n > 1:
            gap[:-1] = travel[1:] - travel[:-1] - 0.5 * (length[1:] + length[:-1])
            lead_speed[:-1] = speed[1:]
        acc = idm_acceleration(speed, desired, gap, lead_speed)
        new_speed = np.maximum(0.0, speed + acc * dt)
        new_travel = travel + new_speed * dt

        keep: list[Vehicle] = []
        for i, v in enumerate(vs):
            if new_travel[i] > spec.road_length:
                world.removed_ids.append(v.id)
                continue
            v.speed = float(new_speed[i])
            if v.direction == 0:
                v.x = float(new_travel[i])
            else:
                v.x = float(spec.road_length - new_travel[i])
            keep.append(v)
        world.lanes[key] = keep


def spawn(world: World, rng: np.random.Generator, dt: float) -> list[Vehicle]:
    """Poisson arrivals at each road end, deferred while the entry is blocked.

    The base rate per direction follows Little's law at the desired mean
    speed; a proportional feedback on the current count keeps the long-run
    density near the target despite congestion-dependent transit times.
    """
    if dt <= 0:
        return []
    spec = world.spec
    target_dir = spec.target_density / 2.0 * spec.road_length / 1000.0  # veh per direction
    base_rate_dir = (spec.target_density / 2.0) * spec.desired_speed_mean / 1000.0  # veh/s
    spawned: list[Vehicle] = []
    for key in sorted(world.lanes):
        direction, lane = key
        n_dir = world.count(direction)
        feedback = 1.0 + 0.5 * (target_dir - n_dir) / max(target_dir, 1.0)
        rate = max(0.0, base_rate_dir * feedback) / spec.lanes_per_direction
        arrivals = int(rng.poisson(rate * dt)) + world._pending[key]
        world._pending[key] = 0
        vs = world.lanes[key]
        for _ in range(arrivals):
            desired = self_speed = world._draw_desired_speed(rng)
            # entry blocked if the last-spawned vehicle is still within a safe gap
            if vs:
                rear = vs[0]
                rear_travel = rear.travel_pos(spec.road_length)
                safe = IDM_MIN_GAP + self_speed * IDM_HEADWAY + 0.5 * (rear.length + spec.vehicle_length)
                if rear_travel < safe:
                    world._pending[key] += 1
                    continue
                self_speed = min(self_speed, rear.speed + 2.0)
            veh = world._new_vehicle(direction, lane, 0.0, self_speed, desired,
                                     world._draw_station_flag(rng))
            vs.insert(0, veh)
            spawned.append(veh)
    return spawned
