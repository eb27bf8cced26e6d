"""Simulation engine: clock, seeded RNG streams, per-tick orchestration.

Each step advances the world by one tick and then processes, at the new
tick time: sensing into the local models, track pruning, CPM policy and
assembly, channel resolution at microsecond granularity within the tick
window, reception ingest, and metrics sampling.  A single run is strictly
single-threaded; identical configurations (including the seed) produce
identical artifacts byte for byte.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import mobility, sensor, tracking, policy as policy_mod
from .channel import Channel, RadioParams
from .metrics import Collector, MetricsConfig, RunSummary, summarize
from .mobility import ConfigError, ScenarioSpec, World
from .policy import InclusionHistory, PolicyConfig, PolicyMode
from .sensor import SensorParams
from .tracking import EnvModel, Measurement, ModelKind, MotionModelParams


class RngStreams:
    """Named, independently seeded PCG64 streams derived from one master
    seed.  The derivation hashes the stream name with SHA-256, so adding a
    new stream never perturbs the draws of existing ones."""

    def __init__(self, master_seed: int):
        if not (0 <= master_seed < 2 ** 64):
            raise ConfigError("seed: must be a 64-bit unsigned integer")
        self.master_seed = master_seed
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            digest = hashlib.sha256(name.encode("utf-8")).digest()
            words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
            seq = np.random.SeedSequence([self.master_seed, *words])
            gen = np.random.Generator(np.random.PCG64(seq))
            self._streams[name] = gen
        return gen


@dataclass
class Clock:
    tick: float
    now: float = 0.0
    tick_index: int = 0

    def advance(self) -> float:
        self.tick_index += 1
        self.now = self.tick_index * self.tick
        return self.now


@dataclass
class SimConfig:
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    sensor: SensorParams = field(default_factory=SensorParams)
    motion_model: MotionModelParams = field(default_factory=MotionModelParams)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    radio: RadioParams = field(default_factory=RadioParams)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seed: int = 1
    duration: float = 120.0
    tick: float = 0.1

    def validate(self) -> None:
        if self.tick <= 0:
            raise ConfigError("tick: must be positive")
        if self.duration < 0:
            raise ConfigError("duration: must be >= 0")
        if not (0 <= self.seed < 2 ** 64):
            raise ConfigError("seed: must be a 64-bit unsigned integer")
        for cfg in (self.scenario, self.sensor, self.motion_model, self.policy,
                    self.radio, self.metrics):
            cfg.validate()
        for name, period in (("sensor.period", self.sensor.period),
                             ("policy.check_period", self.policy.check_period)):
            ratio = period / self.tick
            if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
                raise ConfigError(f"{name}: must be an integer multiple of tick")


@dataclass
class Station:
    """Communication state of one station vehicle inside the comms region."""
    vehicle_id: int
    phase: float                 # MAC request offset within the tick, s
    lem: EnvModel
    v2x: EnvModel
    fused: EnvModel
    history: InclusionHistory


@dataclass
class TickReport:
    tick_index: int
    now: float
    vehicles: int
    stations: int
    detections: int
    cpms_generated: int
    cpms_sent: int
    cpms_received: int
    cpms_collided: int
    cpms_replaced: int
    ote_samples: int
    cbr_samples: int


@dataclass
class RunArtifacts:
    summary: RunSummary
    ote: np.ndarray            # (n, 5): time, ego, object, error, distance
    cbr: np.ndarray            # (n, 3): time, station, cbr
    reports: list[TickReport]


class Simulation:
    def __init__(self, config: SimConfig):
        self.config = config
        self.clock = Clock(tick=config.tick)
        self.rng = RngStreams(config.seed)
        self.world = World(config.scenario)
        self.stations: dict[int, Station] = {}
        self.channel = Channel(config.radio, self.rng.stream("mac-backoff"))
        self.collector = Collector()
        self.sensor_every = round(config.sensor.period / config.tick)
        self.policy_every = round(config.policy.check_period / config.tick)
        self._prev_counters = dict(self.channel.counters)

    @property
    def done(self) -> bool:
        return self.clock.now >= self.config.duration - 1e-9


def build_simulation(config: SimConfig) -> Simulation:
    """Validate the configuration and build the initial state: populated
    world, clock at zero, seeded streams, no station state yet."""
    config.validate()
    sim = Simulation(config)
    sim.world.populate(sim.rng.stream("mobility"))
    return sim


def _in_region(x: float, region: tuple[float, float]) -> bool:
    return region[0] <= x <= region[1]


def _sync_stations(sim: Simulation, snap: mobility.WorldSnapshot) -> None:
    """Activate stations entering the comms region (ascending id, so the
    MAC phase draws are reproducible) and drop stations that left."""
    spec = sim.config.scenario
    mp = sim.config.motion_model
    rng = sim.rng.stream("mac-backoff")
    alive_in_region = set()
    for v in snap.vehicle_list:
        if v.is_station and _in_region(v.x, spec.comms_region):
            alive_in_region.add(v.id)
            if v.id not in sim.stations:
                sim.stations[v.id] = Station(
                    vehicle_id=v.id,
                    phase=float(rng.uniform(0.0, sim.config.tick)),
                    lem=EnvModel(ModelKind.LEM, mp.stale_after),
                    v2x=EnvModel(ModelKind.V2X, mp.stale_after),
                    fused=EnvModel(ModelKind.FUSED, mp.stale_after),
                    history=InclusionHistory(),
                )
    for sid in [s for s in sim.stations if s not in alive_in_region]:
        del sim.stations[sid]


def step(sim: Simulation) -> TickReport:
    """Advance one tick; see the module docstring for the pipeline order."""
    cfg = sim.config
    mp = cfg.motion_model
    rng_mob = sim.rng.stream("mobility")
    rng_sen = sim.rng.stream("sensor")

    # (1) mobility
    mobility.advance(sim.world, cfg.tick, rng_mob)
    mobility.spawn(sim.world, rng_mob, cfg.tick)
    now = sim.clock.advance()
    snap = sim.world.snapshot()

    _sync_stations(sim, snap)
    station_ids = sorted(sim.stations)
    rows = np.array([snap.row_of[sid] for sid in station_ids], dtype=np.int64)
    st_ids = np.array(station_ids, dtype=np.int64)
    sim.channel.set_stations(st_ids, snap.x[rows] if len(rows) else np.zeros(0),
                             snap.y[rows] if len(rows) else np.zeros(0))

    # (2) sensing into LEM and FUSED
    n_detections = 0
    if sim.clock.tick_index % sim.sensor_every == 0:
        for sid in station_ids:
            st = sim.stations[sid]
            ego = snap.vehicle_list[snap.row_of[sid]]
            batch = sensor.sense_arrays(ego, snap, rng_sen, cfg.sensor)
            if batch is None:
                continue
            ids, zs, rs = batch[0], batch[1], batch[2]
            n_detections += len(ids)
            st.lem.predict_all(now, mp)
            st.lem.ingest_unique_rows(mp, ids, zs, rs, now)
            st.fused.predict_all(now, mp)
            st.fused.ingest_unique_rows(mp, ids, zs, rs, now)

    # (3) prune stale tracks; inclusion history follows the LEM
    for sid in station_ids:
        st = sim.stations[sid]
        removed = tracking.prune_stale(st.lem, now)
        if removed:
            st.history.drop(removed)
        tracking.prune_stale(st.v2x, now)
        tracking.prune_stale(st.fused, now)

    # (4) fixed prediction schedule, then the CPM policy
    n_generated = 0
    echo_chunks: list[tuple[int, object]] = []   # (receiver, cpm) self-echoes
    policy_tick = sim.clock.tick_index % sim.policy_every == 0
    for sid in station_ids:
        st = sim.stations[sid]
        st.lem.predict_all(now, mp)
        st.v2x.predict_all(now, mp)
        st.fused.predict_all(now, mp)
        if not policy_tick:
            continue
        if cfg.policy.mode is PolicyMode.ETSI:
            sel = policy_mod.etsi_select(st.lem, st.history, now, cfg.policy)
        else:
            sel = policy_mod.accuracy_select(st.lem, st.v2x, cfg.policy, now)
        ego = snap.vehicle_list[snap.row_of[sid]]
        cpm = policy_mod.assemble_cpm(ego, sel, st.lem, st.history, now, cfg.policy)
        if cpm is not None:
            n_generated += 1
            if cfg.policy.self_echo:
                echo_chunks.append((sid, cpm))
            sim.channel.try_transmit(sid, cpm, now + st.phase)

    # (5) resolve the channel inside this tick's window, ingest receptions.
    # Self-echoes join the received reports: nothing reads the echoing
    # station's V2X model between assembly and here, and same-time ingests
    # combine order-independently, so this matches echo-at-assembly.
    deliveries = sim.channel.resolve_until(now + cfg.tick)
    chunks = [(np.array([rid], dtype=np.int64), cpm) for rid, cpm in echo_chunks]
    for d in deliveries:
        got = len(d.receiver_ids) + len(d.collided_ids) + d.out_of_range
        if got != d.intended:
            raise AssertionError(
                f"frame {d.frame.seq}: receiver partition {got} != {d.intended}")
        if len(d.receiver_ids):
            chunks.append((d.receiver_ids.astype(np.int64), d.frame.payload))
    if chunks:
        _ingest_receptions(sim, chunks, now, mp)

    # (6) metrics
    n_ote, n_cbr = _record_metrics(sim, snap, now)

    counters = sim.channel.counters
    prev = sim._prev_counters
    report = TickReport(
        tick_index=sim.clock.tick_index,
        now=now,
        vehicles=len(snap),
        stations=len(station_ids),
        detections=n_detections,
        cpms_generated=n_generated,
        cpms_sent=counters["sent"] - prev["sent"],
        cpms_received=counters["received"] - prev["received"],
        cpms_collided=counters["collided"] - prev["collided"],
        cpms_replaced=counters["replaced"] - prev["replaced"],
        ote_samples=n_ote,
        cbr_samples=n_cbr,
    )
    sim._prev_counters = dict(counters)
    sim.channel.drop_log_before(now - 1.0)
    return report


def _ingest_receptions(sim: Simulation, chunks: list[tuple[np.ndarray, object]],
                       now: float, mp: MotionModelParams) -> None:
    """Feed (receiver set, cpm) pairs into the receivers' V2X and fused
    models.  All reports share the tick timestamp, so same-object reports
    are information-combined per receiver (exactly the sequential update)
    and each receiver-model pair is updated in one vectorized pass."""
    rcv = np.concatenate([np.repeat(rids, len(c.object_ids)) for rids, c in chunks])
    ids = np.concatenate([np.tile(c.object_ids, len(rids)) for rids, c in chunks])
    zs = np.concatenate([np.tile(c.states[:, :2], (len(rids), 1)) for rids, c in chunks])
    rs = np.concatenate([np.tile(c.covs[:, :2, :2], (len(rids), 1, 1)) for rids, c in chunks])
    keep = ids != rcv                       # a station never tracks itself
    if not keep.all():
        rcv, ids, zs, rs = rcv[keep], ids[keep], zs[keep], rs[keep]
    if not len(ids):
        return
    key = rcv * (int(ids.max()) + 1) + ids
    order = np.argsort(key, kind="stable")
    rcv, ids, zs, rs, key = rcv[order], ids[order], zs[order], rs[order], key[order]
    starts = np.nonzero(np.diff(key, prepend=key[0] - 1))[0]
    if len(starts) != len(key):
        ids, zs, rs = tracking.combine_same_time(ids, zs, rs, starts)
        rcv = rcv[starts]
    r_starts = np.nonzero(np.diff(rcv, prepend=rcv[0] - 1))[0]
    r_bounds = np.append(r_starts, len(rcv))
    for k, s0 in enumerate(r_starts):
        s1 = r_bounds[k + 1]
        st = sim.stations.get(int(rcv[s0]))
        if st is None:
            continue
        st.v2x.predict_all(now, mp)
        st.v2x.ingest_unique_rows(mp, ids[s0:s1], zs[s0:s1], rs[s0:s1], now)
        st.fused.predict_all(now, mp)
        st.fused.ingest_unique_rows(mp, ids[s0:s1], zs[s0:s1], rs[s0:s1], now)


def _record_metrics(sim: Simulation, snap: mobility.WorldSnapshot, now: float) -> tuple[int, int]:
    mcfg = sim.config.metrics
    if now <= mcfg.warmup:
        return 0, 0
    spec = sim.config.scenario
    log_ids = [sid for sid in sorted(sim.stations)
               if _in_region(snap.x[snap.row_of[sid]], spec.logging_region)]
    if not log_ids:
        return 0, 0

    n_cbr = 0
    window_end = now + sim.config.tick
    cbr_rows = np.zeros((len(log_ids), 3))
    for k, sid in enumerate(log_ids):
        cbr_rows[k, 0] = window_end
        cbr_rows[k, 1] = sid
        cbr_rows[k, 2] = sim.channel.cbr(sid, window_end)
    sim.collector.add_cbr_block(cbr_rows)
    n_cbr = len(cbr_rows)

    n_ote = 0
    if sim.clock.tick_index % mcfg.ote_every_n_ticks == 0:
        blocks = []
        for sid in log_ids:
            st = sim.stations[sid]
            model = {ModelKind.LEM: st.lem, ModelKind.V2X: st.v2x,
                     ModelKind.FUSED: st.fused}[mcfg.model_kind]
            if len(model.ids) == 0:
                continue
            idx = np.searchsorted(snap.ids, model.ids)
            idx_clip = np.minimum(idx, len(snap.ids) - 1)
            alive = snap.ids[idx_clip] == model.ids
            if not np.any(alive):
                continue
            rows = idx_clip[alive]
            ex, ey = snap.x[snap.row_of[sid]], snap.y[snap.row_of[sid]]
            dist = np.hypot(snap.x[rows] - ex, snap.y[rows] - ey)
            near = dist <= mcfg.max_ote_distance
            if not np.any(near):
                continue
            x_est = model.X[alive][near]
            err = np.hypot(x_est[:, 0] - snap.x[rows][near],
                           x_est[:, 1] - snap.y[rows][near])
            block = np.empty((len(err), 5))
            block[:, 0] = now
            block[:, 1] = sid
            block[:, 2] = model.ids[alive][near]
            block[:, 3] = err
            block[:, 4] = dist[near]
            blocks.append(block)
        if blocks:
            block = np.concatenate(blocks)
            sim.collector.add_ote_block(block)
            n_ote = len(block)
    return n_ote, n_cbr


def run(sim: Simulation, config_echo: dict | None = None) -> RunArtifacts:
    """Step to the configured duration and aggregate the summary."""
    reports = []
    n_steps = int(round(sim.config.duration / sim.config.tick))
    for _ in range(n_steps):
        reports.append(step(sim))
    ote = sim.collector.ote
    cbr = sim.collector.cbr
    summary = summarize(ote, cbr, sim.channel.counters, sim.config.metrics,
                        config_echo)
    return RunArtifacts(summary=summary, ote=ote, cbr=cbr, reports=reports)
