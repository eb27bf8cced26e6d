"""Simplified ITS-G5 broadcast channel.

Propagation is a deterministic log-distance path-loss model yielding two
radii: a decode range (signal threshold) and a larger carrier-sense range.
Medium access is CSMA: transmit immediately on an idle channel, otherwise
defer to end-of-busy plus a uniform integer backoff in [0, cw] slots.
Stations whose fresh attempts coincide on an idle channel all back off;
post-backoff attempts that coincide transmit and collide.  Receivers lose a
frame whenever any other frame from a sender within carrier-sense range
overlaps it in time (no capture effect).

All MAC events live on a microsecond-granularity queue resolved in timestamp
order with deterministic tie-breaking; backoff randomness comes exclusively
from the mac-backoff RNG stream.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .mobility import ConfigError


@dataclass
class RadioParams:
    bit_rate: float = 6e6                      # bit/s
    tx_power_dbm: float = 23.0                 # 200 mW
    signal_threshold_dbm: float = -85.0
    noise_threshold_dbm: float = -65.0         # recorded; unused by this PHY
    carrier_freq: float = 5.9e9                # Hz
    path_loss_exponent: float = 2.2
    reference_loss_db: float = 47.86           # free-space at 1 m, 5.9 GHz
    carrier_sense_threshold_dbm: float = -95.0
    preamble_overhead: float = 40e-6           # s per frame
    slot: float = 13e-6                        # s
    cw: int = 15                               # contention window, slots
    cbr_window: float = 0.1                    # s

    def validate(self) -> None:
        if self.bit_rate <= 0:
            raise ConfigError("radio.bit_rate: must be positive")
        if self.signal_threshold_dbm >= self.noise_threshold_dbm:
            raise ConfigError("radio.signal_threshold_dbm: must be below noise_threshold_dbm")
        if self.path_loss_exponent <= 0:
            raise ConfigError("radio.path_loss_exponent: must be positive")
        if self.slot <= 0 or self.cw < 0:
            raise ConfigError("radio.slot/cw: invalid")
        if self.cbr_window <= 0:
            raise ConfigError("radio.cbr_window: must be positive")
        if self.carrier_sense_threshold_dbm > self.signal_threshold_dbm:
            raise ConfigError("radio.carrier_sense_threshold_dbm: must not exceed signal threshold")


def airtime(size_bytes: int, params: RadioParams) -> float:
    """Frame airtime: preamble plus payload bits at the configured rate."""
    if size_bytes <= 0:
        raise ValueError("size_bytes must be positive")
    return params.preamble_overhead + size_bytes * 8.0 / params.bit_rate


def _range_for_threshold(params: RadioParams, threshold_dbm: float) -> float:
    # tx - ref_loss - 10 n log10(d) = threshold  =>  d
    exponent = (params.tx_power_dbm - params.reference_loss_db - threshold_dbm) \
        / (10.0 * params.path_loss_exponent)
    return 10.0 ** exponent


def reception_range(params: RadioParams) -> tuple[float, float]:
    """(decode_range, sense_range) in meters from the log-distance model."""
    decode = _range_for_threshold(params, params.signal_threshold_dbm)
    sense = _range_for_threshold(params, params.carrier_sense_threshold_dbm)
    return decode, sense


@dataclass
class Frame:
    sender_id: int
    payload: object                  # Cpm
    size_bytes: int
    seq: int
    tx_start: float = -1.0
    tx_end: float = -1.0
    sender_x: float = 0.0
    sender_y: float = 0.0
    overlaps: list = field(default_factory=list)
    deferrals: int = 0


@dataclass
class Delivery:
    frame: Frame
    receiver_ids: np.ndarray         # stations that decoded the frame
    collided_ids: np.ndarray
    out_of_range: int
    intended: int                    # stations other than the sender at delivery


_END, _ATTEMPT = 0, 1


class Channel:
    """Owns the MAC event queue, per-station pending slots, the on-air set
    and the frame log used for CBR measurement."""

    def __init__(self, params: RadioParams, rng: np.random.Generator):
        params.validate()
        self.params = params
        self.rng = rng
        self.decode_range, self.sense_range = reception_range(params)
        self._events: list[tuple] = []       # (time, kind, seq, payload, fresh)
        self._seq = 0
        self._pending: dict[int, Frame] = {}  # station -> frame not yet on air
        self._on_air: dict[int, Frame] = {}   # seq -> frame
        self.frame_log: list[tuple] = []      # (sender, x, y, t0, t1) for CBR
        self.counters = {"sent": 0, "received": 0, "collided": 0,
                         "out_of_range": 0, "replaced": 0}
        # station geometry, refreshed by the engine each tick
        self._st_ids = np.zeros(0, dtype=np.int64)
        self._st_x = np.zeros(0)
        self._st_y = np.zeros(0)
        self._st_row: dict[int, int] = {}

    # -- engine interface ----------------------------------------------------

    def set_stations(self, ids: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> None:
        self._st_ids, self._st_x, self._st_y = ids, xs, ys
        self._st_row = {int(i): k for k, i in enumerate(ids)}
        # drop pending frames of stations that disappeared
        for sid in [s for s in self._pending if s not in self._st_row]:
            del self._pending[sid]

    def try_transmit(self, station_id: int, cpm, now: float) -> Frame:
        """Enqueue a CPM for transmission at `now`.  If the station already
        has a frame waiting (not yet on air), the newer CPM replaces its
        payload and the replacement counter increments."""
        old = self._pending.get(station_id)
        if old is not None:
            old.payload = cpm
            old.size_bytes = cpm.size_bytes
            self.counters["replaced"] += 1
            return old
        frame = Frame(sender_id=station_id, payload=cpm,
                      size_bytes=cpm.size_bytes, seq=self._seq)
        self._seq += 1
        self._pending[station_id] = frame
        self._push(now, _ATTEMPT, frame.seq, frame, True)
        return frame

    def resolve_until(self, t_end: float) -> list[Delivery]:
        """Process MAC events with time <= t_end; returns frame deliveries
        in completion order."""
        deliveries: list[Delivery] = []
        while self._events and self._events[0][0] <= t_end:
            t = self._events[0][0]
            ends, attempts = [], []
            while self._events and self._events[0][0] == t:
                _, kind, _, payload, fresh = heapq.heappop(self._events)
                if kind == _END:
                    ends.append(payload)
                else:
                    attempts.append((payload, fresh))
            for frame in ends:
                deliveries.append(self._finish(frame))
            if attempts:
                self._handle_attempts(t, attempts)
        return deliveries

    # -- MAC internals --------------------------------------------------------

    def _push(self, t: float, kind: int, seq: int, payload, fresh: bool) -> None:
        heapq.heappush(self._events, (t, kind, seq, payload, fresh))

    def _sensed_busy(self, station_id: int, frames) -> list[Frame]:
        row = self._st_row.get(station_id)
        if row is None:
            return []
        sx, sy = self._st_x[row], self._st_y[row]
        out = []
        for f in frames:
            if math.hypot(f.sender_x - sx, f.sender_y - sy) <= self.sense_range:
                out.append(f)
        return out

    def _start(self, frame: Frame, t: float) -> None:
        row = self._st_row.get(frame.sender_id)
        if row is None:   # station left the region while deferred
            self._pending.pop(frame.sender_id, None)
            return
        frame.sender_x = float(self._st_x[row])
        frame.sender_y = float(self._st_y[row])
        frame.tx_start = t
        frame.tx_end = t + airtime(frame.size_bytes, self.params)
        for other in self._on_air.values():
            other.overlaps.append(frame)
            frame.overlaps.append(other)
        self._on_air[frame.seq] = frame
        self._pending.pop(frame.sender_id, None)
        self.counters["sent"] += 1
        self.frame_log.append((frame.sender_id, frame.sender_x, frame.sender_y,
                               frame.tx_start, frame.tx_end))
        self._push(frame.tx_end, _END, frame.seq, frame, False)

    def _handle_attempts(self, t: float, attempts: list[tuple[Frame, bool]]) -> None:
        # Snapshot semantics: every attempt in the group senses the channel
        # as it was before any group member started transmitting.
        snapshot = list(self._on_air.values())
        busy_after: list[tuple[Frame, bool]] = []
        idle_fresh: list[Frame] = []
        idle_started = False
        # post-backoff attempts first (they own the instant), then fresh ones
        attempts.sort(key=lambda fr: (fr[1], fr[0].sender_id))
        for frame, fresh in attempts:
            if frame.sender_id not in self._st_row:
                self._pending.pop(frame.sender_id, None)
                continue
            if self._pending.get(frame.sender_id) is not frame:
                continue  # superseded attempt
            sensed = self._sensed_busy(frame.sender_id, snapshot)
            if sensed:
                busy_after.append((frame, max(f.tx_end for f in sensed)))
            elif not fresh:
                self._start(frame, t)
                idle_started = True
            else:
                idle_fresh.append(frame)
        if len(idle_fresh) == 1 and not idle_started:
            self._start(idle_fresh[0], t)
        else:
            # simultaneous contenders: everyone draws a backoff
            for frame in idle_fresh:
                self._defer(frame, t)
        for frame, t_idle in busy_after:
            self._defer(frame, t_idle)

    def _defer(self, frame: Frame, t_idle: float) -> None:
        slots = int(self.rng.integers(0, self.params.cw + 1))
        frame.deferrals += 1
        self._push(t_idle + slots * self.params.slot, _ATTEMPT, frame.seq, frame, False)

    def _finish(self, frame: Frame) -> Delivery:
        self._on_air.pop(frame.seq, None)
        delivery = deliver_one(frame, frame.overlaps,
                               self._st_ids, self._st_x, self._st_y,
                               self.decode_range, self.sense_range)
        self.counters["received"] += len(delivery.receiver_ids)
        self.counters["collided"] += len(delivery.collided_ids)
        self.counters["out_of_range"] += delivery.out_of_range
        return delivery

    # -- CBR -------------------------------------------------------------------

    def cbr(self, station_id: int, window_end: float) -> float:
        """Fraction of [window_end - cbr_window, window_end] during which at
        least one frame from a sender within carrier-sense range of the
        station (including the station itself) was on air."""
        row = self._st_row.get(station_id)
        if row is None:
            return 0.0
        return self.cbr_at(float(self._st_x[row]), float(self._st_y[row]), window_end)

    def cbr_at(self, x: float, y: float, window_end: float) -> float:
        w = self.params.cbr_window
        w_start = window_end - w
        covered = 0.0
        cur_a = cur_b = None
        # frame_log is appended in tx_start order
        for sid, fx, fy, t0, t1 in self.frame_log:
            if t1 <= w_start or t0 >= window_end:
                continue
            if math.hypot(fx - x, fy - y) > self.sense_range:
                continue
            a, b = max(t0, w_start), min(t1, window_end)
            if cur_a is None:
                cur_a, cur_b = a, b
            elif a > cur_b:
                covered += cur_b - cur_a
                cur_a, cur_b = a, b
            else:
                cur_b = max(cur_b, b)
        if cur_a is not None:
            covered += cur_b - cur_a
        return covered / w

    def drop_log_before(self, t: float) -> None:
        self.frame_log = [f for f in self.frame_log if f[4] > t]


def deliver_one(frame: Frame, overlapping: list[Frame], st_ids: np.ndarray,
                st_x: np.ndarray, st_y: np.ndarray, decode_range: float,
                sense_range: float) -> Delivery:
    """Reception outcome of one frame against every station except its
    sender.  A station decodes iff it is within decode range of the sender
    and no time-overlapping frame came from a sender within its sense range.
    The partition received + collided + out_of_range is exact."""
    others = st_ids != frame.sender_id
    dx = st_x - frame.sender_x
    dy = st_y - frame.sender_y
    in_range = (np.hypot(dx, dy) <= decode_range) & others
    out_of_range = int(np.count_nonzero(others & ~in_range))
    jammed = np.zeros(len(st_ids), dtype=bool)
    for g in overlapping:
        if g.tx_start < frame.tx_end and g.tx_end > frame.tx_start:
            jammed |= np.hypot(st_x - g.sender_x, st_y - g.sender_y) <= sense_range
    received = in_range & ~jammed
    collided = in_range & jammed
    return Delivery(frame=frame,
                    receiver_ids=st_ids[received],
                    collided_ids=st_ids[collided],
                    out_of_range=out_of_range,
                    intended=int(np.count_nonzero(others)))


def deliver(frames: list[Frame], st_ids: np.ndarray, st_x: np.ndarray,
            st_y: np.ndarray, params: RadioParams) -> list[Delivery]:
    """Reception outcomes for a set of already-timed frames (pure helper
    mirroring the incremental path; used directly by tests)."""
    decode, sense = reception_range(params)
    out = []
    for f in frames:
        overlaps = [g for g in frames if g.seq != f.seq
                    and g.tx_start < f.tx_end and g.tx_end > f.tx_start]
        out.append(deliver_one(f, overlaps, st_ids, st_x, st_y, decode, sense))
    return out
