"""Per-station multi-object tracking.

Constant-velocity Kalman filtering over the state [x, y, vx, vy] with
position-only measurements, and three independent environment models per
station: LEM (local detections), V2X (received CPM reports) and FUSED
(both).  Association is by ground-truth object id.

EnvModel keeps its tracks in stacked numpy arrays (one row per track) so a
whole model can be predicted or updated in a handful of vectorized calls;
`Track` objects are materialized views of single rows.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .mobility import ConfigError
from .sensor import Detection


@dataclass
class MotionModelParams:
    """Builders for the constant-velocity F, discrete white-noise-
    acceleration Q, and the position observation matrix H."""

    accel_stddev: float = 0.8          # m/s^2, process noise intensity
    init_velocity_var: float = 25.0    # (m/s)^2, velocity prior at creation
    stale_after: float = 2.0           # s, track lifetime without updates

    def validate(self) -> None:
        if self.accel_stddev < 0:
            raise ConfigError("tracking.accel_stddev: must be >= 0")
        if self.init_velocity_var <= 0:
            raise ConfigError("tracking.init_velocity_var: must be positive")
        if self.stale_after <= 0:
            raise ConfigError("tracking.stale_after: must be positive")

    def f_matrix(self, dt: float) -> np.ndarray:
        f = np.eye(4)
        f[0, 2] = dt
        f[1, 3] = dt
        return f

    def q_matrix(self, dt: float) -> np.ndarray:
        q2, q3, q4 = dt * dt, dt ** 3 / 2.0, dt ** 4 / 4.0
        s = self.accel_stddev ** 2
        q = np.zeros((4, 4))
        q[0, 0] = q[1, 1] = s * q4
        q[2, 2] = q[3, 3] = s * q2
        q[0, 2] = q[2, 0] = q[1, 3] = q[3, 1] = s * q3
        return q

    @property
    def h_matrix(self) -> np.ndarray:
        return np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])

    def f_stack(self, dts: np.ndarray) -> np.ndarray:
        n = len(dts)
        f = np.broadcast_to(np.eye(4), (n, 4, 4)).copy()
        f[:, 0, 2] = dts
        f[:, 1, 3] = dts
        return f

    def q_stack(self, dts: np.ndarray) -> np.ndarray:
        n = len(dts)
        s = self.accel_stddev ** 2
        q2, q3, q4 = s * dts * dts, s * dts ** 3 / 2.0, s * dts ** 4 / 4.0
        q = np.zeros((n, 4, 4))
        q[:, 0, 0] = q[:, 1, 1] = q4
        q[:, 2, 2] = q[:, 3, 3] = q2
        q[:, 0, 2] = q[:, 2, 0] = q[:, 1, 3] = q[:, 3, 1] = q3
        return q


@dataclass
class Track:
    object_id: int
    x: np.ndarray            # (4,) state mean [x, y, vx, vy]
    P: np.ndarray            # (4, 4) covariance
    last_update: float
    last_predict: float
    birth: float


@dataclass
class Measurement:
    z: np.ndarray            # (2,) position
    R: np.ndarray            # (2, 2) covariance, SPD
    timestamp: float
    source: str              # "local-sensor" or "cpm:<sender_id>"
    object_id: int = -1      # association key (ground-truth identity)


class ModelKind(enum.Enum):
    LEM = "lem"
    V2X = "v2x"
    FUSED = "fused"


def kf_predict(track: Track, to_time: float, model: MotionModelParams) -> Track:
    """Advance the track to `to_time`: x <- F x, P <- F P F^T + Q."""
    dt = to_time - track.last_predict
    if dt < 0:
        raise ValueError(f"negative prediction dt: {dt}")
    if dt > 0:
        f = model.f_matrix(dt)
        q = model.q_matrix(dt)
        track.x = f @ track.x
        track.P = f @ track.P @ f.T + q
        track.P = 0.5 * (track.P + track.P.T)
        track.last_predict = to_time
    return track


def kf_update(track: Track, m: Measurement, model: MotionModelParams) -> Track:
    """Measurement update with gain K = P H^T (H P H^T + R)^-1; P is
    symmetrized afterwards.  Raises on a singular innovation covariance."""
    s = track.P[:2, :2] + m.R
    det = s[0, 0] * s[1, 1] - s[0, 1] * s[1, 0]
    if not np.isfinite(det) or det <= 0:
        raise np.linalg.LinAlgError("singular innovation covariance")
    s_inv = np.array([[s[1, 1], -s[0, 1]], [-s[1, 0], s[0, 0]]]) / det
    k = track.P[:, :2] @ s_inv
    track.x = track.x + k @ (m.z - track.x[:2])
    track.P = track.P - k @ track.P[:2, :]
    track.P = 0.5 * (track.P + track.P.T)
    track.last_update = m.timestamp
    return track


def _inv2(m: np.ndarray) -> np.ndarray:
    """Batched analytic inverse of SPD 2x2 matrices (n, 2, 2)."""
    det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
    if not np.all(det > 0):
        raise np.linalg.LinAlgError("2x2 matrix not positive definite")
    out = np.empty_like(m)
    out[:, 0, 0] = m[:, 1, 1]
    out[:, 1, 1] = m[:, 0, 0]
    out[:, 0, 1] = -m[:, 0, 1]
    out[:, 1, 0] = -m[:, 1, 0]
    out /= det[:, None, None]
    return out


def combine_same_time(ids: np.ndarray, zs: np.ndarray, rs: np.ndarray,
                      starts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Information-form combination of same-time position measurements
    grouped by `starts` boundaries (ids must be grouped accordingly):
    R* = (sum R_i^-1)^-1, z* = R* sum(R_i^-1 z_i).  Equals applying the
    group sequentially through the Kalman update."""
    lam = _inv2(rs)
    eta = np.einsum("nij,nj->ni", lam, zs)
    lam = np.add.reduceat(lam, starts, axis=0)
    eta = np.add.reduceat(eta, starts, axis=0)
    rs_c = _inv2(lam)
    zs_c = np.einsum("nij,nj->ni", rs_c, eta)
    return ids[starts], zs_c, rs_c


def _init_rows(model_params: MotionModelParams, zs: np.ndarray, rs: np.ndarray,
               ts: float) -> tuple[np.ndarray, np.ndarray]:
    """Fresh track rows: position from the measurement, velocity zero;
    P position block = R, velocity variance from the prior."""
    n = len(zs)
    x = np.zeros((n, 4))
    x[:, :2] = zs
    p = np.zeros((n, 4, 4))
    p[:, :2, :2] = rs
    p[:, 2, 2] = p[:, 3, 3] = model_params.init_velocity_var
    return x, p


class EnvModel:
    """One station's track set of a given kind, stored as stacked arrays."""

    def __init__(self, kind: ModelKind, stale_after: float = 2.0):
        self.kind = kind
        self.stale_after = stale_after
        self.ids = np.zeros(0, dtype=np.int64)
        self.X = np.zeros((0, 4))
        self.P = np.zeros((0, 4, 4))
        self.last_update = np.zeros(0)
        self.last_predict = np.zeros(0)
        self.birth = np.zeros(0)
        self._row: dict[int, int] = {}
        self._pred_time: float | None = None   # all rows at this time, if uniform
        self._sorted_ids: np.ndarray | None = None
        self._sorted_rows: np.ndarray | None = None
        self.dropped_malformed = 0

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def tracks(self) -> dict[int, Track]:
        return {int(oid): self.get(int(oid)) for oid in self.ids}

    def get(self, object_id: int) -> Track | None:
        i = self._row.get(object_id)
        if i is None:
            return None
        return Track(object_id=object_id, x=self.X[i].copy(), P=self.P[i].copy(),
                     last_update=float(self.last_update[i]),
                     last_predict=float(self.last_predict[i]),
                     birth=float(self.birth[i]))

    def put(self, track: Track) -> None:
        i = self._row.get(track.object_id)
        if i is None:
            self._append(np.array([track.object_id], dtype=np.int64),
                         track.x[None, :], track.P[None, :, :],
                         track.last_update, track.last_predict, track.birth)
        else:
            self.X[i] = track.x
            self.P[i] = track.P
            self.last_update[i] = track.last_update
            self.last_predict[i] = track.last_predict
            self.birth[i] = track.birth
        self._pred_time = None

    def _append(self, ids, xs, ps, last_update, last_predict, birth) -> None:
        base = len(self.ids)
        self.ids = np.concatenate([self.ids, ids])
        self.X = np.concatenate([self.X, xs])
        self.P = np.concatenate([self.P, ps])
        n = len(ids)
        self.last_update = np.concatenate([self.last_update, np.full(n, last_update)])
        self.last_predict = np.concatenate([self.last_predict, np.full(n, last_predict)])
        self.birth = np.concatenate([self.birth, np.full(n, birth)])
        for k, oid in enumerate(ids):
            self._row[int(oid)] = base + k
        self._sorted_ids = None
        if self._pred_time is not None and last_predict != self._pred_time:
            self._pred_time = None

    def _compress(self, keep: np.ndarray) -> list[int]:
        removed = [int(i) for i in self.ids[~keep]]
        self.ids = self.ids[keep]
        self.X = self.X[keep]
        self.P = self.P[keep]
        self.last_update = self.last_update[keep]
        self.last_predict = self.last_predict[keep]
        self.birth = self.birth[keep]
        self._row = {int(oid): k for k, oid in enumerate(self.ids)}
        self._sorted_ids = None
        return removed

    def _lookup(self, ids: np.ndarray) -> np.ndarray:
        """Row index per queried id, -1 for unknown ids (vectorized)."""
        if len(self.ids) == 0:
            return np.full(len(ids), -1, dtype=np.int64)
        if self._sorted_ids is None:
            order = np.argsort(self.ids, kind="stable")
            self._sorted_ids = self.ids[order]
            self._sorted_rows = order
        pos = np.searchsorted(self._sorted_ids, ids)
        pos_c = np.minimum(pos, len(self._sorted_ids) - 1)
        hit = self._sorted_ids[pos_c] == ids
        return np.where(hit, self._sorted_rows[pos_c], -1)

    # -- vectorized bulk operations -----------------------------------------

    def predict_all(self, to_time: float, mp: MotionModelParams) -> None:
        if len(self.ids) == 0 or self._pred_time == to_time:
            return
        if self._pred_time is not None:
            # uniform dt: use one shared 4x4 F/Q instead of per-row stacks
            dt = to_time - self._pred_time
            if dt < -1e-12:
                raise ValueError("negative prediction dt in predict_all")
            if dt > 0:
                f = mp.f_matrix(dt)
                q = mp.q_matrix(dt)
                self.X = self.X @ f.T
                p = f @ self.P @ f.T + q
                self.P = 0.5 * (p + np.swapaxes(p, 1, 2))
                self.last_predict[:] = to_time
            self._pred_time = to_time
            return
        dts = to_time - self.last_predict
        if np.any(dts < -1e-12):
            raise ValueError("negative prediction dt in predict_all")
        dts = np.maximum(dts, 0.0)
        if np.any(dts > 0):
            f = mp.f_stack(dts)
            q = mp.q_stack(dts)
            self.X = np.einsum("nij,nj->ni", f, self.X)
            p = f @ self.P @ np.swapaxes(f, 1, 2) + q
            self.P = 0.5 * (p + np.swapaxes(p, 1, 2))
            self.last_predict[:] = to_time
        self._pred_time = to_time

    def _update_rows(self, rows: np.ndarray, zs: np.ndarray, rs: np.ndarray,
                     ts: float) -> None:
        """Batched measurement update on existing rows; one measurement per
        row.  Rows must be predicted to `ts` (or later; dt is clamped to 0
        for reports timestamped slightly in the past)."""
        p = self.P[rows]
        try:
            s_inv = _inv2(p[:, :2, :2] + rs)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("singular innovation covariance") from None
        k = p[:, :, :2] @ s_inv
        innov = zs - self.X[rows, :2]
        self.X[rows] += np.einsum("nij,nj->ni", k, innov)
        pn = p - k @ p[:, :2, :]
        self.P[rows] = 0.5 * (pn + np.swapaxes(pn, 1, 2))
        self.last_update[rows] = ts

    def ingest_rows(self, mp: MotionModelParams, ids: np.ndarray, zs: np.ndarray,
                    rs: np.ndarray, ts: float) -> None:
        """Create-or-update for a batch of measurements taken at the same
        time `ts`.  Repeated ids are combined in information form, which for
        same-time position measurements is exactly the sequential update.
        Assumes predict_all(ts) has already run for existing tracks."""
        if len(ids) == 0:
            return
        order = np.argsort(ids, kind="stable")
        ids, zs, rs = ids[order], zs[order], rs[order]
        _, starts, counts = np.unique(ids, return_index=True, return_counts=True)
        if counts.max() > 1:
            ids, zs, rs = combine_same_time(ids, zs, rs, starts)
        self.ingest_unique_rows(mp, ids, zs, rs, ts)

    def ingest_unique_rows(self, mp: MotionModelParams, ids: np.ndarray,
                           zs: np.ndarray, rs: np.ndarray, ts: float) -> None:
        """As ingest_rows, for measurement batches with unique ids."""
        rows = self._lookup(ids)
        new = rows < 0
        if new.any():
            x0, p0 = _init_rows(mp, zs[new], rs[new], ts)
            self._append(ids[new], x0, p0, ts, ts, ts)
        if not new.all():
            old = ~new
            self._update_rows(rows[old], zs[old], rs[old], ts)


def lem_ingest(lem: EnvModel, detections: list[Detection], now: float,
               model: MotionModelParams) -> EnvModel:
    """Feed one sensor sweep into the local environment model."""
    assert lem.kind is ModelKind.LEM
    if not detections:
        return lem
    ids = np.fromiter((d.object_id for d in detections), np.int64, count=len(detections))
    zs = np.stack([d.measured_position for d in detections])
    rs = np.stack([d.noise_cov for d in detections])
    lem.predict_all(now, model)
    lem.ingest_rows(model, ids, zs, rs, now)
    return lem


def v2x_ingest(v2x: EnvModel, cpm, now: float, model: MotionModelParams,
               ego_id: int = -1) -> EnvModel:
    """Feed one received CPM into the V2X environment model.  The reported
    position covariance block becomes the measurement R; a report of the
    ego itself is skipped.  Malformed CPMs (missing covariances) are dropped
    and counted."""
    assert v2x.kind is ModelKind.V2X
    if cpm.covs is None or not np.all(np.isfinite(cpm.covs)):
        v2x.dropped_malformed += 1
        return v2x
    keep = cpm.object_ids != ego_id
    if not np.any(keep):
        return v2x
    ids = cpm.object_ids[keep]
    zs = cpm.states[keep][:, :2]
    rs = cpm.covs[keep][:, :2, :2]
    # Reports are applied at ingest time; generation-to-delivery latency is
    # below one tick here, so no retrodiction is attempted.
    v2x.predict_all(now, model)
    v2x.ingest_rows(model, ids, zs, rs, now)
    return v2x


def fused_ingest(fused: EnvModel, source: Measurement, now: float,
                 model: MotionModelParams) -> EnvModel:
    """Feed one measurement (local detection or accepted CPM report) into
    the fused model."""
    assert fused.kind is ModelKind.FUSED
    fused.predict_all(now, model)
    fused.ingest_rows(model, np.array([source.object_id], dtype=np.int64),
                      source.z[None, :], source.R[None, :, :], now)
    return fused


def prune_stale(model: EnvModel, now: float) -> list[int]:
    """Remove tracks not updated within stale_after; returns removed ids."""
    if len(model.ids) == 0:
        return []
    keep = (now - model.last_update) <= model.stale_after
    if np.all(keep):
        return []
    return model._compress(keep)
