"""CPM generation policies.

Two object-selection rules run on the ego's tracked objects every check
period (100 ms): the ETSI dynamic rules (first detection / 4 m / 0.5 m/s /
4 deg / 1 s), and an accuracy-based rule that gates on the local covariance
trace and on the Kullback-Leibler divergence between the ego's local track
and what it believes the network already knows (its V2X track of the same
object).  Selection is pure; only CPM assembly touches the inclusion
history.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .mobility import ConfigError
from .tracking import EnvModel

DEG = math.pi / 180.0


class PolicyMode(enum.Enum):
    ETSI = "etsi"
    ACCURACY = "accuracy"


@dataclass
class PolicyConfig:
    mode: PolicyMode = PolicyMode.ETSI
    theta: float = 1.0                 # trace gate on P_lem (full 4x4 trace)
    gamma: float = 3.0                 # KL gate
    position_threshold: float = 4.0    # m
    speed_threshold: float = 0.5       # m/s
    heading_threshold: float = 4.0 * DEG
    max_interval: float = 1.0          # s, forced re-inclusion
    check_period: float = 0.1          # s
    self_echo: bool = True             # feed own CPMs into own V2X model
    kl_use_means: bool = True          # include mean terms in the KL gate
    header_bytes: int = 121
    object_bytes: int = 35
    min_heading_speed: float = 0.1     # m/s, below this the heading rule is skipped

    def validate(self) -> None:
        if self.theta <= 0:
            raise ConfigError("policy.theta: must be positive")
        if self.gamma < 0:
            raise ConfigError("policy.gamma: must be >= 0")
        if self.check_period <= 0:
            raise ConfigError("policy.check_period: must be positive")
        for name in ("position_threshold", "speed_threshold", "heading_threshold",
                     "max_interval"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"policy.{name}: must be positive")
        if self.header_bytes <= 0 or self.object_bytes <= 0:
            raise ConfigError("policy.header_bytes/object_bytes: must be positive")


@dataclass
class HistoryEntry:
    time: float
    position: np.ndarray     # (2,)
    speed: float
    heading: float


class InclusionHistory:
    """Last-included state per object, maintained by CPM assembly and
    cleared when the corresponding LEM track is pruned."""

    def __init__(self):
        self.entries: dict[int, HistoryEntry] = {}

    def get(self, object_id: int) -> HistoryEntry | None:
        return self.entries.get(object_id)

    def record(self, object_id: int, now: float, position: np.ndarray,
               speed: float, heading: float) -> None:
        self.entries[object_id] = HistoryEntry(now, np.array(position, dtype=float),
                                               float(speed), float(heading))

    def drop(self, object_ids) -> None:
        for oid in object_ids:
            self.entries.pop(int(oid), None)


@dataclass
class Cpm:
    """One over-the-air message: the sender's selected object tracks.

    Object reports are stored column-wise (ids, 4-state means, 4x4
    covariances) with a shared measurement time."""

    sender_id: int
    generation_time: float
    sender_pose: tuple[float, float, float]    # ground-truth x, y, heading
    object_ids: np.ndarray                     # (n,)
    states: np.ndarray                         # (n, 4)
    covs: np.ndarray                           # (n, 4, 4)
    measurement_time: float
    header_bytes: int = 121
    object_bytes: int = 35

    @property
    def size_bytes(self) -> int:
        return self.header_bytes + self.object_bytes * len(self.object_ids)

    @property
    def objects(self) -> list[dict]:
        return [
            {"object_id": int(self.object_ids[i]), "x": self.states[i],
             "P": self.covs[i], "measurement_time": self.measurement_time}
            for i in range(len(self.object_ids))
        ]


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def etsi_select(lem: EnvModel, history: InclusionHistory, now: float,
                cfg: PolicyConfig) -> list[int]:
    """ETSI dynamic rules: include a tracked object iff it has never been
    included, or position/speed/heading moved past the thresholds since the
    last inclusion, or the max interval elapsed.  Position, speed and
    heading come from the LEM track state; the heading rule is skipped for
    near-stationary tracks."""
    n = len(lem.ids)
    if n == 0:
        return []
    order = np.argsort(lem.ids, kind="stable")
    ids = lem.ids[order]
    x = lem.X[order]
    entries = [history.get(int(oid)) for oid in ids]
    fresh = np.fromiter((e is None for e in entries), bool, count=n)
    if fresh.all():
        return [int(i) for i in ids]
    # threshold tests against the last-included state (dummy rows for fresh)
    last = np.array([(e.time, e.position[0], e.position[1], e.speed, e.heading)
                     if e is not None else (now, x[i, 0], x[i, 1], 0.0, 0.0)
                     for i, e in enumerate(entries)])
    aged = now - last[:, 0] >= cfg.max_interval
    moved = np.hypot(x[:, 0] - last[:, 1], x[:, 1] - last[:, 2]) > cfg.position_threshold
    speed = np.hypot(x[:, 2], x[:, 3])
    sped = np.abs(speed - last[:, 3]) > cfg.speed_threshold
    heading = np.arctan2(x[:, 3], x[:, 2])
    dh = np.abs((heading - last[:, 4] + np.pi) % (2.0 * np.pi) - np.pi)
    turned = (dh > cfg.heading_threshold) & (speed >= cfg.min_heading_speed)
    pick = fresh | aged | moved | sped | turned
    return [int(i) for i in ids[pick]]


def kl_divergence(mean0, cov0, mean1, cov1) -> float:
    """D_KL(N(mean0, cov0) || N(mean1, cov1)) for SPD covariances of equal
    dimension, via Cholesky factorizations (no explicit inverses).

    Raises ValueError if either covariance is not symmetric positive
    definite."""
    mean0 = np.asarray(mean0, dtype=float)
    mean1 = np.asarray(mean1, dtype=float)
    cov0 = np.asarray(cov0, dtype=float)
    cov1 = np.asarray(cov1, dtype=float)
    k = len(mean0)
    try:
        l0 = np.linalg.cholesky(cov0)
        l1 = np.linalg.cholesky(cov1)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"covariance not symmetric positive definite: {e}") from e
    log_det0 = 2.0 * float(np.sum(np.log(np.diag(l0))))
    log_det1 = 2.0 * float(np.sum(np.log(np.diag(l1))))
    # tr(cov1^-1 cov0) = ||L1^-1 L0||_F^2
    a = np.linalg.solve(l1, l0)
    trace_term = float(np.sum(a * a))
    # (mean1-mean0)^T cov1^-1 (mean1-mean0) = ||L1^-1 d||^2
    w = np.linalg.solve(l1, mean1 - mean0)
    maha = float(w @ w)
    return 0.5 * (log_det1 - log_det0 - k + trace_term + maha)


def kl_divergence_batch(mean0: np.ndarray, cov0: np.ndarray,
                        mean1: np.ndarray, cov1: np.ndarray) -> np.ndarray:
    """Vectorized KL over stacked Gaussians: inputs (n, k) and (n, k, k)."""
    n, k = mean0.shape
    sign0, logdet0 = np.linalg.slogdet(cov0)
    sign1, logdet1 = np.linalg.slogdet(cov1)
    if np.any(sign0 <= 0) or np.any(sign1 <= 0):
        raise ValueError("covariance not symmetric positive definite")
    inv1 = np.linalg.inv(cov1)
    trace_term = np.einsum("nij,nji->n", inv1, cov0)
    d = mean1 - mean0
    maha = np.einsum("ni,nij,nj->n", d, inv1, d)
    return 0.5 * (logdet1 - logdet0 - k + trace_term + maha)


def accuracy_select(lem: EnvModel, v2x: EnvModel, cfg: PolicyConfig,
                    now: float) -> list[int]:
    """Accuracy-based selection: gate 1 keeps LEM tracks with
    trace(P_lem) < theta; gate 2 keeps those whose divergence from the
    ego's V2X track exceeds gamma.  Objects with no V2X track pass gate 2
    outright (nothing in the network to compare against).  Both models must
    already be predicted to `now`."""
    if len(lem.ids) == 0:
        return []
    traces = np.einsum("nii->n", lem.P)
    gate1 = traces < cfg.theta
    ids = lem.ids[gate1]
    if len(ids) == 0:
        return []
    order = np.argsort(ids, kind="stable")
    ids = ids[order]
    rows_lem = np.array([lem._row[int(i)] for i in ids])
    rows_v2x = np.array([v2x._row.get(int(i), -1) for i in ids])
    known = rows_v2x >= 0
    selected = [int(i) for i in ids[~known]]
    if np.any(known):
        m0 = lem.X[rows_lem[known]]
        c0 = lem.P[rows_lem[known]]
        m1 = v2x.X[rows_v2x[known]]
        c1 = v2x.P[rows_v2x[known]]
        if not cfg.kl_use_means:
            m1 = m0
        kl = kl_divergence_batch(m0, c0, m1, c1)
        selected.extend(int(i) for i in ids[known][kl > cfg.gamma])
    return sorted(selected)


def assemble_cpm(ego, selection: list[int], lem: EnvModel,
                 history: InclusionHistory, now: float,
                 cfg: PolicyConfig) -> Cpm | None:
    """Build the CPM for a selection and stamp the inclusion history.
    Returns None for an empty selection (no transmission)."""
    if not selection:
        return None
    sel = sorted(selection)
    rows = np.array([lem._row[oid] for oid in sel])
    ids = lem.ids[rows].copy()
    states = lem.X[rows].copy()
    covs = lem.P[rows].copy()
    for j, oid in enumerate(sel):
        x = states[j]
        history.record(oid, now, x[:2], math.hypot(x[2], x[3]),
                       math.atan2(x[3], x[2]))
    return Cpm(
        sender_id=ego.id,
        generation_time=now,
        sender_pose=(ego.x, ego.y, ego.heading),
        object_ids=ids,
        states=states,
        covs=covs,
        measurement_time=now,
        header_bytes=cfg.header_bytes,
        object_bytes=cfg.object_bytes,
    )
