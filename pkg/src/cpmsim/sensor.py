"""Probabilistic 360-degree sensor with plan-view occlusion.

Each vehicle footprint is a 2-D rectangle.  A target's visible cross-section
is the fraction of its subtended angular interval (seen from the ego
centroid) not covered by the union of intervals of strictly nearer vehicles.
Position noise grows affinely with distance and with the occluded fraction;
the reported covariance always equals the covariance the noise was drawn
from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mobility import ConfigError, Vehicle, WorldSnapshot

TWO_PI = 2.0 * np.pi


@dataclass
class SensorParams:
    range: float = 85.0               # m
    period: float = 0.1               # s
    sigma_min: float = 0.2            # m, noise floor
    alpha_dist: float = 1.3           # m, gain on distance/range
    beta_occl: float = 2.0            # m, gain on occluded fraction
    min_visible_fraction: float = 0.05
    anisotropy: float = 1.0           # sigma_y = anisotropy * sigma_x

    def validate(self) -> None:
        if self.range <= 0:
            raise ConfigError("sensor.range: must be positive")
        if self.period <= 0:
            raise ConfigError("sensor.period: must be positive")
        if self.sigma_min <= 0:
            raise ConfigError("sensor.sigma_min: must be positive")
        if self.alpha_dist < 0 or self.beta_occl < 0:
            raise ConfigError("sensor.alpha_dist/beta_occl: must be >= 0")
        if not (0.0 <= self.min_visible_fraction <= 1.0):
            raise ConfigError("sensor.min_visible_fraction: must be in [0, 1]")
        if self.anisotropy <= 0:
            raise ConfigError("sensor.anisotropy: must be positive")


@dataclass
class Detection:
    object_id: int
    measured_position: np.ndarray     # (2,) global frame
    noise_cov: np.ndarray             # 2x2 diag(sigma_x^2, sigma_y^2)
    timestamp: float
    cross_section: float              # fraction in (0, 1]
    distance: float                   # m, centroid distance


def _corner_angles(ex: float, ey: float, cx, cy, heading, length, width):
    """Angles of the four footprint corners seen from (ex, ey).

    Vectorized: cx, cy, heading, length, width are aligned arrays (K,)
    and the result is (K, 4).
    """
    ch, sh = np.cos(heading), np.sin(heading)
    hl, hw = 0.5 * np.asarray(length), 0.5 * np.asarray(width)
    # corner offsets in vehicle frame: (+-hl, +-hw)
    sx = np.stack([hl, hl, -hl, -hl], axis=-1)
    sy = np.stack([hw, -hw, hw, -hw], axis=-1)
    gx = cx[..., None] + sx * ch[..., None] - sy * sh[..., None]
    gy = cy[..., None] + sx * sh[..., None] + sy * ch[..., None]
    return np.arctan2(gy - ey, gx - ex)


def _intervals(ex: float, ey: float, cx, cy, heading, length, width):
    """Subtended angular interval (lo, hi) per rectangle; hi - lo < pi.

    The interval is centered on the centroid bearing so rectangles crossing
    the atan2 branch cut are handled; lo/hi may fall outside (-pi, pi].
    """
    ang = _corner_angles(ex, ey, cx, cy, heading, length, width)
    center = np.arctan2(np.asarray(cy) - ey, np.asarray(cx) - ex)
    delta = (ang - center[..., None] + np.pi) % TWO_PI - np.pi
    return center + delta.min(axis=-1), center + delta.max(axis=-1)


def _covered_fraction(lo_t: float, hi_t: float, lo_o: np.ndarray, hi_o: np.ndarray) -> float:
    """Fraction of (lo_t, hi_t) covered by the union of occluder intervals."""
    span = hi_t - lo_t
    if span <= 0.0:
        return 1.0
    mid_t = 0.5 * (lo_t + hi_t)
    mid_o = 0.5 * (lo_o + hi_o)
    shift = np.round((mid_t - mid_o) / TWO_PI) * TWO_PI
    a = np.maximum(lo_o + shift, lo_t)
    b = np.minimum(hi_o + shift, hi_t)
    keep = b > a
    if not np.any(keep):
        return 0.0
    pairs = sorted(zip(a[keep].tolist(), b[keep].tolist()))
    covered = 0.0
    cur_a, cur_b = pairs[0]
    for pa, pb in pairs[1:]:
        if pa > cur_b:
            covered += cur_b - cur_a
            cur_a, cur_b = pa, pb
        else:
            cur_b = max(cur_b, pb)
    covered += cur_b - cur_a
    return covered / span


def cross_sections(ego: Vehicle, snap: WorldSnapshot, rows: np.ndarray,
                   params: SensorParams) -> np.ndarray:
    """Visible cross-section of each candidate row (snapshot indices), where
    candidates must exclude the ego itself.  Rows beyond sensor range get 0.

    Occluders for a candidate are the other candidates with strictly smaller
    centroid distance (any vehicle nearer than an in-range target is itself
    in range, so the candidate set is occlusion-complete).
    """
    k = len(rows)
    if k == 0:
        return np.zeros(0)
    ex, ey = ego.x, ego.y
    dist = np.hypot(snap.x[rows] - ex, snap.y[rows] - ey)
    lo, hi = _intervals(ex, ey, snap.x[rows], snap.y[rows],
                        snap.heading[rows], snap.length[rows], snap.width[rows])
    # pairwise clipped overlap of occluder j's interval against target i
    mid = 0.5 * (lo + hi)
    shift = np.round((mid[:, None] - mid[None, :]) / TWO_PI) * TWO_PI
    a = np.maximum(lo[None, :] + shift, lo[:, None])
    b = np.minimum(hi[None, :] + shift, hi[:, None])
    occludes = (b > a) & (dist[None, :] < dist[:, None])
    frac = np.zeros(k)
    in_range = dist <= params.range
    ti, oj = np.nonzero(occludes)
    bounds = np.searchsorted(ti, np.arange(k + 1))
    for i in range(k):
        if not in_range[i]:
            continue
        s0, s1 = bounds[i], bounds[i + 1]
        if s0 == s1:
            frac[i] = 1.0
            continue
        js = oj[s0:s1]
        covered = _union_length(a[i, js], b[i, js])
        frac[i] = 1.0 - covered / (hi[i] - lo[i])
    return frac


def _union_length(a: np.ndarray, b: np.ndarray) -> float:
    pairs = sorted(zip(a.tolist(), b.tolist()))
    total = 0.0
    cur_a, cur_b = pairs[0]
    for pa, pb in pairs[1:]:
        if pa > cur_b:
            total += cur_b - cur_a
            cur_a, cur_b = pa, pb
        else:
            cur_b = max(cur_b, pb)
    total += cur_b - cur_a
    return total


def visible_cross_section(ego: Vehicle, target: Vehicle,
                          obstacles: list[Vehicle],
                          params: SensorParams | None = None) -> float:
    """Visible fraction of `target` from `ego` given occluding `obstacles`.

    Only obstacles with centroid strictly nearer than the target occlude.
    Returns 0.0 when the target centroid is beyond sensor range.
    """
    params = params or SensorParams()
    d_t = float(np.hypot(target.x - ego.x, target.y - ego.y))
    if d_t > params.range:
        return 0.0
    lo_t, hi_t = _intervals(ego.x, ego.y, np.array([target.x]), np.array([target.y]),
                            np.array([target.heading]), np.array([target.length]),
                            np.array([target.width]))
    occ = [o for o in obstacles
           if o.id != ego.id and o.id != target.id
           and np.hypot(o.x - ego.x, o.y - ego.y) < d_t]
    if not occ:
        return 1.0
    lo_o, hi_o = _intervals(
        ego.x, ego.y,
        np.array([o.x for o in occ]), np.array([o.y for o in occ]),
        np.array([o.heading for o in occ]), np.array([o.length for o in occ]),
        np.array([o.width for o in occ]))
    return 1.0 - _covered_fraction(float(lo_t[0]), float(hi_t[0]), lo_o, hi_o)


def detection_stddev(cross_section: float, distance: float,
                     params: SensorParams) -> tuple[float, float]:
    """Position noise stddev (sigma_x, sigma_y) for a detection.

    sigma = sigma_min + alpha_dist * (d / range) + beta_occl * (1 - c);
    isotropic unless params.anisotropy != 1.
    """
    if not (0.0 < cross_section <= 1.0):
        raise ValueError(f"cross_section must be in (0, 1], got {cross_section}")
    if not (0.0 <= distance <= params.range):
        raise ValueError(f"distance must be in [0, range], got {distance}")
    sigma = (params.sigma_min
             + params.alpha_dist * (distance / params.range)
             + params.beta_occl * (1.0 - cross_section))
    return sigma, sigma * params.anisotropy


def sense_arrays(ego: Vehicle, world: WorldSnapshot, rng: np.random.Generator,
                 params: SensorParams):
    """Batched sensor sweep: (object_ids, measured (n,2), noise_cov (n,2,2),
    cross_sections, distances), ordered by ascending object id.  RNG draws
    happen in that order."""
    dx = world.x - ego.x
    dy = world.y - ego.y
    dist = np.hypot(dx, dy)
    cand = np.nonzero((dist <= params.range) & (world.ids != ego.id))[0]
    if len(cand) == 0:
        return None
    frac = cross_sections(ego, world, cand, params)
    keep = frac >= params.min_visible_fraction
    cand, frac = cand[keep], frac[keep]
    if len(cand) == 0:
        return None
    order = np.argsort(world.ids[cand], kind="stable")
    cand, frac = cand[order], frac[order]

    d = dist[cand]
    sigma_x = (params.sigma_min + params.alpha_dist * (d / params.range)
               + params.beta_occl * (1.0 - frac))
    sigma_y = sigma_x * params.anisotropy
    noise = rng.standard_normal((len(cand), 2))
    zs = np.empty((len(cand), 2))
    zs[:, 0] = world.x[cand] + noise[:, 0] * sigma_x
    zs[:, 1] = world.y[cand] + noise[:, 1] * sigma_y
    rs = np.zeros((len(cand), 2, 2))
    rs[:, 0, 0] = sigma_x ** 2
    rs[:, 1, 1] = sigma_y ** 2
    return world.ids[cand].copy(), zs, rs, frac, d


def sense(ego: Vehicle, world: WorldSnapshot, rng: np.random.Generator,
          now: float, params: SensorParams) -> list[Detection]:
    """One sensor sweep: a Detection for every other vehicle within range and
    above the visibility floor, with Gaussian noise drawn from the declared
    covariance.  Emission and RNG draw order is ascending object id."""
    batch = sense_arrays(ego, world, rng, params)
    if batch is None:
        return []
    ids, zs, rs, frac, d = batch
    return [
        Detection(object_id=int(ids[j]), measured_position=zs[j],
                  noise_cov=rs[j], timestamp=now,
                  cross_section=float(frac[j]), distance=float(d[j]))
        for j in range(len(ids))
    ]
