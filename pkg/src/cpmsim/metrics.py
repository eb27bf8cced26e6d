"""Collection, aggregation and export of CBR and OTE statistics.

Samples are restricted to stations inside the logging region, to times
after the warm-up, and (for OTE) to ego-object ground-truth distances up to
300 m.  Quartiles use linear interpolation on the sorted samples; whiskers
are the Tukey 1.5*IQR fences clamped to the observed extremes.  All numbers
are exported with 6 significant digits so identical runs produce
byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mobility import ConfigError
from .tracking import ModelKind


@dataclass
class MetricsConfig:
    model_kind: ModelKind = ModelKind.FUSED   # which tracks OTE is computed on
    warmup: float = 10.0                       # s excluded from logging
    max_ote_distance: float = 300.0            # m
    bin_width: float = 25.0                    # m, distance bins
    ote_every_n_ticks: int = 1                 # OTE sampling stride

    def validate(self) -> None:
        if self.warmup < 0:
            raise ConfigError("metrics.warmup: must be >= 0")
        if self.max_ote_distance <= 0 or self.bin_width <= 0:
            raise ConfigError("metrics.max_ote_distance/bin_width: must be positive")
        if self.ote_every_n_ticks < 1:
            raise ConfigError("metrics.ote_every_n_ticks: must be >= 1")


@dataclass
class OteSample:
    time: float
    ego_id: int
    object_id: int
    error: float
    ego_object_distance: float
    model_kind: ModelKind


class Collector:
    """Append-only sample buffers, one numpy block per tick."""

    def __init__(self):
        self._ote_blocks: list[np.ndarray] = []   # columns: time, ego, obj, err, dist
        self._cbr_blocks: list[np.ndarray] = []   # columns: time, station, cbr

    def add_ote_block(self, block: np.ndarray) -> None:
        if len(block):
            self._ote_blocks.append(block)

    def add_cbr_block(self, block: np.ndarray) -> None:
        if len(block):
            self._cbr_blocks.append(block)

    @property
    def ote(self) -> np.ndarray:
        if not self._ote_blocks:
            return np.zeros((0, 5))
        return np.concatenate(self._ote_blocks)

    @property
    def cbr(self) -> np.ndarray:
        if not self._cbr_blocks:
            return np.zeros((0, 3))
        return np.concatenate(self._cbr_blocks)


def box_stats(values: np.ndarray) -> dict | None:
    """Mean, quartiles and Tukey whisker bounds; None for an empty set."""
    if len(values) == 0:
        return None
    q1, med, q3 = np.percentile(values, [25.0, 50.0, 75.0])
    iqr = q3 - q1
    lo = max(float(values.min()), float(q1 - 1.5 * iqr))
    hi = min(float(values.max()), float(q3 + 1.5 * iqr))
    return {
        "count": int(len(values)),
        "mean": float(values.mean()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "whisker_lo": lo,
        "whisker_hi": hi,
        "min": float(values.min()),
        "max": float(values.max()),
    }


@dataclass
class RunSummary:
    cbr: dict | None
    ote: dict | None
    ote_by_distance: list[dict]        # per bin: lo, hi, count, mean
    counters: dict
    cbr_count: int
    ote_count: int
    config: dict = field(default_factory=dict)


def summarize(ote: np.ndarray, cbr: np.ndarray, counters: dict,
              cfg: MetricsConfig, config_echo: dict | None = None) -> RunSummary:
    """Aggregate raw sample arrays into the run summary."""
    bins = []
    n_bins = int(round(cfg.max_ote_distance / cfg.bin_width))
    err = ote[:, 3] if len(ote) else np.zeros(0)
    dist = ote[:, 4] if len(ote) else np.zeros(0)
    for b in range(n_bins):
        lo = b * cfg.bin_width
        hi = lo + cfg.bin_width
        if b == n_bins - 1:
            m = (dist >= lo) & (dist <= hi)    # last bin closes at max distance
        else:
            m = (dist >= lo) & (dist < hi)
        cnt = int(np.count_nonzero(m))
        bins.append({
            "lo": lo, "hi": hi, "count": cnt,
            "mean": float(err[m].mean()) if cnt else None,
        })
    return RunSummary(
        cbr=box_stats(cbr[:, 2]) if len(cbr) else None,
        ote=box_stats(err),
        ote_by_distance=bins,
        counters=dict(counters),
        cbr_count=int(len(cbr)),
        ote_count=int(len(ote)),
        config=config_echo or {},
    )


# -- export ---------------------------------------------------------------

def fmt(x) -> str:
    """Fixed 6-significant-digit rendering for byte-stable exports."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".6g")


def _round6(obj):
    if isinstance(obj, float):
        return float(fmt(obj))
    if isinstance(obj, dict):
        return {k: _round6(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round6(v) for v in obj]
    return obj


def summary_to_dict(summary: RunSummary) -> dict:
    return {
        "cbr": summary.cbr,
        "ote": summary.ote,
        "ote_by_distance": summary.ote_by_distance,
        "counters": summary.counters,
        "cbr_count": summary.cbr_count,
        "ote_count": summary.ote_count,
        "config": summary.config,
    }


def export(summary: RunSummary, ote: np.ndarray, cbr: np.ndarray,
           out_dir: str | Path) -> dict[str, Path]:
    """Write summary.json, ote.csv and cbr.csv; returns the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "summary": out / "summary.json",
            "ote": out / "ote.csv",
            "cbr": out / "cbr.csv",
        }
        payload = _round6(summary_to_dict(summary))
        paths["summary"].write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        with paths["ote"].open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["time", "ego_id", "object_id", "error_m", "distance_m"])
            for row in ote:
                w.writerow([fmt(row[0]), int(row[1]), int(row[2]), fmt(row[3]), fmt(row[4])])
        with paths["cbr"].open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["time", "station_id", "cbr"])
            for row in cbr:
                w.writerow([fmt(row[0]), int(row[1]), fmt(row[2])])
        return paths
    except OSError as e:
        raise OSError(f"failed to write metrics under {out}: {e}") from e


_COMPARE_STATS = ["mean", "q1", "median", "q3", "whisker_lo", "whisker_hi", "max", "count"]


def compare_rows(labeled_summaries: list[tuple[dict, RunSummary]]) -> list[list]:
    """Long-format rows (label fields + metric + statistic + value) for
    compare.csv; one row per statistic per run."""
    rows = []
    for label, s in labeled_summaries:
        for metric, stats in (("cbr", s.cbr), ("ote", s.ote)):
            for stat in _COMPARE_STATS:
                val = None if stats is None else stats.get(stat)
                rows.append([label.get("policy", ""), label.get("gamma", ""),
                             label.get("density", ""), label.get("seed", ""),
                             metric, stat, fmt(val)])
    return rows


def write_compare_csv(rows: list[list], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["policy", "gamma", "density", "seed", "metric", "statistic", "value"])
        w.writerows(rows)
    return path


def relative_change_rows(summary_a: RunSummary, summary_b: RunSummary) -> list[list]:
    """Per-metric (a - b) / b comparison of two runs."""
    rows = []
    for metric, sa, sb in (("cbr", summary_a.cbr, summary_b.cbr),
                           ("ote", summary_a.ote, summary_b.ote)):
        for stat in _COMPARE_STATS:
            va = None if sa is None else sa.get(stat)
            vb = None if sb is None else sb.get(stat)
            rel = None
            if va is not None and vb not in (None, 0):
                rel = (va - vb) / vb
            rows.append([metric, stat, fmt(va), fmt(vb), fmt(rel)])
    return rows
