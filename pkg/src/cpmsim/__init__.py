"""cpmsim: deterministic V2X collective perception simulator.

Compares two Collective Perception Message generation policies on a
simulated multi-lane highway: the ETSI dynamic rules and an accuracy-based
rule gating on the Kullback-Leibler divergence between a station's local
and V2X tracking, and measures Channel Busy Ratio and Object Tracking
Error.
"""

from .channel import Channel, Frame, RadioParams, airtime, deliver, reception_range
from .config import (config_from_dict, config_to_dict, desk_config, load_config,
                     load_profile)
from .engine import (Clock, RngStreams, RunArtifacts, SimConfig, Simulation,
                     TickReport, build_simulation, run, step)
from .metrics import MetricsConfig, OteSample, RunSummary, export, summarize
from .mobility import ConfigError, ScenarioSpec, Vehicle, World, advance, spawn
from .policy import (Cpm, InclusionHistory, PolicyConfig, PolicyMode,
                     accuracy_select, assemble_cpm, etsi_select, kl_divergence)
from .sensor import (Detection, SensorParams, detection_stddev, sense,
                     visible_cross_section)
from .tracking import (EnvModel, Measurement, ModelKind, MotionModelParams,
                       Track, fused_ingest, kf_predict, kf_update, lem_ingest,
                       prune_stale, v2x_ingest)

__version__ = "0.1.0"
