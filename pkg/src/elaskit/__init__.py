"""Planners and a discrete-event simulator for elastic LLM training recovery."""
from .cluster import ClusterState, ElasticEvent, EventKind, apply_event, build_cluster, node_event
from .consistency import ToyConfig, check_consistency, run_toy
from .dataflow import MicrobatchAssignment, reshard_microbatches
from .dvfs import DvfsQuery, plan_frequency
from .errors import ElasKitError
from .partition import LayerAssignment, LayerMove, plan_partition
from .policies import Policy
from .presets import PRESETS, Preset, get_preset
from .rng import RngKey, draw
from .runner import RunConfig, SimReport, post_event_throughput, run

__version__ = "0.1.0"

__all__ = [
    "ClusterState", "ElasticEvent", "EventKind", "apply_event", "build_cluster", "node_event",
    "ToyConfig", "check_consistency", "run_toy", "MicrobatchAssignment", "reshard_microbatches",
    "DvfsQuery", "plan_frequency", "ElasKitError", "LayerAssignment", "LayerMove", "plan_partition",
    "Policy", "PRESETS", "Preset", "get_preset", "RngKey", "draw", "RunConfig", "SimReport",
    "post_event_throughput", "run",
]
