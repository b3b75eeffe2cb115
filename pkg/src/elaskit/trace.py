"""JSON-lines trace and JSON config loading with line-precise errors."""
from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Iterable, List, Optional, Union

from .cluster import ClusterState, ElasticEvent, EventKind
from .errors import ConfigError
from .presets import PRESETS, Preset, get_preset

TRACE_KEYS = {"t", "kind", "targets", "slow_factor", "nodes"}
CONFIG_KEYS = {"preset", "policy", "seed", "scale_factor", "trace", "out", "overrides"}


def parse_trace(lines: Iterable[str], cluster: Optional[ClusterState] = None) -> List[ElasticEvent]:
    """One event per non-blank line.

    ``targets`` lists device ids; ``nodes`` (needs ``cluster``) adds every
    device on those nodes.  Times must not decrease.
    """
    events: List[ElasticEvent] = []
    last_t = 0.0
    for no, raw in enumerate(lines, 1):
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", no) from None
        if not isinstance(obj, dict):
            raise ConfigError("each line must be a JSON object", no)
        unknown = set(obj) - TRACE_KEYS
        if unknown:
            raise ConfigError(f"unknown field(s) {sorted(unknown)}", no)
        if "t" not in obj or "kind" not in obj:
            raise ConfigError("fields 't' and 'kind' are required", no)
        t = obj["t"]
        if isinstance(t, bool) or not isinstance(t, (int, float)) or t < 0:
            raise ConfigError(f"'t' must be a non-negative number, got {t!r}", no)
        if t < last_t:
            raise ConfigError(f"time {t} goes backwards (previous {last_t})", no)
        try:
            kind = EventKind(obj["kind"])
        except ValueError:
            choices = ", ".join(k.value for k in EventKind)
            raise ConfigError(f"kind must be one of {choices}, got {obj['kind']!r}", no) from None
        targets = obj.get("targets", [])
        if not isinstance(targets, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in targets):
            raise ConfigError("'targets' must be a list of integer device ids", no)
        targets = list(targets)
        nodes = obj.get("nodes", [])
        if nodes:
            if cluster is None:
                raise ConfigError("'nodes' needs a cluster to expand against", no)
            if not isinstance(nodes, list) or not all(isinstance(x, int) for x in nodes):
                raise ConfigError("'nodes' must be a list of integer node ids", no)
            for node in nodes:
                devs = cluster.node_devices(node)
                if not devs:
                    raise ConfigError(f"node {node} has no devices", no)
                targets.extend(d for d in devs if d not in targets)
        slow = obj.get("slow_factor")
        if slow is not None and (isinstance(slow, bool) or not isinstance(slow, (int, float))):
            raise ConfigError("'slow_factor' must be a number", no)
        try:
            events.append(ElasticEvent(float(t), kind, tuple(targets), None if slow is None else float(slow)))
        except ValueError as exc:
            raise ConfigError(str(exc), no) from None
        last_t = t
    return events


def load_trace(path: Union[str, Path], cluster: Optional[ClusterState] = None) -> List[ElasticEvent]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"trace file {p} not found")
    with p.open(encoding="utf-8") as fh:
        return parse_trace(fh, cluster)


def load_config(path: Union[str, Path]) -> dict:
    """Read a JSON run config; keys mirror the CLI flags."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)}")
    return cfg


def resolve_preset(name: str, scale_factor: float = 1.0, overrides: Optional[dict] = None) -> Preset:
    """A named preset, optionally with fields replaced to describe a custom model."""
    try:
        p = get_preset(name, scale_factor)
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if overrides:
        allowed = {"num_layers", "hidden", "params_billion", "mbs", "global_batch"}
        bad = set(overrides) - allowed
        if bad:
            raise ConfigError(f"cannot override {sorted(bad)}; allowed: {sorted(allowed)}")
        p = replace(p, **overrides)
    return p
