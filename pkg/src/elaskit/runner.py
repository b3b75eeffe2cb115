"""Run a preset through an event trace under one policy and collect metrics."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .cluster import ClusterState, ElasticEvent, EventKind, apply_event, build_cluster, node_event
from .errors import ElasKitError, Infeasible, NoRecoveryInRun, SimOom
from .fabric import SnapshotConfig, snapshot_timeline
from .migration import MigrationMode
from .policies import HANDLERS, Policy, PipelineState, RecoveryConstants, Recovery, Workload, initial_state
from .presets import Preset
from .sim import PipelinePlan, StepResult, simulate_step

log = logging.getLogger("elaskit")

SCHEMA_VERSION = 1
HBM_BW = 1.6e12          # per NPU, for the on-device optimizer step
HOST_ADAM_PARAMS_PER_S = 1e9


@dataclass(frozen=True)
class RunConfig:
    preset: Preset
    policy: Policy = Policy.ELASWAVE
    seed: int = 0
    extra_steps: int = 3
    min_steps: int = 4
    rotate: bool = True
    migration_mode: MigrationMode = MigrationMode.NON_BLOCKING
    constants: RecoveryConstants = RecoveryConstants()
    snapshot_sync_s: float = 0.2


@dataclass
class StepRecord:
    step: int
    start_s: float
    time_s: float
    samples: int
    samples_per_s: float
    active_devices: int
    alive_devices: int
    lse_cum: float


@dataclass
class SimReport:
    preset: str
    policy: str
    seed: int
    steps: List[StepRecord]
    recoveries: List[Recovery]
    bubble_ratio: List[float]
    peak_in_flight: List[int]
    peak_mem_bytes: Dict[int, float]
    snapshot_overhead_s: float
    initial_throughput: float
    final_throughput: float
    initial_devices: int
    final_devices: int
    oom: Optional[str] = None
    lost_samples: int = 0

    @property
    def lse(self) -> float:
        return compute_lse(self.initial_throughput, self.final_throughput,
                           self.initial_devices, self.final_devices)[0]

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "preset": self.preset,
            "policy": self.policy,
            "seed": self.seed,
            "steps": [dataclasses.asdict(s) for s in self.steps],
            "recoveries": [r.as_dict() for r in self.recoveries],
            "bubble_ratio": self.bubble_ratio,
            "peak_in_flight": self.peak_in_flight,
            "peak_mem_bytes": {str(k): v for k, v in sorted(self.peak_mem_bytes.items())},
            "snapshot_overhead_s": self.snapshot_overhead_s,
            "initial_throughput": self.initial_throughput,
            "final_throughput": self.final_throughput,
            "initial_devices": self.initial_devices,
            "final_devices": self.final_devices,
            "lse": compute_lse(self.initial_throughput, self.final_throughput,
                               self.initial_devices, self.final_devices)[0] if self.final_throughput else 0.0,
            "oom": self.oom,
            "lost_samples": self.lost_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def compute_lse(t_before: float, t_after: float, n_before: int, n_after: int,
                eps: float = 0.05) -> Tuple[float, float]:
    """(clipped, raw) throughput ratio over device ratio."""
    if n_before <= 0 or n_after <= 0 or t_before <= 0:
        raise ValueError("device counts and baseline throughput must be positive")
    raw = (t_after / t_before) / (n_after / n_before)
    return min(max(raw, 0.0), 1.0 + eps), raw


def mttr_breakdown(report: SimReport) -> List[dict]:
    if not report.recoveries:
        raise NoRecoveryInRun("run had no recovery")
    return [r.as_dict() for r in report.recoveries]


def post_event_throughput(report: SimReport, window_s: float, start_s: Optional[float] = None) -> float:
    """Samples completed per second over ``[start, start + window)``.

    Steps count fluidly: a step overlapping the window edge contributes the
    overlapping fraction of its samples.  ``start`` defaults to the first
    recovery's event time.
    """
    if start_s is None:
        if not report.recoveries:
            raise NoRecoveryInRun("no event to anchor the window")
        start_s = report.recoveries[0].time_s
    end = start_s + window_s
    done = 0.0
    for s in report.steps:
        lo, hi = s.start_s, s.start_s + s.time_s
        ov = max(0.0, min(hi, end) - max(lo, start_s))
        if ov > 0:
            done += s.samples * ov / s.time_s
    if report.steps and report.steps[-1].start_s + report.steps[-1].time_s < end:
        raise ValueError("run ends before the window does; add steps")
    return done / window_s


def recovery_throughput(report: SimReport, window_steps: float = 1.5) -> float:
    """Throughput over ``window_steps`` fault-free step times from the first event.

    This is the window the policy comparison ranks by: it charges each policy
    its pause and its degraded steps alike.
    """
    if not report.steps or report.initial_throughput <= 0:
        return 0.0
    if report.oom:
        return 0.0
    step_s = report.steps[0].samples / report.initial_throughput
    return post_event_throughput(report, window_steps * step_s)


def snapshot_overhead(plan: PipelinePlan, preset: Preset, step_s: float, sync_s: float) -> float:
    """Critical-path seconds the per-step optimizer snapshot adds."""
    mem = preset.mem_model()
    worst = 0.0
    for st in plan.stages:
        D = st.width
        if D < 2:
            continue
        layers = st.num_layers
        grad_shard = layers * mem.bytes_grad_per_layer / D / preset.tp
        opt_shard = layers * mem.bytes_optstate_per_layer / D / preset.tp
        params_shard = layers * mem.bytes_param_per_layer / D / preset.tp
        cfg = SnapshotConfig(
            grad_shard_bytes=grad_shard,
            optstate_shard_bytes=opt_shard,
            d2d_bw=preset.link_bw / preset.tp,
            d2h_bw=preset.link_bw / preset.tp,
            host_update_s=params_shard / 2 / HOST_ADAM_PARAMS_PER_S,
            opt_step_s=2 * opt_shard / HBM_BW,
            allgather_s=params_shard * (D - 1) / (preset.link_bw / preset.tp),
            next_compute_s=step_s,
            sync_s=sync_s,
        )
        worst = max(worst, snapshot_timeline(cfg))
    return worst


def _workload(cfg: RunConfig) -> Workload:
    p = cfg.preset
    return Workload(p.num_layers, p.mbs, p.num_microbatches, p.profile(), p.mem_model(), p.link_bw,
                    rotate=cfg.rotate, migration_mode=cfg.migration_mode)


def make_cluster(preset: Preset) -> ClusterState:
    return build_cluster(preset.tp, preset.pp, preset.dp, preset.device_mem_bytes)


def node_failure_trace(preset: Preset, nodes: Sequence[int] = (0,), at_steps: float = 1.5,
                       kind: EventKind = EventKind.FAIL_STOP) -> List[ElasticEvent]:
    """One event taking out whole ``nodes`` after ``at_steps`` fault-free steps."""
    step_s = preset.global_batch / preset.measured_samples_per_s
    return [node_event(make_cluster(preset), kind, list(nodes), time_s=round(at_steps * step_s, 3))]


def run(cfg: RunConfig, trace: Sequence[ElasticEvent] = ()) -> SimReport:
    """Simulate steps until every event is handled plus ``extra_steps`` more."""
    w = _workload(cfg)
    cluster = make_cluster(cfg.preset)
    state = initial_state(cluster, w)
    events = sorted(enumerate(trace), key=lambda x: (x[1].time_s, x[0]))
    cache: Dict[str, object] = {}
    handler = HANDLERS[cfg.policy]
    c = cfg.constants

    def evaluate(st: PipelineState):
        # one simulated step per plan; the plan only changes in a handler
        if cache.get("state") is not st:
            plan = st.to_plan()
            plan.check()
            res = simulate_step(plan, w.profile, w.mem)
            snap = snapshot_overhead(plan, cfg.preset, res.makespan_s, cfg.snapshot_sync_s)
            cache.update(state=st, result=(plan, res, snap))
        return cache["result"]

    t, step = 0.0, 0
    steps: List[StepRecord] = []
    recoveries: List[Recovery] = []
    n0 = len(cluster.alive_ids)
    plan0, res0, snap0 = evaluate(state)
    base_tput = plan0.samples_per_step / (res0.makespan_s + snap0)
    oom = None
    lost = 0
    after_last = 0
    pending = list(events)
    while True:
        plan, res, snap = evaluate(state)
        if res.oom:
            oom = f"{cfg.policy.value}: devices {res.oom} exceed memory"
            log.warning(oom)
            break
        dur = res.makespan_s + snap
        t_end = t + dur
        hit = [e for e in pending if e[1].time_s < t_end and e[1].kind is EventKind.FAIL_STOP]
        if hit:
            # the step in flight is lost; recover from the failure instant
            t = max(t, hit[0][1].time_s)
            lost += plan.samples_per_step
        else:
            alive = len(cluster.alive_ids)
            tput = plan.samples_per_step / dur
            lse_cum = (tput / base_tput) / (alive / n0)
            steps.append(StepRecord(step, t, dur, plan.samples_per_step, tput, len(plan.devices), alive, lse_cum))
            t = t_end
            step += 1
            if not pending:
                after_last += 1
        due = [e for e in pending if e[1].time_s <= t]
        if not hit and not due and not pending and after_last >= cfg.extra_steps and step >= cfg.min_steps:
            break
        for idx, ev in due:
            pending.remove((idx, ev))
            cluster = apply_event(cluster, ev)
            try:
                state, rec = handler(state, cluster, ev, w, c, idx)
            except Infeasible as exc:
                oom = f"{cfg.policy.value}: {exc}"
                log.warning(oom)
                pending = []
                break
            rec.time_s = max(ev.time_s, rec.time_s)
            recoveries.append(rec)
            log.info("event %d (%s) handled by %s: pause %.3fs", idx, ev.kind.value, cfg.policy.value, rec.total_s)
            t += rec.total_s
        if oom:
            break
        if not due and not hit and pending and step > 10_000:
            raise ElasKitError("runaway simulation")
    plan, res, snap = evaluate(state)
    final = steps[-1].samples_per_s if steps and not oom else 0.0
    return SimReport(
        preset=cfg.preset.name, policy=cfg.policy.value, seed=cfg.seed, steps=steps, recoveries=recoveries,
        bubble_ratio=res.bubble_ratio, peak_in_flight=res.peak_in_flight, peak_mem_bytes=res.peak_mem,
        snapshot_overhead_s=snap0, initial_throughput=base_tput,
        final_throughput=final, initial_devices=n0, final_devices=len(cluster.alive_ids),
        oom=oom, lost_samples=lost,
    )
