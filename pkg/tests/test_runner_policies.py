import dataclasses

import pytest

from elaskit.cluster import ElasticEvent, EventKind
from elaskit.errors import NoRecoveryInRun
from elaskit.policies import Policy, RecoveryConstants
from elaskit.presets import PRESETS, get_preset
from elaskit.runner import (RunConfig, compute_lse, mttr_breakdown, node_failure_trace, post_event_throughput,
                            recovery_throughput, run)

SMALL = get_preset("llama2-7b", 0.25)


def test_fault_free_run_matches_calibration():
    pr = get_preset("llama2-13b")
    r = run(RunConfig(pr, Policy.ELASWAVE))
    assert r.recoveries == [] and r.oom is None
    assert r.final_throughput == pytest.approx(r.initial_throughput)
    raw = pr.global_batch / r.steps[0].time_s
    assert raw == pytest.approx(r.initial_throughput)
    # snapshot adds well under 1% on top of the calibrated throughput
    assert pr.measured_samples_per_s * 0.99 < r.initial_throughput <= pr.measured_samples_per_s * 1.001
    with pytest.raises(NoRecoveryInRun):
        mttr_breakdown(r)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_snapshot_overhead_below_one_percent(name):
    r = run(RunConfig(get_preset(name), Policy.ELASWAVE))
    assert r.snapshot_overhead_s / r.steps[0].time_s < 0.01


@pytest.mark.parametrize("policy", list(Policy))
def test_runs_are_deterministic(policy):
    trace = node_failure_trace(SMALL, [1])
    a = run(RunConfig(SMALL, policy, seed=3), trace).to_json()
    b = run(RunConfig(SMALL, policy, seed=3), trace).to_json()
    assert a == b


def test_replica_drop_pauses_for_a_restart():
    r = run(RunConfig(SMALL, Policy.REPLICA_DROP), node_failure_trace(SMALL))
    assert r.recoveries[0].total_s == pytest.approx(RecoveryConstants().full_restart_s)
    assert r.final_devices < r.initial_devices


def test_elaswave_pause_is_short_and_attributed():
    r = run(RunConfig(SMALL, Policy.ELASWAVE), node_failure_trace(SMALL))
    rec = mttr_breakdown(r)[0]
    assert 0 < rec["total_s"] < 5
    assert rec["total_s"] == pytest.approx(sum(rec[k] for k in ("detect_s", "comm_repair_s", "remap_s",
                                                                   "migration_stall_s", "other_s")))
    assert r.lost_samples == SMALL.global_batch


def test_global_batch_is_conserved_after_failure():
    for policy in Policy:
        r = run(RunConfig(get_preset("llama2-13b", 0.25), policy), node_failure_trace(get_preset("llama2-13b", 0.25)))
        assert {s.samples for s in r.steps} == {get_preset("llama2-13b", 0.25).global_batch}


@pytest.mark.parametrize("name", ["llama2-7b", "llama2-13b"])
def test_whole_replica_loss_converges_to_replica_drop(name):
    # three nodes take out complete replicas, so rebalancing has nothing to gain
    pr = get_preset(name)
    trace = node_failure_trace(pr, [0, 1, 2])
    ew = run(RunConfig(pr, Policy.ELASWAVE), trace).final_throughput
    rd = run(RunConfig(pr, Policy.REPLICA_DROP), trace).final_throughput
    rr = run(RunConfig(pr, Policy.REROUTE), trace).final_throughput
    assert ew == pytest.approx(rd, rel=1e-9)
    assert rr == pytest.approx(ew, rel=0.02)


def test_fail_slow_ordering_with_and_without_dvfs():
    pr = get_preset("llama2-34b", 0.25)
    trace = [ElasticEvent(0.0, EventKind.FAIL_SLOW, (0,), 1.2)]

    def step_time(policy, dvfs=True):
        cfg = RunConfig(pr, policy, constants=dataclasses.replace(RecoveryConstants(), dvfs=dvfs))
        return run(cfg, trace).steps[-1].time_s

    reroute = step_time(Policy.REROUTE)
    no_dvfs = step_time(Policy.ELASWAVE, dvfs=False)
    with_dvfs = step_time(Policy.ELASWAVE)
    assert reroute > no_dvfs > with_dvfs


@pytest.mark.parametrize("nodes", [1, 2, 3])
@pytest.mark.parametrize("name", sorted(PRESETS))
def test_elaswave_lse_after_node_loss(name, nodes):
    pr = get_preset(name)
    r = run(RunConfig(pr, Policy.ELASWAVE), node_failure_trace(pr, range(nodes)))
    assert r.lse >= 0.89


def test_34b_throughput_ratios():
    pr = get_preset("llama2-34b")
    trace = node_failure_trace(pr)
    w = {p: recovery_throughput(run(RunConfig(pr, p), trace)) for p in Policy}
    assert w[Policy.ELASWAVE] > w[Policy.REROUTE] > w[Policy.REPLICA_DROP]
    assert 1.4 <= w[Policy.ELASWAVE] / w[Policy.REPLICA_DROP] <= 1.8
    assert 1.2 <= w[Policy.ELASWAVE] / w[Policy.REROUTE] <= 1.5


def test_scale_out_restores_capacity():
    pr = get_preset("llama2-13b", 0.25)
    trace = node_failure_trace(pr) + [ElasticEvent(200.0, EventKind.SCALE_OUT, (1000, 1001))]
    for policy in (Policy.ELASWAVE, Policy.REROUTE):
        r = run(RunConfig(pr, policy), trace)
        assert len(r.recoveries) == 2 and r.oom is None
        assert r.steps[-1].active_devices == r.initial_devices
        assert r.final_throughput == pytest.approx(r.steps[0].samples_per_s)
    # two spares cannot form a whole replica
    rd = run(RunConfig(pr, Policy.REPLICA_DROP), trace)
    assert rd.steps[-1].active_devices < rd.initial_devices


def test_lse_helpers():
    assert compute_lse(10, 9, 10, 9) == (1.0, 1.0)
    assert compute_lse(10, 12, 10, 9)[0] == 1.05
    with pytest.raises(ValueError):
        compute_lse(0, 1, 1, 1)


def test_window_throughput_counts_partial_steps():
    r = run(RunConfig(SMALL, Policy.ELASWAVE), node_failure_trace(SMALL))
    s = r.steps[0]
    half = post_event_throughput(r, s.time_s / 2, start_s=s.start_s)
    assert half == pytest.approx(s.samples_per_s)
    with pytest.raises(ValueError):
        post_event_throughput(r, 1e9)
