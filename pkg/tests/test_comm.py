import pytest
from hypothesis import given, strategies as st

from elaskit.cluster import ElasticEvent, EventKind, node_event
from elaskit.comm import (RING, CommGroup, EditPlan, cluster_groups, compare_rebuilds, estimate_recovery_time,
                          global_pool, plan_edit)
from elaskit.errors import DisconnectedGroup
from elaskit.presets import PRESETS, get_preset
from elaskit.runner import make_cluster


def _stop(*ids):
    return ElasticEvent(0.0, EventKind.FAIL_STOP, ids)


def test_mesh_failure_removes_incident_links():
    g = CommGroup("dp", tuple(range(8)))
    plan = plan_edit([g], _stop(5))
    assert len(plan.links_to_remove) == 7 and not plan.links_to_add
    assert plan.groups_touched == {"dp"}


def test_join_adds_one_link_per_member():
    g = CommGroup("dp", tuple(range(7)))
    plan = plan_edit([g], ElasticEvent(0.0, EventKind.SCALE_OUT, (7,)), joins={"dp": [7]})
    assert len(plan.links_to_add) == 7 and not plan.links_to_remove


def test_full_rebuild_recreates_every_link():
    r = compare_rebuilds([CommGroup("dp", tuple(range(8)))], _stop(5))
    assert (r.edit_links, r.full_links) == (0, 21)


def test_ring_failure_adds_one_reconnect_link():
    g = CommGroup("dp", tuple(range(6)), topology=RING)
    plan = plan_edit([g], _stop(2))
    assert plan.links_to_add == {(1, 3)}
    assert plan.links_to_remove == {(1, 2), (2, 3)}


def test_empty_plan_costs_nothing():
    assert estimate_recovery_time(EditPlan(frozenset(), frozenset(), frozenset()), 0.002, 0.09) == 0.0
    plan = plan_edit([CommGroup("dp", (0, 1, 2))], ElasticEvent(0.0, EventKind.FAIL_SLOW, (1,), 1.5))
    assert plan.est_time_s == 0.0 and not plan.groups_touched


def test_disconnecting_edit_is_rejected():
    chain = CommGroup("c", (0, 1, 2), frozenset({(0, 1), (1, 2)}), topology="star")
    with pytest.raises(DisconnectedGroup):
        plan_edit([chain], _stop(1))


def _world(affected_size, bystanders, bystander_size):
    groups = [CommGroup("hit", tuple(range(affected_size)))]
    base = 1000
    for i in range(bystanders):
        groups.append(CommGroup(f"b{i}", tuple(range(base, base + bystander_size))))
        base += bystander_size
    return groups


def test_edit_size_is_local():
    small = plan_edit(_world(8, 2, 4), _stop(3))
    big = plan_edit(_world(8, 20, 40), _stop(3))
    assert (len(small.links_to_add), len(small.links_to_remove)) == (len(big.links_to_add), len(big.links_to_remove))
    assert small.est_time_s == big.est_time_s


@given(st.integers(2, 10), st.integers(0, 4), st.data())
def test_reuse_and_count_dominance(size, extra, data):
    groups = [CommGroup("a", tuple(range(size))), CommGroup("b", tuple(range(size - 1, size + extra)))] \
        if extra else [CommGroup("a", tuple(range(size)))]
    alive = sorted({m for g in groups for m in g.members})
    victims = data.draw(st.lists(st.sampled_from(alive), min_size=1, max_size=len(alive) - 1, unique=True))
    try:
        r = compare_rebuilds(groups, _stop(*victims))
        plan = plan_edit(groups, _stop(*victims))
    except DisconnectedGroup:
        return
    assert not plan.links_to_add & global_pool(groups)
    assert r.edit_links <= r.partial_links <= r.full_links


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_calibrated_times_land_in_reported_bands(name):
    cluster = make_cluster(get_preset(name))
    groups = cluster_groups(cluster)
    for ev in (_stop(cluster.alive_ids[3]), node_event(cluster, EventKind.FAIL_STOP, [0])):
        r = compare_rebuilds(groups, ev)
        assert 0.15 <= r.edit_s <= 0.37
        assert 12 <= r.full_s <= 16
        assert 30 <= r.speedup_vs_full <= 100
    single = compare_rebuilds(groups, _stop(cluster.alive_ids[3]))
    assert 2.8 <= single.speedup_vs_partial <= 3.6
