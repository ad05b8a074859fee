import networkx as nx
import numpy as np
import pytest

from _builders import CBD_LAT, CBD_LON, KM_LAT, build, chm_app, node, still_entity, two_block_spec, two_gateway_spec
from fogsim.application import AppEdge, AppModule, Application
from fogsim.clustering import ClusterManager
from fogsim.infrastructure import CapacityError
from fogsim.microservices import (RoundRobinLoadBalancer, RoutingError, ServiceDiscovery, ServiceUnavailable,
                                  compute_routes, edgeward_place, generate_sd, select_destination, smp_place,
                                  update_service_discovery)
from fogsim.mobility import MigrationPolicy, MobileEntity, MobilityTrace
from fogsim.simulation import Simulation

PRE, ED, PRED = "Preprocessing", "Emergency Diagnosis", "Prediction"


# ------------------------------------------------------------------ service discovery and load balancing

def test_round_robin_alternates():
    sd = ServiceDiscovery({1: {"m": [8, 5]}})
    lb = RoundRobinLoadBalancer()
    assert [select_destination(1, "m", sd, lb) for _ in range(4)] == [5, 8, 5, 8]


def test_single_candidate_always_chosen():
    sd = ServiceDiscovery({1: {"m": [4]}})
    lb = RoundRobinLoadBalancer()
    assert {lb.select(1, "m", sd) for _ in range(50)} == {4}


@pytest.mark.parametrize("n", [1, 2, 3, 5])
@pytest.mark.parametrize("k", [1, 10, 100])
def test_round_robin_equidistribution(n, k):
    sd = ServiceDiscovery({0: {"m": list(range(10, 10 + n))}})
    lb = RoundRobinLoadBalancer()
    picks = [lb.select(0, "m", sd) for _ in range(n * k)]
    assert {c: picks.count(c) for c in set(picks)} == {10 + i: k for i in range(n)}


def test_added_node_joins_rotation():
    sd = ServiceDiscovery({0: {"m": [1]}})
    lb = RoundRobinLoadBalancer()
    lb.select(0, "m", sd)
    update_service_discovery(sd, 0, "m", True, 2, lb)
    assert sorted(lb.select(0, "m", sd) for _ in range(4)) == [1, 1, 2, 2]


def test_removing_last_candidate_makes_service_unavailable():
    sd = ServiceDiscovery({0: {"m": [1, 2]}})
    lb = RoundRobinLoadBalancer()
    lb.select(0, "m", sd)
    update_service_discovery(sd, 0, "m", False, 2, lb)
    assert lb.cursors[(0, "m")] == 0  # clamped
    assert lb.select(0, "m", sd) == 1
    update_service_discovery(sd, 0, "m", False, 1, lb)
    with pytest.raises(ServiceUnavailable):
        lb.select(0, "m", sd)


def test_removing_missing_entry_warns():
    sd = ServiceDiscovery({0: {"m": [1]}})
    with pytest.warns(UserWarning):
        assert update_service_discovery(sd, 0, "m", False, 9) is False
    assert sd.candidates(0, "m") == [1]


# ------------------------------------------------------------------ routing

def test_two_node_route():
    t = build({"nodes": [node(0, 0, None), node(1, 1, 0)]})
    r = compute_routes(t)
    assert r.next_hop(0, 1) == 1 and r.path(1, 0) == [1, 0]
    assert r.cost(0, 1) == 100.0


def test_cheap_cluster_link_is_preferred():
    t = build(two_block_spec())
    assert compute_routes(t).path(3, 4) == [3, 1, 4]
    t[3].cluster_members, t[3].cm_latency = [4], {4: 1.0}
    t[4].cluster_members, t[4].cm_latency = [3], {3: 1.0}
    r = compute_routes(t)
    assert r.next_hop(3, 4) == 4 and r.cost(3, 4) == 1.0


def test_disconnected_topology_is_a_routing_error():
    t = build({"nodes": [node(0, 0, None), node(1, 0, None, name="b")]})
    with pytest.raises(RoutingError):
        compute_routes(t)


def random_fog(rng, n=30):
    """Cloud, a few proxies, the rest gateways; random sibling cluster links."""
    n_proxy = int(rng.integers(2, 6))
    nodes = [node(0, 0, None)]
    nodes += [node(i, 1, 0) for i in range(1, n_proxy + 1)]
    nodes += [node(i, 2, int(rng.integers(1, n_proxy + 1))) for i in range(n_proxy + 1, n)]
    over = []
    for i in range(1, n):
        if rng.random() < 0.3:
            over.append({"a": i, "b": nodes[i]["parent"], "ms": float(rng.integers(1, 150))})
    t = build({"nodes": nodes, "link_latency": over})
    edges = []
    for g in t.tier_nodes(2):
        for s in t.siblings(g):
            if s > g and rng.random() < 0.4:
                ms = float(rng.integers(1, 10))
                t[g].cluster_members.append(s)
                t[g].cm_latency[s] = ms
                t[s].cluster_members.append(g)
                t[s].cm_latency[g] = ms
                edges.append((g, s, ms))
    return t, nodes, over, edges


@pytest.mark.parametrize("seed", range(100))
def test_route_costs_match_all_pairs_oracle(seed):
    t, nodes, over, cluster = random_fog(np.random.default_rng(seed))
    g = nx.Graph()
    ms = {(o["a"], o["b"]): o["ms"] for o in over}
    for r in nodes:
        if r["parent"] is not None:
            default = 100.0 if r["tier"] == 1 else 2.0
            g.add_edge(r["id"], r["parent"], weight=ms.get((r["id"], r["parent"]), default))
    for a, b, w in cluster:
        g.add_edge(a, b, weight=w)
    oracle = dict(nx.all_pairs_dijkstra_path_length(g))
    routes = compute_routes(t)
    for a in t.nodes:
        for b in t.nodes:
            assert routes.cost(a, b) == pytest.approx(oracle[a][b], abs=1e-9)
            path = routes.path(a, b)
            assert sum(g[u][v]["weight"] for u, v in zip(path, path[1:])) == pytest.approx(oracle[a][b], abs=1e-9)


# ------------------------------------------------------------------ SMP and edgeward

def instance_map(plan):
    return {k: v for k, v in plan.assignments.items() if k[1] in (PRE, ED, PRED)}


def test_ample_nodes_keep_everything_on_the_gateway():
    t = build(two_gateway_spec(gw_ram=(8.0, 8.0)))
    for plan in (smp_place(t, chm_app(), {0: 2}), edgeward_place(t, chm_app(), {0: 2})):
        assert instance_map(plan) == {(0, PRE): 2, (0, ED): 2, (0, PRED): 2}
        assert plan.host(0, "Client") == "dev0"


def clusters_of(t):
    cm = ClusterManager(t)
    cm.run()
    return cm


def test_smp_falls_back_to_cluster_member_before_climbing():
    t = build(two_gateway_spec())
    cm = clusters_of(t)
    assert cm.members(2) == [3]
    plan = smp_place(t, chm_app(), {0: 2}, cm.members)
    assert instance_map(plan) == {(0, PRE): 2, (0, ED): 3, (0, PRED): 3}
    assert plan.ram == {2: 0.5, 3: 2.5}


def test_smp_without_clustering_climbs_to_the_proxy():
    t = build(two_gateway_spec())
    plan = smp_place(t, chm_app(), {0: 2}, None)
    assert instance_map(plan) == {(0, PRE): 2, (0, ED): 1, (0, PRED): 1}


def test_two_device_hand_trace():
    # gateway 2 fits one 0.5 GB module, gateway 3 fits two, the proxy everything
    t = build(two_gateway_spec(gw_ram=(0.5, 1.0)))
    cm = clusters_of(t)
    plan = smp_place(t, chm_app(), {0: 2, 1: 3}, cm.members)
    assert instance_map(plan) == {(0, PRE): 2, (1, PRE): 3, (0, ED): 1, (1, ED): 3, (0, PRED): 1, (1, PRED): 1}


def test_edgeward_never_uses_the_sibling():
    t = build(two_gateway_spec())
    plan = edgeward_place(t, chm_app(), {0: 2})
    assert instance_map(plan) == {(0, PRE): 2, (0, ED): 1, (0, PRED): 1}
    assert 3 not in plan.ram


def test_service_discovery_follows_the_plan():
    t = build(two_gateway_spec())
    plan = smp_place(t, chm_app(), {0: 2}, clusters_of(t).members)
    assert plan.sd.candidates("dev0", PRE) == [2]
    assert plan.sd.candidates(2, ED) == [3] and plan.sd.candidates(2, PRED) == [3]
    assert plan.sd.entries() == generate_sd(chm_app(), plan.assignments).entries()


def test_unplaceable_module_is_named():
    spec = two_gateway_spec(gw_ram=(0.5, 0.5), proxy_ram=0.5)
    spec["nodes"][0]["ram"] = 1.0
    t = build(spec)
    with pytest.raises(CapacityError, match="Prediction"):
        smp_place(t, chm_app(), {0: 2})
    with pytest.raises(CapacityError, match="Prediction"):
        edgeward_place(t, chm_app(), {0: 2})


def tight_fog(seed):
    rng = np.random.default_rng(seed)
    nodes = [node(0, 0, None, ram=256), node(1, 1, 0, ram=float(rng.uniform(4, 16)))]
    for g in range(6):
        nodes.append(node(2 + g, 2, 1, lat=CBD_LAT + g * 0.3 * KM_LAT, ram=float(rng.uniform(0.5, 3.0)),
                          comm_range=1.0))
    t = build({"nodes": nodes})
    attach = {d: int(rng.integers(2, 8)) for d in range(25)}
    return t, attach


@pytest.mark.parametrize("seed", range(20))
def test_smp_keeps_more_instances_at_the_edge(seed):
    t, attach = tight_fog(seed)
    app = chm_app()
    with_c = smp_place(t, app, attach, clusters_of(t).members)
    without = smp_place(t, app, attach, None)
    edge = edgeward_place(t, app, attach)
    counts = [p.instances_on_tier(t, 2) for p in (with_c, without, edge)]
    assert counts[0] >= counts[1] >= counts[2]
    for plan in (with_c, without, edge):
        for n, used in plan.ram.items():
            assert used <= t[n].ram_total + 1e-9


def test_pinned_module_lands_on_its_tier():
    app = Application("p", [AppModule("C", 0.1, is_client=True), AppModule("A", 1.0), AppModule("DB", 1.0, pin_tier=0)],
                      [AppEdge("C", "A", 1, 1.0, "x"), AppEdge("A", "DB", 1, 1.0, "y")])
    t = build(two_gateway_spec(gw_ram=(8.0, 8.0)))
    for plan in (smp_place(t, app, {0: 2, 1: 3}), edgeward_place(t, app, {0: 2, 1: 3})):
        assert plan.host(0, "DB") == plan.host(1, "DB") == 0
        assert plan.host(0, "A") == 2 and plan.host(1, "A") == 3


def test_migration_updates_service_discovery_at_commit():
    t = build(two_block_spec())
    g3, g4 = t[3].location, t[4].location
    ent = MobileEntity(0, None, 3, MobilityTrace(0, [(0.0, g3), (5_000.0, g4)]))
    sim = Simulation(t, chm_app(), [ent], placement="smp-no-clustering",
                     mobility=MigrationPolicy.NON_HIERARCHICAL, horizon_ms=130_000.0, check_invariants=True,
                     sensor_phase="zero")
    snapshots = []
    sim.kernel.observe(lambda ev: snapshots.append((ev.fire_at, list(sim.sd.candidates("dev0", PRE)))))
    rep = sim.run()
    (mig,) = rep.migrations
    assert mig["route"] == [3, 4]
    done = mig["completion_ms"]
    before = [c for when, c in snapshots if when < done]
    after = [c for when, c in snapshots if when > done]
    assert before and all(c == [3] for c in before)
    assert after and all(c == [4] for c in after)
    assert sim.checks_run["sd"] >= 2
