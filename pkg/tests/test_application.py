import pytest
from hypothesis import given, settings, strategies as st

from _builders import CBD_LAT, CBD_LON, build, chm_app, still_entity, two_gateway_spec
from fogsim.application import (DOWN, AppEdge, AppLoop, AppModule, Application, ApplicationError, DagCycleError,
                                Selectivity, next_eligible_microservice, validate_dag)
from fogsim.engine import EventKind
from fogsim.scenarios import ats_application, cdc_application, chm_application
from fogsim.simulation import DeviceSpec, Simulation


def chain(names, extra=()):
    mods = [AppModule(n, 1.0, is_client=(n == "C")) for n in names]
    edges = [AppEdge(a, b, 100, 1.0, f"{a}{b}") for a, b in zip(names, names[1:])] + list(extra)
    return Application("t", mods, edges)


@pytest.mark.parametrize("cfg", [ats_application(), chm_application(), cdc_application()])
def test_builtin_apps_are_valid(cfg):
    app = Application.from_config(cfg)
    validate_dag(app)
    assert Application.from_config(app.to_config()).to_config() == app.to_config()


def test_cycle_is_reported_with_its_path():
    app = chain(["C", "A", "B"], [AppEdge("B", "A", 1, 1.0, "back")])
    with pytest.raises(DagCycleError) as err:
        validate_dag(app)
    assert err.value.cycle == ["A", "B"]


def test_down_edges_do_not_form_cycles():
    app = chain(["C", "A"], [AppEdge("A", "C", 1, 1.0, "reply", direction=DOWN)])
    validate_dag(app)


@pytest.mark.parametrize("mutate,msg", [
    (lambda a: a.edges.append(AppEdge("A", "A", 1, 1.0, "self")), "self-edge"),
    (lambda a: a.edges.append(AppEdge("A", "Z", 1, 1.0, "x")), "unknown"),
    (lambda a: a.edges.append(AppEdge("A", "B", 1, 0.0, "x")), "nw_length"),
    (lambda a: a.modules.append(AppModule("A", 1.0)), "duplicate"),
    (lambda a: setattr(a.modules[1], "ram", 0.0), "ram"),
    (lambda a: a.loops.append(AppLoop(["C", "B"])), "loop"),
    (lambda a: a.selectivities.append(Selectivity("A", "x", "y", 0.0)), "selectivity"),
])
def test_malformed_apps_rejected(mutate, msg):
    app = chain(["C", "A", "B"])
    mutate(app)
    with pytest.raises(ApplicationError, match=msg):
        validate_dag(app)


def test_sensor_edges_must_be_periodic():
    app = chain(["C", "A"], [AppEdge("S", "C", 1, 1.0, "s")])
    app.sensors.append("S")
    with pytest.raises(ApplicationError, match="periodic"):
        validate_dag(app)


def test_next_eligible_follows_predecessors():
    app = Application.from_config(chm_application())
    order = []
    placed = {"Client"}
    while (m := next_eligible_microservice(app, placed)) is not None:
        order.append(m)
        placed.add(m)
    assert order == ["Preprocessing", "Emergency Diagnosis", "Prediction"]
    assert next_eligible_microservice(app, {"Client"}) == "Preprocessing"


def kahn_ready(names, edges, placed):
    preds = {n: {a for a, b in edges if b == n} for n in names}
    return [n for n in names if n not in placed and preds[n] <= placed]


@st.composite
def random_dag(draw):
    n = draw(st.integers(2, 8))
    names = [f"m{i}" for i in range(n)]
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=len(pairs))) if pairs else []
    perm = draw(st.permutations(names))  # declaration order differs from topological order
    edges = [(names[i], names[j]) for i, j in chosen]
    return perm, edges


@settings(max_examples=200, deadline=None)
@given(random_dag(), st.data())
def test_next_eligible_matches_kahn_oracle(dag, data):
    names, edges = dag
    app = Application("r", [AppModule(n, 1.0) for n in names], [AppEdge(a, b, 1, 1.0, a + b) for a, b in edges])
    validate_dag(app)
    placed = set(data.draw(st.lists(st.sampled_from(names), unique=True)))
    ready = kahn_ready(names, edges, placed)
    assert next_eligible_microservice(app, placed) == (ready[0] if ready else None)
    # draining the queue yields a valid topological order
    placed, order = set(), []
    while (m := next_eligible_microservice(app, placed)) is not None:
        order.append(m)
        placed.add(m)
    assert sorted(order) == sorted(names)
    pos = {m: i for i, m in enumerate(order)}
    assert all(pos[a] < pos[b] for a, b in edges)


# ------------------------------------------------------------------ execution on a host

def device_only_app(lengths):
    """One client module fed by one sensor edge per CPU length; no other modules."""
    edges = [AppEdge(f"S{k}", "C", mi, 0.1, f"t{k}", period_ms=1e9) for k, mi in enumerate(lengths)]
    return Application("dev", [AppModule("C", 0.1, is_client=True)], edges, sensors=[e.source for e in edges])


def execution_times(lengths, mips):
    topo = build(two_gateway_spec())
    sim = Simulation(topo, device_only_app(lengths), [still_entity(0, CBD_LAT, CBD_LON)],
                     device_spec=DeviceSpec(mips=mips), placement="edgeward", horizon_ms=10_000.0,
                     sensor_phase="zero")
    done = []
    sim.kernel.observe(lambda ev: done.append((ev.fire_at, ev.payload.tuple_type))
                       if ev.kind is EventKind.TUPLE_EXECUTED else None)
    sim.run()
    return done


def test_service_time_is_length_over_mips():
    assert execution_times([1000], 1000) == [(1000.0, "t0")]
    (t, _), = execution_times([1000], 1200)
    assert t == pytest.approx(833.3333333, rel=1e-9)


def test_single_server_is_fifo():
    assert execution_times([1000, 2000], 1000) == [(1000.0, "t0"), (3000.0, "t1")]


def run_chm(placement="edgeward", periods=5, devices=2):
    topo = build(two_gateway_spec(gw_ram=(4.0, 4.0)))
    ents = [still_entity(i, CBD_LAT, CBD_LON) for i in range(devices)]
    period = 60_000.0
    sim = Simulation(topo, chm_app(period), ents, placement=placement,
                     horizon_ms=periods * period + 30_000.0, sensor_phase="zero")
    return sim, sim.run()


@pytest.mark.parametrize("placement", ["edgeward", "smp-no-clustering"])
def test_tuple_conservation_on_a_drained_run(placement):
    sim, rep = run_chm(placement)
    e, x = sim.emitted, sim.executed
    assert e[("ECG", "Client")] == 2 * 6  # emissions at 0, 60, ..., 300 s
    assert x["Preprocessing"] == e[("Client", "Preprocessing")] == e[("ECG", "Client")]
    assert x["Emergency Diagnosis"] == e[("Preprocessing", "Emergency Diagnosis")]
    assert x["Prediction"] == e[("Preprocessing", "Prediction")]
    assert x["Client"] == e[("ECG", "Client")] + e[("Emergency Diagnosis", "Client")] + e[("Prediction", "Client")]
    assert rep.faults == {}


def test_loop_delay_is_at_least_pure_service_time():
    sim, rep = run_chm()
    app = sim.app
    fastest = max(n.mips for n in sim.topo.nodes.values())
    for lp in app.loops:
        stats = rep.loop_delays[lp.name]
        work = sum(next(e.cpu_length for e in app.edges if e.source == a and e.dest == b)
                   for a, b in zip(lp.modules, lp.modules[1:]))
        assert stats["count"] > 0
        assert stats["mean_ms"] >= work / fastest * 1000.0


def test_saturation_is_flagged():
    topo = build(two_gateway_spec())
    app = device_only_app([5000])
    app.edges[0].period_ms = 1000.0  # 5 s of work offered every second
    sim = Simulation(topo, app, [still_entity(0, CBD_LAT, CBD_LON)], device_spec=DeviceSpec(mips=1000),
                     placement="edgeward", horizon_ms=20_000.0, sensor_phase="zero")
    rep = sim.run()
    assert rep.extra["saturated_nodes"] == ["dev0"]
    _, calm = run_chm()
    assert calm.extra["saturated_nodes"] == []
