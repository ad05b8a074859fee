"""Runtime wiring: tuple execution, transfers, mobility-driven migration, energy."""

from __future__ import annotations

import math
import os
from collections import Counter, deque
from dataclasses import dataclass
from typing import Dict, List, Optional

from . import _kernels
from .application import Application, Tuple
from .clustering import AtStart, ClusterManager
from .engine import EventKind, Kernel
from .geo import haversine
from .infrastructure import DEVICE_TIER, Link, Topology
from .metrics import MetricsCollector, MetricsReport
from .microservices import (PlacementPlan, RoundRobinLoadBalancer, ServiceUnavailable, compute_routes, device_key,
                            edgeward_place, generate_sd, is_device, smp_place, update_service_discovery)
from .mobility import (DEFAULT_MAX_DISTANCE_KM, MigrationPolicy, MobileEntity, manage_mobility, migration_route)

PLACEMENT_POLICIES = ("edgeward", "smp-no-clustering", "smp-clustering")


class InvariantViolation(AssertionError):
    pass


def invariants_from_env() -> bool:
    return os.environ.get("FOGSIM_CHECK_INVARIANTS", "0") not in ("", "0", "false", "False")


@dataclass
class DeviceSpec:
    mips: float = 500.0
    ram: float = 1.0
    uplink: float = 100.0
    downlink: float = 200.0
    busy_power: float = 60.0
    idle_power: float = 35.0


class Host:
    """A FIFO executor with ``pes`` parallel servers (a fog node or a device)."""

    __slots__ = ("key", "tier", "mips", "pes", "busy_power", "idle_power", "uplink", "downlink",
                 "queue", "busy", "cpu_busy_ms", "tx_busy_ms", "offered_mi", "executed")

    def __init__(self, key, tier, mips, pes, busy_power, idle_power, uplink, downlink):
        self.key = key
        self.tier = tier
        self.mips = mips
        self.pes = pes
        self.busy_power = busy_power
        self.idle_power = idle_power
        self.uplink = uplink
        self.downlink = downlink
        self.queue = deque()
        self.busy = 0
        self.cpu_busy_ms = 0.0
        self.tx_busy_ms = 0.0
        self.offered_mi = 0.0
        self.executed = 0


class _Migration:
    __slots__ = ("entity", "modules", "old", "new", "host", "route", "payload_mb", "ram", "record")

    def __init__(self, entity, modules, old, new, host, route, payload_mb, ram, record):
        self.entity = entity
        self.modules = modules
        self.old = old
        self.new = new
        self.host = host
        self.route = route
        self.payload_mb = payload_mb
        self.ram = ram
        self.record = record


class Simulation:
    def __init__(self, topo: Topology, app: Application, entities: List[MobileEntity],
                 device_spec: Optional[DeviceSpec] = None, placement: str = "smp-clustering",
                 mobility: Optional[MigrationPolicy] = None, clusters: Optional[ClusterManager] = None,
                 cluster_criteria=(), horizon_ms: float = 500_000.0, seed: int = 0,
                 check_invariants: Optional[bool] = None, max_distance_km: float = DEFAULT_MAX_DISTANCE_KM,
                 reuse_instances: bool = False, sensor_phase: str = "random"):
        if placement not in PLACEMENT_POLICIES:
            raise ValueError(f"unknown placement policy {placement!r}")
        self.topo = topo
        self.app = app
        self.entities = {m.id: m for m in entities}
        self.device_spec = device_spec or DeviceSpec()
        self.placement_policy = placement
        self.mobility = mobility
        self.clusters = clusters
        self.cluster_criteria = list(cluster_criteria)
        self.horizon = float(horizon_ms)
        self.check = invariants_from_env() if check_invariants is None else bool(check_invariants)
        self.max_distance_km = max_distance_km
        self.reuse_instances = reuse_instances
        self.sensor_phase = sensor_phase
        self.kernel = Kernel(seed, check_order=self.check)
        self.metrics = MetricsCollector()
        self.hosts: Dict[object, Host] = {}
        self.free_at: Dict[tuple, float] = {}
        self._links: Dict[tuple, Link] = {}
        self.inflight: Dict[int, _Migration] = {}
        self.reeval: set = set()
        self.plan: Optional[PlacementPlan] = None
        self.module_count: Dict[object, Dict[str, int]] = {}
        self.clients = set(app.client_modules())
        self.migratable = [m.name for m in app.modules if not m.is_client and m.pin_tier is None]
        self.loops = list(app.loops)
        self._outputs_cache: Dict[tuple, list] = {}
        self._has_selectivity = {s.module for s in app.selectivities}
        self._ran = False
        self.checks_run: Counter = Counter()  # invariant name -> times evaluated
        self.emitted: Counter = Counter()  # (source, dest) -> tuples emitted on that edge
        self.executed: Counter = Counter()  # module -> completed executions

    # ------------------------------------------------------------------ setup
    def setup(self) -> None:
        topo, k = self.topo, self.kernel
        for n in topo.nodes.values():
            self.hosts[n.id] = Host(n.id, n.tier, n.mips, n.pes, n.busy_power, n.idle_power, n.uplink_bw, n.downlink_bw)
            k.register(n.id, self._dispatch)
        ds = self.device_spec
        for i in sorted(self.entities):
            key = device_key(i)
            self.hosts[key] = Host(key, DEVICE_TIER, ds.mips, 1, ds.busy_power, ds.idle_power, ds.uplink, ds.downlink)
            k.register(key, self._dispatch)
        k.register("migration", self._dispatch)

        topo.mesh_enabled = self.mobility is MigrationPolicy.NON_HIERARCHICAL
        if self.clusters is not None:
            self.clusters.on_probe = lambda a, b, mb: self.metrics.record_transfer(a, b, mb, "clustering")
            self.clusters.listeners.append(self._clusters_changed)
            rest = [c for c in self.cluster_criteria if not isinstance(c, AtStart)]
            if len(rest) != len(self.cluster_criteria):
                self.clusters.run(0.0)
            from .clustering import trigger_clustering
            trigger_clustering(k, self.clusters, rest)
        else:
            topo.cluster_links_enabled = False
            for n in topo.nodes.values():
                n.cluster_members = []
                n.cm_latency = {}
        self.routes = compute_routes(topo)

        # initial attachment
        for m in self.entities.values():
            loc = m.trace.location_at(0.0)
            ids, lats, lons = topo.tier_coords(m.tier - 1)
            i, d = _kernels.nearest_index(loc.latitude, loc.longitude, lats, lons)
            m.current_parent = ids[i]
            m.unreachable = d > self.max_distance_km

        attach = {i: m.current_parent for i, m in self.entities.items()}
        if self.placement_policy == "edgeward":
            plan = edgeward_place(topo, self.app, attach)
        else:
            members = None
            if self.placement_policy == "smp-clustering" and self.clusters is not None:
                members = self.clusters.members
            plan = smp_place(topo, self.app, attach, members, reuse_instances=self.reuse_instances,
                             policy_name=self.placement_policy)
        for node, ram in sorted(plan.ram.items()):
            topo.allocate(node, ram)
        self.plan = plan
        self.sd = plan.sd
        self.lb = RoundRobinLoadBalancer()
        for (dev, mod), node in plan.assignments.items():
            self._count(node, mod, +1)
        for m in self.entities.values():
            m.hosted_modules = {mod for mod in self.migratable if plan.host(m.id, mod) == m.current_parent}
        if self.check:
            self._check_ram()
            self._check_sd()

        # sensors
        rng = k.rng("sensors")
        for i in sorted(self.entities):
            for e in self.app.sensor_edges():
                phase = float(rng.uniform(0.0, e.period_ms)) if self.sensor_phase == "random" else 0.0
                k.at(phase, device_key(i), EventKind.TUPLE_ARRIVAL, ("sensor", e))
        # location changes
        if self.mobility is not None:
            for i in sorted(self.entities):
                for t, _ in self.entities[i].trace.samples:
                    if 0.0 < t <= self.horizon:
                        k.at(t, device_key(i), EventKind.LOCATION_CHANGED, t)

    def _clusters_changed(self, now: float) -> None:
        self._links.clear()
        self.routes = compute_routes(self.topo)

    def _count(self, node, mod, delta) -> None:
        c = self.module_count.setdefault(node, {})
        c[mod] = c.get(mod, 0) + delta
        if c[mod] <= 0:
            del c[mod]

    def hosts_module(self, node, mod) -> bool:
        return mod in self.module_count.get(node, ())

    # ------------------------------------------------------------------ run
    def run(self) -> MetricsReport:
        if self._ran:
            raise RuntimeError("a Simulation instance runs once")
        self._ran = True
        if not self.hosts:
            self.setup()
        self.kernel.run_until(self.horizon)
        return self.finalize()

    def _dispatch(self, ev) -> None:
        kind = ev.kind
        if kind is EventKind.TRANSFER_COMPLETE or kind is EventKind.MIGRATION_STEP:
            self._hop_done(ev.payload)
        elif kind is EventKind.TUPLE_EXECUTED:
            self._executed(ev.target, ev.payload)
        elif kind is EventKind.TUPLE_ARRIVAL:
            p = ev.payload
            if isinstance(p, tuple):
                self._sensor(ev.target, p[1])
            else:
                self._arrive(ev.target, p)
        elif kind is EventKind.LOCATION_CHANGED:
            self.metrics.count("location_events")
            self._location(ev.target)
        else:
            raise ValueError(f"unexpected event kind {kind}")

    # ------------------------------------------------------------------ tuples
    def _sensor(self, dev_key, edge) -> None:
        k = self.kernel
        nxt = k.now + edge.period_ms
        if nxt <= self.horizon:
            k.at(nxt, dev_key, EventKind.TUPLE_ARRIVAL, ("sensor", edge))
        i = int(dev_key[3:])
        tup = Tuple(edge.tuple_type, edge.source, edge.dest, edge.cpu_length, edge.nw_length, k.now, i)
        self.metrics.count("sensor_tuples")
        self.emitted[(edge.source, edge.dest)] += 1
        if edge.dest in self.clients:
            self._arrive(dev_key, tup)
        else:
            self._route_out(dev_key, tup)

    def _arrive(self, hkey, tup: Tuple) -> None:
        mod = tup.dst_module
        if is_device(hkey):
            if mod not in self.clients or hkey != device_key(tup.origin_entity):
                self.metrics.fault("routing")
                return
        elif not self.hosts_module(hkey, mod):
            right = self.plan.assignments.get((tup.origin_entity, mod))
            if right is not None and right != hkey and self.hosts_module(right, mod):
                self.metrics.count("forwarded_tuples")
                self._send(hkey, right, tup)
            else:
                self.metrics.fault("routing")
            return
        h = self.hosts[hkey]
        h.offered_mi += tup.cpu_length
        h.queue.append(tup)
        self._start(h)

    def _start(self, h: Host) -> None:
        k = self.kernel
        while h.busy < h.pes and h.queue:
            tup = h.queue.popleft()
            h.busy += 1
            service = tup.cpu_length / h.mips * 1000.0
            end = k.now + service
            h.cpu_busy_ms += max(0.0, min(end, self.horizon) - min(k.now, self.horizon))
            k.at(end, h.key, EventKind.TUPLE_EXECUTED, tup)

    def _executed(self, hkey, tup: Tuple) -> None:
        h = self.hosts[hkey]
        h.busy -= 1
        h.executed += 1
        now = self.kernel.now
        mod = tup.dst_module
        self.executed[mod] += 1
        for idx, (start, pos) in tup.loops.items():
            loop = self.loops[idx]
            if pos == len(loop.modules) - 1:
                self.metrics.record_loop(loop.name, start, now)
        for edge, ratio in self._outputs(mod, tup.tuple_type):
            n = 1
            if ratio != 1.0:
                whole = math.floor(ratio)
                n = int(whole) + int(self.kernel.rng("selectivity").random() < ratio - whole)
            for _ in range(n):
                loops = {}
                for idx, (start, pos) in tup.loops.items():
                    lm = self.loops[idx].modules
                    if pos < len(lm) - 1 and lm[pos + 1] == edge.dest:
                        loops[idx] = (start, pos + 1)
                for idx, lp in enumerate(self.loops):
                    if idx not in loops and lp.modules[0] == mod and lp.modules[1] == edge.dest:
                        loops[idx] = (now, 1)
                self.emitted[(mod, edge.dest)] += 1
                out = Tuple(edge.tuple_type, mod, edge.dest, edge.cpu_length, edge.nw_length, now,
                            tup.origin_entity, loops=loops)
                self._route_out(hkey, out)
        self._start(h)

    def _outputs(self, mod, in_type) -> list:
        key = (mod, in_type)
        got = self._outputs_cache.get(key)
        if got is None:
            edges = [e for e in self.app.out_edges(mod) if not e.periodic]
            if mod in self._has_selectivity:
                got = []
                for s in self.app.selectivities:
                    if s.module == mod and s.input_type == in_type:
                        got.extend((e, s.ratio) for e in edges if e.tuple_type == s.output_type)
            else:
                got = [(e, 1.0) for e in edges]
            self._outputs_cache[key] = got
        return got

    def _route_out(self, src, tup: Tuple) -> None:
        dest = tup.dst_module
        if dest in self.clients:
            dst = device_key(tup.origin_entity)
        else:
            try:
                dst = self.lb.select(src, dest, self.sd)
            except ServiceUnavailable:
                self.metrics.fault("service_unavailable")
                return
        tup.dst_node = dst
        self._send(src, dst, tup)

    # ------------------------------------------------------------------ network
    def _parent_of(self, key):
        return self.entities[int(key[3:])].current_parent

    def _path(self, src, dst) -> list:
        if src == dst:
            return [src]
        head = [src] if is_device(src) else []
        tail = [dst] if is_device(dst) else []
        a = self._parent_of(src) if head else src
        b = self._parent_of(dst) if tail else dst
        return head + self.routes.path(a, b) + tail

    def link(self, a, b) -> Link:
        key = (a, b)
        got = self._links.get(key)
        if got is None:
            if is_device(a):
                got = Link(min(self.hosts[a].uplink, self.hosts[b].downlink), self.topo.device_latency, "device")
            elif is_device(b):
                got = Link(min(self.hosts[a].uplink, self.hosts[b].downlink), self.topo.device_latency, "device")
            else:
                got = self.topo.link(a, b)
            self._links[key] = got
        return got

    def _send(self, src, dst, tup: Tuple) -> None:
        path = self._path(src, dst)
        if len(path) == 1:
            self._arrive(dst, tup)
            return
        self._hop(path, 0, tup, tup.nw_length, "app", EventKind.TRANSFER_COMPLETE)

    def _hop(self, path, i, item, mb, category, kind) -> None:
        a, b = path[i], path[i + 1]
        ln = self.link(a, b)
        now = self.kernel.now
        start = max(now, self.free_at.get((a, b), 0.0))
        tx = mb * 8.0 / ln.bandwidth * 1000.0
        self.free_at[(a, b)] = start + tx
        sender = self.hosts[a]
        sender.tx_busy_ms += max(0.0, min(start + tx, self.horizon) - min(start, self.horizon))
        if mb > 0:
            self.metrics.record_transfer(a, b, mb, category)
            if category == "migration":
                self.metrics.migration_energy += tx / 1000.0 * (sender.busy_power - sender.idle_power) / sender.pes
        target = "migration" if kind is EventKind.MIGRATION_STEP else b
        self.kernel.at(start + tx + ln.latency, target, kind, (path, i + 1, item))

    def _hop_done(self, payload) -> None:
        path, i, item = payload
        if isinstance(item, _Migration):
            if i == len(path) - 1:
                self._commit(item)
            else:
                self._hop(path, i, item, item.payload_mb, "migration", EventKind.MIGRATION_STEP)
        elif i == len(path) - 1:
            self._arrive(path[i], item)
        else:
            self._hop(path, i, item, item.nw_length, "app", EventKind.TRANSFER_COMPLETE)

    # ------------------------------------------------------------------ mobility
    def _same_cluster(self, a, b) -> bool:
        return self.clusters is not None and self.clusters.in_same_cluster(a, b)

    def _location(self, dev_key) -> None:
        i = int(dev_key[3:])
        if i in self.inflight:
            self.reeval.add(i)
            return
        self._evaluate(i)

    def _evaluate(self, i: int) -> None:
        m = self.entities[i]
        now = self.kernel.now
        topo = self.topo
        mb = {name: self.app.module(name).migration_mb for name in self.migratable}
        decision = manage_mobility(m, now, topo, self._same_cluster, self.mobility, mb, self.max_distance_km)
        if decision is None:
            if self.check:
                self._check_parent(m)
            return
        old, new = decision.old_parent, decision.new_parent
        lam = [mod for mod in self.migratable if self.plan.assignments.get((i, mod)) == old]
        if not lam:
            m.current_parent = new
            m.hosted_modules = set()
            self.metrics.count("reattachments")
            if self.check:
                self._check_parent(m)
            return
        ram = sum(self.app.module(mod).ram for mod in lam)
        host = next((n for n in topo.path_to_root(new) if topo[n].ram_free + 1e-9 >= ram), None)
        if host is None:
            self.metrics.fault("migration_capacity")
            return
        topo.allocate(host, ram)
        if host == new:
            route = decision.route
        else:
            pol = self.mobility if self.mobility is MigrationPolicy.CLOUD_CENTRIC else MigrationPolicy.INTRA_INTER_CLUSTER
            route = migration_route(topo, old, host, pol, None)
        payload = sum(self.app.module(mod).migration_mb for mod in lam)
        record = {"entity": i, "trigger_ms": now, "completion_ms": None, "route": list(route),
                  "policy": self.mobility.value, "modules": list(lam), "payload_mb": payload,
                  "old_parent": old, "new_parent": new, "host": host}
        self.metrics.migrations.append(record)
        mig = _Migration(i, lam, old, new, host, route, payload, ram, record)
        self.inflight[i] = mig
        if len(route) == 1:
            self._commit(mig)
        else:
            self._hop(route, 0, mig, payload, "migration", EventKind.MIGRATION_STEP)

    def _commit(self, mig: _Migration) -> None:
        now = self.kernel.now
        i = mig.entity
        m = self.entities[i]
        m.current_parent = mig.new
        for mod in mig.modules:
            self.plan.assignments[(i, mod)] = mig.host
            self._count(mig.old, mod, -1)
            self._count(mig.host, mod, +1)
        self.topo.release(mig.old, mig.ram)
        self._refresh_plan_ram(mig)
        m.hosted_modules = {mod for mod in mig.modules if mig.host == mig.new}
        # service discovery diff
        fresh = generate_sd(self.app, self.plan.assignments)
        old_entries = set(self.sd.entries())
        new_entries = set(fresh.entries())
        for node, mod, tgt in sorted(old_entries - new_entries, key=str):
            update_service_discovery(self.sd, node, mod, False, tgt, self.lb)
            self.metrics.count("sd_updates")
        for node, mod, tgt in sorted(new_entries - old_entries, key=str):
            update_service_discovery(self.sd, node, mod, True, tgt, self.lb)
            self.metrics.count("sd_updates")
        # queued work for the moved modules follows them
        oldh = self.hosts[mig.old]
        keep, move = deque(), []
        for tup in oldh.queue:
            (move if tup.origin_entity == i and tup.dst_module in mig.modules else keep).append(tup)
        oldh.queue = keep
        for tup in move:
            self.metrics.count("forwarded_tuples")
            self._send(mig.old, mig.host, tup)
        mig.record["completion_ms"] = now
        del self.inflight[i]
        if self.check:
            self._check_exclusive()
            self._check_ram()
            self._check_sd()
        if i in self.reeval:
            self.reeval.discard(i)
            self._evaluate(i)
        elif self.check:
            self._check_parent(m)

    def _refresh_plan_ram(self, mig: _Migration) -> None:
        r = self.plan.ram
        r[mig.old] = r.get(mig.old, 0.0) - mig.ram
        if r[mig.old] <= 1e-9:
            del r[mig.old]
        r[mig.host] = r.get(mig.host, 0.0) + mig.ram

    # ------------------------------------------------------------------ invariants
    def _check_parent(self, m: MobileEntity) -> None:
        self.checks_run["parent"] += 1
        if m.unreachable or m.id in self.inflight:
            return
        loc = m.trace.location_at(self.kernel.now)
        ids, lats, lons = self.topo.tier_coords(m.tier - 1)
        d = _kernels.haversine_to_many(loc.latitude, loc.longitude, lats, lons)
        mine = haversine(loc, self.topo[m.current_parent].location)
        if mine > float(d.min()) + 1e-9:
            raise InvariantViolation(f"entity {m.id} attached to {m.current_parent} at {mine:.6f} km; "
                                     f"nearest candidate is {float(d.min()):.6f} km")

    def _check_ram(self) -> None:
        self.checks_run["ram"] += 1
        used: Dict[int, float] = {}
        for (dev, mod), node in self.plan.assignments.items():
            if not is_device(node):
                used[node] = used.get(node, 0.0)
        for node, ram in self.plan.ram.items():
            used[node] = ram
        for node, n in self.topo.nodes.items():
            u = used.get(node, 0.0) + sum(mg.ram for mg in self.inflight.values() if mg.host == node)
            if u > n.ram_total + 1e-6:
                raise InvariantViolation(f"node {node} holds {u} GB of {n.ram_total} GB")
            if abs(n.ram_free + u - n.ram_total) > 1e-6:
                raise InvariantViolation(f"node {node}: ram_free {n.ram_free} + used {u} != total {n.ram_total}")

    def _check_exclusive(self) -> None:
        self.checks_run["exclusive"] += 1
        for i in self.entities:
            for mod in self.app.module_map:
                node = self.plan.assignments.get((i, mod))
                if node is None or not self.hosts_module(node, mod):
                    raise InvariantViolation(f"module {mod} of entity {i} is not active on exactly one node")

    def _check_sd(self) -> None:
        self.checks_run["sd"] += 1
        for node, mod, tgt in self.sd.entries():
            if not self.hosts_module(tgt, mod):
                raise InvariantViolation(f"service discovery at {node} lists {tgt} for {mod}, which does not host it")

    # ------------------------------------------------------------------ report
    def finalize(self) -> MetricsReport:
        T = self.horizon
        met = self.metrics
        saturated = []
        for key, h in self.hosts.items():
            u = min(1.0, (h.cpu_busy_ms + h.tx_busy_ms) / (h.pes * T))
            e = met.accrue_energy(key, 0.0, T, u, h.idle_power, h.busy_power, h.tier)
            if self.check:
                self.checks_run["energy"] += 1
                lo, hi = h.idle_power * T / 1000.0, h.busy_power * T / 1000.0
                if not (lo - 1e-6 * max(lo, 1.0) <= e <= hi + 1e-6 * max(hi, 1.0)):
                    raise InvariantViolation(f"energy of {key} = {e} outside [{lo}, {hi}]")
            if h.offered_mi / (h.mips * h.pes) * 1000.0 > T:
                saturated.append(str(key))
        topo = self.topo
        tiers = {}
        for (dev, mod), node in self.plan.assignments.items():
            t = DEVICE_TIER if is_device(node) else topo[node].tier
            tiers[str(t)] = tiers.get(str(t), 0) + 1
        extra = {
            "placement_policy": self.placement_policy,
            "mobility_policy": self.mobility.value if self.mobility else "none",
            "instances_per_tier": tiers,
            "saturated_nodes": sorted(saturated),
            "cluster_rounds": self.clusters.rounds if self.clusters else 0,
            "events_dispatched": self.kernel.dispatched,
            "tuples_executed": sum(h.executed for h in self.hosts.values()),
            "unreachable_entities": sorted(i for i, m in self.entities.items() if m.unreachable),
            "link_defaults_ms": {"gateway_proxy": 2.0, "proxy_cloud": 100.0, "device_gateway": topo.device_latency},
        }
        return met.finalize(T, extra, entities=len(self.entities))
