"""Service discovery, round-robin balancing, shortest-path routing and placement."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import _kernels
from .application import Application, next_eligible_microservice
from .infrastructure import CLOUD_TIER, GATEWAY_TIER, CapacityError, Topology, TopologyError

RAM_EPS = 1e-9


def device_key(i: int) -> str:
    return f"dev{i}"


def is_device(key) -> bool:
    return isinstance(key, str) and key.startswith("dev")


def device_index(key: str) -> int:
    return int(key[3:])


class ServiceUnavailable(LookupError):
    pass


class RoutingError(TopologyError):
    pass


# ---------------------------------------------------------------------------
# service discovery and load balancing
# ---------------------------------------------------------------------------

class ServiceDiscovery:
    """Per-node map from microservice name to the sorted nodes hosting it."""

    def __init__(self, entries: Optional[Dict] = None):
        self.table: Dict[object, Dict[str, List]] = {}
        for node, mods in (entries or {}).items():
            for mod, targets in mods.items():
                for t in targets:
                    self.add(node, mod, t)

    def candidates(self, node, module: str) -> List:
        return self.table.get(node, {}).get(module, [])

    def add(self, node, module: str, target) -> None:
        lst = self.table.setdefault(node, {}).setdefault(module, [])
        if target not in lst:
            lst.append(target)
            lst.sort(key=_sort_key)

    def remove(self, node, module: str, target) -> bool:
        lst = self.table.get(node, {}).get(module)
        if not lst or target not in lst:
            warnings.warn(f"service discovery at {node}: no entry {module} -> {target} to remove")
            return False
        lst.remove(target)
        if not lst:
            del self.table[node][module]
            if not self.table[node]:
                del self.table[node]
        return True

    def entries(self) -> List[Tuple]:
        return sorted(((n, m, t) for n, mods in self.table.items() for m, ts in mods.items() for t in ts),
                      key=lambda e: (_sort_key(e[0]), e[1], _sort_key(e[2])))

    def to_dict(self) -> dict:
        return {str(n): {m: [str(t) if is_device(t) else t for t in ts] for m, ts in sorted(mods.items())}
                for n, mods in sorted(self.table.items(), key=lambda kv: _sort_key(kv[0]))}


def _sort_key(k):
    return (1, device_index(k)) if is_device(k) else (0, k)


class RoundRobinLoadBalancer:
    def __init__(self):
        self.cursors: Dict[Tuple, int] = {}

    def select(self, node, module: str, sd: ServiceDiscovery):
        cands = sd.candidates(node, module)
        if not cands:
            raise ServiceUnavailable(f"no instance of {module} visible from {node}")
        key = (node, module)
        c = self.cursors.get(key, 0)
        if c >= len(cands):
            c = 0
        self.cursors[key] = (c + 1) % len(cands)
        return cands[c]


def select_destination(src_node, module: str, sd: ServiceDiscovery, lb: RoundRobinLoadBalancer):
    return lb.select(src_node, module, sd)


def update_service_discovery(sd: ServiceDiscovery, node, module: str, add: bool, target,
                             lb: Optional[RoundRobinLoadBalancer] = None) -> bool:
    if add:
        sd.add(node, module, target)
        ok = True
    else:
        ok = sd.remove(node, module, target)
    if lb is not None:
        key = (node, module)
        n = len(sd.candidates(node, module))
        if key in lb.cursors and lb.cursors[key] >= max(n, 1):
            lb.cursors[key] = 0
    return ok


# ---------------------------------------------------------------------------
# routing
# ---------------------------------------------------------------------------

class RoutingTable:
    def __init__(self, ids: List[int], dist: np.ndarray, nxt: np.ndarray):
        self.ids = ids
        self.index = {n: i for i, n in enumerate(ids)}
        self.dist = dist
        self.nxt = nxt

    def next_hop(self, src: int, dst: int) -> int:
        h = self.nxt[self.index[src], self.index[dst]]
        if h < 0:
            raise RoutingError(f"no route from {src} to {dst}")
        return self.ids[h]

    def cost(self, src: int, dst: int) -> float:
        return float(self.dist[self.index[src], self.index[dst]])

    def path(self, src: int, dst: int) -> List[int]:
        out = [src]
        seen = {src}
        while out[-1] != dst:
            h = self.next_hop(out[-1], dst)
            if h in seen:
                raise RoutingError(f"routing loop between {src} and {dst}")
            seen.add(h)
            out.append(h)
        return out


def link_weights(topo: Topology, use_mesh: bool = False) -> Tuple[List[int], np.ndarray]:
    ids = list(topo.nodes)
    idx = {n: i for i, n in enumerate(ids)}
    w = np.full((len(ids), len(ids)), np.inf)
    saved = topo.mesh_enabled
    topo.mesh_enabled = use_mesh and saved
    try:
        for a in ids:
            for b in topo.neighbours(a):
                w[idx[a], idx[b]] = topo.link(a, b).latency
    finally:
        topo.mesh_enabled = saved
    np.fill_diagonal(w, 0.0)
    return ids, w


def compute_routes(topo: Topology, use_mesh: bool = False, require_connected: bool = True) -> RoutingTable:
    """All-pairs minimum-latency next hops; ties go to the smallest node id path."""
    ids, w = link_weights(topo, use_mesh)
    dist = _kernels.floyd_warshall(w)
    if require_connected and not np.isfinite(dist).all():
        i, j = np.argwhere(~np.isfinite(dist))[0]
        raise RoutingError(f"node {ids[j]} unreachable from {ids[i]}")
    nxt = _kernels.next_hops(w, dist, 1e-9)
    return RoutingTable(ids, dist, nxt)


# ---------------------------------------------------------------------------
# placement
# ---------------------------------------------------------------------------

@dataclass
class PlacementPlan:
    """Per-path module assignment. Keys are (device index, module name)."""

    assignments: Dict[Tuple[int, str], object] = field(default_factory=dict)
    ram: Dict[int, float] = field(default_factory=dict)  # GB charged per node
    policy: str = ""
    sd: ServiceDiscovery = field(default_factory=ServiceDiscovery)

    def host(self, device: int, module: str):
        return self.assignments.get((device, module))

    def node_instances(self) -> Dict[object, Dict[str, List[int]]]:
        out: Dict[object, Dict[str, List[int]]] = {}
        for (dev, mod), node in sorted(self.assignments.items(), key=lambda kv: (kv[0][0], kv[0][1])):
            out.setdefault(node, {}).setdefault(mod, []).append(dev)
        return out

    def hosts_module(self, node, module: str) -> bool:
        return any(n == node and m == module for (_, m), n in self.assignments.items())

    def instances_on_tier(self, topo: Topology, tier: int) -> int:
        """Per-path instance records that sit on nodes of ``tier``."""
        return sum(1 for n in self.assignments.values() if not is_device(n) and topo[n].tier == tier)

    def nodes_hosting(self, module: str) -> List:
        return sorted({n for (_, m), n in self.assignments.items() if m == module}, key=_sort_key)

    def to_dict(self) -> dict:
        inst = {}
        for node, mods in sorted(self.node_instances().items(), key=lambda kv: _sort_key(kv[0])):
            inst[str(node)] = {m: devs for m, devs in sorted(mods.items())}
        return {
            "policy": self.policy,
            "instances": inst,
            "ram_gb": {str(n): round(v, 9) for n, v in sorted(self.ram.items())},
            "service_discovery": self.sd.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def generate_sd(app: Application, assignments: Dict[Tuple[int, str], object]) -> ServiceDiscovery:
    """At each node hosting a consumer, list the hosts of what it consumes for the same path."""
    sd = ServiceDiscovery()
    clients = set(app.client_modules())
    for (dev, mod), node in assignments.items():
        if mod in clients:
            continue
        for consumer in app.consumers_of(mod):
            src = assignments.get((dev, consumer))
            if src is not None:
                sd.add(src, mod, node)
    return sd


def _module_order(app: Application) -> List[str]:
    order, placed = [], set()
    while True:
        m = next_eligible_microservice(app, placed)
        if m is None:
            return order
        order.append(m)
        placed.add(m)


class _Ram:
    def __init__(self, topo: Topology, free: Optional[Dict[int, float]] = None):
        self.free = dict(free) if free is not None else {i: n.ram_free for i, n in topo.nodes.items()}
        self.used: Dict[int, float] = {}

    def fits(self, node: int, ram: float) -> bool:
        return self.free[node] + RAM_EPS >= ram

    def take(self, node: int, ram: float) -> None:
        self.free[node] -= ram
        self.used[node] = self.used.get(node, 0.0) + ram

    def give(self, node: int, ram: float) -> None:
        self.free[node] += ram
        self.used[node] = self.used.get(node, 0.0) - ram
        if self.used[node] <= RAM_EPS:
            del self.used[node]


def _leaf_paths(topo: Topology, attach: Dict[int, int]) -> List[Tuple[int, List[int]]]:
    return [(dev, topo.path_to_root(gw)) for dev, gw in sorted(attach.items())]


def _pinned_node(topo: Topology, path: List[int], tier: int, ram: _Ram, mod: str, need: float) -> int:
    for n in path:
        if topo[n].tier == tier:
            if not ram.fits(n, need):
                raise CapacityError(f"microservice {mod}: pinned tier-{tier} node {n} is full")
            return n
    raise CapacityError(f"microservice {mod}: no tier-{tier} node on path {path}")


def smp_place(topo: Topology, app: Application, attach: Dict[int, int],
              cluster_members: Optional[Callable[[int], List[int]]] = None,
              reuse_instances: bool = False, ram_free: Optional[Dict[int, float]] = None,
              policy_name: Optional[str] = None) -> PlacementPlan:
    """Microservice-by-microservice placement over every device-to-cloud path.

    A path's cursor starts at the device's gateway. When the cursor node is
    short of RAM the cursor node's cluster members are tried in ascending id
    order, then the cursor climbs towards the cloud. ``cluster_members=None``
    disables the member step.
    """
    ram = _Ram(topo, ram_free)
    paths = _leaf_paths(topo, attach)
    cursor = {dev: 0 for dev, _ in paths}
    assign: Dict[Tuple[int, str], object] = {}
    clients = set(app.client_modules())
    for mod in _module_order(app):
        spec = app.module(mod)
        if mod in clients:
            for dev, _ in paths:
                assign[(dev, mod)] = device_key(dev)
            continue
        if spec.pin_tier is not None:
            for dev, path in paths:
                n = _pinned_node(topo, path, spec.pin_tier, ram, mod, spec.ram)
                if not (reuse_instances and any(v == n for (d, m), v in assign.items() if m == mod)):
                    ram.take(n, spec.ram)
                assign[(dev, mod)] = n
            continue
        not_placed = []
        for dev, path in paths:
            f = path[cursor[dev]]
            if reuse_instances and any(v == f for (d, m), v in assign.items() if m == mod):
                assign[(dev, mod)] = f
            elif ram.fits(f, spec.ram):
                ram.take(f, spec.ram)
                assign[(dev, mod)] = f
            else:
                not_placed.append((dev, path))
        for dev, path in not_placed:
            f = path[cursor[dev]]
            placed = False
            if cluster_members is not None:
                for cm in sorted(cluster_members(f)):
                    if ram.fits(cm, spec.ram):
                        ram.take(cm, spec.ram)
                        assign[(dev, mod)] = cm
                        placed = True
                        break
            while not placed:
                if cursor[dev] + 1 >= len(path):
                    raise CapacityError(f"microservice {mod} cannot be placed for device {dev}: "
                                        f"no capacity up to node {path[-1]}")
                cursor[dev] += 1
                f = path[cursor[dev]]
                if ram.fits(f, spec.ram):
                    ram.take(f, spec.ram)
                    assign[(dev, mod)] = f
                    placed = True
    name = policy_name or ("smp-clustering" if cluster_members is not None else "smp-no-clustering")
    return PlacementPlan(assign, dict(ram.used), name, generate_sd(app, assign))


def edgeward_place(topo: Topology, app: Application, attach: Dict[int, int],
                   ram_free: Optional[Dict[int, float]] = None) -> PlacementPlan:
    """Path-by-path upward placement with one shared, vertically scaled instance per node.

    When a node cannot take another share of an existing instance, the whole
    instance (with the new path) moves to the parent; later paths through the
    same node follow it there.
    """
    ram = _Ram(topo, ram_free)
    assign: Dict[Tuple[int, str], object] = {}
    clients = set(app.client_modules())
    # (node, module) -> devices sharing the instance
    shares: Dict[Tuple[int, str], List[int]] = {}
    floor: Dict[Tuple[int, str], int] = {}  # node, module -> node the instance was pushed to
    order = _module_order(app)

    def settle(path, mod, i):
        while (path[i], mod) in floor:
            i = path.index(floor[(path[i], mod)])
        return i

    def put(node, mod, devs, need_each):
        ram.take(node, need_each * len(devs))
        shares.setdefault((node, mod), []).extend(devs)
        for d in devs:
            assign[(d, mod)] = node

    for dev, path in _leaf_paths(topo, attach):
        lowest = 0  # index on path; successors never sit below predecessors
        for mod in order:
            spec = app.module(mod)
            if mod in clients:
                assign[(dev, mod)] = device_key(dev)
                continue
            if spec.pin_tier is not None:
                n = _pinned_node(topo, path, spec.pin_tier, ram, mod, spec.ram)
                put(n, mod, [dev], spec.ram)
                continue
            i = settle(path, mod, lowest)
            placed = False
            while not placed:
                f = path[i]
                if ram.fits(f, spec.ram):
                    put(f, mod, [dev], spec.ram)
                    placed = True
                elif (f, mod) in shares and i + 1 < len(path):
                    # push the whole instance north together with this path
                    moving = shares.pop((f, mod))
                    ram.give(f, spec.ram * len(moving))
                    floor[(f, mod)] = path[i + 1]
                    i += 1
                    while not ram.fits(path[i], spec.ram * (len(moving) + 1)):
                        if i + 1 >= len(path):
                            raise CapacityError(f"microservice {mod} cannot be placed for device {dev}: "
                                                f"no capacity up to node {path[-1]}")
                        floor[(path[i], mod)] = path[i + 1]
                        if (path[i], mod) in shares:
                            extra = shares.pop((path[i], mod))
                            ram.give(path[i], spec.ram * len(extra))
                            moving = moving + extra
                        i += 1
                    put(path[i], mod, moving + [dev], spec.ram)
                    placed = True
                else:
                    if i + 1 >= len(path):
                        raise CapacityError(f"microservice {mod} cannot be placed for device {dev}: "
                                            f"no capacity up to node {path[-1]}")
                    i = settle(path, mod, i + 1)
            lowest = max(lowest, path.index(assign[(dev, mod)]))
    return PlacementPlan(assign, dict(ram.used), "edgeward", generate_sd(app, assign))
