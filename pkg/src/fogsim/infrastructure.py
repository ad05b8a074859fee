"""Multi-tier node topology: capacities, power, links, geolocation, tree paths."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .geo import Location

log = logging.getLogger(__name__)

CLOUD_TIER = 0
PROXY_TIER = 1
GATEWAY_TIER = 2
DEVICE_TIER = 3

# parent<->child latency in ms keyed by child tier
DEFAULT_TREE_LATENCY = {1: 100.0, 2: 2.0}
DEFAULT_DEVICE_LATENCY = 2.0
DEFAULT_MESH_BANDWIDTH = 100.0
DEFAULT_MESH_LATENCY = 2.0


class TopologyError(ValueError):
    pass


class DuplicateNodeError(TopologyError):
    pass


class OrphanNodeError(TopologyError):
    pass


class ParentCycleError(TopologyError):
    pass


class TierMismatchError(TopologyError):
    pass


class CapacityError(RuntimeError):
    pass


@dataclass
class FogNode:
    id: int
    name: str
    tier: int
    mips: float
    ram_total: float
    uplink_bw: float
    downlink_bw: float
    busy_power: float
    idle_power: float
    location: Location
    parent: Optional[int] = None
    pes: int = 1
    comm_range: float = 0.0
    latency_threshold: float = float("inf")
    children: List[int] = field(default_factory=list)
    ram_free: float = -1.0
    cluster_members: List[int] = field(default_factory=list)
    cm_latency: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.ram_free < 0:
            self.ram_free = self.ram_total
        if not self.mips > 0:
            raise TopologyError(f"node {self.name}: mips must be positive")
        if not (self.busy_power >= self.idle_power >= 0):
            raise TopologyError(f"node {self.name}: need busy_power >= idle_power >= 0")
        if not (0 <= self.ram_free <= self.ram_total):
            raise TopologyError(f"node {self.name}: ram_free outside [0, ram_total]")
        if self.pes < 1:
            raise TopologyError(f"node {self.name}: pes must be >= 1")

    @property
    def block(self) -> Optional[int]:
        return self.location.block


@dataclass(frozen=True)
class Link:
    bandwidth: float  # Mbit/s
    latency: float  # ms
    kind: str  # "tree" | "cluster" | "mesh" | "device"


class Topology:
    """Validated node forest plus link resolution."""

    def __init__(self, nodes: Iterable[FogNode], link_latency: Optional[Dict[Tuple[int, int], float]] = None,
                 device_latency: float = DEFAULT_DEVICE_LATENCY,
                 mesh_bandwidth: float = DEFAULT_MESH_BANDWIDTH, mesh_latency: float = DEFAULT_MESH_LATENCY):
        self.nodes: Dict[int, FogNode] = {}
        for n in sorted(nodes, key=lambda n: n.id):
            self.nodes[n.id] = n
        self.link_latency: Dict[Tuple[int, int], float] = dict(link_latency or {})
        self.device_latency = device_latency
        self.mesh_enabled = False
        self.mesh_tier = GATEWAY_TIER
        self.mesh_bandwidth = mesh_bandwidth
        self.mesh_latency = mesh_latency
        self.cluster_links_enabled = True
        self.cluster_bandwidth: Optional[float] = None  # None -> sender uplink
        self._coords: Dict[int, tuple] = {}
        for n in self.nodes.values():
            n.children = []
        for n in self.nodes.values():
            if n.parent is not None:
                self.nodes[n.parent].children.append(n.id)

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, node_id: int) -> FogNode:
        return self.nodes[node_id]

    def __contains__(self, node_id) -> bool:
        return node_id in self.nodes

    @property
    def roots(self) -> List[int]:
        return [i for i, n in self.nodes.items() if n.parent is None]

    def tier_nodes(self, tier: int) -> List[int]:
        return [i for i, n in self.nodes.items() if n.tier == tier]

    def tier_coords(self, tier: int):
        """(ids, lats, lons) arrays for nodes of one tier, ascending id."""
        got = self._coords.get(tier)
        if got is None:
            ids = self.tier_nodes(tier)
            lats = np.array([self.nodes[i].location.latitude for i in ids], dtype=np.float64)
            lons = np.array([self.nodes[i].location.longitude for i in ids], dtype=np.float64)
            got = self._coords[tier] = (ids, lats, lons)
        return got

    def siblings(self, node_id: int) -> List[int]:
        p = self.nodes[node_id].parent
        if p is None:
            return []
        return [c for c in self.nodes[p].children if c != node_id]

    # -- paths ----------------------------------------------------------------
    def path_to_root(self, node_id: int) -> List[int]:
        if node_id not in self.nodes:
            raise KeyError(f"unknown node {node_id}")
        path = [node_id]
        seen = {node_id}
        cur = self.nodes[node_id]
        while cur.parent is not None:
            if cur.parent not in self.nodes or cur.parent in seen:
                raise TopologyError(f"broken parent chain at node {cur.id}")
            seen.add(cur.parent)
            path.append(cur.parent)
            cur = self.nodes[cur.parent]
        if cur.tier != CLOUD_TIER:
            raise TopologyError(f"path from {node_id} ends at non-root tier {cur.tier}")
        return path

    def common_accessible_node(self, a: int, b: int) -> int:
        """First node on a's root-ward path that is also on b's."""
        other = set(self.path_to_root(b))
        for phi in self.path_to_root(a):
            if phi in other:
                return phi
        raise TopologyError(f"nodes {a} and {b} are in disjoint components")

    # -- links ----------------------------------------------------------------
    def tree_latency(self, a: int, b: int) -> float:
        got = self.link_latency.get((a, b))
        if got is not None:
            return got
        na, nb = self.nodes[a], self.nodes[b]
        child = na if na.parent == b else nb
        return DEFAULT_TREE_LATENCY.get(child.tier, DEFAULT_TREE_LATENCY[2])

    def is_tree_edge(self, a: int, b: int) -> bool:
        return self.nodes[a].parent == b or self.nodes[b].parent == a

    def link(self, a: int, b: int) -> Link:
        """Resolve the link used for a hop a->b: tree, then cluster, then mesh."""
        na, nb = self.nodes[a], self.nodes[b]
        if na.parent == b or nb.parent == a:
            return Link(min(na.uplink_bw, nb.downlink_bw), self.tree_latency(a, b), "tree")
        if self.cluster_links_enabled and (b in na.cluster_members or a in nb.cluster_members):
            bw = self.cluster_bandwidth if self.cluster_bandwidth is not None else na.uplink_bw
            lat = na.cm_latency.get(b, nb.cm_latency.get(a, 0.0))
            return Link(bw, lat, "cluster")
        if self.mesh_enabled and na.tier == nb.tier == self.mesh_tier:
            return Link(self.mesh_bandwidth, self.mesh_latency, "mesh")
        raise TopologyError(f"no link between {a} and {b}")

    def has_link(self, a: int, b: int) -> bool:
        try:
            self.link(a, b)
        except TopologyError:
            return False
        return True

    def neighbours(self, a: int) -> List[int]:
        na = self.nodes[a]
        out = set(na.children)
        if na.parent is not None:
            out.add(na.parent)
        if self.cluster_links_enabled:
            out.update(na.cluster_members)
            out.update(i for i in self.tier_nodes(na.tier) if a in self.nodes[i].cluster_members)
        if self.mesh_enabled and na.tier == self.mesh_tier:
            out.update(i for i in self.tier_nodes(self.mesh_tier) if i != a)
        return sorted(out)

    # -- resources ------------------------------------------------------------
    def allocate(self, node_id: int, ram: float) -> None:
        n = self.nodes[node_id]
        if ram > n.ram_free + 1e-9:
            raise CapacityError(f"node {n.name} has {n.ram_free} GB free, {ram} GB requested")
        n.ram_free = max(0.0, n.ram_free - ram)

    def release(self, node_id: int, ram: float) -> None:
        n = self.nodes[node_id]
        n.ram_free = min(n.ram_total, n.ram_free + ram)

    def reset_resources(self) -> None:
        for n in self.nodes.values():
            n.ram_free = n.ram_total

    # -- export ---------------------------------------------------------------
    def to_config(self) -> dict:
        nodes = []
        for n in self.nodes.values():
            nodes.append({
                "id": n.id, "name": n.name, "tier": n.tier, "parent": n.parent,
                "mips": n.mips, "pes": n.pes, "ram": n.ram_total,
                "uplink": n.uplink_bw, "downlink": n.downlink_bw,
                "busy_power": n.busy_power, "idle_power": n.idle_power,
                "latitude": n.location.latitude, "longitude": n.location.longitude,
                "block": n.location.block, "comm_range": n.comm_range,
                "latency_threshold": None if n.latency_threshold == float("inf") else n.latency_threshold,
            })
        return {
            "nodes": nodes,
            "link_latency": [{"a": a, "b": b, "ms": v} for (a, b), v in sorted(self.link_latency.items())],
            "device_latency": self.device_latency,
            "mesh": {"bandwidth": self.mesh_bandwidth, "latency": self.mesh_latency},
        }

    def node_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "latitude", "longitude", "block"])
        for n in self.nodes.values():
            w.writerow([n.id, repr(n.location.latitude), repr(n.location.longitude),
                        "" if n.location.block is None else n.location.block])
        return buf.getvalue()


def _value(v, rng, what):
    """Scalar, or [lo, hi] range sampled uniformly."""
    if isinstance(v, (list, tuple)):
        lo, hi = float(min(v)), float(max(v))
        if rng is None:
            raise TopologyError(f"{what}: ranged value {v} needs a seeded generator")
        return float(rng.uniform(lo, hi)) if hi > lo else lo
    return float(v)


def build_topology(spec: dict, rng=None) -> Topology:
    """Validate a topology config dict and build the node forest.

    Ranged numeric fields (``[lo, hi]``) are sampled with ``rng``.
    """
    raw = spec.get("nodes", [])
    seen = set()
    for r in raw:
        if r["id"] in seen:
            raise DuplicateNodeError(f"duplicate node id {r['id']}")
        seen.add(r["id"])
    names = [r.get("name", str(r["id"])) for r in raw]
    if len(set(names)) != len(names):
        raise DuplicateNodeError("duplicate node names")
    by_id = {r["id"]: r for r in raw}

    for r in raw:
        tier = int(r["tier"])
        if tier < 0:
            raise TierMismatchError(f"node {r['id']}: negative tier {tier}")
        p = r.get("parent")
        if tier > 0 and p is None:
            raise OrphanNodeError(f"node {r['id']} at tier {tier} has no parent")
        if p is not None and p not in by_id:
            raise OrphanNodeError(f"node {r['id']} references unknown parent {p}")

    for r in raw:
        seen_chain = [r["id"]]
        cur = r
        while cur.get("parent") is not None:
            nxt = cur["parent"]
            if nxt in seen_chain:
                raise ParentCycleError(f"parent cycle: {' -> '.join(map(str, seen_chain + [nxt]))}")
            seen_chain.append(nxt)
            cur = by_id[nxt]

    for r in raw:
        tier = int(r["tier"])
        p = r.get("parent")
        if p is None and tier != CLOUD_TIER:
            raise TierMismatchError(f"root node {r['id']} must be tier 0, got {tier}")
        if p is not None:
            pt = int(by_id[p]["tier"])
            if pt != tier - 1:
                raise TierMismatchError(f"node {r['id']} (tier {tier}) has parent {p} at tier {pt}; expected tier {tier - 1}")

    nodes = []
    for r in raw:
        what = f"node {r['id']}"
        busy = _value(r.get("busy_power", 0.0), rng, what)
        idle = _value(r.get("idle_power", 0.0), rng, what)
        lt = r.get("latency_threshold")
        block = r.get("block")
        nodes.append(FogNode(
            id=int(r["id"]), name=str(r.get("name", r["id"])), tier=int(r["tier"]),
            mips=_value(r.get("mips", 1000.0), rng, what), pes=int(r.get("pes", 1)),
            ram_total=_value(r.get("ram", 1.0), rng, what),
            uplink_bw=_value(r.get("uplink", 100.0), rng, what), downlink_bw=_value(r.get("downlink", 100.0), rng, what),
            busy_power=max(busy, idle), idle_power=idle,
            location=Location(float(r.get("latitude", 0.0)), float(r.get("longitude", 0.0)),
                              None if block is None else int(block)),
            parent=r.get("parent"), comm_range=float(r.get("comm_range", 0.0)),
            latency_threshold=float("inf") if lt is None else float(lt),
        ))

    link_latency = {}
    for e in spec.get("link_latency", []):
        a, b, ms = int(e["a"]), int(e["b"]), float(e["ms"])
        link_latency[(a, b)] = ms
        if not e.get("directed", False):
            link_latency[(b, a)] = ms
    mesh = spec.get("mesh", {})
    topo = Topology(nodes, link_latency,
                    device_latency=float(spec.get("device_latency", DEFAULT_DEVICE_LATENCY)),
                    mesh_bandwidth=float(mesh.get("bandwidth", DEFAULT_MESH_BANDWIDTH)),
                    mesh_latency=float(mesh.get("latency", DEFAULT_MESH_LATENCY)))

    for b in spec.get("blocks", []):
        proxy = b["proxy"]
        if proxy not in topo or topo[proxy].tier != PROXY_TIER:
            raise TierMismatchError(f"block {b['id']}: proxy {proxy} is not a tier-1 node")
        if topo[proxy].parent is None or topo[topo[proxy].parent].tier != CLOUD_TIER:
            raise TierMismatchError(f"block {b['id']}: proxy {proxy} is not parented to a cloud node")
        for g in b.get("gateways", []):
            if g not in topo or topo[g].tier != GATEWAY_TIER or topo[g].parent != proxy:
                raise TierMismatchError(f"block {b['id']}: gateway {g} is not a tier-2 child of proxy {proxy}")
    return topo


def load_topology(path, rng=None) -> Topology:
    with open(path) as fh:
        return build_topology(json.load(fh), rng=rng)
