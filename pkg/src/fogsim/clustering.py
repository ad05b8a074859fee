"""Range/latency based clustering of sibling fog nodes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from .engine import Event, EventKind, Kernel
from .geo import haversine
from .infrastructure import GATEWAY_TIER, Topology

BASE_LATENCY_MS = 1.0
LATENCY_PER_KM_MS = 0.01
DEFAULT_PROBE_MB = 0.001


def estimate_latency(topo: Topology, a: int, b: int) -> float:
    """Configured pairwise latency, else 1 ms plus 0.01 ms per km."""
    got = topo.link_latency.get((a, b))
    if got is not None:
        return got
    return BASE_LATENCY_MS + LATENCY_PER_KM_MS * haversine(topo[a].location, topo[b].location)


def form_cluster(f: int, topo: Topology, lf: bool = False, symmetric: bool = True) -> Tuple[List[int], Dict[int, float]]:
    """Members and member latencies for node ``f`` among its siblings.

    In symmetric mode a sibling joins only if it is within both nodes' ranges
    and (with ``lf``) under both latency thresholds, so membership is mutual.
    """
    node = topo[f]
    members: List[int] = []
    latency: Dict[int, float] = {}
    for s in sorted(topo.siblings(f)):
        other = topo[s]
        d = haversine(node.location, other.location)
        reach = min(node.comm_range, other.comm_range) if symmetric else node.comm_range
        if d <= reach:
            members.append(s)
            latency[s] = estimate_latency(topo, f, s)
    if lf:
        keep = []
        for s in members:
            lat = latency[s]
            over = lat > node.latency_threshold
            if symmetric:
                over = over or estimate_latency(topo, s, f) > topo[s].latency_threshold
            if over:
                del latency[s]
            else:
                keep.append(s)
        members = keep
    return members, latency


@dataclass
class ClusterView:
    members: List[int]
    latency: Dict[int, float]
    formed_at: float


@dataclass
class AtStart:
    pass


@dataclass
class AtTime:
    time_ms: float


@dataclass
class OnEvent:
    kind: EventKind


class ClusterManager:
    """Per-node cluster views plus their mirror on the topology nodes."""

    def __init__(self, topo: Topology, tier: int = GATEWAY_TIER, lf: bool = False, symmetric: bool = True,
                 probe_mb: float = DEFAULT_PROBE_MB, on_probe=None):
        self.topo = topo
        self.tier = tier
        self.lf = lf
        self.symmetric = symmetric
        self.probe_mb = probe_mb
        self.on_probe = on_probe  # callback(src, dst, mb) per sibling probe
        self.views: Dict[int, ClusterView] = {}
        self.rounds = 0
        self.probes = 0
        self.history: List[dict] = []
        self.listeners: List = []

    def eligible(self) -> List[int]:
        return [i for i in self.topo.tier_nodes(self.tier) if self.topo[i].parent is not None]

    def run(self, now: float = 0.0) -> Dict[int, ClusterView]:
        """Recompute every eligible node's view and swap them in together."""
        fresh = {}
        for f in self.eligible():
            sibs = self.topo.siblings(f)
            for s in sorted(sibs):
                self.probes += 1
                if self.on_probe is not None:
                    self.on_probe(f, s, self.probe_mb)
            members, latency = form_cluster(f, self.topo, self.lf, self.symmetric)
            fresh[f] = ClusterView(members, latency, now)
        self.views = fresh
        for f, v in fresh.items():
            node = self.topo[f]
            node.cluster_members = list(v.members)
            node.cm_latency = dict(v.latency)
        self.rounds += 1
        self.history.append(self.dump())
        for fn in self.listeners:
            fn(now)
        return fresh

    def members(self, f: int) -> List[int]:
        v = self.views.get(f)
        return list(v.members) if v else []

    def in_same_cluster(self, a: int, b: int) -> bool:
        if a == b:
            return True
        in_a = b in self.members(a)
        if not self.symmetric:
            return in_a
        return in_a and a in self.members(b)

    def dump(self) -> dict:
        views = {}
        for f, v in sorted(self.views.items()):
            views[str(f)] = {"members": list(v.members),
                             "latency_ms": {str(k): v.latency[k] for k in sorted(v.latency)},
                             "formed_at_ms": v.formed_at}
        return {"mode": "symmetric" if self.symmetric else "asymmetric", "latency_filter": self.lf,
                "round": self.rounds, "views": views}

    def to_json(self) -> str:
        return json.dumps({"rounds": self.history}, sort_keys=True, indent=1)


def trigger_clustering(kernel: Kernel, manager: ClusterManager, criteria: Iterable, target="clustering") -> None:
    """Schedule cluster formation per criterion; criteria may be combined."""
    if target not in kernel._handlers:
        kernel.register(target, lambda ev: manager.run(kernel.now))
    for c in criteria:
        if isinstance(c, AtStart):
            kernel.at(kernel.now, target, EventKind.CLUSTERING_TRIGGER, "start")
        elif isinstance(c, AtTime):
            kernel.at(c.time_ms, target, EventKind.CLUSTERING_TRIGGER, "time")
        elif isinstance(c, OnEvent):
            kind = c.kind

            def hook(ev: Event, kind=kind):
                if ev.kind is kind:
                    kernel.at(kernel.now, target, EventKind.CLUSTERING_TRIGGER, "event")

            kernel.observe(hook)
        else:
            raise ValueError(f"unknown clustering criterion {c!r}")


def parse_criteria(specs: Iterable[dict]) -> List:
    """Config form: ``{"at": "start"}``, ``{"at_time_s": 10}``, ``{"on_event": "LocationChanged"}``."""
    out = []
    for s in specs:
        if s.get("at") == "start":
            out.append(AtStart())
        elif "at_time_s" in s:
            out.append(AtTime(float(s["at_time_s"]) * 1000.0))
        elif "on_event" in s:
            out.append(OnEvent(EventKind(s["on_event"])))
        else:
            raise ValueError(f"bad clustering trigger {s!r}")
    return out
