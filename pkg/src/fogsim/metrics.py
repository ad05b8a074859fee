"""Run metrics: loop delay, energy, network usage, migrations, faults."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

CATEGORIES = ("app", "migration", "clustering")
TIER_NAMES = {0: "cloud", 1: "proxy", 2: "gateway", 3: "device"}


def _r(x: float) -> float:
    # 12 significant digits keeps the JSON stable and readable
    return float(f"{x:.12g}")


@dataclass
class LoopStats:
    count: int = 0
    total: float = 0.0
    max: float = 0.0

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else 0.0


class MetricsCollector:
    def __init__(self):
        self.loops: Dict[str, LoopStats] = {}
        self.energy: Dict[object, float] = {}
        self.energy_tier: Dict[object, int] = {}
        self.migration_energy = 0.0
        self.network: Dict[str, float] = {c: 0.0 for c in CATEGORIES}
        self.hops: Dict[str, int] = {c: 0 for c in CATEGORIES}
        self.hop_mb_sum = 0.0
        self.migrations: List[dict] = []
        self.faults: Dict[str, int] = {}
        self.counters: Dict[str, float] = {}

    def record_loop(self, loop: str, emit_time: float, complete_time: float) -> None:
        if complete_time < emit_time:
            raise ValueError(f"loop {loop} completes at {complete_time} before it started at {emit_time}")
        d = complete_time - emit_time
        st = self.loops.setdefault(loop, LoopStats())
        st.count += 1
        st.total += d
        if d > st.max:
            st.max = d

    def accrue_energy(self, node, t_from: float, t_to: float, utilization: float,
                      idle_power: float, busy_power: float, tier: Optional[int] = None) -> float:
        """Add energy for ``[t_from, t_to]`` ms at a fixed utilization; returns the increment."""
        if t_to < t_from:
            raise ValueError("energy interval runs backwards")
        if not (0.0 <= utilization <= 1.0):
            raise ValueError(f"utilization {utilization} outside [0, 1]")
        e = (t_to - t_from) / 1000.0 * (idle_power + (busy_power - idle_power) * utilization)
        self.energy[node] = self.energy.get(node, 0.0) + e
        if tier is not None:
            self.energy_tier[node] = tier
        return e

    def record_transfer(self, src, dst, mb: float, category: str) -> None:
        if src == dst:
            return
        if not mb > 0:
            raise ValueError("transfer size must be positive")
        if category not in self.network:
            raise ValueError(f"unknown traffic category {category!r}")
        self.network[category] += mb
        self.hops[category] += 1
        self.hop_mb_sum += mb

    def fault(self, kind: str, n: int = 1) -> None:
        self.faults[kind] = self.faults.get(kind, 0) + n

    def count(self, key: str, n: float = 1) -> None:
        self.counters[key] = self.counters.get(key, 0) + n

    def finalize(self, t_end: float, extra: Optional[dict] = None, entities: int = 0) -> "MetricsReport":
        per_tier: Dict[str, float] = {}
        for node, e in self.energy.items():
            name = TIER_NAMES.get(self.energy_tier.get(node), "other")
            per_tier[name] = per_tier.get(name, 0.0) + e
        done = [m for m in self.migrations if m.get("completion_ms") is not None]
        durations = [m["completion_ms"] - m["trigger_ms"] for m in done]
        return MetricsReport(
            horizon_ms=t_end,
            loop_delays={k: {"count": v.count, "mean_ms": v.mean, "max_ms": v.max} for k, v in self.loops.items()},
            energy={
                "per_node": {str(k): v for k, v in self.energy.items()},
                "per_tier": per_tier,
                "total": math.fsum(self.energy.values()),
                "migration": self.migration_energy,
            },
            network_usage={
                "total_mb": math.fsum(self.network.values()),
                "by_category_mb": dict(self.network),
                "hops": dict(self.hops),
            },
            migrations=list(self.migrations),
            migration_summary={
                "count": len(done),
                "pending": len(self.migrations) - len(done),
                "mean_ms": math.fsum(durations) / len(durations) if durations else 0.0,
                "max_ms": max(durations) if durations else 0.0,
                "total_ms": math.fsum(durations),
                # cumulative migration time per mobile user
                "per_user_ms": math.fsum(durations) / entities if entities else 0.0,
            },
            faults=dict(self.faults),
            counters=dict(self.counters),
            extra=dict(extra or {}),
        )


@dataclass
class MetricsReport:
    horizon_ms: float
    loop_delays: dict
    energy: dict
    network_usage: dict
    migrations: list
    migration_summary: dict
    faults: dict
    counters: dict
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _clean({
            "horizon_ms": self.horizon_ms,
            "loop_delays": self.loop_delays,
            "energy": self.energy,
            "network_usage": self.network_usage,
            "migrations": self.migrations,
            "migration_summary": self.migration_summary,
            "faults": self.faults,
            "counters": self.counters,
            "extra": self.extra,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def rows(self) -> List[tuple]:
        """Flat (metric, value) rows."""
        out = []

        def walk(prefix, obj):
            if isinstance(obj, dict):
                for k in sorted(obj):
                    walk(f"{prefix}.{k}" if prefix else str(k), obj[k])
            elif isinstance(obj, (int, float)) and not isinstance(obj, bool):
                out.append((prefix, obj))

        d = self.to_dict()
        d.pop("migrations")
        walk("", d)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.rows():
            w.writerow([k, repr(v) if isinstance(v, float) else v])
        return buf.getvalue()


def _clean(obj):
    if isinstance(obj, float):
        return _r(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj
