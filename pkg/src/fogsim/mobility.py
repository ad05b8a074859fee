"""Location data, mobility-trace generators and mobility-driven migration."""

from __future__ import annotations

import bisect
import csv
import enum
import io
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

from . import _kernels
from .engine import rng_stream
from .geo import BoundingBox, Location, destination, haversine
from .infrastructure import Topology, TopologyError

__all__ = [
    "Location", "haversine", "MobilityKind", "MobilityModelParams", "MobilityTrace", "MobileEntity",
    "MigrationPolicy", "MigrationDecision", "LocationParseError", "parse_locations",
    "generate_directional_trace", "generate_random_trace", "manage_mobility", "migration_route",
    "migration_latency", "write_traces", "read_traces", "DEFAULT_MAX_DISTANCE_KM",
]

DEFAULT_MAX_DISTANCE_KM = 500.0
TIME_DECIMALS = 6


class LocationParseError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


def _open_text(source):
    if hasattr(source, "read"):
        return source, False
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        return open(source, newline=""), True
    if isinstance(source, str) and "\n" in source:
        return io.StringIO(source), False
    raise FileNotFoundError(f"location source {source!r} not found")


def _coerce_id(raw: str):
    try:
        return int(raw)
    except ValueError:
        return raw


def parse_locations(source) -> Dict[object, Location]:
    """Read an ``id,latitude,longitude,block`` CSV into ``{id: Location}``.

    Every malformed row is reported (with its line number) in a single
    LocationParseError.
    """
    fh, close = _open_text(source)
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            warnings.warn("location file is empty")
            return {}
        header = [h.strip() for h in header]
        missing = [c for c in ("id", "latitude", "longitude") if c not in header]
        if missing:
            raise LocationParseError([f"missing column(s): {', '.join(missing)}"])
        col = {c: header.index(c) for c in header}
        out: Dict[object, Location] = {}
        problems = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rid = _coerce_id(row[col["id"]].strip())
                lat = float(row[col["latitude"]])
                lon = float(row[col["longitude"]])
                blk = None
                if "block" in col and col["block"] < len(row) and row[col["block"]].strip():
                    blk = int(row[col["block"]])
                out[rid] = Location(lat, lon, blk)
            except (ValueError, IndexError) as exc:
                problems.append(f"line {lineno}: {exc}")
        if problems:
            raise LocationParseError(problems)
        if not out:
            warnings.warn("location file has a header but no rows")
        return out
    finally:
        if close:
            fh.close()


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

class MobilityKind(enum.Enum):
    DIRECTIONAL = "directional"
    RANDOM_WAYPOINT = "random_waypoint"
    RANDOM_WALK = "random_walk"


@dataclass
class MobilityModelParams:
    kind: MobilityKind
    speed: Union[float, Tuple[float, float]]  # m/s
    interval: float  # ms between samples
    duration: float  # ms
    roi: BoundingBox
    pause: float = 0.0  # ms dwell at waypoints
    seed: int = 0

    def __post_init__(self):
        if not self.interval > 0:
            raise ValueError("interval must be positive")
        lo, hi = self.speed_range
        if not (lo > 0 and hi >= lo):
            raise ValueError(f"speed must be positive, got {self.speed}")
        if self.duration < 0 or self.pause < 0:
            raise ValueError("duration and pause must be non-negative")

    @property
    def speed_range(self) -> Tuple[float, float]:
        if isinstance(self.speed, (tuple, list)):
            return float(self.speed[0]), float(self.speed[1])
        return float(self.speed), float(self.speed)

    def sample_times(self) -> List[float]:
        n = int(math.floor(self.duration / self.interval + 1e-9))
        return [round(k * self.interval, TIME_DECIMALS) for k in range(n + 1)]


@dataclass
class MobilityTrace:
    entity: int
    samples: List[Tuple[float, Location]]

    def __post_init__(self):
        if not self.samples:
            raise ValueError("a trace needs at least one sample")
        times = [t for t, _ in self.samples]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"trace for entity {self.entity}: times must be strictly increasing")
        self._times = times

    def __len__(self):
        return len(self.samples)

    @property
    def times(self) -> List[float]:
        return self._times

    def location_at(self, t: float) -> Location:
        """Latest sample at or before ``t`` (the first sample before the trace starts)."""
        i = bisect.bisect_right(self._times, t) - 1
        return self.samples[max(i, 0)][1]


def generate_directional_trace(start: Location, heading_deg: float, params: MobilityModelParams,
                               entity: int = 0) -> MobilityTrace:
    """Fixed-speed straight-line movement with equally spaced samples."""
    if not (0.0 <= heading_deg < 360.0):
        raise ValueError(f"heading {heading_deg} outside [0, 360)")
    step_km = params.speed_range[0] * params.interval / 1000.0 / 1000.0
    samples = []
    loc = start
    for k, t in enumerate(params.sample_times()):
        if k:
            loc = destination(loc, heading_deg, step_km)
            if heading_deg == 0.0:
                loc = Location(loc.latitude, start.longitude, start.block)
        samples.append((t, loc))
    return MobilityTrace(entity, samples)


def _fold(x: float, lo: float, hi: float) -> float:
    w = hi - lo
    y = (x - lo) % (2.0 * w)
    if y > w:
        y = 2.0 * w - y
    return lo + y


def _uniform_point(rng, roi: BoundingBox) -> Location:
    return Location(float(rng.uniform(roi.lat_min, roi.lat_max)), float(rng.uniform(roi.lon_min, roi.lon_max)))


def _lerp(a: Location, b: Location, f: float) -> Location:
    return Location(a.latitude + (b.latitude - a.latitude) * f, a.longitude + (b.longitude - a.longitude) * f)


def generate_random_trace(params: MobilityModelParams, entity: int = 0,
                          start: Optional[Location] = None) -> MobilityTrace:
    """Random waypoint or random walk inside ``params.roi``, seeded by (seed, entity)."""
    roi = params.roi
    rng = rng_stream(params.seed, f"mobility:{entity}")
    pos = start if start is not None else _uniform_point(rng, roi)
    if not roi.contains(pos):
        raise ValueError(f"start {pos} outside region of interest")
    lo, hi = params.speed_range
    times = params.sample_times()

    if params.kind is MobilityKind.RANDOM_WALK:
        samples = [(times[0], pos)]
        for t in times[1:]:
            heading = float(rng.uniform(0.0, 360.0))
            speed = float(rng.uniform(lo, hi)) if hi > lo else lo
            nxt = destination(pos, heading, speed * params.interval / 1e6)
            pos = Location(_fold(nxt.latitude, roi.lat_min, roi.lat_max),
                           _fold(nxt.longitude, roi.lon_min, roi.lon_max))
            samples.append((t, pos))
        return MobilityTrace(entity, samples)

    if params.kind is not MobilityKind.RANDOM_WAYPOINT:
        raise ValueError(f"generate_random_trace does not handle {params.kind}")

    # piecewise segments (t0, t1, from, to); pauses have from == to
    samples = []
    seg_t0, seg_t1, seg_a, seg_b = 0.0, 0.0, pos, pos
    in_pause = True  # start with a zero-length dwell, then draw the first leg
    for t in times:
        while t > seg_t1:
            if in_pause:
                target = _uniform_point(rng, roi)
                speed = float(rng.uniform(lo, hi)) if hi > lo else lo
                travel_ms = haversine(seg_b, target) * 1e6 / speed
                seg_t0, seg_t1, seg_a, seg_b = seg_t1, seg_t1 + travel_ms, seg_b, target
                in_pause = False
            else:
                seg_t0, seg_t1, seg_a = seg_t1, seg_t1 + params.pause, seg_b
                in_pause = True
        span = seg_t1 - seg_t0
        f = 1.0 if span <= 0 else (t - seg_t0) / span
        samples.append((t, _lerp(seg_a, seg_b, min(max(f, 0.0), 1.0))))
    return MobilityTrace(entity, samples)


def write_traces(traces: Iterable[MobilityTrace], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["entity", "time_ms", "latitude", "longitude"])
    for tr in traces:
        for t, loc in tr.samples:
            w.writerow([tr.entity, repr(float(t)), repr(loc.latitude), repr(loc.longitude)])


def read_traces(source) -> Dict[int, MobilityTrace]:
    fh, close = _open_text(source)
    try:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["entity", "time_ms", "latitude", "longitude"]:
            raise LocationParseError([f"bad trace header {reader.fieldnames}"])
        rows: Dict[int, List[Tuple[float, Location]]] = {}
        for r in reader:
            rows.setdefault(int(r["entity"]), []).append(
                (float(r["time_ms"]), Location(float(r["latitude"]), float(r["longitude"]))))
        return {e: MobilityTrace(e, sorted(s, key=lambda x: x[0])) for e, s in sorted(rows.items())}
    finally:
        if close:
            fh.close()


# ---------------------------------------------------------------------------
# migration management
# ---------------------------------------------------------------------------

class MigrationPolicy(enum.Enum):
    CLOUD_CENTRIC = "cloud-centric"
    NON_HIERARCHICAL = "non-hierarchical"
    INTRA_INTER_CLUSTER = "intra-inter"


@dataclass
class MobileEntity:
    id: int
    current_parent: Optional[int]
    tier: int
    trace: MobilityTrace
    hosted_modules: Set[str] = field(default_factory=set)
    unreachable: bool = False
    candidates_visited: int = 0
    parent_searches: int = 0


@dataclass
class MigrationDecision:
    entity: int
    old_parent: int
    new_parent: int
    route: List[int]
    modules: List[str]
    trigger_time: float
    policy: MigrationPolicy
    payload_mb: float = 0.0

    def __post_init__(self):
        if self.route[0] != self.old_parent or self.route[-1] != self.new_parent or len(self.route) < 2:
            raise ValueError(f"route {self.route} must run from {self.old_parent} to {self.new_parent}")


def migration_route(topo: Topology, old: int, new: int, policy: MigrationPolicy,
                    same_cluster: Optional[Callable[[int, int], bool]] = None) -> List[int]:
    if old == new:
        return [old]
    if policy is MigrationPolicy.NON_HIERARCHICAL:
        return [old, new]
    if policy is MigrationPolicy.INTRA_INTER_CLUSTER:
        if same_cluster is not None and same_cluster(new, old):
            return [old, new]
        kappa = topo.common_accessible_node(new, old)
    else:
        kappa = topo.path_to_root(old)[-1]
        if kappa not in topo.path_to_root(new):
            raise TopologyError(f"nodes {old} and {new} are under different roots")
    up = topo.path_to_root(old)
    down = topo.path_to_root(new)
    return up[:up.index(kappa) + 1] + list(reversed(down[:down.index(kappa)]))


def manage_mobility(m: MobileEntity, t: float, topo: Topology,
                    same_cluster: Optional[Callable[[int, int], bool]] = None,
                    policy: MigrationPolicy = MigrationPolicy.INTRA_INTER_CLUSTER,
                    module_mb: Optional[Dict[str, float]] = None,
                    max_distance_km: float = DEFAULT_MAX_DISTANCE_KM,
                    location: Optional[Location] = None) -> Optional[MigrationDecision]:
    """Pick the nearest upper-tier node for ``m`` and plan module migration to it.

    Ties keep the incumbent parent; otherwise the lowest node id wins. Returns
    None when the parent does not change or nothing is within range (the
    entity is then flagged unreachable). The caller commits the decision once
    the transfer finishes.
    """
    loc = location if location is not None else m.trace.location_at(t)
    ids, lats, lons = topo.tier_coords(m.tier - 1)
    if not ids:
        raise TopologyError(f"no tier-{m.tier - 1} nodes for entity {m.id}")
    m.candidates_visited += len(ids)
    m.parent_searches += 1
    i, best_d = _kernels.nearest_index(loc.latitude, loc.longitude, lats, lons)
    rho = ids[i]
    old = m.current_parent
    if old is not None and old != rho:
        d_old = haversine(loc, topo[old].location)
        if d_old <= best_d:
            rho, best_d = old, d_old
    if best_d > max_distance_km:
        m.unreachable = True
        return None
    m.unreachable = False
    if old is None or rho == old:
        return None
    modules = sorted(m.hosted_modules)
    mb = sum((module_mb or {}).get(name, 0.0) for name in modules)
    route = migration_route(topo, old, rho, policy, same_cluster)
    return MigrationDecision(m.id, old, rho, route, modules, t, policy, mb)


def migration_latency(decision: MigrationDecision, topo: Topology) -> float:
    """Unloaded store-and-forward time in ms along the decision's route."""
    total = 0.0
    for a, b in zip(decision.route, decision.route[1:]):
        link = topo.link(a, b)
        total += decision.payload_mb * 8.0 / link.bandwidth * 1000.0 + link.latency
    return total
