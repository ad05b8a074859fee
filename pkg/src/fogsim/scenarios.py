"""Scenario configs, the built-in ATS/CHM/CDC presets, topology generation and run orchestration."""

from __future__ import annotations

import copy
import json
import math
import os
import resource
import time
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .application import DOWN, UP, Application, validate_dag
from .clustering import ClusterManager, parse_criteria
from .engine import rng_stream
from .geo import MELBOURNE_CBD, BoundingBox, Location, haversine
from .infrastructure import GATEWAY_TIER, PROXY_TIER, build_topology, load_topology
from .metrics import MetricsReport
from .mobility import (MigrationPolicy, MobileEntity, MobilityKind, MobilityModelParams, MobilityTrace,
                       generate_directional_trace, generate_random_trace, read_traces)
from .simulation import PLACEMENT_POLICIES, DeviceSpec, Simulation

MOBILITY_POLICIES = {
    "cloud-centric": MigrationPolicy.CLOUD_CENTRIC,
    "non-hierarchical": MigrationPolicy.NON_HIERARCHICAL,
    "intra-inter": MigrationPolicy.INTRA_INTER_CLUSTER,
    "none": None,
}
MOBILITY_MODELS = ("directional", "random_waypoint", "random_walk", "trace-file")
MODEL_ALIASES = {"random": "random_waypoint", "random-waypoint": "random_waypoint", "random-walk": "random_walk",
                 "waypoint": "random_waypoint", "walk": "random_walk"}
SCALES = ("small", "full")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# topology generation
# ---------------------------------------------------------------------------

def _grid(blocks: int, roi: BoundingBox):
    h_km = haversine(Location(roi.lat_min, roi.lon_min), Location(roi.lat_max, roi.lon_min))
    w_km = haversine(Location(roi.lat_min, roi.lon_min), Location(roi.lat_min, roi.lon_max))
    cols = max(1, int(math.ceil(math.sqrt(blocks * w_km / h_km))))
    rows = int(math.ceil(blocks / cols))
    cells = []
    dlat = (roi.lat_max - roi.lat_min) / rows
    dlon = (roi.lon_max - roi.lon_min) / cols
    for b in range(blocks):
        r, c = divmod(b, cols)
        cells.append(BoundingBox(roi.lat_min + r * dlat, roi.lat_min + (r + 1) * dlat,
                                 roi.lon_min + c * dlon, roi.lon_min + (c + 1) * dlon))
    return cells


def centroid_nearest(points: List[Location]) -> int:
    """Index of the point nearest the centroid of ``points`` (lowest index on ties)."""
    clat = sum(p.latitude for p in points) / len(points)
    clon = sum(p.longitude for p in points) / len(points)
    c = Location(clat, clon)
    best, best_d = 0, math.inf
    for i, p in enumerate(points):
        d = haversine(p, c)
        if d < best_d:
            best, best_d = i, d
    return best


def generate_topology(blocks: int, gateways, roi: BoundingBox = MELBOURNE_CBD, seed: int = 0,
                      node_specs: Optional[dict] = None, cloud_location: Optional[Location] = None) -> dict:
    """Topology config with ``blocks`` grid cells over ``roi``.

    ``gateways`` is either a total (spread as evenly as possible) or a
    per-block list. Each block gets gateways+1 random sites; the site nearest
    the block centroid becomes the proxy.
    """
    if blocks < 1:
        raise ConfigError("blocks must be >= 1")
    if isinstance(gateways, (list, tuple)):
        per = [int(g) for g in gateways]
        if len(per) != blocks:
            raise ConfigError("gateway list length must equal the block count")
    else:
        total = int(gateways)
        per = [total // blocks + (1 if b < total % blocks else 0) for b in range(blocks)]
    if any(g < 0 for g in per):
        raise ConfigError("gateway counts must be non-negative")
    specs = node_specs or {}
    rng = rng_stream(seed, "topology")
    cloud_loc = cloud_location or roi.center
    nodes = [dict(specs.get("cloud", {}), id=0, name="cloud", tier=0, parent=None,
                  latitude=cloud_loc.latitude, longitude=cloud_loc.longitude)]
    gw_rows = []
    block_rows = []
    next_gw = 1 + blocks
    for b, cell in enumerate(_grid(blocks, roi)):
        sites = [Location(float(rng.uniform(cell.lat_min, cell.lat_max)),
                          float(rng.uniform(cell.lon_min, cell.lon_max)), b + 1) for _ in range(per[b] + 1)]
        if per[b] == 0:
            warnings.warn(f"block {b + 1} has a single site: it becomes the proxy and the block has no gateways")
        p = centroid_nearest(sites)
        pid = 1 + b
        nodes.append(dict(specs.get("proxy", {}), id=pid, name=f"proxy-{b + 1}", tier=PROXY_TIER, parent=0,
                          latitude=sites[p].latitude, longitude=sites[p].longitude, block=b + 1))
        gws = []
        for j, s in enumerate(x for i, x in enumerate(sites) if i != p):
            gws.append(next_gw)
            gw_rows.append(dict(specs.get("gateway", {}), id=next_gw, name=f"gw-{b + 1}-{j + 1}", tier=GATEWAY_TIER,
                                parent=pid, latitude=s.latitude, longitude=s.longitude, block=b + 1))
            next_gw += 1
        block_rows.append({"id": b + 1, "proxy": pid, "gateways": gws})
    return {"nodes": nodes + gw_rows, "blocks": block_rows, "link_latency": []}


# ---------------------------------------------------------------------------
# built-in applications
# ---------------------------------------------------------------------------

def ats_application(sensor_period_ms: float = 10_000.0) -> dict:
    return {
        "name": "ATS",
        "sensors": ["Microphone"],
        "modules": [
            {"name": "Client", "ram": 0.1, "is_client": True},
            {"name": "Processing", "ram": 4.0, "migration_mb": 2.5},
            {"name": "Storage", "ram": 4.0, "pin_tier": 0},
        ],
        "edges": [
            {"source": "Microphone", "dest": "Client", "cpu_length": 500, "nw_length": 2.0, "tuple_type": "SPEECH",
             "period_ms": sensor_period_ms},
            {"source": "Client", "dest": "Processing", "cpu_length": 2500, "nw_length": 2.5, "tuple_type": "AUDIO"},
            {"source": "Processing", "dest": "Storage", "cpu_length": 1000, "nw_length": 1.0, "tuple_type": "TRANSCRIPT"},
            {"source": "Processing", "dest": "Client", "cpu_length": 500, "nw_length": 1.5,
             "tuple_type": "TRANSLATION", "direction": DOWN},
        ],
        "selectivities": [
            {"module": "Client", "input_type": "SPEECH", "output_type": "AUDIO"},
            {"module": "Processing", "input_type": "AUDIO", "output_type": "TRANSCRIPT"},
            {"module": "Processing", "input_type": "AUDIO", "output_type": "TRANSLATION"},
        ],
        "loops": [["Client", "Processing", "Client"]],
    }


def chm_application(sensor_period_ms: float = 60_000.0) -> dict:
    # every edge into a module carries that module's CPU length; all payloads 0.5 MB
    return {
        "name": "CHM",
        "sensors": ["ECG"],
        "modules": [
            {"name": "Client", "ram": 0.1, "is_client": True},
            {"name": "Preprocessing", "ram": 0.5},
            {"name": "Emergency Diagnosis", "ram": 0.5},
            {"name": "Prediction", "ram": 2.0},
        ],
        "edges": [
            {"source": "ECG", "dest": "Client", "cpu_length": 1000, "nw_length": 0.5, "tuple_type": "ECG_SIGNAL",
             "period_ms": sensor_period_ms},
            {"source": "Client", "dest": "Preprocessing", "cpu_length": 2000, "nw_length": 0.5, "tuple_type": "RAW"},
            {"source": "Preprocessing", "dest": "Emergency Diagnosis", "cpu_length": 2500, "nw_length": 0.5,
             "tuple_type": "FILTERED"},
            {"source": "Preprocessing", "dest": "Prediction", "cpu_length": 4000, "nw_length": 0.5,
             "tuple_type": "HISTORY"},
            {"source": "Emergency Diagnosis", "dest": "Client", "cpu_length": 1000, "nw_length": 0.5,
             "tuple_type": "WARNING", "direction": DOWN},
            {"source": "Prediction", "dest": "Client", "cpu_length": 1000, "nw_length": 0.5,
             "tuple_type": "REPORT", "direction": DOWN},
        ],
        "selectivities": [
            {"module": "Client", "input_type": "ECG_SIGNAL", "output_type": "RAW"},
            {"module": "Preprocessing", "input_type": "RAW", "output_type": "FILTERED"},
            {"module": "Preprocessing", "input_type": "RAW", "output_type": "HISTORY"},
            {"module": "Emergency Diagnosis", "input_type": "FILTERED", "output_type": "WARNING"},
            {"module": "Prediction", "input_type": "HISTORY", "output_type": "REPORT"},
        ],
        "loops": [["Client", "Preprocessing", "Emergency Diagnosis", "Client"]],
    }


def cdc_application(sensor_period_ms: float = 200.0) -> dict:
    return {
        "name": "CDC",
        "sensors": ["VehicleSensor"],
        "modules": [
            {"name": "Client", "ram": 0.1, "is_client": True},
            {"name": "Nginx", "ram": 0.5, "migration_mb": 0.5},
            {"name": "Processing", "ram": 1.0, "migration_mb": 1.0},
            {"name": "Database", "ram": 2.0, "pin_tier": 0},
        ],
        "edges": [
            {"source": "VehicleSensor", "dest": "Client", "cpu_length": 20, "nw_length": 0.01,
             "tuple_type": "TELEMETRY", "period_ms": sensor_period_ms},
            {"source": "Client", "dest": "Nginx", "cpu_length": 50, "nw_length": 0.01, "tuple_type": "REQUEST"},
            {"source": "Nginx", "dest": "Processing", "cpu_length": 150, "nw_length": 0.01, "tuple_type": "FORWARD"},
            {"source": "Processing", "dest": "Database", "cpu_length": 100, "nw_length": 0.005, "tuple_type": "RECORD"},
        ],
        "selectivities": [
            {"module": "Client", "input_type": "TELEMETRY", "output_type": "REQUEST"},
            {"module": "Nginx", "input_type": "REQUEST", "output_type": "FORWARD"},
            {"module": "Processing", "input_type": "FORWARD", "output_type": "RECORD"},
        ],
        "loops": [["Client", "Nginx", "Processing"]],
    }


# ---------------------------------------------------------------------------
# scenario config
# ---------------------------------------------------------------------------

@dataclass
class ScenarioConfig:
    name: str
    seed: int
    duration_s: float
    topology: dict  # {"generate": {...}} | {"file": path} | inline build_topology spec
    application: dict
    devices: dict
    placement_policy: str = "smp-clustering"
    mobility_policy: str = "none"
    mobility_model: dict = field(default_factory=lambda: {"kind": "directional", "speed_mps": 1.5})
    location_events: Optional[int] = None
    clustering: dict = field(default_factory=lambda: {"enabled": False})
    output: Optional[str] = None

    FIELDS = ("name", "seed", "duration_s", "topology", "application", "devices", "placement_policy",
              "mobility_policy", "mobility_model", "location_events", "clustering", "output")

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.FIELDS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        unknown = set(d) - set(cls.FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = [k for k in ("name", "seed", "duration_s", "topology", "application", "devices") if k not in d]
        if missing:
            raise ConfigError(f"missing config keys: {missing}")
        cfg = cls(**{k: copy.deepcopy(d[k]) for k in cls.FIELDS if k in d})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            d = json.load(fh)
        base = os.path.dirname(os.path.abspath(path))
        for key, sub in (("topology", "file"), ("mobility_model", "trace_file")):
            p = (d.get(key) or {}).get(sub)
            if p and not os.path.isabs(p):
                d[key][sub] = os.path.join(base, p)
        return cls.from_dict(d)

    def validate(self) -> None:
        if self.placement_policy not in PLACEMENT_POLICIES:
            raise ConfigError(f"unknown placement policy {self.placement_policy!r}; "
                              f"expected one of {', '.join(PLACEMENT_POLICIES)}")
        if self.mobility_policy not in MOBILITY_POLICIES:
            raise ConfigError(f"unknown mobility policy {self.mobility_policy!r}; "
                              f"expected one of {', '.join(MOBILITY_POLICIES)}")
        kind = MODEL_ALIASES.get(self.mobility_model.get("kind"), self.mobility_model.get("kind"))
        if kind not in MOBILITY_MODELS:
            raise ConfigError(f"unknown mobility model {self.mobility_model.get('kind')!r}")
        if kind == "trace-file" and not os.path.exists(self.mobility_model.get("trace_file", "")):
            raise ConfigError(f"trace file {self.mobility_model.get('trace_file')!r} not found")
        if "file" in self.topology and not os.path.exists(self.topology["file"]):
            raise ConfigError(f"topology file {self.topology['file']!r} not found")
        enabled = bool(self.clustering.get("enabled", False))
        if self.mobility_policy == "intra-inter" and not enabled:
            raise ConfigError("mobility policy intra-inter requires clustering to be enabled")
        if self.placement_policy == "smp-clustering" and not enabled:
            raise ConfigError("placement policy smp-clustering requires clustering to be enabled")
        if not self.duration_s > 0:
            raise ConfigError("duration_s must be positive")
        if int(self.devices.get("count", 0)) < 1:
            raise ConfigError("at least one device is required")
        if self.location_events is not None and self.location_events < 0:
            raise ConfigError("location_events must be non-negative")
        app = Application.from_config(self.application)
        validate_dag(app)
        for e in app.sensor_edges():
            if not app.module(e.dest).is_client:
                raise ConfigError(f"sensor edge {e.source} -> {e.dest} must feed a client module")


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

ATS_SPECS = {
    "cloud": {"mips": 4480, "pes": 10, "ram": 160, "uplink": 100, "downlink": 100,
              "busy_power": 14680, "idle_power": 13320},
    "proxy": {"mips": [3600, 4000], "ram": 16, "uplink": 10, "downlink": 20, "busy_power": 428, "idle_power": 333},
    "gateway": {"mips": [2800, 3000], "ram": 8, "uplink": 50, "downlink": 100, "busy_power": 206, "idle_power": 170},
}
ATS_PHONE = {"mips": 500, "ram": 1, "uplink": 100, "downlink": 200, "busy_power": 60, "idle_power": 35}

CHM_POWER = {"busy_power": 107.339, "idle_power": 83.433}
CHM_SPECS = {
    "cloud": {"mips": [2500, 3000], "pes": 16, "ram": 256, "uplink": 100, "downlink": 100,
              "busy_power": 107.339 * 16, "idle_power": 83.433 * 16},
    "proxy": dict(CHM_POWER, mips=[2500, 3000], ram=16, uplink=10, downlink=20),
    "gateway": dict(CHM_POWER, mips=[2500, 3000], ram=8, uplink=50, downlink=100),
}
CHM_PHONE = {"mips": 500, "ram": 1, "uplink": 100, "downlink": 200, "busy_power": 87.530, "idle_power": 82.440}

CDC_SPECS = {
    "cloud": {"mips": [4000, 5000], "ram": 16, "uplink": 100, "downlink": 150,
              "busy_power": [1500, 2000], "idle_power": [700, 900]},
    "proxy": {"mips": [2500, 3000], "ram": 8, "uplink": 10, "downlink": 50,
              "busy_power": [400, 600], "idle_power": [150, 200]},
    "gateway": {"mips": [2000, 2500], "ram": 4, "uplink": 50, "downlink": 100,
                "busy_power": [200, 300], "idle_power": [80, 100]},
}
CDC_VEHICLE = {"mips": [500, 1000], "ram": 2, "uplink": 100, "downlink": 200,
               "busy_power": [50, 100], "idle_power": [20, 30]}
CDC_SHARES = {"vehicles": 0.30, "gateway": 0.30, "proxy": 0.20, "cloud": 0.20}
CDC_FEATURES = ("mobility", "mobility+microservices", "mobility+clustering", "microservices+clustering",
                "mobility+microservices+clustering")


def builtin_ats(scale: str = "small", policy: str = "intra-inter", mobility: str = "directional",
                seed: int = 0, users: Optional[int] = None) -> ScenarioConfig:
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}")
    blocks, gateways, default_users = (3, 10, 5) if scale == "small" else (12, 118, 1)
    users = default_users if users is None else int(users)
    kind = MODEL_ALIASES.get(mobility, mobility)
    speed = 10.0 if kind == "directional" else [5.0, 15.0]
    return ScenarioConfig.from_dict({
        "name": "ats",
        "seed": seed,
        "duration_s": 500.0,
        "topology": {"generate": {"blocks": blocks, "gateways": gateways, "roi": MELBOURNE_CBD.to_list(),
                                  "node_specs": copy.deepcopy(ATS_SPECS)}},
        "application": ats_application(),
        "devices": {"count": users, "spec": dict(ATS_PHONE), "layout": {"kind": "uniform"}},
        "placement_policy": "smp-no-clustering",
        "mobility_policy": policy,
        "mobility_model": {"kind": kind, "speed_mps": speed, "pause_s": 0.0, "roi": MELBOURNE_CBD.to_list()},
        "location_events": 140,
        "clustering": {"enabled": policy == "intra-inter", "triggers": [{"at": "start"}], "latency_flag": False,
                       "symmetric": True, "comm_range_km": 0.6, "probe_mb": 0.001},
    })


CHM_ROI = [-37.8200, -37.8070, 144.9510, 144.9740]


def builtin_chm(scale: str = "small", policy: str = "smp-clustering", seed: int = 0) -> ScenarioConfig:
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}")
    # the CHM table is already desk sized; both scales use it
    return ScenarioConfig.from_dict({
        "name": "chm",
        "seed": seed,
        "duration_s": 20000.0,
        "topology": {"generate": {"blocks": 1, "gateways": 6, "roi": CHM_ROI,
                                  "node_specs": copy.deepcopy(CHM_SPECS)}},
        "application": chm_application(),
        "devices": {"count": 25, "spec": dict(CHM_PHONE),
                    "layout": {"kind": "hotspot", "fraction": 0.6, "radius_km": 0.1}},
        "placement_policy": policy,
        "mobility_policy": "none",
        "mobility_model": {"kind": "directional", "speed_mps": 1.0},
        "location_events": None,
        "clustering": {"enabled": True, "triggers": [{"at": "start"}], "latency_flag": False,
                       "symmetric": True, "comm_range_km": 3.0, "probe_mb": 0.001},
    })


def builtin_cdc(scale: str = "small", features: str = "mobility+microservices+clustering",
                seed: int = 0) -> ScenarioConfig:
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}")
    if features not in CDC_FEATURES:
        raise ConfigError(f"unknown CDC feature set {features!r}; expected one of {', '.join(CDC_FEATURES)}")
    total = 20 if scale == "small" else 100
    n_veh = round(total * CDC_SHARES["vehicles"])
    n_gw = round(total * CDC_SHARES["gateway"])
    n_proxy = round(total * CDC_SHARES["proxy"])
    n_cloud = round(total * CDC_SHARES["cloud"])
    specs = copy.deepcopy(CDC_SPECS)
    specs["cloud"]["pes"] = n_cloud  # tier-0 share becomes VMs of one datacentre
    specs["cloud"]["ram"] = 16 * n_cloud
    feats = set(features.split("+"))
    clustering = "clustering" in feats
    if "mobility" in feats:
        mob = "intra-inter" if clustering else "cloud-centric"
    else:
        mob = "none"
    if "microservices" in feats:
        placement = "smp-clustering" if clustering else "smp-no-clustering"
    else:
        placement = "edgeward"
    return ScenarioConfig.from_dict({
        "name": "cdc",
        "seed": seed,
        "duration_s": 500.0,
        "topology": {"generate": {"blocks": n_proxy, "gateways": n_gw, "roi": MELBOURNE_CBD.to_list(),
                                  "node_specs": specs}},
        "application": cdc_application(),
        "devices": {"count": n_veh, "spec": dict(CDC_VEHICLE), "layout": {"kind": "uniform"}},
        "placement_policy": placement,
        "mobility_policy": mob,
        "mobility_model": {"kind": "random_waypoint", "speed_mps": [8.0, 14.0], "interval_s": [10.0, 50.0],
                           "pause_s": 0.0, "roi": MELBOURNE_CBD.to_list()},
        "location_events": None,
        "clustering": {"enabled": clustering, "triggers": [{"at": "start"}, {"on_event": "LocationChanged"}],
                       "latency_flag": False, "symmetric": True, "comm_range_km": 0.8, "probe_mb": 0.001},
    })


def builtin_scenarios(seed: int = 0, scale: str = "small") -> Dict[str, ScenarioConfig]:
    return {"ats": builtin_ats(scale, seed=seed), "chm": builtin_chm(scale, seed=seed),
            "cdc": builtin_cdc(scale, seed=seed)}


def builtin(name: str, scale: str = "small", seed: int = 0, policy: Optional[str] = None,
            mobility: Optional[str] = None, users: Optional[int] = None,
            features: Optional[str] = None) -> ScenarioConfig:
    if name == "ats":
        return builtin_ats(scale, policy or "intra-inter", mobility or "directional", seed, users)
    if name == "chm":
        return builtin_chm(scale, policy or "smp-clustering", seed)
    if name == "cdc":
        return builtin_cdc(scale, features or "mobility+microservices+clustering", seed)
    raise ConfigError(f"unknown scenario {name!r}; expected ats, chm or cdc")


# ---------------------------------------------------------------------------
# building and running
# ---------------------------------------------------------------------------

def _sample(v, rng):
    if isinstance(v, (list, tuple)):
        lo, hi = float(min(v)), float(max(v))
        return float(rng.uniform(lo, hi)) if hi > lo else lo
    return float(v)


def _device_starts(cfg: ScenarioConfig, topo, roi: BoundingBox, rng) -> List[Location]:
    n = int(cfg.devices["count"])
    layout = cfg.devices.get("layout", {"kind": "uniform"})
    kind = layout.get("kind", "uniform")
    starts = []
    if kind == "uniform":
        for _ in range(n):
            starts.append(Location(float(rng.uniform(roi.lat_min, roi.lat_max)),
                                   float(rng.uniform(roi.lon_min, roi.lon_max))))
    elif kind == "hotspot":
        gws = topo.tier_nodes(GATEWAY_TIER)
        centre = topo[gws[int(rng.integers(len(gws)))]].location
        k = int(round(float(layout.get("fraction", 0.5)) * n))
        r_km = float(layout.get("radius_km", 0.1))
        for i in range(n):
            if i < k:
                ang = float(rng.uniform(0.0, 2.0 * math.pi))
                r = r_km * math.sqrt(float(rng.uniform(0.0, 1.0)))
                dlat = r * math.cos(ang) / 111.195
                dlon = r * math.sin(ang) / (111.195 * math.cos(math.radians(centre.latitude)))
                starts.append(Location(centre.latitude + dlat, centre.longitude + dlon))
            else:
                starts.append(Location(float(rng.uniform(roi.lat_min, roi.lat_max)),
                                       float(rng.uniform(roi.lon_min, roi.lon_max))))
    else:
        raise ConfigError(f"unknown device layout {kind!r}")
    return starts


def build_traces(cfg: ScenarioConfig, topo, rng) -> Dict[int, MobilityTrace]:
    mm = cfg.mobility_model
    kind = MODEL_ALIASES.get(mm.get("kind"), mm.get("kind"))
    n = int(cfg.devices["count"])
    duration_ms = cfg.duration_s * 1000.0
    roi = BoundingBox.from_list(mm.get("roi", cfg.topology.get("generate", {}).get("roi", MELBOURNE_CBD.to_list())))
    starts = _device_starts(cfg, topo, roi, rng)
    if cfg.mobility_policy == "none":
        return {i: MobilityTrace(i, [(0.0, starts[i])]) for i in range(n)}
    if kind == "trace-file":
        traces = read_traces(mm["trace_file"])
        missing = [i for i in range(n) if i not in traces]
        if missing:
            raise ConfigError(f"trace file lacks entities {missing}")
        return {i: traces[i] for i in range(n)}
    out = {}
    for i in range(n):
        if cfg.location_events is not None:
            share = cfg.location_events // n + (1 if i < cfg.location_events % n else 0)
            interval = duration_ms / share if share else duration_ms * 2
        else:
            interval = _sample(mm.get("interval_s", 10.0), rng) * 1000.0
        speed = mm.get("speed_mps", 1.5)
        if kind == "directional":
            params = MobilityModelParams(MobilityKind.DIRECTIONAL, _sample(speed, rng), interval, duration_ms, roi,
                                         seed=cfg.seed)
            heading = float(rng.uniform(0.0, 360.0))
            out[i] = generate_directional_trace(starts[i], heading, params, entity=i)
        else:
            spd = tuple(speed) if isinstance(speed, (list, tuple)) else float(speed)
            params = MobilityModelParams(MobilityKind(kind), spd, interval, duration_ms, roi,
                                         pause=float(mm.get("pause_s", 0.0)) * 1000.0, seed=cfg.seed)
            out[i] = generate_random_trace(params, entity=i, start=starts[i])
    return out


def build_simulation(cfg: ScenarioConfig, check_invariants: Optional[bool] = None) -> Simulation:
    cfg.validate()
    rng = rng_stream(cfg.seed, "params")
    topo_cfg = cfg.topology
    if "generate" in topo_cfg:
        g = topo_cfg["generate"]
        spec = generate_topology(int(g["blocks"]), g["gateways"], BoundingBox.from_list(g["roi"]), cfg.seed,
                                 g.get("node_specs"))
        topo = build_topology(spec, rng)
    elif "file" in topo_cfg:
        topo = load_topology(topo_cfg["file"], rng)
    else:
        topo = build_topology(topo_cfg, rng)
    cl = cfg.clustering
    for n in topo.nodes.values():
        if n.tier == GATEWAY_TIER:
            if "comm_range_km" in cl and not n.comm_range:
                n.comm_range = float(cl["comm_range_km"])
            if cl.get("sigma_ms") is not None:
                n.latency_threshold = float(cl["sigma_ms"])
    app = Application.from_config(cfg.application)
    validate_dag(app)
    ds = cfg.devices.get("spec", {})
    device_spec = DeviceSpec(**{k: _sample(v, rng) for k, v in ds.items()})
    traces = build_traces(cfg, topo, rng_stream(cfg.seed, "mobility-setup"))
    entities = [MobileEntity(i, None, 3, traces[i]) for i in sorted(traces)]
    manager = None
    criteria = []
    if cl.get("enabled"):
        manager = ClusterManager(topo, lf=bool(cl.get("latency_flag", False)), symmetric=bool(cl.get("symmetric", True)),
                                 probe_mb=float(cl.get("probe_mb", 0.001)))
        criteria = parse_criteria(cl.get("triggers", [{"at": "start"}]))
    return Simulation(topo, app, entities, device_spec, placement=cfg.placement_policy,
                      mobility=MOBILITY_POLICIES[cfg.mobility_policy], clusters=manager, cluster_criteria=criteria,
                      horizon_ms=cfg.duration_s * 1000.0, seed=cfg.seed, check_invariants=check_invariants)


@dataclass
class RunResult:
    report: MetricsReport
    sim: Simulation
    footprint: dict

    @property
    def placement_json(self) -> str:
        return self.sim.plan.to_json()

    @property
    def clusters_json(self) -> str:
        return self.sim.clusters.to_json() if self.sim.clusters else json.dumps({"rounds": []})


def peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def run_scenario(cfg: ScenarioConfig, check_invariants: Optional[bool] = None) -> RunResult:
    t0 = time.perf_counter()
    sim = build_simulation(cfg, check_invariants)
    sim.setup()
    report = sim.run()
    wall = time.perf_counter() - t0
    footprint = {"wall_clock_s": wall, "peak_rss_mb": peak_rss_mb(), "events_dispatched": sim.kernel.dispatched}
    return RunResult(report, sim, footprint)


def write_outputs(result: RunResult, out_dir: str) -> Dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    files = {
        "report.json": result.report.to_json(),
        "report.csv": result.report.to_csv(),
        "placement.json": result.placement_json + "\n",
        "clusters.json": result.clusters_json + "\n",
        "footprint.json": json.dumps(result.footprint, sort_keys=True, indent=1) + "\n",
    }
    paths = {}
    for name, text in files.items():
        p = os.path.join(out_dir, name)
        with open(p, "w") as fh:
            fh.write(text)
        paths[name] = p
    return paths
