"""DAG applications: modules, tuple edges, selectivity and control loops."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set

UP = "UP"
DOWN = "DOWN"


class ApplicationError(ValueError):
    pass


class DagCycleError(ApplicationError):
    def __init__(self, cycle: List[str]):
        self.cycle = cycle
        super().__init__(f"UP edges form a cycle: {' -> '.join(cycle + cycle[:1])}")


@dataclass
class AppModule:
    name: str
    ram: float  # GB
    is_client: bool = False
    consumes: List[str] = field(default_factory=list)
    migration_mb: float = 0.0  # state shipped when the module migrates
    pin_tier: Optional[int] = None  # place only on nodes of this tier


@dataclass
class AppEdge:
    source: str
    dest: str
    cpu_length: float  # MI executed at dest
    nw_length: float  # MB
    tuple_type: str
    direction: str = UP
    period_ms: Optional[float] = None  # periodic emission; None = reactive

    @property
    def periodic(self) -> bool:
        return self.period_ms is not None


@dataclass
class Selectivity:
    module: str
    input_type: str
    output_type: str
    ratio: float = 1.0


@dataclass
class AppLoop:
    modules: List[str]

    @property
    def name(self) -> str:
        return "->".join(self.modules)


_tuple_ids = itertools.count()


@dataclass(eq=False)
class Tuple:
    tuple_type: str
    src_module: str
    dst_module: str
    cpu_length: float
    nw_length: float
    emit_time: float
    origin_entity: int
    dst_node: Optional[int] = None
    # loop index -> (start time, position of dst_module in the loop)
    loops: Dict[int, tuple] = field(default_factory=dict)
    id: int = field(default_factory=lambda: next(_tuple_ids))

    @property
    def loop_ids(self) -> Set[int]:
        return set(self.loops)


class Application:
    def __init__(self, name: str, modules: Iterable[AppModule], edges: Iterable[AppEdge],
                 selectivities: Iterable[Selectivity] = (), loops: Iterable[AppLoop] = (),
                 sensors: Iterable[str] = ()):
        self.name = name
        self.modules: List[AppModule] = list(modules)
        self.edges: List[AppEdge] = list(edges)
        self.selectivities: List[Selectivity] = list(selectivities)
        self.loops: List[AppLoop] = list(loops)
        self.sensors: List[str] = list(sensors)
        self.module_map: Dict[str, AppModule] = {m.name: m for m in self.modules}
        for m in self.modules:
            if not m.consumes:
                m.consumes = sorted({e.dest for e in self.edges if e.source == m.name and e.direction == UP})

    def module(self, name: str) -> AppModule:
        return self.module_map[name]

    def up_predecessors(self, name: str) -> List[str]:
        return [e.source for e in self.edges
                if e.dest == name and e.direction == UP and e.source in self.module_map]

    def out_edges(self, module: str, tuple_type: Optional[str] = None) -> List[AppEdge]:
        return [e for e in self.edges if e.source == module and (tuple_type is None or e.tuple_type == tuple_type)]

    def sensor_edges(self) -> List[AppEdge]:
        return [e for e in self.edges if e.source in self.sensors]

    def periodic_edges(self) -> List[AppEdge]:
        return [e for e in self.edges if e.periodic]

    def client_modules(self) -> List[str]:
        return [m.name for m in self.modules if m.is_client]

    def consumers_of(self, name: str) -> List[str]:
        return sorted({e.source for e in self.edges if e.dest == name and e.source in self.module_map})

    def to_config(self) -> dict:
        return {
            "name": self.name,
            "sensors": list(self.sensors),
            "modules": [{"name": m.name, "ram": m.ram, "is_client": m.is_client, "consumes": list(m.consumes),
                         "migration_mb": m.migration_mb, "pin_tier": m.pin_tier} for m in self.modules],
            "edges": [{"source": e.source, "dest": e.dest, "cpu_length": e.cpu_length, "nw_length": e.nw_length,
                       "tuple_type": e.tuple_type, "direction": e.direction, "period_ms": e.period_ms}
                      for e in self.edges],
            "selectivities": [{"module": s.module, "input_type": s.input_type, "output_type": s.output_type,
                               "ratio": s.ratio} for s in self.selectivities],
            "loops": [list(lp.modules) for lp in self.loops],
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "Application":
        return cls(
            cfg["name"],
            [AppModule(m["name"], float(m["ram"]), bool(m.get("is_client", False)), list(m.get("consumes", [])),
                       float(m.get("migration_mb", 0.0)), m.get("pin_tier")) for m in cfg["modules"]],
            [AppEdge(e["source"], e["dest"], float(e["cpu_length"]), float(e["nw_length"]), e["tuple_type"],
                     e.get("direction", UP), e.get("period_ms")) for e in cfg["edges"]],
            [Selectivity(s["module"], s["input_type"], s["output_type"], float(s.get("ratio", 1.0)))
             for s in cfg.get("selectivities", [])],
            [AppLoop(list(lp)) for lp in cfg.get("loops", [])],
            cfg.get("sensors", []),
        )


def validate_dag(app: Application) -> None:
    """Raise ApplicationError unless the app is well formed and its UP edges are acyclic."""
    names = [m.name for m in app.modules]
    if len(set(names)) != len(names):
        raise ApplicationError(f"duplicate module names in {app.name}")
    for m in app.modules:
        if not m.ram > 0:
            raise ApplicationError(f"module {m.name}: ram must be positive")
    known = set(names) | set(app.sensors)
    for e in app.edges:
        if e.source == e.dest:
            raise ApplicationError(f"self-edge {e.source} -> {e.dest}")
        if e.source not in known or e.dest not in app.module_map:
            raise ApplicationError(f"edge {e.source} -> {e.dest} references an unknown module")
        if e.cpu_length < 0 or not e.nw_length > 0:
            raise ApplicationError(f"edge {e.source} -> {e.dest}: need cpu_length >= 0 and nw_length > 0")
        if e.direction not in (UP, DOWN):
            raise ApplicationError(f"edge {e.source} -> {e.dest}: bad direction {e.direction!r}")
        if e.source in app.sensors and not e.periodic:
            raise ApplicationError(f"sensor edge {e.source} -> {e.dest} must be periodic")
        if e.period_ms is not None and not e.period_ms > 0:
            raise ApplicationError(f"edge {e.source} -> {e.dest}: period must be positive")
    for s in app.selectivities:
        if not s.ratio > 0:
            raise ApplicationError(f"selectivity {s.module}:{s.input_type}->{s.output_type} must be positive")
        if s.module not in app.module_map:
            raise ApplicationError(f"selectivity references unknown module {s.module}")
    for lp in app.loops:
        for a, b in zip(lp.modules, lp.modules[1:]):
            if not any(e.source == a and e.dest == b for e in app.edges):
                raise ApplicationError(f"loop {lp.name}: no edge {a} -> {b}")

    # DFS over UP edges between modules
    adj: Dict[str, List[str]] = {n: [] for n in names}
    for e in app.edges:
        if e.direction == UP and e.source in app.module_map:
            adj[e.source].append(e.dest)
    state: Dict[str, int] = {n: 0 for n in names}
    stack: List[str] = []

    def visit(n):
        state[n] = 1
        stack.append(n)
        for nxt in adj[n]:
            if state[nxt] == 1:
                raise DagCycleError(stack[stack.index(nxt):])
            if state[nxt] == 0:
                visit(nxt)
        stack.pop()
        state[n] = 2

    for n in names:
        if state[n] == 0:
            visit(n)


def next_eligible_microservice(app: Application, placed: Set[str]) -> Optional[str]:
    """First unplaced module, in declaration order, whose UP predecessors are all placed."""
    for m in app.modules:
        if m.name in placed:
            continue
        if all(p in placed for p in app.up_predecessors(m.name)):
            return m.name
    return None
