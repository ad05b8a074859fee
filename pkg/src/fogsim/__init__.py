"""Discrete-event fog/edge simulator with mobility, clustering and microservice placement."""

from .engine import EventKind, Kernel, rng_stream
from .geo import BoundingBox, Location, haversine
from .infrastructure import FogNode, Topology, build_topology
from .application import Application, validate_dag
from .scenarios import ScenarioConfig, builtin, run_scenario
from .simulation import Simulation

__version__ = "0.1.0"
__all__ = ["EventKind", "Kernel", "rng_stream", "BoundingBox", "Location", "haversine", "FogNode", "Topology",
           "build_topology", "Application", "validate_dag", "ScenarioConfig", "builtin", "run_scenario",
           "Simulation", "__version__"]
