"""Desk-scale discrete-event simulator of a GEO-satellite LTE backhaul.

The package models the chain UE - eNodeB - satellite terminal - satellite -
gateway - core - server at packet granularity: a demand-assigned return link
(constant guarantee plus on-demand capacity with a geostationary request/grant
loop), loss-based congestion control on the endpoints, an optional pair of
split-connection proxies around the satellite segment, and the QoE metrics
used to compare access and transport configurations.
"""

__version__ = "0.1.0"

from .engine import Simulator, SimulationError, US, MS, SEC
from .scenario import ScenarioSpec, load_scenario, save_scenario, builtin_names
from .campaign import run_campaign

__all__ = [
    "Simulator",
    "SimulationError",
    "US",
    "MS",
    "SEC",
    "ScenarioSpec",
    "load_scenario",
    "save_scenario",
    "builtin_names",
    "run_campaign",
]
