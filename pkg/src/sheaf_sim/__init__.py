"""Simulator for decentralized multimodal learning with sheaf-coupled task heads."""

from .config import ExperimentConfig, from_dict, load, reference
from .errors import ConfigError, NonFinite, SheafSimError
from .graph import ClientGraph, build_graph, drone_topology, reference_topology
from .trainer import run

__all__ = [
    "ClientGraph",
    "ConfigError",
    "ExperimentConfig",
    "NonFinite",
    "SheafSimError",
    "build_graph",
    "drone_topology",
    "from_dict",
    "load",
    "reference",
    "reference_topology",
    "run",
]

__version__ = "0.1.0"
