"""Transmission-line fidelity studies on mixed inverter / machine grids."""

from gridline.core import (
    ComplexDQ,
    ConfigError,
    DomainError,
    GridlineError,
    InitError,
    PerUnitBase,
    TopologyError,
)

__version__ = "0.1.0"

__all__ = [
    "ComplexDQ",
    "ConfigError",
    "DomainError",
    "GridlineError",
    "InitError",
    "PerUnitBase",
    "TopologyError",
    "__version__",
]
