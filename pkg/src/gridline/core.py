"""Shared primitives: dq complex values, per-unit bases, topology checks, labels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


class GridlineError(Exception):
    """Base class for all package errors."""


class ConfigError(GridlineError):
    pass


class DomainError(GridlineError, ValueError):
    pass


class TopologyError(GridlineError):
    pass


class InitError(GridlineError):
    """Raised when an equilibrium cannot be constructed.

    ``residual`` carries the worst residual norm and ``label`` the state or
    equation responsible, when known.
    """

    def __init__(self, message: str, residual: float | None = None, label: str | None = None):
        super().__init__(message)
        self.residual = residual
        self.label = label


class ConvergenceError(GridlineError):
    def __init__(self, message: str, mismatch: float | None = None):
        super().__init__(message)
        self.mismatch = mismatch


@dataclass(frozen=True)
class ComplexDQ:
    """A balanced quantity in a rotating frame, ``re`` on the d/R axis and ``im`` on q/I."""

    re: float
    im: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.re) and math.isfinite(self.im)):
            raise DomainError(f"non-finite dq component ({self.re}, {self.im})")

    @classmethod
    def of(cls, value) -> "ComplexDQ":
        if isinstance(value, ComplexDQ):
            return value
        z = complex(value)
        return cls(z.real, z.imag)

    @classmethod
    def polar(cls, mag: float, angle: float) -> "ComplexDQ":
        return cls.of(mag * np.exp(1j * angle))

    def __complex__(self) -> complex:
        return complex(self.re, self.im)

    def norm(self) -> float:
        return math.hypot(self.re, self.im)

    def conj(self) -> "ComplexDQ":
        return ComplexDQ(self.re, -self.im)

    def rotate(self, angle: float) -> "ComplexDQ":
        return ComplexDQ.of(complex(self) * np.exp(1j * angle))

    def __add__(self, other):
        return ComplexDQ.of(complex(self) + complex(ComplexDQ.of(other)))

    __radd__ = __add__

    def __sub__(self, other):
        return ComplexDQ.of(complex(self) - complex(ComplexDQ.of(other)))

    def __rsub__(self, other):
        return ComplexDQ.of(complex(ComplexDQ.of(other)) - complex(self))

    def __mul__(self, other):
        return ComplexDQ.of(complex(self) * complex(ComplexDQ.of(other)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return ComplexDQ.of(complex(self) / complex(ComplexDQ.of(other)))

    def __rtruediv__(self, other):
        return ComplexDQ.of(complex(ComplexDQ.of(other)) / complex(self))

    def __neg__(self):
        return ComplexDQ(-self.re, -self.im)


@dataclass(frozen=True)
class PerUnitBase:
    s_base: float = 100e6
    v_base: float = 230e3
    f_base: float = 60.0

    def __post_init__(self):
        for name in ("s_base", "v_base", "f_base"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ConfigError(f"per-unit base {name} must be positive, got {value}")

    @property
    def omega_base(self) -> float:
        return 2.0 * math.pi * self.f_base

    @property
    def z_base(self) -> float:
        return self.v_base**2 / self.s_base

    @property
    def i_base(self) -> float:
        return self.s_base / (math.sqrt(3.0) * self.v_base)

    def base_of(self, kind: str) -> float:
        try:
            return {
                "impedance": self.z_base,
                "admittance": 1.0 / self.z_base,
                "power": self.s_base,
                "voltage": self.v_base,
                "current": self.i_base,
            }[kind]
        except KeyError:
            raise ConfigError(f"unknown per-unit quantity kind {kind!r}") from None


def per_unitize(value, base: PerUnitBase, kind: str):
    return value / base.base_of(kind)


def de_per_unitize(value, base: PerUnitBase, kind: str):
    return value * base.base_of(kind)


@dataclass(frozen=True)
class Bus:
    id: int
    base_kv: float = 230.0


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: int
    to_bus: int
    line: str = "line"
    in_service: bool = True


@dataclass(frozen=True)
class Placement:
    id: str
    kind: str
    reference: bool = False


@dataclass(frozen=True)
class Topology:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    devices: dict[int, tuple[Placement, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class TopologyReport:
    errors: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.errors

    def raise_if_failed(self):
        if self.errors:
            raise TopologyError("; ".join(self.errors))


def validate_topology(t: Topology) -> TopologyReport:
    errors: list[str] = []
    bus_ids = [b.id for b in t.buses]
    if len(set(bus_ids)) != len(bus_ids):
        errors.append("duplicate bus ids")
    branch_ids = [b.id for b in t.branches]
    if len(set(branch_ids)) != len(branch_ids):
        errors.append("duplicate branch ids")
    device_ids = [p.id for ps in t.devices.values() for p in ps]
    if len(set(device_ids)) != len(device_ids):
        errors.append("duplicate device ids")

    known = set(bus_ids)
    for br in t.branches:
        if br.from_bus not in known or br.to_bus not in known:
            errors.append(f"dangling branch {br.id}: ({br.from_bus}, {br.to_bus})")
        elif br.from_bus == br.to_bus:
            errors.append(f"branch {br.id} is a self loop")
    for bus in t.devices:
        if bus not in known:
            errors.append(f"devices placed at unknown bus {bus}")

    n_ref = sum(p.reference for ps in t.devices.values() for p in ps)
    if n_ref == 0:
        errors.append("missing reference device")
    elif n_ref > 1:
        errors.append("multiple references")

    if bus_ids and not any("dangling" in e for e in errors):
        if not is_connected(bus_ids, [(b.from_bus, b.to_bus) for b in t.branches if b.in_service]):
            errors.append("islanding: network is not connected over in-service branches")
    return TopologyReport(tuple(errors))


def is_connected(nodes: Iterable[int], edges: Iterable[tuple[int, int]]) -> bool:
    nodes = list(nodes)
    pos = {b: k for k, b in enumerate(nodes)}
    edges = list(edges)
    if len(nodes) <= 1:
        return True
    rows = [pos[a] for a, _ in edges]
    cols = [pos[b] for _, b in edges]
    graph = coo_matrix((np.ones(len(edges)), (rows, cols)), shape=(len(nodes), len(nodes)))
    n_comp, _ = connected_components(graph, directed=False)
    return n_comp == 1


@dataclass(frozen=True)
class StateLabel:
    owner: str
    name: str
    index: int

    def __str__(self) -> str:
        return f"{self.owner}.{self.name}"
