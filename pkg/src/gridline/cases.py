"""Built-in test cases, surge impedance loading and load/line scaling."""

from __future__ import annotations

import sys
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from gridline.core import ConfigError, DomainError
from gridline.lines import FittedBranches, LineData, LineKind, LinePULParams
from gridline.network import BranchSpec, LoadSpec, NetworkSpec, SourceSpec

DEFAULT_SEGMENTS = 4
TWO_BUS_LENGTH_KM = 100.0
SOURCE_KINDS = ("sm", "gfm")


def _data_text(name: str) -> str:
    return resources.files("gridline.data").joinpath(name).read_text(encoding="utf-8")


def load_line_data(path=None) -> LineData:
    """Line constants from a TOML file (the shipped default when ``path`` is None)."""
    try:
        text = _data_text("line_default.toml") if path is None else open(path, encoding="utf-8").read()
        doc = tomllib.loads(text)
        br = doc["branches"]
        return LineData(FittedBranches(tuple(map(float, br["r"])), tuple(map(float, br["l"]))),
                        float(doc["c_km"]), float(doc.get("omega0", 1.0)))
    except (KeyError, TypeError, ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"bad line data file {path or 'line_default.toml'}: {exc}") from None


@dataclass(frozen=True)
class CaseSpec:
    """A named case at nominal values plus the scales and line kind to apply."""

    name: str
    buses: tuple[int, ...]
    branches: tuple[BranchSpec, ...]
    sources: tuple[SourceSpec, ...]
    loads: tuple[LoadSpec, ...]
    line_data: LineData
    kind: LineKind = LineKind("statpi")
    load_scale: float = 1.0
    line_scale: float = 1.0

    def __post_init__(self):
        if not (self.load_scale > 0 and self.line_scale > 0):
            raise DomainError("load and line scales must be positive")

    def network(self) -> NetworkSpec:
        kind = self.kind
        if kind.segmented and kind.n_segments is None:
            kind = replace(kind, n_segments=DEFAULT_SEGMENTS)
        ls, ln = self.load_scale, self.line_scale
        branches = tuple(replace(b, length_km=b.length_km * ln) if b.is_line else b
                         for b in self.branches)
        loads = tuple(replace(ld, p_load=ld.p_load * ls, q_load=ld.q_load * ls) for ld in self.loads)
        sources = tuple(replace(s, p_set=s.p_set * ls) for s in self.sources)
        return NetworkSpec(self.name, self.buses, branches, sources, loads, self.line_data, kind)

    @property
    def label(self) -> str:
        return f"{self.name}[{self.kind}] load x{self.load_scale:g} line x{self.line_scale:g}"


def apply_scales(c: CaseSpec, load_scale: float, line_scale: float) -> CaseSpec:
    """Scale loads and generator setpoints by ``load_scale`` and line lengths by ``line_scale``.

    Scales compose multiplicatively.
    """
    if not (load_scale > 0 and line_scale > 0):
        raise DomainError("scales must be positive")
    return replace(c, load_scale=c.load_scale * load_scale, line_scale=c.line_scale * line_scale)


def with_kind(c: CaseSpec, kind) -> CaseSpec:
    if isinstance(kind, str):
        kind = LineKind.parse(kind)
    return replace(c, kind=kind)


def compute_sil(v_nom: float, p: LinePULParams, omega0: float = 1.0) -> tuple[float, float]:
    """Surge impedance loading ``V**2 / Z_c`` with the lossy, complex ``Z_c``."""
    if p.c_km <= 0:
        raise DomainError("surge impedance needs c_km > 0")
    z_c = np.sqrt(p.z_km(omega0) / p.y_km(omega0))
    s = v_nom**2 / z_c
    return float(s.real), float(s.imag)


def build_two_bus(sources: tuple[str, str] = ("gfm", "sm"), load_bus: int = 1,
                  line_data: LineData | None = None, rating: float = 2.0) -> CaseSpec:
    """Two buses joined by two identical 100 km lines, loaded at the SIL.

    The source at bus 1 is the reference; the other source carries half the
    load at nominal dispatch.
    """
    kinds = tuple(k.lower() for k in sources)
    if len(kinds) != 2 or any(k not in SOURCE_KINDS for k in kinds):
        raise DomainError(f"two-bus sources must be two of {SOURCE_KINDS}, got {sources}")
    if load_bus not in (1, 2):
        raise DomainError("load bus must be 1 or 2")
    data = line_data or load_line_data()
    p_load, q_load = compute_sil(1.0, data.pul(), data.omega0)
    names = [f"{k}{b}" for k, b in zip(kinds, (1, 2))]
    srcs = (
        SourceSpec(names[0], 1, kinds[0], 0.0, 1.0, reference=True, rating=rating),
        SourceSpec(names[1], 2, kinds[1], 0.5 * p_load, 1.0, rating=rating),
    )
    branches = tuple(BranchSpec(f"L{k}", 1, 2, TWO_BUS_LENGTH_KM) for k in (1, 2))
    loads = (LoadSpec(f"load{load_bus}", load_bus, p_load, q_load),)
    tag = "v".join(k.upper() for k in kinds)
    return CaseSpec(f"two_bus_{tag}_load{load_bus}", (1, 2), branches, srcs, loads, data)


def build_ieee9(kinds: dict[int, str] | None = None, path=None,
                line_data: LineData | None = None) -> CaseSpec:
    """Nine-bus case from the shipped data file; ``kinds`` overrides source kinds by bus."""
    try:
        text = _data_text("ieee9.toml") if path is None else open(path, encoding="utf-8").read()
        doc = tomllib.loads(text)
        branches = [BranchSpec(str(b["id"]), int(b["from"]), int(b["to"]), float(b["length_km"]))
                    for b in doc.get("branch", [])]
        branches += [BranchSpec(str(t["id"]), int(t["from"]), int(t["to"]),
                                impedance=complex(float(t.get("r", 0.0)), float(t["x"])))
                     for t in doc.get("transformer", [])]
        loads = tuple(LoadSpec(str(ld["id"]), int(ld["bus"]), float(ld["p"]), float(ld.get("q", 0.0)))
                      for ld in doc.get("load", []))
        sources = []
        for s in doc.get("source", []):
            kind = (kinds or {}).get(int(s["bus"]), s["kind"]).lower()
            sources.append(SourceSpec(f"{kind}{s['bus']}", int(s["bus"]), kind,
                                      float(s.get("p_set", 0.0)), float(s.get("v_set", 1.0)),
                                      bool(s.get("reference", False)), float(s.get("rating", 1.0))))
        buses = tuple(int(b) for b in doc["buses"])
        name = str(doc.get("name", "ieee9"))
    except (KeyError, TypeError, ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"bad case file {path or 'ieee9.toml'}: {exc}") from None
    return CaseSpec(name, buses, tuple(branches), tuple(sources), loads,
                    line_data or load_line_data())


PRESETS = {
    "two_bus": lambda: build_two_bus(("gfm", "sm"), 1),
    "two_bus_gfm_sm_load1": lambda: build_two_bus(("gfm", "sm"), 1),
    "two_bus_gfm_sm_load2": lambda: build_two_bus(("gfm", "sm"), 2),
    "two_bus_sm_sm_load2": lambda: build_two_bus(("sm", "sm"), 2),
    "two_bus_gfm_gfm_load1": lambda: build_two_bus(("gfm", "gfm"), 1),
    "ieee9": lambda: build_ieee9(),
}


def preset(name: str) -> CaseSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown case {name!r}; choose from {sorted(PRESETS)}") from None
