"""Transmission-line representations and their parameter pipeline.

Four models share one set of per-unit-length data:

* ``statpi``  algebraic equivalent pi with hyperbolic correction,
* ``dynpi``   the same pi with inductor and capacitor dynamics,
* ``mssb``    N identical uncorrected pi segments in cascade,
* ``msmb``    N segments whose series element is M parallel RL branches.

The fitted MSMB branches are the source data; their parallel equivalent at
nominal frequency fixes ``z_km`` for the other three, so every model presents
the same impedance to the power flow.

Frequencies are normalized by the base frequency (``omega = 1`` is nominal)
and inductances/capacitances are per-unit reactances/susceptances at that
frequency, so an element contributes ``r + j*omega*l`` and ``j*omega*c``.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gridline.core import ComplexDQ, ConfigError, DomainError

# cosh/sinh of arguments beyond this overflow float64
_MAX_GAMMA_L = 700.0


@dataclass(frozen=True)
class LinePULParams:
    r_km: float
    l_km: float
    c_km: float
    g_km: float = 0.0

    def __post_init__(self):
        if self.r_km < 0 or self.l_km <= 0 or self.c_km <= 0:
            raise DomainError(f"invalid per-km line constants {self}")
        if self.g_km != 0.0:
            raise DomainError("shunt conductance per km must be zero")

    def z_km(self, omega: float = 1.0) -> complex:
        return complex(self.r_km, omega * self.l_km)

    def y_km(self, omega: float = 1.0) -> complex:
        return complex(self.g_km, omega * self.c_km)


@dataclass(frozen=True)
class EquivalentPi:
    """Lumped pi section; ``y_end`` is the admittance placed at *each* end."""

    z_pi: complex
    y_end: complex
    omega: float = 1.0

    @property
    def r_pi(self) -> float:
        return self.z_pi.real

    @property
    def l_pi(self) -> float:
        return self.z_pi.imag / self.omega

    @property
    def c_end(self) -> float:
        return self.y_end.imag / self.omega

    @property
    def c_pi(self) -> float:
        return 2.0 * self.c_end


def hyperbolic_pi(p: LinePULParams, length_km: float, omega: float = 1.0,
                  zero_shunt_conductance: bool = True) -> EquivalentPi:
    """Equivalent pi of a distributed line at one frequency.

    With ``zero_shunt_conductance`` (the default) the small conductance the
    correction factor introduces into the shunt branch is discarded.
    """
    if not length_km > 0:
        raise DomainError(f"line length must be positive, got {length_km}")
    z = p.z_km(omega)
    y = p.y_km(omega)
    gl = np.sqrt(z * y) * length_km
    if abs(gl.real) > _MAX_GAMMA_L:
        raise DomainError(f"propagation constant overflows for length {length_km} km")
    z_pi = z * length_km * (np.sinh(gl) / gl)
    y_tot = y * length_km * (np.tanh(gl / 2) / (gl / 2))
    y_end = complex(y_tot / 2)
    if zero_shunt_conductance:
        y_end = complex(0.0, y_end.imag)
    return EquivalentPi(complex(z_pi), y_end, omega)


def lumped_pi(p: LinePULParams, length_km: float, omega: float = 1.0) -> EquivalentPi:
    """Uncorrected pi: total series impedance and half the total shunt at each end."""
    if not length_km > 0:
        raise DomainError(f"line length must be positive, got {length_km}")
    return EquivalentPi(p.z_km(omega) * length_km, p.y_km(omega) * length_km / 2, omega)


@dataclass(frozen=True)
class SegmentParams:
    r_seg: float
    l_seg: float
    c_seg: float
    seg_length: float
    n_segments: int


def segment_params(p: LinePULParams, length_km: float, n: int) -> SegmentParams:
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise DomainError(f"segment count must be a positive integer, got {n}")
    if not length_km > 0:
        raise DomainError(f"line length must be positive, got {length_km}")
    ls = length_km / n
    return SegmentParams(p.r_km * ls, p.l_km * ls, p.c_km * ls, ls, int(n))


@dataclass(frozen=True)
class FittedBranches:
    """Parallel RL branches per km; branch m has impedance ``r[m] + s*l[m]``."""

    r: tuple[float, ...]
    l: tuple[float, ...]

    def __post_init__(self):
        if len(self.r) != len(self.l) or len(self.r) < 1:
            raise DomainError("fitted branches need matching, non-empty r and l")
        object.__setattr__(self, "r", tuple(float(v) for v in self.r))
        object.__setattr__(self, "l", tuple(float(v) for v in self.l))

    @property
    def m(self) -> int:
        return len(self.r)

    @property
    def poles(self) -> np.ndarray:
        return -np.asarray(self.r) / np.asarray(self.l)

    def admittance(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=complex)
        return sum(1.0 / (rm + s * lm) for rm, lm in zip(self.r, self.l))


def parallel_equivalent(f: FittedBranches, omega0: float = 1.0) -> complex:
    total = 0j
    for rm, lm in zip(f.r, f.l):
        zm = complex(rm, omega0 * lm)
        if zm == 0:
            raise DomainError("singular branch: r_m = l_m = 0")
        total += 1.0 / zm
    return 1.0 / total


@dataclass(frozen=True)
class LineData:
    """Source data for every line model: fitted series branches plus shunt capacitance."""

    branches: FittedBranches
    c_km: float
    omega0: float = 1.0

    def pul(self) -> LinePULParams:
        z = parallel_equivalent(self.branches, self.omega0)
        return LinePULParams(z.real, z.imag / self.omega0, self.c_km)

    @classmethod
    def single(cls, p: LinePULParams) -> "LineData":
        return cls(FittedBranches((p.r_km,), (p.l_km,)), p.c_km)


@dataclass(frozen=True)
class LineKind:
    name: str
    n_segments: int | None = None
    n_branches: int | None = None

    NAMES = ("statpi", "dynpi", "mssb", "msmb")

    def __post_init__(self):
        if self.name not in self.NAMES:
            raise ConfigError(f"unknown line kind {self.name!r}")
        if self.name in ("mssb", "msmb") and self.n_segments is not None and self.n_segments < 1:
            raise ConfigError("segment count must be >= 1")

    @property
    def dynamic(self) -> bool:
        return self.name != "statpi"

    @property
    def segmented(self) -> bool:
        return self.name in ("mssb", "msmb")

    def __str__(self) -> str:
        if self.name == "mssb" and self.n_segments:
            return f"mssb:{self.n_segments}"
        if self.name == "msmb" and self.n_segments:
            return f"msmb:{self.n_segments}"
        return self.name

    @classmethod
    def parse(cls, text: str) -> "LineKind":
        m = re.fullmatch(r"\s*(statpi|dynpi|mssb|msmb)(?::(\d+|auto))?\s*", text.lower())
        if not m:
            raise ConfigError(f"cannot parse line kind {text!r}")
        n = m.group(2)
        return cls(m.group(1), None if n in (None, "auto") else int(n))


# ----------------------------------------------------------------------------
# algebraic pi


def statpi_port_currents(pi: EquivalentPi, v1, v2) -> tuple[ComplexDQ, ComplexDQ]:
    """Current into terminal 1 and out of terminal 2 of an algebraic pi."""
    v1 = complex(ComplexDQ.of(v1))
    v2 = complex(ComplexDQ.of(v2))
    ys = 1.0 / pi.z_pi
    i_in = (ys + pi.y_end) * v1 - ys * v2
    i_out = ys * v1 - (ys + pi.y_end) * v2
    return ComplexDQ.of(i_in), ComplexDQ.of(i_out)


# ----------------------------------------------------------------------------
# dynamic ladders


@dataclass
class LineState:
    """Dynamic line state.

    ``currents[i, m]`` is the current of branch m in segment i (from node i to
    node i+1); ``voltages[k]`` the voltage of node k, terminals at 0 and N.
    """

    currents: np.ndarray
    voltages: np.ndarray

    def __post_init__(self):
        self.currents = np.atleast_2d(np.asarray(self.currents, dtype=complex))
        self.voltages = np.asarray(self.voltages, dtype=complex).ravel()
        if self.voltages.size != self.currents.shape[0] + 1:
            raise DomainError("ladder state needs N+1 node voltages for N segments")

    @classmethod
    def zeros(cls, n: int, m: int = 1) -> "LineState":
        return cls(np.zeros((n, m), complex), np.zeros(n + 1, complex))

    @property
    def segment_currents(self) -> np.ndarray:
        return self.currents.sum(axis=1)

    @property
    def n_real_states(self) -> int:
        return 2 * (self.currents.size + self.voltages.size)

    def to_real(self) -> np.ndarray:
        z = np.concatenate([self.currents.ravel(), self.voltages])
        return np.column_stack([z.real, z.imag]).ravel()

    @classmethod
    def from_real(cls, x: np.ndarray, n: int, m: int = 1) -> "LineState":
        z = x[0::2] + 1j * x[1::2]
        return cls(z[: n * m].reshape(n, m), z[n * m:])

    def __sub__(self, other: "LineState") -> "LineState":
        return LineState(self.currents - other.currents, self.voltages - other.voltages)


def ladder_node_caps(c_seg: float, n: int) -> np.ndarray:
    caps = np.full(n + 1, c_seg)
    caps[0] = caps[-1] = c_seg / 2
    return caps


def _ladder_rhs(state: LineState, r: np.ndarray, l: np.ndarray, caps: np.ndarray,
                i_in, i_out, omega_sys: float, omega_base: float) -> LineState:
    i = state.currents
    v = state.voltages
    dv_seg = v[:-1] - v[1:]
    di = omega_base / l * (dv_seg[:, None] - (r + 1j * omega_sys * l) * i)
    seg = i.sum(axis=1)
    inflow = np.concatenate([[complex(ComplexDQ.of(i_in))], seg])
    outflow = np.concatenate([seg, [complex(ComplexDQ.of(i_out))]])
    dv = omega_base / caps * (inflow - outflow - 1j * omega_sys * caps * v)
    return LineState(di, dv)


def dynpi_rhs(state: LineState, pi: EquivalentPi, i_in, i_out, omega_sys: float = 1.0,
              omega_base: float = 2 * math.pi * 60) -> LineState:
    caps = np.array([pi.c_end, pi.c_end])
    return _ladder_rhs(state, np.array([pi.r_pi]), np.array([pi.l_pi]), caps,
                       i_in, i_out, omega_sys, omega_base)


def mssb_rhs(state: LineState, seg: SegmentParams, i_in, i_out, omega_sys: float = 1.0,
             omega_base: float = 2 * math.pi * 60) -> LineState:
    caps = ladder_node_caps(seg.c_seg, seg.n_segments)
    return _ladder_rhs(state, np.array([seg.r_seg]), np.array([seg.l_seg]), caps,
                       i_in, i_out, omega_sys, omega_base)


def msmb_segment_branches(f: FittedBranches, seg_length: float) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(f.r) * seg_length, np.asarray(f.l) * seg_length


def msmb_rhs(state: LineState, r_seg_m, l_seg_m, c_seg: float, i_in, i_out,
             omega_sys: float = 1.0, omega_base: float = 2 * math.pi * 60) -> LineState:
    """Ladder whose segment series element is M parallel RL branches.

    ``r_seg_m``/``l_seg_m`` hold the per-segment branch values (length M).
    """
    n = state.currents.shape[0]
    caps = ladder_node_caps(c_seg, n)
    return _ladder_rhs(state, np.asarray(r_seg_m, float), np.asarray(l_seg_m, float), caps,
                       i_in, i_out, omega_sys, omega_base)


# ----------------------------------------------------------------------------
# element expansion shared by network assembly and frequency response


@dataclass(frozen=True)
class LineElements:
    """A line as primitive elements between local nodes 0..n_nodes-1.

    Node 0 is the sending terminal and node ``n_nodes - 1`` the receiving one.
    Dynamic branches carry inductor current states; ``static`` holds
    algebraic two-port admittance blocks ``(a, b, Y2x2)``.
    """

    n_nodes: int
    caps: np.ndarray
    br_from: np.ndarray
    br_to: np.ndarray
    br_r: np.ndarray
    br_l: np.ndarray
    br_segment: np.ndarray
    static: tuple = field(default_factory=tuple)


def line_elements(kind: LineKind, data: LineData, length_km: float,
                  n_segments: int | None = None) -> LineElements:
    n_segments = n_segments or kind.n_segments
    if kind.name in ("statpi", "dynpi"):
        pi = hyperbolic_pi(data.pul(), length_km, data.omega0)
        if kind.name == "statpi":
            ys = 1.0 / pi.z_pi
            y2 = np.array([[ys + pi.y_end, -ys], [-ys, ys + pi.y_end]])
            return LineElements(2, np.zeros(2), *(np.zeros(0, int),) * 2, *(np.zeros(0),) * 2,
                                np.zeros(0, int), ((0, 1, y2),))
        return LineElements(2, np.array([pi.c_end, pi.c_end]), np.array([0]), np.array([1]),
                            np.array([pi.r_pi]), np.array([pi.l_pi]), np.array([0]))
    if n_segments is None:
        raise ConfigError(f"{kind.name} requires a segment count")
    if kind.name == "mssb":
        seg = segment_params(data.pul(), length_km, n_segments)
        r_m, l_m = np.array([seg.r_seg]), np.array([seg.l_seg])
        c_seg = seg.c_seg
    else:
        seg_len = length_km / n_segments
        r_m, l_m = msmb_segment_branches(data.branches, seg_len)
        c_seg = data.c_km * seg_len
    m = r_m.size
    seg_idx = np.repeat(np.arange(n_segments), m)
    return LineElements(
        n_segments + 1,
        ladder_node_caps(c_seg, n_segments),
        seg_idx.copy(),
        seg_idx + 1,
        np.tile(r_m, n_segments),
        np.tile(l_m, n_segments),
        seg_idx,
    )


def nodal_admittance(el: LineElements, omega: float) -> np.ndarray:
    y = np.zeros((el.n_nodes, el.n_nodes), complex)
    y[np.diag_indices(el.n_nodes)] += 1j * omega * el.caps
    yb = 1.0 / (el.br_r + 1j * omega * el.br_l)
    np.add.at(y, (el.br_from, el.br_from), yb)
    np.add.at(y, (el.br_to, el.br_to), yb)
    np.add.at(y, (el.br_from, el.br_to), -yb)
    np.add.at(y, (el.br_to, el.br_from), -yb)
    for a, b, y2 in el.static:
        y[np.ix_([a, b], [a, b])] += y2
    return y


def two_port_admittance(el: LineElements, omega: float) -> np.ndarray:
    """Kron-reduce the ladder onto its two terminals."""
    y = nodal_admittance(el, omega)
    t = [0, el.n_nodes - 1]
    inner = list(range(1, el.n_nodes - 1))
    if not inner:
        return y
    return y[np.ix_(t, t)] - y[np.ix_(t, inner)] @ np.linalg.solve(y[np.ix_(inner, inner)],
                                                                  y[np.ix_(inner, t)])


@dataclass(frozen=True)
class FrequencyResponse:
    omega: np.ndarray
    z: np.ndarray
    singular: np.ndarray


def line_frequency_response(kind: LineKind, data: LineData, length_km: float, omega,
                            n_segments: int | None = None) -> FrequencyResponse:
    """Driving-point impedance at the sending end with the far end shorted.

    Lumped pi models are evaluated as circuits (their elements fixed at
    nominal frequency); samples where the nodal matrix is singular are
    returned as NaN and flagged.
    """
    omega = np.asarray(omega, dtype=float)
    if np.any(omega <= 0):
        raise DomainError("frequency grid must be strictly positive")
    if kind.name == "statpi":
        # algebraic pi as an RLC circuit
        pi = hyperbolic_pi(data.pul(), length_km, data.omega0)
        el = LineElements(2, np.array([pi.c_end, pi.c_end]), np.array([0]), np.array([1]),
                          np.array([pi.r_pi]), np.array([pi.l_pi]), np.array([0]))
    else:
        el = line_elements(kind, data, length_km, n_segments)
    z = np.full(omega.shape, np.nan + 0j)
    singular = np.zeros(omega.shape, bool)
    drive = np.arange(el.n_nodes - 1)
    for k, w in enumerate(omega):
        y = nodal_admittance(el, w)[np.ix_(drive, drive)]
        rhs = np.zeros(drive.size, complex)
        rhs[0] = 1.0
        try:
            v = np.linalg.solve(y, rhs)
        except np.linalg.LinAlgError:
            singular[k] = True
            continue
        if not np.isfinite(v[0]) or np.linalg.cond(y) > 1e14:
            singular[k] = True
            continue
        z[k] = v[0]
    return FrequencyResponse(omega, z, singular)


# ----------------------------------------------------------------------------
# segment count rule


def select_segment_count(case, max_device_mode_hz: float, cap: int = 64,
                         participation_threshold: float = 0.5) -> int:
    """Smallest MSSB segment count whose fastest line mode reaches the device modes.

    ``case`` is a :class:`gridline.cases.CaseSpec`; every candidate N is
    linearized as part of the full system and the line-dominated modes are
    picked out by participation.
    """
    from gridline.cases import with_kind
    from gridline.smallsignal import line_mode_frequencies, small_signal

    if max_device_mode_hz < 0:
        raise DomainError("target frequency must be non-negative")
    achieved = 0.0
    for n in range(1, cap + 1):
        if max_device_mode_hz == 0:
            return n
        res = small_signal(with_kind(case, LineKind("mssb", n)))
        freqs = line_mode_frequencies(res, participation_threshold)
        achieved = float(freqs.max()) if freqs.size else 0.0
        if achieved >= max_device_mode_hz:
            return n
    raise DomainError(f"segment cap {cap} reached; fastest line mode {achieved:.1f} Hz "
                      f"< target {max_device_mode_hz:.1f} Hz")


# ----------------------------------------------------------------------------
# parameter files

_PUL_HEADER = ["r_pu_per_km", "l_pu_per_km", "c_pu_per_km"]


def write_pul_params(path, p: LinePULParams) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(_PUL_HEADER)
        w.writerow([repr(p.r_km), repr(p.l_km), repr(p.c_km)])


def read_pul_params(path) -> LinePULParams:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != _PUL_HEADER or len(rows) < 2:
        raise ConfigError(f"{path}: expected header {','.join(_PUL_HEADER)} and one data row")
    try:
        r, l, c = (float(v) for v in rows[1])
    except ValueError as exc:
        raise ConfigError(f"{path}:2: {exc}") from None
    return LinePULParams(r, l, c)
