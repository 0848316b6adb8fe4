"""Network assembly, power flow and equilibrium initialization.

The network is flattened into primitive elements on a global node list: bus
nodes first, then line-internal nodes.  Dynamic RL branches carry current
states, nodes with capacitance carry voltage states, and static admittances
(algebraic pi lines, transformers, loads) enter the nodal balance directly.
Nodes without capacitance are algebraic; since every device injects a
current that depends only on its own states, their voltages follow from one
linear solve per evaluation.

Terminal capacitors of all lines meeting at a bus are merged into a single
bus-voltage state.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from gridline.core import (Branch, Bus, ConfigError, ConvergenceError, DomainError, InitError,
                           Placement, Topology, TopologyError, validate_topology)
from gridline.devices import OMEGA_BASE, Device, make_device
from gridline.lines import LineData, LineKind, hyperbolic_pi, line_elements, two_port_admittance

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BranchSpec:
    """A transmission line (``length_km``) or a lumped series branch (``impedance``)."""

    id: str
    from_bus: int
    to_bus: int
    length_km: float = 0.0
    impedance: complex | None = None
    in_service: bool = True

    @property
    def is_line(self) -> bool:
        return self.impedance is None


@dataclass(frozen=True)
class SourceSpec:
    id: str
    bus: int
    kind: str
    p_set: float = 0.0
    v_set: float = 1.0
    reference: bool = False
    rating: float = 1.0
    overrides: tuple[tuple[str, float], ...] = ()

    def device(self) -> Device:
        return make_device(self.id, self.kind, dict(self.overrides), rating=self.rating)


@dataclass(frozen=True)
class LoadSpec:
    id: str
    bus: int
    p_load: float
    q_load: float = 0.0
    v_nom: float = 1.0

    @property
    def admittance(self) -> complex:
        return complex(self.p_load, -self.q_load) / abs(self.v_nom) ** 2


@dataclass(frozen=True)
class NetworkSpec:
    """Everything needed to assemble a system, with scales already applied."""

    name: str
    buses: tuple[int, ...]
    branches: tuple[BranchSpec, ...]
    sources: tuple[SourceSpec, ...]
    loads: tuple[LoadSpec, ...]
    line_data: LineData
    kind: LineKind

    def topology(self) -> Topology:
        devices: dict[int, tuple[Placement, ...]] = {}
        for s in self.sources:
            devices[s.bus] = devices.get(s.bus, ()) + (Placement(s.id, s.kind, s.reference),)
        return Topology(tuple(Bus(b) for b in self.buses),
                        tuple(Branch(b.id, b.from_bus, b.to_bus, "line" if b.is_line else "xfmr",
                                     b.in_service) for b in self.branches),
                        devices)

    @property
    def reference(self) -> SourceSpec:
        return next(s for s in self.sources if s.reference)

    def active_branches(self) -> tuple[BranchSpec, ...]:
        return tuple(b for b in self.branches if b.in_service)

    def without_branch(self, branch_id: str) -> "NetworkSpec":
        if branch_id not in {b.id for b in self.active_branches()}:
            raise DomainError(f"branch {branch_id!r} is not in service")
        branches = tuple(replace(b, in_service=False) if b.id == branch_id else b
                         for b in self.branches)
        return replace(self, branches=branches)


def _as_network(case) -> NetworkSpec:
    if isinstance(case, NetworkSpec):
        return case
    if hasattr(case, "network"):
        return case.network()
    raise ConfigError(f"cannot assemble a system from {type(case).__name__}")


def check_network(spec: NetworkSpec) -> None:
    report = validate_topology(spec.topology())
    errors = list(report.errors)
    seen: set[int] = set()
    for s in spec.sources:
        if s.bus in seen:
            errors.append(f"more than one source at bus {s.bus}")
        seen.add(s.bus)
        if s.kind not in Device.KINDS:
            errors.append(f"unknown device kind {s.kind!r} for {s.id}")
    for b in spec.branches:
        if b.is_line and not b.length_km > 0:
            errors.append(f"line {b.id} needs a positive length")
        if not b.is_line and b.impedance == 0:
            errors.append(f"branch {b.id} has zero impedance")
    known = set(spec.buses)
    for ld in spec.loads:
        if ld.bus not in known:
            errors.append(f"load {ld.id} at unknown bus {ld.bus}")
    if errors:
        raise TopologyError("; ".join(errors))


# ----------------------------------------------------------------------------
# nodal admittance used by the power flow


def branch_two_port(spec: NetworkSpec, br: BranchSpec, exact: bool = False) -> np.ndarray:
    """Nominal-frequency 2x2 admittance of a branch.

    With ``exact`` the line is represented by its own kind's element network;
    otherwise by the hyperbolic pi shared by all kinds.
    """
    if not br.is_line:
        y = 1.0 / complex(br.impedance)
        return np.array([[y, -y], [-y, y]])
    if exact:
        return two_port_admittance(line_elements(spec.kind, spec.line_data, br.length_km), 1.0)
    pi = hyperbolic_pi(spec.line_data.pul(), br.length_km, spec.line_data.omega0)
    ys = 1.0 / pi.z_pi
    return np.array([[ys + pi.y_end, -ys], [-ys, ys + pi.y_end]])


def bus_admittance(spec: NetworkSpec, exact: bool = False, with_loads: bool = True) -> np.ndarray:
    pos = {b: k for k, b in enumerate(spec.buses)}
    y = np.zeros((len(pos), len(pos)), complex)
    for br in spec.active_branches():
        idx = [pos[br.from_bus], pos[br.to_bus]]
        y[np.ix_(idx, idx)] += branch_two_port(spec, br, exact)
    if with_loads:
        for ld in spec.loads:
            y[pos[ld.bus], pos[ld.bus]] += ld.admittance
    return y


# ----------------------------------------------------------------------------
# power flow


@dataclass(frozen=True)
class PowerFlowSolution:
    buses: tuple[int, ...]
    v: np.ndarray
    s_gen: np.ndarray
    injections: dict
    iterations: int
    mismatch: float

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.v)

    @property
    def va(self) -> np.ndarray:
        return np.angle(self.v)

    def voltage(self, bus: int) -> complex:
        return complex(self.v[self.buses.index(bus)])


def _newton_raphson(ybus, v0, slack, pv, p_spec, tol, max_iter):
    n = ybus.shape[0]
    pq = [k for k in range(n) if k != slack and k not in pv]
    non_slack = [k for k in range(n) if k != slack]
    v = v0.astype(complex).copy()
    s_spec = np.zeros(n, complex)
    for k, p in zip(pv, p_spec):
        s_spec[k] = p
    mismatch = np.inf
    for it in range(max_iter + 1):
        i = ybus @ v
        ds = v * np.conj(i) - s_spec
        f = np.concatenate([ds.real[non_slack], ds.imag[pq]])
        mismatch = float(np.max(np.abs(f))) if f.size else 0.0
        if mismatch < tol:
            return v, it, mismatch
        if not np.isfinite(mismatch):
            break
        vn = v / np.abs(v)
        ds_dva = 1j * np.diag(v) @ np.conj(np.diag(i) - ybus @ np.diag(v))
        ds_dvm = np.diag(v) @ np.conj(ybus @ np.diag(vn)) + np.conj(np.diag(i)) @ np.diag(vn)
        jac = np.block([
            [ds_dva.real[np.ix_(non_slack, non_slack)], ds_dvm.real[np.ix_(non_slack, pq)]],
            [ds_dva.imag[np.ix_(pq, non_slack)], ds_dvm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            break
        va = np.angle(v)
        vm = np.abs(v)
        va[non_slack] += dx[:len(non_slack)]
        vm[pq] += dx[len(non_slack):]
        v = vm * np.exp(1j * va)
    raise ConvergenceError(f"power flow did not converge (mismatch {mismatch:.3e})", mismatch)


# solutions below this voltage are treated as collapse, not operating points
PF_V_MIN = 0.5


def power_flow(case, tol: float = 1e-12, max_iter: int = 30, exact: bool = False,
               v0: np.ndarray | None = None) -> PowerFlowSolution:
    """Newton-Raphson power flow from a flat start.

    The reference source is the slack bus (angle 0), other sources are PV
    buses without reactive limits and loads enter the admittance matrix as
    constant impedances.  Lines use the nominal-frequency hyperbolic pi
    unless ``exact`` is set, so the solution does not depend on line kind.
    """
    spec = _as_network(getattr(case, "spec", case))
    check_network(spec)
    pos = {b: k for k, b in enumerate(spec.buses)}
    ybus = bus_admittance(spec, exact)
    ref = spec.reference
    slack = pos[ref.bus]
    others = [s for s in spec.sources if not s.reference]
    pv = [pos[s.bus] for s in others]
    if v0 is None:
        v0 = np.ones(len(pos), complex)
        for s in spec.sources:
            v0[pos[s.bus]] = s.v_set
    v0 = np.asarray(v0, complex).copy()
    v0[slack] = ref.v_set
    for s in others:
        v0[pos[s.bus]] = s.v_set * np.exp(1j * np.angle(v0[pos[s.bus]]))
    v, it, mismatch = _newton_raphson(ybus, v0, slack, pv, [s.p_set for s in others], tol, max_iter)
    if np.min(np.abs(v)) < PF_V_MIN:
        k = int(np.argmin(np.abs(v)))
        raise ConvergenceError(f"power flow reached a collapsed solution (bus {spec.buses[k]} "
                               f"at {abs(v[k]):.3g} pu)", mismatch)
    i_bus = ybus @ v
    passive = np.setdiff1d(np.arange(len(pos)), [pos[s.bus] for s in spec.sources])
    if passive.size and np.max(np.abs(i_bus[passive])) > 1e-6:
        raise ConvergenceError("power flow solution violates current balance at a passive bus",
                               mismatch)
    s_gen = v * np.conj(i_bus)
    injections = {s.id: complex(s_gen[pos[s.bus]]) for s in spec.sources}
    return PowerFlowSolution(tuple(spec.buses), v, s_gen, injections, it, mismatch)


def branch_flows(case, pf: PowerFlowSolution) -> dict[str, tuple[complex, complex]]:
    """Complex power entering each in-service branch at its two terminals."""
    spec = _as_network(getattr(case, "spec", case))
    out = {}
    for br in spec.active_branches():
        y2 = branch_two_port(spec, br)
        v = np.array([pf.voltage(br.from_bus), pf.voltage(br.to_bus)])
        s = v * np.conj(y2 @ v)
        out[br.id] = (complex(s[0]), complex(s[1]))
    return out


PF_HEADER = ("bus", "vm_pu", "va_rad", "p_pu", "q_pu")


def write_power_flow(path, pf: PowerFlowSolution) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PF_HEADER)
        for b, v, s in zip(pf.buses, pf.v, pf.s_gen):
            w.writerow([b, repr(float(abs(v))), repr(float(np.angle(v))), repr(float(s.real)),
                        repr(float(s.imag))])


def read_power_flow(path) -> list[tuple[int, float, float, float, float]]:
    rows = []
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != PF_HEADER:
            raise ConfigError(f"{path}:1: expected header {','.join(PF_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((int(row[0]), *(float(c) for c in row[1:5])))
            except (ValueError, IndexError):
                raise ConfigError(f"{path}:{lineno}: malformed row {row}") from None
    return rows


# ----------------------------------------------------------------------------
# system model


class SystemModel:
    """The assembled DAE ``dx/dt = f(x, y)``, ``0 = g(x, y)``.

    ``x`` holds device states, then branch currents, then capacitive node
    voltages (real and imaginary parts interleaved).  ``y`` holds the
    voltages of capacitance-free nodes.  All evaluators accept ``x`` of
    shape ``(n_x,)`` or ``(n_x, K)``.
    """

    def __init__(self, spec: NetworkSpec, omega_base: float = OMEGA_BASE):
        check_network(spec)
        self.spec = spec
        self.kind = spec.kind
        self.omega_base = omega_base
        self.buses = tuple(spec.buses)
        bus_pos = {b: k for k, b in enumerate(self.buses)}
        n_nodes = len(self.buses)
        node_names = [f"bus{b}" for b in self.buses]
        caps: list[float] = [0.0] * n_nodes
        br_from, br_to, br_r, br_l, br_names, br_owner = [], [], [], [], [], []
        y_static_entries = []

        for br in spec.active_branches():
            a, b = bus_pos[br.from_bus], bus_pos[br.to_bus]
            if not br.is_line:
                y = 1.0 / complex(br.impedance)
                y_static_entries.append((a, b, np.array([[y, -y], [-y, y]])))
                continue
            el = line_elements(spec.kind, spec.line_data, br.length_km)
            local = [a] + list(range(n_nodes, n_nodes + el.n_nodes - 2)) + [b]
            for k in range(1, el.n_nodes - 1):
                node_names.append(f"{br.id}.n{k}")
                caps.append(float(el.caps[k]))
            n_nodes += el.n_nodes - 2
            caps[a] += float(el.caps[0])
            caps[b] += float(el.caps[-1])
            m = el.br_r.size // max(1, int(el.br_segment.max(initial=0)) + 1) if el.br_r.size else 0
            for j in range(el.br_r.size):
                br_from.append(local[el.br_from[j]])
                br_to.append(local[el.br_to[j]])
                br_r.append(float(el.br_r[j]))
                br_l.append(float(el.br_l[j]))
                br_owner.append(br.id)
                if el.br_r.size == 1:
                    br_names.append(f"{br.id}")
                elif m == 1:
                    br_names.append(f"{br.id}.seg{el.br_segment[j]}")
                else:
                    br_names.append(f"{br.id}.seg{el.br_segment[j]}.b{j % m}")
            for la, lb, y2 in el.static:
                y_static_entries.append((local[la], local[lb], y2))

        self.n_nodes = n_nodes
        self.node_names = tuple(node_names)
        self.caps = np.array(caps)
        self.br_from = np.array(br_from, int)
        self.br_to = np.array(br_to, int)
        self.br_r = np.array(br_r)
        self.br_l = np.array(br_l)
        self.br_owner = tuple(br_owner)
        self.n_br = len(br_r)

        y_static = np.zeros((n_nodes, n_nodes), complex)
        for a, b, y2 in y_static_entries:
            y_static[np.ix_([a, b], [a, b])] += y2
        for ld in spec.loads:
            y_static[bus_pos[ld.bus], bus_pos[ld.bus]] += ld.admittance
        self.y_static = y_static
        inc = np.zeros((n_nodes, self.n_br))
        inc[self.br_from, np.arange(self.n_br)] = -1.0
        inc[self.br_to, np.arange(self.n_br)] = 1.0
        self.incidence = inc

        self.diff_nodes = np.flatnonzero(self.caps > 0)
        self.alg_nodes = np.flatnonzero(self.caps <= 0)

        # devices, in bus order
        self.sources = tuple(sorted(spec.sources, key=lambda s: bus_pos[s.bus]))
        self.devices = tuple(s.device() for s in self.sources)
        self.dev_node = np.array([bus_pos[s.bus] for s in self.sources], int)
        labels: list[str] = []
        self.dev_slices = []
        for dev in self.devices:
            start = len(labels)
            labels.extend(dev.state_label(n) for n in dev.state_names)
            self.dev_slices.append(slice(start, len(labels)))
        self.n_device_states = len(labels)
        off = len(labels)
        for name in br_names:
            labels.extend([f"{name}.i_d", f"{name}.i_q"])
        self.br_re = off + 2 * np.arange(self.n_br)
        self.br_im = self.br_re + 1
        off = len(labels)
        for k in self.diff_nodes:
            labels.extend([f"{node_names[k]}.v_d", f"{node_names[k]}.v_q"])
        self.vd_re = off + 2 * np.arange(self.diff_nodes.size)
        self.vd_im = self.vd_re + 1
        self.labels = tuple(labels)
        self.y_labels = tuple(f"{node_names[k]}.{c}" for k in self.alg_nodes for c in ("v_d", "v_q"))
        self.n_x = len(labels)
        self.n_y = len(self.y_labels)
        self.line_state_mask = np.zeros(self.n_x, bool)
        self.line_state_mask[self.n_device_states:] = True
        self._label_index = {lab: k for k, lab in enumerate(labels)}
        self.inputs: list | None = None

        self._lu = None
        if self.alg_nodes.size:
            y_aa = self.y_static[np.ix_(self.alg_nodes, self.alg_nodes)]
            if np.linalg.cond(y_aa) > 1e13:
                names = [node_names[k] for k in self.alg_nodes]
                raise TopologyError(f"algebraic node block is singular near {names}")
            self._lu = lu_factor(y_aa)
            self._y_ad = self.y_static[np.ix_(self.alg_nodes, self.diff_nodes)]

    # -- bookkeeping --------------------------------------------------------

    def index(self, label: str) -> int:
        try:
            return self._label_index[label]
        except KeyError:
            raise DomainError(f"unknown state label {label!r}") from None

    def device_index(self, name: str) -> int:
        for k, dev in enumerate(self.devices):
            if dev.name == name:
                return k
        raise DomainError(f"unknown device {name!r}")

    def device_states(self, x, name: str):
        return x[self.dev_slices[self.device_index(name)]]

    def set_input(self, name: str, **changes) -> None:
        k = self.device_index(name)
        self.inputs[k] = replace(self.inputs[k], **changes)

    def _require_inputs(self):
        if self.inputs is None:
            raise InitError("system has not been initialized")

    # -- evaluation ---------------------------------------------------------

    def _injections(self, x):
        shape = (self.n_nodes,) + np.shape(x)[1:]
        inj = np.zeros(shape, complex)
        for dev, sl, node in zip(self.devices, self.dev_slices, self.dev_node):
            inj[node] += dev.output_current(x[sl])
        return inj

    def _branch_currents(self, x):
        return x[self.br_re] + 1j * x[self.br_im]

    def solve_y(self, x) -> np.ndarray:
        """Algebraic node voltages consistent with ``x``."""
        x = np.asarray(x, float)
        if not self.alg_nodes.size:
            return np.zeros((0,) + x.shape[1:])
        inj = self._injections(x) + self.incidence @ self._branch_currents(x)
        v_d = x[self.vd_re] + 1j * x[self.vd_im]
        rhs = inj[self.alg_nodes] - self._y_ad @ v_d
        v_a = lu_solve(self._lu, rhs)
        y = np.empty((self.n_y,) + x.shape[1:])
        y[0::2] = v_a.real
        y[1::2] = v_a.imag
        return y

    def node_voltages(self, x, y=None) -> np.ndarray:
        x = np.asarray(x, float)
        if y is None:
            y = self.solve_y(x)
        v = np.zeros((self.n_nodes,) + x.shape[1:], complex)
        v[self.diff_nodes] = x[self.vd_re] + 1j * x[self.vd_im]
        v[self.alg_nodes] = y[0::2] + 1j * y[1::2]
        return v

    def bus_voltages(self, x, y=None) -> np.ndarray:
        return self.node_voltages(x, y)[: len(self.buses)]

    def _evaluate(self, x, y):
        self._require_inputs()
        x = np.asarray(x, float)
        v = self.node_voltages(x, y)
        dx = np.empty_like(x)
        node_current = -(self.y_static @ v)
        for dev, sl, node, u in zip(self.devices, self.dev_slices, self.dev_node, self.inputs):
            d, i = dev.rhs(x[sl], v[node], u)
            dx[sl] = d
            node_current[node] += i
        i_br = self._branch_currents(x)
        node_current += self.incidence @ i_br
        wb = self.omega_base
        if self.n_br:
            r = self.br_r.reshape((-1,) + (1,) * (x.ndim - 1))
            l = self.br_l.reshape(r.shape)
            d_i = wb / l * (v[self.br_from] - v[self.br_to] - (r + 1j * l) * i_br)
            dx[self.br_re] = d_i.real
            dx[self.br_im] = d_i.imag
        if self.diff_nodes.size:
            c = self.caps[self.diff_nodes].reshape((-1,) + (1,) * (x.ndim - 1))
            v_d = v[self.diff_nodes]
            d_v = wb / c * (node_current[self.diff_nodes] - 1j * c * v_d)
            dx[self.vd_re] = d_v.real
            dx[self.vd_im] = d_v.imag
        g_c = node_current[self.alg_nodes]
        g = np.empty((self.n_y,) + x.shape[1:])
        g[0::2] = g_c.real
        g[1::2] = g_c.imag
        return dx, g

    def f(self, x, y) -> np.ndarray:
        return self._evaluate(x, y)[0]

    def g(self, x, y) -> np.ndarray:
        return self._evaluate(x, y)[1]

    def rhs(self, x) -> np.ndarray:
        """State derivative with the algebraic voltages eliminated."""
        return self._evaluate(x, self.solve_y(x))[0]

    def residual(self, x, y=None) -> tuple[float, str]:
        """Worst entry of ``[f; g]`` and its label."""
        if y is None:
            y = self.solve_y(x)
        dx, g = self._evaluate(x, y)
        full = np.concatenate([dx, g])
        k = int(np.argmax(np.abs(full)))
        labels = self.labels + self.y_labels
        return float(abs(full[k])), labels[k]

    def jacobian(self, x, rel_step: float = 1e-7) -> np.ndarray:
        """Central-difference Jacobian of :meth:`rhs` (batched evaluation)."""
        x = np.asarray(x, float)
        h = np.maximum(rel_step, rel_step * np.abs(x))
        pert = np.diag(h)
        xs = np.concatenate([x[:, None] + pert, x[:, None] - pert], axis=1)
        fs = self.rhs(xs)
        return (fs[:, : self.n_x] - fs[:, self.n_x:]) / (2 * h)

    def nodal_admittance(self, omega: float = 1.0, with_loads: bool = True) -> np.ndarray:
        """Full node admittance matrix at normalized frequency ``omega``."""
        y = self.y_static.copy()
        if not with_loads:
            pos = {bus: k for k, bus in enumerate(self.buses)}
            for ld in self.spec.loads:
                y[pos[ld.bus], pos[ld.bus]] -= ld.admittance
        y[np.diag_indices(self.n_nodes)] += 1j * omega * self.caps
        yb = 1.0 / (self.br_r + 1j * omega * self.br_l)
        np.add.at(y, (self.br_from, self.br_from), yb)
        np.add.at(y, (self.br_to, self.br_to), yb)
        np.add.at(y, (self.br_from, self.br_to), -yb)
        np.add.at(y, (self.br_to, self.br_from), -yb)
        return y

    def copy(self) -> "SystemModel":
        new = object.__new__(SystemModel)
        new.__dict__.update(self.__dict__)
        new.inputs = list(self.inputs) if self.inputs is not None else None
        return new


def assemble(case) -> SystemModel:
    """Build the system model for a case (anything providing ``network()``)."""
    return SystemModel(_as_network(case))


# ----------------------------------------------------------------------------
# equilibrium


@dataclass
class Equilibrium:
    x: np.ndarray
    y: np.ndarray
    residual: float
    worst_label: str
    pf: PowerFlowSolution = field(repr=False, default=None)


def initialize_system(model: SystemModel, pf: PowerFlowSolution | None = None,
                      tol: float = 1e-8) -> Equilibrium:
    """Set device inputs and return a verified equilibrium.

    The reported power flow uses the hyperbolic pi for every line kind.  The
    segmented kinds present a slightly different nominal-frequency two-port,
    so the flow is re-solved on the exact kind-specific admittance (starting
    from ``pf``) before the states are filled in; for the pi kinds this step
    reproduces ``pf`` exactly.
    """
    spec = model.spec
    if pf is None:
        pf = power_flow(spec)
    exact = power_flow(spec, exact=True, v0=pf.v)

    y_full = model.nodal_admittance(1.0)
    yb = 1.0 / (model.br_r + 1j * model.br_l)

    nb = len(model.buses)
    v = np.zeros(model.n_nodes, complex)
    v[:nb] = exact.v
    if model.n_nodes > nb:
        inner = np.arange(nb, model.n_nodes)
        v[inner] = -np.linalg.solve(y_full[np.ix_(inner, inner)], y_full[inner, :nb] @ exact.v)
    injections = y_full @ v

    x = np.zeros(model.n_x)
    inputs = []
    for dev, sl, node in zip(model.devices, model.dev_slices, model.dev_node):
        s = v[node] * np.conj(injections[node])
        try:
            xd, u = dev.init(v[node], s)
        except InitError as exc:
            raise InitError(f"{dev.name}: {exc}", exc.residual, dev.name) from None
        x[sl] = xd
        inputs.append(u)
    model.inputs = inputs
    i_br = (v[model.br_from] - v[model.br_to]) * yb
    x[model.br_re] = i_br.real
    x[model.br_im] = i_br.imag
    x[model.vd_re] = v[model.diff_nodes].real
    x[model.vd_im] = v[model.diff_nodes].imag

    worst, label = model.residual(x)
    if worst > tol:
        logger.info("equilibrium residual %.3e at %s; polishing", worst, label)
        x = _newton_polish(model, x, tol)
        worst, label = model.residual(x)
        if worst > tol:
            raise InitError(f"equilibrium residual {worst:.3e} at {label} exceeds {tol}",
                            worst, label)
    return Equilibrium(x, model.solve_y(x), worst, label, pf)


def _newton_polish(model: SystemModel, x, tol, max_iter: int = 8):
    # the reduced Jacobian carries the angle-reference null direction, hence lstsq
    for _ in range(max_iter):
        fx = model.rhs(x)
        if np.max(np.abs(fx)) <= tol:
            break
        step, *_ = np.linalg.lstsq(model.jacobian(x), -fx, rcond=1e-12)
        x = x + step
    return x


def state_table(model: SystemModel) -> list[tuple[int, str, bool]]:
    """(index, label, is_line_state) rows for inspection and export."""
    return [(k, lab, bool(model.line_state_mask[k])) for k, lab in enumerate(model.labels)]


def transfer_admittance(model: SystemModel, a: int, b: int, omega: float = 1.0) -> complex:
    """Nominal-frequency transfer admittance between two buses (loads excluded)."""
    y = model.nodal_admittance(omega, with_loads=False)
    pos = {bus: k for k, bus in enumerate(model.buses)}
    nb = len(model.buses)
    if model.n_nodes > nb:
        inner = np.arange(nb, model.n_nodes)
        outer = np.arange(nb)
        y = y[np.ix_(outer, outer)] - y[np.ix_(outer, inner)] @ np.linalg.solve(
            y[np.ix_(inner, inner)], y[np.ix_(inner, outer)])
    return complex(-y[pos[a], pos[b]])


__all__ = [
    "BranchSpec", "SourceSpec", "LoadSpec", "NetworkSpec", "PowerFlowSolution", "SystemModel",
    "Equilibrium", "assemble", "power_flow", "initialize_system", "branch_flows",
    "bus_admittance", "write_power_flow", "read_power_flow", "check_network", "state_table",
    "transfer_admittance",
]
