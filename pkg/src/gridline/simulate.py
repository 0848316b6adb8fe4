"""Stiff time-domain simulation with branch trips and setpoint steps."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from gridline.core import DomainError, GridlineError, InitError, TopologyError
from gridline.network import SystemModel, assemble, initialize_system, power_flow

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BranchTrip:
    t: float
    branch: str


@dataclass(frozen=True)
class SetpointStep:
    """Add ``delta`` to input ``field`` of device ``device`` at time ``t``."""

    t: float
    device: str
    field: str
    delta: float


@dataclass(frozen=True)
class Scenario:
    case: object
    events: tuple = ()
    t_span: tuple[float, float] = (0.0, 1.0)
    rtol: float = 1e-6
    atol: float = 1e-9
    dt_out: float = 1e-5
    method: str = "Radau"
    max_step: float = np.inf

    def __post_init__(self):
        t0, t1 = self.t_span
        if not t1 > t0:
            raise DomainError("time span must be positive")
        if self.dt_out <= 0 or self.rtol <= 0 or self.atol <= 0:
            raise DomainError("tolerances and output interval must be positive")
        for ev in self.events:
            if not (t0 <= ev.t <= t1):
                raise DomainError(f"event at t={ev.t} outside span {self.t_span}")


@dataclass
class Segment:
    t: np.ndarray
    x: np.ndarray
    labels: tuple[str, ...]
    model: SystemModel = field(repr=False)


@dataclass
class SimulationResult:
    segments: list[Segment]
    events: list[tuple[float, str, str]]
    x0: np.ndarray
    labels0: tuple[str, ...]

    @property
    def t(self) -> np.ndarray:
        ts = [self.segments[0].t] + [s.t[1:] for s in self.segments[1:]]
        return np.concatenate(ts)

    def channel(self, label: str) -> np.ndarray:
        """Trajectory of one labeled state; NaN while the state does not exist."""
        parts = []
        for k, seg in enumerate(self.segments):
            data = seg.x[:, seg.labels.index(label)] if label in seg.labels else np.full(seg.t.size, np.nan)
            parts.append(data if k == 0 else data[1:])
        return np.concatenate(parts)

    def final_state(self) -> np.ndarray:
        return self.segments[-1].x[-1]

    def bus_voltage_magnitudes(self) -> np.ndarray:
        parts = []
        for k, seg in enumerate(self.segments):
            vm = np.abs(seg.model.bus_voltages(seg.x.T)).T
            parts.append(vm if k == 0 else vm[1:])
        return np.concatenate(parts)

    def inverter_ids(self) -> list[str]:
        m = self.segments[0].model
        return [d.name for d in m.devices if d.is_inverter]

    def max_deviation(self) -> float:
        """Largest departure of any state from the initial point (first segment only)."""
        seg = self.segments[0]
        return float(np.max(np.abs(seg.x - self.x0[None, :])))


def _sample_times(t0, t1, dt):
    n = int(np.floor((t1 - t0) / dt + 1e-9))
    t = t0 + dt * np.arange(n + 1)
    if t1 - t[-1] > 1e-12:
        t = np.append(t, t1)
    else:
        t[-1] = t1
    return t


def _integrate(model: SystemModel, x0, t0, t1, s: Scenario):
    t_eval = _sample_times(t0, t1, s.dt_out)
    sol = solve_ivp(lambda t, x: model.rhs(x), (t0, t1), x0, method=s.method, t_eval=t_eval,
                    jac=lambda t, x: model.jacobian(x), rtol=s.rtol, atol=s.atol,
                    vectorized=True, max_step=s.max_step)
    if sol.status != 0:
        last = sol.t[-1] if sol.t.size else t0
        raise GridlineError(f"integration failed at t={last:.6g}: {sol.message}")
    x = sol.y.T
    if not np.all(np.isfinite(x)):
        raise GridlineError("non-finite trajectory")
    return t_eval, x


def apply_branch_trip(model: SystemModel, branch_id: str, x) -> tuple[SystemModel, np.ndarray]:
    """Remove a branch and carry the surviving states across by label.

    The removed line's own states are discarded.  Raises
    :class:`TopologyError` if the trip would island the network.
    """
    spec = model.spec.without_branch(branch_id)
    new = SystemModel(spec, model.omega_base)
    new.inputs = list(model.inputs)
    x = np.asarray(x, float)
    x_new = np.zeros(new.n_x)
    for k, lab in enumerate(new.labels):
        if lab not in model._label_index:
            raise GridlineError(f"state {lab} appears only after the trip")
        x_new[k] = x[model.index(lab)]
    worst = float(np.max(np.abs(new.g(x_new, new.solve_y(x_new))), initial=0.0))
    if worst > 1e-8:
        raise InitError(f"post-trip algebraic residual {worst:.3e}", worst)
    return new, x_new


def prepare(case) -> tuple[SystemModel, np.ndarray]:
    model = assemble(case)
    eq = initialize_system(model, power_flow(model.spec))
    return model, eq.x


def run_sim(s: Scenario, model: SystemModel | None = None, x0=None) -> SimulationResult:
    """Integrate a scenario from its equilibrium, stopping exactly at each event."""
    if model is None or x0 is None:
        model, x0 = prepare(s.case)
    else:
        model = model.copy()
    x = np.asarray(x0, float).copy()
    t0, t1 = s.t_span
    events = sorted(s.events, key=lambda e: e.t)
    segments: list[Segment] = []
    log: list[tuple[float, str, str]] = []
    t = t0
    for ev in events + [None]:
        t_stop = t1 if ev is None else ev.t
        if t_stop > t:
            ts, xs = _integrate(model, x, t, t_stop, s)
            segments.append(Segment(ts, xs, model.labels, model))
            x = xs[-1].copy()
            t = t_stop
        if ev is None:
            break
        if isinstance(ev, BranchTrip):
            model, x = apply_branch_trip(model, ev.branch, x)
            log.append((ev.t, "trip", ev.branch))
        elif isinstance(ev, SetpointStep):
            model = model.copy()
            k = model.device_index(ev.device)
            current = getattr(model.inputs[k], ev.field)
            model.set_input(ev.device, **{ev.field: current + ev.delta})
            log.append((ev.t, "setpoint", f"{ev.device}.{ev.field}{ev.delta:+g}"))
        else:
            raise DomainError(f"unknown event {ev!r}")
        # a zero-length segment keeps the post-event state on record
        segments.append(Segment(np.array([t]), x[None, :].copy(), model.labels, model))
    segments = [seg for k, seg in enumerate(segments) if seg.t.size > 1 or k == len(segments) - 1
                or not _same_time(seg, segments[k + 1])]
    return SimulationResult(segments, log, np.asarray(x0, float).copy(), segments[0].labels)


def _same_time(seg, nxt):
    return seg.t.size == 1 and nxt.t[0] == seg.t[0]


def filter_current_magnitude(r: SimulationResult, inverter_id: str) -> np.ndarray:
    """Converter-side filter current magnitude of one inverter on its own base."""
    d = r.channel(_icv_label(r, inverter_id, "icv_d"))
    q = r.channel(_icv_label(r, inverter_id, "icv_q"))
    return np.sqrt(d * d + q * q)


def _icv_label(r: SimulationResult, inverter_id: str, comp: str) -> str:
    lab = f"{inverter_id}.filter.{comp}"
    if lab not in r.labels0:
        raise DomainError(f"{inverter_id!r} is not an inverter in this simulation")
    return lab


@dataclass(frozen=True)
class Overcurrent:
    t_enter: float
    t_exit: float
    peak: float


def detect_overcurrent(t, series, threshold: float = 1.3) -> list[Overcurrent]:
    """Intervals where ``series`` strictly exceeds ``threshold``.

    Crossing times are linearly interpolated; an interval still open at the
    end of the record exits at the last sample.
    """
    if threshold <= 0:
        raise DomainError("threshold must be positive")
    t = np.asarray(t, float)
    y = np.asarray(series, float)
    above = y > threshold
    out = []
    k = 0
    n = y.size
    while k < n:
        if not above[k]:
            k += 1
            continue
        start = k
        while k < n and above[k]:
            k += 1
        end = k  # first index not above, or n
        if start == 0:
            t_in = t[0]
        else:
            t_in = _cross(t[start - 1], t[start], y[start - 1], y[start], threshold)
        if end == n:
            t_out = t[-1]
        else:
            t_out = _cross(t[end - 1], t[end], y[end - 1], y[end], threshold)
        out.append(Overcurrent(float(t_in), float(t_out), float(y[start:end].max())))
    return out


def _cross(t0, t1, y0, y1, level):
    if y1 == y0:
        return t0
    return t0 + (level - y0) * (t1 - t0) / (y1 - y0)


# ----------------------------------------------------------------------------
# CSV output


def write_timeseries_csv(path, r: SimulationResult, labels=None) -> None:
    labels = list(labels or r.labels0)
    cols = [r.channel(lab) for lab in labels]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s"] + labels)
        for k, tk in enumerate(r.t):
            w.writerow([repr(float(tk))] + [repr(float(c[k])) for c in cols])


def read_timeseries_csv(path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader])
    data = {lab: rows[:, k + 1] for k, lab in enumerate(header[1:])}
    return rows[:, 0], data


def write_derived_csv(path, r: SimulationResult) -> None:
    inverters = r.inverter_ids()
    series = [filter_current_magnitude(r, name) for name in inverters]
    vm = r.bus_voltage_magnitudes()
    buses = r.segments[0].model.buses
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s"] + [f"{n}.icv_norm" for n in inverters] + [f"bus{b}.vm" for b in buses])
        for k, tk in enumerate(r.t):
            w.writerow([repr(float(tk))] + [repr(float(s[k])) for s in series]
                       + [repr(float(v)) for v in vm[k]])


def write_event_log(path, r: SimulationResult, overcurrents: dict | None = None) -> None:
    rows = [(t, kind, detail) for t, kind, detail in r.events]
    for name, evs in (overcurrents or {}).items():
        for ev in evs:
            rows.append((ev.t_enter, "overcurrent_enter", f"{name} peak={ev.peak!r}"))
            rows.append((ev.t_exit, "overcurrent_exit", name))
    rows.sort(key=lambda row: row[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "kind", "detail"])
        for t, kind, detail in rows:
            w.writerow([repr(float(t)), kind, detail])


__all__ = ["BranchTrip", "SetpointStep", "Scenario", "SimulationResult", "run_sim",
           "apply_branch_trip", "filter_current_magnitude", "detect_overcurrent", "Overcurrent",
           "write_timeseries_csv", "read_timeseries_csv", "write_derived_csv", "write_event_log",
           "TopologyError"]
