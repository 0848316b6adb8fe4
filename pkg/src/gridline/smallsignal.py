"""Linearization, eigenanalysis, participation factors and stability boundaries."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from gridline.core import ConvergenceError, GridlineError, InitError, TopologyError

logger = logging.getLogger(__name__)

ZERO_TOL = 1e-6


def _fd_columns(fun, base, h, other):
    """Central-difference columns of ``fun`` w.r.t. ``base`` with ``other`` held fixed."""
    n = base.size
    if n == 0:
        return None
    pert = np.diag(h)
    plus = base[:, None] + pert
    minus = base[:, None] - pert
    stacked = np.concatenate([plus, minus], axis=1)
    out = fun(stacked, np.repeat(other[:, None], 2 * n, axis=1))
    return (out[:, :n] - out[:, n:]) / (2.0 * h)


def _steps(v):
    return np.maximum(1e-7, 1e-7 * np.abs(v))


def reduced_jacobian(model, x, y) -> np.ndarray:
    """``f_x - f_y g_y^-1 g_x`` from central differences.

    ``model`` needs ``f(x, y)`` and ``g(x, y)`` accepting column batches.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    hx, hy = _steps(x), _steps(y)
    f_x = _fd_columns(lambda xs, ys: model.f(xs, ys), x, hx, y)
    if y.size == 0:
        return f_x
    g_x = _fd_columns(lambda xs, ys: model.g(xs, ys), x, hx, y)
    f_y = _fd_columns(lambda ys, xs: model.f(xs, ys), y, hy, x)
    g_y = _fd_columns(lambda ys, xs: model.g(xs, ys), y, hy, x)
    try:
        lu = scipy.linalg.lu_factor(g_y, check_finite=True)
        if np.min(np.abs(np.diag(lu[0]))) <= 1e-13 * np.max(np.abs(np.diag(lu[0]))):
            raise np.linalg.LinAlgError
    except (np.linalg.LinAlgError, ValueError):
        labels = getattr(model, "y_labels", None)
        _, s, vt = np.linalg.svd(g_y)
        k = np.argsort(-np.abs(vt[-1]))[:3]
        names = [labels[i] for i in k] if labels else list(k)
        raise GridlineError(f"singular algebraic Jacobian near {names}") from None
    return f_x - f_y @ scipy.linalg.lu_solve(lu, g_x)


@dataclass
class SmallSignalResult:
    eigenvalues: np.ndarray
    participation: np.ndarray
    labels: tuple[str, ...]
    line_mask: np.ndarray | None = None
    zero_tol: float = ZERO_TOL
    right: np.ndarray | None = field(default=None, repr=False)
    left: np.ndarray | None = field(default=None, repr=False)

    @property
    def frequencies(self) -> np.ndarray:
        return np.abs(self.eigenvalues.imag) / (2 * np.pi)

    @property
    def damping(self) -> np.ndarray:
        lam = self.eigenvalues
        mag = np.abs(lam)
        with np.errstate(invalid="ignore", divide="ignore"):
            zeta = np.where(mag > 0, -lam.real / mag, 1.0)
        return zeta

    @property
    def retained(self) -> np.ndarray:
        return np.abs(self.eigenvalues) >= self.zero_tol

    @property
    def max_real_nonzero(self) -> float:
        keep = self.retained
        return float(self.eigenvalues.real[keep].max()) if keep.any() else -np.inf

    @property
    def stable(self) -> bool:
        return classify_stability(self, self.zero_tol) == "stable"

    def least_stable(self) -> int:
        """Index of the retained mode with the largest real part."""
        keep = np.flatnonzero(self.retained)
        return int(keep[np.argmax(self.eigenvalues.real[keep])])

    def line_participation(self) -> np.ndarray:
        if self.line_mask is None or not self.line_mask.any():
            return np.zeros(self.eigenvalues.size)
        return self.participation[self.line_mask].sum(axis=0)

    def top_states(self, mode: int, n: int = 2) -> list[tuple[str, float]]:
        col = self.participation[:, mode]
        order = np.argsort(-col, kind="stable")[:n]
        return [(self.labels[k], float(col[k])) for k in order]


def eigen_analysis(j: np.ndarray, labels, line_mask=None, zero_tol: float = ZERO_TOL) -> SmallSignalResult:
    j = np.asarray(j, float)
    if j.ndim != 2 or j.shape[0] != j.shape[1]:
        raise GridlineError(f"Jacobian must be square, got shape {j.shape}")
    if not np.all(np.isfinite(j)):
        raise GridlineError("Jacobian has non-finite entries")
    try:
        lam, vl, vr = scipy.linalg.eig(j, left=True, right=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise GridlineError(f"eigensolver failed: {exc}") from None
    order = np.lexsort((-lam.imag, -lam.real))
    lam, vl, vr = lam[order], vl[:, order], vr[:, order]
    p = np.abs(vl) * np.abs(vr)
    total = p.sum(axis=0)
    total[total == 0] = 1.0
    p = p / total
    mask = None if line_mask is None else np.asarray(line_mask, bool)
    return SmallSignalResult(lam, p, tuple(labels), mask, zero_tol, vr, vl)


def classify_stability(r: SmallSignalResult, zero_tol: float = ZERO_TOL) -> str:
    keep = np.abs(r.eigenvalues) >= zero_tol
    if not keep.any():
        return "marginal"
    worst = r.eigenvalues.real[keep].max()
    if worst > 0:
        return "unstable"
    if worst >= -zero_tol:
        return "marginal"
    return "stable"


@dataclass(frozen=True)
class ModeFingerprint:
    line_dominated: tuple[int, ...]
    device_dominated: tuple[int, ...]
    least_stable_line_participation: float
    max_line_participation_top5: float


def mode_fingerprint(r: SmallSignalResult, line_participation_threshold: float = 0.5) -> ModeFingerprint:
    lp = r.line_participation()
    keep = np.flatnonzero(r.retained)
    line = tuple(int(k) for k in keep if lp[k] > line_participation_threshold)
    dev = tuple(int(k) for k in keep if lp[k] <= line_participation_threshold)
    order = keep[np.argsort(-r.eigenvalues.real[keep], kind="stable")]
    top5 = order[:5]
    least = float(lp[order[0]]) if order.size else 0.0
    return ModeFingerprint(line, dev, least, float(lp[top5].max()) if top5.size else 0.0)


def line_mode_frequencies(r: SmallSignalResult, line_participation_threshold: float = 0.5) -> np.ndarray:
    fp = mode_fingerprint(r, line_participation_threshold)
    return np.sort(r.frequencies[list(fp.line_dominated)]) if fp.line_dominated else np.zeros(0)


def device_mode_frequencies(r: SmallSignalResult, line_participation_threshold: float = 0.5) -> np.ndarray:
    fp = mode_fingerprint(r, line_participation_threshold)
    return np.sort(r.frequencies[list(fp.device_dominated)])


def small_signal(case, model=None, eq=None) -> SmallSignalResult:
    """Power flow, equilibrium and eigenanalysis for one case."""
    from gridline.network import assemble, initialize_system, power_flow

    if model is None:
        model = assemble(case)
    if eq is None:
        eq = initialize_system(model, power_flow(model.spec))
    j = reduced_jacobian(model, eq.x, eq.y)
    return eigen_analysis(j, model.labels, model.line_state_mask)


# ----------------------------------------------------------------------------
# stability boundary


@dataclass(frozen=True)
class BoundaryResult:
    load_scale: float
    kind: str
    increment: float
    trace: tuple[tuple[float, str], ...]
    critical: float | None
    diagnostics: tuple[str, ...] = ()

    @property
    def status(self) -> str:
        if self.critical is not None:
            return "unstable"
        if self.trace and all(s == "infeasible" for _, s in self.trace):
            return "infeasible"
        return "stable"


def classify_case(case) -> str:
    """``stable``, ``unstable``, ``marginal`` or ``infeasible`` for one operating point."""
    try:
        r = small_signal(case)
    except (ConvergenceError, InitError, TopologyError) as exc:
        logger.debug("%s infeasible: %s", getattr(case, "label", case), exc)
        return "infeasible"
    return classify_stability(r)


def boundary_search(case, load_scale: float, kind, increment: float = 0.1,
                    max_scale: float = 5.0, start: float = 1.0, stop_at_first: bool = True) -> BoundaryResult:
    """Ascending line-scale scan for the first unstable grid point.

    ``case`` holds the nominal case; ``increment`` is in line-scale units (the
    shipped two-bus lines are 100 km, so 0.1 is a 10 km step).
    """
    from gridline.cases import apply_scales, with_kind

    base = apply_scales(with_kind(case, kind), load_scale, 1.0)
    n_steps = int(np.floor((max_scale - start) / increment + 1e-9))
    scales = [round(start + k * increment, 12) for k in range(n_steps + 1)]
    trace: list[tuple[float, str]] = []
    critical = None
    diagnostics: list[str] = []
    for s in scales:
        status = classify_case(apply_scales(base, 1.0, s))
        trace.append((s, status))
        if status == "unstable" and critical is None:
            critical = s
            if stop_at_first:
                break
        elif status in ("stable", "marginal") and critical is not None:
            diagnostics.append(f"non-monotone: stable at {s:g} after unstable at {critical:g}")
    kind_name = str(base.kind)
    return BoundaryResult(load_scale, kind_name, increment, tuple(trace), critical, tuple(diagnostics))


# ----------------------------------------------------------------------------
# CSV output

EIGEN_HEADER = ("re", "im", "freq_hz", "damping", "top1_state", "top1_pf", "top2_state", "top2_pf")
BOUNDARY_HEADER = ("load_scale", "kind", "critical_line_scale", "status")


def write_eigen_csv(path, r: SmallSignalResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EIGEN_HEADER)
        for k, lam in enumerate(r.eigenvalues):
            top = r.top_states(k, 2) + [("", 0.0)] * 2
            w.writerow([repr(float(lam.real)), repr(float(lam.imag)), repr(float(r.frequencies[k])),
                        repr(float(r.damping[k])), top[0][0], repr(top[0][1]), top[1][0], repr(top[1][1])])


def read_eigen_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.array([complex(float(row[0]), float(row[1])) for row in reader])


def write_participation_csv(path, r: SmallSignalResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["state"] + [f"mode{k}" for k in range(r.eigenvalues.size)])
        for lab, row in zip(r.labels, r.participation):
            w.writerow([lab] + [repr(float(v)) for v in row])


def write_boundary_csv(path, results) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(BOUNDARY_HEADER)
        for b in results:
            crit = "" if b.critical is None else repr(float(b.critical))
            w.writerow([repr(float(b.load_scale)), b.kind, crit, b.status])
