"""Parallel-RL vector fitting of frequency-dependent series impedance.

A bank of M parallel RL branches has admittance

    Y(s) = sum_m 1 / (r_m + s*l_m) = sum_m k_m / (s - a_m),  a_m = -r_m/l_m, k_m = 1/l_m

so fitting the samples of 1/z with M real poles and real residues and then
reading off ``l_m = 1/k_m`` and ``r_m = -a_m*l_m`` gives the branch data
directly.  Frequencies are normalized by ``f_base`` (``s = j*f/f_base``).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares, nnls

from gridline.core import ConfigError, DomainError, GridlineError
from gridline.lines import FittedBranches

logger = logging.getLogger(__name__)

HEADER = ("f_hz", "r_pu_per_km", "l_pu_per_km")


@dataclass(frozen=True)
class FrequencySamples:
    f: np.ndarray
    r: np.ndarray
    l: np.ndarray
    f_base: float = 60.0

    def __post_init__(self):
        f, r, l = (np.asarray(a, dtype=float).ravel() for a in (self.f, self.r, self.l))
        if not (f.size == r.size == l.size) or f.size == 0:
            raise DomainError("sample columns must be non-empty and of equal length")
        if np.any(f <= 0) or np.any(np.diff(f) <= 0):
            raise DomainError("sample frequencies must be positive and strictly increasing")
        if np.any(l <= 0) or np.any(r < 0):
            raise DomainError("samples need l > 0 and r >= 0")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "l", l)

    def __len__(self) -> int:
        return self.f.size

    @property
    def s(self) -> np.ndarray:
        return 1j * self.f / self.f_base

    @property
    def z(self) -> np.ndarray:
        return self.r + 1j * (self.f / self.f_base) * self.l


@dataclass(frozen=True)
class FitReport:
    branches: FittedBranches
    max_rel_error: float
    iterations: int
    converged: bool


class FitError(GridlineError):
    def __init__(self, message: str, report: FitReport | None = None):
        super().__init__(message)
        self.report = report


def synth_line_data(r_dc: float, l_inf: float, skin_coeff: float, band: tuple[float, float],
                    n_samples: int, f_base: float = 60.0) -> FrequencySamples:
    """Skin-effect style test data: resistance rising with sqrt(f), inductance falling."""
    f_lo, f_hi = band
    if not (0 < f_lo < f_hi):
        raise DomainError(f"invalid band {band}")
    if n_samples < 8:
        raise DomainError("need at least 8 samples")
    f = np.logspace(np.log10(f_lo), np.log10(f_hi), n_samples)
    r = r_dc * (1.0 + skin_coeff * np.sqrt(f / f_base))
    l = l_inf * (1.0 + 0.15 / (1.0 + f / f_base))
    return FrequencySamples(f, r, l, f_base)


def samples_from_branches(br: FittedBranches, f: np.ndarray, f_base: float = 60.0) -> FrequencySamples:
    """Exact samples of a known parallel-RL bank (used for recovery checks)."""
    f = np.asarray(f, float)
    w = f / f_base
    z = 1.0 / br.admittance(1j * w)
    return FrequencySamples(f, z.real, z.imag / w, f_base)


def _basis(s: np.ndarray, poles: np.ndarray) -> np.ndarray:
    return 1.0 / (s[:, None] - poles[None, :])


def _real_ls(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.vstack([a.real, a.imag])
    bb = np.concatenate([b.real, b.imag])
    # column scaling keeps the normal equations well conditioned across decades
    scale = np.linalg.norm(aa, axis=0)
    scale[scale == 0] = 1.0
    sol, *_ = np.linalg.lstsq(aa / scale, bb, rcond=None)
    return sol / scale


def _residues(s, y, w, poles):
    """Non-negative residues for fixed poles (keeps every branch passive)."""
    a = _basis(s, poles) * w[:, None]
    b = y * w
    aa = np.vstack([a.real, a.imag])
    scale = np.linalg.norm(aa, axis=0)
    k, _ = nnls(aa / scale, np.concatenate([b.real, b.imag]))
    return k / scale


def _relocate(s, y, w, poles, n_iter, pole_tol):
    it = 0
    for it in range(1, n_iter + 1):
        phi = _basis(s, poles)
        a = np.hstack([phi, -y[:, None] * phi]) * w[:, None]
        sol = _real_ls(a, y * w)
        c_sigma = sol[poles.size:]
        new = np.linalg.eigvals(np.diag(poles) - np.outer(np.ones_like(poles), c_sigma))
        # parallel RL banks only have real, stable poles
        new = -np.abs(new.real)
        new[new == 0] = -1e-12
        new = np.sort(new)
        change = np.max(np.abs(new - poles) / np.abs(poles))
        poles = new
        if change < pole_tol:
            break
    return poles, it


def _degenerate(poles, k) -> bool:
    return bool(np.any(k <= 1e-12 * k.max()) or np.unique(poles).size < poles.size)


def _unpack(q, m):
    """Branch (r, l) from the polish parameters (log pole magnitude, log l)."""
    with np.errstate(over="ignore"):
        l = np.exp(q[m:])
        r = np.exp(q[:m]) * l
    return r, l


def _rel_error(s, z, q, m):
    r, l = _unpack(q, m)
    with np.errstate(all="ignore"):
        z_fit = 1.0 / (1.0 / (r[None, :] + s[:, None] * l[None, :])).sum(axis=1)
    return (z_fit - z) / z


def _polish(s, z, q0, m, rounds, bounds):
    """Reduce the worst-case relative error by Lawson reweighting.

    Parameters are log pole magnitude and log inductance, so every branch stays
    passive and its pole stays inside ``bounds``.
    """
    weights = np.ones(s.size)
    best = q0
    best_err = float(np.max(np.abs(_rel_error(s, z, q0, m))))
    lo = np.concatenate([np.full(m, bounds[0]), np.full(m, -np.inf)])
    hi = np.concatenate([np.full(m, bounds[1]), np.full(m, np.inf)])

    def residual(q):
        e = _rel_error(s, z, q, m) * np.sqrt(weights)
        return np.concatenate([e.real, e.imag])

    q = np.clip(q0, lo + 1e-12, hi - 1e-12)
    for _ in range(rounds):
        q = least_squares(residual, q, bounds=(lo, hi), method="trf", xtol=1e-14, ftol=1e-14,
                          gtol=1e-14, x_scale="jac").x
        e = np.abs(_rel_error(s, z, q, m))
        if e.max() < best_err:
            best, best_err = q, float(e.max())
        if best_err < 1e-12:
            break
        weights = weights * e
        weights *= s.size / weights.sum()
    return best, best_err


def vector_fit_rl(samples: FrequencySamples, m: int = 3, tol: float = 0.02, max_iter: int = 50,
                  seed: int = 0, restarts: int = 3, pole_tol: float = 1e-13,
                  polish_rounds: int = 30) -> FitReport:
    """Fit ``m`` parallel RL branches to the sampled series impedance.

    Poles start log-spaced over the band and are relocated by vector fitting;
    residues are then identified with a non-negativity constraint and the
    branch values refined for minimax relative error.  A degenerate result
    (a zero residue, i.e. a branch with no inductance bound) is rejected and
    the fit restarted from randomly perturbed initial poles.

    Raises :class:`FitError` (carrying the best report seen) when no attempt
    reaches ``tol``.
    """
    if m < 1:
        raise DomainError("branch count must be >= 1")
    if len(samples) < 2 * m:
        raise DomainError(f"{len(samples)} samples cannot determine {m} branches (need {2 * m})")
    s = samples.s
    z = samples.z
    y = 1.0 / z
    w = np.abs(z)  # relative error weighting on the admittance
    w_lo, w_hi = s[0].imag, s[-1].imag
    if m > 1:
        base = -np.logspace(np.log10(w_lo), np.log10(w_hi), m)
    else:
        base = np.array([-np.sqrt(w_lo * w_hi)])
    # poles are kept within two decades of the sampled band so no branch degenerates
    # into a pure inductor or an open circuit with an absurdly fast time constant
    log_bounds = (np.log(w_lo / 100.0), np.log(w_hi * 100.0))
    rng = np.random.default_rng(seed)

    best: FitReport | None = None
    for attempt in range(restarts + 1):
        poles = base.copy()
        if attempt:
            poles = poles * np.exp(rng.uniform(-1.0, 1.0, m))
        start = np.sort(poles)
        poles, iters = _relocate(s, y, w, start, max_iter, pole_tol)
        poles = -np.clip(-poles, np.exp(log_bounds[0]), np.exp(log_bounds[1]))
        k = _residues(s, y, w, poles)
        if _degenerate(poles, k):
            # relocation merged two poles; keep this attempt's starting set instead
            logger.debug("attempt %d: relocated poles degenerate, using start poles", attempt)
            poles = start
            k = _residues(s, y, w, poles)
            if _degenerate(poles, k):
                if attempt < restarts:
                    continue
                # last attempt: seed the empty branches weakly and let the polish place them
                k = np.maximum(k, 1e-3 * k.max())
        q = np.concatenate([np.log(-poles), np.log(1.0 / k)])
        q, err = _polish(s, z, q, m, polish_rounds, log_bounds)
        r, l = _unpack(q, m)
        order = np.argsort(r / l)
        branches = FittedBranches(tuple(r[order]), tuple(l[order]))
        report = FitReport(branches, err, iters, err <= tol)
        if best is None or err < best.max_rel_error:
            best = report
        if report.converged:
            return report
    raise FitError(f"vector fitting with m={m} did not reach tol={tol}", best)


def write_samples(path, samples: FrequencySamples) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for row in zip(samples.f, samples.r, samples.l):
            w.writerow([repr(float(v)) for v in row])


def read_samples(path, f_base: float = 60.0) -> FrequencySamples:
    rows = []
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != HEADER:
            raise ConfigError(f"{path}:1: expected header {','.join(HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: non-numeric value in {row}") from None
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    data = np.array(rows)
    try:
        return FrequencySamples(data[:, 0], data[:, 1], data[:, 2], f_base)
    except DomainError as exc:
        raise ConfigError(f"{path}: {exc}") from None
