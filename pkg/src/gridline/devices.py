"""Bus devices: synchronous machine, grid-forming and grid-following inverters, loads.

Every RHS accepts a state array of shape ``(n,)`` or ``(n, K)`` together with
a terminal voltage of shape ``()`` or ``(K,)`` so a whole batch of perturbed
states can be evaluated at once.  Parameters are on the device's own base;
``rating`` is that base as a fraction of the system power base and scales
the injected current.  Network quantities live in the synchronous frame and
time is in seconds.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from gridline.core import DomainError, GridlineError, InitError

OMEGA_BASE = 2 * math.pi * 60.0


def _pack(*rows) -> np.ndarray:
    return np.stack(np.broadcast_arrays(*rows))


def _check_finite(dx, what):
    if not np.all(np.isfinite(dx)):
        raise GridlineError(f"non-finite derivative in {what}")


class _Params:
    """Mixin giving parameter dataclasses dict round-tripping and overrides."""

    def with_overrides(self, **kw):
        names = {f.name for f in fields(self)}
        unknown = set(kw) - names
        if unknown:
            raise DomainError(f"unknown {type(self).__name__} fields: {sorted(unknown)}")
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# synchronous machine

MACHINE_STATES = ("psi_d", "psi_q", "eq_p", "ed_p", "eq_pp", "ed_pp", "delta", "omega",
                  "vf", "vr1", "vr2", "vm")


@dataclass(frozen=True)
class MachineParams(_Params):
    ra: float = 0.003
    xd: float = 1.3125
    xq: float = 1.2578
    xd_p: float = 0.1813
    xq_p: float = 0.25
    xd_pp: float = 0.14
    xq_pp: float = 0.18
    td0_p: float = 5.89
    tq0_p: float = 0.6
    td0_pp: float = 0.5
    tq0_pp: float = 0.023
    h: float = 3.148
    d: float = 2.0
    # IEEE Type 1 exciter, saturation off
    ka: float = 20.0
    ta: float = 0.2
    kf: float = 0.063
    tf: float = 0.35
    ke: float = 0.01
    te: float = 0.314
    tr: float = 0.001
    vf_max: float = 6.0
    rating: float = 1.0
    omega_base: float = OMEGA_BASE

    def __post_init__(self):
        if not (self.xd >= self.xd_p >= self.xd_pp > 0 and self.xq >= self.xq_p >= self.xq_pp > 0):
            raise DomainError("machine reactances must satisfy x >= x' >= x'' > 0")
        for name in ("td0_p", "tq0_p", "td0_pp", "tq0_pp", "h", "ta", "tf", "te", "tr", "rating"):
            if not getattr(self, name) > 0:
                raise DomainError(f"machine parameter {name} must be positive")


@dataclass(frozen=True)
class MachineInputs:
    tau_m: float
    v_ref: float


def _machine_unpack(x):
    return [x[k] for k in range(len(MACHINE_STATES))]


def machine_currents(x, p: MachineParams):
    """Stator currents (d, q) on machine base."""
    psi_d, psi_q, _, _, eq_pp, ed_pp = (x[k] for k in range(6))
    return (eq_pp - psi_d) / p.xd_pp, (-ed_pp - psi_q) / p.xq_pp


def machine_rhs(x, v_term, p: MachineParams, u: MachineInputs, omega_sys: float = 1.0):
    """Six-state Anderson-Fouad machine with swing shaft and Type 1 AVR.

    Returns the state derivative and the current injected into the network
    (system base).
    """
    psi_d, psi_q, eq_p, ed_p, eq_pp, ed_pp, delta, omega, vf, vr1, vr2, vm = _machine_unpack(x)
    v_term = np.asarray(v_term, dtype=complex)
    rot = np.exp(-1j * delta)
    v_dq = 1j * v_term * rot
    vd, vq = v_dq.real, v_dq.imag
    i_d, i_q = machine_currents(x, p)
    wb = p.omega_base

    d_psi_d = wb * (p.ra * i_d + omega * psi_q + vd)
    d_psi_q = wb * (p.ra * i_q - omega * psi_d + vq)
    d_eq_p = (-eq_p - (p.xd - p.xd_p) * i_d + vf) / p.td0_p
    d_ed_p = (-ed_p + (p.xq - p.xq_p) * i_q) / p.tq0_p
    d_eq_pp = (eq_p - eq_pp - (p.xd_p - p.xd_pp) * i_d) / p.td0_pp
    d_ed_pp = (ed_p - ed_pp + (p.xq_p - p.xq_pp) * i_q) / p.tq0_pp
    tau_e = psi_d * i_q - psi_q * i_d
    d_delta = wb * (omega - omega_sys)
    d_omega = (u.tau_m - tau_e - p.d * (omega - 1.0)) / (2.0 * p.h)

    d_vf = (-p.ke * vf + vr1) / p.te
    d_vr1 = (p.ka * (u.v_ref - vm - vr2 - p.kf / p.tf * vf) - vr1) / p.ta
    d_vr2 = -(p.kf / p.tf * vf + vr2) / p.tf
    d_vm = (np.abs(v_term) - vm) / p.tr

    dx = _pack(d_psi_d, d_psi_q, d_eq_p, d_ed_p, d_eq_pp, d_ed_pp, d_delta, d_omega,
               d_vf, d_vr1, d_vr2, d_vm)
    _check_finite(dx, "machine_rhs")
    i_net = (i_q - 1j * i_d) * np.exp(1j * delta) * p.rating
    return dx, i_net


def machine_electrical_torque(x, p: MachineParams):
    i_d, i_q = machine_currents(x, p)
    return x[0] * i_q - x[1] * i_d


def machine_init(v_term, s_inj, p: MachineParams) -> tuple[np.ndarray, MachineInputs]:
    """Equilibrium for a terminal voltage and injected complex power (system base)."""
    v = complex(v_term)
    if abs(v) <= 0:
        raise InitError("machine terminal voltage must be nonzero")
    s = complex(s_inj) / p.rating
    i = (s / v).conjugate()
    e_q = v + complex(p.ra, p.xq) * i
    delta = float(np.angle(e_q))
    load_angle = abs(np.angle(e_q / v))
    if load_angle >= math.pi / 2:
        raise InitError(f"machine dispatch {s_inj} beyond steady-state capability "
                        f"(load angle {math.degrees(load_angle):.1f} deg)")
    rot = np.exp(-1j * delta)
    v_dq = 1j * v * rot
    i_dq = 1j * i * rot
    vd, vq, i_d, i_q = v_dq.real, v_dq.imag, i_dq.real, i_dq.imag
    ed_p = (p.xq - p.xq_p) * i_q
    ed_pp = (p.xq - p.xq_pp) * i_q
    eq_pp = vq + p.ra * i_q + p.xd_pp * i_d
    eq_p = eq_pp + (p.xd_p - p.xd_pp) * i_d
    vf = eq_p + (p.xd - p.xd_p) * i_d
    if not (0.0 < vf <= p.vf_max):
        raise InitError(f"machine dispatch {s_inj} needs field voltage {vf:.3f} "
                        f"outside (0, {p.vf_max}]")
    psi_d = eq_pp - p.xd_pp * i_d
    psi_q = -ed_pp - p.xq_pp * i_q
    vm = abs(v)
    x = np.array([psi_d, psi_q, eq_p, ed_p, eq_pp, ed_pp, delta, 1.0,
                  vf, p.ke * vf, -p.kf / p.tf * vf, vm])
    tau_m = psi_d * i_q - psi_q * i_d
    u = MachineInputs(tau_m=float(tau_m), v_ref=float(vm + p.ke * vf / p.ka))
    _verify_equilibrium(machine_rhs, x, v, p, u, "machine")
    return x, u


def _verify_equilibrium(rhs, x, v, p, u, what, tol=1e-8):
    dx, _ = rhs(x, v, p, u)
    worst = float(np.max(np.abs(dx)))
    if worst > tol:
        raise InitError(f"{what} equilibrium residual {worst:.3e} exceeds {tol}", worst)


# ----------------------------------------------------------------------------
# grid-forming inverter (virtual synchronous machine)

GFM_STATES = ("theta_v", "omega_v", "q_m", "xi_d", "xi_q", "gamma_d", "gamma_q",
              "icv_d", "icv_q", "vo_d", "vo_q", "ig_d", "ig_q", "eps_pll", "theta_pll")

_GFM_GROUP = {"theta_v": "outer", "omega_v": "outer", "q_m": "outer",
              "xi_d": "vctrl", "xi_q": "vctrl", "gamma_d": "ictrl", "gamma_q": "ictrl",
              "icv_d": "filter", "icv_q": "filter", "vo_d": "filter", "vo_q": "filter",
              "ig_d": "filter", "ig_q": "filter", "eps_pll": "pll", "theta_pll": "pll"}


@dataclass(frozen=True)
class GfmParams(_Params):
    # LCL filter
    lf: float = 0.08
    rf: float = 0.003
    cf: float = 0.074
    lg: float = 0.2
    rg: float = 0.01
    # virtual synchronous machine
    ta: float = 2.0
    kd: float = 400.0
    kw: float = 20.0
    kq: float = 0.2
    tq: float = 0.001
    # voltage loop with virtual impedance
    kpv: float = 0.59
    kiv: float = 736.0
    kffi: float = 0.0
    rv: float = 0.0
    lv: float = 0.2
    # current loop
    kpc: float = 1.27
    kic: float = 14.3
    kffv: float = 0.0
    # PLL
    kp_pll: float = 0.084
    ki_pll: float = 4.69
    v_dc: float = 1.6
    s_max: float = 2.0
    rating: float = 1.0
    omega_base: float = OMEGA_BASE

    def __post_init__(self):
        for name in ("lf", "cf", "lg", "rf", "rg", "ta", "tq", "rating"):
            if not getattr(self, name) > 0:
                raise DomainError(f"inverter parameter {name} must be positive")
        for name in ("kd", "kw", "kq", "kpv", "kiv", "kpc", "kic", "kp_pll", "ki_pll"):
            if getattr(self, name) < 0:
                raise DomainError(f"inverter gain {name} must be non-negative")


@dataclass(frozen=True)
class GfmInputs:
    p_ref: float
    q_ref: float
    v_ref: float


def _lcl_rhs(p, v_cv, icv, vo, ig, v_grid, omega_sys):
    wb = p.omega_base
    d_icv = wb / p.lf * (v_cv - vo - (p.rf + 1j * omega_sys * p.lf) * icv)
    d_vo = wb / p.cf * (icv - ig - 1j * omega_sys * p.cf * vo)
    d_ig = wb / p.lg * (vo - v_grid - (p.rg + 1j * omega_sys * p.lg) * ig)
    return d_icv, d_vo, d_ig


def gfm_converter_voltage(x, p: GfmParams, u: GfmInputs):
    """Averaged converter voltage (network frame) commanded by the inner loops."""
    return _gfm_inner(x, p, u)[0]


def _gfm_inner(x, p, u):
    theta, omega_v, q_m = x[0], x[1], x[2]
    xi = x[3] + 1j * x[4]
    gamma = x[5] + 1j * x[6]
    icv = x[7] + 1j * x[8]
    vo = x[9] + 1j * x[10]
    ig = x[11] + 1j * x[12]
    rot = np.exp(-1j * theta)
    vo_dq, ig_dq, icv_dq = vo * rot, ig * rot, icv * rot
    v_ref = u.v_ref + p.kq * (u.q_ref - q_m)
    v_vi = v_ref - (p.rv + 1j * omega_v * p.lv) * ig_dq
    err_v = v_vi - vo_dq
    icv_ref = p.kpv * err_v + p.kiv * xi + 1j * omega_v * p.cf * vo_dq + p.kffi * ig_dq
    err_i = icv_ref - icv_dq
    vcv_dq = p.kpc * err_i + p.kic * gamma + 1j * omega_v * p.lf * icv_dq + p.kffv * vo_dq
    return vcv_dq / rot, err_v, err_i


def gfm_rhs(x, v_grid, p: GfmParams, u: GfmInputs, omega_sys: float = 1.0):
    """Virtual synchronous machine with nested PI loops, LCL filter and PLL.

    Filter states are kept in the network frame; the controllers act in the
    virtual-rotor frame at angle ``theta_v``.
    """
    v_grid = np.asarray(v_grid, dtype=complex)
    omega_v, q_m, eps, theta_pll = x[1], x[2], x[13], x[14]
    icv = x[7] + 1j * x[8]
    vo = x[9] + 1j * x[10]
    ig = x[11] + 1j * x[12]
    s_meas = vo * np.conj(ig)
    vq_pll = (vo * np.exp(-1j * theta_pll)).imag
    omega_pll = 1.0 + p.kp_pll * vq_pll + p.ki_pll * eps

    d_omega = (u.p_ref - s_meas.real - p.kd * (omega_v - omega_pll) - p.kw * (omega_v - 1.0)) / p.ta
    d_theta = p.omega_base * (omega_v - omega_sys)
    d_qm = (s_meas.imag - q_m) / p.tq

    v_cv, err_v, err_i = _gfm_inner(x, p, u)
    d_icv, d_vo, d_ig = _lcl_rhs(p, v_cv, icv, vo, ig, v_grid, omega_sys)
    d_eps = vq_pll
    d_theta_pll = p.omega_base * (omega_pll - omega_sys)

    dx = _pack(d_theta, d_omega, d_qm, err_v.real, err_v.imag, err_i.real, err_i.imag,
               d_icv.real, d_icv.imag, d_vo.real, d_vo.imag, d_ig.real, d_ig.imag,
               d_eps, d_theta_pll)
    _check_finite(dx, "gfm_rhs")
    return dx, ig * p.rating


def _lcl_steady_state(v, s, p):
    i_g = (s / v).conjugate()
    v_o = v + complex(p.rg, p.lg) * i_g
    i_cv = i_g + 1j * p.cf * v_o
    v_cv = v_o + complex(p.rf, p.lf) * i_cv
    return i_g, v_o, i_cv, v_cv


def _inverter_capability(s, v_cv, p, what):
    if abs(s) > p.s_max:
        raise InitError(f"{what} dispatch |s| = {abs(s):.3f} exceeds capability {p.s_max}")


def gfm_init(v_term, s_inj, p: GfmParams) -> tuple[np.ndarray, GfmInputs]:
    v = complex(v_term)
    if abs(v) <= 0:
        raise InitError("inverter terminal voltage must be nonzero")
    s = complex(s_inj) / p.rating
    i_g, v_o, i_cv, v_cv = _lcl_steady_state(v, s, p)
    _inverter_capability(s, v_cv, p, "GFM")
    e_vi = v_o + complex(p.rv, p.lv) * i_g
    theta = float(np.angle(e_vi))
    rot = np.exp(-1j * theta)
    vo_dq, ig_dq, icv_dq, vcv_dq = v_o * rot, i_g * rot, i_cv * rot, v_cv * rot
    s_meas = v_o * i_g.conjugate()
    xi = (icv_dq - 1j * p.cf * vo_dq - p.kffi * ig_dq) / p.kiv
    gamma = (vcv_dq - 1j * p.lf * icv_dq - p.kffv * vo_dq) / p.kic
    x = np.array([theta, 1.0, s_meas.imag, xi.real, xi.imag, gamma.real, gamma.imag,
                  i_cv.real, i_cv.imag, v_o.real, v_o.imag, i_g.real, i_g.imag,
                  0.0, float(np.angle(v_o))])
    u = GfmInputs(p_ref=float(s_meas.real), q_ref=float(s_meas.imag), v_ref=float(abs(e_vi)))
    _verify_equilibrium(gfm_rhs, x, v, p, u, "GFM")
    return x, u


# ----------------------------------------------------------------------------
# grid-following inverter

GFL_STATES = ("theta_pll", "eps_pll", "sigma_p", "sigma_q", "gamma_d", "gamma_q",
              "icv_d", "icv_q", "vo_d", "vo_q", "ig_d", "ig_q")

_GFL_GROUP = {"theta_pll": "pll", "eps_pll": "pll", "sigma_p": "outer", "sigma_q": "outer",
              "gamma_d": "ictrl", "gamma_q": "ictrl", "icv_d": "filter", "icv_q": "filter",
              "vo_d": "filter", "vo_q": "filter", "ig_d": "filter", "ig_q": "filter"}


@dataclass(frozen=True)
class GflParams(_Params):
    lf: float = 0.08
    rf: float = 0.003
    cf: float = 0.074
    lg: float = 0.2
    rg: float = 0.01
    kp_p: float = 0.0
    ki_p: float = 20.0
    kp_q: float = 0.0
    ki_q: float = 20.0
    kpc: float = 1.27
    kic: float = 14.3
    kffv: float = 1.0
    kp_pll: float = 0.084
    ki_pll: float = 4.69
    v_dc: float = 1.6
    s_max: float = 2.0
    rating: float = 1.0
    omega_base: float = OMEGA_BASE

    def __post_init__(self):
        for name in ("lf", "cf", "lg", "rf", "rg", "rating"):
            if not getattr(self, name) > 0:
                raise DomainError(f"inverter parameter {name} must be positive")


@dataclass(frozen=True)
class GflInputs:
    p_ref: float
    q_ref: float


def _gfl_inner(x, p, u):
    theta, eps, sig_p, sig_q = x[0], x[1], x[2], x[3]
    gamma = x[4] + 1j * x[5]
    icv = x[6] + 1j * x[7]
    vo = x[8] + 1j * x[9]
    ig = x[10] + 1j * x[11]
    rot = np.exp(-1j * theta)
    vo_dq, icv_dq = vo * rot, icv * rot
    s_meas = vo * np.conj(ig)
    omega_pll = 1.0 + p.kp_pll * vo_dq.imag + p.ki_pll * eps
    err_p = u.p_ref - s_meas.real
    err_q = u.q_ref - s_meas.imag
    # q = -vd*iq with the PLL locked, so reactive output needs negative q-axis current
    i_ref = (p.kp_p * err_p + p.ki_p * sig_p) - 1j * (p.kp_q * err_q + p.ki_q * sig_q)
    err_i = i_ref - icv_dq
    vcv_dq = p.kpc * err_i + p.kic * gamma + 1j * omega_pll * p.lf * icv_dq + p.kffv * vo_dq
    return vcv_dq / rot, err_i, err_p, err_q, omega_pll, vo_dq


def gfl_rhs(x, v_grid, p: GflParams, u: GflInputs, omega_sys: float = 1.0):
    """PLL-synchronized current source with integral power control."""
    v_grid = np.asarray(v_grid, dtype=complex)
    icv = x[6] + 1j * x[7]
    vo = x[8] + 1j * x[9]
    ig = x[10] + 1j * x[11]
    v_cv, err_i, err_p, err_q, omega_pll, vo_dq = _gfl_inner(x, p, u)
    d_icv, d_vo, d_ig = _lcl_rhs(p, v_cv, icv, vo, ig, v_grid, omega_sys)
    dx = _pack(p.omega_base * (omega_pll - omega_sys), vo_dq.imag, err_p, err_q,
               err_i.real, err_i.imag, d_icv.real, d_icv.imag, d_vo.real, d_vo.imag,
               d_ig.real, d_ig.imag)
    _check_finite(dx, "gfl_rhs")
    return dx, ig * p.rating


def gfl_init(v_term, s_inj, p: GflParams) -> tuple[np.ndarray, GflInputs]:
    v = complex(v_term)
    if abs(v) <= 0:
        raise InitError("inverter terminal voltage must be nonzero")
    s = complex(s_inj) / p.rating
    i_g, v_o, i_cv, v_cv = _lcl_steady_state(v, s, p)
    _inverter_capability(s, v_cv, p, "GFL")
    theta = float(np.angle(v_o))
    rot = np.exp(-1j * theta)
    vo_dq, icv_dq, vcv_dq = v_o * rot, i_cv * rot, v_cv * rot
    s_meas = v_o * i_g.conjugate()
    if p.ki_p <= 0 or p.ki_q <= 0:
        raise InitError("grid-following init needs positive integral power gains")
    sig_p = icv_dq.real / p.ki_p
    sig_q = -icv_dq.imag / p.ki_q
    gamma = (vcv_dq - 1j * p.lf * icv_dq - p.kffv * vo_dq) / p.kic
    x = np.array([theta, 0.0, sig_p, sig_q, gamma.real, gamma.imag, i_cv.real, i_cv.imag,
                  v_o.real, v_o.imag, i_g.real, i_g.imag])
    u = GflInputs(p_ref=float(s_meas.real), q_ref=float(s_meas.imag))
    _verify_equilibrium(gfl_rhs, x, v, p, u, "GFL")
    return x, u


# ----------------------------------------------------------------------------
# constant impedance load


@dataclass(frozen=True)
class LoadParams(_Params):
    p_load: float
    q_load: float = 0.0
    v_nom: float = 1.0

    def __post_init__(self):
        if not abs(self.v_nom) > 0:
            raise DomainError("load nominal voltage must be nonzero")


def load_admittance(p: LoadParams) -> complex:
    return complex(p.p_load, -p.q_load) / abs(p.v_nom) ** 2


def load_power(y: complex, v) -> tuple[float, float]:
    """Active and reactive power drawn by admittance ``y`` at voltage ``v``."""
    mag2 = abs(complex(v)) ** 2
    return mag2 * y.real, -mag2 * y.imag


# ----------------------------------------------------------------------------
# uniform wrappers used by network assembly


@dataclass(frozen=True)
class Device:
    """A placed dynamic device: name, kind and parameters."""

    name: str
    kind: str
    params: object

    KINDS = ("sm", "gfm", "gfl")

    @property
    def state_names(self) -> tuple[str, ...]:
        return {"sm": MACHINE_STATES, "gfm": GFM_STATES, "gfl": GFL_STATES}[self.kind]

    def state_label(self, name: str) -> str:
        if self.kind == "sm":
            group = "avr" if name in ("vf", "vr1", "vr2", "vm") else (
                "shaft" if name in ("delta", "omega") else "stator")
        elif self.kind == "gfm":
            group = _GFM_GROUP[name]
        else:
            group = _GFL_GROUP[name]
        return f"{self.name}.{group}.{name}"

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    @property
    def is_inverter(self) -> bool:
        return self.kind in ("gfm", "gfl")

    def rhs(self, x, v, u, omega_sys: float = 1.0):
        fn = {"sm": machine_rhs, "gfm": gfm_rhs, "gfl": gfl_rhs}[self.kind]
        return fn(x, v, self.params, u, omega_sys)

    def init(self, v, s):
        fn = {"sm": machine_init, "gfm": gfm_init, "gfl": gfl_init}[self.kind]
        return fn(v, s, self.params)

    def output_current(self, x):
        """Current injected into the network (system base); depends on states only."""
        if self.kind == "sm":
            i_d, i_q = machine_currents(x, self.params)
            return (i_q - 1j * i_d) * np.exp(1j * x[6]) * self.params.rating
        k = self.state_names.index("ig_d")
        return (x[k] + 1j * x[k + 1]) * self.params.rating

    def converter_current_index(self) -> tuple[int, int] | None:
        if not self.is_inverter:
            return None
        names = self.state_names
        return names.index("icv_d"), names.index("icv_q")


def make_device(name: str, kind: str, overrides: dict | None = None, rating: float | None = None) -> Device:
    kind = kind.lower()
    cls = {"sm": MachineParams, "gfm": GfmParams, "gfl": GflParams}.get(kind)
    if cls is None:
        raise DomainError(f"unknown device kind {kind!r}")
    params = cls()
    kw = dict(overrides or {})
    if rating is not None:
        kw["rating"] = rating
    if kw:
        params = params.with_overrides(**kw)
    return Device(name, kind, params)
