import numpy as np
import pytest

from gridline.core import DomainError, InitError
from gridline.devices import (
    GfmParams,
    GflParams,
    LoadParams,
    MachineParams,
    gfl_init,
    gfl_rhs,
    gfm_init,
    gfm_rhs,
    load_admittance,
    load_power,
    machine_currents,
    machine_electrical_torque,
    machine_init,
    machine_rhs,
    make_device,
)

RNG = np.random.default_rng(11)


def random_dispatches(n, p_max=0.9, q_max=0.4):
    v = RNG.uniform(0.95, 1.05, n) * np.exp(1j * RNG.uniform(-0.5, 0.5, n))
    s = RNG.uniform(-p_max, p_max, n) + 1j * RNG.uniform(-q_max, q_max, n)
    return zip(v, s)


def max_abs(dx):
    return float(np.max(np.abs(dx)))


# ---------------------------------------------------------------- machine


def test_machine_equilibrium_sweep():
    p = MachineParams()
    for v, s in random_dispatches(100):
        try:
            x, u = machine_init(v, s, p)
        except InitError:
            continue  # outside the field-voltage window
        dx, i = machine_rhs(x, v, p, u)
        assert max_abs(dx) < 1e-8
        assert v * np.conj(i) == pytest.approx(s, abs=1e-8)
        assert machine_electrical_torque(x, p) == pytest.approx(u.tau_m, abs=1e-12)


def test_machine_no_load():
    p = MachineParams()
    x, u = machine_init(1.0, 0.0, p)
    assert x[7] == 1.0
    assert np.allclose(machine_currents(x, p), 0.0, atol=1e-14)
    # open circuit: vf = eq' = |v|
    assert x[8] == pytest.approx(1.0, abs=1e-12)
    assert x[2] == pytest.approx(1.0, abs=1e-12)


def test_machine_capability():
    p = MachineParams()
    limit = None
    for pg in np.arange(0.5, 10.0, 0.25):
        try:
            machine_init(1.0, complex(pg, 0.0), p)
        except InitError as exc:
            assert "capability" in str(exc) or "field voltage" in str(exc)
            limit = pg
            break
    assert limit is not None and limit > 1.0


def test_machine_speed_perturbation_decays():
    p = MachineParams()
    v, s = 1.0, 0.6 + 0.1j
    x0, u = machine_init(v, s, p)
    n = x0.size
    j = np.zeros((n, n))
    for k in range(n):
        h = 1e-7 * max(1.0, abs(x0[k]))
        e = np.zeros(n)
        e[k] = h
        j[:, k] = (machine_rhs(x0 + e, v, p, u)[0] - machine_rhs(x0 - e, v, p, u)[0]) / (2 * h)
    assert np.linalg.eigvals(j).real.max() < 0


def test_machine_param_validation():
    with pytest.raises(DomainError):
        MachineParams(xd_p=2.0)


# ---------------------------------------------------------------- grid-forming


def test_gfm_equilibrium_sweep():
    p = GfmParams()
    for v, s in random_dispatches(100):
        x, u = gfm_init(v, s, p)
        dx, i = gfm_rhs(x, v, p, u)
        assert max_abs(dx) < 1e-8
        assert v * np.conj(i) == pytest.approx(s, abs=1e-10)
        assert x[1] == 1.0  # virtual rotor at nominal speed
        # PLL locked: its derivative is zero and its frequency nominal
        assert dx[14] == pytest.approx(0.0, abs=1e-12)


def test_gfm_no_load_filter_currents():
    p = GfmParams()
    x, _ = gfm_init(1.0, 0.0, p)
    ig, icv = x[11] + 1j * x[12], x[7] + 1j * x[8]
    assert abs(ig) < 1e-15
    assert icv == pytest.approx(1j * p.cf * (x[9] + 1j * x[10]), abs=1e-15)


def test_gfm_droop_free_power_balance():
    p = GfmParams().with_overrides(kd=0.0, kq=0.0)
    x, u = gfm_init(1.0, 0.7 + 0.2j, p)
    s_meas = (x[9] + 1j * x[10]) * np.conj(x[11] + 1j * x[12])
    assert s_meas.real == pytest.approx(u.p_ref, abs=1e-14)


def test_gfm_capability():
    with pytest.raises(InitError, match="capability"):
        gfm_init(1.0, 2.5 + 0.0j, GfmParams())


# ---------------------------------------------------------------- grid-following


def test_gfl_equilibrium_sweep():
    p = GflParams()
    for v, s in random_dispatches(100):
        x, u = gfl_init(v, s, p)
        dx, i = gfl_rhs(x, v, p, u)
        assert max_abs(dx) < 1e-8
        vo, ig = x[8] + 1j * x[9], x[10] + 1j * x[11]
        s_meas = vo * np.conj(ig)
        assert s_meas.real == pytest.approx(u.p_ref, abs=1e-12)
        assert s_meas.imag == pytest.approx(u.q_ref, abs=1e-12)
        assert x[1] == 0.0  # PLL integrator: omega_pll = 1


# ---------------------------------------------------------------- loads and wrappers


def test_load_admittance():
    assert load_admittance(LoadParams(1.0, 0.0, 1.0)) == 1.0 + 0j
    assert load_admittance(LoadParams(2.05, 0.08, 1.0)) == pytest.approx(2.05 - 0.08j)
    y = load_admittance(LoadParams(1.3, 0.4, 1.02))
    p, q = load_power(y, 1.02 * np.exp(0.3j))
    assert p == pytest.approx(1.3, abs=1e-12) and q == pytest.approx(0.4, abs=1e-12)


def test_device_wrapper():
    d = make_device("gfm1", "gfm", {"kq": 0.1}, rating=2.0)
    assert d.n_states == 15 and d.is_inverter
    assert d.params.rating == 2.0 and d.params.kq == 0.1
    assert d.state_label("icv_d") == "gfm1.filter.icv_d"
    assert make_device("sm2", "sm").state_label("delta") == "sm2.shaft.delta"
    x, u = d.init(1.0, 1.2 + 0.3j)
    dx, i = d.rhs(x, 1.0, u)
    assert d.output_current(x) == pytest.approx(i)
    assert 1.0 * np.conj(i) == pytest.approx(1.2 + 0.3j)
    with pytest.raises(DomainError):
        make_device("x", "wind")


def test_rhs_is_time_invariant():
    p = GfmParams()
    x, u = gfm_init(1.0, 0.5, p)
    x = x + 1e-3 * RNG.normal(size=x.size)
    a, _ = gfm_rhs(x, 1.0, p, u)
    b, _ = gfm_rhs(x.copy(), 1.0, p, u)
    np.testing.assert_array_equal(a, b)
