import cmath

import numpy as np
import pytest
from mpmath import mp, mpc, mpf

from gridline.cases import build_two_bus, load_line_data
from gridline.core import ComplexDQ, DomainError
from gridline.lines import (
    EquivalentPi,
    FittedBranches,
    LineData,
    LineKind,
    LinePULParams,
    LineState,
    dynpi_rhs,
    hyperbolic_pi,
    ladder_node_caps,
    line_elements,
    line_frequency_response,
    lumped_pi,
    msmb_rhs,
    mssb_rhs,
    parallel_equivalent,
    read_pul_params,
    segment_params,
    select_segment_count,
    statpi_port_currents,
    two_port_admittance,
    write_pul_params,
)

P = LinePULParams(r_km=3e-5, l_km=5.7e-4, c_km=2.6e-3)
RNG = np.random.default_rng(7)


def rand_c(*shape):
    return RNG.normal(size=shape) + 1j * RNG.normal(size=shape)


# ---------------------------------------------------------------- hyperbolic pi


def test_short_line_limit():
    pi = hyperbolic_pi(P, 1e-6)
    assert abs(pi.z_pi / (P.z_km() * 1e-6) - 1) < 1e-9
    assert abs(2 * pi.y_end / (P.y_km() * 1e-6) - 1) < 1e-9


def test_lossless_line_has_no_series_resistance():
    pi = hyperbolic_pi(LinePULParams(0.0, 5.7e-4, 2.6e-3), 300.0)
    assert pi.z_pi.real == 0.0


def test_abcd_cascade_oracle():
    p = LinePULParams(2e-4, 1.1e-3, 3.1e-3)
    length, n = 300.0, 10**5
    dz, dy = p.z_km() * length / n, p.y_km() * length / n
    section = np.array([[1 + dz * dy / 2, dz], [dy * (1 + dz * dy / 4), 1 + dz * dy / 2]])
    abcd = np.linalg.matrix_power(section, n)
    z_ref = abcd[0, 1]
    y_end_ref = (abcd[0, 0] - 1) / abcd[0, 1]
    pi = hyperbolic_pi(p, length, zero_shunt_conductance=False)
    assert abs(pi.z_pi / z_ref - 1) < 1e-6
    assert abs(pi.y_end / y_end_ref - 1) < 1e-6
    assert hyperbolic_pi(p, length).y_end.real == 0.0


def test_bad_length():
    with pytest.raises(DomainError):
        hyperbolic_pi(P, 0.0)
    with pytest.raises(DomainError):
        segment_params(P, 100.0, 0)


# ---------------------------------------------------------------- segments, branches


def test_segment_params():
    one = segment_params(P, 100.0, 1)
    ten = segment_params(P, 100.0, 10)
    assert one.r_seg == pytest.approx(100 * P.r_km)
    assert ten.l_seg == pytest.approx(one.l_seg / 10)
    assert ten.c_seg == pytest.approx(one.c_seg / 10)
    for n in (1, 3, 7, 64):
        s = segment_params(P, 100.0, n)
        assert n * complex(s.r_seg, s.l_seg) == pytest.approx(P.z_km() * 100.0, rel=1e-13)
        assert ladder_node_caps(s.c_seg, n).sum() == pytest.approx(P.c_km * 100.0, rel=1e-13)


def test_parallel_equivalent():
    one = FittedBranches((0.1,), (0.2,))
    assert parallel_equivalent(one, 1.0) == complex(0.1, 0.2)
    two = FittedBranches((0.1, 0.1), (0.2, 0.2))
    assert parallel_equivalent(two, 1.0) == pytest.approx(complex(0.05, 0.1), rel=1e-15)
    r, l = RNG.uniform(1e-5, 1e-2, 3), RNG.uniform(1e-4, 1e-2, 3)
    mp.dps = 40
    total = sum(1 / mpc(mpf(rm), mpf(lm)) for rm, lm in zip(r, l))
    ref = complex(1 / total)
    got = parallel_equivalent(FittedBranches(tuple(r), tuple(l)), 1.0)
    assert abs(got / ref - 1) < 1e-12


# ---------------------------------------------------------------- statpi


def test_statpi_equal_potential():
    pi = hyperbolic_pi(P, 100.0)
    v = 1.0 + 0.2j
    i_in, i_out = statpi_port_currents(pi, v, v)
    assert complex(i_in) == pytest.approx(pi.y_end * v, abs=1e-14)
    assert complex(i_out) == pytest.approx(-pi.y_end * v, abs=1e-14)
    z_in, z_out = statpi_port_currents(pi, 0, 0)
    assert complex(z_in) == 0 and complex(z_out) == 0


def test_statpi_nodal_oracle():
    pi = hyperbolic_pi(P, 150.0)
    v1, v2 = rand_c(2)
    i_in, i_out = statpi_port_currents(pi, ComplexDQ.of(v1), ComplexDQ.of(v2))
    i_series = (v1 - v2) / pi.z_pi
    # KCL at each terminal node of the pi
    assert abs(complex(i_in) - pi.y_end * v1 - i_series) < 1e-12
    assert abs(i_series - pi.y_end * v2 - complex(i_out)) < 1e-12


# ---------------------------------------------------------------- dynamic ladders


def _pi_steady_state(pi, v1, v2):
    i = (v1 - v2) / pi.z_pi
    i_in = i + pi.y_end * v1
    i_out = i - pi.y_end * v2
    return LineState([[i]], [v1, v2]), i_in, i_out


def test_dynpi_equilibrium_matches_statpi():
    pi = hyperbolic_pi(P, 100.0)
    v1, v2 = 1.02 + 0.05j, 0.98 - 0.03j
    state, i_in, i_out = _pi_steady_state(pi, v1, v2)
    d = dynpi_rhs(state, pi, i_in, i_out)
    assert np.max(np.abs(d.to_real())) < 1e-10
    si_in, si_out = statpi_port_currents(pi, v1, v2)
    assert complex(si_in) == pytest.approx(i_in) and complex(si_out) == pytest.approx(i_out)
    assert np.all(dynpi_rhs(LineState.zeros(1), pi, 0, 0).to_real() == 0)


def test_dynpi_integrates_to_statpi_current():
    from scipy.integrate import solve_ivp

    pi = hyperbolic_pi(P, 100.0)
    v1, v2 = 1.0 + 0.0j, 0.97 - 0.04j
    # hold terminal voltages: only the series current is dynamic
    wb = 2 * np.pi * 60

    def f(t, x):
        i = x[0] + 1j * x[1]
        di = wb / pi.l_pi * (v1 - v2 - (pi.r_pi + 1j * pi.l_pi) * i)
        return [di.real, di.imag]

    sol = solve_ivp(f, (0, 5.0), [0.0, 0.0], method="Radau", rtol=1e-12, atol=1e-14)
    i_end = sol.y[0, -1] + 1j * sol.y[1, -1]
    ref = (v1 - v2) / pi.z_pi
    assert abs(i_end - ref) < 1e-8


def test_mssb_one_segment_equals_lumped_dynpi():
    seg = segment_params(P, 100.0, 1)
    lumped = lumped_pi(P, 100.0)
    s = LineState(rand_c(1, 1), rand_c(2))
    a = mssb_rhs(s, seg, 0.3 + 0.1j, -0.2j)
    b = dynpi_rhs(s, EquivalentPi(lumped.z_pi, lumped.y_end), 0.3 + 0.1j, -0.2j)
    np.testing.assert_array_equal(a.to_real(), b.to_real())


def _ladder_equilibrium(el, v1, v2):
    """Terminal-driven ladder solved in 40-digit arithmetic so the oracle adds no round-off."""
    mp.dps = 40
    n = el.n_nodes
    y = mp.matrix(n, n)
    for k in range(n):
        y[k, k] = 1j * mpf(el.caps[k])
    yb = [1 / mpc(mpf(r), mpf(l)) for r, l in zip(el.br_r, el.br_l)]
    for a, b, g in zip(el.br_from, el.br_to, yb):
        y[a, a] += g
        y[b, b] += g
        y[a, b] -= g
        y[b, a] -= g
    v = [mpc(v1)] + [mpc(0)] * (n - 2) + [mpc(v2)]
    if n > 2:
        inner = mp.matrix([[y[i, j] for j in range(1, n - 1)] for i in range(1, n - 1)])
        rhs = mp.matrix([-(y[i, 0] * v[0] + y[i, n - 1] * v[-1]) for i in range(1, n - 1)])
        sol = mp.lu_solve(inner, rhs)
        v[1:-1] = [sol[k] for k in range(n - 2)]
    i_br = np.array([complex((v[a] - v[b]) * g) for a, b, g in zip(el.br_from, el.br_to, yb)])
    i_in = complex(sum(y[0, j] * v[j] for j in range(n)))
    i_out = -complex(sum(y[n - 1, j] * v[j] for j in range(n)))
    return np.array([complex(z) for z in v]), i_br, i_in, i_out


def test_mssb_equilibrium_from_nodal_solve():
    n = 6
    data = LineData.single(P)
    el = line_elements(LineKind("mssb", n), data, 120.0)
    v, i_br, i_in, i_out = _ladder_equilibrium(el, 1.0, 0.95 - 0.1j)
    i = i_br.reshape(n, 1)
    d = mssb_rhs(LineState(i, v), segment_params(P, 120.0, n), i_in, i_out)
    assert np.max(np.abs(d.to_real())) < 1e-10


def test_msmb_single_branch_is_mssb_and_parallel_equilibrium():
    seg = segment_params(P, 100.0, 3)
    s = LineState(rand_c(3, 1), rand_c(4))
    a = msmb_rhs(s, [seg.r_seg], [seg.l_seg], seg.c_seg, 0.1, 0.2)
    b = mssb_rhs(s, seg, 0.1, 0.2)
    np.testing.assert_array_equal(a.to_real(), b.to_real())

    data = load_line_data()
    n = 4
    el = line_elements(LineKind("msmb", n), data, 100.0)
    v, i_br, i_in, i_out = _ladder_equilibrium(el, 1.0, 0.97 - 0.05j)
    i = i_br.reshape(n, data.branches.m)
    r, l = np.asarray(data.branches.r) * 25.0, np.asarray(data.branches.l) * 25.0
    d = msmb_rhs(LineState(i, v), r, l, data.c_km * 25.0, i_in, i_out)
    assert np.max(np.abs(d.to_real())) < 1e-10


def test_msmb_branches_share_segment_voltage():
    r, l = np.array([1e-3, 2e-2]), np.array([1e-2, 3e-2])
    s = LineState(rand_c(2, 2), rand_c(3))
    d = msmb_rhs(s, r, l, 1e-2, 0, 0)
    wb = 2 * np.pi * 60
    drop = d.currents * l / wb + (r + 1j * l) * s.currents
    assert np.allclose(drop[:, 0], drop[:, 1], atol=1e-12)


def test_ladder_linearity():
    seg = segment_params(P, 100.0, 4)
    s = LineState(rand_c(4, 1), rand_c(5))
    u = (0.3 + 0.2j, -0.1 + 0.4j)
    a = mssb_rhs(LineState(2.5 * s.currents, 2.5 * s.voltages), seg, 2.5 * u[0], 2.5 * u[1]).to_real()
    b = 2.5 * mssb_rhs(s, seg, *u).to_real()
    assert np.max(np.abs(a - b)) <= 1e-12 * np.max(np.abs(b))


def test_energy_non_increasing():
    from scipy.integrate import solve_ivp

    seg = segment_params(LinePULParams(1e-3, 5.7e-4, 2.6e-3), 100.0, 4)
    caps = ladder_node_caps(seg.c_seg, 4)

    def f(t, x):
        return mssb_rhs(LineState.from_real(x, 4), seg, 0, 0).to_real()

    x0 = LineState(rand_c(4, 1) * 0.1, rand_c(5)).to_real()
    sol = solve_ivp(f, (0, 0.02), x0, method="Radau", rtol=1e-10, atol=1e-12, t_eval=np.linspace(0, 0.02, 200))
    energy = []
    for x in sol.y.T:
        st_ = LineState.from_real(x, 4)
        energy.append(0.5 * (seg.l_seg * np.sum(np.abs(st_.currents) ** 2) + np.sum(caps * np.abs(st_.voltages) ** 2)))
    assert np.all(np.diff(energy) <= 1e-9 * energy[0])


def test_line_state_round_trip():
    s = LineState(rand_c(3, 2), rand_c(4))
    back = LineState.from_real(s.to_real(), 3, 2)
    np.testing.assert_array_equal(back.currents, s.currents)
    assert s.n_real_states == 2 * (6 + 4)
    with pytest.raises(DomainError):
        LineState(np.zeros((2, 1)), np.zeros(2))


# ---------------------------------------------------------------- frequency response


def test_statpi_response_nodal_oracle():
    data = LineData.single(P)
    pi = hyperbolic_pi(P, 100.0)
    fr = line_frequency_response(LineKind("statpi"), data, 100.0, [1.0])
    ref = 1.0 / (pi.y_end + 1.0 / pi.z_pi)
    assert abs(fr.z[0] - ref) < 1e-12 * abs(ref)


def test_response_dc_limit():
    data = LineData.single(P)
    fr = line_frequency_response(LineKind("mssb", 8), data, 100.0, [1e-9])
    assert abs(fr.z[0] - P.r_km * 100.0) < 1e-6 * P.r_km * 100.0


def test_nominal_frequency_two_ports_agree():
    data = load_line_data()
    ref = two_port_admittance(line_elements(LineKind("dynpi"), data, 100.0), 1.0)
    for kind in ("statpi", "mssb:16", "msmb:16"):
        y = two_port_admittance(line_elements(LineKind.parse(kind), data, 100.0), 1.0)
        assert np.max(np.abs(y - ref)) < 0.01 * np.max(np.abs(ref))


def test_line_kind_parse():
    assert LineKind.parse("MSSB:8") == LineKind("mssb", 8)
    assert LineKind.parse("msmb:auto").n_segments is None
    assert str(LineKind.parse("dynpi")) == "dynpi"
    with pytest.raises(Exception):
        LineKind.parse("ladder")


# ---------------------------------------------------------------- segment count


def test_select_segment_count():
    case = build_two_bus()
    assert select_segment_count(case, 0.0) == 1
    targets = [500.0, 2000.0, 4000.0]
    ns = [select_segment_count(case, f) for f in targets]
    assert ns == sorted(ns)
    from gridline.cases import apply_scales

    assert select_segment_count(apply_scales(case, 1.0, 2.0), 2000.0) >= ns[1]


def test_pul_csv_round_trip(tmp_path):
    write_pul_params(tmp_path / "p.csv", P)
    assert read_pul_params(tmp_path / "p.csv") == P
