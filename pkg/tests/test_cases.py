import mpmath
import numpy as np
import pytest

from gridline.cases import (
    PRESETS,
    apply_scales,
    build_ieee9,
    build_two_bus,
    compute_sil,
    load_line_data,
    preset,
    with_kind,
)
from gridline.core import ConfigError, DomainError
from gridline.lines import LinePULParams
from gridline.network import branch_flows, power_flow
from gridline.smallsignal import classify_case

RNG = np.random.default_rng(11)


def test_sil_lossless():
    p = LinePULParams(0.0, 1.3e-3, 8.7e-3)
    pl, ql = compute_sil(1.0, p)
    assert ql == 0.0
    assert pl == pytest.approx(1 / np.sqrt(1.3e-3 / 8.7e-3), rel=1e-14)


def test_sil_against_high_precision():
    mpmath.mp.dps = 40
    for _ in range(20):
        r, l, c = RNG.uniform(1e-5, 1e-3), RNG.uniform(1e-4, 1e-2), RNG.uniform(1e-3, 1e-1)
        v, w = RNG.uniform(0.9, 1.1), RNG.uniform(0.5, 2.0)
        z_c = mpmath.sqrt(mpmath.mpc(r, w * l) / mpmath.mpc(0, w * c))
        s = mpmath.mpf(v) ** 2 / z_c
        pl, ql = compute_sil(v, LinePULParams(r, l, c), w)
        assert abs(pl - float(s.real)) < 1e-12 * abs(s)
        assert abs(ql - float(s.imag)) < 1e-12 * abs(s)


def test_sil_default_data():
    d = load_line_data()
    pl, ql = compute_sil(1.0, d.pul(), d.omega0)
    assert round(pl, 2) == 2.05 and round(ql, 2) == 0.08


def test_sil_requires_capacitance():
    with pytest.raises(DomainError):
        compute_sil(1.0, LinePULParams(1e-4, 1e-3, 0.0))


def test_two_bus_structure():
    c = build_two_bus(("gfm", "sm"), 1)
    assert len(c.branches) == 2
    assert c.branches[0].length_km == c.branches[1].length_km == 100.0
    assert repr(c.branches[0])[len("BranchSpec(id='L1'"):] == repr(c.branches[1])[len("BranchSpec(id='L2'"):]
    ref = [s for s in c.sources if s.reference]
    assert len(ref) == 1 and ref[0].bus == 1 and ref[0].kind == "gfm"
    assert c.loads[0].bus == 1
    c = build_two_bus(("sm", "sm"), 2)
    assert [s.kind for s in c.sources] == ["sm", "sm"] and c.loads[0].bus == 2
    with pytest.raises(DomainError):
        build_two_bus(("gfl", "sm"))


def test_two_bus_symmetric_flows():
    c = build_two_bus()
    flows = branch_flows(c.network(), power_flow(c.network()))
    assert flows["L1"] == pytest.approx(flows["L2"], abs=1e-14)


def test_ieee9_structure():
    c = build_ieee9()
    assert len(c.buses) == 9 and len(c.branches) == 9 and len(c.loads) == 3
    assert sorted(ld.bus for ld in c.loads) == [5, 6, 8]
    kinds = {s.bus: s.kind for s in c.sources}
    assert kinds == {1: "gfm", 2: "sm", 3: "gfm"}
    assert [s.bus for s in c.sources if s.reference] == [2]
    assert any({b.from_bus, b.to_bus} == {4, 5} for b in c.branches)


def test_apply_scales():
    c = build_two_bus()
    assert apply_scales(c, 1, 1) == c
    net = apply_scales(c, 1, 5).network()
    assert [b.length_km for b in net.branches] == [500.0, 500.0]
    a = apply_scales(apply_scales(c, 1.5, 2.0), 3.0, 0.5)
    b = apply_scales(c, 4.5, 1.0)
    assert a.network() == b.network()
    with pytest.raises(DomainError):
        apply_scales(c, 0.0, 1.0)


def _balance(case):
    net = case.network()
    pf = power_flow(net)
    losses = sum((a + b).real for a, b in branch_flows(net, pf).values())
    consumed = sum(ld.p_load * abs(pf.voltage(ld.bus)) ** 2 for ld in net.loads)
    return pf, losses, consumed


@pytest.mark.parametrize("make", [build_two_bus, build_ieee9])
def test_load_scale_doubles_setpoints(make):
    c = make()
    one, two = c.network(), apply_scales(c, 2, 1).network()
    for s1, s2 in zip(one.sources, two.sources):
        assert s2.p_set == 2 * s1.p_set
    for l1, l2 in zip(one.loads, two.loads):
        assert (l2.p_load, l2.q_load) == (2 * l1.p_load, 2 * l1.q_load)
    for case in (c, apply_scales(c, 2, 1)):
        pf, losses, consumed = _balance(case)
        assert sum(pf.s_gen.real) == pytest.approx(consumed + losses, abs=1e-9)
        pv = [s for s in case.network().sources if not s.reference]
        for s in pv:
            assert pf.s_gen[pf.buses.index(s.bus)].real == pytest.approx(s.p_set, abs=1e-9)


@pytest.mark.parametrize("kind", ["statpi", "dynpi", "mssb:4", "msmb:4"])
def test_ieee9_nominal_stable(kind):
    assert classify_case(with_kind(build_ieee9(), kind)) == "stable"


def test_presets():
    for name in PRESETS:
        assert preset(name).buses
    with pytest.raises(ConfigError, match="unknown case"):
        preset("nope")


def test_bad_case_files(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("buses = [1, 2\n")
    with pytest.raises(ConfigError):
        build_ieee9(path=bad)
    bad.write_text("name = 'x'\n")
    with pytest.raises(ConfigError):
        build_ieee9(path=bad)
    with pytest.raises(ConfigError):
        load_line_data(bad)
