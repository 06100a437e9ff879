import numpy as np
import pytest

from resflow.errors import GeometryError, InputError
from resflow.units import GRAVITY
from resflow.wells import (Perforation, Schedule, ScheduleEntry, Well,
                           WellControl, apply_limit_switches, peaceman_index,
                           perforation_rate, rate_of_kind)


def test_peaceman_isotropic_equivalent_radius():
    # kx == ky, dx == dy: r_o = 0.28*sqrt(2)/2 * dx = 0.19799 dx
    kx = 1e-13
    dx = 100.0
    wi = peaceman_index(kx, kx, dx, dx, 10.0, rw=0.1)
    ro = 0.28 * np.sqrt(2.0) / 2.0 * dx
    assert ro / dx == pytest.approx(0.1979899, rel=1e-6)
    expect = 2.0 * np.pi * kx * 10.0 / np.log(ro / 0.1)
    assert wi == pytest.approx(expect, rel=1e-14)


def test_peaceman_anisotropic_hand_value():
    kx, ky = 4e-13, 1e-13
    dx, dy, dz = 50.0, 80.0, 12.0
    a, b = np.sqrt(ky / kx), np.sqrt(kx / ky)  # 0.5, 2.0
    ro = 0.28 * np.sqrt(a * dx**2 + b * dy**2) / (np.sqrt(a) + np.sqrt(b))
    expect = 2.0 * np.pi * np.sqrt(kx * ky) * dz / np.log(ro / 0.1)
    assert peaceman_index(kx, ky, dx, dy, dz, 0.1) == pytest.approx(expect, rel=1e-14)


def test_peaceman_skin_scales_index():
    wi0 = peaceman_index(1e-13, 1e-13, 100.0, 100.0, 10.0, 0.1, skin=0.0)
    wi5 = peaceman_index(1e-13, 1e-13, 100.0, 100.0, 10.0, 0.1, skin=5.0)
    ro = 0.28 * np.sqrt(2.0) / 2.0 * 100.0
    lnr = np.log(ro / 0.1)
    assert wi5 / wi0 == pytest.approx(lnr / (lnr + 5.0), rel=1e-14)


def test_peaceman_linear_in_thickness():
    wi1 = peaceman_index(1e-13, 2e-13, 60.0, 40.0, 3.0, 0.1)
    wi2 = peaceman_index(1e-13, 2e-13, 60.0, 40.0, 6.0, 0.1)
    assert wi2 == pytest.approx(2.0 * wi1, rel=1e-14)


def test_peaceman_rejects_degenerate_geometry():
    with pytest.raises(GeometryError):
        peaceman_index(1e-13, 1e-13, 0.5, 0.5, 10.0, rw=0.2)  # r_o <= r_w
    with pytest.raises(GeometryError):
        peaceman_index(0.0, 1e-13, 100.0, 100.0, 10.0, 0.1)
    with pytest.raises(InputError):
        peaceman_index(1e-13, 1e-13, 100.0, 100.0, 10.0, rw=-0.1)
    with pytest.raises(GeometryError):
        # negative skin overwhelming ln(ro/rw)
        peaceman_index(1e-13, 1e-13, 100.0, 100.0, 10.0, 0.1, skin=-20.0)


def test_perforation_rate_sign_and_hydrostatics():
    wi, mob = 1e-12, 500.0
    # drawdown into the well: p_cell > p_h gives negative (out of reservoir)
    q = perforation_rate(wi, mob, 1e7, 2e7, 800.0, 1000.0, 1000.0)
    assert q < 0.0
    # hydrostatic column: perforation 50 m below datum, balance shifts
    q2 = perforation_rate(wi, mob, 1e7, 1e7, 800.0, 1000.0, 1050.0)
    assert q2 == pytest.approx(wi * mob * 800.0 * GRAVITY * 50.0, rel=1e-14)


def test_perforation_rate_monotone_in_bhp(rng):
    ph = np.sort(rng.uniform(5e6, 3e7, 25))
    q = [perforation_rate(2e-12, 300.0, p, 1.5e7, 750.0, 1000.0, 1012.0)
         for p in ph]
    assert np.all(np.diff(q) > 0.0)


def test_well_validation():
    perf = (Perforation(cell=0, wi=1e-12, depth=1000.0),)
    with pytest.raises(InputError):
        Well("W", "monitor", 1000.0, perf)
    with pytest.raises(InputError):
        Well("W", "injector", 1000.0, perf, inj_phase="oil")
    with pytest.raises(InputError):
        Well("W", "producer", 1000.0, ())


def test_well_control_validation():
    WellControl("bhp", 2e7)
    WellControl("rate", 0.01, kind="orat")
    with pytest.raises(InputError):
        WellControl("shut", 0.0)
    with pytest.raises(InputError):
        WellControl("rate", 0.01)  # kind required
    with pytest.raises(InputError):
        WellControl("rate", -0.01, kind="wrat")
    with pytest.raises(InputError):
        WellControl("bhp", 2e7, rate_limit=0.01)  # limit kind required


def test_schedule_lookup_between_entries():
    c0 = {"P": WellControl("bhp", 2e7)}
    c1 = {"P": WellControl("bhp", 1e7)}
    sched = Schedule([ScheduleEntry(0.0, c0), ScheduleEntry(100.0, c1)])
    assert sched.active_controls(50.0)["P"].value == 2e7
    assert sched.active_controls(0.0)["P"].value == 2e7
    assert sched.active_controls(100.0)["P"].value == 1e7
    assert sched.active_controls(150.0)["P"].value == 1e7
    assert sched.event_times() == [0.0, 100.0]


def test_schedule_single_entry_and_unmentioned_wells():
    sched = Schedule([ScheduleEntry(0.0, {"A": WellControl("bhp", 1e7)})])
    active = sched.active_controls(1e9)
    assert active["A"].value == 1e7
    assert "B" not in active


def test_schedule_later_entry_can_shut_a_well():
    sched = Schedule([
        ScheduleEntry(0.0, {"A": WellControl("bhp", 1e7)}),
        ScheduleEntry(10.0, {"A": None}),
    ])
    assert sched.active_controls(5.0)["A"] is not None
    assert sched.active_controls(10.0)["A"] is None


def test_schedule_rejects_duplicate_times():
    with pytest.raises(InputError):
        Schedule([ScheduleEntry(0.0, {}), ScheduleEntry(0.0, {})])


def test_rate_of_kind_liquid_sum():
    rates = {"oil": 3.0e-4, "water": 2.0e-4, "gas": 0.1, "injected": 0.0}
    assert rate_of_kind(rates, "orat") == 3.0e-4
    assert rate_of_kind(rates, "wrat") == 2.0e-4
    assert rate_of_kind(rates, "lrat") == pytest.approx(5.0e-4)
    with pytest.raises(InputError):
        rate_of_kind(rates, "grat")


def _producer():
    return Well("P", "producer", 1000.0,
                (Perforation(cell=0, wi=1e-12, depth=1000.0),))


def _injector():
    return Well("I", "injector", 1000.0,
                (Perforation(cell=1, wi=1e-12, depth=1000.0),))


def test_switch_producer_rate_to_bhp_on_low_pressure():
    wells = [_producer()]
    controls = {"P": WellControl("rate", 1e-3, kind="orat", bhp_limit=1.5e7)}
    bhp = {"P": 1.2e7}  # solved BHP fell below the floor
    rates = {"P": {"oil": 1e-3, "water": 0.0, "gas": 0.0, "injected": 0.0}}
    new, events = apply_limit_switches(wells, controls, bhp, rates)
    c = new["P"]
    assert c.mode == "bhp" and c.value == 1.5e7
    assert c.rate_limit == 1e-3 and c.rate_limit_kind == "orat"
    assert events == [("P", "rate->bhp", 1.5e7)]


def test_switch_injector_rate_to_bhp_on_high_pressure():
    wells = [_injector()]
    controls = {"I": WellControl("rate", 2e-3, kind="rate", bhp_limit=4e7)}
    bhp = {"I": 4.5e7}
    rates = {"I": {"oil": 0.0, "water": -2e-3, "gas": 0.0, "injected": 2e-3}}
    new, events = apply_limit_switches(wells, controls, bhp, rates)
    assert new["I"].mode == "bhp" and new["I"].value == 4e7
    assert events[0][1] == "rate->bhp"


def test_switch_bhp_to_rate_on_rate_overshoot():
    wells = [_producer()]
    controls = {"P": WellControl("bhp", 1.5e7, rate_limit=5e-4,
                                 rate_limit_kind="lrat")}
    bhp = {"P": 1.5e7}
    rates = {"P": {"oil": 4e-4, "water": 3e-4, "gas": 0.0, "injected": 0.0}}
    new, events = apply_limit_switches(wells, controls, bhp, rates)
    c = new["P"]
    assert c.mode == "rate" and c.value == 5e-4 and c.kind == "lrat"
    assert c.bhp_limit == 1.5e7
    assert events == [("P", "bhp->rate", 5e-4)]


def test_switching_reaches_fixed_point():
    # after a switch the flipped control must not immediately flip back
    wells = [_producer()]
    controls = {"P": WellControl("rate", 1e-3, kind="orat", bhp_limit=1.5e7)}
    bhp = {"P": 1.2e7}
    rates = {"P": {"oil": 1e-3, "water": 0.0, "gas": 0.0, "injected": 0.0}}
    c1, ev1 = apply_limit_switches(wells, controls, bhp, rates)
    assert ev1
    # re-solved step: well now at the BHP floor producing under the old target
    bhp2 = {"P": 1.5e7}
    rates2 = {"P": {"oil": 7e-4, "water": 0.0, "gas": 0.0, "injected": 0.0}}
    c2, ev2 = apply_limit_switches(wells, c1, bhp2, rates2)
    assert ev2 == []
    assert c2 == c1


def test_no_switch_when_within_limits():
    wells = [_producer(), _injector()]
    controls = {
        "P": WellControl("rate", 1e-3, kind="orat", bhp_limit=1e7),
        "I": WellControl("rate", 2e-3, kind="rate", bhp_limit=4e7),
    }
    bhp = {"P": 2e7, "I": 3e7}
    rates = {"P": {"oil": 1e-3, "water": 0.0, "gas": 0.0, "injected": 0.0},
             "I": {"oil": 0.0, "water": -2e-3, "gas": 0.0, "injected": 2e-3}}
    new, events = apply_limit_switches(wells, controls, bhp, rates)
    assert events == [] and new == controls
