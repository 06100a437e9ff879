import numpy as np
import pytest
from scipy.optimize import brentq
from types import SimpleNamespace

from resflow.errors import InputError, NonconvergenceError
from resflow.grid import Grid
from resflow.model import Discretization, RockModel
from resflow.newton import (NewtonConfig, Simulation, StepReport,
                            TimestepConfig, _damping_scale, advance_timestep,
                            forcing_term, newton_solve)
from resflow.props import FluidSystem, PvtTable, RelPermTable
from resflow.units import MILLIDARCY
from resflow.wells import (Perforation, Schedule, ScheduleEntry, Well,
                           WellControl)


def corey_relperm():
    sw = np.linspace(0.2, 0.8, 13)
    krw = np.clip(((sw - 0.2) / 0.6) ** 2, 0.0, 1.0)
    krow = np.clip(((0.8 - sw) / 0.6) ** 2, 0.0, 1.0)
    return RelPermTable(sw, krw, krow, np.zeros(13))


def dead_oil_fluid(cw=4e-10):
    pvt = PvtTable([1e5, 8e7], [1.0, 1.0], [2e-3, 2e-3], [0.0, 0.0],
                   bw_ref=1.0, cw=cw, pw_ref=2e7, muw=5e-4,
                   rho_o_std=800.0, rho_w_std=1000.0)
    return FluidSystem("two-phase", corey_relperm(), pvt)


def one_cell_system(poro=0.3, cw=4e-10, cr=5e-10, wells=()):
    g = Grid(1, 1, 1, 10.0, 10.0, 10.0, tops=-5.0)  # center at z = 0
    rock = RockModel(np.array([poro]), np.full((1, 3), 100.0 * MILLIDARCY),
                     cr=cr, p_ref=2e7)
    return Discretization(g, rock, dead_oil_fluid(cw=cw), wells=list(wells))


# --- forcing terms -------------------------------------------------------------

def test_choice3_hand_value():
    th = forcing_term("choice3", 0.1, 1.0, None, gamma=1.0, beta=2.0)
    assert th == pytest.approx(0.01)


def test_choice3_defaults_match_formula():
    th = forcing_term("choice3", 0.5, 1.0, None)  # gamma 0.9, beta 2
    assert th == pytest.approx(0.9 * 0.25)


def test_forcing_clamps_to_interval():
    assert forcing_term("choice3", 2.0, 1.0, None) == 0.9
    assert forcing_term("choice3", 1e-9, 1.0, None) == 1e-4
    assert forcing_term("choice1", 1.0, 1.0, 5.0) == 0.9
    assert forcing_term("choice1", 1.0, 1.0, 1e-12) == 1e-4


def test_choice2_equal_norms_hits_floor():
    # | ||b|| - ||r_prev|| | = 0: clamped up to theta_min
    assert forcing_term("choice2", 0.7, 1.0, 0.7) == 1e-4


def test_choice1_ratio():
    assert forcing_term("choice1", 0.5, 2.0, 0.3) == pytest.approx(0.15)


def test_constant_mode_exempt_from_lower_clamp():
    th = forcing_term("constant", 1.0, 1.0, 1.0, theta_const=1e-7)
    assert th == 1e-7
    # still capped above
    assert forcing_term("constant", 1.0, 1.0, 1.0, theta_const=5.0) == 0.9


def test_first_adaptive_iteration_uses_theta_max():
    assert forcing_term("choice3", 1.0, None, None) == 0.9
    assert forcing_term("choice1", 1.0, None, None) == 0.9


def test_forcing_after_convergence_rejected():
    with pytest.raises(InputError):
        forcing_term("choice3", 1.0, 0.0, None)
    with pytest.raises(InputError):
        forcing_term("choice4", 1.0, 1.0, None)


def test_newton_config_validation():
    NewtonConfig()
    with pytest.raises(InputError):
        NewtonConfig(forcing="choice5")
    with pytest.raises(InputError):
        NewtonConfig(tol=0.0)
    with pytest.raises(InputError):
        NewtonConfig(theta_min=0.5, theta_max=0.2)
    with pytest.raises(InputError):
        NewtonConfig(gamma=1.5)
    with pytest.raises(InputError):
        NewtonConfig(beta=1.0)
    with pytest.raises(InputError):
        NewtonConfig(ds_max=0.0)


# --- damping -------------------------------------------------------------------

def test_damping_scale_caps_saturation_change():
    cells = np.array([[0, 1], [2, 3]])
    out = SimpleNamespace(labeling=SimpleNamespace(cells=cells))
    state = SimpleNamespace(saturated=np.array([True, True]))
    dx = np.array([1e6, 0.5, -2e6, -0.1])
    s = _damping_scale(out, state, dx, ds_max=0.2)
    assert s == pytest.approx(0.4)
    assert np.abs((s * dx)[[1, 3]]).max() == pytest.approx(0.2)


def test_damping_ignores_bubble_point_slot():
    cells = np.array([[0, 1, 2], [3, 4, 5]])
    out = SimpleNamespace(labeling=SimpleNamespace(cells=cells))
    # cell 0 undersaturated: its third unknown is p_b, pressure-like
    state = SimpleNamespace(saturated=np.array([False, True]))
    dx = np.array([0.0, 0.05, 4e6, 0.0, 0.1, 0.15])
    assert _damping_scale(out, state, dx, ds_max=0.2) == 1.0
    dx[5] = 0.5  # saturated cell's S_g moves too far
    assert _damping_scale(out, state, dx, ds_max=0.2) == pytest.approx(0.4)


def test_no_damping_when_within_cap():
    cells = np.array([[0, 1]])
    out = SimpleNamespace(labeling=SimpleNamespace(cells=cells))
    state = SimpleNamespace(saturated=np.array([True]))
    assert _damping_scale(out, state, np.array([5e6, 0.19]), 0.2) == 1.0


# --- newton_solve --------------------------------------------------------------

def test_equilibrium_converges_in_zero_iterations():
    sys = one_cell_system()
    st = sys.initial_state(2e7, 0.5)
    info = newton_solve(sys, st, dt=86400.0, precond="ilu0")
    assert info.converged
    assert info.iterations == 0
    assert info.linear_iterations == 0


def test_single_cell_depletion_matches_bisection_oracle():
    # water-filled compressible cell on a BHP producer: after one implicit
    # step the pressure solves a scalar balance we can root-find directly
    wi = 2e-12
    well = Well("P", "producer", 0.0, (Perforation(0, wi, 0.0),))
    sys = one_cell_system(cw=4e-10, cr=5e-10, wells=(well,))
    p0, ph = 2e7, 1.5e7
    st = sys.initial_state(p0, 1.0)
    dt = 43200.0
    cfg = NewtonConfig(tol=1e-12, max_iter=20)
    info = newton_solve(sys, st, dt, {"P": WellControl("bhp", ph)},
                        cfg, precond="ilu0")
    assert info.converged

    V, poro, cr, cw, pref, muw = 1000.0, 0.3, 5e-10, 4e-10, 2e7, 5e-4

    def bw(p):
        return np.exp(-cw * (p - pref))

    def g(p):
        acc = V * poro * (1 + cr * (p - pref)) * (1.0 / bw(p))
        acc0 = V * poro * (1 + cr * (p0 - pref)) * (1.0 / bw(p0))
        lam = 1.0 / (muw * bw(p))
        return (acc - acc0) / dt + wi * lam * (p - ph)

    p_star = brentq(g, ph, p0, xtol=1e-6)
    assert info.state.p[0] == pytest.approx(p_star, rel=1e-8)
    # oil content untouched: the cell holds no oil
    assert info.state.sw[0] == pytest.approx(1.0, abs=1e-12)


def test_tight_constant_forcing_gives_fast_residual_decay():
    # classical-Newton behavior: the residual drop accelerates every step
    wi = 2e-12
    well = Well("P", "producer", 0.0, (Perforation(0, wi, 0.0),))
    sys = one_cell_system(cw=4e-9, cr=5e-9, wells=(well,))
    st = sys.initial_state(3e7, 1.0)
    cfg = NewtonConfig(tol=1e-13, max_iter=30, forcing="constant", theta=1e-10)
    info = newton_solve(sys, st, 86400.0, {"P": WellControl("bhp", 1e7)},
                        cfg, precond="ilu0")
    assert info.converged
    r = info.residual_norms
    ratios = [r[i + 1] / r[i] for i in range(len(r) - 1) if r[i] > 0]
    # monotone contraction, and sharply so near the root
    assert all(q < 1.0 for q in ratios)
    assert ratios[-1] < 1e-3


def test_newton_reports_thetas_starting_at_theta_max():
    well = Well("P", "producer", 0.0, (Perforation(0, 2e-12, 0.0),))
    sys = one_cell_system(wells=(well,))
    st = sys.initial_state(2e7, 1.0)
    cfg = NewtonConfig(tol=1e-10, forcing="choice3")
    info = newton_solve(sys, st, 86400.0, {"P": WellControl("bhp", 1.2e7)},
                        cfg, precond="ilu0")
    assert info.converged
    assert info.thetas[0] == cfg.theta_max


def test_saturation_update_capped_per_iteration():
    # strong injector drive would move S_w far beyond 0.2 in one undamped step
    well = Well("I", "injector", 0.0, (Perforation(0, 5e-11, 0.0),))
    sys = one_cell_system(cw=4e-10, cr=0.0, wells=(well,))
    st = sys.initial_state(2e7, 0.2)
    cfg = NewtonConfig(tol=1e-10, max_iter=1)
    info = newton_solve(sys, st, 5 * 86400.0,
                        {"I": WellControl("bhp", 6e7)}, cfg, precond="ilu0")
    # one update only (converged or not): the move must respect the cap
    assert abs(info.state.sw[0] - 0.2) <= 0.2 + 1e-12


def test_newton_failure_reported_not_raised():
    well = Well("P", "producer", 0.0, (Perforation(0, 2e-12, 0.0),))
    sys = one_cell_system(wells=(well,))
    st = sys.initial_state(2e7, 1.0)
    cfg = NewtonConfig(tol=1e-14, max_iter=0)
    info = newton_solve(sys, st, 86400.0, {"P": WellControl("bhp", 1e7)},
                        cfg, precond="ilu0")
    assert not info.converged
    assert "0 iterations" in info.failure


def test_newton_rejects_bad_dt():
    sys = one_cell_system()
    st = sys.initial_state(2e7, 0.5)
    with pytest.raises(InputError):
        newton_solve(sys, st, 0.0)


# --- timestep control ------------------------------------------------------------

def make_sim(sys, controls, state, **kw):
    sched = Schedule([ScheduleEntry(0.0, controls)])
    return Simulation(sys, sched, state, **kw)


def test_timestep_config_validation():
    TimestepConfig()
    with pytest.raises(InputError):
        TimestepConfig(dt_min=10.0, dt_init=1.0)
    with pytest.raises(InputError):
        TimestepConfig(grow=0.5)
    with pytest.raises(InputError):
        TimestepConfig(cut=1.5)


def test_dt_grows_to_cap_at_equilibrium():
    sys = one_cell_system()
    st = sys.initial_state(2e7, 0.5)
    ts = TimestepConfig(dt_init=86400.0, dt_min=864.0, dt_max=4 * 86400.0)
    sim = make_sim(sys, {}, st, timestep=ts, precond="ilu0")
    reports = advance_timestep(sim, 20 * 86400.0)
    assert sim.dt == ts.dt_max
    assert reports[-1].time == pytest.approx(20 * 86400.0, abs=1e-3)
    dts = [r.dt for r in reports]
    assert dts[1] == pytest.approx(dts[0] * 1.5)


def test_advance_lands_exactly_on_schedule_event():
    well = Well("P", "producer", 0.0, (Perforation(0, 2e-12, 0.0),))
    sys = one_cell_system(wells=(well,))
    st = sys.initial_state(2e7, 1.0)
    sched = Schedule([
        ScheduleEntry(0.0, {"P": WellControl("bhp", 1.8e7)}),
        ScheduleEntry(100 * 86400.0, {"P": WellControl("bhp", 1.5e7)}),
    ])
    ts = TimestepConfig(dt_init=7 * 86400.0, dt_min=864.0,
                        dt_max=30 * 86400.0)
    sim = Simulation(sys, sched, st, timestep=ts, precond="ilu0",
                     newton=NewtonConfig(tol=1e-9))
    reports = advance_timestep(sim, 130 * 86400.0)
    times = [r.time for r in reports]
    assert 100 * 86400.0 in times          # exact landing, no epsilon step
    assert times[-1] == pytest.approx(130 * 86400.0, abs=1e-3)
    assert all(b > a for a, b in zip(times, times[1:]))


def test_advance_noop_when_already_at_target():
    sys = one_cell_system()
    st = sys.initial_state(2e7, 0.5)
    sim = make_sim(sys, {}, st, precond="ilu0")
    advance_timestep(sim, 86400.0)
    again = advance_timestep(sim, 86400.0)
    assert again == []


def test_nonconvergence_raises_with_reports_attached():
    well = Well("P", "producer", 0.0, (Perforation(0, 2e-12, 0.0),))
    sys = one_cell_system(wells=(well,))
    st = sys.initial_state(2e7, 1.0)
    sched = Schedule([ScheduleEntry(0.0, {"P": WellControl("bhp", 1e7)})])
    sim = Simulation(sys, sched, st, precond="ilu0",
                     newton=NewtonConfig(tol=1e-14, max_iter=0),
                     timestep=TimestepConfig(dt_init=86400.0, dt_min=8640.0))
    with pytest.raises(NonconvergenceError) as exc:
        advance_timestep(sim, 10 * 86400.0)
    assert isinstance(exc.value.reports, list)
    assert exc.value.reports == []


def test_dt_cut_then_recovery():
    # max_iter too small for the initial shock at dt_init, fine at dt_min
    well = Well("P", "producer", 0.0, (Perforation(0, 1e-11, 0.0),))
    sys = one_cell_system(cw=4e-9, cr=5e-9, wells=(well,))
    st = sys.initial_state(3e7, 1.0)
    sched = Schedule([ScheduleEntry(0.0, {"P": WellControl("bhp", 1e7)})])
    sim = Simulation(sys, sched, st, precond="ilu0",
                     newton=NewtonConfig(tol=1e-8, max_iter=3),
                     timestep=TimestepConfig(dt_init=40 * 86400.0,
                                             dt_min=0.01 * 86400.0,
                                             dt_max=40 * 86400.0))
    reports = advance_timestep(sim, 40 * 86400.0)
    assert reports[0].dt < 40 * 86400.0    # the first proposal was cut
    assert reports[-1].time == pytest.approx(40 * 86400.0, abs=1e-3)


def test_constraint_switch_recorded_in_events():
    # rate target far beyond deliverability: solved BHP dives through the
    # floor, the well flips to BHP control within the step
    well = Well("P", "producer", 0.0, (Perforation(0, 2e-12, 0.0),))
    sys = one_cell_system(wells=(well,))
    st = sys.initial_state(2e7, 1.0)
    # 2e-5 m3/s needs ~5 MPa drawdown on top of the depletion this cell
    # suffers in a day; the solved BHP lands well under the floor
    ctrl = {"P": WellControl("rate", 2e-5, kind="wrat", bhp_limit=1.5e7)}
    sched = Schedule([ScheduleEntry(0.0, ctrl)])
    sim = Simulation(sys, sched, st, precond="ilu0",
                     newton=NewtonConfig(tol=1e-9),
                     timestep=TimestepConfig(dt_init=86400.0, dt_min=864.0))
    reports = advance_timestep(sim, 86400.0)
    ev = [e for r in reports for e in r.events]
    assert ("P", "rate->bhp", 1.5e7) in ev
    assert reports[-1].wells["P"]["mode"] == "bhp"
    assert reports[-1].wells["P"]["bhp"] == pytest.approx(1.5e7)


def test_mass_balance_closes_after_converged_step():
    well = Well("P", "producer", 0.0, (Perforation(0, 2e-12, 0.0),))
    sys = one_cell_system(cw=4e-10, cr=5e-10, wells=(well,))
    st = sys.initial_state(2e7, 1.0)
    sched = Schedule([ScheduleEntry(0.0, {"P": WellControl("bhp", 1.6e7)})])
    sim = Simulation(sys, sched, st, precond="ilu0",
                     newton=NewtonConfig(tol=1e-11, abs_floor=1e-10))
    reports = advance_timestep(sim, 86400.0)
    for r in reports:
        for comp, err in r.mass_balance.items():
            assert err <= 1e-8, comp


def test_linear_iteration_bookkeeping():
    sys = one_cell_system()
    st = sys.initial_state(2e7, 0.5)
    sim = make_sim(sys, {}, st, precond="ilu0")
    reports = advance_timestep(sim, 2 * 86400.0)
    # equilibrium: all zero, and the counters agree with the newton reports
    assert all(r.newton_iterations == 0 for r in reports)
    assert all(r.linear_iterations == 0 for r in reports)


def test_step_reports_accumulate_on_sim():
    sys = one_cell_system()
    st = sys.initial_state(2e7, 0.5)
    sim = make_sim(sys, {}, st, precond="ilu0")
    r1 = advance_timestep(sim, 86400.0)
    r2 = advance_timestep(sim, 2 * 86400.0)
    assert sim.reports == r1 + r2
    assert [r.index for r in sim.reports] == list(range(len(sim.reports)))
    assert isinstance(sim.reports[0], StepReport)
    assert sim.time_days() == pytest.approx(2.0)
