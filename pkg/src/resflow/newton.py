"""Inexact Newton outer loop, adaptive timestepping, and step orchestration.

One Newton iteration assembles residual and Jacobian, applies the pressure
decoupling, solves the decoupled system to the forcing tolerance theta_l,
damps the update so no saturation moves more than ds_max, applies it, and
runs the variable switch. Convergence is judged on the physical residual
norm against eps * ||b0|| with an absolute floor tied to the old
accumulation rate scale; forcing-term norms live in the decoupled space the
linear solver actually sees.

The timestep driver grows dt by 1.5x after easy steps, holds it after
moderate ones, halves it and repeats on nonconvergence, and always lands
exactly on schedule events and the requested end time. Constraint switching
(rate-to-BHP and back) re-solves the step from the old state with the
switched controls, at most twice per well per step.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from types import SimpleNamespace

from .errors import (DivergenceError, FactorizationError, InputError,
                     NonconvergenceError, OutOfRangeError)
from .linalg import SolverConfig, norm2, solve
from .model import assemble, fluid_in_place, switch_variables
from .precond import make_preconditioner, quasi_impes_decouple
from .wells import apply_limit_switches

log = logging.getLogger(__name__)

FORCING_MODES = ("constant", "choice1", "choice2", "choice3")


@dataclass
class NewtonConfig:
    """Stopping and globalization settings for one nonlinear solve."""

    tol: float = 1e-3            # relative residual target
    max_iter: int = 15
    forcing: str = "choice3"     # constant | choice1 | choice2 | choice3
    theta: float = 1e-2          # linear tolerance in constant mode
    gamma: float = 0.9
    beta: float = 2.0
    theta_min: float = 1e-4
    theta_max: float = 0.9
    ds_max: float = 0.2          # max saturation change per iteration
    abs_floor: float = 1e-6      # absolute floor multiplier on the rate scale

    def __post_init__(self):
        if self.forcing not in FORCING_MODES:
            raise InputError(f"unknown forcing mode {self.forcing!r}")
        if self.tol <= 0:
            raise InputError("newton tolerance must be > 0")
        if not (0 < self.theta_min <= self.theta_max < 1):
            raise InputError("need 0 < theta_min <= theta_max < 1")
        if not (0 < self.gamma <= 1):
            raise InputError("gamma must lie in (0, 1]")
        if not (1 < self.beta <= 2):
            raise InputError("beta must lie in (1, 2]")
        if self.max_iter < 0 or self.ds_max <= 0 or self.theta <= 0:
            raise InputError("newton config values out of range")


def forcing_term(mode, norm_b, norm_b_prev, norm_r_prev, gamma=0.9, beta=2.0,
                 theta_min=1e-4, theta_max=0.9, theta_const=1e-2):
    """Linear tolerance theta_l for the next inner solve.

    norm_r_prev is the previous solve's linear residual: for choice1 the
    caller passes ||b_l - r_{l-1}|| formed from the stored residual vector,
    for choice2 the plain norm ||r_{l-1}||. First adaptive iteration (no
    history, signalled by norm_b_prev = None) uses theta_max. The constant
    mode returns its theta capped at theta_max but is exempt from the lower
    clamp so a near-machine tolerance reproduces classical Newton.
    """
    if mode == "constant":
        return min(theta_const, theta_max)
    if norm_b_prev is None:
        return theta_max
    if norm_b_prev == 0.0:
        raise InputError("forcing_term called after convergence")
    if mode == "choice1":
        raw = norm_r_prev / norm_b_prev
    elif mode == "choice2":
        raw = abs(norm_b - norm_r_prev) / norm_b_prev
    elif mode == "choice3":
        raw = gamma * (norm_b / norm_b_prev) ** beta
    else:
        raise InputError(f"unknown forcing mode {mode!r}")
    return float(np.clip(raw, theta_min, theta_max))


def _seed_well_bhp(system, state, controls):
    """Give rate-controlled wells a p_h start if they do not have one yet."""
    for well in system.wells:
        c = controls.get(well.name)
        if c is None or c.mode != "rate" or well.name in state.well_bhp:
            continue
        p0 = float(state.p[system.well_cells[well.name][0]])
        nudge = 0.05 * max(abs(p0), 1e5)
        state.well_bhp[well.name] = p0 - nudge if well.kind == "producer" \
            else p0 + nudge


def _damping_scale(out, state, dx, ds_max):
    """Global scale keeping every |dS_w|, |dS_g| below ds_max.

    Undersaturated cells carry p_b in the third slot, which is
    pressure-like and exempt.
    """
    cells = out.labeling.cells
    ds = np.abs(dx[cells[:, 1]])
    if cells.shape[1] > 2:
        sat = state.saturated
        ds = np.concatenate([ds, np.abs(dx[cells[sat, 2]])])
    peak = ds.max() if ds.size else 0.0
    if peak <= ds_max:
        return 1.0
    return ds_max / peak


def newton_solve(system, state, dt, controls=None, config=None, solver=None,
                 precond="cpr-fpf", overlap=1, amg_config=None):
    """Solve one implicit step; returns an info namespace, state untouched.

    info.state is the new state (valid only if info.converged), with
    info.iterations, info.linear_iterations, info.residual_norms,
    info.thetas, info.wells (surface-rate report at the final state), and
    info.failure (short reason when not converged).
    """
    if dt <= 0:
        raise InputError("dt must be positive")
    config = config or NewtonConfig()
    solver = solver or SolverConfig()
    controls = controls or {}

    trial = state.copy()
    _seed_well_bhp(system, trial, controls)

    norms = []
    thetas = []
    lin_total = 0
    bt_norm_prev = None
    r_prev = None          # final linear residual vector, decoupled space
    floor = None
    b0 = None
    wells_report = {}
    failure = None
    converged = False
    iters = 0
    timings = {"assembly": 0.0, "precond": 0.0, "solve": 0.0}

    for it in range(config.max_iter + 1):
        tic = time.perf_counter()
        try:
            out = assemble(system, state, trial, dt, controls, jacobian=True)
        except OutOfRangeError as exc:
            if it == 0:
                raise
            failure = f"state left property range: {exc}"
            break
        finally:
            timings["assembly"] += time.perf_counter() - tic
        bnorm = norm2(out.layout, out.residual)
        norms.append(bnorm)
        wells_report = out.wells
        if b0 is None:
            b0 = bnorm
            floor = config.abs_floor * out.acc_scale
        if bnorm <= max(config.tol * b0, floor):
            converged = True
            break
        if it == config.max_iter:
            failure = f"no convergence in {config.max_iter} iterations"
            break
        iters = it + 1

        try:
            tic = time.perf_counter()
            At, bt = quasi_impes_decouple(out.matrix, -out.residual,
                                          out.labeling)
            bt_norm = norm2(out.layout, bt)
            if config.forcing in ("choice1", "choice2"):
                # these need the previous linear residual vector; a damped
                # step invalidates it, which falls back to theta_max
                prev = bt_norm_prev if r_prev is not None else None
                hist = None
                if r_prev is not None:
                    hist = norm2(out.layout, bt - r_prev) \
                        if config.forcing == "choice1" \
                        else norm2(out.layout, r_prev)
            else:
                prev, hist = bt_norm_prev, None
            theta = forcing_term(config.forcing, bt_norm, prev, hist,
                                 config.gamma, config.beta, config.theta_min,
                                 config.theta_max, config.theta)
            thetas.append(theta)
            M = make_preconditioner(precond, At, out.labeling,
                                    overlap=overlap, amg_config=amg_config)
            timings["precond"] += time.perf_counter() - tic
            tic = time.perf_counter()
            res = solve(At, bt, SolverConfig(
                method=solver.method, tol=theta, maxit=solver.maxit,
                restart=solver.restart, korth=solver.korth), M)
            timings["solve"] += time.perf_counter() - tic
        except (FactorizationError, DivergenceError) as exc:
            failure = f"linear solve failed: {exc}"
            break
        lin_total += res.iterations
        dx = res.x
        r_prev = res.residual if res.residual is not None \
            else bt - At.matvec(dx)
        bt_norm_prev = bt_norm

        s = _damping_scale(out, trial, dx, config.ds_max)
        if s < 1.0:
            dx = s * dx
            r_prev = None  # damped step invalidates the linear residual
        base = out.unknown_base
        trial.p += dx[base]
        trial.sw += dx[base + 1]
        if trial.x3 is not None:
            trial.x3 += dx[base + 2]
        for name, row in out.well_row.items():
            trial.well_bhp[name] += dx[row]
        switch_variables(system, trial)
        log.debug("newton it=%d |b|=%.3e theta=%.2e lin=%d damp=%.3f",
                  it, bnorm, theta, res.iterations, s)

    info = SimpleNamespace(state=trial, converged=converged, iterations=iters,
                           linear_iterations=lin_total, residual_norms=norms,
                           thetas=thetas, wells=wells_report, failure=failure,
                           timings=timings)
    if not converged and failure is None:
        info.failure = "not converged"
    return info


# ---------------------------------------------------------------------------
# timestep control
# ---------------------------------------------------------------------------

@dataclass
class TimestepConfig:
    dt_init: float = 86400.0
    dt_min: float = 1.0
    dt_max: float = 30 * 86400.0
    grow: float = 1.5
    cut: float = 0.5
    grow_iters: int = 5      # grow when converged in <= this many iterations
    hold_iters: int = 10     # hold when converged in <= this many

    def __post_init__(self):
        if not (0 < self.dt_min <= self.dt_init <= self.dt_max):
            raise InputError("need dt_min <= dt_init <= dt_max")
        if self.grow < 1.0 or not (0 < self.cut < 1):
            raise InputError("timestep factors out of range")


@dataclass
class StepReport:
    index: int
    time: float                      # s, end of step
    dt: float
    newton_iterations: int
    linear_iterations: int
    wells: dict
    mass_balance: dict               # component -> relative closure error
    events: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    fluid_in_place: dict = field(default_factory=dict)   # m^3 surface
    avg_pressure: float = 0.0        # pore-volume weighted, Pa


class Simulation:
    """Everything one run needs: discretized model, schedule, and configs."""

    def __init__(self, system, schedule, state, newton=None, timestep=None,
                 solver=None, precond="cpr-fpf", overlap=1, amg_config=None):
        self.system = system
        self.schedule = schedule
        self.state = state
        self.newton = newton or NewtonConfig()
        self.timestep = timestep or TimestepConfig()
        self.solver = solver or SolverConfig()
        self.precond = precond
        self.overlap = overlap
        self.amg_config = amg_config
        self.dt = self.timestep.dt_init
        self.reports = []

    def time_days(self):
        return self.state.t / 86400.0


def _mass_balance(system, state_old, state_new, dt, wells_report):
    """Relative closure |d(in place) + dt * net production| per component."""
    fip_old = fluid_in_place(system, state_old)
    fip_new = fluid_in_place(system, state_new)
    out = {}
    for comp in fip_new:
        produced = sum(r.get(comp, 0.0) for r in wells_report.values())
        err = fip_new[comp] - fip_old[comp] + dt * produced
        out[comp] = abs(err) / max(abs(fip_new[comp]), dt * abs(produced), 1e-12)
    return out


def advance_timestep(sim, t_end):
    """March sim.state forward to t_end; returns the new StepReports.

    Raises NonconvergenceError (with .reports attached) if a step cannot
    converge even at dt_min.
    """
    reports = []
    tiny = 1e-6
    n_wells = len(sim.system.wells)
    while sim.state.t < t_end - tiny:
        t = sim.state.t
        stops = [e for e in sim.schedule.event_times() if e > t + tiny]
        t_stop = min(stops + [t_end])
        t_stop = min(t_stop, t_end)
        dt = min(sim.dt, sim.timestep.dt_max, t_stop - t)

        info = None
        cut_happened = False
        while True:
            base_controls = sim.schedule.active_controls(t)
            controls = dict(base_controls)
            events = []
            for _ in range(2 * n_wells + 1):
                info = newton_solve(sim.system, sim.state, dt, controls,
                                    sim.newton, sim.solver, sim.precond,
                                    sim.overlap, sim.amg_config)
                if not info.converged:
                    break
                bhp_vals = {n: r["bhp"] for n, r in info.wells.items()}
                controls2, ev = apply_limit_switches(
                    sim.system.wells, controls, bhp_vals, info.wells)
                if not ev:
                    break
                controls = controls2
                events.extend(ev)
                log.info("t=%.4g d dt=%.3g d constraint switch: %s",
                         t / 86400.0, dt / 86400.0, ev)
            if info.converged:
                break
            if dt <= sim.timestep.dt_min * (1 + 1e-12):
                err = NonconvergenceError(
                    f"step at t={t / 86400.0:.6g} days failed at dt_min: "
                    f"{info.failure}")
                err.reports = sim.reports + reports
                raise err
            dt = max(dt * sim.timestep.cut, sim.timestep.dt_min)
            cut_happened = True
            log.info("t=%.4g d nonconvergence (%s), dt cut to %.3g d",
                     t / 86400.0, info.failure, dt / 86400.0)

        new_state = info.state
        t_new = t + dt
        if abs(t_new - t_stop) <= tiny:
            t_new = t_stop
        new_state.t = t_new

        mb = _mass_balance(sim.system, sim.state, new_state, dt, info.wells)
        sim.state = new_state
        pv = sim.system.poro_ref * sim.system.volume
        report = StepReport(index=len(sim.reports) + len(reports), time=t_new,
                            dt=dt, newton_iterations=info.iterations,
                            linear_iterations=info.linear_iterations,
                            wells=info.wells, mass_balance=mb, events=events,
                            residual_norms=info.residual_norms,
                            timings=info.timings,
                            fluid_in_place=fluid_in_place(sim.system,
                                                          new_state),
                            avg_pressure=float(np.sum(pv * new_state.p)
                                               / np.sum(pv)))
        reports.append(report)
        log.info("step %d t=%.6g d dt=%.4g d newton=%d linear=%d",
                 report.index, t_new / 86400.0, dt / 86400.0,
                 info.iterations, info.linear_iterations)

        # grow the proposal, not the event-clipped dt; after a cut the
        # proposal restarts from what actually converged
        if cut_happened:
            sim.dt = dt
        if info.iterations <= sim.timestep.grow_iters:
            sim.dt = min(sim.dt * sim.timestep.grow, sim.timestep.dt_max)
    sim.reports.extend(reports)
    return reports
