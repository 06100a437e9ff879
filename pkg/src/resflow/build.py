"""Turn a parsed SimDeck into a runnable Simulation.

All field-to-SI unit conversion happens here, against the constants in
units.py. Deck arrays arrive in natural cell order (i fastest); tensor-grid
spacings given per cell are collapsed to per-row values and must not vary
off-axis.
"""

import numpy as np

from . import units as U
from .errors import DeckError, InputError
from .grid import Grid, partition_grid
from .linalg import SolverConfig
from .model import Discretization, DualPorosityConfig, RockModel
from .newton import NewtonConfig, Simulation, TimestepConfig
from .props import FluidSystem, PvtTable, RelPermTable
from .wells import (Perforation, Schedule, ScheduleEntry, Well, WellControl,
                    peaceman_index)


def _axis_spacing(vals, axis, dims, kw):
    """Collapse a 1-, n_axis-, or N_g-length list to per-row spacings (m)."""
    nx, ny, nz = dims
    n_axis = dims[axis]
    arr = np.asarray(vals, dtype=float) * U.FT
    if arr.size == 1:
        return float(arr[0])
    if arr.size == n_axis:
        return arr
    cube = arr.reshape(nz, ny, nx)  # [k, j, i]
    take = (cube[0, 0, :], cube[0, :, 0], cube[:, 0, 0])[axis]
    shape = ((1, 1, nx), (1, ny, 1), (nz, 1, 1))[axis]
    full = np.broadcast_to(take.reshape(shape), cube.shape)
    if not np.array_equal(cube, full):
        raise DeckError(f"{kw} varies off its axis; the grid is tensor-product")
    return take


def _cellwise(vals, ng, scale=1.0):
    arr = np.asarray(vals, dtype=float) * scale
    if arr.size == 1:
        return np.full(ng, float(arr[0]))
    return arr


def build_grid(deck):
    nx, ny, nz = deck.dimens
    dims = deck.dimens
    dx = _axis_spacing(deck.dx, 0, dims, "DX")
    dy = _axis_spacing(deck.dy, 1, dims, "DY")
    dz = _axis_spacing(deck.dz, 2, dims, "DZ")
    tops = 0.0
    if deck.tops is not None:
        tops = np.asarray(deck.tops, dtype=float) * U.FT
        if tops.size == 1:
            tops = float(tops[0])
    return Grid(nx, ny, nz, dx, dy, dz, tops)


def build_rock(deck):
    ng = deck.num_cells
    poro = _cellwise(deck.poro, ng)
    perm = np.column_stack([_cellwise(deck.permx, ng, U.MILLIDARCY),
                            _cellwise(deck.permy, ng, U.MILLIDARCY),
                            _cellwise(deck.permz, ng, U.MILLIDARCY)])
    cr, p_ref = 0.0, 0.0
    if deck.rockc is not None:
        cr = deck.rockc[0] / U.PSI
        p_ref = deck.rockc[1] * U.PSI
    return RockModel(porosity=poro, perm=perm, cr=cr, p_ref=p_ref)


def build_fluid(deck):
    swof = np.asarray(deck.swof, dtype=float)
    rel_kw = dict(sw=swof[:, 0], krw=swof[:, 1], krow=swof[:, 2],
                  pcow=swof[:, 3] * U.PSI)
    if deck.mode == "black-oil":
        if deck.sgof is None:
            raise DeckError("black-oil deck needs SGOF")
        sgof = np.asarray(deck.sgof, dtype=float)
        rel_kw.update(sg=sgof[:, 0], krg=sgof[:, 1], krog=sgof[:, 2],
                      pcog=sgof[:, 3] * U.PSI)
    relperm = RelPermTable(**rel_kw)

    pvto = np.asarray(deck.pvto, dtype=float)
    pvt_kw = dict(
        po=pvto[:, 0] * U.PSI,
        bo=pvto[:, 1],
        muo=pvto[:, 2] * U.CENTIPOISE,
        rs=pvto[:, 3] * U.SCF_PER_STB,
        bw_ref=deck.pvtw[1],
        cw=deck.pvtw[2] / U.PSI,
        pw_ref=deck.pvtw[0] * U.PSI,
        muw=deck.pvtw[3] * U.CENTIPOISE,
        rho_o_std=deck.density[0] * U.LB_PER_FT3,
        rho_w_std=deck.density[1] * U.LB_PER_FT3,
        rho_g_std=deck.density[2] * U.LB_PER_FT3,
    )
    if deck.undersat is not None:
        pvt_kw.update(dbo_dp_usat=deck.undersat[0] / U.PSI,
                      dmuo_dp_usat=deck.undersat[1] * U.CENTIPOISE / U.PSI)
    if deck.pvdg is not None:
        pvdg = np.asarray(deck.pvdg, dtype=float)
        pvt_kw.update(pg=pvdg[:, 0] * U.PSI,
                      bg=pvdg[:, 1] * U.RB_PER_MSCF,
                      mug=pvdg[:, 2] * U.CENTIPOISE)
    pvt = PvtTable(**pvt_kw)
    return FluidSystem(mode=deck.mode, relperm=relperm, pvt=pvt)


def build_dual(deck, grid):
    if not deck.dualporo:
        return None
    ng = grid.num_cells
    perm_f = _cellwise(deck.permf, ng, U.MILLIDARCY)
    kw = dict(porosity_f=_cellwise(deck.porof, ng),
              perm_f=np.column_stack([perm_f, perm_f, perm_f]),
              dual_perm=deck.dualperm)
    if deck.sigma is not None:
        kw["sigma"] = deck.sigma / (U.FT * U.FT)
    else:
        lx, ly, lz = deck.blockdims
        kw.update(lx=lx * U.FT, ly=ly * U.FT, lz=lz * U.FT)
    return DualPorosityConfig(**kw)


def build_wells(deck, grid, rock, dual):
    nx, ny, nz = deck.dimens
    # a well perforates the fracture continuum in a dual-porosity run
    kx = dual.perm_f[:, 0] if dual is not None else rock.perm[:, 0]
    ky = dual.perm_f[:, 1] if dual is not None else rock.perm[:, 1]
    perfs = {name: [] for name, *_ in deck.welspecs}
    for name, i, j, k1, k2, rw, skin in deck.compdat:
        for k in range(k1, k2 + 1):
            gid = grid.gid(i - 1, j - 1, k - 1)
            wi = peaceman_index(kx[gid], ky[gid],
                                grid.dx[i - 1], grid.dy[j - 1],
                                grid.dz[k - 1], rw * U.FT, skin)
            perfs[name].append(Perforation(cell=gid, wi=float(wi),
                                           depth=float(grid.depth[gid])))
    wells = []
    for name, kind, depth, phase in deck.welspecs:
        if not perfs[name]:
            raise DeckError(f"well {name!r} has no COMPDAT perforations")
        wells.append(Well(
            name=name,
            kind="producer" if kind == "PROD" else "injector",
            ref_depth=depth * U.FT,
            perforations=tuple(perfs[name]),
            inj_phase=(phase or "WATER").lower()))
    return wells


def _control_from_record(rec, well):
    kw, name, mode, value = rec[0], rec[1], rec[2], rec[3]
    rest = rec[4:]
    if kw == "WCONPROD":
        if mode == "BHP":
            kind = rate_limit = None
            if rest:
                kind, lim = rest[0].lower(), rest[1]
                rate_limit = lim * U.STB_PER_DAY
            return WellControl(mode="bhp", value=value * U.PSI,
                               rate_limit=rate_limit, rate_limit_kind=kind)
        bhp = rest[0] * U.PSI if rest else None
        return WellControl(mode="rate", value=value * U.STB_PER_DAY,
                           kind=mode.lower(), bhp_limit=bhp)
    # WCONINJE: the rate unit depends on the injected phase
    scale = U.MSCF_PER_DAY if well.inj_phase == "gas" else U.STB_PER_DAY
    if mode == "BHP":
        rate_limit = rest[0] * scale if rest else None
        return WellControl(mode="bhp", value=value * U.PSI,
                           rate_limit=rate_limit,
                           rate_limit_kind="rate" if rest else None)
    bhp = rest[0] * U.PSI if rest else None
    return WellControl(mode="rate", value=value * scale, kind="rate",
                       bhp_limit=bhp)


def build_schedule(deck, wells):
    by_name = {w.name: w for w in wells}
    entries = []
    for t_days, recs in deck.schedule:
        controls = {}
        for rec in recs:
            well = by_name.get(rec[1])
            if well is None:
                raise DeckError(f"{rec[0]} references unknown well {rec[1]!r}")
            if rec[0] == "WCONPROD" and well.kind != "producer":
                raise DeckError(f"WCONPROD on injector {rec[1]!r}")
            if rec[0] == "WCONINJE" and well.kind != "injector":
                raise DeckError(f"WCONINJE on producer {rec[1]!r}")
            controls[rec[1]] = _control_from_record(rec, well)
        entries.append(ScheduleEntry(time=t_days * U.DAY, controls=controls))
    if not entries:
        entries.append(ScheduleEntry(time=0.0, controls={}))
    return Schedule(entries)


def _solver_config(deck):
    if deck.solver is None:
        return SolverConfig()
    toks = list(deck.solver)
    kw = {"method": toks[0].lower()}
    if len(toks) > 1:
        kw["restart"] = int(float(toks[1]))
    if len(toks) > 2:
        kw["maxit"] = int(float(toks[2]))
    if len(toks) > 3:
        kw["korth"] = int(float(toks[3]))
    return SolverConfig(**kw)


def _newton_config(deck):
    if deck.newton is None:
        return NewtonConfig()
    toks = list(deck.newton)
    kw = {"tol": float(toks[0])}
    if len(toks) > 1:
        kw["max_iter"] = int(float(toks[1]))
    if len(toks) > 2:
        kw["forcing"] = toks[2].lower()
    if len(toks) > 3:
        kw["theta"] = float(toks[3])
    if len(toks) > 4:
        kw["gamma"] = float(toks[4])
    if len(toks) > 5:
        kw["beta"] = float(toks[5])
    if len(toks) > 6:
        kw["abs_floor"] = float(toks[6])
    return NewtonConfig(**kw)


def _precond_choice(deck):
    if deck.precond is None:
        return "cpr-fpf", 1
    toks = list(deck.precond)
    kind = toks[0].lower()
    overlap = int(float(toks[1])) if len(toks) > 1 else 1
    return kind, overlap


def _timestep_config(deck):
    if deck.dtconf is not None:
        init, lo, hi = (v * U.DAY for v in deck.dtconf)
        return TimestepConfig(dt_init=init, dt_min=lo, dt_max=hi)
    spans = deck.tstep or [deck.endtime]
    first = min(spans) * U.DAY
    return TimestepConfig(dt_init=min(first, U.DAY),
                          dt_min=min(1.0, first), dt_max=30 * U.DAY)


def build_simulation(deck, num_workers=None):
    """Deck -> Simulation, ready for advance_timestep."""
    grid = build_grid(deck)
    rock = build_rock(deck)
    fluid = build_fluid(deck)
    dual = build_dual(deck, grid)
    wells = build_wells(deck, grid, rock, dual)
    workers = num_workers or deck.workers or 1
    partition = partition_grid(grid, workers)
    system = Discretization(grid, rock, fluid, wells, dual=dual,
                            partition=partition)

    state = system.initial_state(
        p=_cellwise(deck.pressure, grid.num_cells, U.PSI),
        sw=_cellwise(deck.swat, grid.num_cells),
        sg=None if deck.sgas is None else _cellwise(deck.sgas, grid.num_cells),
        pb=None if deck.pbub is None else _cellwise(deck.pbub, grid.num_cells,
                                                    U.PSI))
    schedule = build_schedule(deck, wells)
    precond, overlap = _precond_choice(deck)
    sim = Simulation(system, schedule, state,
                     newton=_newton_config(deck),
                     timestep=_timestep_config(deck),
                     solver=_solver_config(deck),
                     precond=precond, overlap=overlap)
    return sim


def report_times(deck):
    """End-of-report-period times in seconds, from TSTEP or ENDTIME."""
    if deck.tstep is not None:
        return list(np.cumsum(np.asarray(deck.tstep, dtype=float)) * U.DAY)
    return [deck.endtime * U.DAY]
