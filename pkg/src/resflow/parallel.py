"""Process-parallel execution of the per-worker kernels.

Simulation code in this package runs the worker decomposition serially (one
process walks the worker blocks in rank order), which keeps every numerical
path deterministic and testable. This module executes the same per-worker
kernels on real processes for the strong-scaling benchmark: fork-inherited
copy-on-write state, RawArray shared vectors, and barrier-synchronized BSP
supersteps.

The benchmark workload is one per-subdomain residual assembly plus a fixed
number of block SpMVs. Both the 1-process and the N-process run execute the
same N subdomain tasks (the single process walks them sequentially), so the
speedup isolates parallel execution of identical work.
"""

import multiprocessing as mp
import time
from types import SimpleNamespace

import numpy as np

from .errors import InputError
from .grid import Grid
from .model import (Discretization, ReservoirState, RockModel, _eval_cells,
                    assemble)
from .props import FluidSystem, PvtTable, RelPermTable
from .units import GRAVITY
from .wells import Perforation, Well, WellControl


# ---------------------------------------------------------------------------
# per-worker residual kernel over owned + ghost cells only
# ---------------------------------------------------------------------------

def worker_plans(system):
    """Index plans, one per worker: owned range, halo cells, connections.

    cells maps local sub-cell index -> flow cell; owned cells come first in
    flow order so the owned residual block is contiguous.
    """
    plans = []
    a, b = system.conn_a, system.conn_b
    owner = system.flow_owner
    for r in range(system.num_workers):
        lo, hi = int(system.flow_starts[r]), int(system.flow_starts[r + 1])
        sel = (owner[a] == r) | (owner[b] == r)
        ca, cb = a[sel], b[sel]
        ghosts = np.setdiff1d(np.unique(np.concatenate([ca, cb])),
                              np.arange(lo, hi))
        cells = np.concatenate([np.arange(lo, hi), ghosts])
        pos = {int(g): i for i, g in enumerate(cells)}
        loc_a = np.array([pos[int(g)] for g in ca], dtype=np.int64)
        loc_b = np.array([pos[int(g)] for g in cb], dtype=np.int64)
        wells = []
        for w in system.wells:
            f = system.well_cells[w.name]
            own = owner[f] == r
            if np.any(own):
                wells.append(SimpleNamespace(
                    well=w,
                    loc=np.array([pos[int(g)] for g in f[own]], np.int64),
                    wi=system.well_wi[w.name][own],
                    zp=system.well_depths[w.name][own]))
        plans.append(SimpleNamespace(
            rank=r, lo=lo, hi=hi, n_owned=hi - lo, cells=cells,
            loc_a=loc_a, loc_b=loc_b, T=system.conn_t[sel],
            own_a=(owner[ca] == r), own_b=(owner[cb] == r), wells=wells))
    return plans


def _subsystem(system, cells):
    return SimpleNamespace(poro_ref=system.poro_ref[cells],
                           depth=system.depth[cells],
                           volume=system.volume[cells],
                           rock=system.rock, fluid=system.fluid)


def _substate(state, cells):
    return ReservoirState(
        state.p[cells], state.sw[cells],
        None if state.x3 is None else state.x3[cells],
        state.saturated[cells], state.t, state.well_bhp)


def local_residual(system, plan, state_old, state_new, dt, controls=None):
    """One worker's owned residual rows (accumulation + flux + BHP wells).

    Only evaluates properties on owned plus halo cells. Rate-controlled
    wells are outside this kernel's scope (the benchmark runs BHP wells).
    """
    controls = controls or {}
    sub = _subsystem(system, plan.cells)
    ev = _eval_cells(sub, _substate(state_new, plan.cells))
    ev_old = _eval_cells(sub, _substate(state_old, plan.cells))
    black = ev.black
    nvar = 3 if black else 2
    n = plan.n_owned
    resid = np.zeros(n * nvar)
    base_loc = np.arange(n) * nvar

    V, phi = sub.volume, ev.phi
    acc = {"water": V * phi * ev.sw / ev.w.bw,
           "oil": V * phi * ev.so / ev.o.bo}
    phi_o, Vo = ev_old.phi, sub.volume
    acc_old = {"water": Vo * phi_o * ev_old.sw / ev_old.w.bw,
               "oil": Vo * phi_o * ev_old.so / ev_old.o.bo}
    if black:
        acc["gas"] = V * phi * (ev.sg / ev.g.bg + ev.o.rs * ev.so / ev.o.bo)
        acc_old["gas"] = Vo * phi_o * (ev_old.sg / ev_old.g.bg
                                       + ev_old.o.rs * ev_old.so / ev_old.o.bo)
    comps = ["water", "oil"] + (["gas"] if black else [])
    for c, name in enumerate(comps):
        resid[base_loc + c] += (acc[name][:n] - acc_old[name][:n]) / dt

    la, lb, T = plan.loc_a, plan.loc_b, plan.T

    def flux(pot, lam, crow):
        dpot = pot[lb] - pot[la]
        up = np.where(dpot > 0.0, lb, la)
        f = T * lam[up] * dpot
        np.subtract.at(resid, la[plan.own_a] * nvar + crow, f[plan.own_a])
        np.add.at(resid, lb[plan.own_b] * nvar + crow, f[plan.own_b])

    flux(ev.pot_w, ev.lam_w, 0)
    flux(ev.pot_o, ev.lam_o, 1)
    if black:
        flux(ev.pot_g, ev.lam_g, 2)
        flux(ev.pot_o, ev.rslam_o, 2)

    for wp in plan.wells:
        c = controls.get(wp.well.name)
        if c is None:
            continue
        if c.mode != "bhp":
            raise InputError("local_residual only handles BHP-controlled wells")
        f = wp.loc
        dz = wp.well.ref_depth - wp.zp
        dd_w = c.value - ev.pw[f] - ev.w.rho[f] * GRAVITY * dz
        dd_o = c.value - ev.p[f] - ev.o.rho[f] * GRAVITY * dz
        if wp.well.kind == "producer":
            q = {0: wp.wi * ev.lam_w[f] * dd_w, 1: wp.wi * ev.lam_o[f] * dd_o}
            if black:
                dd_g = c.value - ev.pg[f] - ev.g.rho[f] * GRAVITY * dz
                q[2] = (wp.wi * ev.lam_g[f] * dd_g
                        + ev.o.rs[f] * q[1])
        else:
            relmob = ev.kr.krw[f] / ev.w.muw + ev.kr.kro[f] / ev.o.muo[f]
            if black:
                relmob = relmob + ev.kr.krg[f] / ev.g.mug[f]
            if wp.well.inj_phase == "water":
                q = {0: wp.wi * relmob / ev.w.bw[f] * dd_w}
            else:
                dd_g = c.value - ev.pg[f] - ev.g.rho[f] * GRAVITY * dz
                q = {2: wp.wi * relmob / ev.g.bg[f] * dd_g}
        for crow, qs in q.items():
            np.subtract.at(resid, f * nvar + crow, qs)
    return resid


def assemble_residual_blocks(system, state_old, state_new, dt, controls=None,
                             plans=None):
    """All workers' owned residual blocks, computed block by block."""
    plans = plans or worker_plans(system)
    return [local_residual(system, p, state_old, state_new, dt, controls)
            for p in plans]


# ---------------------------------------------------------------------------
# forked SPMD execution
# ---------------------------------------------------------------------------

def _spmd_entry(target, rank, nproc, barrier, queue, args):
    try:
        result = target(rank, nproc, barrier, *args)
        queue.put((rank, result, None))
    except Exception as exc:  # surface child failures in the parent
        queue.put((rank, None, repr(exc)))


def run_spmd(nproc, target, *args):
    """Fork nproc processes running target(rank, nproc, barrier, *args).

    Returns the per-rank results in rank order. State built before the call
    is shared copy-on-write through fork.
    """
    ctx = mp.get_context("fork")
    barrier = ctx.Barrier(nproc)
    queue = ctx.SimpleQueue()
    procs = [ctx.Process(target=_spmd_entry,
                         args=(target, r, nproc, barrier, queue, args))
             for r in range(nproc)]
    for p in procs:
        p.start()
    results = {}
    for _ in procs:
        rank, result, err = queue.get()
        if err is not None:
            for p in procs:
                p.terminate()
            raise RuntimeError(f"worker {rank} failed: {err}")
        results[rank] = result
    for p in procs:
        p.join()
    return [results[r] for r in range(nproc)]


def _bench_task(rank, nproc, barrier, payload, shared_x, shared_y, n_spmv):
    """One benchmark worker: my subdomain residuals, then BSP SpMV steps."""
    system, plans, state_old, state_new, dt, controls, blocks = payload
    mine = range(len(plans)) if nproc == 1 else [rank]
    X = np.frombuffer(shared_x)
    Y = np.frombuffer(shared_y)

    barrier.wait()
    t0 = time.perf_counter()
    for i in mine:
        local_residual(system, plans[i], state_old, state_new, dt, controls)
    for _ in range(n_spmv):
        for i in mine:
            blk, lo, hi = blocks[i]
            Y[lo:hi] = blk.csr @ X[blk.gcols] if blk.gcols.size else 0.0
        barrier.wait()
        X, Y = Y, X
    elapsed = time.perf_counter() - t0
    barrier.wait()
    return elapsed


def make_benchmark_case(nx=512, ny=400):
    """Two-phase waterflood case of nx*ny cells with two BHP wells."""
    grid = Grid(nx, ny, 1, 10.0, 10.0, 10.0)
    ng = grid.num_cells
    rock = RockModel(porosity=np.full(ng, 0.2),
                     perm=np.full((ng, 3), 1e-13), cr=1e-10, p_ref=2e7)
    sw = np.array([0.2, 0.4, 0.6, 0.8])
    # the squared Corey form lands 4 ulp above 1.0 at the right endpoint
    relperm = RelPermTable(sw=sw,
                           krw=np.clip(((sw - 0.2) / 0.6) ** 2, 0.0, 1.0),
                           krow=np.clip(((0.8 - sw) / 0.6) ** 2, 0.0, 1.0),
                           pcow=np.zeros(4))
    po = np.array([1e6, 1e7, 2e7, 4e7])
    pvt = PvtTable(po=po, bo=np.full(4, 1.05), muo=np.full(4, 3e-3),
                   rs=np.zeros(4), bw_ref=1.0, cw=4e-10, pw_ref=2e7,
                   muw=3e-4, rho_o_std=800.0, rho_w_std=1000.0)
    fluid = FluidSystem(mode="two-phase", relperm=relperm, pvt=pvt)
    wi = 1e-12
    wells = [
        Well("I", "injector", 5.0,
             (Perforation(grid.gid(0, 0, 0), wi, float(grid.depth[0])),)),
        Well("P", "producer", 5.0,
             (Perforation(grid.gid(nx - 1, ny - 1, 0), wi,
                          float(grid.depth[-1])),)),
    ]
    system = Discretization(grid, rock, fluid, wells, num_workers=4)
    controls = {"I": WellControl("bhp", 3e7), "P": WellControl("bhp", 1e7)}
    rng = np.random.default_rng(7)
    state_old = system.initial_state(2e7, 0.25)
    state_new = state_old.copy()
    state_new.p += rng.uniform(0.0, 1e5, ng)
    state_new.sw = np.clip(state_new.sw + rng.uniform(0, 0.05, ng), 0, 1)
    return system, state_old, state_new, controls


def run_benchmark(n_spmv=100, workers=(1, 4), case=None):
    """Time the benchmark workload; returns {nproc: seconds}.

    The same four subdomain tasks run at every worker count, so dividing
    times gives the parallel speedup of identical work.
    """
    system, state_old, state_new, controls = case or make_benchmark_case()
    plans = worker_plans(system)
    dt = 86400.0

    out = assemble(system, state_old, state_new, dt, controls, jacobian=True)
    A = out.matrix
    n = A.layout.size
    blocks = [(A.blocks[r], int(A.layout.starts[r]), int(A.layout.starts[r + 1]))
              for r in range(len(plans))]

    shared_x = mp.RawArray("d", n)
    shared_y = mp.RawArray("d", n)
    payload = (system, plans, state_old, state_new, dt, controls, blocks)

    times = {}
    for nproc in workers:
        np.frombuffer(shared_x)[:] = 1.0
        np.frombuffer(shared_y)[:] = 0.0
        per_rank = run_spmd(nproc, _bench_task, payload, shared_x, shared_y,
                            n_spmv)
        times[nproc] = max(per_rank)
    return times
