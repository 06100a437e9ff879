"""Fully implicit discretization of oil-water and black-oil flow.

Unknowns per cell are (p_o, S_w) for two-phase and (p_o, S_w, X3) for
black-oil, where X3 is S_g in saturated cells and p_b in undersaturated ones.
Residual rows per cell are the water, oil, and gas component balances in
surface-volume rate form,

    R_c = (A_c(new) - A_c(old)) / dt - sum(fluxes into cell) - q_wells,

with single-point upstream mobility weighting by the sign of the phase
potential difference. All connections (grid faces, matrix-fracture transfer,
fracture-fracture faces) share one assembly path over a generic connection
list (a, b, T).

The Jacobian is assembled analytically from the slope companions the property
layer provides; upwind choices are frozen during differentiation.
"""

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import props as pr
from .errors import InputError
from .grid import partition_grid
from .linalg import DistCsrMatrix, DistVector, Layout
from .precond import PRESSURE, SATURATION, WELL, BlockLabeling
from .units import GRAVITY


@dataclass
class RockModel:
    """Reference porosity and diagonal permeability per grid cell.

    Porosity compresses as phi = phi_ref * (1 + cr * (p - p_ref)).
    """

    porosity: np.ndarray     # (N,)
    perm: np.ndarray         # (N, 3) kx, ky, kz in m^2
    cr: float = 0.0          # 1/Pa
    p_ref: float = 0.0       # Pa

    def __post_init__(self):
        self.porosity = np.asarray(self.porosity, dtype=float)
        self.perm = np.asarray(self.perm, dtype=float)
        if self.perm.ndim != 2 or self.perm.shape[1] != 3:
            raise InputError("perm must be (N, 3)")
        if self.perm.shape[0] != self.porosity.size:
            raise InputError("porosity and perm disagree on cell count")
        if np.any(self.porosity < 0) or np.any(self.porosity > 1):
            raise InputError("porosity must lie in [0, 1]")
        if np.any(self.perm < 0):
            raise InputError("permeability must be >= 0")
        if self.cr < 0:
            raise InputError("rock compressibility must be >= 0")


@dataclass
class DualPorosityConfig:
    """Dual-porosity (optionally dual-permeability) settings.

    Matrix-fracture transfer uses T_mf = sigma * V * k_m with k_m the mean of
    the matrix cell's three permeabilities and the Kazemi shape factor
    sigma = 4 * (1/lx^2 + 1/ly^2 + 1/lz^2) unless sigma is given directly.
    dual_perm keeps matrix-matrix face connections in addition to the
    fracture network.
    """

    porosity_f: np.ndarray
    perm_f: np.ndarray
    lx: float = 1.0
    ly: float = 1.0
    lz: float = 1.0
    sigma: float = None
    dual_perm: bool = False

    def shape_factor(self):
        if self.sigma is not None:
            return float(self.sigma)
        return 4.0 * (1.0 / self.lx ** 2 + 1.0 / self.ly ** 2 + 1.0 / self.lz ** 2)


class ReservoirState:
    """Primary unknowns on flow cells plus well bottom-hole pressures."""

    def __init__(self, p, sw, x3=None, saturated=None, t=0.0, well_bhp=None):
        self.p = np.asarray(p, dtype=float).copy()
        self.sw = np.asarray(sw, dtype=float).copy()
        n = self.p.size
        self.x3 = None if x3 is None else np.asarray(x3, dtype=float).copy()
        if saturated is None:
            saturated = np.ones(n, dtype=bool)
        self.saturated = np.asarray(saturated, dtype=bool).copy()
        self.t = float(t)
        self.well_bhp = dict(well_bhp or {})

    def copy(self):
        return ReservoirState(self.p, self.sw, self.x3, self.saturated,
                              self.t, self.well_bhp)

    @property
    def sg(self):
        if self.x3 is None:
            return np.zeros_like(self.p)
        return np.where(self.saturated, self.x3, 0.0)

    @property
    def pb(self):
        if self.x3 is None:
            return self.p.copy()
        return np.where(self.saturated, self.p, self.x3)

    @property
    def so(self):
        return 1.0 - self.sw - self.sg


def transmissibility(grid, rock, cell_a, cell_b):
    """Two-point flux transmissibility between face neighbors, in m^3.

    T = A_face / (d_a / (2 k_a) + d_b / (2 k_b)); zero permeability on either
    side gives T = 0.
    """
    ia, ja, ka = (int(v) for v in grid.ijk(cell_a))
    ib, jb, kb = (int(v) for v in grid.ijk(cell_b))
    diff = (ib - ia, jb - ja, kb - ka)
    if sorted(abs(d) for d in diff) != [0, 0, 1]:
        raise InputError(f"cells {cell_a} and {cell_b} are not face neighbors")
    axis = int(np.nonzero(diff)[0][0])
    size = (grid.dx, grid.dy, grid.dz)[axis]
    da, db = size[(ia, ja, ka)[axis]], size[(ib, jb, kb)[axis]]
    karr = rock.perm[:, axis]
    k_a, k_b = karr[int(cell_a)], karr[int(cell_b)]
    if k_a <= 0.0 or k_b <= 0.0:
        return 0.0
    face = 2 * axis + (1 if diff[axis] > 0 else 0)
    area = grid.face_area(int(cell_a), face)
    return float(area / (0.5 * da / k_a + 0.5 * db / k_b))


class Discretization:
    """Grid + rock + fluid + wells turned into a flow-cell connection graph.

    Flow cells are ordered worker by worker along the partition curve; with
    dual porosity every grid cell contributes a [matrix, fracture] pair and
    wells perforate the fracture continuum.
    """

    def __init__(self, grid, rock, fluid, wells=(), num_workers=1,
                 dual=None, partition=None):
        if rock.porosity.size != grid.num_cells:
            raise InputError("rock arrays must match the grid")
        self.grid = grid
        self.rock = rock
        self.fluid = fluid
        self.wells = list(wells)
        self.dual = dual
        self.partition = partition or partition_grid(grid, num_workers)
        self.num_workers = self.partition.num_workers
        self.nvar = 3 if fluid.mode == "black-oil" else 2

        dual_on = dual is not None
        ng = grid.num_cells
        per_cell = 2 if dual_on else 1
        # zero-porosity cells stay in the grid but carry no unknowns
        self.active = rock.porosity > 0.0
        n_active = int(np.count_nonzero(self.active))
        if n_active == 0:
            raise InputError("every cell has zero porosity; nothing to solve")
        self.num_flow_cells = n_active * per_cell

        # flow order: worker blocks, curve order inside, fracture after matrix
        flow_of_matrix = np.full(ng, -1, dtype=np.int64)
        flow_of_fracture = np.full(ng, -1, dtype=np.int64)
        gid_of_flow = np.empty(self.num_flow_cells, dtype=np.int64)
        is_fracture = np.zeros(self.num_flow_cells, dtype=bool)
        owner = np.empty(self.num_flow_cells, dtype=np.int32)
        sizes = []
        pos = 0
        for r, part in enumerate(self.partition.parts):
            part = part[self.active[part]]
            if dual_on:
                idx = pos + 2 * np.arange(part.size)
                flow_of_matrix[part] = idx
                flow_of_fracture[part] = idx + 1
                gid_of_flow[idx] = part
                gid_of_flow[idx + 1] = part
                is_fracture[idx + 1] = True
                step = 2 * part.size
            else:
                idx = pos + np.arange(part.size)
                flow_of_matrix[part] = idx
                gid_of_flow[idx] = part
                step = part.size
            owner[pos:pos + step] = r
            sizes.append(step)
            pos += step
        self.flow_of_matrix = flow_of_matrix
        self.flow_of_fracture = flow_of_fracture
        self.gid_of_flow = gid_of_flow
        self.is_fracture = is_fracture
        self.flow_owner = owner
        self.cells_per_worker = np.array(sizes, dtype=np.int64)
        self.flow_starts = np.concatenate(([0], np.cumsum(self.cells_per_worker)))

        self.volume = grid.volume[gid_of_flow]
        self.depth = grid.depth[gid_of_flow]
        poro = rock.porosity[gid_of_flow].copy()
        if dual_on:
            poro[is_fracture] = np.asarray(dual.porosity_f, dtype=float)[
                gid_of_flow[is_fracture]]
        self.poro_ref = poro

        self._build_connections()
        self._build_well_tables()
        self._layout_cache = {}

    # -- connections ---------------------------------------------------------

    def _face_trans(self, a, b, axis, perm):
        ia, ja, ka = self.grid.ijk(a)
        ib, jb, kb = self.grid.ijk(b)
        sizes = (self.grid.dx, self.grid.dy, self.grid.dz)
        da = np.where(axis == 0, sizes[0][ia],
                      np.where(axis == 1, sizes[1][ja], sizes[2][ka]))
        db = np.where(axis == 0, sizes[0][ib],
                      np.where(axis == 1, sizes[1][jb], sizes[2][kb]))
        k_a = perm[a, axis]
        k_b = perm[b, axis]
        area = self.grid.face_areas_for(a, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = area / (0.5 * da / k_a + 0.5 * db / k_b)
        return np.where((k_a > 0) & (k_b > 0), t, 0.0)

    def _build_connections(self):
        a, b, axis = self.grid.interior_faces()
        live = self.active[a] & self.active[b]
        a, b, axis = a[live], b[live], axis[live]
        conn_a, conn_b, conn_t = [], [], []
        dual = self.dual
        if dual is None:
            conn_a.append(self.flow_of_matrix[a])
            conn_b.append(self.flow_of_matrix[b])
            conn_t.append(self._face_trans(a, b, axis, self.rock.perm))
        else:
            perm_f = np.asarray(dual.perm_f, dtype=float)
            conn_a.append(self.flow_of_fracture[a])
            conn_b.append(self.flow_of_fracture[b])
            conn_t.append(self._face_trans(a, b, axis, perm_f))
            if dual.dual_perm:
                conn_a.append(self.flow_of_matrix[a])
                conn_b.append(self.flow_of_matrix[b])
                conn_t.append(self._face_trans(a, b, axis, self.rock.perm))
            g = np.nonzero(self.active)[0]
            km = self.rock.perm.mean(axis=1)
            t_mf = dual.shape_factor() * self.grid.volume[g] * km[g]
            conn_a.append(self.flow_of_matrix[g])
            conn_b.append(self.flow_of_fracture[g])
            conn_t.append(t_mf)
        self.conn_a = np.concatenate(conn_a)
        self.conn_b = np.concatenate(conn_b)
        self.conn_t = np.concatenate(conn_t)

    # -- wells -----------------------------------------------------------------

    def _build_well_tables(self):
        seen = set()
        for w in self.wells:
            if w.name in seen:
                raise InputError(f"duplicate well name {w.name!r}")
            seen.add(w.name)
            if w.kind == "injector" and w.inj_phase == "gas" \
                    and self.fluid.mode != "black-oil":
                raise InputError(f"well {w.name}: gas injection needs black-oil mode")
        self.well_by_name = {w.name: w for w in self.wells}
        self.well_cells = {}
        self.well_wi = {}
        self.well_depths = {}
        self.well_owner = {}
        for w in self.wells:
            gids = np.array([p.cell for p in w.perforations], dtype=np.int64)
            if np.any(gids < 0) or np.any(gids >= self.grid.num_cells):
                raise InputError(f"well {w.name} perforates outside the grid")
            if self.dual is not None:
                f = self.flow_of_fracture[gids]
            else:
                f = self.flow_of_matrix[gids]
            if np.any(f < 0):
                raise InputError(f"well {w.name} perforates an inactive cell")
            self.well_cells[w.name] = f
            self.well_wi[w.name] = np.array([p.wi for p in w.perforations])
            self.well_depths[w.name] = np.array([p.depth for p in w.perforations])
            self.well_owner[w.name] = int(self.flow_owner[f[0]])

    def layout_for(self, controls):
        """Unknown layout and labeling for one set of well controls.

        Rate-controlled wells get one trailing unknown in their owner
        worker's block; BHP-controlled and shut wells get none.
        """
        rate_wells = tuple(sorted(
            name for name, c in controls.items()
            if c is not None and c.mode == "rate" and name in self.well_by_name))
        cached = self._layout_cache.get(rate_wells)
        if cached is not None:
            return cached

        nw = self.num_workers
        wells_of = [[] for _ in range(nw)]
        for w in self.wells:  # deck order within each worker
            if w.name in rate_wells:
                wells_of[self.well_owner[w.name]].append(w.name)
        sizes = [self.cells_per_worker[r] * self.nvar + len(wells_of[r])
                 for r in range(nw)]
        layout = Layout.from_sizes(sizes)

        nf = self.num_flow_cells
        base = np.empty(nf, dtype=np.int64)
        for r in range(nw):
            lo, hi = self.flow_starts[r], self.flow_starts[r + 1]
            base[lo:hi] = layout.starts[r] + np.arange(hi - lo) * self.nvar
        well_row = {}
        for r in range(nw):
            row0 = layout.starts[r] + self.cells_per_worker[r] * self.nvar
            for s, name in enumerate(wells_of[r]):
                well_row[name] = int(row0 + s)

        kind = np.full(layout.size, WELL, dtype=np.int8)
        cells = base[:, None] + np.arange(self.nvar)[None, :]
        kind[cells[:, 0]] = PRESSURE
        kind[cells[:, 1:].ravel()] = SATURATION
        labeling = BlockLabeling(kind=kind, cells=cells)
        out = SimpleNamespace(layout=layout, labeling=labeling,
                              unknown_base=base, well_row=well_row,
                              rate_wells=rate_wells)
        self._layout_cache[rate_wells] = out
        return out

    # -- state initialization --------------------------------------------------

    def initial_state(self, p, sw, sg=None, pb=None):
        """Build a consistent state from natural-order grid arrays.

        Arrays are per grid cell and apply to both continua of a dual
        porosity run. Cells with sg > 0 start saturated (p_b = p); cells with
        sg == 0 start undersaturated at the given p_b (default p_b = p, the
        gas appearance point).
        """
        def spread(arr):
            arr = np.broadcast_to(np.asarray(arr, dtype=float),
                                  (self.grid.num_cells,))
            return arr[self.gid_of_flow]

        pf = spread(p)
        swf = spread(sw)
        if self.fluid.mode == "two-phase":
            return ReservoirState(pf, swf)
        sgf = spread(sg if sg is not None else 0.0)
        pbf = spread(pb if pb is not None else p)
        saturated = sgf > 0.0
        pbf = np.where(saturated, pf, np.minimum(pbf, pf))
        x3 = np.where(saturated, sgf, pbf)
        return ReservoirState(pf, swf, x3, saturated)


# ---------------------------------------------------------------------------
# property evaluation bundles
# ---------------------------------------------------------------------------

def _eval_cells(system, state):
    """Evaluate every cell-level property (and slopes) the assembly needs."""
    fluid = system.fluid
    pvt = fluid.pvt
    black = fluid.mode == "black-oil"
    p, sw = state.p, state.sw
    sg, pb, sat = state.sg, state.pb, state.saturated
    if not black:
        sat = np.ones_like(p, dtype=bool)

    w = pr.water_properties(pvt, p)
    o = pr.oil_properties(pvt, p, pb, sat)
    g = pr.gas_properties(pvt, p) if black else None
    kr = pr.relperm_properties(fluid, sw, sg if black else None)

    phi = system.poro_ref * (1.0 + system.rock.cr * (p - system.rock.p_ref))
    dphi = system.poro_ref * system.rock.cr

    ns = SimpleNamespace(p=p, sw=sw, sg=sg, pb=pb, sat=sat, so=state.so,
                         w=w, o=o, g=g, kr=kr, phi=phi, dphi=dphi, black=black)

    z = system.depth
    G = GRAVITY
    ns.pw = p - kr.pcow
    ns.pot_w = ns.pw + w.rho * G * z
    ns.pot_o = p + o.rho * G * z
    ns.dpot_w_dp = 1.0 + w.drho_dp * G * z
    ns.dpot_w_dsw = -kr.dpcow_dsw
    ns.dpot_o_dp = 1.0 + o.drho_dp * G * z

    muwbw = w.muw * w.bw
    ns.lam_w = kr.krw / muwbw
    ns.dlam_w_dp = -kr.krw * w.muw * w.dbw_dp / (muwbw * muwbw)
    ns.dlam_w_dsw = kr.dkrw_dsw / muwbw

    muobo = o.muo * o.bo
    dmuobo_dp = o.dmuo_dp * o.bo + o.muo * o.dbo_dp
    ns.lam_o = kr.kro / muobo
    ns.dlam_o_dp = -kr.kro * dmuobo_dp / (muobo * muobo)
    ns.dlam_o_dsw = kr.dkro_dsw / muobo

    if black:
        dmuobo_dpb = o.dmuo_dpb * o.bo + o.muo * o.dbo_dpb
        ns.dpot_o_dx3 = np.where(sat, 0.0, o.drho_dpb * G * z)
        ns.pg = p + kr.pcog
        ns.pot_g = ns.pg + g.rho * G * z
        ns.dpot_g_dp = 1.0 + g.drho_dp * G * z
        ns.dpot_g_dx3 = np.where(sat, kr.dpcog_dsg, 0.0)

        ns.dlam_o_dx3 = np.where(
            sat, kr.dkro_dsg / muobo,
            -kr.kro * dmuobo_dpb / (muobo * muobo))
        mugbg = g.mug * g.bg
        dmugbg_dp = g.dmug_dp * g.bg + g.mug * g.dbg_dp
        ns.lam_g = kr.krg / mugbg
        ns.dlam_g_dp = -kr.krg * dmugbg_dp / (mugbg * mugbg)
        ns.dlam_g_dx3 = np.where(sat, kr.dkrg_dsg / mugbg, 0.0)

        ns.rslam_o = o.rs * ns.lam_o
        ns.drslam_o_dp = o.drs_dp * ns.lam_o + o.rs * ns.dlam_o_dp
        ns.drslam_o_dsw = o.rs * ns.dlam_o_dsw
        ns.drslam_o_dx3 = (np.where(sat, 0.0, o.drs_dpb * ns.lam_o)
                           + o.rs * ns.dlam_o_dx3)
    return ns


def _accumulations(system, ev):
    """Component accumulations in surface volume, V*phi*(...), per cell."""
    V = system.volume
    out = {"water": V * ev.phi * ev.sw / ev.w.bw,
           "oil": V * ev.phi * ev.so / ev.o.bo}
    if ev.black:
        out["gas"] = V * ev.phi * (ev.sg / ev.g.bg + ev.o.rs * ev.so / ev.o.bo)
    return out


def fluid_in_place(system, state):
    """Total surface volume of each component currently stored."""
    acc = _accumulations(system, _eval_cells(system, state))
    return {k: float(np.sum(v)) for k, v in acc.items()}


def phase_potential(system, state, cell, phase):
    """Phi_alpha = p_alpha + rho_alpha * G * z at one flow cell."""
    ev = _eval_cells(system, state)
    pots = {"water": ev.pot_w, "oil": ev.pot_o}
    if ev.black:
        pots["gas"] = ev.pot_g
    if phase not in pots:
        raise InputError(f"unknown phase {phase!r}")
    return float(pots[phase][cell])


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def assemble(system, state_old, state_new, dt, controls=None, *,
             jacobian=True, rows_owner=None):
    """Residual (and optionally Jacobian) of the implicit balance equations.

    controls maps well names to WellControl; absent or None entries mean the
    well is shut. rows_owner restricts the emitted residual and Jacobian rows
    to one worker's owned rows (how a parallel worker assembles its block);
    the returned residual array is always globally sized.

    Returns a namespace with residual, matrix (None unless jacobian),
    layout, labeling, unknown_base, well_row, wells (per-well surface-rate
    report), and acc_scale (norm of old accumulation rates, the absolute
    convergence floor scale).
    """
    if dt <= 0:
        raise InputError("dt must be positive")
    controls = controls or {}
    sl = system.layout_for(controls)
    layout = sl.layout
    base = sl.unknown_base
    black = system.fluid.mode == "black-oil"
    n = layout.size

    ev = _eval_cells(system, state_new)
    ev_old = _eval_cells(system, state_old)
    acc_new = _accumulations(system, ev)
    acc_old = _accumulations(system, ev_old)

    resid = np.zeros(n)
    rows_w, rows_o = base, base + 1
    rows_g = (base + 2) if black else None
    comp = [("water", rows_w), ("oil", rows_o)] + ([("gas", rows_g)] if black else [])

    own_cell = np.ones(system.num_flow_cells, dtype=bool)
    if rows_owner is not None:
        own_cell = system.flow_owner == rows_owner

    for name, rows in comp:
        resid[rows[own_cell]] += (acc_new[name][own_cell]
                                  - acc_old[name][own_cell]) / dt

    jr, jc, jv = [], [], []

    def emit(rows, cols, vals):
        jr.append(np.asarray(rows, dtype=np.int64))
        jc.append(np.asarray(cols, dtype=np.int64))
        jv.append(np.asarray(vals, dtype=float))

    if jacobian:
        _emit_accumulation(system, ev, dt, base, own_cell, emit)

    # -- connection fluxes ----------------------------------------------------
    a, b, T = system.conn_a, system.conn_b, system.conn_t
    own_a = own_cell[a]
    own_b = own_cell[b]
    zero = np.zeros_like(ev.p)

    def flux_phase(pot, dpot_dp, dpot_dsw, dpot_dx3,
                   lam, dlam_dp, dlam_dsw, dlam_dx3, rows):
        dpot = pot[b] - pot[a]
        upb = dpot > 0.0
        up = np.where(upb, b, a)
        f = T * lam[up] * dpot
        np.subtract.at(resid, rows[a[own_a]], f[own_a])
        np.add.at(resid, rows[b[own_b]], f[own_b])
        if not jacobian:
            return
        lam_up = lam[up]
        terms = []
        for du_pot, du_lam, col in (
                (dpot_dp, dlam_dp, 0), (dpot_dsw, dlam_dsw, 1),
                (dpot_dx3, dlam_dx3, 2) if black else (None, None, None)):
            if du_pot is None:
                continue
            dv_a = (-du_pot[a] * T * lam_up
                    + np.where(upb, 0.0, T * du_lam[a] * dpot))
            dv_b = (du_pot[b] * T * lam_up
                    + np.where(upb, T * du_lam[b] * dpot, 0.0))
            terms.append((dv_a, base[a] + col))
            terms.append((dv_b, base[b] + col))
        for dv, cols_ in terms:
            emit(rows[a[own_a]], cols_[own_a], -dv[own_a])
            emit(rows[b[own_b]], cols_[own_b], dv[own_b])

    flux_phase(ev.pot_w, ev.dpot_w_dp, ev.dpot_w_dsw, zero,
               ev.lam_w, ev.dlam_w_dp, ev.dlam_w_dsw, zero, rows_w)
    flux_phase(ev.pot_o, ev.dpot_o_dp, zero,
               ev.dpot_o_dx3 if black else zero,
               ev.lam_o, ev.dlam_o_dp, ev.dlam_o_dsw,
               ev.dlam_o_dx3 if black else zero, rows_o)
    if black:
        flux_phase(ev.pot_g, ev.dpot_g_dp, zero, ev.dpot_g_dx3,
                   ev.lam_g, ev.dlam_g_dp, zero, ev.dlam_g_dx3, rows_g)
        # solution gas rides the oil flux
        flux_phase(ev.pot_o, ev.dpot_o_dp, zero, ev.dpot_o_dx3,
                   ev.rslam_o, ev.drslam_o_dp, ev.drslam_o_dsw,
                   ev.drslam_o_dx3, rows_g)

    well_report = _assemble_wells(system, state_new, controls, sl, ev, resid,
                                  emit if jacobian else None, rows_owner)

    acc_scale = float(np.sqrt(sum(
        float(np.dot(acc_old[nm], acc_old[nm])) for nm, _ in comp))) / dt

    A = None
    if jacobian:
        rows = np.concatenate(jr) if jr else np.zeros(0, np.int64)
        cols = np.concatenate(jc) if jc else np.zeros(0, np.int64)
        vals = np.concatenate(jv) if jv else np.zeros(0)
        A = DistCsrMatrix.from_coo(layout, rows, cols, vals)
    return SimpleNamespace(residual=resid, matrix=A, layout=layout,
                           labeling=sl.labeling, unknown_base=base,
                           well_row=sl.well_row, wells=well_report,
                           acc_scale=acc_scale)


def _emit_accumulation(system, ev, dt, base, own_cell, emit):
    """Diagonal block entries d(acc/dt)/d(cell unknowns)."""
    V = system.volume
    phi, dphi = ev.phi, ev.dphi
    w, o = ev.w, ev.o
    sel = own_cell
    rw, ro = base, base + 1

    daw_dp = V * (dphi * ev.sw / w.bw - phi * ev.sw * w.dbw_dp / w.bw ** 2)
    daw_dsw = V * phi / w.bw
    emit(rw[sel], base[sel], daw_dp[sel] / dt)
    emit(rw[sel], base[sel] + 1, daw_dsw[sel] / dt)

    dao_dp = V * (dphi * ev.so / o.bo - phi * ev.so * o.dbo_dp / o.bo ** 2)
    dao_dsw = -V * phi / o.bo
    emit(ro[sel], base[sel], dao_dp[sel] / dt)
    emit(ro[sel], base[sel] + 1, dao_dsw[sel] / dt)

    if not ev.black:
        return
    g = ev.g
    rg = base + 2
    sat = ev.sat
    dao_dx3 = np.where(sat, -V * phi / o.bo,
                       -V * phi * ev.so * o.dbo_dpb / o.bo ** 2)
    emit(ro[sel], base[sel] + 2, dao_dx3[sel] / dt)

    gterm = ev.sg / g.bg + o.rs * ev.so / o.bo
    dag_dp = V * (dphi * gterm + phi * (
        -ev.sg * g.dbg_dp / g.bg ** 2
        + ev.so * (o.drs_dp * o.bo - o.rs * o.dbo_dp) / o.bo ** 2))
    dag_dsw = -V * phi * o.rs / o.bo
    dag_dx3 = np.where(
        sat, V * phi * (1.0 / g.bg - o.rs / o.bo),
        V * phi * ev.so * (o.drs_dpb * o.bo - o.rs * o.dbo_dpb) / o.bo ** 2)
    emit(rg[sel], base[sel], dag_dp[sel] / dt)
    emit(rg[sel], base[sel] + 1, dag_dsw[sel] / dt)
    emit(rg[sel], base[sel] + 2, dag_dx3[sel] / dt)


def _assemble_wells(system, state, controls, sl, ev, resid, emit, rows_owner):
    """Source terms, well residual rows, and the per-well rate report."""
    base = sl.unknown_base
    black = ev.black
    G = GRAVITY
    report = {}
    for well in system.wells:
        c = controls.get(well.name)
        if c is None:
            continue
        f = system.well_cells[well.name]
        wi = system.well_wi[well.name]
        zp = system.well_depths[well.name]
        nperf = f.size
        zeros = np.zeros(nperf)
        own_row = rows_owner is None or system.well_owner[well.name] == rows_owner
        own_cells = (np.ones(nperf, dtype=bool) if rows_owner is None
                     else system.flow_owner[f] == rows_owner)

        if c.mode == "bhp":
            ph = c.value
            wrow = None
        else:
            ph = state.well_bhp[well.name]
            wrow = sl.well_row[well.name]
        dz = well.ref_depth - zp

        # phase drawdowns ph - p_alpha - rho_alpha*G*(z_h - z) and partials
        dd_w = ph - ev.pw[f] - ev.w.rho[f] * G * dz
        ddd_w_dp = -1.0 - ev.w.drho_dp[f] * G * dz
        ddd_w_dsw = ev.kr.dpcow_dsw[f]
        dd_o = ph - ev.p[f] - ev.o.rho[f] * G * dz
        ddd_o_dp = -1.0 - ev.o.drho_dp[f] * G * dz
        ddd_o_dx3 = -ev.o.drho_dpb[f] * G * dz if black else zeros
        if black:
            dd_g = ph - ev.pg[f] - ev.g.rho[f] * G * dz
            ddd_g_dp = -1.0 - ev.g.drho_dp[f] * G * dz
            ddd_g_dx3 = -np.where(ev.sat[f], ev.kr.dpcog_dsg[f], 0.0)

        q = {}
        dq = {}
        if well.kind == "producer":
            phase_data = [
                ("water", ev.lam_w[f], ev.dlam_w_dp[f], ev.dlam_w_dsw[f],
                 zeros, dd_w, ddd_w_dp, ddd_w_dsw, zeros),
                ("oil", ev.lam_o[f], ev.dlam_o_dp[f], ev.dlam_o_dsw[f],
                 ev.dlam_o_dx3[f] if black else zeros,
                 dd_o, ddd_o_dp, zeros, ddd_o_dx3),
            ]
            if black:
                phase_data.append(
                    ("gas", ev.lam_g[f], ev.dlam_g_dp[f], zeros,
                     ev.dlam_g_dx3[f], dd_g, ddd_g_dp, zeros, ddd_g_dx3))
            for (nm, lam, dl_dp, dl_dsw, dl_dx3,
                 dd, dd_dp, dd_dsw, dd_dx3) in phase_data:
                q[nm] = wi * lam * dd
                dq[nm] = {"p": wi * (dl_dp * dd + lam * dd_dp),
                          "sw": wi * (dl_dsw * dd + lam * dd_dsw),
                          "x3": wi * (dl_dx3 * dd + lam * dd_dx3),
                          "ph": wi * lam}
        else:
            # injector: total relative mobility over the injected phase B
            krw, kro = ev.kr.krw[f], ev.kr.kro[f]
            muw, muo = ev.w.muw, ev.o.muo[f]
            relmob = krw / muw + kro / muo
            drel_dp = -kro * ev.o.dmuo_dp[f] / muo ** 2
            drel_dsw = ev.kr.dkrw_dsw[f] / muw + ev.kr.dkro_dsw[f] / muo
            drel_dx3 = (-kro * ev.o.dmuo_dpb[f] / muo ** 2) if black else zeros
            if black:
                krg, mug = ev.kr.krg[f], ev.g.mug[f]
                relmob = relmob + krg / mug
                drel_dp = drel_dp - krg * ev.g.dmug_dp[f] / mug ** 2
                drel_dx3 = np.where(
                    ev.sat[f],
                    ev.kr.dkro_dsg[f] / muo + ev.kr.dkrg_dsg[f] / mug,
                    drel_dx3)
            if well.inj_phase == "water":
                binj, dbinj_dp = ev.w.bw[f], ev.w.dbw_dp[f]
                dd, dd_dp, dd_dsw, dd_dx3 = dd_w, ddd_w_dp, ddd_w_dsw, zeros
            else:
                binj, dbinj_dp = ev.g.bg[f], ev.g.dbg_dp[f]
                dd, dd_dp, dd_dsw, dd_dx3 = dd_g, ddd_g_dp, zeros, ddd_g_dx3
            minj = relmob / binj
            dminj_dp = drel_dp / binj - relmob * dbinj_dp / binj ** 2
            q[well.inj_phase] = wi * minj * dd
            dq[well.inj_phase] = {
                "p": wi * (dminj_dp * dd + minj * dd_dp),
                "sw": wi * (drel_dsw / binj * dd + minj * dd_dsw),
                "x3": wi * (drel_dx3 / binj * dd + minj * dd_dx3),
                "ph": wi * minj}

        comp_row = {"water": base[f], "oil": base[f] + 1}
        if black:
            comp_row["gas"] = base[f] + 2
        for nm, qs in q.items():
            np.subtract.at(resid, comp_row[nm][own_cells], qs[own_cells])
        if black and "oil" in q:
            np.subtract.at(resid, comp_row["gas"][own_cells],
                           (ev.o.rs[f] * q["oil"])[own_cells])

        if emit is not None:
            col_keys = [("p", base[f]), ("sw", base[f] + 1)]
            if black:
                col_keys.append(("x3", base[f] + 2))
            for nm, d in dq.items():
                rows = comp_row[nm]
                for key, col in col_keys:
                    emit(rows[own_cells], col[own_cells], -d[key][own_cells])
                if wrow is not None:
                    emit(rows[own_cells], np.full(int(own_cells.sum()), wrow),
                         -d["ph"][own_cells])
            if black and "oil" in dq:
                rs, drs_dp = ev.o.rs[f], ev.o.drs_dp[f]
                drs_dx3 = np.where(ev.sat[f], 0.0, ev.o.drs_dpb[f])
                d = dq["oil"]
                grow = comp_row["gas"]
                dgs = {"p": rs * d["p"] + drs_dp * q["oil"],
                       "sw": rs * d["sw"],
                       "x3": rs * d["x3"] + drs_dx3 * q["oil"]}
                for key, col in col_keys:
                    emit(grow[own_cells], col[own_cells], -dgs[key][own_cells])
                if wrow is not None:
                    emit(grow[own_cells], np.full(int(own_cells.sum()), wrow),
                         -(rs * d["ph"])[own_cells])

        # per-well surface rates, production positive
        rates = {"oil": -float(np.sum(q.get("oil", zeros))),
                 "water": -float(np.sum(q.get("water", zeros))),
                 "gas": -float(np.sum(q.get("gas", zeros))),
                 "injected": 0.0}
        if black and well.kind == "producer":
            rates["gas"] -= float(np.sum(ev.o.rs[f] * q["oil"]))
        if well.kind == "injector":
            rates["injected"] = float(np.sum(q[well.inj_phase]))
        report[well.name] = dict(rates, bhp=float(ph), mode=c.mode)

        if wrow is not None:
            if well.kind == "injector":
                target = c.value
                kinds = [well.inj_phase]
            else:
                target = -c.value
                kinds = {"orat": ["oil"], "wrat": ["water"],
                         "lrat": ["oil", "water"]}[c.kind]
            if own_row:
                resid[wrow] += sum(float(np.sum(q[k])) for k in kinds) - target
                if emit is not None:
                    for k in kinds:
                        d = dq[k]
                        for key, col in col_keys:
                            emit(np.full(nperf, wrow), col, d[key])
                        emit(np.array([wrow]), np.array([wrow]),
                             np.array([float(np.sum(d["ph"]))]))
    return report


def assemble_residual(system, state_old, state_new, dt, controls=None):
    """Residual only, wrapped as a DistVector over the unknown layout."""
    out = assemble(system, state_old, state_new, dt, controls, jacobian=False)
    return DistVector(out.layout, out.residual)


def assemble_jacobian(system, state_old, state_new, dt, controls=None):
    """Jacobian and its labeling for the current controls."""
    out = assemble(system, state_old, state_new, dt, controls, jacobian=True)
    return out.matrix, out.labeling


# ---------------------------------------------------------------------------
# variable switching
# ---------------------------------------------------------------------------

def switch_variables(system, state):
    """Enforce branch consistency after a Newton update.

    Saturated cells whose free gas went negative become undersaturated with
    p_b seeded just below p; undersaturated cells whose bubble point crossed
    p become saturated with S_g = 0. Saturations are clamped into physical
    range and p_b is kept on the oil table. Returns the number of cells that
    changed branch.
    """
    state.sw = np.clip(state.sw, 0.0, 1.0)
    if system.fluid.mode == "two-phase":
        return 0
    pvt = system.fluid.pvt
    sat = state.saturated
    x3 = state.x3

    to_unsat = sat & (x3 < 0.0)
    to_sat = (~sat) & (x3 > state.p)
    x3 = np.where(to_unsat, state.p - 1.0, x3)
    x3 = np.where(to_sat, 0.0, x3)
    sat = (sat & ~to_unsat) | to_sat

    x3 = np.where(sat, np.clip(x3, 0.0, np.maximum(1.0 - state.sw, 0.0)), x3)
    x3 = np.where(~sat, np.maximum(x3, pvt.po[0]), x3)
    state.x3 = x3
    state.saturated = sat
    return int(np.count_nonzero(to_unsat) + np.count_nonzero(to_sat))


def dual_porosity_transfer(system, state, gid):
    """Per-component matrix->fracture transfer rates of one grid cell.

    Positive means flow out of the matrix continuum into the fracture;
    diagnostic counterpart of the connection-based assembly, m^3/s surface.
    """
    if system.dual is None:
        raise InputError("system has no dual porosity")
    ev = _eval_cells(system, state)
    m = int(system.flow_of_matrix[gid])
    fr = int(system.flow_of_fracture[gid])
    if m < 0:
        raise InputError(f"cell {gid} is inactive")
    km = system.rock.perm[gid].mean()
    t = system.dual.shape_factor() * system.grid.volume[gid] * km
    out = {}
    for name, pot, lam in (("water", ev.pot_w, ev.lam_w),
                           ("oil", ev.pot_o, ev.lam_o)):
        dpot = pot[m] - pot[fr]
        up = m if dpot > 0 else fr
        out[name] = float(t * lam[up] * dpot)
    if ev.black:
        dpot = ev.pot_g[m] - ev.pot_g[fr]
        up = m if dpot > 0 else fr
        out["gas"] = float(t * ev.lam_g[up] * dpot)
        dpot_o = ev.pot_o[m] - ev.pot_o[fr]
        up_o = m if dpot_o > 0 else fr
        out["gas"] += float(t * ev.rslam_o[up_o] * dpot_o)
    return out
