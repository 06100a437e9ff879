"""CSV and VTK report writers.

CSV files are RFC-4180 with `.` decimals and one header row; rates and
cumulatives are reported in field units (STB/day, MSCF/day, psi, days) to
match the deck side of the I/O boundary. VTK output is legacy ASCII
structured-points with one file per requested step, cell data in natural
grid order.
"""

import csv
from pathlib import Path

import numpy as np

from . import units as U

WELL_COLUMNS = ["time_days", "well", "oil_rate_stb_day", "water_rate_stb_day",
                "gas_rate_mscf_day", "cum_oil_stb", "cum_water_stb",
                "cum_gas_mscf", "bhp_psi", "water_cut", "mode"]
STEP_COLUMNS = ["step", "time_days", "dt_days", "newton_iterations",
                "linear_iterations", "mb_water", "mb_oil", "mb_gas",
                "assembly_s", "precond_s", "solve_s", "events"]
FIELD_COLUMNS = ["time_days", "avg_pressure_psi", "oil_in_place_stb",
                 "water_in_place_stb", "gas_in_place_mscf"]


def water_cut(oil_rate, water_rate):
    """q_w / (q_w + q_o) of a producing well, clamped into [0, 1]."""
    liquid = oil_rate + water_rate
    if liquid <= 0.0:
        return 0.0
    return float(min(max(water_rate / liquid, 0.0), 1.0))


def write_csv_reports(reports, outdir):
    """wells.csv, steps.csv, and field.csv from a list of StepReports."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    cum = {}
    with open(outdir / "wells.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(WELL_COLUMNS)
        for rep in reports:
            for name in sorted(rep.wells):
                r = rep.wells[name]
                qo = r["oil"] / U.STB_PER_DAY
                qw = r["water"] / U.STB_PER_DAY
                qg = r["gas"] / U.MSCF_PER_DAY
                c = cum.setdefault(name, [0.0, 0.0, 0.0])
                days = rep.dt / U.DAY
                c[0] += qo * days
                c[1] += qw * days
                c[2] += qg * days
                w.writerow([rep.time / U.DAY, name, qo, qw, qg,
                            c[0], c[1], c[2], r["bhp"] / U.PSI,
                            water_cut(qo, qw), r["mode"]])

    with open(outdir / "steps.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STEP_COLUMNS)
        for rep in reports:
            mb = rep.mass_balance
            t = rep.timings
            w.writerow([rep.index, rep.time / U.DAY, rep.dt / U.DAY,
                        rep.newton_iterations, rep.linear_iterations,
                        mb.get("water", ""), mb.get("oil", ""),
                        mb.get("gas", ""),
                        t.get("assembly", ""), t.get("precond", ""),
                        t.get("solve", ""),
                        ";".join(f"{n}:{what}" for n, what, _ in rep.events)])

    with open(outdir / "field.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIELD_COLUMNS)
        for rep in reports:
            fip = rep.fluid_in_place
            w.writerow([rep.time / U.DAY, rep.avg_pressure / U.PSI,
                        fip.get("oil", 0.0) / U.BBL,
                        fip.get("water", 0.0) / U.BBL,
                        fip.get("gas", 0.0) / (1000 * U.SCF)])


def _natural_order(system, flow_values, fracture=False):
    """Pull one continuum of a flow-ordered array back to natural gid order.

    Inactive cells carry no unknowns and render as 0.
    """
    idx = system.flow_of_fracture if fracture else system.flow_of_matrix
    vals = np.asarray(flow_values)[np.maximum(idx, 0)]
    return np.where(idx >= 0, vals, 0.0)


def write_vtk(system, state, path, title="reservoir state"):
    """Legacy ASCII structured-points snapshot of p_o, S_w (and S_g).

    Cell data in natural order; spacings use the first row of each axis
    (the legacy structured-points format cannot carry tensor spacings).
    Dual-porosity runs add the fracture continuum as extra arrays.
    """
    grid = system.grid
    nx, ny, nz = grid.shape
    fields = [("pressure_psi", state.p / U.PSI),
              ("water_saturation", state.sw)]
    if system.fluid.mode == "black-oil":
        fields.append(("gas_saturation", state.sg))

    lines = ["# vtk DataFile Version 3.0", title, "ASCII",
             "DATASET STRUCTURED_POINTS",
             f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}",
             "ORIGIN 0 0 0",
             f"SPACING {grid.dx[0]:.9g} {grid.dy[0]:.9g} {grid.dz[0]:.9g}",
             f"CELL_DATA {grid.num_cells}"]
    duals = [False, True] if system.dual is not None else [False]
    for name, values in fields:
        for frac in duals:
            label = name + ("_fracture" if frac else "")
            arr = _natural_order(system, values, fracture=frac)
            lines.append(f"SCALARS {label} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(" ".join(f"{v:.9g}" for v in arr[i:i + 6])
                         for i in range(0, arr.size, 6))
    Path(path).write_text("\n".join(lines) + "\n")
    return str(path)
