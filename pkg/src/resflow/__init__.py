"""Parallel-structured reservoir simulation: two-phase and black-oil flow
on Cartesian grids with domain decomposition, inexact Newton, and
CPR-preconditioned Krylov solvers.
"""

__version__ = "0.1.0"

from .errors import (DeckError, DecouplingError, DivergenceError,
                     FactorizationError, GeometryError, InputError,
                     NonconvergenceError, OutOfRangeError)
from .grid import (Grid, Partition, build_ghost_plan, hilbert_index,
                   hilbert_keys, hilbert_order, partition_grid)
from .props import (FluidSystem, PvtTable, RelPermTable, eval_gas_oil,
                    eval_pvt_gas, eval_pvt_oil, eval_pvt_water,
                    eval_water_oil, stone2_kro)
from .linalg import (DistCsrMatrix, DistVector, Layout, SolveResult,
                     SolverConfig, read_matrix_market, read_vector, solve,
                     write_matrix_market, write_vector)
from .precond import (AMG, AmgConfig, BlockLabeling, CprFpf, ILU0, RAS,
                      amg_setup, amg_vcycle, ilu0_factor, make_preconditioner,
                      quasi_impes_decouple, read_labeling, write_labeling)
from .wells import (Perforation, Schedule, ScheduleEntry, Well, WellControl,
                    apply_limit_switches, peaceman_index, perforation_rate,
                    rate_of_kind)
from .model import (Discretization, DualPorosityConfig, ReservoirState,
                    RockModel, assemble, assemble_jacobian, assemble_residual,
                    dual_porosity_transfer, fluid_in_place, phase_potential,
                    switch_variables, transmissibility)
from .newton import (NewtonConfig, Simulation, StepReport, TimestepConfig,
                     advance_timestep, forcing_term, newton_solve)
from .deck import SimDeck, parse_deck, read_deck, serialize_deck
from .build import build_simulation
from .reports import water_cut, write_csv_reports, write_vtk

__all__ = [name for name in dir() if not name.startswith("_")]
