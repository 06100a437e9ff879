import numpy as np
import pytest

from resflow.errors import InputError
from resflow.grid import Grid
from resflow.model import Discretization, assemble_residual
from resflow.parallel import (assemble_residual_blocks, local_residual,
                              make_benchmark_case, run_benchmark, run_spmd,
                              worker_plans)
from resflow.wells import Perforation, Well, WellControl

from test_model import black_oil_fluid, dead_oil_fluid, uniform_rock


def waterflood_system(nx=6, ny=5, workers=4):
    g = Grid(nx, ny, 1, 10.0, 10.0, 4.0)
    ng = g.num_cells
    wells = [Well("I", "injector", 2.0, (Perforation(0, 1e-12, 2.0),)),
             Well("P", "producer", 2.0, (Perforation(ng - 1, 1e-12, 2.0),))]
    sys = Discretization(g, uniform_rock(ng, cr=1e-10, p_ref=2e7),
                         dead_oil_fluid(cw=3e-10), wells,
                         num_workers=workers)
    return sys


def perturbed_states(sys, rng):
    old = sys.initial_state(2e7, 0.3)
    new = old.copy()
    n = new.p.size
    new.p = new.p + rng.uniform(-2e5, 2e5, n)
    new.sw = np.clip(new.sw + rng.uniform(-0.05, 0.05, n), 0.0, 1.0)
    return old, new


CONTROLS = {"I": WellControl("bhp", 2.6e7), "P": WellControl("bhp", 1.4e7)}


def test_worker_plans_tile_the_flow_range():
    sys = waterflood_system(workers=4)
    plans = worker_plans(sys)
    assert len(plans) == 4
    assert plans[0].lo == 0
    assert plans[-1].hi == sys.grid.num_cells
    for p, q in zip(plans, plans[1:]):
        assert p.hi == q.lo
    for p in plans:
        assert np.array_equal(p.cells[:p.n_owned], np.arange(p.lo, p.hi))
        ghosts = p.cells[p.n_owned:]
        assert not np.any((ghosts >= p.lo) & (ghosts < p.hi))
        # every connection in the plan touches at least one owned cell
        assert np.all(p.own_a | p.own_b)


def test_plan_connections_cover_each_owned_face_once():
    sys = waterflood_system(workers=3)
    plans = worker_plans(sys)
    # count (a, b) connection instances owned-side only: each global
    # connection contributes its a-end exactly once and b-end exactly once
    total_a = sum(int(np.count_nonzero(p.own_a)) for p in plans)
    total_b = sum(int(np.count_nonzero(p.own_b)) for p in plans)
    assert total_a == sys.conn_a.size
    assert total_b == sys.conn_b.size


def test_blocks_match_serial_residual_two_phase(rng):
    sys = waterflood_system(workers=4)
    old, new = perturbed_states(sys, rng)
    serial = assemble_residual(sys, old, new, 43200.0, CONTROLS).data
    blocks = assemble_residual_blocks(sys, old, new, 43200.0, CONTROLS)
    assert np.array_equal(np.concatenate(blocks), serial)


def test_blocks_match_serial_residual_black_oil(rng):
    g = Grid(4, 3, 1, 10.0, 10.0, 4.0)
    ng = g.num_cells
    wells = [Well("P", "producer", 2.0, (Perforation(ng - 1, 1e-12, 2.0),))]
    sys = Discretization(g, uniform_rock(ng, cr=1e-10, p_ref=2e7),
                         black_oil_fluid(), wells, num_workers=3)
    old = sys.initial_state(3.0e7, 0.25, sg=None,
                            pb=np.full(ng, 2.75e7))
    new = old.copy()
    new.p = new.p + rng.uniform(-4e5, 0.0, ng)
    new.sw = np.clip(new.sw + rng.uniform(0.0, 0.03, ng), 0.0, 1.0)
    # push a few cells through the bubble point so both branches appear
    new.saturated[:4] = True
    new.x3 = new.x3.copy()
    new.x3[:4] = 0.02
    ctl = {"P": WellControl("bhp", 2.2e7)}
    serial = assemble_residual(sys, old, new, 43200.0, ctl).data
    blocks = assemble_residual_blocks(sys, old, new, 43200.0, ctl)
    assert np.array_equal(np.concatenate(blocks), serial)


def test_blocks_independent_of_worker_count(rng):
    base = waterflood_system(workers=1)
    old, new = perturbed_states(base, rng)
    ref = np.concatenate(assemble_residual_blocks(base, old, new, 86400.0,
                                                  CONTROLS))
    for nw in (2, 3):
        sys = waterflood_system(workers=nw)
        o2 = sys.initial_state(2e7, 0.3)
        n2 = o2.copy()
        # replay the same physical perturbation through the gid map
        n2.p = n2.p + (new.p - old.p)[_remap(base, sys)]
        n2.sw = new.sw[_remap(base, sys)]
        got = np.concatenate(assemble_residual_blocks(sys, o2, n2, 86400.0,
                                                      CONTROLS))
        # compare per physical cell, both components
        nvar = 2
        for gid in range(sys.grid.num_cells):
            i = base.flow_of_matrix[gid] * nvar
            j = sys.flow_of_matrix[gid] * nvar
            assert got[j:j + nvar] == pytest.approx(ref[i:i + nvar],
                                                    rel=1e-12, abs=1e-20)


def _remap(src, dst):
    """flow index in src for each flow index of dst (same grid)."""
    return src.flow_of_matrix[dst.gid_of_flow]


def test_local_residual_rejects_rate_wells():
    sys = waterflood_system(workers=2)
    old, new = perturbed_states(sys, np.random.default_rng(1))
    plans = worker_plans(sys)
    ctl = {"P": WellControl("rate", 1e-5, kind="orat")}
    with pytest.raises(InputError):
        for p in plans:
            local_residual(sys, p, old, new, 3600.0, ctl)


def _square(rank, nproc, barrier, offset):
    barrier.wait()
    return rank * rank + offset


def _faulty(rank, nproc, barrier):
    if rank == 1:
        raise ValueError("boom")
    return rank


def test_run_spmd_collects_in_rank_order():
    assert run_spmd(3, _square, 10) == [10, 11, 14]


def test_run_spmd_propagates_child_failure():
    with pytest.raises(RuntimeError, match="worker 1 failed.*boom"):
        run_spmd(2, _faulty)


def test_benchmark_machinery_runs():
    case = make_benchmark_case(nx=16, ny=8)
    times = run_benchmark(n_spmv=2, workers=(1, 4), case=case)
    assert set(times) == {1, 4}
    assert all(t > 0.0 for t in times.values())
