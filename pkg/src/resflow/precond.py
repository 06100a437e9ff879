"""Preconditioners: ILU(0), restricted additive Schwarz, Quasi-IMPES
decoupling, smoothed-aggregation AMG, and their CPR combination.

The CPR apply is a fixed five-step recipe: smooth with RAS, correct the
pressure block with one AMG V-cycle on the decoupled pressure matrix, smooth
with RAS again, with fresh true residuals between stages. Everything here
operates on the already-decoupled system; quasi_impes_decouple is what turns
the assembled Jacobian into that system once per Newton iteration.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from numba import njit

from .errors import DecouplingError, FactorizationError, InputError
from .linalg import DistCsrMatrix

log = logging.getLogger("resflow")

# unknown kinds
PRESSURE, SATURATION, WELL = 0, 1, 2


@dataclass
class BlockLabeling:
    """Role of every global unknown plus the per-cell row grouping.

    kind[i] is PRESSURE, SATURATION, or WELL. cells[c] lists cell c's rows,
    pressure row first, then its saturation-like rows; all rows of one cell
    live on one worker. Well rows belong to no cell.
    """

    kind: np.ndarray
    cells: np.ndarray

    def __post_init__(self):
        self.kind = np.asarray(self.kind, dtype=np.int8)
        self.cells = np.asarray(self.cells, dtype=np.int64)
        if self.cells.size:
            if np.any(self.kind[self.cells[:, 0]] != PRESSURE):
                raise InputError("first row of every cell must be the pressure row")
            if np.any(self.kind[self.cells[:, 1:]] != SATURATION):
                raise InputError("trailing cell rows must be saturation-like")

    @property
    def pressure_rows(self):
        return np.flatnonzero(self.kind == PRESSURE)


def write_labeling(path, labeling):
    with open(path, "w") as fh:
        fh.write("resflow-labeling 1\n")
        for k in labeling.kind:
            fh.write(f"{int(k)}\n")


def read_labeling(path):
    """Rebuild a labeling from the one-kind-per-row sidecar format.

    Cell grouping is implied by order: each pressure row opens a cell that
    collects the saturation rows following it.
    """
    with open(path) as fh:
        header = fh.readline().split()
        if header[:1] != ["resflow-labeling"]:
            raise InputError(f"{path}: not a labeling file")
        kind = np.array([int(line) for line in fh if line.strip()], dtype=np.int8)
    cells = []
    current = None
    for i, k in enumerate(kind):
        if k == PRESSURE:
            if current:
                cells.append(current)
            current = [i]
        elif k == SATURATION:
            if current is None:
                raise InputError(f"{path}: saturation row {i} before any pressure row")
            current.append(i)
        else:
            if current:
                cells.append(current)
            current = None
    if current:
        cells.append(current)
    if cells:
        m = len(cells[0])
        if any(len(c) != m for c in cells):
            raise InputError(f"{path}: inconsistent unknowns per cell")
        cells = np.array(cells, dtype=np.int64)
    else:
        cells = np.zeros((0, 1), dtype=np.int64)
    return BlockLabeling(kind=kind, cells=cells)


# ---------------------------------------------------------------------------
# ILU(0)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _ilu0_factor_kernel(n, indptr, indices, data, diag_pos):
    """In-place IKJ ILU(0) on sorted CSR. Returns failing row or -1."""
    for i in range(n):
        kk = indptr[i]
        while kk < indptr[i + 1]:
            k = indices[kk]
            if k >= i:
                break
            piv = data[diag_pos[k]]
            if piv == 0.0:
                return k
            mult = data[kk] / piv
            data[kk] = mult
            jj = diag_pos[k] + 1
            ii = kk + 1
            while jj < indptr[k + 1] and ii < indptr[i + 1]:
                ck = indices[jj]
                ci = indices[ii]
                if ck == ci:
                    data[ii] -= mult * data[jj]
                    jj += 1
                    ii += 1
                elif ck < ci:
                    jj += 1
                else:
                    ii += 1
            kk += 1
        if data[diag_pos[i]] == 0.0:
            return i
    return -1


@njit(cache=True)
def _ilu0_solve_kernel(n, indptr, indices, data, diag_pos, b, x):
    for i in range(n):
        s = b[i]
        for jj in range(indptr[i], diag_pos[i]):
            s -= data[jj] * x[indices[jj]]
        x[i] = s
    for i in range(n - 1, -1, -1):
        s = x[i]
        for jj in range(diag_pos[i] + 1, indptr[i + 1]):
            s -= data[jj] * x[indices[jj]]
        x[i] = s / data[diag_pos[i]]


def _diag_positions(A):
    n = A.shape[0]
    pos = np.empty(n, dtype=np.int64)
    for i in range(n):
        cols = A.indices[A.indptr[i]:A.indptr[i + 1]]
        j = np.searchsorted(cols, i)
        if j == cols.size or cols[j] != i:
            raise FactorizationError(f"row {i} has no diagonal entry", row=i)
        pos[i] = A.indptr[i] + j
    return pos


class ILU0:
    """Zero-fill incomplete LU on the exact sparsity pattern of A.

    A zero pivot triggers one retry with the diagonal shifted by
    1e-12 * max|diag(A)|; a second failure raises FactorizationError. L has
    unit diagonal and shares A's strictly-lower pattern; U its upper.
    """

    def __init__(self, A):
        A = sp.csr_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise InputError("ILU(0) needs a square matrix")
        A.sort_indices()
        self.n = A.shape[0]
        self.indptr = A.indptr.astype(np.int64)
        self.indices = A.indices.astype(np.int64)
        self.diag_pos = _diag_positions(A)
        lu = A.data.astype(float).copy()
        bad = _ilu0_factor_kernel(self.n, self.indptr, self.indices, lu, self.diag_pos)
        if bad >= 0:
            shift = 1e-12 * np.max(np.abs(A.data[self.diag_pos])) or 1e-12
            lu = A.data.astype(float).copy()
            lu[self.diag_pos] += shift
            bad = _ilu0_factor_kernel(self.n, self.indptr, self.indices, lu,
                                      self.diag_pos)
            if bad >= 0:
                raise FactorizationError(
                    f"zero pivot in row {bad} survived diagonal shift", row=bad)
            log.warning("ilu0: zero pivot cured by diagonal shift %.3e", shift)
        self.lu = lu

    def solve(self, b):
        x = np.empty_like(np.asarray(b, dtype=float))
        _ilu0_solve_kernel(self.n, self.indptr, self.indices, self.lu,
                           self.diag_pos, np.asarray(b, dtype=float), x)
        return x

    apply = solve

    def split(self):
        """(L, U) as explicit CSR factors, for inspection and tests."""
        n = self.n
        Lr, Lc, Lv = [], [], []
        Ur, Uc, Uv = [], [], []
        for i in range(n):
            for jj in range(self.indptr[i], self.indptr[i + 1]):
                j = self.indices[jj]
                if j < i:
                    Lr.append(i), Lc.append(j), Lv.append(self.lu[jj])
                else:
                    Ur.append(i), Uc.append(j), Uv.append(self.lu[jj])
            Lr.append(i), Lc.append(i), Lv.append(1.0)
        L = sp.csr_matrix((Lv, (Lr, Lc)), shape=(n, n))
        U = sp.csr_matrix((Uv, (Ur, Uc)), shape=(n, n))
        return L, U


def ilu0_factor(A):
    """Factor A and return (L, U); see ILU0 for the pivot policy."""
    return ILU0(A).split()


# ---------------------------------------------------------------------------
# Restricted additive Schwarz
# ---------------------------------------------------------------------------

class RAS:
    """Overlapping Schwarz with restricted (owned-rows-only) combination.

    Each worker's domain is its owned rows grown `overlap` times through the
    matrix graph (the columns its rows touch). Local solves are ILU(0) on the
    extracted square subdomain matrix; the result is scattered back only on
    owned rows, so contributions never overlap. One worker degenerates to a
    global ILU(0).
    """

    def __init__(self, A, overlap=1, local_solver="ilu0"):
        if overlap < 0:
            raise InputError("overlap must be >= 0")
        if local_solver != "ilu0":
            raise InputError(f"unsupported local solver {local_solver!r}")
        self.layout = A.layout
        G = A.to_scipy()
        G.sort_indices()
        ent_rows = np.repeat(np.arange(G.shape[0]), np.diff(G.indptr))
        self.domains = []
        self.solvers = []
        self.owned_pos = []
        for r in range(self.layout.num_workers):
            dom = np.arange(self.layout.starts[r], self.layout.starts[r + 1])
            for _ in range(overlap):
                mask = np.zeros(G.shape[0], dtype=bool)
                mask[dom] = True
                cols = G.indices[mask[ent_rows]]
                dom = np.union1d(dom, cols)
            sub = G[dom][:, dom].tocsr()
            self.domains.append(dom)
            self.solvers.append(ILU0(sub))
            self.owned_pos.append(np.searchsorted(
                dom, np.arange(self.layout.starts[r], self.layout.starts[r + 1])))

    def apply(self, f):
        z = np.zeros_like(f)
        for r in range(self.layout.num_workers):
            zloc = self.solvers[r].solve(f[self.domains[r]])
            z[self.layout.owned(r)] = zloc[self.owned_pos[r]]
        return z


# ---------------------------------------------------------------------------
# Quasi-IMPES decoupling
# ---------------------------------------------------------------------------

def _csr_find(A, rows, cols):
    """Positions of (rows, cols) entries in CSR storage; -1 where absent."""
    q = (np.asarray(rows, dtype=np.int64) * A.shape[1]
         + np.asarray(cols, dtype=np.int64))
    if A.indices.size == 0:
        return np.full(q.shape, -1, dtype=np.int64)
    ent_rows = np.repeat(np.arange(A.shape[0], dtype=np.int64), np.diff(A.indptr))
    keys = ent_rows * A.shape[1] + A.indices
    pos = np.minimum(np.searchsorted(keys, q), keys.size - 1)
    return np.where(keys[pos] == q, pos, -1)


def _csr_get(A, rows, cols):
    pos = _csr_find(A, rows, cols)
    out = np.where(pos >= 0, A.data[np.maximum(pos, 0)], 0.0)
    return out


def quasi_impes_decouple(A, b, labeling):
    """Eliminate same-cell saturation couplings from every pressure row.

    For each cell, the pressure row gets the combination p_row - alpha @
    s_rows with alpha solving alpha @ A_ss = A_ps against the cell's own
    saturation block, which zeroes all (pressure-row, same-cell
    saturation-column) entries. The eliminated entries are then written as
    exact zeros since they vanish algebraically. Returns the decoupled
    matrix and right-hand side; row ops stay within one worker because a
    cell's rows are never split.

    Cells whose saturation block is numerically singular are skipped with a
    warning and keep their original pressure row.
    """
    cells = labeling.cells
    if cells.size == 0 or cells.shape[1] < 2:
        return A, b.copy()
    m = cells.shape[1] - 1
    p_rows = cells[:, 0]
    s_rows = cells[:, 1:]

    G = A.to_scipy()
    G.sort_indices()
    nc = cells.shape[0]
    # A_ps[c, j] = A[p_row, s_col_j]; A_ss[c, i, j] = A[s_row_i, s_col_j]
    a_ps = _csr_get(G, np.repeat(p_rows, m), s_rows.ravel()).reshape(nc, m)
    rep = np.repeat(s_rows, m, axis=1)          # row index per (i, j)
    til = np.tile(s_rows, (1, m))               # col index per (i, j)
    a_ss = _csr_get(G, rep.ravel(), til.ravel()).reshape(nc, m, m)

    alpha = np.zeros((nc, m))
    if m == 1:
        s = a_ss[:, 0, 0]
        ok = np.abs(s) > 0.0
        alpha[ok, 0] = a_ps[ok, 0] / s[ok]
    else:
        det = a_ss[:, 0, 0] * a_ss[:, 1, 1] - a_ss[:, 0, 1] * a_ss[:, 1, 0]
        scale = np.max(np.abs(a_ss).reshape(nc, -1), axis=1)
        ok = np.abs(det) > 1e-14 * scale * scale
        inv = np.zeros((nc, 2, 2))
        d = np.where(ok, det, 1.0)
        inv[:, 0, 0] = a_ss[:, 1, 1] / d
        inv[:, 1, 1] = a_ss[:, 0, 0] / d
        inv[:, 0, 1] = -a_ss[:, 0, 1] / d
        inv[:, 1, 0] = -a_ss[:, 1, 0] / d
        alpha = np.einsum("cj,cjk->ck", a_ps, inv)
        alpha[~ok] = 0.0
    skipped = int(np.count_nonzero(~ok))
    if skipped:
        log.warning("quasi-impes: skipped %d cells with singular saturation blocks",
                    skipped)

    n = A.layout.size
    e_rows = np.repeat(p_rows, m)[ok.repeat(m)]
    e_cols = s_rows.ravel()[ok.repeat(m)]
    e_vals = -alpha.ravel()[ok.repeat(m)]
    D = sp.csr_matrix(
        (np.concatenate([np.ones(n), e_vals]),
         (np.concatenate([np.arange(n), e_rows]),
          np.concatenate([np.arange(n), e_cols]))),
        shape=(n, n))

    new_blocks = []
    for r, blk in enumerate(A.blocks):
        lo, hi = A.layout.starts[r], A.layout.starts[r + 1]
        D_loc = D[lo:hi][:, lo:hi].tocsr()
        csr = (D_loc @ blk.csr).tocsr()
        csr.sort_indices()
        new_blocks.append(type(blk)(csr=csr, gcols=blk.gcols,
                                    ghost_gids=blk.ghost_gids, plan=blk.plan))
    At = DistCsrMatrix(A.layout, new_blocks)

    # the eliminated entries are algebraic zeros: store them as exact zeros
    for r, blk in enumerate(At.blocks):
        lo, hi = At.layout.starts[r], At.layout.starts[r + 1]
        sel = (p_rows >= lo) & (p_rows < hi) & ok
        if not np.any(sel):
            continue
        lrows = np.repeat(p_rows[sel] - lo, m)
        # a cell's saturation columns are owned by the same worker, so they
        # sit in the owned part of the local column space
        lcols = s_rows[sel].ravel() - lo
        pos = _csr_find(blk.csr, lrows, lcols)
        blk.csr.data[pos[pos >= 0]] = 0.0

    bt = b.copy()
    for c in range(m):
        bt[p_rows[ok]] -= alpha[ok, c] * b[s_rows[ok, c]]
    return At, bt


# ---------------------------------------------------------------------------
# Smoothed-aggregation AMG
# ---------------------------------------------------------------------------

@dataclass
class AmgConfig:
    strength: float = 0.08
    omega: float = 2.0 / 3.0
    max_levels: int = 10
    max_coarse: int = 64


@njit(cache=True)
def _gs_sweep(indptr, indices, data, diag_pos, x, b, forward):
    n = x.size
    if forward:
        start, stop, step = 0, n, 1
    else:
        start, stop, step = n - 1, -1, -1
    for i in range(start, stop, step):
        s = b[i]
        for jj in range(indptr[i], indptr[i + 1]):
            j = indices[jj]
            if j != i:
                s -= data[jj] * x[j]
        x[i] = s / data[diag_pos[i]]


class _Level:
    def __init__(self, A):
        A = A.tocsr()
        A.sort_indices()
        self.A = A
        self.indptr = A.indptr.astype(np.int64)
        self.indices = A.indices.astype(np.int64)
        self.diag_pos = _diag_positions(A)
        self.P = None
        self.R = None

    def smooth(self, x, b, forward):
        _gs_sweep(self.indptr, self.indices, self.A.data, self.diag_pos,
                  x, b, forward)


def _aggregate(A, theta):
    """Greedy strength-based aggregation; returns aggregate id per node.

    First pass seeds an aggregate from every node whose strong neighborhood
    is untouched; second pass attaches leftovers to an adjacent aggregate or
    makes them singletons.
    """
    n = A.shape[0]
    diag = np.abs(A.diagonal())
    C = A.tocoo()
    thresh = theta * np.sqrt(diag[C.row] * diag[C.col])
    keep = (C.row != C.col) & (np.abs(C.data) >= thresh)
    srow, scol = C.row[keep], C.col[keep]
    order = np.argsort(srow, kind="stable")
    srow, scol = srow[order], scol[order]
    sptr = np.concatenate(([0], np.cumsum(np.bincount(srow, minlength=n))))

    agg = np.full(n, -1, dtype=np.int64)
    count = 0
    for i in range(n):
        neigh = scol[sptr[i]:sptr[i + 1]]
        if agg[i] >= 0 or (neigh.size and np.any(agg[neigh] >= 0)):
            continue
        agg[i] = count
        agg[neigh] = count
        count += 1
    for i in range(n):
        if agg[i] >= 0:
            continue
        neigh = scol[sptr[i]:sptr[i + 1]]
        hit = neigh[agg[neigh] >= 0] if neigh.size else neigh
        if hit.size:
            agg[i] = agg[hit[0]]
        else:
            agg[i] = count
            count += 1
    return agg, count


def amg_setup(A, config=None):
    """Build the smoothed-aggregation hierarchy for a pressure-like matrix."""
    config = config or AmgConfig()
    A = sp.csr_matrix(A)
    levels = [_Level(A)]
    while (levels[-1].A.shape[0] > config.max_coarse
           and len(levels) < config.max_levels):
        Al = levels[-1].A
        n = Al.shape[0]
        agg, nagg = _aggregate(Al, config.strength)
        if nagg >= n:
            break
        P_tent = sp.csr_matrix(
            (np.ones(n), (np.arange(n), agg)), shape=(n, nagg))
        dinv = 1.0 / Al.diagonal()
        P = P_tent - config.omega * sp.diags(dinv) @ (Al @ P_tent)
        R = P.T.tocsr()
        levels[-1].P = P.tocsr()
        levels[-1].R = R
        levels.append(_Level((R @ Al @ P).tocsr()))
    coarse = levels[-1].A.toarray()
    levels[-1].lu = scipy.linalg.lu_factor(coarse)
    return levels


def amg_vcycle(levels, b, level=0, x=None):
    """One V(1,1) cycle: forward GS down, dense solve at the bottom,
    backward GS up."""
    lvl = levels[level]
    if level == len(levels) - 1:
        return scipy.linalg.lu_solve(lvl.lu, b)
    if x is None:
        x = np.zeros_like(b)
    lvl.smooth(x, b, forward=True)
    r = b - lvl.A @ x
    xc = amg_vcycle(levels, lvl.R @ r, level + 1)
    x += lvl.P @ xc
    lvl.smooth(x, b, forward=False)
    return x


class AMG:
    """Standalone V-cycle preconditioner."""

    def __init__(self, A, config=None):
        if isinstance(A, DistCsrMatrix):
            A = A.to_scipy()
        self.levels = amg_setup(A, config)

    def apply(self, r):
        return amg_vcycle(self.levels, r)


# ---------------------------------------------------------------------------
# CPR
# ---------------------------------------------------------------------------

class CprFpf:
    """Two-stage CPR: RAS smoothing around an AMG pressure correction.

    apply(f) runs exactly:
        x  = RAS(f)
        r  = f - A x
        x += P_p * AMG_vcycle(A_pp, R_p * r)
        r  = f - A x
        x += RAS(r)
    where R_p/P_p restrict to and prolong from the pressure rows of the
    decoupled system.
    """

    def __init__(self, A, labeling, overlap=1, amg_config=None):
        self.A = A
        self.ras = RAS(A, overlap=overlap)
        self.prows = labeling.pressure_rows
        if self.prows.size == 0:
            raise InputError("labeling has no pressure rows")
        G = A.to_scipy()
        App = G[self.prows][:, self.prows].tocsr()
        self.amg_levels = amg_setup(App, amg_config)

    def apply(self, f):
        x = self.ras.apply(f)
        r = f - self.A.matvec(x)
        x[self.prows] += amg_vcycle(self.amg_levels, r[self.prows])
        r = f - self.A.matvec(x)
        x = x + self.ras.apply(r)
        return x


def make_preconditioner(kind, A, labeling=None, overlap=1, amg_config=None):
    """Factory used by the Newton layer and the solve CLI."""
    if kind in (None, "none"):
        return None
    if kind == "ilu0":
        return ILU0(A.to_scipy() if isinstance(A, DistCsrMatrix) else A)
    if kind == "ras":
        return RAS(A, overlap=overlap)
    if kind == "amg":
        return AMG(A, config=amg_config)
    if kind == "cpr-fpf":
        if labeling is None:
            raise InputError("cpr-fpf needs a block labeling")
        return CprFpf(A, labeling, overlap=overlap, amg_config=amg_config)
    raise InputError(f"unknown preconditioner {kind!r}")
