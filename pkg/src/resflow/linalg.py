"""Distributed vectors, CSR matrices, and Krylov solvers.

Rows and vector entries are distributed over workers in contiguous global
ranges (Layout). The execution model is logical: every worker's data lives in
one process and "communication" is array gathering, but all arithmetic is
organized per worker with rank-ordered reductions, so results are identical
to a message-passing run with the same partition and independent of timing.

Solvers stop on the true-system relative residual and verify converged exits
by recomputing b - A x without the preconditioner.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import DivergenceError, InputError


class Layout:
    """Contiguous ownership ranges: worker r owns [starts[r], starts[r+1])."""

    def __init__(self, starts):
        starts = np.asarray(starts, dtype=np.int64)
        if starts.ndim != 1 or starts.size < 2 or starts[0] != 0:
            raise InputError("starts must be [0, ...] cumulative bounds")
        if np.any(np.diff(starts) < 0):
            raise InputError("starts must be nondecreasing")
        self.starts = starts

    @classmethod
    def from_sizes(cls, sizes):
        return cls(np.concatenate(([0], np.cumsum(np.asarray(sizes, dtype=np.int64)))))

    @classmethod
    def trivial(cls, n, num_workers=1):
        base, extra = divmod(int(n), int(num_workers))
        sizes = np.full(num_workers, base, dtype=np.int64)
        sizes[:extra] += 1
        return cls.from_sizes(sizes)

    @property
    def num_workers(self):
        return len(self.starts) - 1

    @property
    def size(self):
        return int(self.starts[-1])

    def nlocal(self, r):
        return int(self.starts[r + 1] - self.starts[r])

    def owned(self, r):
        return slice(int(self.starts[r]), int(self.starts[r + 1]))

    def owner_of(self, gid):
        return int(np.searchsorted(self.starts, gid, side="right") - 1)


def ddot(layout, x, y):
    """Dot product as rank-ordered sum of per-worker partials.

    Deterministic for a fixed layout; changing the worker count reassociates
    the reduction, which is why cross-worker comparisons carry tolerances.
    """
    total = 0.0
    for r in range(layout.num_workers):
        s = layout.owned(r)
        total += float(np.dot(x[s], y[s]))
    return total


def norm2(layout, x):
    return np.sqrt(max(ddot(layout, x, x), 0.0))


def axpby(a, x, b, y):
    """z = a*x + b*y, purely local."""
    return a * x + b * y


def spmv_axpby(a, A, x, b, y):
    """z = a*(A x) + b*y with the matvec run worker by worker."""
    return a * A.matvec(x) + b * y


class DistVector:
    """Global vector with per-worker owned slices and ghost gathering.

    data holds the global array; local(r) views worker r's owned entries and
    local_with_ghosts(r, gcols) appends the ghost tail a matrix block needs,
    which is the [owned | ghost] local storage a message-passing worker would
    hold.
    """

    def __init__(self, layout, data=None):
        self.layout = layout
        if data is None:
            data = np.zeros(layout.size)
        data = np.asarray(data, dtype=float)
        if data.shape != (layout.size,):
            raise InputError(f"data must have shape ({layout.size},)")
        self.data = data

    def nlocal(self, r):
        return self.layout.nlocal(r)

    def local(self, r):
        return self.data[self.layout.owned(r)]

    def local_with_ghosts(self, r, ghost_gids):
        return np.concatenate([self.local(r), self.data[ghost_gids]])

    def copy(self):
        return DistVector(self.layout, self.data.copy())

    def dot(self, other):
        return ddot(self.layout, self.data, other.data)

    def norm2(self):
        return norm2(self.layout, self.data)


@dataclass
class _RowBlock:
    """One worker's rows: local CSR over [owned cols | ghost cols]."""

    csr: sp.csr_matrix
    gcols: np.ndarray        # global column id of every local column
    ghost_gids: np.ndarray   # global ids of the ghost tail (sorted)
    plan: dict               # peer -> global ids gathered from that peer


class DistCsrMatrix:
    """Square sparse matrix in distributed CSR form.

    Each worker holds its owned rows as a scipy CSR over a local column space
    [owned columns in global order | referenced off-worker columns, sorted],
    plus the communication plan saying which peer owns each ghost column.
    """

    def __init__(self, layout, blocks):
        self.layout = layout
        self.blocks = blocks

    @property
    def shape(self):
        return (self.layout.size, self.layout.size)

    @property
    def nnz(self):
        return sum(b.csr.nnz for b in self.blocks)

    @classmethod
    def from_coo(cls, layout, rows, cols, vals):
        """Build from global COO triplets; duplicate entries are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        n = layout.size
        if rows.size and (rows.min() < 0 or rows.max() >= n
                          or cols.min() < 0 or cols.max() >= n):
            raise InputError("COO indices outside the layout")
        order = np.argsort(rows, kind="stable")
        rows, cols, vals = rows[order], cols[order], vals[order]
        bounds = np.searchsorted(rows, layout.starts)
        blocks = []
        for r in range(layout.num_workers):
            lo, hi = bounds[r], bounds[r + 1]
            blocks.append(_make_block(layout, r, rows[lo:hi], cols[lo:hi], vals[lo:hi]))
        return cls(layout, blocks)

    @classmethod
    def from_scipy(cls, A, num_workers=1, layout=None):
        A = sp.coo_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise InputError("matrix must be square")
        if layout is None:
            layout = Layout.trivial(A.shape[0], num_workers)
        if layout.size != A.shape[0]:
            raise InputError("layout size does not match the matrix")
        return cls.from_coo(layout, A.row, A.col, A.data)

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        y = np.empty(self.layout.size)
        for r, blk in enumerate(self.blocks):
            xloc = np.concatenate([x[self.layout.owned(r)], x[blk.ghost_gids]])
            y[self.layout.owned(r)] = blk.csr @ xloc
        return y

    def to_scipy(self):
        """Assemble the global CSR (diagnostics, AMG setup, file output)."""
        parts = []
        for r, blk in enumerate(self.blocks):
            loc = blk.csr.tocoo()
            parts.append((loc.row + self.layout.starts[r], blk.gcols[loc.col], loc.data))
        rows = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, np.int64)
        cols = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, np.int64)
        vals = np.concatenate([p[2] for p in parts]) if parts else np.zeros(0)
        return sp.csr_matrix((vals, (rows, cols)), shape=self.shape)

    def diagonal(self):
        out = np.zeros(self.layout.size)
        for r, blk in enumerate(self.blocks):
            n = self.layout.nlocal(r)
            d = blk.csr[:, :n].diagonal()
            out[self.layout.owned(r)] = d
        return out


def _make_block(layout, r, rows, cols, vals):
    start = layout.starts[r]
    nown = layout.nlocal(r)
    owned_mask = (cols >= start) & (cols < start + nown)
    ghost_gids = np.unique(cols[~owned_mask])
    local_cols = np.where(
        owned_mask, cols - start,
        nown + np.searchsorted(ghost_gids, cols))
    csr = sp.coo_matrix(
        (vals, (rows - start, local_cols)),
        shape=(nown, nown + ghost_gids.size)).tocsr()
    csr.sum_duplicates()
    plan = {}
    if ghost_gids.size:
        owners = np.searchsorted(layout.starts, ghost_gids, side="right") - 1
        for p in np.unique(owners):
            plan[int(p)] = ghost_gids[owners == p]
    gcols = np.concatenate([np.arange(start, start + nown), ghost_gids])
    return _RowBlock(csr=csr, gcols=gcols, ghost_gids=ghost_gids, plan=plan)


# ---------------------------------------------------------------------------
# Matrix Market I/O
# ---------------------------------------------------------------------------

def write_matrix_market(path, A):
    if isinstance(A, DistCsrMatrix):
        A = A.to_scipy()
    # write through a file object; mmwrite would otherwise append .mtx
    with open(path, "wb") as f:
        scipy.io.mmwrite(f, sp.coo_matrix(A))


def read_matrix_market(path, num_workers=1):
    A = scipy.io.mmread(str(path))
    return DistCsrMatrix.from_scipy(A, num_workers=num_workers)


def write_vector(path, x):
    with open(path, "wb") as f:
        scipy.io.mmwrite(f, np.asarray(x, dtype=float).reshape(-1, 1))


def read_vector(path):
    return np.asarray(scipy.io.mmread(str(path))).ravel()


# ---------------------------------------------------------------------------
# Krylov solvers
# ---------------------------------------------------------------------------

@dataclass
class SolverConfig:
    method: str = "gmres"       # gmres | bicgstab | orthomin
    tol: float = 1e-6           # relative true-residual target
    maxit: int = 200
    restart: int = 30           # gmres cycle length
    korth: int = 5              # orthomin truncation depth
    fixed_iters: int = None     # run exactly this many iterations, ignore tol

    def __post_init__(self):
        if self.method not in ("gmres", "bicgstab", "orthomin"):
            raise InputError(f"unknown solver method {self.method!r}")
        if self.tol <= 0 or self.maxit < 1 or self.restart < 1 or self.korth < 1:
            raise InputError("solver config values out of range")
        if self.fixed_iters is not None and self.fixed_iters < 1:
            raise InputError("fixed_iters must be >= 1")


@dataclass
class SolveResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual_norms: list = field(default_factory=list)
    residual: np.ndarray = None  # recomputed b - A x at exit


class IdentityPreconditioner:
    def apply(self, r):
        return r


def solve(A, b, config, M=None, x0=None):
    """Dispatch to the configured Krylov method."""
    if M is None:
        M = IdentityPreconditioner()
    if x0 is None:
        x0 = np.zeros_like(b)
    if config.method == "gmres":
        return gmres(A, b, config, M, x0)
    if config.method == "bicgstab":
        return bicgstab(A, b, config, M, x0)
    return orthomin(A, b, config, M, x0)


def gmres(A, b, config, M=None, x0=None):
    """Restarted GMRES(m), right-preconditioned, Givens least squares.

    Right preconditioning keeps the Arnoldi residual estimate equal to the
    true-system residual, so the rotation recurrence drives the stopping
    test; the exit is still verified against a recomputed b - A x. In
    fixed-iteration mode exactly `fixed_iters` Arnoldi steps run regardless
    of the residual.
    """
    if M is None:
        M = IdentityPreconditioner()
    layout = A.layout
    x = np.zeros_like(b) if x0 is None else x0.copy()
    norm_b = norm2(layout, b)
    if norm_b == 0.0:
        return SolveResult(x=np.zeros_like(b), converged=True, iterations=0,
                           residual_norms=[0.0], residual=b.copy())
    budget = config.fixed_iters if config.fixed_iters is not None else config.maxit
    target = 0.0 if config.fixed_iters is not None else config.tol * norm_b
    m = config.restart
    history = []
    total = 0
    while True:
        r = b - A.matvec(x)
        beta = norm2(layout, r)
        if not history:
            history.append(beta)
        if beta == 0.0 or (config.fixed_iters is None and beta <= target):
            return SolveResult(x=x, converged=True, iterations=total,
                               residual_norms=history, residual=r)
        if total >= budget:
            ok = config.fixed_iters is not None or beta <= target
            return SolveResult(x=x, converged=ok, iterations=total,
                               residual_norms=history, residual=r)

        V = np.empty((m + 1, b.size))
        Z = np.empty((m, b.size))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        V[0] = r / beta
        g[0] = beta
        j = 0
        while j < m and total < budget:
            Z[j] = M.apply(V[j])
            w = A.matvec(Z[j])
            for i in range(j + 1):  # modified Gram-Schmidt
                H[i, j] = ddot(layout, w, V[i])
                w -= H[i, j] * V[i]
            H[j + 1, j] = norm2(layout, w)
            lucky = H[j + 1, j] < 1e-32
            if not lucky:
                V[j + 1] = w / H[j + 1, j]
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            rho = np.hypot(H[j, j], H[j + 1, j])
            cs[j], sn[j] = H[j, j] / rho, H[j + 1, j] / rho
            H[j, j] = rho
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            total += 1
            j += 1
            est = abs(g[j])
            history.append(est)
            if lucky or (config.fixed_iters is None and est <= target):
                break
        if j > 0:
            y = np.zeros(j)
            for i in range(j - 1, -1, -1):
                y[i] = (g[i] - H[i, i + 1:j] @ y[i + 1:j]) / H[i, i]
            x = x + y @ Z[:j]
        # loop back: recompute the true residual and re-test or exit


def bicgstab(A, b, config, M=None, x0=None):
    """Right-preconditioned BiCGSTAB with one rho-breakdown restart."""
    if config.fixed_iters is not None:
        # forcing steps past convergence collapses rho; refuse up front
        raise InputError("bicgstab has no fixed-iteration mode; use gmres or orthomin")
    if M is None:
        M = IdentityPreconditioner()
    layout = A.layout
    x = np.zeros_like(b) if x0 is None else x0.copy()
    norm_b = norm2(layout, b)
    if norm_b == 0.0:
        return SolveResult(x=np.zeros_like(b), converged=True, iterations=0,
                           residual_norms=[0.0], residual=b.copy())
    target = config.tol * norm_b
    r = b - A.matvec(x)
    r_hat = r.copy()
    rho_old = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    history = [norm2(layout, r)]
    restarted = False
    eps = np.finfo(float).eps
    it = 0
    while it < config.maxit:
        rho = ddot(layout, r_hat, r)
        if abs(rho) < eps * norm_b * norm_b:
            if restarted:
                raise DivergenceError(
                    f"bicgstab rho breakdown persisted after restart at it {it}")
            # restart with the current residual as the new shadow vector
            r = b - A.matvec(x)
            r_hat = r.copy()
            rho_old = alpha = omega = 1.0
            v[:] = 0.0
            p[:] = 0.0
            restarted = True
            continue
        beta = (rho / rho_old) * (alpha / omega)
        p = r + beta * (p - omega * v)
        y = M.apply(p)
        v = A.matvec(y)
        denom = ddot(layout, r_hat, v)
        if denom == 0.0:
            raise DivergenceError(f"bicgstab (r_hat, v) breakdown at it {it}")
        alpha = rho / denom
        s = r - alpha * v
        it += 1
        if norm2(layout, s) <= target:
            x = x + alpha * y
            res = b - A.matvec(x)
            history.append(norm2(layout, res))
            if history[-1] <= target:
                return SolveResult(x=x, converged=True, iterations=it,
                                   residual_norms=history, residual=res)
            r = res
            r_hat = res.copy()
            rho_old = alpha = omega = 1.0
            v[:] = 0.0
            p[:] = 0.0
            continue
        z = M.apply(s)
        t = A.matvec(z)
        tt = ddot(layout, t, t)
        if tt == 0.0:
            raise DivergenceError(f"bicgstab (t, t) breakdown at it {it}")
        omega = ddot(layout, t, s) / tt
        if omega == 0.0:
            raise DivergenceError(f"bicgstab omega breakdown at it {it}")
        x = x + alpha * y + omega * z
        r = s - omega * t
        rho_old = rho
        history.append(norm2(layout, r))
        if history[-1] <= target:
            res = b - A.matvec(x)
            if norm2(layout, res) <= target:
                return SolveResult(x=x, converged=True, iterations=it,
                                   residual_norms=history, residual=res)
            r = res
    res = b - A.matvec(x)
    return SolveResult(x=x, converged=norm2(layout, res) <= target,
                       iterations=it, residual_norms=history, residual=res)


def orthomin(A, b, config, M=None, x0=None):
    """Orthomin(k): truncated GCR keeping the last k direction pairs.

    Same stopping contract as gmres, including fixed-iteration mode.
    """
    if M is None:
        M = IdentityPreconditioner()
    layout = A.layout
    x = np.zeros_like(b) if x0 is None else x0.copy()
    norm_b = norm2(layout, b)
    if norm_b == 0.0:
        return SolveResult(x=np.zeros_like(b), converged=True, iterations=0,
                           residual_norms=[0.0], residual=b.copy())
    fixed = config.fixed_iters is not None
    budget = config.fixed_iters if fixed else config.maxit
    target = config.tol * norm_b
    r = b - A.matvec(x)
    history = [norm2(layout, r)]
    dirs = []  # (p, Ap, (Ap, Ap)) most recent last, at most k kept
    it = 0
    while it < budget:
        if history[-1] == 0.0:
            # exact zero: continuing would divide by (Ap, Ap) = 0
            return SolveResult(x=x, converged=True, iterations=it,
                               residual_norms=history, residual=b - A.matvec(x))
        if not fixed and history[-1] <= target:
            res = b - A.matvec(x)
            if norm2(layout, res) <= target:
                return SolveResult(x=x, converged=True, iterations=it,
                                   residual_norms=history, residual=res)
            r = res
            history[-1] = norm2(layout, res)
        z = M.apply(r)
        Az = A.matvec(z)
        p, Ap = z, Az
        for (pi, Api, denom) in dirs:
            beta = ddot(layout, Az, Api) / denom
            p = p - beta * pi
            Ap = Ap - beta * Api
        denom = ddot(layout, Ap, Ap)
        if denom == 0.0:
            raise DivergenceError(f"orthomin (Ap, Ap) breakdown at it {it}")
        alpha = ddot(layout, r, Ap) / denom
        x = x + alpha * p
        r = r - alpha * Ap
        dirs.append((p, Ap, denom))
        if len(dirs) > config.korth:
            dirs.pop(0)
        it += 1
        history.append(norm2(layout, r))
    res = b - A.matvec(x)
    ok = fixed or norm2(layout, res) <= target
    return SolveResult(x=x, converged=ok,
                       iterations=it, residual_norms=history, residual=res)
