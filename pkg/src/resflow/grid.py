"""Structured Cartesian grid, Hilbert-curve partitioning, and ghost plans.

Cells are indexed gid = i + nx*(j + ny*k) with i fastest, matching the order
array keywords use in deck files. Depth is positive downward; cell depth is
the cell-center depth. Workers own contiguous runs of the Hilbert ordering,
which keeps parts blocky and cheap to halo.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError

# face ids: 0:-x 1:+x 2:-y 3:+y 4:-z 5:+z
FACE_AXIS = (0, 0, 1, 1, 2, 2)
FACE_SIGN = (-1, +1, -1, +1, -1, +1)


class Grid:
    """Tensor-product Cartesian grid with per-row spacings.

    Parameters
    ----------
    nx, ny, nz : int
        Cell counts, all >= 1.
    dx, dy, dz : float or array
        Spacings per row in m; scalars broadcast.
    tops : float or array, optional
        Depth of the top face of layer k=0, scalar or one value per (i, j)
        column, m. Default 0.
    """

    def __init__(self, nx, ny, nz, dx, dy, dz, tops=0.0):
        if min(nx, ny, nz) < 1:
            raise InputError(f"grid dims must be >= 1, got {(nx, ny, nz)}")
        self.nx, self.ny, self.nz = int(nx), int(ny), int(nz)
        self.dx = _spacing(dx, self.nx, "dx")
        self.dy = _spacing(dy, self.ny, "dy")
        self.dz = _spacing(dz, self.nz, "dz")
        tops = np.asarray(tops, dtype=float)
        if tops.ndim == 0:
            tops = np.full(self.nx * self.ny, float(tops))
        elif tops.size != self.nx * self.ny:
            raise InputError("tops must be scalar or nx*ny values")
        self.tops = tops

        i, j, k = self.ijk(np.arange(self.num_cells))
        self.volume = self.dx[i] * self.dy[j] * self.dz[k]
        zcum = np.concatenate(([0.0], np.cumsum(self.dz)))
        self.depth = self.tops[i + self.nx * j] + zcum[k] + 0.5 * self.dz[k]

    @property
    def num_cells(self):
        return self.nx * self.ny * self.nz

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    def gid(self, i, j, k):
        return i + self.nx * (j + self.ny * k)

    def ijk(self, gid):
        gid = np.asarray(gid)
        i = gid % self.nx
        j = (gid // self.nx) % self.ny
        k = gid // (self.nx * self.ny)
        return i, j, k

    def neighbor(self, gid, face):
        """Neighboring gid across `face`, or -1 at the boundary."""
        i, j, k = (int(v) for v in self.ijk(gid))
        axis, sign = FACE_AXIS[face], FACE_SIGN[face]
        ijk = [i, j, k]
        ijk[axis] += sign
        if not (0 <= ijk[0] < self.nx and 0 <= ijk[1] < self.ny and 0 <= ijk[2] < self.nz):
            return -1
        return self.gid(*ijk)

    def face_area(self, gid, face):
        i, j, k = (int(v) for v in self.ijk(gid))
        axis = FACE_AXIS[face]
        if axis == 0:
            return self.dy[j] * self.dz[k]
        if axis == 1:
            return self.dx[i] * self.dz[k]
        return self.dx[i] * self.dy[j]

    def cell(self, gid):
        """Materialized per-cell view; the hot paths use the arrays instead."""
        gid = int(gid)
        if not 0 <= gid < self.num_cells:
            raise InputError(f"gid {gid} outside grid of {self.num_cells} cells")
        i, j, k = (int(v) for v in self.ijk(gid))
        neighbors = tuple(self.neighbor(gid, f) for f in range(6))
        return Cell(
            gid=gid,
            ijk=(i, j, k),
            size=(self.dx[i], self.dy[j], self.dz[k]),
            volume=float(self.volume[gid]),
            depth=float(self.depth[gid]),
            neighbors=neighbors,
            boundary=tuple(n < 0 for n in neighbors),
        )

    def interior_faces(self):
        """All interior faces as (a, b, axis) arrays, a < b in natural order.

        Ordered by axis then by the natural gid of the minus-side cell, so
        connection lists are reproducible.
        """
        nx, ny, nz = self.shape
        ids = np.arange(self.num_cells).reshape(nz, ny, nx)  # [k, j, i]
        pairs = []
        if nx > 1:
            a = ids[:, :, :-1].ravel()
            pairs.append((a, a + 1, np.zeros(a.size, dtype=np.int64)))
        if ny > 1:
            a = ids[:, :-1, :].ravel()
            pairs.append((a, a + nx, np.ones(a.size, dtype=np.int64)))
        if nz > 1:
            a = ids[:-1, :, :].ravel()
            pairs.append((a, a + nx * ny, np.full(a.size, 2, dtype=np.int64)))
        if not pairs:
            z = np.zeros(0, dtype=np.int64)
            return z, z.copy(), z.copy()
        a = np.concatenate([p[0] for p in pairs])
        b = np.concatenate([p[1] for p in pairs])
        ax = np.concatenate([p[2] for p in pairs])
        order = np.argsort(a + self.num_cells * ax, kind="stable")
        return a[order], b[order], ax[order]

    def face_areas_for(self, a, axis):
        """Vectorized face area between cell a and its +axis neighbor."""
        i, j, k = self.ijk(np.asarray(a))
        out = np.empty(np.asarray(a).shape, dtype=float)
        m = axis == 0
        out[m] = self.dy[j[m]] * self.dz[k[m]]
        m = axis == 1
        out[m] = self.dx[i[m]] * self.dz[k[m]]
        m = axis == 2
        out[m] = self.dx[i[m]] * self.dy[j[m]]
        return out


@dataclass(frozen=True)
class Cell:
    gid: int
    ijk: tuple
    size: tuple
    volume: float
    depth: float
    neighbors: tuple   # gid per face, -1 outside
    boundary: tuple    # True where the face is a no-flow exterior face


def _spacing(d, n, name):
    d = np.asarray(d, dtype=float)
    if d.ndim == 0:
        d = np.full(n, float(d))
    if d.shape != (n,):
        raise InputError(f"{name} must be scalar or length {n}")
    if np.any(d <= 0):
        raise InputError(f"{name} entries must be positive")
    return d


# ---------------------------------------------------------------------------
# Hilbert space-filling curve (Skilling's transpose algorithm)
# ---------------------------------------------------------------------------

def hilbert_order(shape):
    """Bits per axis of the smallest power-of-two cube enclosing `shape`."""
    m = max(int(s) for s in shape)
    return max(1, int(np.ceil(np.log2(m))) if m > 1 else 1)


def hilbert_index(ijk, order):
    """Hilbert index of one lattice point in a 2^order cube.

    Walks Skilling's transform: undo the excess work the Gray-code rotation
    would apply, Gray-encode, then interleave the transposed bit planes into
    a single integer with axis 0 carrying the most significant bit of each
    triple. Consecutive indices differ by one unit step in exactly one axis.
    """
    x = [int(v) for v in ijk]
    if any(v < 0 or v >> order for v in x):
        raise InputError(f"point {tuple(ijk)} outside 2^{order} cube")
    m = 1 << (order - 1)
    q = m
    while q > 1:
        p = q - 1
        for i in range(3):
            if x[i] & q:
                x[0] ^= p
            else:
                t = (x[0] ^ x[i]) & p
                x[0] ^= t
                x[i] ^= t
        q >>= 1
    x[1] ^= x[0]
    x[2] ^= x[1]
    t = 0
    q = m
    while q > 1:
        if x[2] & q:
            t ^= q - 1
        q >>= 1
    x = [v ^ t for v in x]

    h = 0
    for b in range(order - 1, -1, -1):
        for i in range(3):
            h = (h << 1) | ((x[i] >> b) & 1)
    return h


def hilbert_keys(grid):
    """Hilbert index for every cell, vectorized transcription of the scalar walk."""
    order = hilbert_order(grid.shape)
    i, j, k = grid.ijk(np.arange(grid.num_cells))
    x = [i.astype(np.int64), j.astype(np.int64), k.astype(np.int64)]
    m = 1 << (order - 1)
    q = m
    while q > 1:
        p = q - 1
        for i in range(3):
            cond = (x[i] & q) != 0
            t = (x[0] ^ x[i]) & p
            x0_new = np.where(cond, x[0] ^ p, x[0] ^ t)
            if i != 0:
                x[i] = np.where(cond, x[i], x[i] ^ t)
            x[0] = x0_new
        q >>= 1
    x[1] = x[1] ^ x[0]
    x[2] = x[2] ^ x[1]
    t = np.zeros_like(x[0])
    q = m
    while q > 1:
        t ^= np.where((x[2] & q) != 0, q - 1, 0)
        q >>= 1
    x = [v ^ t for v in x]

    h = np.zeros_like(x[0])
    for b in range(order - 1, -1, -1):
        for i in range(3):
            h = (h << 1) | ((x[i] >> b) & 1)
    return h


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

@dataclass
class Partition:
    """Assignment of cells to workers along the Hilbert curve.

    owner[gid] is the worker of each cell; parts[r] lists worker r's cells in
    curve order (this is also the per-worker unknown ordering); curve is the
    full grid in curve order.
    """

    num_workers: int
    owner: np.ndarray
    parts: list
    curve: np.ndarray

    def part_sizes(self):
        return np.array([p.size for p in self.parts])


def partition_grid(grid, num_workers):
    """Split the grid into `num_workers` contiguous Hilbert-curve chunks.

    Chunk sizes differ by at most one; the remainder cells go to the lowest
    ranks. Cells absent from the enclosing power-of-two cube are simply
    skipped, which preserves curve contiguity of what remains.
    """
    num_workers = int(num_workers)
    if num_workers < 1:
        raise InputError("num_workers must be >= 1")
    if num_workers > grid.num_cells:
        raise InputError(
            f"num_workers {num_workers} exceeds cell count {grid.num_cells}")
    keys = hilbert_keys(grid)
    curve = np.argsort(keys, kind="stable").astype(np.int64)

    n = grid.num_cells
    base, extra = divmod(n, num_workers)
    sizes = np.full(num_workers, base, dtype=np.int64)
    sizes[:extra] += 1
    bounds = np.concatenate(([0], np.cumsum(sizes)))

    owner = np.empty(n, dtype=np.int32)
    parts = []
    for r in range(num_workers):
        cells = curve[bounds[r]:bounds[r + 1]]
        parts.append(cells)
        owner[cells] = r
    return Partition(num_workers=num_workers, owner=owner, parts=parts, curve=curve)


@dataclass
class GhostPlan:
    """Per-worker halo exchange lists over grid faces (6-connectivity).

    recv[r][p] holds the cells worker r reads from peer p; send[r][p] holds
    the cells worker r owns that peer p reads. Both sides sorted by gid, so
    send[r][p] == recv[p][r] element for element.
    """

    recv: list
    send: list


def build_ghost_plan(grid, partition):
    a, b, _ = grid.interior_faces()
    oa, ob = partition.owner[a], partition.owner[b]
    cut = oa != ob
    a, b, oa, ob = a[cut], b[cut], oa[cut], ob[cut]

    nw = partition.num_workers
    recv = [dict() for _ in range(nw)]
    send = [dict() for _ in range(nw)]
    # each cut face contributes both directions
    need_from = np.concatenate([np.stack([oa, ob, b]), np.stack([ob, oa, a])], axis=1)
    for r, p, gid in need_from.T:
        recv[int(r)].setdefault(int(p), set()).add(int(gid))
    for r in range(nw):
        for p, cells in sorted(recv[r].items()):
            arr = np.array(sorted(cells), dtype=np.int64)
            recv[r][p] = arr
            send[p][r] = arr
    return GhostPlan(recv=recv, send=send)
