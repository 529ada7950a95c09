"""Simplicial meshes of the spatial domain, uniform time grids and dof indexing.

Space-time coefficient vectors are stored time-major: the value at spatial
vertex ``i`` and time node ``j`` lives at ``j * N + i`` (see ``DofMap``), so a
vector reshaped to ``(M, N)`` has one row per time node.

Mesh text format (read by ``read_mesh``, written by ``write_mesh``)::

    # comment lines and blank lines are ignored
    dim N n_cells
    x_0 [y_0]            <- N coordinate lines, ``dim`` floats each
    ...
    v_0 v_1 [v_2]        <- n_cells lines, ``dim + 1`` 0-based vertex indices
    ...
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Invalid mesh or grid construction argument."""


@dataclass(frozen=True, eq=False)
class Mesh:
    dim: int
    vertices: np.ndarray  # (N, dim)
    cells: np.ndarray  # (n_cells, dim + 1)
    boundary: np.ndarray = field(init=False)  # (N,) bool
    boundary_facets: np.ndarray = field(init=False)  # (n_bf, dim), outward oriented in 2D
    h: float = field(init=False)

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=float)
        if vertices.ndim == 1:
            vertices = vertices[:, None]
        cells = np.asarray(self.cells, dtype=np.int64)
        if self.dim not in (1, 2):
            raise MeshError(f"dim must be 1 or 2, got {self.dim}")
        if vertices.shape[1] != self.dim or cells.ndim != 2 or cells.shape[1] != self.dim + 1:
            raise MeshError("vertex/cell arrays do not match the mesh dimension")
        if cells.min() < 0 or cells.max() >= len(vertices):
            raise MeshError("cell vertex index out of range")
        if any(len(set(c)) != self.dim + 1 for c in cells.tolist()):
            raise MeshError("cell with repeated vertex")
        # orient every cell positively
        vol = _signed_measures(vertices, cells)
        if np.any(np.abs(vol) <= 1e-14 * np.max(np.abs(vol))):
            raise MeshError("degenerate cell")
        flip = vol < 0
        if np.any(flip):
            cells = cells.copy()
            cells[flip, :2] = cells[flip, 1::-1]
        facets = _boundary_facets(self.dim, cells)
        boundary = np.zeros(len(vertices), dtype=bool)
        boundary[facets.ravel()] = True
        diam = _cell_diameters(vertices, cells)
        for name, value in [("vertices", vertices), ("cells", cells)]:
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        boundary.setflags(write=False)
        object.__setattr__(self, "boundary", boundary)
        object.__setattr__(self, "boundary_facets", facets)
        object.__setattr__(self, "h", float(diam.max()))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def cell_measures(self) -> np.ndarray:
        return _signed_measures(self.vertices, self.cells)

    def volume(self) -> float:
        return float(self.cell_measures().sum())

    def bounding_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    T: float
    M: int
    nodes: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.T > 0:
            raise MeshError(f"final time must be positive, got {self.T}")
        if self.M < 2:
            raise MeshError(f"time grid needs at least 2 nodes, got {self.M}")
        nodes = np.linspace(0.0, self.T, self.M)
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def dt(self) -> float:
        return self.T / (self.M - 1)


@dataclass(frozen=True)
class DofMap:
    """Index map between (spatial vertex i, time node j) and flat positions.

    Every spatial vertex, boundary vertices included, is a dof of the spatial
    space; the constraint on u at (i, j) pairs with w at i.
    """

    N: int
    M: int

    @property
    def spatial_dofs(self) -> int:
        return self.N

    @property
    def spacetime_dofs(self) -> int:
        return self.M * self.N

    def flatten(self, i, j):
        i = np.asarray(i)
        j = np.asarray(j)
        if np.any((i < 0) | (i >= self.N) | (j < 0) | (j >= self.M)):
            raise IndexError("dof pair out of range")
        return j * self.N + i

    def unflatten(self, k):
        k = np.asarray(k)
        if np.any((k < 0) | (k >= self.M * self.N)):
            raise IndexError("flat index out of range")
        return k % self.N, k // self.N

    def constraint_partner(self, k):
        """Spatial index of the w-entry bounding the u-entry at flat index k."""
        return self.unflatten(k)[0]


def build_interval_mesh(a: float, b: float, N: int) -> Mesh:
    if N < 2:
        raise MeshError(f"interval mesh needs N >= 2 vertices, got {N}")
    if not a < b:
        raise MeshError(f"empty interval ({a}, {b})")
    x = np.linspace(a, b, N)
    cells = np.column_stack([np.arange(N - 1), np.arange(1, N)])
    return Mesh(1, x[:, None], cells)


def build_square_mesh(side=(-1.0, 1.0), n_per_side: int = 2, pattern: str = "unionjack") -> Mesh:
    """Structured triangulation of ``side x side`` with ``n_per_side**2`` vertices.

    Each grid square is cut along one diagonal.  ``pattern="unionjack"``
    alternates the diagonal direction in a checkerboard, ``"right"`` always
    uses the same one.
    """
    if n_per_side < 2:
        raise MeshError(f"square mesh needs n_per_side >= 2, got {n_per_side}")
    a, b = side
    if not a < b:
        raise MeshError(f"empty side interval ({a}, {b})")
    n = n_per_side
    x = np.linspace(a, b, n)
    X, Y = np.meshgrid(x, x)  # vertex (ix, iy) -> iy * n + ix
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    cells = []
    for iy in range(n - 1):
        for ix in range(n - 1):
            v00 = iy * n + ix
            v10, v01, v11 = v00 + 1, v00 + n, v00 + n + 1
            flip = pattern == "unionjack" and (ix + iy) % 2 == 1
            if pattern not in ("unionjack", "right"):
                raise MeshError(f"unknown square mesh pattern {pattern!r}")
            if flip:
                cells += [(v00, v10, v01), (v10, v11, v01)]
            else:
                cells += [(v00, v10, v11), (v00, v11, v01)]
    return Mesh(2, vertices, np.array(cells))


def build_time_grid(T: float, M: int) -> TimeGrid:
    return TimeGrid(float(T), int(M))


def read_mesh(path) -> Mesh:
    lines = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    if not lines:
        raise MeshError(f"{path}: empty mesh file")
    try:
        dim, n, n_cells = (int(v) for v in lines[0].split())
    except ValueError as exc:
        raise MeshError(f"{path}: bad header {lines[0]!r}, expected 'dim N n_cells'") from exc
    if len(lines) != 1 + n + n_cells:
        raise MeshError(f"{path}: expected {n} vertex and {n_cells} cell lines, got {len(lines) - 1} lines")
    vertices = np.array([[float(v) for v in ln.split()] for ln in lines[1:1 + n]])
    cells = np.array([[int(v) for v in ln.split()] for ln in lines[1 + n:]], dtype=np.int64)
    return Mesh(dim, vertices.reshape(n, dim), cells.reshape(n_cells, dim + 1))


def write_mesh(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{mesh.dim} {mesh.n_vertices} {mesh.n_cells}\n")
        for v in mesh.vertices:
            fh.write(" ".join(repr(float(c)) for c in v) + "\n")
        for c in mesh.cells:
            fh.write(" ".join(str(int(i)) for i in c) + "\n")


def _signed_measures(vertices, cells):
    if cells.shape[1] == 2:
        return vertices[cells[:, 1], 0] - vertices[cells[:, 0], 0]
    p0, p1, p2 = (vertices[cells[:, k]] for k in range(3))
    e1, e2 = p1 - p0, p2 - p0
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def _cell_diameters(vertices, cells):
    k = cells.shape[1]
    diam = np.zeros(len(cells))
    for a in range(k):
        for b in range(a + 1, k):
            d = np.linalg.norm(vertices[cells[:, a]] - vertices[cells[:, b]], axis=1)
            diam = np.maximum(diam, d)
    return diam


def _boundary_facets(dim, cells):
    """Facets owned by a single cell; 2D edges are returned counter-clockwise
    with respect to the owning (positively oriented) triangle."""
    if dim == 1:
        counts = np.bincount(cells.ravel())
        ends = np.flatnonzero(counts == 1)
        return ends[:, None]
    edges = np.concatenate([cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [2, 0]]])
    key = np.sort(edges, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    return edges[counts[inverse] == 1]
