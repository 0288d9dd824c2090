"""Uniform space-time grids, region indicators, and discrete operators.

The spatial domain is an axis-aligned box discretized with a uniform node
spacing; only interior nodes carry unknowns, since every field handled by
this package satisfies simply-supported conditions (value and Laplacian
vanish on the boundary).  Eliminating the boundary makes the discrete
Laplacian symmetric and lets the fourth-order operator be assembled as an
exact square, which downstream adjoint identities rely on.

Quadrature conventions:

* space: every interior node carries the uniform weight h (1-D) or h^2
  (2-D).  The discrete measure of a region is the sum of its node weights,
  which is what ``inner_product`` reports against.
* time: right-endpoint rule.  Level 0 has weight zero, levels 1..n_t carry
  dt.  This is the rule under which the implicit time steppers in
  :mod:`hierctrl.pde` are exactly dual to each other, so it is used for
  every space-time integral in the package.

All objects defined here are immutable after construction and safe to
share across threads or processes; assembly itself is single-threaded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

Interval = Sequence[float]
Region = Union[Sequence[float], Sequence[Sequence[float]]]

KNOWN_LABELS = ("omega", "omega1", "omega2", "Od", "omega_prime", "custom")


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform tensor grid on a box times a uniform partition of [0, T].

    Attributes:
        dim: spatial dimension, 1 or 2.
        n_x: interior nodes per axis (total nodes are n_x or n_x**2).
        h_x: node spacing; satisfies h_x * (n_x + 1) == axis length.
        n_t: number of time steps; fields live on n_t + 1 levels.
        dt: time step.  T is stored as dt * n_t so the identity is exact.
        domain: ((a, b),) in 1-D or ((ax, bx), (ay, by)) in 2-D.
    """

    dim: int
    n_x: int
    h_x: float
    n_t: int
    dt: float
    T: float
    domain: tuple
    coords: np.ndarray = field(repr=False, compare=False)
    times: np.ndarray = field(repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return self.n_x ** self.dim

    @property
    def node_weight(self) -> float:
        """Quadrature weight of a single interior node (h or h^2)."""
        return self.h_x ** self.dim

    @property
    def volume(self) -> float:
        """Discrete measure of the spatial domain: node_weight * n_nodes."""
        return self.node_weight * self.n_nodes

    def time_weights(self, window: Optional[Interval] = None) -> np.ndarray:
        """Right-endpoint weights over all n_t+1 levels, optionally windowed.

        A window (a, b) is snapped to the nearest grid levels; the levels
        strictly after the left edge up to and including the right edge
        carry weight dt.  Windows aligned with grid levels are therefore
        exactly additive.
        """
        w = np.full(self.n_t + 1, self.dt)
        w[0] = 0.0
        if window is not None:
            ka, kb = self.window_levels(window)
            w[: ka + 1] = 0.0
            w[kb + 1:] = 0.0
        return w

    def window_levels(self, window: Interval) -> tuple:
        """Snap a time window (a, b) to level indices (ka, kb)."""
        a, b = float(window[0]), float(window[1])
        ka = int(np.clip(np.round(a / self.dt), 0, self.n_t))
        kb = int(np.clip(np.round(b / self.dt), 0, self.n_t))
        if kb < ka:
            raise ValueError(f"empty time window {window!r}")
        return ka, kb

    def axis_nodes(self) -> np.ndarray:
        """Interior node coordinates along one axis."""
        a, b = self.domain[0]
        return a + self.h_x * np.arange(1, self.n_x + 1)

    def node_coords(self) -> np.ndarray:
        """(n_nodes, dim) array of interior node coordinates."""
        return self.coords


def build_grid(dim: int, n_x: int, n_t: int, T: float,
               domain: Optional[Region] = None) -> SpaceTimeGrid:
    """Construct a uniform grid.

    Args:
        dim: 1 or 2.
        n_x: interior nodes per axis, at least 3.
        n_t: time steps, at least 2.
        T: time horizon, positive.
        domain: (a, b) in 1-D or ((ax, bx), (ay, by)) in 2-D; defaults to
            the unit interval / unit square.
    """
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    if n_x < 3:
        raise ValueError(f"n_x must be >= 3, got {n_x}")
    if n_t < 2:
        raise ValueError(f"n_t must be >= 2, got {n_t}")
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")

    if domain is None:
        box = tuple(((0.0, 1.0),) * dim)
    else:
        arr = np.asarray(domain, dtype=float)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.shape != (dim, 2):
            raise ValueError(f"domain must give {dim} axis intervals")
        box = tuple((float(a), float(b)) for a, b in arr)
    lengths = [b - a for a, b in box]
    if min(lengths) <= 0:
        raise ValueError(f"degenerate domain {box}")
    if dim == 2 and abs(lengths[0] - lengths[1]) > 1e-12 * max(lengths):
        raise ValueError("2-D domains must be square (one n_x, one h_x)")

    h = lengths[0] / (n_x + 1)
    dt = T / n_t
    axis = [a + h * np.arange(1, n_x + 1) for a, _ in box]
    if dim == 1:
        coords = axis[0][:, None]
    else:
        # y varies fastest: node p = i * n_x + j at (x_i, y_j)
        X, Y = np.meshgrid(axis[0], axis[1], indexing="ij")
        coords = np.column_stack([X.ravel(), Y.ravel()])
    coords.setflags(write=False)
    times = dt * np.arange(n_t + 1)
    times.setflags(write=False)
    return SpaceTimeGrid(dim=dim, n_x=n_x, h_x=h, n_t=n_t, dt=dt,
                         T=float(dt * n_t), domain=box,
                         coords=coords, times=times)


@dataclass(frozen=True)
class RegionMask:
    """0/1 indicator over spatial nodes for a named subdomain."""

    indicator: np.ndarray
    label: str
    region: tuple = ()

    def __post_init__(self):
        if self.label not in KNOWN_LABELS:
            raise ValueError(f"unknown mask label {self.label!r}")
        self.indicator.setflags(write=False)

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.indicator))

    def measure(self, grid: SpaceTimeGrid) -> float:
        """Discrete measure: sum of node weights inside the region."""
        return grid.node_weight * float(self.indicator.sum())

    def disjoint_from(self, other: "RegionMask") -> bool:
        return not np.any((self.indicator > 0) & (other.indicator > 0))

    def intersects(self, other: "RegionMask") -> bool:
        return not self.disjoint_from(other)


def region_mask(grid: SpaceTimeGrid, region: Region, label: str = "custom") -> RegionMask:
    """Indicator of the nodes whose coordinates lie in the closed region.

    Raises if no interior node falls inside; the subdomains of interest
    are required to be nonempty.
    """
    arr = np.asarray(region, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape != (grid.dim, 2):
        raise ValueError(f"region must give {grid.dim} axis intervals, got {region!r}")
    coords = grid.node_coords()
    inside = np.ones(grid.n_nodes, dtype=bool)
    for ax in range(grid.dim):
        lo, hi = arr[ax]
        if hi <= lo:
            raise ValueError(f"degenerate region interval {arr[ax]}")
        inside &= (coords[:, ax] >= lo) & (coords[:, ax] <= hi)
    if not inside.any():
        raise ValueError(f"region {region!r} contains no interior grid node")
    return RegionMask(indicator=inside.astype(float), label=label,
                      region=tuple(map(tuple, arr)))


@dataclass(frozen=True)
class SparseOperator:
    """Square sparse operator over interior spatial nodes."""

    matrix: sp.csr_matrix
    symmetric: bool
    tag: str

    def __matmul__(self, other):
        if isinstance(other, SparseOperator):
            return self.matrix @ other.matrix
        return self.matrix @ other

    @property
    def shape(self):
        return self.matrix.shape

    def dump(self, path) -> None:
        """Debug dump in coordinate-list text form: row col value."""
        coo = self.matrix.tocoo()
        with open(path, "w") as fh:
            fh.write(f"# {self.tag} {coo.shape[0]}x{coo.shape[1]} nnz={coo.nnz}\n")
            for r, c, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{r} {c} {v:.17g}\n")


def _laplacian_1d(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, -2.0)
    off = np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / h ** 2


def dirichlet_laplacian(grid: SpaceTimeGrid) -> SparseOperator:
    """Second-order Laplacian with boundary rows eliminated.

    3-point stencil in 1-D, 5-point in 2-D, scaled 1/h^2.  Symmetric
    negative definite on the interior nodes.
    """
    L1 = _laplacian_1d(grid.n_x, grid.h_x)
    if grid.dim == 1:
        A = L1
    else:
        eye = sp.identity(grid.n_x, format="csr")
        A = sp.kron(L1, eye, format="csr") + sp.kron(eye, L1, format="csr")
    return SparseOperator(matrix=A.tocsr(), symmetric=True, tag="laplacian")


def bilaplacian(grid: SpaceTimeGrid) -> SparseOperator:
    """Fourth-order operator assembled as the exact square of the Laplacian.

    Under simply-supported conditions the biharmonic operator factorizes
    through the Dirichlet Laplacian, so B = A @ A entrywise.  B is
    symmetric positive definite.
    """
    A = dirichlet_laplacian(grid).matrix
    B = (A @ A).tocsr()
    B.sort_indices()
    return SparseOperator(matrix=B, symmetric=True, tag="bilaplacian")


@dataclass
class Field:
    """One scalar unknown sampled on all space-time nodes.

    values has shape (n_t + 1, n_nodes); level 0 is t = 0 and level n_t
    is t = T.
    """

    values: np.ndarray
    grid: SpaceTimeGrid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expect = (self.grid.n_t + 1, self.grid.n_nodes)
        if self.values.shape != expect:
            raise ValueError(f"field shape {self.values.shape} != {expect}")

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid) -> "Field":
        return cls(np.zeros((grid.n_t + 1, grid.n_nodes)), grid)

    @classmethod
    def from_function(cls, grid: SpaceTimeGrid, fn) -> "Field":
        """Sample fn(coords, t) on every time level."""
        vals = np.empty((grid.n_t + 1, grid.n_nodes))
        for k, t in enumerate(grid.times):
            vals[k] = fn(grid.node_coords(), t)
        return cls(vals, grid)

    def copy(self) -> "Field":
        return Field(self.values.copy(), self.grid)


def _field_values(f, grid: SpaceTimeGrid) -> np.ndarray:
    v = f.values if isinstance(f, Field) else np.asarray(f, dtype=float)
    if v.ndim == 1:
        if v.shape[0] != grid.n_nodes:
            raise ValueError("spatial array does not match the grid")
        return v
    if v.shape != (grid.n_t + 1, grid.n_nodes):
        raise ValueError("space-time array does not match the grid")
    return v


def inner_product(f, g, grid: SpaceTimeGrid,
                  mask: Optional[RegionMask] = None,
                  window: Optional[Interval] = None) -> float:
    """Quadrature-weighted product of two fields.

    Space-time inputs (n_t+1, n_nodes) are integrated over Q with the
    right-endpoint rule in time; a pair of spatial arrays (n_nodes,) is
    integrated over the domain at fixed time.  ``mask`` restricts the
    spatial sum, ``window`` the time levels.
    """
    fv = _field_values(f, grid)
    gv = _field_values(g, grid)
    if fv.shape != gv.shape:
        raise ValueError("fields live on different sample sets")
    w_nodes = np.full(grid.n_nodes, grid.node_weight)
    if mask is not None:
        if mask.indicator.shape[0] != grid.n_nodes:
            raise ValueError("mask does not match the grid")
        w_nodes = w_nodes * mask.indicator
    if fv.ndim == 1:
        if window is not None:
            raise ValueError("time window is meaningless for spatial arrays")
        return float(np.dot(fv * gv, w_nodes))
    wt = grid.time_weights(window)
    return float(wt @ ((fv * gv) @ w_nodes))


def spatial_norm(v: np.ndarray, grid: SpaceTimeGrid) -> float:
    """Discrete L2 norm of one or more stacked spatial arrays."""
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(grid.node_weight * np.sum(v * v)))
