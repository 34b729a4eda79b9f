"""Uniform axis-aligned partitions of boxes and the associated quantizer."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned interval box ``[lower, upper]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise ValueError(f"box bounds must be matching 1-D arrays, got {lo.shape} and {hi.shape}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo >= hi):
            raise ValueError(f"degenerate box: lower {lo} must be < upper {hi}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def from_pairs(cls, pairs) -> "Box":
        arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.widths))

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=-1)

    def clip(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def vertices(self) -> np.ndarray:
        corners = np.array(np.meshgrid(*zip(self.lower, self.upper), indexing="ij"))
        return corners.reshape(self.dim, -1).T

    def __eq__(self, other):
        if not isinstance(other, Box):
            return NotImplemented
        return np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper)

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes()))


@dataclass(frozen=True)
class Grid:
    """Uniform partition of ``box`` into ``cells_per_dim`` cells per axis.

    Cells are half-open ``[lo, hi)`` except the last cell of each axis,
    which also contains the upper face. Flat indices follow C order (last
    axis fastest). Representative points are cell centers.
    """

    box: Box
    cells_per_dim: tuple
    representative_rule: str = field(default="CellCenter")

    def __post_init__(self):
        cells = tuple(int(c) for c in np.atleast_1d(self.cells_per_dim))
        if len(cells) != self.box.dim:
            raise ValueError(f"need one cell count per dimension ({self.box.dim}), got {len(cells)}")
        if any(c < 1 for c in cells):
            raise ValueError(f"cells_per_dim must all be >= 1, got {cells}")
        if self.representative_rule != "CellCenter":
            raise ValueError(f"unsupported representative rule {self.representative_rule!r}")
        object.__setattr__(self, "cells_per_dim", cells)

    @property
    def dim(self) -> int:
        return self.box.dim

    @property
    def n_cells(self) -> int:
        return math.prod(self.cells_per_dim)

    @property
    def cell_widths(self) -> np.ndarray:
        return self.box.widths / np.asarray(self.cells_per_dim)

    @property
    def delta(self) -> float:
        """Euclidean diameter of one cell."""
        return float(np.linalg.norm(self.cell_widths))

    def edges(self, axis: int) -> np.ndarray:
        """Cell faces along ``axis`` (``cells + 1`` values)."""
        n = self.cells_per_dim[axis]
        lo, hi = self.box.lower[axis], self.box.upper[axis]
        e = lo + (hi - lo) * np.arange(n + 1) / n
        e[-1] = hi
        return e

    def axis_points(self, axis: int) -> np.ndarray:
        n = self.cells_per_dim[axis]
        return self.box.lower[axis] + (np.arange(n) + 0.5) * self.cell_widths[axis]

    def representatives(self) -> np.ndarray:
        """All representative points, shape ``(n_cells, dim)``, in flat-index order."""
        axes = [self.axis_points(a) for a in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def representative(self, index) -> np.ndarray:
        multi = np.stack(np.unravel_index(np.asarray(index), self.cells_per_dim), axis=-1)
        return self.box.lower + (multi + 0.5) * self.cell_widths

    def _as_points(self, x):
        x = np.asarray(x, dtype=float)
        # 1-D grids accept plain scalars / arrays of scalars
        scalar = self.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1)
        if scalar:
            x = x[..., None]
        if x.shape[-1] != self.dim:
            raise ValueError(f"points must have trailing dimension {self.dim}, got shape {x.shape}")
        if np.isnan(x).any():
            raise ValueError("NaN coordinates cannot be quantized")
        return x, scalar

    def quantize(self, x, extend: bool = False):
        """Map points to ``(flat cell index, representative point)``.

        Points outside the box are clamped to the nearest cell; use
        :meth:`contains` to flag them. With ``extend=True`` the lattice is
        continued beyond the box instead: the point is the center of the
        unbounded lattice cell and the index is ``-1`` outside the box.
        """
        x, scalar = self._as_points(x)
        cells = np.asarray(self.cells_per_dim)
        multi = np.floor((x - self.box.lower) / self.cell_widths).astype(np.int64)
        inside = np.all((multi >= 0) & (multi < cells), axis=-1)
        clipped = np.clip(multi, 0, cells - 1)
        if not extend:
            multi = clipped
        point = self.box.lower + (multi + 0.5) * self.cell_widths
        index = np.ravel_multi_index(tuple(np.moveaxis(clipped, -1, 0)), self.cells_per_dim)
        if extend:
            index = np.where(inside, index, -1)
        if scalar:
            point = point[..., 0]
        return index, point

    def cell_of(self, x):
        return self.quantize(x)[0]

    def contains(self, x) -> np.ndarray:
        x, _ = self._as_points(x)
        return self.box.contains(x)

    def to_dict(self) -> dict:
        return {
            "lower": self.box.lower.tolist(),
            "upper": self.box.upper.tolist(),
            "cells_per_dim": list(self.cells_per_dim),
        }

    @classmethod
    def from_dict(cls, d) -> "Grid":
        return cls(Box(d["lower"], d["upper"]), tuple(d["cells_per_dim"]))


def partition_box(box: Box, cells_per_dim) -> Grid:
    if not isinstance(box, Box):
        box = Box.from_pairs(box)
    cells = np.atleast_1d(cells_per_dim)
    if cells.size == 1 and box.dim > 1:
        cells = np.repeat(cells, box.dim)
    return Grid(box, tuple(int(c) for c in cells))


def grid_for_delta(box: Box, delta: float) -> Grid:
    """Finest-needed uniform grid whose cell diameter is at most ``delta``.

    Each axis gets width ``<= delta / sqrt(dim)``; the cell count is rounded up.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not isinstance(box, Box):
        box = Box.from_pairs(box)
    target = delta / math.sqrt(box.dim)
    # 1e-9 guard keeps exact ratios such as 2 / 0.005 from rounding up to 401
    cells = [max(1, math.ceil(w / target - 1e-9)) for w in box.widths]
    return Grid(box, tuple(cells))


def singleton_grid(point, widths) -> Grid:
    """One-cell grid centered on ``point``; used for nominal internal inputs."""
    point = np.atleast_1d(np.asarray(point, dtype=float))
    half = 0.5 * np.broadcast_to(np.asarray(widths, dtype=float), point.shape)
    return Grid(Box(point - half, point + half), (1,) * point.size)


def lattice_sum_grid(grids, coefficients) -> Grid:
    """Exact grid of all sums ``sum_j c_j * y_j`` with ``y_j`` a representative of ``grids[j]``.

    Only 1-D grids with a common cell width and binary coefficients are
    supported; in that case the sum set is itself a uniform lattice.
    """
    pairs = [(g, c) for g, c in zip(grids, coefficients) if c != 0]
    if not pairs:
        raise ValueError("coupling row has no nonzero entries")
    if any(g.dim != 1 for g, _ in pairs):
        raise ValueError("lattice construction needs 1-D output grids")
    if any(c != 1 for _, c in pairs):
        raise ValueError("lattice construction needs binary coupling coefficients; enumerate instead")
    w = pairs[0][0].cell_widths[0]
    if any(not math.isclose(g.cell_widths[0], w, rel_tol=1e-12) for g, _ in pairs):
        raise ValueError("lattice construction needs a common cell width")
    lo = sum(g.axis_points(0)[0] for g, _ in pairs)
    hi = sum(g.axis_points(0)[-1] for g, _ in pairs)
    count = int(round((hi - lo) / w)) + 1
    return Grid(Box([lo - w / 2], [lo - w / 2 + count * w]), (count,))
