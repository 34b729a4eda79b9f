"""Finite MDP abstraction of a linear Gaussian subsystem.

Every abstract state, external input and internal input triple gets one
probability row over the state cells plus an absorbing sink that collects the
Gaussian mass leaving the state box.
"""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr

from .grid import Box, Grid
from .model import LinearSubsystem

DROP_TOL = 1e-12
DEFAULT_MC_SAMPLES = 100_000
MAX_ENTRIES = 200_000_000

_MAGIC = b"CMDPBIN\0"
_VERSION = 1


class AbstractionTooLarge(MemoryError):
    pass


def interval_mass(a, b) -> np.ndarray:
    """Standard normal mass of ``[a, b]`` (elementwise, ``a <= b``).

    Uses the tail on the far side of zero to avoid cancellation.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    upper_side = a >= 0
    m = np.where(upper_side, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))
    return np.clip(m, 0.0, 1.0)


def noise_std(sys: LinearSubsystem):
    """Per-coordinate noise standard deviation, or ``None`` if components correlate."""
    cov = sys.N @ sys.N.T
    off = cov - np.diag(np.diag(cov))
    if np.max(np.abs(off), initial=0.0) > 1e-14 * max(1.0, np.max(np.abs(cov))):
        return None
    return np.sqrt(np.diag(cov))


def _axis_masses(mean_a, std_a, edges) -> np.ndarray:
    """Mass of each cell along one axis for a batch of means, shape ``(R, cells)``."""
    if std_a == 0.0:
        n = edges.size - 1
        idx = np.searchsorted(edges, mean_a, side="right") - 1
        idx = np.where(mean_a == edges[-1], n - 1, idx)
        out = np.zeros((mean_a.size, n))
        ok = (idx >= 0) & (idx < n)
        out[np.nonzero(ok)[0], idx[ok]] = 1.0
        return out
    z = (edges[None, :] - mean_a[:, None]) / std_a
    return interval_mass(z[:, :-1], z[:, 1:])


def gaussian_cell_masses(means, std, grid: Grid) -> np.ndarray:
    """In-box cell probabilities for Gaussians with independent coordinates.

    ``means`` has shape ``(R, dim)``; the result has shape ``(R, n_cells)``
    in the grid's flat order.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    out = None
    for a in range(grid.dim):
        m = _axis_masses(means[:, a], float(std[a]), grid.edges(a))
        out = m if out is None else (out[:, :, None] * m[:, None, :]).reshape(means.shape[0], -1)
    return out


def _mc_cell_masses(means, sys: LinearSubsystem, grid: Grid, samples: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((samples, sys.r)) @ sys.N.T
    out = np.zeros((means.shape[0], grid.n_cells))
    for i, mu in enumerate(means):
        pts = mu + noise
        inside = grid.contains(pts)
        idx = grid.cell_of(pts[inside])
        out[i] = np.bincount(idx, minlength=grid.n_cells) / samples
    return out


def transition_row(sys: LinearSubsystem, x_hat, nu_hat, w_hat, state_grid: Grid, *,
                   mc_samples: int = DEFAULT_MC_SAMPLES, seed: int = 0) -> np.ndarray:
    """Probability row over ``state_grid`` cells followed by the sink entry."""
    mean = sys.mean_next(np.atleast_1d(x_hat), np.atleast_1d(nu_hat), np.atleast_1d(w_hat))
    std = noise_std(sys)
    if std is None:
        masses = _mc_cell_masses(mean[None, :], sys, state_grid, mc_samples, seed)[0]
    else:
        masses = gaussian_cell_masses(mean[None, :], std, state_grid)[0]
    return np.append(masses, max(0.0, 1.0 - masses.sum()))


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    """Finite abstraction with ``n_states`` cells plus one absorbing sink.

    ``transitions`` is a CSR matrix with ``(n_states + 1) * n_inputs *
    n_internal`` rows and ``n_states + 1`` columns; row ``(s * U + u) * W + w``
    holds the distribution of the successor of ``(s, u, w)``. The sink is
    state index ``n_states``.
    """

    transitions: sp.csr_matrix
    n_states: int
    n_inputs: int
    n_internal: int
    state_grid: Grid = None
    input_grid: Grid = None
    internal_grid: Grid = None

    def __post_init__(self):
        rows = (self.n_states + 1) * self.n_inputs * self.n_internal
        if self.transitions.shape != (rows, self.n_states + 1):
            raise ValueError(
                f"transition matrix shape {self.transitions.shape} does not match "
                f"({rows}, {self.n_states + 1})"
            )

    @property
    def sink_index(self) -> int:
        return self.n_states

    def row_index(self, s, u, w):
        return (np.asarray(s) * self.n_inputs + np.asarray(u)) * self.n_internal + np.asarray(w)

    def row(self, s: int, u: int, w: int) -> np.ndarray:
        return self.transitions[int(self.row_index(s, u, w))].toarray().ravel()

    def dense(self) -> np.ndarray:
        """Dense tensor of shape ``(S + 1, U, W, S + 1)``; for small models only."""
        S = self.n_states + 1
        return self.transitions.toarray().reshape(S, self.n_inputs, self.n_internal, S)

    def restrict_internal(self, w: int) -> "FiniteMdp":
        """Sub-MDP keeping a single internal input index."""
        S = self.n_states + 1
        rows = self.row_index(np.arange(S)[:, None], np.arange(self.n_inputs)[None, :], w).ravel()
        grid = None
        if self.internal_grid is not None:
            from .grid import singleton_grid

            grid = singleton_grid(self.internal_grid.representative(w), self.internal_grid.cell_widths)
        return FiniteMdp(self.transitions[rows].tocsr(), self.n_states, self.n_inputs, 1,
                         self.state_grid, self.input_grid, grid)

    @classmethod
    def from_dense(cls, T, **grids) -> "FiniteMdp":
        """Build from a dense tensor ``(S, U, W, S + 1)`` or ``(S + 1, U, W, S + 1)``.

        When only the ``S`` non-sink blocks are given, absorbing sink rows are
        appended.
        """
        T = np.asarray(T, dtype=float)
        n_cols = T.shape[-1]
        S = n_cols - 1
        if T.shape[0] == S:
            sink = np.zeros((1,) + T.shape[1:])
            sink[..., S] = 1.0
            T = np.concatenate([T, sink], axis=0)
        if T.shape[0] != S + 1:
            raise ValueError(f"tensor shape {T.shape} is not (S or S+1, U, W, S+1)")
        U, W = T.shape[1], T.shape[2]
        return cls(sp.csr_matrix(T.reshape(-1, S + 1)), S, U, W, **grids)


def _estimate_row_support(std, grid: Grid) -> int:
    if std is None:
        return grid.n_cells + 1
    support = 1
    for a in range(grid.dim):
        w = grid.cell_widths[a]
        # beyond 7.5 standard deviations the tail mass is below the drop tolerance
        support *= min(grid.cells_per_dim[a], math.ceil(15.0 * std[a] / w) + 2)
    return support + 1


def abstract_subsystem(sys: LinearSubsystem, state_grid: Grid, input_grid: Grid, internal_grid: Grid, *,
                       drop_tol: float = DROP_TOL, max_entries: int = MAX_ENTRIES, threads: int = 1,
                       mc_samples: int = DEFAULT_MC_SAMPLES, seed: int = 0) -> FiniteMdp:
    """Build the finite MDP of ``sys`` on the given grids.

    Rows are evaluated at grid representatives; entries below ``drop_tol``
    are dropped and their mass moved to the sink.
    """
    for grid, dim, name in ((state_grid, sys.n, "state"), (input_grid, sys.m, "input"),
                            (internal_grid, sys.p, "internal")):
        if grid.dim != dim:
            raise ValueError(f"{name} grid has dimension {grid.dim}, subsystem needs {dim}")
    S, U, W = state_grid.n_cells, input_grid.n_cells, internal_grid.n_cells
    std = noise_std(sys)
    n_rows = S * U * W
    estimate = n_rows * _estimate_row_support(std, state_grid)
    if estimate > max_entries:
        raise AbstractionTooLarge(
            f"abstraction needs {S} states x {U} inputs x {W} internal inputs = {n_rows} rows, "
            f"about {estimate} stored entries (budget {max_entries})"
        )

    xs = state_grid.representatives()
    us = input_grid.representatives()
    ws = internal_grid.representatives()
    per_state = U * W
    chunk = max(1, int(4_000_000 // max(1, per_state * (S + 1))))

    def build(start: int) -> sp.csr_matrix:
        stop = min(S, start + chunk)
        x = np.repeat(xs[start:stop], per_state, axis=0)
        u = np.tile(np.repeat(us, W, axis=0), (stop - start, 1))
        w = np.tile(ws, ((stop - start) * U, 1))
        means = sys.mean_next(x, u, w)
        if std is None:
            block = _mc_cell_masses(means, sys, state_grid, mc_samples, seed)
        else:
            block = gaussian_cell_masses(means, std, state_grid)
        block[block < drop_tol] = 0.0
        sink = np.clip(1.0 - block.sum(axis=1), 0.0, 1.0)
        sink[sink < drop_tol] = 0.0
        return sp.csr_matrix(np.column_stack([block, sink]))

    starts = range(0, S, chunk)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(build, starts))
    else:
        blocks = [build(s) for s in starts]
    sink_rows = sp.csr_matrix(
        (np.ones(per_state), (np.arange(per_state), np.full(per_state, S))), shape=(per_state, S + 1)
    )
    T = sp.vstack(blocks + [sink_rows], format="csr")
    T.sort_indices()
    return FiniteMdp(T, S, U, W, state_grid, input_grid, internal_grid)


@dataclass(frozen=True)
class StochasticityReport:
    n_rows: int
    max_row_deviation: float
    min_entry: float
    max_entry: float
    sink_mass_mean: float
    sink_mass_max: float
    sink_absorbing: bool
    bad_rows: np.ndarray

    @property
    def ok(self) -> bool:
        return (self.max_row_deviation <= 1e-9 and self.min_entry >= 0.0 and self.max_entry <= 1.0
                and self.sink_absorbing)


def validate_stochastic(mdp: FiniteMdp, tol: float = 1e-9) -> StochasticityReport:
    T = mdp.transitions
    sums = np.asarray(T.sum(axis=1)).ravel()
    dev = np.abs(sums - 1.0)
    data = T.data
    S = mdp.n_states
    per_state = mdp.n_inputs * mdp.n_internal
    sink_col = np.asarray(T[:, S].toarray()).ravel()
    live = sink_col[: S * per_state]
    sink_block = T[S * per_state:]
    absorbing = bool(np.allclose(sink_block[:, S].toarray(), 1.0) and sink_block.nnz == per_state)
    return StochasticityReport(
        n_rows=T.shape[0],
        max_row_deviation=float(dev.max(initial=0.0)),
        min_entry=float(data.min(initial=0.0)),
        max_entry=float(data.max(initial=0.0)),
        sink_mass_mean=float(live.mean()) if live.size else 0.0,
        sink_mass_max=float(live.max(initial=0.0)),
        sink_absorbing=absorbing,
        bad_rows=np.nonzero((dev > tol) | _rows_with(T, lambda d: (d < 0) | (d > 1)))[0],
    )


def _rows_with(T: sp.csr_matrix, pred) -> np.ndarray:
    bad = pred(T.data)
    rows = np.repeat(np.arange(T.shape[0]), np.diff(T.indptr))
    out = np.zeros(T.shape[0], dtype=bool)
    out[rows[bad]] = True
    return out


def _pack_grid(grid: Grid) -> bytes:
    d = grid.dim
    return (struct.pack("<I", d) + grid.box.lower.astype("<f8").tobytes()
            + grid.box.upper.astype("<f8").tobytes()
            + np.asarray(grid.cells_per_dim, dtype="<u8").tobytes())


def _unpack_grid(buf: memoryview, pos: int):
    (d,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    lo = np.frombuffer(buf, "<f8", d, pos); pos += 8 * d
    hi = np.frombuffer(buf, "<f8", d, pos); pos += 8 * d
    cells = np.frombuffer(buf, "<u8", d, pos); pos += 8 * d
    return Grid(Box(lo, hi), tuple(int(c) for c in cells)), pos


def dump_mdp(mdp: FiniteMdp, path) -> None:
    """Write ``mdp`` in the versioned little-endian binary format.

    Layout: magic, u32 version, u32 flags (bit 0: grids present),
    u64 S, U, W, nnz, optional three grids, then u64 indptr, u64 indices
    and f64 probabilities.
    """
    T = mdp.transitions.tocsr()
    grids = (mdp.state_grid, mdp.input_grid, mdp.internal_grid)
    has_grids = all(g is not None for g in grids)
    parts = [_MAGIC, struct.pack("<II", _VERSION, int(has_grids)),
             struct.pack("<QQQQ", mdp.n_states, mdp.n_inputs, mdp.n_internal, T.nnz)]
    if has_grids:
        parts += [_pack_grid(g) for g in grids]
    parts += [T.indptr.astype("<u8").tobytes(), T.indices.astype("<u8").tobytes(),
              T.data.astype("<f8").tobytes()]
    with open(path, "wb") as fh:
        for p in parts:
            fh.write(p)


def load_mdp(path) -> FiniteMdp:
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = memoryview(raw)
    if bytes(buf[:8]) != _MAGIC:
        raise ValueError(f"{path}: not a finite-MDP dump")
    version, flags = struct.unpack_from("<II", buf, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported dump version {version}")
    S, U, W, nnz = struct.unpack_from("<QQQQ", buf, 16)
    pos = 48
    grids = {}
    if flags & 1:
        for key in ("state_grid", "input_grid", "internal_grid"):
            grids[key], pos = _unpack_grid(buf, pos)
    n_rows = (S + 1) * U * W
    indptr = np.frombuffer(buf, "<u8", n_rows + 1, pos).astype(np.int64); pos += 8 * (n_rows + 1)
    indices = np.frombuffer(buf, "<u8", nnz, pos).astype(np.int64); pos += 8 * nnz
    data = np.frombuffer(buf, "<f8", nnz, pos).copy()
    T = sp.csr_matrix((data, indices, indptr), shape=(n_rows, S + 1))
    return FiniteMdp(T, S, U, W, **grids)
