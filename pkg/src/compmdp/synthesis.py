"""Finite-horizon safety synthesis on a subsystem MDP and policy refinement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .certificate import StorageCertificate, interface
from .grid import Grid
from .mdp import FiniteMdp

MODES = ("robust", "nominal")


@dataclass
class Policy:
    """Time-varying abstract policy.

    ``table[k, s, w]`` is the input index at step ``k`` (``w`` has length 1
    in both modes: robust policies ignore the internal input and nominal
    ones only know ``w0``). ``values[k, s]`` is the safety probability with
    ``Td - k`` steps to go; column ``S`` is the sink.
    """

    horizon: int
    table: np.ndarray
    values: np.ndarray
    mode: str
    nominal_internal: int = None
    state_grid: Grid = None
    input_grid: Grid = None
    internal_grid: Grid = None

    @property
    def n_states(self) -> int:
        return self.table.shape[1]

    def action(self, k, s, w=None) -> np.ndarray:
        if not 0 <= k < self.horizon:
            raise IndexError(f"time index {k} outside horizon {self.horizon}")
        return self.table[k, np.asarray(s), 0]

    def stationary(self) -> "Policy":
        """Repeat the step-0 row over the whole horizon."""
        table = np.repeat(self.table[:1], self.horizon, axis=0)
        return Policy(self.horizon, table, self.values, self.mode, self.nominal_internal,
                      self.state_grid, self.input_grid, self.internal_grid)

    def save(self, path) -> None:
        np.savez_compressed(path, horizon=self.horizon, table=self.table, values=self.values, mode=self.mode,
                            nominal_internal=-1 if self.nominal_internal is None else self.nominal_internal)

    @classmethod
    def load(cls, path, state_grid=None, input_grid=None, internal_grid=None) -> "Policy":
        with np.load(path) as z:
            w0 = int(z["nominal_internal"])
            return cls(int(z["horizon"]), z["table"], z["values"], str(z["mode"]), None if w0 < 0 else w0,
                       state_grid, input_grid, internal_grid)


def _safe_mask(mdp: FiniteMdp, safe) -> np.ndarray:
    S = mdp.n_states
    if safe is None:
        mask = np.ones(S, dtype=bool)
    elif callable(safe):
        if mdp.state_grid is None:
            raise ValueError("a safe-set predicate needs the MDP's state grid")
        mask = np.asarray(safe(mdp.state_grid.representatives()), dtype=bool).reshape(S)
    else:
        mask = np.asarray(safe, dtype=bool).reshape(S)
    if not mask.any():
        raise ValueError("safe set is empty")
    return mask


def safety_value_iteration(mdp: FiniteMdp, Td: int, mode: str = "robust", nominal_internal: int = None,
                           safe=None) -> Policy:
    """Backward recursion for the probability of staying in ``safe`` for ``Td`` steps.

    ``mode="robust"`` takes the worst internal input for each candidate
    action; ``mode="nominal"`` evaluates at internal index
    ``nominal_internal``. Ties go to the lowest input index.
    """
    if Td < 1:
        raise ValueError("Td must be at least 1")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    S, U, W = mdp.n_states, mdp.n_inputs, mdp.n_internal
    if mode == "nominal":
        if nominal_internal is None or not 0 <= nominal_internal < W:
            raise ValueError(f"nominal mode needs an internal index in [0, {W}), got {nominal_internal}")
    mask = _safe_mask(mdp, safe)

    T = mdp.transitions[: S * U * W]
    values = np.zeros((Td + 1, S + 1))
    values[Td, :S] = mask
    table = np.zeros((Td, S, 1), dtype=np.int64)
    for k in range(Td - 1, -1, -1):
        q = (T @ values[k + 1]).reshape(S, U, W)
        q = q.min(axis=2) if mode == "robust" else q[:, :, nominal_internal]
        best = np.argmax(q, axis=1)
        table[k, :, 0] = best
        values[k, :S] = np.where(mask, q[np.arange(S), best], 0.0)
    np.clip(values, 0.0, 1.0, out=values)
    return Policy(Td, table, values, mode, nominal_internal, mdp.state_grid, mdp.input_grid, mdp.internal_grid)


def nominal_index(internal_grid: Grid, point) -> int:
    """Internal-grid index of the cell holding ``point``."""
    if not np.all(internal_grid.contains(point)):
        raise ValueError(f"nominal internal input {point} lies outside the internal grid")
    return int(internal_grid.quantize(point)[0])


class RefinedController:
    """Concrete controller obtained from an abstract policy through the interface map."""

    def __init__(self, policy: Policy, state_grid: Grid, input_grid: Grid, K, input_box=None):
        if policy.table.shape[1] != state_grid.n_cells:
            raise ValueError("policy and state grid disagree on the number of cells")
        self.policy = policy
        self.state_grid = state_grid
        self.input_points = input_grid.representatives()
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self.input_box = input_box

    @property
    def horizon(self) -> int:
        return self.policy.horizon

    def abstract_input(self, k: int, s) -> np.ndarray:
        """Input representatives for abstract state indices ``s`` (batched)."""
        return self.input_points[self.policy.action(k, s)]

    def coupled(self, k: int, x, s):
        """``(nu, nu_hat)`` when the abstract state index ``s`` is tracked alongside ``x``."""
        s = np.asarray(s)
        x_hat = self.state_grid.representative(s)
        nu_hat = self.abstract_input(k, s)
        return interface(self.K, x, x_hat, nu_hat, self.input_box), nu_hat

    def __call__(self, k: int, x, w=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        s, x_hat = self.state_grid.quantize(x)
        nu_hat = self.abstract_input(k, s)
        if self.state_grid.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            nu_hat = nu_hat[..., 0] if nu_hat.shape[-1] == 1 else nu_hat
        return interface(self.K, x, x_hat, nu_hat, self.input_box)


def refine_policy(policy: Policy, state_grid: Grid = None, input_grid: Grid = None,
                  cert: StorageCertificate = None, K=None, input_box=None) -> RefinedController:
    """Controller ``(k, x) -> K (x - x_hat) + table(k, x_hat)``."""
    state_grid = state_grid or policy.state_grid
    input_grid = input_grid or policy.input_grid
    if state_grid is None or input_grid is None:
        raise ValueError("refinement needs the state and input grids")
    if K is None:
        K = cert.K if cert is not None else np.zeros((input_grid.dim, state_grid.dim))
    return RefinedController(policy, state_grid, input_grid, K, input_box)


def policy_rows(policy: Policy, state_grid: Grid = None, input_grid: Grid = None, internal_grid: Grid = None):
    """Rows ``(k, state..., internal..., input..., value)`` in ``(k, s)`` order."""
    state_grid = state_grid or policy.state_grid
    input_grid = input_grid or policy.input_grid
    internal_grid = internal_grid or policy.internal_grid
    xs = state_grid.representatives()
    us = input_grid.representatives()
    if policy.mode == "nominal" and internal_grid is not None:
        w = internal_grid.representative(policy.nominal_internal)
    else:
        w = np.full(internal_grid.dim if internal_grid is not None else 1, np.nan)
    S = policy.n_states
    blocks = []
    for k in range(policy.horizon):
        blocks.append(np.column_stack([
            np.full(S, k), xs, np.tile(w, (S, 1)), us[policy.table[k, :, 0]], policy.values[k, :S],
        ]))
    header = (["k"] + [f"state_{i}" for i in range(xs.shape[1])] + [f"internal_{i}" for i in range(w.size)]
              + [f"input_{i}" for i in range(us.shape[1])] + ["value"])
    return header, np.vstack(blocks)


def write_policy_csv(policy: Policy, path, **grids) -> None:
    header, rows = policy_rows(policy, **grids)
    fmt = ["%d"] + ["%.12g"] * (rows.shape[1] - 1)
    np.savetxt(path, rows, fmt=fmt, delimiter=",", header=",".join(header), comments="")
