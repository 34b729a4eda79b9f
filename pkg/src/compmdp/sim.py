"""Coupled Monte-Carlo simulation of a network and its abstraction."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .certificate import StorageCertificate, interface, storage_value
from .grid import Grid, partition_box
from .model import InterconnectionSpec, LinearSubsystem

CHUNK = 2048


def trajectory_rng(seed: int, traj: int) -> np.random.Generator:
    """Counter-based stream for one trajectory; independent of scheduling."""
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) | int(traj)))


@dataclass
class TrajectoryBatch:
    """Coupled runs. States are stacked over subsystems along the last axis.

    ``states`` and ``abstract_states`` have shape ``(n_traj, Td + 1, n_total)``;
    ``inputs`` and ``abstract_inputs`` ``(n_traj, Td, m_total)``;
    ``deviation`` holds the network output distance ``|y1 - y1_hat|`` per
    step and ``sub_deviation`` the same per subsystem.
    """

    n_traj: int
    horizon: int
    seed: int
    states: np.ndarray
    abstract_states: np.ndarray
    inputs: np.ndarray
    abstract_inputs: np.ndarray
    deviation: np.ndarray
    sub_deviation: np.ndarray
    left: np.ndarray
    abstract_left: np.ndarray
    state_offsets: np.ndarray
    input_offsets: np.ndarray
    noise: np.ndarray = None
    meta: dict = field(default_factory=dict)

    @property
    def n_subsystems(self) -> int:
        return len(self.state_offsets) - 1

    @property
    def leave_events(self) -> int:
        return int(self.left.sum())

    def subsystem_states(self, i: int, abstract: bool = False) -> np.ndarray:
        arr = self.abstract_states if abstract else self.states
        return arr[..., self.state_offsets[i]:self.state_offsets[i + 1]]


def _stack(spec, attr):
    return np.concatenate([[0], np.cumsum([getattr(s, attr) for s in spec.subsystems])]).astype(int)


def _run_chunk(spec, controllers, grids, M_hat, Td, seed, trajs, x0, record_noise):
    subs = spec.subsystems
    B = len(trajs)
    xo, uo, ro, qo, po = (_stack(spec, a) for a in ("n", "m", "r", "q2", "p"))
    n_tot, m_tot, r_tot = xo[-1], uo[-1], ro[-1]
    noise = np.stack([trajectory_rng(seed, t).standard_normal((Td, r_tot)) for t in trajs]) if B else \
        np.zeros((0, Td, r_tot))

    X = np.zeros((B, Td + 1, n_tot))
    Xh = np.zeros_like(X)
    U = np.zeros((B, Td, m_tot))
    Uh = np.zeros_like(U)
    S = np.zeros((B, len(subs)), dtype=np.int64)
    left = np.zeros((B, len(subs)), dtype=np.int64)
    aleft = np.zeros_like(left)

    X[:, 0] = x0
    for i, g in enumerate(grids):
        S[:, i], Xh[:, 0, xo[i]:xo[i + 1]] = g.quantize(np.broadcast_to(x0[xo[i]:xo[i + 1]], (B, subs[i].n)))

    for k in range(Td):
        x, xh = X[:, k], Xh[:, k]
        y2 = np.concatenate([x[:, xo[i]:xo[i + 1]] @ s.C2.T for i, s in enumerate(subs)], axis=1)
        y2h = np.concatenate([xh[:, xo[i]:xo[i + 1]] @ s.C2.T for i, s in enumerate(subs)], axis=1)
        W = y2 @ spec.M.T
        Wh = y2h @ M_hat.T
        for i, (s, c, g) in enumerate(zip(subs, controllers, grids)):
            xs, xhs = x[:, xo[i]:xo[i + 1]], xh[:, xo[i]:xo[i + 1]]
            nu, nu_h = c.coupled(k, xs, S[:, i])
            U[:, k, uo[i]:uo[i + 1]] = nu
            Uh[:, k, uo[i]:uo[i + 1]] = nu_h
            z = noise[:, k, ro[i]:ro[i + 1]] @ s.N.T
            nxt = s.mean_next(xs, nu, W[:, po[i]:po[i + 1]]) + z
            nxt_h = s.mean_next(xhs, nu_h, Wh[:, po[i]:po[i + 1]]) + z
            left[:, i] += ~s.state_box.contains(nxt)
            aleft[:, i] += ~s.state_box.contains(nxt_h)
            X[:, k + 1, xo[i]:xo[i + 1]] = s.state_box.clip(nxt)
            S[:, i], Xh[:, k + 1, xo[i]:xo[i + 1]] = g.quantize(nxt_h)

    sub_dev = np.zeros((B, Td + 1, len(subs)))
    for i, s in enumerate(subs):
        d = (X[:, :, xo[i]:xo[i + 1]] - Xh[:, :, xo[i]:xo[i + 1]]) @ s.C1.T
        sub_dev[:, :, i] = np.sum(d ** 2, axis=-1)
    dev = np.sqrt(sub_dev.sum(axis=-1))
    return X, Xh, U, Uh, dev, np.sqrt(sub_dev), left, aleft, noise if record_noise else None


def simulate_closed_loop(spec: InterconnectionSpec, controllers, Td: int, n_traj: int, seed: int, x0,
                         M_hat=None, threads: int = 1, record_noise: bool = False) -> TrajectoryBatch:
    """Step the concrete network and its abstraction with shared Gaussian draws.

    ``controllers[i]`` is a refined controller for subsystem ``i`` (see
    :func:`compmdp.synthesis.refine_policy`). Concrete states are clipped to
    their boxes and each exit counted; abstract successors are quantized
    onto the state grid (clamped likewise).
    """
    controllers = list(controllers)
    if len(controllers) != len(spec):
        raise ValueError(f"need {len(spec)} controllers, got {len(controllers)}")
    for c in controllers:
        if c.horizon < Td:
            raise ValueError(f"controller horizon {c.horizon} shorter than Td = {Td}")
    if n_traj < 1 or Td < 0:
        raise ValueError("need n_traj >= 1 and Td >= 0")
    grids = [c.state_grid for c in controllers]
    M_hat = spec.M if M_hat is None else np.atleast_2d(np.asarray(M_hat, dtype=float))
    n_tot = sum(s.n for s in spec.subsystems)
    x0 = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1), (n_tot,)).copy()

    chunks = [range(a, min(n_traj, a + CHUNK)) for a in range(0, n_traj, CHUNK)]

    def run(trajs):
        return _run_chunk(spec, controllers, grids, M_hat, Td, seed, trajs, x0, record_noise)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    cat = [np.concatenate(p) if p[0] is not None else None for p in zip(*parts)]
    X, Xh, U, Uh, dev, sub_dev, left, aleft, noise = cat
    return TrajectoryBatch(n_traj, Td, int(seed), X, Xh, U, Uh, dev, sub_dev, left, aleft,
                           _stack(spec, "n"), _stack(spec, "m"), noise)


@dataclass(frozen=True)
class ExceedanceResult:
    epsilon: float
    count: int
    n: int
    frequency: float
    ci_low: float
    ci_high: float
    stderr: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def empirical_exceedance(batch: TrajectoryBatch, epsilon: float, exclude_left: bool = False,
                         confidence: float = 0.95) -> ExceedanceResult:
    """Share of trajectories with ``max_k |y1 - y1_hat| >= epsilon`` and its Wilson interval."""
    worst = batch.deviation.max(axis=1)
    keep = np.ones(batch.n_traj, dtype=bool)
    if exclude_left:
        keep = batch.left.sum(axis=1) == 0
    n = int(keep.sum())
    if n == 0:
        return ExceedanceResult(float(epsilon), 0, 0, float("nan"), 0.0, 1.0, float("nan"))
    count = int(np.count_nonzero(worst[keep] >= epsilon))
    freq = count / n
    ci = binomtest(count, n).proportion_ci(confidence_level=confidence, method="wilson")
    return ExceedanceResult(float(epsilon), count, n, freq, float(ci.low), float(ci.high),
                            float(np.sqrt(freq * (1 - freq) / n)))


def write_trajectories_csv(batch: TrajectoryBatch, path, max_traj: int = None) -> None:
    """Long format: one row per ``(traj, k, subsystem)``; inputs are blank at ``k = Td``."""
    n = batch.n_traj if max_traj is None else min(max_traj, batch.n_traj)
    so, uo = batch.state_offsets, batch.input_offsets
    nx = max(np.diff(so))
    nu = max(np.diff(uo))
    cols = (["traj", "k", "subsystem"] + [f"x_{j}" for j in range(nx)] + [f"xhat_{j}" for j in range(nx)]
            + [f"nu_{j}" for j in range(nu)] + ["deviation"])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for t in range(n):
            for k in range(batch.horizon + 1):
                for i in range(batch.n_subsystems):
                    x = batch.states[t, k, so[i]:so[i + 1]]
                    xh = batch.abstract_states[t, k, so[i]:so[i + 1]]
                    if k < batch.horizon:
                        u = ["%.12g" % v for v in batch.inputs[t, k, uo[i]:uo[i + 1]]]
                    else:
                        u = [""] * (uo[i + 1] - uo[i])
                    pad = [""] * (nx - x.size)
                    row = ([str(t), str(k), str(i)] + ["%.12g" % v for v in x] + pad
                           + ["%.12g" % v for v in xh] + pad + u + [""] * (nu - len(u))
                           + ["%.12g" % batch.sub_deviation[t, k, i]])
                    fh.write(",".join(row) + "\n")


def summary(batch: TrajectoryBatch, epsilons, bounds=None) -> dict:
    out = {
        "n_traj": batch.n_traj,
        "horizon": batch.horizon,
        "seed": batch.seed,
        "leave_events": batch.leave_events,
        "trajectories_leaving": int(np.count_nonzero(batch.left.sum(axis=1))),
        "abstract_leave_events": int(batch.abstract_left.sum()),
        "state_min": float(batch.states.min()),
        "state_max": float(batch.states.max()),
        "exceedance": [],
    }
    for j, eps in enumerate(epsilons):
        r = empirical_exceedance(batch, eps).to_dict()
        if bounds is not None:
            r["bound"] = bounds[j]
            r["sound"] = r["frequency"] <= bounds[j] + 3 * r["stderr"]
        out["exceedance"].append(r)
    return out


@dataclass(frozen=True)
class DriftReport:
    n_samples: int
    n_noise: int
    n_violations: int
    worst_slack: float
    worst_point: dict

    @property
    def passed(self) -> bool:
        return self.n_violations == 0


def empirical_supermartingale_check(sys: LinearSubsystem, cert: StorageCertificate, n_samples: int = 1000,
                                    seed: int = 0, n_noise: int = 10_000, state_grid: Grid = None,
                                    input_grid: Grid = None, internal_grid: Grid = None) -> DriftReport:
    """Monte-Carlo audit of ``E V(x', x_hat') <= kappa_hat V + supply + psi``.

    ``x`` and ``w`` are uniform on their boxes; ``x_hat``, ``nu_hat`` and
    ``w_hat`` are uniform over grid representatives. Successor pairs share
    the noise draw. The abstract successor uses the unbounded lattice so the
    quantization error stays within half a cell. A point violates when the
    sample mean exceeds the right-hand side by more than 3 standard errors.
    """
    if state_grid is None:
        delta = cert.meta.get("delta")
        if delta is None:
            raise ValueError("pass state_grid or a certificate built with a delta")
        from .grid import grid_for_delta

        state_grid = grid_for_delta(sys.state_box, delta)
    input_grid = input_grid or partition_box(sys.input_box, 15)
    if internal_grid is None:
        cells = np.maximum(1, np.ceil(sys.internal_box.widths / state_grid.cell_widths.min() - 1e-9)).astype(int)
        internal_grid = partition_box(sys.internal_box, cells)

    rng = np.random.default_rng(seed)
    xs = rng.uniform(sys.state_box.lower, sys.state_box.upper, (n_samples, sys.n))
    ws = rng.uniform(sys.internal_box.lower, sys.internal_box.upper, (n_samples, sys.p))
    xh = state_grid.representative(rng.integers(state_grid.n_cells, size=n_samples))
    uh = input_grid.representative(rng.integers(input_grid.n_cells, size=n_samples))
    wh = internal_grid.representative(rng.integers(internal_grid.n_cells, size=n_samples))
    nu = interface(cert.K, xs, xh, uh)

    mean_c = sys.mean_next(xs, nu, ws)
    mean_a = sys.mean_next(xh, uh, wh)
    M = cert.Mtilde
    V = storage_value(M, xs, xh)
    e = np.concatenate([ws - wh, (xs - xh) @ sys.C2.T], axis=1)
    X = np.broadcast_to(cert.xbar0, (n_samples,) + cert.xbar0.shape)
    if cert.xbar_slope is not None:
        X = X + np.einsum("sj,jab->sab", nu, cert.xbar_slope)
    supply = np.einsum("si,sij,sj->s", e, X, e)
    rhs = cert.kappa_hat * V + supply + cert.psi

    mean_v = np.empty(n_samples)
    se = np.empty(n_samples)
    block = max(1, 2_000_000 // n_noise)
    for a in range(0, n_samples, block):
        b = min(n_samples, a + block)
        z = rng.standard_normal((b - a, n_noise, sys.r)) @ sys.N.T
        nc = mean_c[a:b, None, :] + z
        _, na = state_grid.quantize(mean_a[a:b, None, :] + z, extend=True)
        v = storage_value(M, nc, na)
        mean_v[a:b] = v.mean(axis=1)
        se[a:b] = v.std(axis=1, ddof=1) / np.sqrt(n_noise)
    slack = rhs + 3 * se - mean_v
    worst = int(np.argmin(slack))
    point = {"x": xs[worst].tolist(), "x_hat": xh[worst].tolist(), "nu_hat": uh[worst].tolist(),
             "w": ws[worst].tolist(), "w_hat": wh[worst].tolist(), "V": float(V[worst]),
             "mean_next": float(mean_v[worst]), "rhs": float(rhs[worst])}
    return DriftReport(n_samples, n_noise, int(np.count_nonzero(slack < 0)), float(slack[worst]), point)
