"""Linear stochastic control subsystems and their interconnection."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .grid import Box


def _matrix(a, name) -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=float)).copy()
    if m.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {m.shape}")
    m.flags.writeable = False
    return m


def _as_box(b) -> Box:
    return b if isinstance(b, Box) else Box.from_pairs(b)


@dataclass(frozen=True, eq=False)
class LinearSubsystem:
    """One network node ``x+ = A x + B nu + D w + N s + drift + sum_j nu_j E_j x``.

    ``drift`` is a constant offset and ``bilinear`` holds the matrices
    ``E_j`` (shape ``(m, n, n)``) for dynamics whose state matrix depends on
    the external input. Both default to zero, recovering the plain linear
    form. Outputs are ``y1 = C1 x`` (external) and ``y2 = C2 x`` (internal).
    """

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    N: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    state_box: Box
    input_box: Box
    internal_box: Box
    drift: np.ndarray = None
    bilinear: np.ndarray = None

    def __post_init__(self):
        for name in ("A", "B", "D", "N", "C1", "C2"):
            object.__setattr__(self, name, _matrix(getattr(self, name), name))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        for name in ("B", "D", "N"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} must have {n} rows, got {getattr(self, name).shape}")
        for name in ("C1", "C2"):
            if getattr(self, name).shape[1] != n:
                raise ValueError(f"{name} must have {n} columns, got {getattr(self, name).shape}")
        for name in ("state_box", "input_box", "internal_box"):
            object.__setattr__(self, name, _as_box(getattr(self, name)))
        expected = {"state_box": n, "input_box": self.B.shape[1], "internal_box": self.D.shape[1]}
        for name, dim in expected.items():
            if getattr(self, name).dim != dim:
                raise ValueError(f"{name} has dimension {getattr(self, name).dim}, expected {dim}")

        drift = np.zeros(n) if self.drift is None else np.asarray(self.drift, dtype=float).reshape(-1).copy()
        if drift.shape != (n,):
            raise ValueError(f"drift must have length {n}")
        drift.flags.writeable = False
        object.__setattr__(self, "drift", drift)

        m = self.B.shape[1]
        if self.bilinear is None:
            bil = np.zeros((m, n, n))
        else:
            bil = np.asarray(self.bilinear, dtype=float).reshape(m, n, n).copy()
        bil.flags.writeable = False
        object.__setattr__(self, "bilinear", bil)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.D.shape[1]

    @property
    def r(self) -> int:
        return self.N.shape[1]

    @property
    def q1(self) -> int:
        return self.C1.shape[0]

    @property
    def q2(self) -> int:
        return self.C2.shape[0]

    @property
    def has_bilinear(self) -> bool:
        return bool(np.any(self.bilinear))

    def state_matrix(self, nu=None) -> np.ndarray:
        """``A + sum_j nu_j E_j``; equals ``A`` when there is no bilinear term."""
        if nu is None or not self.has_bilinear:
            return np.array(self.A)
        nu = np.asarray(nu, dtype=float).reshape(self.m)
        return self.A + np.einsum("j,jab->ab", nu, self.bilinear)

    def mean_next(self, x, nu, w) -> np.ndarray:
        """Noise-free successor, batched over leading axes."""
        x = np.asarray(x, dtype=float)
        nu = np.asarray(nu, dtype=float)
        w = np.asarray(w, dtype=float)
        out = x @ self.A.T + nu @ self.B.T + w @ self.D.T + self.drift
        if self.has_bilinear:
            out = out + np.einsum("...j,jab,...b->...a", nu, self.bilinear, x)
        return out

    def output_bounds(self):
        """Interval image ``(lower, upper)`` of ``state_box`` under ``C2``."""
        return _interval_image(self.C2, self.state_box.lower, self.state_box.upper)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.A, self.B, self.D, self.N, self.C1, self.C2, self.drift, self.bilinear):
            h.update(np.ascontiguousarray(arr).tobytes())
            h.update(str(arr.shape).encode())
        for box in (self.state_box, self.input_box, self.internal_box):
            h.update(box.lower.tobytes())
            h.update(box.upper.tobytes())
        return h.hexdigest()


def concrete_step(sys: LinearSubsystem, x, nu, w, noise) -> np.ndarray:
    """Exact successor state; no clamping to the state box."""
    x = np.asarray(x, dtype=float)
    nu = np.asarray(nu, dtype=float)
    w = np.asarray(w, dtype=float)
    noise = np.asarray(noise, dtype=float)
    for name, v, d in (("x", x, sys.n), ("nu", nu, sys.m), ("w", w, sys.p), ("noise", noise, sys.r)):
        if v.shape[-1:] != (d,):
            raise ValueError(f"{name} must have trailing dimension {d}, got shape {v.shape}")
    return sys.mean_next(x, nu, w) + noise @ sys.N.T


@dataclass(frozen=True, eq=False)
class InterconnectionSpec:
    subsystems: tuple
    M: np.ndarray
    mu: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        subs = tuple(self.subsystems)
        if not subs:
            raise ValueError("an interconnection needs at least one subsystem")
        object.__setattr__(self, "subsystems", subs)
        object.__setattr__(self, "M", _matrix(self.M, "M"))
        p_total = sum(s.p for s in subs)
        q_total = sum(s.q2 for s in subs)
        if self.M.shape != (p_total, q_total):
            raise ValueError(
                f"coupling matrix has shape {self.M.shape}; stacked internal inputs/outputs need "
                f"({p_total}, {q_total})"
            )
        mu = np.ones(len(subs)) if self.mu is None else np.asarray(self.mu, dtype=float).reshape(-1).copy()
        if mu.shape != (len(subs),):
            raise ValueError(f"need one weight per subsystem, got {mu.shape}")
        if np.any(mu <= 0):
            raise ValueError("weights mu must be positive")
        mu.flags.writeable = False
        object.__setattr__(self, "mu", mu)

    def __len__(self):
        return len(self.subsystems)

    def offsets(self, attr: str) -> np.ndarray:
        """Start offsets of each subsystem's block in a stacked vector of kind ``attr``."""
        return np.concatenate([[0], np.cumsum([getattr(s, attr) for s in self.subsystems])])


@dataclass(frozen=True)
class WellPosednessReport:
    passed: bool
    image_lower: np.ndarray
    image_upper: np.ndarray
    slack: np.ndarray

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return f"well-posed interconnection: {status} (min slack {self.slack.min():.12g})"


def _interval_image(M: np.ndarray, lower, upper):
    pos = np.clip(M, 0, None)
    neg = np.clip(M, None, 0)
    return pos @ lower + neg @ upper, pos @ upper + neg @ lower


def validate_interconnection(spec: InterconnectionSpec, tol: float = 1e-12) -> WellPosednessReport:
    """Check ``M * prod(Y2_i) subset prod(W_i)`` by interval arithmetic."""
    bounds = [s.output_bounds() for s in spec.subsystems]
    out_lo = np.concatenate([b[0] for b in bounds])
    out_hi = np.concatenate([b[1] for b in bounds])
    target_lo = np.concatenate([s.internal_box.lower for s in spec.subsystems])
    target_hi = np.concatenate([s.internal_box.upper for s in spec.subsystems])
    img_lo, img_hi = _interval_image(spec.M, out_lo, out_hi)
    slack = np.minimum(img_lo - target_lo, target_hi - img_hi)
    return WellPosednessReport(bool(np.all(slack >= -tol)), img_lo, img_hi, slack)


def circulant_coupling(n: int) -> np.ndarray:
    """Binary ring adjacency: ``m[i, i+1] = m[i+1, i] = m[0, n-1] = m[n-1, 0] = 1``."""
    if n < 3:
        raise ValueError("a ring needs at least 3 nodes")
    M = np.zeros((n, n))
    idx = np.arange(n)
    M[idx, (idx + 1) % n] = 1.0
    M[(idx + 1) % n, idx] = 1.0
    return M


def room_subsystem(eta, beta, gamma, T_h, T_e, sigma, state_box=(19.0, 21.0), input_box=(0.0, 0.6),
                   neighbours: int = 2) -> LinearSubsystem:
    """Scalar room temperature model.

    ``T+ = (1 - 2 eta - beta - gamma nu) T + gamma T_h nu + eta w + beta T_e + sigma s``
    where ``w`` is the sum of the neighbouring room temperatures. The
    ``-gamma nu T`` term is carried as the bilinear part.
    """
    if min(eta, beta, gamma) <= 0:
        raise ValueError("conduction factors must be positive")
    sbox = _as_box([state_box])
    internal = Box(neighbours * sbox.lower, neighbours * sbox.upper)
    return LinearSubsystem(
        A=[[1.0 - 2.0 * eta - beta]],
        B=[[gamma * T_h]],
        D=[[eta]],
        N=[[sigma]],
        C1=[[1.0]],
        C2=[[1.0]],
        state_box=sbox,
        input_box=_as_box([input_box]),
        internal_box=internal,
        drift=[beta * T_e],
        bilinear=[[[-gamma]]],
    )


def room_network(n: int, eta=0.1, beta=0.022, gamma=0.05, T_h=50.0, T_e=-1.0, sigma=0.28,
                 state_box=(19.0, 21.0), input_box=(0.0, 0.6), mu=None) -> InterconnectionSpec:
    """``n >= 3`` identical rooms on a ring, each with a heater."""
    if n < 3:
        raise ValueError(f"room network needs n >= 3, got {n}")
    room = room_subsystem(eta, beta, gamma, T_h, T_e, sigma, state_box, input_box)
    meta = dict(kind="room", n=n, eta=eta, beta=beta, gamma=gamma, T_h=T_h, T_e=T_e, sigma=sigma)
    return InterconnectionSpec(tuple([room] * n), circulant_coupling(n), mu, meta)
