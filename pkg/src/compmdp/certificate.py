"""Quadratic storage certificates for linear subsystems and their abstractions."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .grid import Box
from .model import LinearSubsystem

EIG_TOL = 1e-10


def sym(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    return 0.5 * (S + S.T)


def lambda_max(S) -> float:
    return float(np.linalg.eigvalsh(sym(S))[-1])


def lambda_min(S) -> float:
    return float(np.linalg.eigvalsh(sym(S))[0])


def split_xbar(xbar, p: int):
    """Blocks ``(X11, X12, X21, X22)`` of a supply matrix ordered ``[w; y2]``."""
    xbar = np.asarray(xbar, dtype=float)
    return xbar[:p, :p], xbar[:p, p:], xbar[p:, :p], xbar[p:, p:]


@dataclass(frozen=True, eq=False)
class StorageCertificate:
    """Quadratic storage function ``V = (x - xh)' Mtilde (x - xh)`` with its constants.

    The supply matrix may depend affinely on the external input,
    ``Xbar(nu) = Xbar + sum_j nu_j xbar_slope[j]``, which is how
    input-dependent dynamics are certified. ``Xbar11`` etc. are the blocks
    at ``nu = 0``.
    """

    Mtilde: np.ndarray
    K: np.ndarray
    kappa_hat: float
    pi: float
    Xbar11: np.ndarray
    Xbar12: np.ndarray
    Xbar21: np.ndarray
    Xbar22: np.ndarray
    psi: float
    alpha_coeff: float
    xbar_slope: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.Mtilde, dtype=float))
        if not np.allclose(M, M.T, atol=1e-12):
            raise ValueError("Mtilde must be symmetric")
        if lambda_min(M) <= 0:
            raise ValueError("Mtilde must be positive definite")
        if not np.allclose(self.Xbar12, np.transpose(self.Xbar21), atol=1e-12):
            raise ValueError("Xbar must be symmetric (Xbar12 == Xbar21')")
        if not 0.0 < self.kappa_hat < 1.0:
            raise ValueError("kappa_hat must lie in (0, 1)")
        if self.pi <= 0:
            raise ValueError("pi must be positive")
        object.__setattr__(self, "Mtilde", M)
        for name in ("K", "Xbar11", "Xbar12", "Xbar21", "Xbar22"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))

    @property
    def p(self) -> int:
        return self.Xbar11.shape[0]

    @property
    def xbar0(self) -> np.ndarray:
        return np.block([[self.Xbar11, self.Xbar12], [self.Xbar21, self.Xbar22]])

    def xbar(self, nu=None) -> np.ndarray:
        X = self.xbar0
        if self.xbar_slope is not None and nu is not None:
            X = X + np.einsum("j,jab->ab", np.atleast_1d(np.asarray(nu, dtype=float)), self.xbar_slope)
        return X

    def to_dict(self) -> dict:
        return {
            "Mtilde": self.Mtilde.tolist(),
            "K": self.K.tolist(),
            "kappa_hat": self.kappa_hat,
            "pi": self.pi,
            "Xbar11": self.Xbar11.tolist(),
            "Xbar12": self.Xbar12.tolist(),
            "Xbar21": self.Xbar21.tolist(),
            "Xbar22": self.Xbar22.tolist(),
            "psi": self.psi,
            "alpha_coeff": self.alpha_coeff,
            "xbar_slope": None if self.xbar_slope is None else np.asarray(self.xbar_slope).tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "StorageCertificate":
        kw = dict(d)
        if kw.get("xbar_slope") is not None:
            kw["xbar_slope"] = np.asarray(kw["xbar_slope"], dtype=float)
        return cls(**kw)


def storage_offset(Mtilde, pi: float, delta: float) -> float:
    """``(1 + 2/pi) * lambda_max(Mtilde) * delta**2``."""
    if pi <= 0:
        raise ValueError("pi must be positive")
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    return (1.0 + 2.0 / pi) * lambda_max(np.atleast_2d(Mtilde)) * delta ** 2


def alpha_coefficient(Mtilde, C1) -> float:
    C1 = np.atleast_2d(np.asarray(C1, dtype=float))
    return lambda_min(np.atleast_2d(Mtilde)) / lambda_max(C1.T @ C1)


def storage_value(Mtilde, x, x_hat) -> np.ndarray:
    """Quadratic form ``(x - x_hat)' Mtilde (x - x_hat)``, batched over leading axes."""
    Mtilde = np.atleast_2d(np.asarray(Mtilde, dtype=float))
    e = np.asarray(x, dtype=float) - np.asarray(x_hat, dtype=float)
    if Mtilde.shape[0] == 1 and (e.ndim == 0 or e.shape[-1] != 1):
        return Mtilde[0, 0] * e ** 2
    return np.einsum("...i,ij,...j->...", e, Mtilde, e)


def interface(K, x, x_hat, nu_hat, input_box: Box = None, return_clamped: bool = False):
    """Refinement map ``nu = K (x - x_hat) + nu_hat``.

    With ``input_box`` the result is clamped to it; ``return_clamped`` adds
    the number of clamped points so the event is never silent.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    e = np.asarray(x, dtype=float) - np.asarray(x_hat, dtype=float)
    nu_hat = np.asarray(nu_hat, dtype=float)
    # 1x1 gains accept plain scalars / arrays of scalars
    scalar = K.shape == (1, 1) and (e.ndim == 0 or e.shape[-1] != 1)
    nu = K[0, 0] * e + nu_hat if scalar else e @ K.T + nu_hat
    clamped = 0
    if input_box is not None:
        lo, hi = (input_box.lower[0], input_box.upper[0]) if scalar else (input_box.lower, input_box.upper)
        out = np.clip(nu, lo, hi)
        changed = out != nu
        clamped = int(np.count_nonzero(changed if scalar else np.any(changed, axis=-1)))
        nu = out
    return (nu, clamped) if return_clamped else nu


@dataclass(frozen=True)
class VertexMargin:
    nu: np.ndarray
    max_eigenvalue: float
    state_margin: float


@dataclass(frozen=True)
class LmiReport:
    """Outcome of the storage matrix inequality ``LHS - RHS <= 0``.

    ``margin`` is the largest eigenvalue of the difference at the worst
    input vertex (pass iff ``<= tol``). ``state_margin`` is the largest
    eigenvalue of the state block of that difference alone, which stays
    informative when the supply template makes the internal-input block tight.
    """

    passed: bool
    margin: float
    state_margin: float
    worst_nu: np.ndarray
    vertices: list

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"storage LMI: {status}, max eigenvalue {self.margin:.12g}, "
                f"state-block margin {self.state_margin:.12g} at nu={np.round(self.worst_nu, 12).tolist()}")


def lmi_difference(sys: LinearSubsystem, Mtilde, K, kappa_hat, pi, xbar, nu=None) -> np.ndarray:
    """``LHS - RHS`` of the storage inequality at external input ``nu``."""
    Mtilde = np.atleast_2d(np.asarray(Mtilde, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    n, p = sys.n, sys.p
    if Mtilde.shape != (n, n):
        raise ValueError(f"Mtilde must be {n}x{n}, got {Mtilde.shape}")
    if K.shape != (sys.m, n):
        raise ValueError(f"K must be {sys.m}x{n}, got {K.shape}")
    xbar = np.atleast_2d(np.asarray(xbar, dtype=float))
    if xbar.shape != (p + sys.q2, p + sys.q2):
        raise ValueError(f"Xbar must be {(p + sys.q2,) * 2}, got {xbar.shape}")
    X11, X12, X21, X22 = split_xbar(xbar, p)
    Acl = sys.state_matrix(nu) + sys.B @ K
    D, C2 = sys.D, sys.C2
    lhs = np.block([
        [(1 + pi) * Acl.T @ Mtilde @ Acl, Acl.T @ Mtilde @ D],
        [D.T @ Mtilde @ Acl, (1 + pi) * D.T @ Mtilde @ D],
    ])
    rhs = np.block([
        [kappa_hat * Mtilde + C2.T @ X22 @ C2, C2.T @ X21],
        [X12 @ C2, X11],
    ])
    diff = lhs - rhs
    scale = max(1.0, np.max(np.abs(lhs)), np.max(np.abs(rhs)))
    if np.max(np.abs(diff - diff.T)) > 1e-9 * scale:
        raise ValueError("LHS - RHS is not symmetric; Xbar blocks are inconsistent")
    return sym(diff)


def _input_vertices(sys: LinearSubsystem, xbar_slope) -> list:
    if sys.has_bilinear or xbar_slope is not None:
        return [np.asarray(v) for v in sys.input_box.vertices()]
    return [None]


def check_storage_matrix_inequality(sys: LinearSubsystem, Mtilde, K, kappa_hat: float, pi: float, Xbar,
                                    xbar_slope=None, tol: float = EIG_TOL) -> LmiReport:
    """Check the storage matrix inequality over all input-box vertices.

    The difference is convex in the external input, so checking vertices
    covers the whole box when the dynamics or the supply matrix depend on it.
    """
    if not 0.0 < kappa_hat < 1.0:
        raise ValueError("kappa_hat must lie in (0, 1)")
    if pi <= 0:
        raise ValueError("pi must be positive")
    Mtilde = np.atleast_2d(np.asarray(Mtilde, dtype=float))
    if lambda_min(Mtilde) <= 0:
        raise ValueError("Mtilde must be positive definite")
    Xbar = np.atleast_2d(np.asarray(Xbar, dtype=float))
    results = []
    for nu in _input_vertices(sys, xbar_slope):
        X = Xbar if (xbar_slope is None or nu is None) else Xbar + np.einsum("j,jab->ab", nu, xbar_slope)
        diff = lmi_difference(sys, Mtilde, K, kappa_hat, pi, X, nu)
        eig = np.linalg.eigvalsh(diff)[-1]
        state = np.linalg.eigvalsh(diff[: sys.n, : sys.n])[-1]
        results.append(VertexMargin(np.zeros(sys.m) if nu is None else nu, float(eig), float(state)))
    # eigenvalues equal up to round-off tie-break on the state block
    worst = max(results, key=lambda r: (round(r.max_eigenvalue, 9), r.state_margin))
    return LmiReport(worst.max_eigenvalue <= tol, worst.max_eigenvalue, worst.state_margin, worst.nu, results)


def storage_certificate(sys: LinearSubsystem, Mtilde, K, kappa_hat: float, pi: float, Xbar, delta: float,
                        xbar_slope=None, meta=None) -> StorageCertificate:
    """Assemble a certificate; the inequality itself is checked separately."""
    p = sys.p
    X11, X12, X21, X22 = split_xbar(np.atleast_2d(Xbar), p)
    Mtilde = np.atleast_2d(np.asarray(Mtilde, dtype=float))
    return StorageCertificate(
        Mtilde=Mtilde,
        K=np.atleast_2d(np.asarray(K, dtype=float)),
        kappa_hat=float(kappa_hat),
        pi=float(pi),
        Xbar11=X11, Xbar12=X12, Xbar21=X21, Xbar22=X22,
        psi=storage_offset(Mtilde, pi, delta),
        alpha_coeff=alpha_coefficient(Mtilde, sys.C1),
        xbar_slope=None if xbar_slope is None else np.asarray(xbar_slope, dtype=float),
        meta=dict(meta or {}, delta=delta),
    )


def room_supply_template(eta: float, pi: float, lam0: float, gamma: float, state_weight: float = 3.38):
    """Supply matrix of the room model and its slope in the heater input.

    ``Xbar(nu) = [[eta^2 (1+pi), eta lam(nu)], [eta lam(nu), -w eta (1+pi)]]``
    with ``lam(nu) = lam0 - gamma nu`` and ``w = state_weight``.
    """
    xbar = np.array([[eta ** 2 * (1 + pi), eta * lam0], [eta * lam0, -state_weight * eta * (1 + pi)]])
    slope = np.array([[[0.0, -eta * gamma], [-eta * gamma, 0.0]]])
    return xbar, slope


def room_certificate(sys: LinearSubsystem, eta: float, gamma: float, kappa_hat: float, pi: float,
                     delta: float, state_weight: float = 3.38) -> StorageCertificate:
    """Certificate with ``Mtilde = 1``, ``K = 0`` and the room supply template."""
    lam0 = float(sys.A[0, 0])
    xbar, slope = room_supply_template(eta, pi, lam0, gamma, state_weight)
    return storage_certificate(sys, [[1.0]], [[0.0]], kappa_hat, pi, xbar, delta, slope,
                               meta={"template": "room", "eta": eta, "gamma": gamma})


def check_certificate(sys: LinearSubsystem, cert: StorageCertificate, tol: float = EIG_TOL) -> LmiReport:
    return check_storage_matrix_inequality(sys, cert.Mtilde, cert.K, cert.kappa_hat, cert.pi, cert.xbar0,
                                           cert.xbar_slope, tol)


def search_room_parameters(sys: LinearSubsystem, eta: float, gamma: float, kappas, pis, delta: float):
    """Coarse grid search over ``(kappa_hat, pi)`` with the room template.

    Returns passing ``(kappa_hat, pi, psi)`` triples sorted by ``kappa_hat``
    then ``psi`` (faster contraction and smaller offset first).
    """
    found = []
    for kappa, pi in itertools.product(kappas, pis):
        cert = room_certificate(sys, eta, gamma, kappa, pi, delta)
        if check_certificate(sys, cert).passed:
            found.append((float(kappa), float(pi), cert.psi))
    return sorted(found, key=lambda t: (t[0], t[2]))
