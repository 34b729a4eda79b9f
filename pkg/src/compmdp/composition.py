"""Network-level conditions and aggregation of subsystem certificates."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .certificate import EIG_TOL, StorageCertificate, sym
from .model import InterconnectionSpec

MAX_TUPLES = 10_000_000


@dataclass(frozen=True)
class SimulationFunctionParams:
    """Constants of the network simulation function ``V = sum_i mu_i V_i``.

    ``alpha_coeff`` is ``c`` in ``alpha(s) = c s**2``.
    """

    kappa_hat: float
    psi_hat: float
    alpha_coeff: float
    mu: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 < self.kappa_hat < 1.0:
            raise ValueError(f"kappa_hat must lie in (0, 1), got {self.kappa_hat}")
        if self.psi_hat < 0:
            raise ValueError("psi_hat must be nonnegative")
        if self.alpha_coeff <= 0:
            raise ValueError("alpha coefficient must be positive")

    def alpha(self, s):
        return self.alpha_coeff * np.asarray(s, dtype=float) ** 2

    def to_dict(self) -> dict:
        return {"kappa_hat": self.kappa_hat, "psi_hat": self.psi_hat, "alpha_coeff": self.alpha_coeff,
                "mu": None if self.mu is None else np.asarray(self.mu).tolist()}


def assemble_xcmp(certs, mu, nus=None) -> np.ndarray:
    """Weighted block arrangement of the subsystem supply matrices.

    ``nus`` optionally gives the external input of each subsystem for
    input-dependent supply matrices.
    """
    certs = list(certs)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    if mu.size != len(certs):
        raise ValueError(f"need one weight per certificate, got {mu.size} for {len(certs)}")
    if nus is None:
        nus = [None] * len(certs)
    blocks = {key: [] for key in ("11", "12", "21", "22")}
    for cert, m, nu in zip(certs, mu, nus):
        X = cert.xbar(nu)
        p = cert.p
        q = X.shape[0] - p
        if q <= 0 or X.shape != (p + q, p + q):
            raise ValueError("inconsistent Xbar block sizes")
        blocks["11"].append(m * X[:p, :p])
        blocks["12"].append(m * X[:p, p:])
        blocks["21"].append(m * X[p:, :p])
        blocks["22"].append(m * X[p:, p:])
    return np.block([
        [block_diag(*blocks["11"]), block_diag(*blocks["12"])],
        [block_diag(*blocks["21"]), block_diag(*blocks["22"])],
    ])


@dataclass(frozen=True)
class MarginReport:
    passed: bool
    margin: float

    def __str__(self):
        return f"{'pass' if self.passed else 'FAIL'} (max eigenvalue {self.margin:.12g})"


def check_lmi_condition(M, G, X_cmp, tol: float = EIG_TOL) -> MarginReport:
    """``[G M; I]' X_cmp [G M; I] <= 0`` via the largest eigenvalue."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    q = M.shape[1]
    G = np.eye(M.shape[0]) if G is None else np.atleast_2d(np.asarray(G, dtype=float))
    if G.shape[1] != M.shape[0]:
        raise ValueError(f"G has {G.shape[1]} columns but M has {M.shape[0]} rows")
    X_cmp = np.asarray(X_cmp, dtype=float)
    if X_cmp.shape != (G.shape[0] + q, G.shape[0] + q):
        raise ValueError(f"X_cmp must be {(G.shape[0] + q,) * 2}, got {X_cmp.shape}")
    P = np.vstack([G @ M, np.eye(q)])
    margin = float(np.linalg.eigvalsh(sym(P.T @ X_cmp @ P))[-1])
    return MarginReport(margin <= tol, margin)


@dataclass(frozen=True)
class MatchingReport:
    passed: bool
    max_abs_difference: float


def check_matching_condition(G, M, H, G_hat, M_hat, tol: float = 1e-12) -> MatchingReport:
    """``G M H == G_hat M_hat`` entrywise."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    M_hat = np.atleast_2d(np.asarray(M_hat, dtype=float))
    G = np.eye(M.shape[0]) if G is None else np.atleast_2d(G)
    H = np.eye(M.shape[1]) if H is None else np.atleast_2d(H)
    G_hat = np.eye(M_hat.shape[0]) if G_hat is None else np.atleast_2d(G_hat)
    lhs = G @ M @ H
    rhs = G_hat @ M_hat
    if lhs.shape != rhs.shape:
        return MatchingReport(False, float("inf"))
    diff = float(np.max(np.abs(lhs - rhs), initial=0.0))
    return MatchingReport(diff <= tol, diff)


@dataclass(frozen=True)
class InclusionReport:
    passed: bool
    mode: str
    n_tuples: int
    n_missing: int


def _keys(points, quantum):
    return {tuple(row) for row in np.round(np.atleast_2d(points) / quantum).astype(np.int64)}


def check_internal_inclusion(M_hat, output_sets=None, input_sets=None, construction: bool = False,
                             quantum: float = 1e-9, max_tuples: int = MAX_TUPLES) -> InclusionReport:
    """Check ``M_hat * prod(Y2_i) subset prod(W_i)`` for finite sets.

    ``output_sets[i]`` has shape ``(k_i, q2_i)`` and ``input_sets[i]`` shape
    ``(l_i, p_i)``. With ``construction=True`` the internal-input sets are
    taken to be built as the image itself, so the inclusion holds by
    construction and is only recorded.
    """
    if construction:
        return InclusionReport(True, "construction", 0, 0)
    M_hat = np.atleast_2d(np.asarray(M_hat, dtype=float))
    outs = [np.asarray(o, dtype=float).reshape(len(o), -1) for o in output_sets]
    ins = [np.asarray(w, dtype=float).reshape(len(w), -1) for w in input_sets]
    n_tuples = int(np.prod([len(o) for o in outs], dtype=float))
    if n_tuples > max_tuples:
        raise ValueError(f"{n_tuples} output tuples exceed {max_tuples}; use construction mode")
    in_keys = [_keys(w, quantum) for w in ins]
    offsets = np.concatenate([[0], np.cumsum([w.shape[1] for w in ins])])
    missing = 0
    for combo in itertools.product(*[range(len(o)) for o in outs]):
        y = np.concatenate([outs[i][j] for i, j in enumerate(combo)])
        img = M_hat @ y
        for i, keys in enumerate(in_keys):
            key = tuple(np.round(img[offsets[i]:offsets[i + 1]] / quantum).astype(np.int64))
            if key not in keys:
                missing += 1
                break
    return InclusionReport(missing == 0, "enumeration", n_tuples, missing)


def aggregate_simulation_function(certs, mu) -> SimulationFunctionParams:
    """Network constants from linear-rate certificates.

    With ``kappa_i(s) = (1 - kappa_hat_i) s`` the network rate is
    ``min_i (1 - kappa_hat_i)``; ``psi_hat = sum_i mu_i psi_i``; and for
    block-diagonal quadratic storage the output bound coefficient is
    ``min_i mu_i alpha_i``.
    """
    certs = list(certs)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    if mu.size != len(certs):
        raise ValueError("need one weight per certificate")
    for c in certs:
        if not isinstance(c, StorageCertificate):
            raise TypeError("only quadratic storage certificates can be aggregated")
    rate = min(1.0 - c.kappa_hat for c in certs)
    psi_hat = float(sum(m * c.psi for m, c in zip(mu, certs)))
    alpha = float(min(m * c.alpha_coeff for m, c in zip(mu, certs)))
    return SimulationFunctionParams(rate, psi_hat, alpha, mu)


def gershgorin_margin(eta: float, pi: float, lam: float) -> float:
    """Row-sum bound for the ring-network LMI; negative means it holds for any size."""
    if eta < 0 or pi <= 0:
        raise ValueError("need eta >= 0 and pi > 0")
    return 4 * eta ** 2 * (1 + pi) + 4 * eta * lam - 3.38 * eta * (1 + pi)


@dataclass
class CompositionReport:
    well_posed: bool
    lmi: dict
    matching: MatchingReport
    inclusion: InclusionReport
    params: SimulationFunctionParams
    gershgorin: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return (self.well_posed and all(r.passed for r in self.lmi.values()) and self.matching.passed
                and self.inclusion.passed)

    @property
    def worst_lmi_margin(self) -> float:
        return max(r.margin for r in self.lmi.values())

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "well_posed": self.well_posed,
            "lmi": {k: {"passed": v.passed, "max_eigenvalue": v.margin} for k, v in self.lmi.items()},
            "matching": {"passed": self.matching.passed, "max_abs_difference": self.matching.max_abs_difference},
            "inclusion": {"passed": self.inclusion.passed, "mode": self.inclusion.mode,
                          "n_tuples": self.inclusion.n_tuples, "n_missing": self.inclusion.n_missing},
            "simulation_function": self.params.to_dict(),
            "gershgorin": self.gershgorin,
        }


def compose(spec: InterconnectionSpec, certs, M_hat=None, construction: bool = True,
            output_sets=None, input_sets=None) -> CompositionReport:
    """Run every compositional check for ``spec`` with per-subsystem certificates.

    Input-dependent supply matrices are evaluated with every subsystem at
    the same vertex of its input box; each vertex is reported separately.
    """
    from .model import validate_interconnection

    certs = list(certs)
    if len(certs) != len(spec):
        raise ValueError("need one certificate per subsystem")
    M_hat = spec.M if M_hat is None else np.atleast_2d(M_hat)
    lmi = {}
    dependent = any(c.xbar_slope is not None for c in certs)
    if dependent:
        # all subsystems at the lower, then the upper input corner
        for label, pick in (("nu_lower", "lower"), ("nu_upper", "upper")):
            nus = [getattr(s.input_box, pick) for s in spec.subsystems]
            lmi[label] = check_lmi_condition(spec.M, None, assemble_xcmp(certs, spec.mu, nus))
    else:
        lmi["nominal"] = check_lmi_condition(spec.M, None, assemble_xcmp(certs, spec.mu))
    matching = check_matching_condition(None, spec.M, None, None, M_hat)
    inclusion = check_internal_inclusion(M_hat, output_sets, input_sets, construction=construction)
    params = aggregate_simulation_function(certs, spec.mu)
    gersh = {}
    if spec.meta.get("kind") == "room":
        sub = spec.subsystems[0]
        eta = spec.meta["eta"]
        for label, pick in (("nu_lower", "lower"), ("nu_upper", "upper")):
            nu = getattr(sub.input_box, pick)
            lam = float(sub.state_matrix(nu)[0, 0])
            gersh[label] = {"lambda": lam, "margin": gershgorin_margin(eta, certs[0].pi, lam)}
    return CompositionReport(validate_interconnection(spec).passed, lmi, matching, inclusion, params, gersh)
