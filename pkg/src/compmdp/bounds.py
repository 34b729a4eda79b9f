"""Probabilistic closeness of concrete and abstract output trajectories."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .composition import SimulationFunctionParams


@dataclass(frozen=True)
class BoundResult:
    probability: float
    raw: float
    branch: int
    clamped: bool

    def __float__(self):
        return self.probability

    def to_dict(self) -> dict:
        return {"probability": self.probability, "raw": self.raw, "branch": self.branch, "clamped": self.clamped}


def _check(params: SimulationFunctionParams, V0, epsilon):
    if not 0.0 < params.kappa_hat < 1.0:
        raise ValueError(f"kappa_hat must lie in (0, 1), got {params.kappa_hat}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if V0 < 0:
        raise ValueError("V0 must be nonnegative")


def closeness_bound(params: SimulationFunctionParams, V0: float, epsilon: float, Td: int) -> BoundResult:
    """Upper bound on ``P(sup_{k <= Td} |y(k) - y_hat(k)| >= epsilon)``."""
    _check(params, V0, epsilon)
    if Td < 0 or int(Td) != Td:
        raise ValueError("Td must be a nonnegative integer")
    a = float(params.alpha(epsilon))
    k, psi = params.kappa_hat, params.psi_hat
    if a >= psi / k:
        raw = 1.0 - (1.0 - V0 / a) * (1.0 - psi / a) ** Td
        branch = 1
    else:
        decay = (1.0 - k) ** Td
        raw = (V0 / a) * decay + psi / (k * a) * (1.0 - decay)
        branch = 2
    prob = min(1.0, max(0.0, raw))
    return BoundResult(prob, raw, branch, prob != raw)


def infinite_horizon_bound(params: SimulationFunctionParams, V0: float, epsilon: float) -> float:
    """``min(1, V0 / alpha(epsilon))``; needs an exact-offset certificate (``psi_hat == 0``)."""
    _check(params, V0, epsilon)
    if params.psi_hat != 0:
        raise ValueError(
            "the infinite-horizon bound requires psi_hat == 0 (no quantization offset); "
            f"got psi_hat = {params.psi_hat}"
        )
    return min(1.0, V0 / float(params.alpha(epsilon)))


class InfeasibleTarget(ValueError):
    pass


def epsilon_for_confidence(params: SimulationFunctionParams, V0: float, Td: int, target_prob: float,
                           lo: float = 1e-9, hi: float = 2.0, rtol: float = 1e-9) -> float:
    """Smallest ``epsilon`` in ``[lo, hi]`` whose bound is at most ``1 - target_prob``."""
    if not 0.0 < target_prob < 1.0:
        raise ValueError("target_prob must lie in (0, 1)")
    threshold = 1.0 - target_prob

    def ok(eps):
        return closeness_bound(params, V0, eps, Td).probability <= threshold

    if ok(lo):
        return lo
    if not ok(hi):
        floor = closeness_bound(params, V0, hi, Td).probability
        raise InfeasibleTarget(
            f"confidence {target_prob} unreachable for epsilon <= {hi}: bound there is {floor:.12g}"
        )
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def branch_values(params: SimulationFunctionParams, V0: float, epsilon: float, Td: int):
    """Both branch expressions, unclamped; useful for continuity checks."""
    a = float(params.alpha(epsilon))
    k, psi = params.kappa_hat, params.psi_hat
    first = 1.0 - (1.0 - V0 / a) * (1.0 - psi / a) ** Td
    decay = (1.0 - k) ** Td
    second = (V0 / a) * decay + psi / (k * a) * (1.0 - decay)
    return first, second


def alpha_threshold_epsilon(params: SimulationFunctionParams) -> float:
    """``epsilon`` at which ``alpha(epsilon) = psi_hat / kappa_hat``."""
    return math.sqrt(params.psi_hat / (params.kappa_hat * params.alpha_coeff))
