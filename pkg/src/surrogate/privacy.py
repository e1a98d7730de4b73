"""Privacy primitives shared by the synthesizers and the DP classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_EPSILONS = (1.0, 2.0, 4.0, 8.0, 16.0)


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 0 <= self.delta < 1:
            raise ValueError("delta must be in [0, 1)")

    @property
    def pure(self) -> bool:
        return self.delta == 0


@dataclass
class BudgetLedger:
    """Append-only log of privacy charges made by one fit."""

    total: float
    entries: list[dict] = field(default_factory=list)

    def charge(self, what: str, epsilon: float, **details):
        self.entries.append({"what": what, "epsilon": float(epsilon), **details})

    @property
    def spent(self) -> float:
        return math.fsum(e["epsilon"] for e in self.entries)

    def to_dict(self) -> dict:
        return {"total": self.total, "spent": self.spent, "entries": list(self.entries)}


def zcdp_epsilon(rho: float, delta: float) -> float:
    """(epsilon, delta) implied by rho-zCDP: rho + 2 sqrt(rho ln(1/delta))."""
    return rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))


def gaussian_rho(sigma: float, steps: int) -> float:
    """zCDP cost of ``steps`` Gaussian releases with noise multiplier ``sigma``."""
    if sigma == 0:
        return math.inf
    return steps / (2.0 * sigma**2)


def calibrate_sigma(epsilon: float, delta: float, steps: int, sigma_cap: float = 1e6, tol: float = 1e-6) -> float:
    """Smallest noise multiplier (to within ``tol`` in epsilon) meeting (epsilon, delta).

    No subsampling amplification is credited, so the result is conservative.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    if steps < 1:
        raise ValueError("steps must be >= 1")

    def eps_of(sigma: float) -> float:
        return zcdp_epsilon(gaussian_rho(sigma, steps), delta)

    hi = sigma_cap
    if eps_of(hi) > epsilon:
        raise ValueError(f"no noise multiplier below {sigma_cap:g} achieves epsilon={epsilon}")
    lo = 1e-12
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if eps_of(mid) <= epsilon:
            hi = mid
        else:
            lo = mid
        if epsilon - eps_of(hi) <= tol * 1e-3:
            break
    return hi


def exp_mech_probs(scores, epsilon: float, sensitivity: float) -> np.ndarray:
    """Selection probabilities proportional to exp(eps * score / (2 * sensitivity))."""
    if sensitivity <= 0:
        raise ValueError("sensitivity must be > 0")
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ValueError("need at least one candidate")
    logits = epsilon * s / (2.0 * sensitivity)
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def exp_mech_select(scores, epsilon: float, sensitivity: float, seed=None) -> int:
    """Index of the candidate chosen by the exponential mechanism."""
    p = exp_mech_probs(scores, epsilon, sensitivity)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return int(rng.choice(len(p), p=p))
