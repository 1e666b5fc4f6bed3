"""Derive Beta parameters for the summary base from prior task knowledge.

Two moment conditions identify the score density f = Beta(a, b): the mass
below the decision threshold 1/2 must equal the majority-class fraction,

    F(1/2; a, b) = gamma_0,

and the accuracy a threshold-1/2 decision rule would achieve under f must
equal the expected accuracy,

    E_a = int_0^{1/2} (1 - x) f(x) dx + int_{1/2}^1 x f(x) dx.

No closed form solves the pair, so both integrals are evaluated by adaptive
quadrature and the parameters are found by derivative-free minimization of
the mean squared mismatch in (log a, log b) space from a fixed start set.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize

from .distributions import BetaParams, beta_cdf, log_beta_function
from .tensor import DomainError

SOLVED_RESIDUAL = 1e-8
FEASIBLE_RESIDUAL = 1e-4

# Symmetric, extreme and both asymmetric basins, tried in order.
_STARTS = ((1.0, 1.0), (0.5, 0.5), (5.0, 5.0), (2.0, 8.0), (8.0, 2.0))


@dataclass(frozen=True)
class PriorKnowledge:
    """Minority-class share and expected accuracy of a trained scorer."""

    minority_fraction: float
    expected_accuracy: float

    def __post_init__(self):
        if not 0.0 < self.minority_fraction <= 0.5:
            raise DomainError(
                f"minority_fraction must lie in (0, 0.5], got {self.minority_fraction}"
            )
        if not 0.5 < self.expected_accuracy < 1.0:
            raise DomainError(
                f"expected_accuracy must lie in (0.5, 1), got {self.expected_accuracy}"
            )

    @property
    def majority_fraction(self) -> float:
        return 1.0 - self.minority_fraction


@dataclass(frozen=True)
class PriorSolveResult:
    params: BetaParams
    majority_fraction: float
    expected_accuracy: float
    residual: float


class InfeasibleTargetError(Exception):
    """No start reached the feasibility bar; carries the best candidate."""

    def __init__(self, message: str, best: PriorSolveResult):
        super().__init__(message)
        self.best = best


def _correct_side_mass(a: float, b: float) -> float:
    """int_0^{1/2} (1 - x) f(x; a, b) dx, the correct-decision mass below 1/2.

    For a < 1 the substitution u = x^a removes the endpoint singularity:
    the integral becomes (1/(a B)) int_0^{(1/2)^a} (1 - u^{1/a})^b du.
    """
    log_beta_fn = log_beta_function(a, b)
    if a >= 1.0:
        am1 = a - 1.0

        def integrand(x):
            # (1 - x) f(x; a, b) = x^(a-1) (1 - x)^b / B(a, b)
            return math.exp(am1 * math.log(x) + b * math.log1p(-x) - log_beta_fn)

        mean = a / (a + b)
        value, _ = integrate.quad(
            integrand, 0.0, 0.5, epsabs=1e-10, epsrel=1e-10, limit=200,
            points=[mean] if mean < 0.5 else None,
        )
        return float(value)
    inv_a = 1.0 / a
    value, _ = integrate.quad(
        lambda u: (1.0 - u**inv_a) ** b, 0.0, 0.5**a,
        epsabs=1e-10, epsrel=1e-10, limit=200,
    )
    return float(value / (a * np.exp(log_beta_fn)))


def forward_map(params: BetaParams) -> tuple:
    """(majority fraction, expected accuracy) induced by a Beta score density.

    The upper integral reduces to the lower one with swapped parameters:
    substituting x -> 1 - x gives int_{1/2}^1 x f(x; a, b) dx =
    int_0^{1/2} (1 - x) f(x; b, a) dx.
    """
    gamma0 = beta_cdf(params, 0.5)
    accuracy = _correct_side_mass(params.a, params.b) + _correct_side_mass(params.b, params.a)
    return gamma0, accuracy


# Search box for (log a, log b).  Densities outside are numerically
# degenerate spikes; legitimate score densities live well inside.
_LOG_BOUND = 7.0


def _mismatch(log_ab, targets) -> float:
    la, lb = log_ab
    if abs(la) > _LOG_BOUND or abs(lb) > _LOG_BOUND:
        return 1e6 + la * la + lb * lb
    gamma0, acc = forward_map(BetaParams(float(np.exp(la)), float(np.exp(lb))))
    return 0.5 * ((gamma0 - targets[0]) ** 2 + (acc - targets[1]) ** 2)


def solve_prior(knowledge: PriorKnowledge) -> PriorSolveResult:
    """Fit Beta(a, b) whose forward map matches the stated knowledge.

    Nelder-Mead in (log a, log b) from five fixed starts; stops early once a
    start lands well under the success residual.  Raises
    :class:`InfeasibleTargetError` when every start leaves a mean squared
    mismatch of at least 1e-4; the best candidate rides along either way.
    """
    targets = (knowledge.majority_fraction, knowledge.expected_accuracy)
    best = None
    for start in _STARTS:
        res = optimize.minimize(
            _mismatch,
            np.log(start),
            args=(targets,),
            method="Nelder-Mead",
            options={"xatol": 1e-6, "fatol": 1e-14, "maxiter": 250, "maxfev": 500},
        )
        if best is None or res.fun < best.fun:
            best = res
        if best.fun < 1e-10:
            break
    a, b = np.exp(best.x)
    params = BetaParams(float(a), float(b))
    gamma0, acc = forward_map(params)
    result = PriorSolveResult(params, gamma0, acc, float(best.fun))
    if result.residual >= FEASIBLE_RESIDUAL:
        raise InfeasibleTargetError(
            f"targets (gamma0={targets[0]}, accuracy={targets[1]}) are not "
            f"attainable by a Beta score density (best residual {result.residual:.3e})",
            result,
        )
    return result
