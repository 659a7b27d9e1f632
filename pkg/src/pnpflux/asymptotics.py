"""Closed-form flux expansions for small and large permanent charge.

These are the analytical oracles against which the finite-element pipeline is
validated: zeroth- and first-order flux coefficients in the charge amplitude
Q0, the critical voltages where the charge switches from enhancing to
inhibiting each species, the large-Q0 saturation coefficients, and the flux
ratio itself.  Everything assumes the two-species setting z_1 = +1, z_2 = -1
with equal boundary salt concentrations L and R.

The first-order small-Q0 coefficients were re-derived from the singular-limit
outer system (electroneutral segments joined by electrochemical-potential
matching at the neck edges) and validated against a high-precision numerical
solve of that system; see tests/test_asymptotics.py for the frozen oracle
values.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .model import ChannelGeometry, NECK_LEFT, NECK_RIGHT, cumulative_resistance

Z1, Z2 = 1, -1


class DegenerateInputError(ValueError):
    """Raised when a closed form is evaluated on its singular set."""


class UnsupportedCaseError(ValueError):
    """Raised for parameter ranges the classification does not cover."""


class Regime(enum.Enum):
    """Ordering of the two flux ratios relative to 1."""

    I = "1 < lambda_1 < lambda_2"
    II = "lambda_1 < 1 < lambda_2"
    III = "lambda_1 < lambda_2 < 1"


@dataclass(frozen=True)
class GeometryMoments:
    """H(1) and the normalized neck coordinates alpha = H(a)/H(1), beta = H(b)/H(1)."""

    H1: float
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.H1 > 0 and 0 < self.alpha < self.beta < 1):
            raise ValueError("invalid geometry moments")

    @classmethod
    def from_geometry(cls, geometry: ChannelGeometry = ChannelGeometry()) -> "GeometryMoments":
        H1 = cumulative_resistance(1.0, geometry)
        return cls(
            H1=H1,
            alpha=cumulative_resistance(NECK_LEFT, geometry) / H1,
            beta=cumulative_resistance(NECK_RIGHT, geometry) / H1,
        )


@dataclass(frozen=True)
class SmallQExpansion:
    """J_k(Q0) = J_k0 + J_k1 * Q0 + O(Q0^2), plus the auxiliaries A and B."""

    J10: float
    J11: float
    J20: float
    J21: float
    A: float
    B: float

    def slope(self, k: int) -> float:
        """First-order slope of lambda_k in Q0: J_k1 / J_k0."""
        if k == 1:
            return self.J11 / self.J10
        if k == 2:
            return self.J21 / self.J20
        raise ValueError("species index must be 1 or 2")


@dataclass(frozen=True)
class LargeQExpansion:
    """J_k(nu) = J_k0_inf + J_k1_inf * nu + O(nu^2) with nu = 1/Q0."""

    J10_inf: float
    J11_inf: float
    J20_inf: float
    J21_inf: float


def _check_lr(L: float, R: float):
    if L <= 0 or R <= 0:
        raise DegenerateInputError("boundary concentrations must be > 0")
    if L == R:
        raise DegenerateInputError(
            "L = R makes the expansion denominators vanish (limit not implemented)"
        )


def small_q_expansion(V: float, L: float, R: float, moments: GeometryMoments) -> SmallQExpansion:
    """Small-Q0 flux coefficients.

    The zeroth order is the charge-free channel flux; the first order carries
    the geometry through A and B:

        A = (beta - alpha) (L - R)^2 / (S_a S_b),
        B = ln(L/R) ln(S_a/S_b) / A,
        S_a = (1-alpha) L + alpha R,  S_b = (1-beta) L + beta R.
    """
    _check_lr(L, R)
    alpha, beta, H1 = moments.alpha, moments.beta, moments.H1
    lnt = math.log(L / R)
    Sa = (1 - alpha) * L + alpha * R
    Sb = (1 - beta) * L + beta * R
    A = (beta - alpha) * (L - R) ** 2 / (Sa * Sb)
    B = lnt * math.log(Sa / Sb) / A
    J10 = (L - R) * (V + lnt) / (H1 * lnt)
    J20 = (L - R) * (lnt - V) / (H1 * lnt)
    J11 = A * ((1 - B) * V - lnt) * (V + lnt) / (H1 * lnt ** 3)
    J21 = A * ((1 - B) * V + lnt) * (lnt - V) / (H1 * lnt ** 3)
    return SmallQExpansion(J10=J10, J11=J11, J20=J20, J21=J21, A=A, B=B)


def small_q_critical_voltages(L: float, R: float, moments: GeometryMoments) -> tuple:
    """(V_1^0, V_2^0): voltages where the first-order lambda_k slope vanishes.

    V_1^0 = -(ln L - ln R)/(z_2 (1 - B)) and V_2^0 likewise with z_1; for the
    symmetric valences used here the pair is exactly antisymmetric.
    """
    _check_lr(L, R)
    B = small_q_expansion(0.0, L, R, moments).B
    if B == 1.0:
        raise DegenerateInputError("B = 1: critical voltages are at infinity")
    lnt = math.log(L / R)
    return (-lnt / (Z2 * (1 - B)), -lnt / (Z1 * (1 - B)))


def gamma_threshold(t: float) -> float:
    """gamma(t) = (t ln t - t + 1) / ((t - 1) ln t); threshold for alpha in the
    small-Q0 classification.  The removable limit gamma(1) = 1/2 is rejected."""
    if t <= 0:
        raise DegenerateInputError("t must be > 0")
    if t == 1.0:
        raise DegenerateInputError("t = 1 is a removable singularity (limit 1/2)")
    lnt = math.log(t)
    return (t * lnt - t + 1.0) / ((t - 1.0) * lnt)


def _g(beta: float, t: float, alpha: float) -> float:
    Ta = (1 - alpha) * t + alpha
    Tb = (1 - beta) * t + beta
    return Ta * Tb * math.log(t) * math.log(Tb / Ta) + (beta - alpha) * (t - 1.0) ** 2


def beta1_root(t: float, alpha: float, tol: float = 1e-10) -> float:
    """Unique root beta_1 of g on (alpha, 1), by bisection.

    Exists when alpha < gamma(t); raises otherwise (no sign change).
    """
    lo, hi = alpha + 1e-12, 1.0 - 1e-12
    glo, ghi = _g(lo, t, alpha), _g(hi, t, alpha)
    if glo * ghi > 0:
        raise DegenerateInputError(
            "g does not change sign on (alpha, 1); requires alpha < gamma(t)"
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _g(mid, t, alpha) * glo <= 0:
            hi = mid
        else:
            lo = mid
            glo = _g(lo, t, alpha)
    return 0.5 * (lo + hi)


def classify_small_q(V: float, L: float, R: float, moments: GeometryMoments) -> Regime:
    """Regime of (lambda_1, lambda_2) relative to 1 for small Q0, t = L/R > 1."""
    _check_lr(L, R)
    t = L / R
    if t <= 1:
        raise UnsupportedCaseError("classification implemented for t = L/R > 1 only")
    V1, V2 = small_q_critical_voltages(L, R, moments)
    alpha, beta = moments.alpha, moments.beta
    gamma = gamma_threshold(t)
    branch_one = alpha < gamma and beta < beta1_root(t, alpha)
    if branch_one:
        # V_1^0 < 0 < V_2^0
        if V < V1:
            return Regime.I
        if V < V2:
            return Regime.II
        return Regime.III
    # V_1^0 > 0 > V_2^0
    if V > V1:
        return Regime.I
    if V > V2:
        return Regime.II
    return Regime.III


def large_q_expansion(V: float, L: float, R: float, moments: GeometryMoments) -> LargeQExpansion:
    """Large-Q0 saturation coefficients in nu = 1/Q0.

    J_10_inf vanishes identically (the charge shuts off the cation flux);
    J_21_inf is singular on the line V = ln(L/R).
    """
    _check_lr(L, R)
    alpha, beta, H1 = moments.alpha, moments.beta, moments.H1
    lnt = math.log(L / R)
    sqeVL = math.sqrt(math.exp(V) * L) if V < 700 else math.inf
    sqR = math.sqrt(R)
    sq_emVL = math.sqrt(math.exp(-V) * L) if V > -700 else math.inf
    core = (1 - beta) * L + alpha * R

    J11_inf = (
        (1.0 / (2.0 * H1 * (beta - alpha)))
        * (core / ((1 - beta) * sqeVL + alpha * sqR)) ** 2
        * (math.exp(V) * L - R)
    )
    J20_inf = (
        (2.0 * math.sqrt(L * R) / H1)
        * (sq_emVL - sqR)
        / ((1 - beta) * math.sqrt(L) + alpha * math.sqrt(math.exp(-V) * R))
    )
    if abs(sq_emVL - sqR) <= 1e-12 * sqR:
        raise DegenerateInputError("V = ln(L/R): J_21_inf has a vanishing denominator")
    den = (1 - beta) * sqeVL + alpha * sqR
    J21_inf = (
        -(beta - alpha) * math.exp(V) * L * R * core / (H1 * den ** 3) * (sq_emVL - sqR)
        + (math.exp(V) * L - R) * (-V + lnt) * core ** 3
        / (4.0 * (beta - alpha) * H1 * (sq_emVL - sqR) * den ** 3)
        - (math.exp(V) * L - R) / (2.0 * (beta - alpha) * H1) * (core / den) ** 2
    )
    return LargeQExpansion(J10_inf=0.0, J11_inf=J11_inf, J20_inf=J20_inf, J21_inf=J21_inf)


def lambda2_large_q_limit(V: float, t: float, alpha: float, beta: float) -> float:
    """Limit of lambda_2 as Q0 -> infinity:

        2 (t - sqrt(e^V t)) ln t / ((t-1) ((1-beta) sqrt(e^V t) + alpha) (ln t - V)).
    """
    if t <= 0 or t == 1.0:
        raise DegenerateInputError("t must be positive and different from 1")
    lnt = math.log(t)
    if V == lnt:
        raise DegenerateInputError("V = ln t is a removable singularity of the limit")
    if V < 700:
        s = math.sqrt(math.exp(V) * t)
        return 2.0 * (t - s) * lnt / ((t - 1.0) * ((1 - beta) * s + alpha) * (lnt - V))
    # e^V overflows; the s -> inf reduction is exact to O(e^(-V/2))
    return 2.0 * lnt / ((t - 1.0) * (1 - beta) * (V - lnt))


def large_q_critical_voltages(
    L: float,
    R: float,
    moments: GeometryMoments,
    v_range: tuple = (-200.0, 200.0),
    tol: float = 1e-6,
) -> tuple:
    """The two roots of lambda_2_inf(V) = 1, by bracketing scan plus bisection.

    Scans ``v_range`` on a fine grid (skipping the removable point V = ln t),
    requires exactly two sign changes, and polishes each to ``tol``.
    """
    _check_lr(L, R)
    t = L / R
    lnt = math.log(t)
    f = lambda V: lambda2_large_q_limit(V, t, moments.alpha, moments.beta) - 1.0
    grid = np.linspace(v_range[0], v_range[1], 4001)
    grid = grid[np.abs(grid - lnt) > 1e-6]
    vals = np.array([f(v) for v in grid])
    flips = np.where(np.sign(vals[:-1]) != np.sign(vals[1:]))[0]
    if len(flips) != 2:
        raise DegenerateInputError(
            f"expected 2 sign changes of lambda_2_inf - 1 on {v_range}, found {len(flips)}"
        )
    roots = []
    for i in flips:
        lo, hi = grid[i], grid[i + 1]
        flo = vals[i]
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            fm = f(mid)
            if flo * fm <= 0:
                hi = mid
            else:
                lo, flo = mid, fm
        roots.append(0.5 * (lo + hi))
    return tuple(sorted(roots))


def flux_ratio(J_at_Q: float, J_at_zero: float) -> float:
    """lambda_k = J_k(Q) / J_k(0); rejects a vanishing reference flux."""
    if abs(J_at_zero) < 1e-14:
        raise DegenerateInputError(
            "reference flux is zero: boundary data is at equilibrium for this species"
        )
    return J_at_Q / J_at_zero
