"""Domain model for the dimensionless steady quasi-1D PNP ion-channel problem.

Everything here is a pure function of immutable inputs: ion species, channel
cross-section profile, regularized permanent charge, boundary data, and the
electrochemical potential (ideal gas term plus an optional hard-sphere excess
term).  The default geometry is the funnel-neck-funnel channel with breakpoints
at x = 1/3 and x = 2/3.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# breakpoints of the piecewise-linear channel profile
NECK_LEFT = 1.0 / 3.0
NECK_RIGHT = 2.0 / 3.0

_GL5_NODES = np.array([
    -0.9061798459386640, -0.5384693101056831, 0.0,
    0.5384693101056831, 0.9061798459386640,
])
_GL5_WEIGHTS = np.array([
    0.2369268850561891, 0.4786286704993665, 0.5688888888888889,
    0.4786286704993665, 0.2369268850561891,
])


class ValidationError(ValueError):
    """Raised when a domain object violates one of its invariants."""


@dataclass(frozen=True)
class IonSpecies:
    """One ion species: signed valence, diffusion coefficient, hard-sphere radius.

    All quantities are dimensionless; ``hs_radius`` only matters when the
    hard-sphere excess model is enabled.
    """

    valence: int
    diffusion: float = 1.0
    hs_radius: float = 0.0

    def __post_init__(self):
        if self.diffusion <= 0:
            raise ValidationError(f"diffusion coefficient must be > 0, got {self.diffusion}")
        if self.hs_radius < 0:
            raise ValidationError(f"hard-sphere radius must be >= 0, got {self.hs_radius}")


@dataclass(frozen=True)
class ChannelGeometry:
    """Cross-section area profile h(x) on [0, 1].

    ``variant="exact"`` is the continuous piecewise-linear funnel profile
    (wide mouths, narrow neck of area 0.4 on [1/3, 2/3]).  The ``regularized``
    variant replaces a band of half-width ``delta_x`` around each breakpoint
    with steep linear transitions; those transitions dip to negative values
    for small ``delta_x``, so evaluation is guarded by a positivity check.
    """

    variant: str = "exact"
    delta_x: float = 1e-7

    def __post_init__(self):
        if self.variant not in ("exact", "regularized"):
            raise ValidationError(f"unknown geometry variant {self.variant!r}")
        if self.delta_x <= 0:
            raise ValidationError("delta_x must be > 0")


def _h_exact(x: np.ndarray) -> np.ndarray:
    return np.where(
        x < NECK_LEFT,
        3.0 * (0.4 * x + 20.0 * (NECK_LEFT - x)),
        np.where(
            x < NECK_RIGHT,
            3.0 * (0.4 * (x - NECK_LEFT) + 0.4 * (NECK_RIGHT - x)),
            3.0 * (20.0 * (x - NECK_RIGHT) + 0.4 * (1.0 - x)),
        ),
    )


def channel_area(x, geometry: ChannelGeometry = ChannelGeometry()):
    """Evaluate the cross-section area h(x); scalar in, scalar out.

    Raises ValidationError if the regularized variant evaluates to a
    non-positive area (which it does inside its transition bands).
    """
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0) or np.any(xa > 1):
        raise ValidationError("coordinate outside [0, 1]")
    if geometry.variant == "exact":
        out = _h_exact(xa)
    else:
        d = geometry.delta_x
        slope = 14.7 / d
        out = np.where(
            xa < NECK_LEFT - d,
            3.0 * (0.4 * xa + 20.0 * (NECK_LEFT - xa)),
            np.where(
                xa < NECK_LEFT + d,
                slope * (xa - NECK_LEFT - d) + 0.4,
                np.where(
                    xa < NECK_RIGHT - d,
                    3.0 * (0.4 * (xa - NECK_LEFT) + 0.4 * (NECK_RIGHT - xa)),
                    np.where(
                        xa < NECK_RIGHT + d,
                        slope * (xa - NECK_RIGHT + d) + 0.4,
                        3.0 * (20.0 * (xa - NECK_RIGHT) + 0.4 * (1.0 - xa)),
                    ),
                ),
            ),
        )
        if np.any(out <= 0):
            raise ValidationError(
                "regularized channel area is non-positive inside a transition band"
            )
    return out if out.shape else float(out)


@dataclass(frozen=True)
class PermanentCharge:
    """Tanh-regularized permanent charge supported on the channel neck.

    ``amplitude`` is the parameter Q0 (the sharp profile has value 2*Q0 on the
    neck); ``delta`` is the transition width.  Two normalizations of the
    regularization are in circulation:

    * ``unit-plateau``: Q0 * [tanh((x-1/3)/delta) - tanh((x-2/3)/delta)],
      whose plateau equals 2*Q0, matching the sharp profile.  Default.
    * ``paper``: twice that, i.e. plateau 4*Q0.
    """

    amplitude: float
    delta: float = 1.0 / 800.0
    convention: str = "unit-plateau"

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValidationError("permanent-charge amplitude must be >= 0")
        if self.delta <= 0:
            raise ValidationError("regularization width delta must be > 0")
        if self.convention not in ("unit-plateau", "paper"):
            raise ValidationError(f"unknown charge convention {self.convention!r}")


def permanent_charge_density(x, charge: PermanentCharge):
    """Evaluate the regularized charge density Q_delta(x)."""
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0) or np.any(xa > 1):
        raise ValidationError("coordinate outside [0, 1]")
    shape = np.tanh((xa - NECK_LEFT) / charge.delta) - np.tanh((xa - NECK_RIGHT) / charge.delta)
    scale = 2.0 * charge.amplitude if charge.convention == "paper" else charge.amplitude
    out = scale * shape
    return out if out.shape else float(out)


def _gl5_panel(f, lo: float, hi: float) -> float:
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    vals = f(mid + half * _GL5_NODES)
    return half * float(_GL5_WEIGHTS @ vals)


def _adaptive_gl5(f, lo: float, hi: float, rtol: float, depth: int = 0) -> float:
    whole = _gl5_panel(f, lo, hi)
    mid = 0.5 * (lo + hi)
    split = _gl5_panel(f, lo, mid) + _gl5_panel(f, mid, hi)
    if abs(split - whole) <= rtol * abs(split) or depth >= 48:
        return split
    return (_adaptive_gl5(f, lo, mid, rtol, depth + 1)
            + _adaptive_gl5(f, mid, hi, rtol, depth + 1))


def cumulative_resistance(x: float, geometry: ChannelGeometry = ChannelGeometry()) -> float:
    """H(x) = integral of 1/h over [0, x].

    Adaptive composite 5-point Gauss-Legendre (relative tolerance 1e-12) on
    panels split at the neck breakpoints; 1/h is steep approaching the neck,
    so panels are bisected until each converges.
    """
    if not 0.0 <= x <= 1.0:
        raise ValidationError("coordinate outside [0, 1]")
    if x == 0.0:
        return 0.0

    def integrand(pts):
        vals = 1.0 / np.asarray(channel_area(pts, geometry))
        if np.any(~np.isfinite(vals)) or np.any(vals <= 0):
            raise ValidationError("channel area vanished inside the integration range")
        return vals

    cuts = [0.0] + [b for b in (NECK_LEFT, NECK_RIGHT) if b < x] + [x]
    return sum(_adaptive_gl5(integrand, a, b, 1e-13)
               for a, b in zip(cuts[:-1], cuts[1:]))


def mu_ideal(valence: float, phi: float, concentration: float) -> float:
    """Ideal electrochemical potential z*phi + ln(c)."""
    c = np.asarray(concentration, dtype=float)
    if np.any(c <= 0):
        raise ValidationError("concentration must be > 0 for the ideal potential")
    out = valence * np.asarray(phi, dtype=float) + np.log(c)
    return out if out.shape else float(out)


def packing_fraction(concentrations, radii) -> float:
    """Local occupied-volume fraction sum_j (4/3) pi r_j^3 c_j.

    ``concentrations`` may be (n,) for a single point or (n, m) for m points.
    """
    c = np.asarray(concentrations, dtype=float)
    r = np.asarray(radii, dtype=float)
    r3 = r ** 3 if c.ndim == 1 else r[:, None] ** 3
    out = (4.0 * np.pi / 3.0) * np.sum(r3 * c, axis=0)
    return out if np.ndim(out) else float(out)


def mu_hard_sphere(k: int, concentrations, radii):
    """Hard-sphere excess potential for species ``k``.

    Four-term fundamental-measure expression; requires the packing fraction
    to stay strictly below 1.  ``concentrations`` is (n,) or (n, m) for
    vectorized evaluation at m points.
    """
    c = np.asarray(concentrations, dtype=float)
    r = np.asarray(radii, dtype=float)
    rk = r[k]
    if c.ndim == 2:
        rr = r[:, None]
        pf = (4.0 * np.pi / 3.0) * np.sum(rr ** 3 * c, axis=0)
        s2 = np.sum(4.0 * np.pi * rr ** 2 * c, axis=0)
        s1 = np.sum(rr * c, axis=0)
        s0 = np.sum(c, axis=0)
    else:
        pf = packing_fraction(c, r)
        s2 = float(np.sum(4.0 * np.pi * r ** 2 * c))
        s1 = float(np.sum(r * c))
        s0 = float(np.sum(c))
    free = 1.0 - pf
    if np.any(np.asarray(free) <= 0):
        raise ValidationError("hard-sphere packing fraction reached 1")
    out = (
        -np.log(free)
        + rk * s2 / free
        + 4.0 * np.pi * rk ** 2 * s1 / free
        + (4.0 * np.pi / 3.0) * rk ** 3 * s0 / free
    )
    return out if np.ndim(out) else float(out)


def mu_hard_sphere_gradient(k: int, concentrations, radii):
    """d mu_k^HS / d c_i for all i; shape (n,) or (n, m)."""
    c = np.asarray(concentrations, dtype=float)
    r = np.asarray(radii, dtype=float)
    vol = (4.0 * np.pi / 3.0) * r ** 3
    if c.ndim == 2:
        rr = r[:, None]
        pf = np.sum(vol[:, None] * c, axis=0)
        s2 = np.sum(4.0 * np.pi * rr ** 2 * c, axis=0)
        s1 = np.sum(rr * c, axis=0)
        s0 = np.sum(c, axis=0)
    else:
        pf = float(np.sum(vol * c))
        s2 = float(np.sum(4.0 * np.pi * r ** 2 * c))
        s1 = float(np.sum(r * c))
        s0 = float(np.sum(c))
    free = 1.0 - pf
    if np.any(np.asarray(free) <= 0):
        raise ValidationError("hard-sphere packing fraction reached 1")
    rk = r[k]
    n = r.size
    grads = []
    for i in range(n):
        vi = vol[i]
        g = (
            vi / free
            + rk * (4.0 * np.pi * r[i] ** 2 * free + s2 * vi) / free ** 2
            + 4.0 * np.pi * rk ** 2 * (r[i] * free + s1 * vi) / free ** 2
            + (4.0 * np.pi / 3.0) * rk ** 3 * (free + s0 * vi) / free ** 2
        )
        grads.append(g)
    return np.asarray(grads)


@dataclass(frozen=True)
class BoundaryConditions:
    """Dirichlet data: phi(0) = voltage, phi(1) = 0, c_k(0) = left_k, c_k(1) = right_k.

    Construction rejects non-positive concentrations and boundary data that is
    not electroneutral with respect to ``valences``.
    """

    voltage: float
    left: tuple
    right: tuple
    valences: tuple

    def __post_init__(self):
        left = tuple(float(v) for v in self.left)
        right = tuple(float(v) for v in self.right)
        valences = tuple(int(z) for z in self.valences)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)
        object.__setattr__(self, "valences", valences)
        if not (len(left) == len(right) == len(valences)):
            raise ValidationError("left/right/valences must have matching lengths")
        if any(v <= 0 for v in left + right):
            raise ValidationError("boundary concentrations must be > 0")
        for name, conc in (("left", left), ("right", right)):
            charge = sum(z * c for z, c in zip(valences, conc))
            scale = sum(abs(z) * c for z, c in zip(valences, conc))
            if abs(charge) > 1e-12 * scale:
                raise ValidationError(f"{name} boundary data violates electroneutrality")

    @property
    def n_species(self) -> int:
        return len(self.left)


@dataclass(frozen=True)
class ExcessModel:
    """Which excess chemical potential to include: 'ideal' (none) or 'hard-sphere'."""

    kind: str = "ideal"

    def __post_init__(self):
        if self.kind not in ("ideal", "hard-sphere"):
            raise ValidationError(f"unknown excess model {self.kind!r}")


def default_species(radii=(0.0, 0.0)) -> tuple:
    """The two-species configuration used throughout: z = +1/-1, D = 1."""
    return (
        IonSpecies(valence=1, diffusion=1.0, hs_radius=radii[0]),
        IonSpecies(valence=-1, diffusion=1.0, hs_radius=radii[1]),
    )


@dataclass(frozen=True)
class PnpProblem:
    """A complete dimensionless problem instance."""

    epsilon: float
    species: tuple
    geometry: ChannelGeometry
    charge: PermanentCharge
    bc: BoundaryConditions
    excess: ExcessModel = field(default_factory=ExcessModel)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be > 0")
        if len(self.species) < 2:
            raise ValidationError("need at least two ion species")
        if len(self.species) != self.bc.n_species:
            raise ValidationError("species count does not match boundary data")
        if tuple(s.valence for s in self.species) != self.bc.valences:
            raise ValidationError("species valences do not match boundary data")
        if self.excess.kind == "hard-sphere" and all(s.hs_radius == 0 for s in self.species):
            # radii all zero is allowed (reduces to ideal) but flag missing setup
            pass

    @property
    def n_species(self) -> int:
        return len(self.species)

    @property
    def valences(self) -> np.ndarray:
        return np.array([s.valence for s in self.species], dtype=float)

    @property
    def diffusions(self) -> np.ndarray:
        return np.array([s.diffusion for s in self.species], dtype=float)

    @property
    def radii(self) -> np.ndarray:
        return np.array([s.hs_radius for s in self.species], dtype=float)


def paper_problem(
    L: float = 0.008,
    R: float = 0.001,
    voltage: float = 0.0,
    q0: float = 0.0,
    epsilon: float = 1e-5,
    delta: float = 1.0 / 800.0,
    convention: str = "unit-plateau",
    excess: str = "ideal",
    radii=(0.0, 0.0),
    geometry: ChannelGeometry | None = None,
) -> PnpProblem:
    """Standard two-species instance with equal boundary salt concentrations.

    ``q0`` is the neck plateau parameter 2*Q0 of the sharp profile.
    """
    species = default_species(radii)
    return PnpProblem(
        epsilon=epsilon,
        species=species,
        geometry=geometry or ChannelGeometry(),
        charge=PermanentCharge(amplitude=q0 / 2.0, delta=delta, convention=convention),
        bc=BoundaryConditions(voltage=voltage, left=(L, L), right=(R, R), valences=(1, -1)),
        excess=ExcessModel(kind=excess),
    )


@dataclass(frozen=True)
class PhysicalParameters:
    """Dimensional inputs for the nondimensionalization map."""

    relative_permittivity: float
    vacuum_permittivity: float
    elementary_charge: float
    boltzmann_constant: float
    temperature: float
    reference_concentration: float
    reference_diffusion: float
    channel_start: float
    channel_end: float
    applied_voltage: float
    left_concentrations: tuple
    right_concentrations: tuple

    def __post_init__(self):
        positive = (
            self.relative_permittivity, self.vacuum_permittivity,
            self.elementary_charge, self.boltzmann_constant, self.temperature,
            self.reference_concentration, self.reference_diffusion,
        )
        if any(v <= 0 for v in positive):
            raise ValidationError("physical constants must be > 0")
        if self.channel_end <= self.channel_start:
            raise ValidationError("channel_end must exceed channel_start")
        if any(v <= 0 for v in tuple(self.left_concentrations) + tuple(self.right_concentrations)):
            raise ValidationError("dimensional concentrations must be > 0")


def nondimensionalize(
    params: PhysicalParameters,
    valences=(1, -1),
    geometry: ChannelGeometry | None = None,
    charge: PermanentCharge | None = None,
    excess: ExcessModel | None = None,
) -> PnpProblem:
    """Map dimensional parameters onto a dimensionless PnpProblem.

    eps^2 = eps_r eps_0 k_B T / (e_0^2 (b_0-a_0)^2 C_0), V = e_0 V_dim / (k_B T),
    L_k = L_dim/C_0, R_k = R_dim/C_0.  Structural pieces (geometry, charge,
    excess model) default to the standard channel with zero charge.
    """
    p = params
    length = p.channel_end - p.channel_start
    eps2 = (
        p.relative_permittivity * p.vacuum_permittivity * p.boltzmann_constant * p.temperature
        / (p.elementary_charge ** 2 * length ** 2 * p.reference_concentration)
    )
    voltage = p.elementary_charge * p.applied_voltage / (p.boltzmann_constant * p.temperature)
    left = tuple(v / p.reference_concentration for v in p.left_concentrations)
    right = tuple(v / p.reference_concentration for v in p.right_concentrations)
    bc = BoundaryConditions(voltage=voltage, left=left, right=right, valences=tuple(valences))
    species = tuple(IonSpecies(valence=z) for z in valences)
    return PnpProblem(
        epsilon=math.sqrt(eps2),
        species=species,
        geometry=geometry or ChannelGeometry(),
        charge=charge or PermanentCharge(amplitude=0.0),
        bc=bc,
        excess=excess or ExcessModel(),
    )
