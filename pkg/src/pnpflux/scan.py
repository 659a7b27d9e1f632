"""Parameter sweeps and the (q0, V) flux-ratio bifurcation diagram.

The charge axis everywhere is q0 = 2*Q0, the neck plateau of the sharp
profile.  Flux ratios compare each solve against a zero-charge solve at the
same voltage.  Surfaces are evaluated row by row (one row per voltage, warm
starting along the ascending charge axis); rows are independent and can be
dispatched to worker processes, with results keyed by row index so the
output is identical for any worker count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from multiprocessing import get_context

import numpy as np

from .asymptotics import Regime, flux_ratio
from .fem import DiscreteSolution, SolveError, SolverControls
from .mmpde import AdaptResult, MonitorConfig, adapt_and_solve
from .model import PnpProblem, ValidationError, paper_problem


@dataclass(frozen=True)
class ProblemTemplate:
    """Everything that stays fixed across a sweep or a diagram."""

    L: float = 0.008
    R: float = 0.001
    epsilon: float = 1e-5
    n_nodes: int = 301
    delta: float = 1.0 / 800.0
    charge_convention: str = "unit-plateau"
    excess: str = "ideal"
    radii: tuple = (0.0, 0.0)
    monitor_variant: str = "boundary"
    mesh_update: str = "direct"
    n_outer: int = 5
    controls: SolverControls = field(default_factory=SolverControls)

    def problem(self, q0: float, voltage: float) -> PnpProblem:
        return paper_problem(
            L=self.L, R=self.R, voltage=voltage, q0=q0, epsilon=self.epsilon,
            delta=self.delta, convention=self.charge_convention,
            excess=self.excess, radii=self.radii,
        )

    def monitor_config(self) -> MonitorConfig:
        return MonitorConfig(variant=self.monitor_variant)

    def solve(self, q0: float, voltage: float,
              guess: DiscreteSolution | None = None) -> AdaptResult:
        return adapt_and_solve(
            self.problem(q0, voltage),
            n_nodes=self.n_nodes,
            controls=self.controls,
            n_outer=self.n_outer,
            config=self.monitor_config(),
            mesh_update=self.mesh_update,
            guess=guess,
        )


@dataclass(frozen=True)
class AxisSpec:
    """One diagram axis: range, point count, and spacing rule.

    Spacings: ``linear``, ``log``, or ``hybrid`` (log up to the geometric
    midpoint of the range, then linear; the diagram default for the charge
    axis, whose features cluster at small q0).
    """

    lo: float
    hi: float
    count: int
    spacing: str = "linear"

    def __post_init__(self):
        if self.count < 2:
            raise ValidationError("axis needs at least 2 points")
        if self.hi <= self.lo:
            raise ValidationError("axis range must be increasing")
        if self.spacing not in ("linear", "log", "hybrid"):
            raise ValidationError(f"unknown spacing {self.spacing!r}")
        if self.spacing in ("log", "hybrid") and self.lo <= 0:
            raise ValidationError("log spacing needs a positive lower bound")

    def values(self) -> np.ndarray:
        if self.spacing == "linear":
            return np.linspace(self.lo, self.hi, self.count)
        if self.spacing == "log":
            return np.geomspace(self.lo, self.hi, self.count)
        mid = math.sqrt(self.lo * self.hi)
        n_log = self.count // 2 + 1
        left = np.geomspace(self.lo, mid, n_log)
        right = np.linspace(mid, self.hi, self.count - n_log + 1)
        return np.concatenate([left, right[1:]])


@dataclass(frozen=True)
class GridSpec:
    """Charge/voltage grid plus the shared problem template."""

    q0_axis: AxisSpec
    v_axis: AxisSpec
    template: ProblemTemplate = field(default_factory=ProblemTemplate)

    def __post_init__(self):
        if self.q0_axis.lo <= 0:
            raise ValidationError("q0 axis must be strictly positive (q0 = 0 is analytic)")


@dataclass(frozen=True)
class SweepResult:
    """Per-point fluxes and ratios for a one-parameter sweep."""

    q0: np.ndarray
    voltage: np.ndarray
    J: np.ndarray           # (2, n_points)
    lam: np.ndarray         # (2, n_points)
    ok: np.ndarray          # (n_points,) bool
    reference_J: np.ndarray  # (2,) for sweep_q, (2, n_points) for sweep_v


@dataclass(frozen=True)
class RatioSurface:
    """lambda_k over the (q0, V) grid, with per-row zero-charge references."""

    q0: np.ndarray           # (nq,)
    voltage: np.ndarray      # (nv,)
    J: np.ndarray            # (2, nv, nq)
    lam: np.ndarray          # (2, nv, nq)
    ok: np.ndarray           # (nv, nq) bool
    reference_J: np.ndarray  # (2, nv)


@dataclass(frozen=True)
class Contour:
    species: int
    points: np.ndarray  # (m, 2) columns (q0, V)


@dataclass(frozen=True)
class ContourSet:
    curves: tuple


@dataclass(frozen=True)
class BifurcationPoint:
    species: int
    q0: float
    voltage: float
    kind: str = "saddle-node"


def _lam_pair(result: AdaptResult, reference: AdaptResult) -> tuple:
    Jq = result.fluxes.averages
    J0 = reference.fluxes.averages
    return flux_ratio(Jq[0], J0[0]), flux_ratio(Jq[1], J0[1])


def sweep_q(voltage: float, q0_values, template: ProblemTemplate = ProblemTemplate()) -> SweepResult:
    """Warm-started ascending sweep in q0 at fixed voltage."""
    q0_values = np.asarray(q0_values, dtype=float)
    if np.any(np.diff(q0_values) <= 0):
        raise ValidationError("q0 values must be sorted ascending")
    reference = template.solve(0.0, voltage)
    J = np.full((2, q0_values.size), np.nan)
    lam = np.full((2, q0_values.size), np.nan)
    ok = np.zeros(q0_values.size, dtype=bool)
    warm = reference.solution
    for i, q0 in enumerate(q0_values):
        try:
            result = template.solve(q0, voltage, guess=warm)
        except SolveError:
            continue
        warm = result.solution
        J[:, i] = result.fluxes.averages
        lam[0, i], lam[1, i] = _lam_pair(result, reference)
        ok[i] = True
    return SweepResult(
        q0=q0_values, voltage=np.full(q0_values.size, voltage),
        J=J, lam=lam, ok=ok, reference_J=reference.fluxes.averages.copy(),
    )


def sweep_v(q0: float, v_values, template: ProblemTemplate = ProblemTemplate()) -> SweepResult:
    """Sweep in voltage at fixed q0; each voltage gets its own reference solve."""
    v_values = np.asarray(v_values, dtype=float)
    if np.any(np.diff(v_values) <= 0):
        raise ValidationError("voltage values must be sorted ascending")
    J = np.full((2, v_values.size), np.nan)
    lam = np.full((2, v_values.size), np.nan)
    refJ = np.full((2, v_values.size), np.nan)
    ok = np.zeros(v_values.size, dtype=bool)
    warm_ref = None
    warm = None
    for i, v in enumerate(v_values):
        try:
            reference = template.solve(0.0, v, guess=warm_ref)
            result = template.solve(q0, v, guess=warm)
        except SolveError:
            continue
        warm_ref = reference.solution
        warm = result.solution
        refJ[:, i] = reference.fluxes.averages
        J[:, i] = result.fluxes.averages
        lam[0, i], lam[1, i] = _lam_pair(result, reference)
        ok[i] = True
    return SweepResult(q0=np.full(v_values.size, q0), voltage=v_values,
                       J=J, lam=lam, ok=ok, reference_J=refJ)


def _surface_row(args):
    i, voltage, q0_values, template = args
    row = sweep_q(voltage, q0_values, template)
    return i, row.J, row.lam, row.ok, row.reference_J


def build_surface(grid: GridSpec, workers: int = 1) -> RatioSurface:
    """Evaluate lambda_k over the grid; rows keyed by index for determinism."""
    q0_values = grid.q0_axis.values()
    v_values = grid.v_axis.values()
    tasks = [(i, float(v), q0_values, grid.template) for i, v in enumerate(v_values)]
    nv, nq = v_values.size, q0_values.size
    J = np.full((2, nv, nq), np.nan)
    lam = np.full((2, nv, nq), np.nan)
    ok = np.zeros((nv, nq), dtype=bool)
    refJ = np.full((2, nv), np.nan)
    if workers <= 1:
        rows = map(_surface_row, tasks)
    else:
        ctx = get_context("fork")
        with ctx.Pool(workers) as pool:
            rows = pool.map(_surface_row, tasks)
    for i, Jrow, lamrow, okrow, ref in rows:
        J[:, i, :] = Jrow
        lam[:, i, :] = lamrow
        ok[i, :] = okrow
        refJ[:, i] = ref
    return RatioSurface(q0=q0_values, voltage=v_values, J=J, lam=lam, ok=ok,
                        reference_J=refJ)


class SolverRefiner:
    """lambda evaluation at arbitrary (q0, V) with cached per-voltage references.

    Successive calls reuse the previous converged state as a Newton seed
    (evaluation points along a contour or bisection path are close together);
    the converged answers themselves are seed-independent.
    """

    def __init__(self, template: ProblemTemplate):
        self.template = template
        self._refs = {}
        self._warm = None
        self._warm_ref = None

    def __call__(self, q0: float, voltage: float) -> tuple:
        ref = self._refs.get(voltage)
        if ref is None:
            ref = self.template.solve(0.0, voltage, guess=self._warm_ref)
            self._refs[voltage] = ref
            self._warm_ref = ref.solution
        result = self.template.solve(q0, voltage, guess=self._warm or ref.solution)
        self._warm = result.solution
        return _lam_pair(result, ref)


def _refine_edge(p0, p1, f0, f1, species, refiner, tol, max_iter):
    """Bisect the straight edge p0-p1 (in (q0, V)) until |lambda-1| < tol."""
    a, b = np.asarray(p0, float), np.asarray(p1, float)
    fa = f0
    best, best_val = None, np.inf
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        lam = refiner(mid[0], mid[1])
        fm = lam[species - 1] - 1.0
        if abs(fm) < best_val:
            best, best_val = mid, abs(fm)
        if abs(fm) < tol:
            return mid, abs(fm)
        if fa * fm <= 0:
            b = mid
        else:
            a, fa = mid, fm
    return best, best_val


_EDGE_SOUTH, _EDGE_NORTH, _EDGE_WEST, _EDGE_EAST = 0, 1, 2, 3


def trace_unity_contours(
    surface: RatioSurface,
    template: ProblemTemplate | None = None,
    refiner=None,
    tol: float = 1e-3,
    max_refine: int = 12,
) -> ContourSet:
    """Trace lambda_k = 1 polylines by marching squares over the surface.

    Every sign-changing cell edge is refined by bisection with fresh solves
    (or the supplied ``refiner``) until |lambda_k - 1| < tol at the emitted
    vertex; crossings are linked cell by cell into polylines.  Cells touching
    unconverged grid points are skipped.
    """
    if refiner is None:
        if template is None:
            raise ValidationError("need a template or an explicit refiner")
        solver_refiner = SolverRefiner(template)
        refiner = lambda q0, v: solver_refiner(q0, v)
    q0s, vs = surface.q0, surface.voltage
    curves = []
    for species in (1, 2):
        F = surface.lam[species - 1] - 1.0
        # treat exact zeros as positive so contours through grid nodes are
        # still picked up by the surrounding edges
        S = np.where(F >= 0, 1.0, -1.0)
        vertex_cache = {}

        def edge_vertex(kind, i, j):
            key = (kind, i, j)
            if key in vertex_cache:
                return vertex_cache[key]
            if kind == "h":  # horizontal edge: (i, j) - (i, j+1), V fixed
                p0, p1 = (q0s[j], vs[i]), (q0s[j + 1], vs[i])
                f0, f1 = F[i, j], F[i, j + 1]
            else:            # vertical edge: (i, j) - (i+1, j), q0 fixed
                p0, p1 = (q0s[j], vs[i]), (q0s[j], vs[i + 1])
                f0, f1 = F[i, j], F[i + 1, j]
            point, err = _refine_edge(p0, p1, f0, f1, species, refiner, tol, max_refine)
            vertex_cache[key] = (tuple(point), err)
            return vertex_cache[key]

        segments = []  # pairs of edge keys
        nv, nq = F.shape
        for i in range(nv - 1):
            for j in range(nq - 1):
                if not (surface.ok[i, j] and surface.ok[i, j + 1]
                        and surface.ok[i + 1, j] and surface.ok[i + 1, j + 1]):
                    continue
                corners = [F[i, j], F[i, j + 1], F[i + 1, j + 1], F[i + 1, j]]
                signs = [S[i, j], S[i, j + 1], S[i + 1, j + 1], S[i + 1, j]]
                south = signs[0] * signs[1] < 0
                east = signs[1] * signs[2] < 0
                north = signs[3] * signs[2] < 0
                west = signs[0] * signs[3] < 0
                hit = []
                if south:
                    hit.append(("h", i, j))
                if north:
                    hit.append(("h", i + 1, j))
                if west:
                    hit.append(("v", i, j))
                if east:
                    hit.append(("v", i, j + 1))
                if len(hit) == 2:
                    segments.append((hit[0], hit[1]))
                elif len(hit) == 4:
                    # saddle cell: pair by the sign at the cell center
                    center = np.mean(corners)
                    if (center > 0) == (corners[0] > 0):
                        segments.append((("h", i, j), ("v", i, j + 1)))
                        segments.append((("h", i + 1, j), ("v", i, j)))
                    else:
                        segments.append((("h", i, j), ("v", i, j)))
                        segments.append((("h", i + 1, j), ("v", i, j + 1)))

        # link segments into polylines
        adjacency = {}
        for a, b in segments:
            adjacency.setdefault(a, []).append(b)
            adjacency.setdefault(b, []).append(a)
        visited = set()
        for start in sorted(adjacency, key=lambda k: (k[0], k[1], k[2])):
            if start in visited or len(adjacency[start]) != 1:
                continue
            chain = [start]
            visited.add(start)
            while True:
                nxt = [e for e in adjacency[chain[-1]] if e not in visited]
                if not nxt:
                    break
                chain.append(nxt[0])
                visited.add(nxt[0])
            if len(chain) >= 2:
                pts = np.array([edge_vertex(*e)[0] for e in chain])
                curves.append(Contour(species=species, points=pts))
        # closed loops: any remaining unvisited edges
        for start in sorted(adjacency, key=lambda k: (k[0], k[1], k[2])):
            if start in visited:
                continue
            chain = [start]
            visited.add(start)
            while True:
                nxt = [e for e in adjacency[chain[-1]] if e not in visited]
                if not nxt:
                    break
                chain.append(nxt[0])
                visited.add(nxt[0])
            if len(chain) >= 3:
                pts = np.array([edge_vertex(*e)[0] for e in chain + [start]])
                curves.append(Contour(species=species, points=pts))
    return ContourSet(curves=tuple(curves))


def classify_regions(surface: RatioSurface):
    """Region label per converged grid point, plus an anomaly mask.

    Labels follow the sign pattern of (lambda_1 - 1, lambda_2 - 1); the
    pattern lambda_1 > 1 > lambda_2 cannot occur for positive charge and is
    flagged instead of labeled.
    """
    labels = np.full(surface.ok.shape, "", dtype=object)
    anomalies = np.zeros(surface.ok.shape, dtype=bool)
    l1, l2 = surface.lam[0], surface.lam[1]
    for i in range(surface.ok.shape[0]):
        for j in range(surface.ok.shape[1]):
            if not surface.ok[i, j]:
                continue
            above1, above2 = l1[i, j] > 1.0, l2[i, j] > 1.0
            if above1 and above2:
                labels[i, j] = Regime.I.name
            elif not above1 and above2:
                labels[i, j] = Regime.II.name
            elif not above1 and not above2:
                labels[i, j] = Regime.III.name
            else:
                anomalies[i, j] = True
    return labels, anomalies


def detect_saddle_nodes(contours: ContourSet) -> list:
    """Interior extrema of q0 along each polyline, parabola-refined.

    A fold of lambda_k = 1 in the (q0, V) plane is a point where two roots in
    V merge; on a traced polyline it shows up as a local extremum of q0
    against arc position.
    """
    points = []
    for curve in contours.curves:
        pts = curve.points
        if pts.shape[0] < 3:
            continue
        q = pts[:, 0]
        v = pts[:, 1]
        for i in range(1, len(q) - 1):
            is_max = q[i] > q[i - 1] and q[i] > q[i + 1]
            is_min = q[i] < q[i - 1] and q[i] < q[i + 1]
            if not (is_max or is_min):
                continue
            trip_v = v[i - 1:i + 2]
            trip_q = q[i - 1:i + 2]
            if len(np.unique(trip_v)) == 3:
                coef = np.polyfit(trip_v, trip_q, 2)
                if coef[0] != 0.0:
                    v_star = -coef[1] / (2 * coef[0])
                    if min(trip_v) <= v_star <= max(trip_v):
                        q_star = float(np.polyval(coef, v_star))
                        points.append(BifurcationPoint(
                            species=curve.species, q0=q_star, voltage=float(v_star)))
                        continue
            points.append(BifurcationPoint(
                species=curve.species, q0=float(q[i]), voltage=float(v[i])))
    return points


@dataclass(frozen=True)
class ProfileSet:
    """Internal profiles of one converged solve."""

    x: np.ndarray
    phi: np.ndarray
    concentrations: np.ndarray
    mu: np.ndarray
    fluxes: "FluxReport"
    lam: tuple | None


def internal_profiles(template: ProblemTemplate, q0: float, voltage: float,
                      with_reference: bool = True) -> ProfileSet:
    """Solve one point and extract nodal profiles plus per-element fluxes."""
    from .fem import compute_fluxes, electrochemical_profile

    result = template.solve(q0, voltage)
    problem = template.problem(q0, voltage)
    mu = electrochemical_profile(problem, result.solution)
    lam = None
    if with_reference and q0 > 0:
        reference = template.solve(0.0, voltage)
        lam = _lam_pair(result, reference)
    return ProfileSet(
        x=result.mesh.nodes,
        phi=result.solution.phi,
        concentrations=result.solution.concentrations,
        mu=mu,
        fluxes=result.fluxes,
        lam=lam,
    )


def lambda_unity_voltage(template: ProblemTemplate, q0: float, species: int,
                         v_lo: float, v_hi: float, tol: float = 1e-3) -> float:
    """Root in V of lambda_k(q0, V) = 1 by bisection with fresh solves."""
    refiner = SolverRefiner(template)
    f = lambda v: refiner(q0, v)[species - 1] - 1.0
    flo, fhi = f(v_lo), f(v_hi)
    if flo * fhi > 0:
        raise ValidationError("lambda - 1 does not change sign on the bracket")
    while v_hi - v_lo > tol:
        mid = 0.5 * (v_lo + v_hi)
        fm = f(mid)
        if flo * fm <= 0:
            v_hi = mid
        else:
            v_lo, flo = mid, fm
    return 0.5 * (v_lo + v_hi)
