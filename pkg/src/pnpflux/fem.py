"""Piecewise-linear finite elements for the steady PNP boundary-value problem.

The Galerkin system couples the Poisson row (eps^2-weighted stiffness against
a charge source) with one Nernst-Planck row per species; unknowns are the
interior nodal values, interleaved per node as (phi, c_1, ..., c_n) so the
Jacobian is banded with bandwidth 2n+1.  All weak-form integrals use 2-point
Gauss-Legendre per element with the area and charge profiles evaluated at the
quadrature points.

The nonlinear solver is a damped Newton iteration in (phi, ln c) variables:
the residual and its tolerance refer to the untransformed Galerkin system,
while the logarithmic parameterization keeps every iterate positive by
construction and tames the drift-diffusion nonlinearity.  Rows of the banded
Jacobian are max-norm equilibrated before factorization (the raw system's
conditioning, driven by eps^2 = 1e-10, otherwise caps the attainable residual
near 1e-6).  When the line search stalls, a pseudo-transient continuation
phase with adaptive diagonal damping takes over; when a cold solve fails
outright, a geometric amplitude ladder (and a linear voltage ladder if
needed) warm-starts its way to the target.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .model import (
    PnpProblem,
    ValidationError,
    channel_area,
    mu_hard_sphere,
    mu_hard_sphere_gradient,
    mu_ideal,
    packing_fraction,
    permanent_charge_density,
)

_SQ3 = np.sqrt(3.0)
# left-basis values at the two Gauss points of the reference element
_PSI_L = np.array([(1 + 1 / _SQ3) / 2, (1 - 1 / _SQ3) / 2])
_LOG_STEP_CAP = 20.0


@dataclass(frozen=True)
class Mesh:
    """Sorted node coordinates spanning [0, 1]."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 3:
            raise ValidationError("mesh needs at least three nodes")
        if nodes[0] != 0.0 or nodes[-1] != 1.0:
            raise ValidationError("mesh must span [0, 1] exactly")
        if np.any(np.diff(nodes) <= 0):
            raise ValidationError("mesh nodes must be strictly increasing")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, n_nodes: int) -> "Mesh":
        return cls(np.linspace(0.0, 1.0, n_nodes))

    @property
    def n_nodes(self) -> int:
        return self.nodes.size

    @property
    def element_sizes(self) -> np.ndarray:
        return np.diff(self.nodes)


@dataclass(frozen=True)
class DiscreteSolution:
    """Nodal potential and concentrations living on a mesh."""

    mesh: Mesh
    phi: np.ndarray
    concentrations: np.ndarray  # shape (n_species, n_nodes)

    def __post_init__(self):
        phi = np.ascontiguousarray(self.phi, dtype=float)
        conc = np.ascontiguousarray(self.concentrations, dtype=float)
        if phi.shape != (self.mesh.n_nodes,):
            raise ValidationError("phi shape does not match the mesh")
        if conc.ndim != 2 or conc.shape[1] != self.mesh.n_nodes:
            raise ValidationError("concentration array shape does not match the mesh")
        if np.any(conc <= 0):
            raise ValidationError("nodal concentrations must be > 0")
        phi.setflags(write=False)
        conc.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "concentrations", conc)

    def check_boundary(self, problem: PnpProblem):
        bc = problem.bc
        if self.phi[0] != bc.voltage or self.phi[-1] != 0.0:
            raise ValidationError("potential boundary values do not match the problem")
        if (tuple(self.concentrations[:, 0]) != bc.left
                or tuple(self.concentrations[:, -1]) != bc.right):
            raise ValidationError("concentration boundary values do not match the problem")


@dataclass(frozen=True)
class FluxReport:
    """Per-element species fluxes, their weighted means, and the total current."""

    element_left: np.ndarray
    element_right: np.ndarray
    per_element: np.ndarray      # (n_species, n_elements)
    averages: np.ndarray         # (n_species,)
    nonuniformity: np.ndarray    # (n_species,)
    current: float


@dataclass(frozen=True)
class SolverControls:
    """Newton / continuation knobs.

    ``tolerance`` bounds the max-norm of the untransformed Galerkin residual.
    """

    tolerance: float = 1e-10
    max_iterations: int = 100
    max_backtracks: int = 30
    max_stalls: int = 25
    continuation_q_steps: int = 8
    continuation_v_steps: int = 8

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValidationError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")


class SolveError(RuntimeError):
    """Non-convergence; carries the best iterate and its residual norm."""

    def __init__(self, message: str, best: DiscreteSolution | None, residual_norm: float):
        super().__init__(message)
        self.best = best
        self.residual_norm = residual_norm


def initial_guess(problem: PnpProblem, mesh: Mesh) -> DiscreteSolution:
    """Linear interpolation of the boundary data; always positive."""
    x = mesh.nodes
    phi = problem.bc.voltage * (1.0 - x)
    phi[0], phi[-1] = problem.bc.voltage, 0.0
    conc = np.empty((problem.n_species, x.size))
    for k in range(problem.n_species):
        conc[k] = problem.bc.left[k] + (problem.bc.right[k] - problem.bc.left[k]) * x
    conc[:, 0] = problem.bc.left
    conc[:, -1] = problem.bc.right
    return DiscreteSolution(mesh=mesh, phi=phi, concentrations=conc)


def transfer(solution: DiscreteSolution, mesh: Mesh, problem: PnpProblem) -> DiscreteSolution:
    """Piecewise-linear transfer onto another mesh, boundary data re-pinned."""
    xo, xn = solution.mesh.nodes, mesh.nodes
    phi = np.interp(xn, xo, solution.phi)
    conc = np.vstack([np.interp(xn, xo, ck) for ck in solution.concentrations])
    phi[0], phi[-1] = problem.bc.voltage, 0.0
    conc[:, 0] = problem.bc.left
    conc[:, -1] = problem.bc.right
    return DiscreteSolution(mesh=mesh, phi=phi, concentrations=conc)


def _mu_hs_nodal(problem: PnpProblem, conc: np.ndarray) -> np.ndarray:
    """Nodal hard-sphere excess potentials, shape (n, N)."""
    radii = problem.radii
    return np.vstack([mu_hard_sphere(k, conc, radii) for k in range(problem.n_species)])


def _assemble(problem: PnpProblem, x: np.ndarray, phi: np.ndarray, conc: np.ndarray,
              want_jacobian: bool):
    """Residual (and banded Jacobian) of the Galerkin system on interior rows.

    Banded storage is the (kl+ku+1, m) layout of scipy.linalg.solve_banded
    with kl = ku = 2n+1.
    """
    n = conc.shape[0]
    N = x.size
    m = (n + 1) * (N - 2)
    z = problem.valences
    D = problem.diffusions
    eps2 = problem.epsilon ** 2
    hard_sphere = problem.excess.kind == "hard-sphere" and np.any(problem.radii > 0)

    dx = np.diff(x)
    w = 0.5 * dx
    psiL = _PSI_L  # (2,) basis values, identical on every element
    xq = x[:-1, None] + dx[:, None] * np.array([[0.5 - 0.5 / _SQ3, 0.5 + 0.5 / _SQ3]])
    hq = np.asarray(channel_area(xq.ravel(), problem.geometry)).reshape(xq.shape)
    Qq = np.asarray(permanent_charge_density(xq.ravel(), problem.charge)).reshape(xq.shape)
    if hard_sphere and packing_fraction(conc, problem.radii).max() >= 1.0:
        raise ValidationError("hard-sphere packing fraction reached 1 during assembly")

    dphi = np.diff(phi) / dx
    cq = conc[:, :-1, None] * psiL + conc[:, 1:, None] * (1.0 - psiL)  # (n, Ne, 2)
    if hard_sphere:
        mu_hs = _mu_hs_nodal(problem, conc)             # (n, N)
        dmu_hs = np.diff(mu_hs, axis=1) / dx            # (n, Ne)
        grad_hs = np.empty((n, n, N))                   # dmu_k/dc_i at nodes
        for k in range(n):
            grad_hs[k] = mu_hard_sphere_gradient(k, conc, problem.radii)

    res = np.zeros(m)
    kl = ku = 2 * n + 1
    ab = np.zeros((kl + ku + 1, m)) if want_jacobian else None

    enodes = np.arange(N - 1)

    def scatter_res(node, var, val):
        ok = (node >= 1) & (node <= N - 2)
        np.add.at(res, (n + 1) * (node[ok] - 1) + var, val[ok])

    def scatter_jac(rnode, rvar, cnode, cvar, val):
        ok = (rnode >= 1) & (rnode <= N - 2) & (cnode >= 1) & (cnode <= N - 2)
        r = (n + 1) * (rnode[ok] - 1) + rvar
        ccol = (n + 1) * (cnode[ok] - 1) + cvar
        np.add.at(ab, (ku + r - ccol, ccol), val[ok])

    eL, eR = enodes, enodes + 1
    inth = w * hq.sum(axis=1)

    # Poisson row: eps^2 h phi' psi' - h (sum z_i c_i + Q) psi
    rho_q = np.einsum("i,ieq->eq", z, cq) + Qq
    stiff = eps2 * dphi * inth / dx
    src = w[:, None] * hq * rho_q  # (Ne, 2) quadrature contributions
    srcL = src @ psiL
    srcR = src @ (1.0 - psiL)
    scatter_res(eL, 0, -stiff - srcL)
    scatter_res(eR, 0, stiff - srcR)
    if want_jacobian:
        kphi = eps2 * inth / dx ** 2
        for a, sa in ((eL, -1.0), (eR, 1.0)):
            for b, sb in ((eL, -1.0), (eR, 1.0)):
                scatter_jac(a, 0, b, 0, sa * sb * kphi)
        mass = w[:, None] * hq  # (Ne, 2)
        mLL = mass @ (psiL * psiL)
        mLR = mass @ (psiL * (1.0 - psiL))
        mRR = mass @ ((1.0 - psiL) * (1.0 - psiL))
        for i in range(n):
            scatter_jac(eL, 0, eL, 1 + i, -z[i] * mLL)
            scatter_jac(eL, 0, eR, 1 + i, -z[i] * mLR)
            scatter_jac(eR, 0, eL, 1 + i, -z[i] * mLR)
            scatter_jac(eR, 0, eR, 1 + i, -z[i] * mRR)

    # Nernst-Planck rows: D h (z c phi' + c' [+ c * d(mu_hs)/dx]) psi'
    for k in range(n):
        dck = np.diff(conc[k]) / dx
        Gk = hq * (z[k] * cq[k] * dphi[:, None] + dck[:, None])
        if hard_sphere:
            Gk = Gk + hq * cq[k] * dmu_hs[k][:, None]
        Ik = D[k] * (w[:, None] * Gk).sum(axis=1)
        scatter_res(eL, 1 + k, -Ik / dx)
        scatter_res(eR, 1 + k, Ik / dx)
        if want_jacobian:
            wh = w[:, None] * hq
            # wrt phi at either end (phi enters through phi' only)
            dI_dphi = D[k] * z[k] * (wh * cq[k]).sum(axis=1) / dx
            for a, sa in ((eL, -1.0), (eR, 1.0)):
                for b, sb in ((eL, -1.0), (eR, 1.0)):
                    scatter_jac(a, 1 + k, b, 0, sa * sb * dI_dphi / dx)
            # wrt own concentration at either end
            drift = z[k] * dphi[:, None]
            if hard_sphere:
                drift = drift + dmu_hs[k][:, None]
            dI_dckL = D[k] * ((wh * (drift * psiL)).sum(axis=1) - wh.sum(axis=1) / dx)
            dI_dckR = D[k] * ((wh * (drift * (1.0 - psiL))).sum(axis=1) + wh.sum(axis=1) / dx)
            for a, sa in ((eL, -1.0), (eR, 1.0)):
                scatter_jac(a, 1 + k, eL, 1 + k, sa * dI_dckL / dx)
                scatter_jac(a, 1 + k, eR, 1 + k, sa * dI_dckR / dx)
            if hard_sphere:
                # the element-constant d(mu_hs)/dx couples every species'
                # endpoint concentrations into row k
                base = D[k] * (wh * cq[k]).sum(axis=1) / dx ** 2
                for i in range(n):
                    gL = grad_hs[k, i, :-1]
                    gR = grad_hs[k, i, 1:]
                    for a, sa in ((eL, -1.0), (eR, 1.0)):
                        scatter_jac(a, 1 + k, eL, 1 + i, sa * (-base * gL))
                        scatter_jac(a, 1 + k, eR, 1 + i, sa * (base * gR))
    return res, ab


def assemble_residual(problem: PnpProblem, mesh: Mesh, state: DiscreteSolution) -> np.ndarray:
    """Galerkin residual tested against interior basis functions.

    Length (n+1)*(N-2), interleaved per interior node as (phi, c_1, ..., c_n).
    """
    state.check_boundary(problem)
    res, _ = _assemble(problem, mesh.nodes, state.phi, state.concentrations, False)
    return res


def assemble_jacobian_banded(problem: PnpProblem, mesh: Mesh, state: DiscreteSolution):
    """(residual, banded Jacobian) pair; band layout for solve_banded with
    kl = ku = 2 n_species + 1."""
    state.check_boundary(problem)
    return _assemble(problem, mesh.nodes, state.phi, state.concentrations, True)


def _row_max(ab: np.ndarray, kl: int, ku: int, m: int) -> np.ndarray:
    rowmax = np.zeros(m)
    for d in range(-kl, ku + 1):
        i0, i1 = max(0, -d), min(m, m - d)
        if i1 > i0:
            np.maximum(rowmax[i0:i1], np.abs(ab[ku - d, i0 + d:i1 + d]), out=rowmax[i0:i1])
    return np.maximum(rowmax, 1e-300)


def _scale_rows(ab: np.ndarray, rowmax: np.ndarray, kl: int, ku: int, m: int) -> np.ndarray:
    out = ab.copy()
    for d in range(-kl, ku + 1):
        i0, i1 = max(0, -d), min(m, m - d)
        if i1 > i0:
            out[ku - d, i0 + d:i1 + d] /= rowmax[i0:i1]
    return out


def _newton(problem: PnpProblem, x: np.ndarray, phi: np.ndarray, conc: np.ndarray,
            controls: SolverControls):
    """Damped Newton in (phi, ln c) with equilibrated banded solves and a
    PTC fallback.  Returns (phi, conc, iterations)."""
    n = conc.shape[0]
    kl = ku = 2 * n + 1
    mu = 0.0
    stalls = 0
    best = (phi, conc, np.inf)
    rn = np.inf
    for it in range(controls.max_iterations):
        try:
            res, ab = _assemble(problem, x, phi, conc, True)
        except ValidationError as exc:
            raise SolveError(str(exc), _solution_or_none(x, best), best[2]) from exc
        rn = float(np.abs(res).max())
        if rn < best[2]:
            best = (phi, conc, rn)
        if rn <= controls.tolerance:
            return phi, conc, it
        m = res.size
        # chain rule to log-concentration columns
        colscale = np.ones(m)
        cs = colscale.reshape(-1, n + 1)
        for k in range(n):
            cs[:, 1 + k] = conc[k, 1:-1]
        ab_log = ab * colscale[None, :]
        rowmax = _row_max(ab_log, kl, ku, m)
        ab_eq = _scale_rows(ab_log, rowmax, kl, ku, m)
        if mu > 0:
            ab_eq[ku, :] += mu * np.maximum(np.abs(ab_eq[ku, :]), 1e-4)
        try:
            du = solve_banded((kl, ku), ab_eq, -(res / rowmax))
        except np.linalg.LinAlgError as exc:
            raise SolveError("singular Jacobian", _solution_or_none(x, best), rn) from exc
        cap = np.abs(du).max()
        if cap > _LOG_STEP_CAP:
            du *= _LOG_STEP_CAP / cap
        U = du.reshape(-1, n + 1)
        r2 = float(np.linalg.norm(res / rowmax))
        s, accepted = 1.0, False
        for _ in range(controls.max_backtracks):
            phin = phi.copy()
            phin[1:-1] = phi[1:-1] + s * U[:, 0]
            cn = conc.copy()
            for k in range(n):
                cn[k, 1:-1] = conc[k, 1:-1] * np.exp(s * U[:, 1 + k])
            try:
                resn, _ = _assemble(problem, x, phin, cn, False)
            except ValidationError:
                s *= 0.5
                continue
            if np.isfinite(resn).all() and np.linalg.norm(resn / rowmax) < (1 - 1e-4 * s) * r2:
                accepted = True
                break
            s *= 0.5
        if accepted:
            phi, conc = phin, cn
            mu = 0.0 if mu < 1e-9 else mu * 0.2
            stalls = 0
        else:
            mu = max(mu * 20.0, 1e-6)
            stalls += 1
            if stalls > controls.max_stalls:
                raise SolveError(
                    f"line search and pseudo-transient damping stalled at |r| = {rn:.3e}",
                    _solution_or_none(x, best), best[2],
                )
    raise SolveError(
        f"no convergence in {controls.max_iterations} iterations, |r| = {rn:.3e}",
        _solution_or_none(x, best), best[2],
    )


def _solution_or_none(x, best):
    phi, conc, _ = best
    try:
        return DiscreteSolution(mesh=Mesh(x), phi=phi, concentrations=conc)
    except ValidationError:
        return None


def _with_charge(problem: PnpProblem, amplitude: float) -> PnpProblem:
    from dataclasses import replace
    return replace(problem, charge=replace(problem.charge, amplitude=amplitude))


def _with_voltage(problem: PnpProblem, voltage: float) -> PnpProblem:
    from dataclasses import replace
    return replace(problem, bc=replace(problem.bc, voltage=voltage))


def solve_nonlinear(problem: PnpProblem, mesh: Mesh, guess: DiscreteSolution,
                    controls: SolverControls = SolverControls()) -> DiscreteSolution:
    """Drive the Galerkin residual below tolerance starting from ``guess``.

    On failure raises SolveError carrying the best iterate seen.
    """
    guess.check_boundary(problem)
    phi, conc, _ = _newton(problem, mesh.nodes, guess.phi.copy(),
                           guess.concentrations.copy(), controls)
    return DiscreteSolution(mesh=mesh, phi=phi, concentrations=conc)


def solve_with_continuation(problem: PnpProblem, mesh: Mesh,
                            guess: DiscreteSolution | None,
                            controls: SolverControls = SolverControls()) -> DiscreteSolution:
    """Solve on a fixed mesh, escalating through warm-started ladders.

    Order: the supplied guess, a cold linear guess, then a geometric ladder in
    the charge amplitude (reaching the target in <= continuation_q_steps
    rungs, from a zero-charge solve that itself falls back to a linear ladder
    in voltage).
    """
    if guess is not None:
        try:
            return solve_nonlinear(problem, mesh, guess, controls)
        except SolveError:
            pass
    cold = initial_guess(problem, mesh)
    try:
        return solve_nonlinear(problem, mesh, cold, controls)
    except SolveError:
        if problem.charge.amplitude == 0.0 and problem.bc.voltage == 0.0:
            raise
    # zero-charge anchor, with a voltage ladder if even that fails
    base = _with_charge(problem, 0.0)
    try:
        sol = solve_nonlinear(base, mesh, initial_guess(base, mesh), controls)
    except SolveError:
        sol = None
        steps = controls.continuation_v_steps
        for v in np.linspace(0.0, problem.bc.voltage, steps + 1):
            rung = _with_voltage(base, float(v))
            g = initial_guess(rung, mesh) if sol is None else transfer(sol, mesh, rung)
            sol = solve_nonlinear(rung, mesh, g, controls)
    target = problem.charge.amplitude
    if target == 0.0:
        return sol
    steps = controls.continuation_q_steps
    ratio = 4.0
    rungs = [target * ratio ** (-i) for i in range(steps - 1, -1, -1)]
    for q in rungs:
        rung = _with_charge(problem, q)
        sol = solve_nonlinear(rung, mesh, transfer(sol, mesh, rung), controls)
    return sol


def electrochemical_profile(problem: PnpProblem, solution: DiscreteSolution) -> np.ndarray:
    """Nodal electrochemical potentials mu_k, shape (n_species, n_nodes)."""
    conc = solution.concentrations
    mu = np.vstack([
        mu_ideal(problem.species[k].valence, solution.phi, conc[k])
        for k in range(problem.n_species)
    ])
    if problem.excess.kind == "hard-sphere" and np.any(problem.radii > 0):
        mu = mu + _mu_hs_nodal(problem, conc)
    return mu


def compute_fluxes(problem: PnpProblem, mesh: Mesh, solution: DiscreteSolution) -> FluxReport:
    """Per-element fluxes J_k = -D_k h(x_mid) c_k(x_mid) dmu_k/dx.

    c_k(x_mid) is the linear-interpolant midpoint value; mu_k is evaluated at
    the nodes and differenced.  The representative flux is the element-length
    weighted mean; nonuniformity is (max - min)/|mean| per species.
    """
    x = mesh.nodes
    dx = mesh.element_sizes
    xm = 0.5 * (x[:-1] + x[1:])
    hm = np.asarray(channel_area(xm, problem.geometry))
    mu = electrochemical_profile(problem, solution)
    conc = solution.concentrations
    D = problem.diffusions
    per = np.empty((problem.n_species, dx.size))
    for k in range(problem.n_species):
        cm = 0.5 * (conc[k, :-1] + conc[k, 1:])
        per[k] = -D[k] * hm * cm * np.diff(mu[k]) / dx
    averages = per @ dx / dx.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        nonuniformity = np.where(
            averages != 0.0,
            (per.max(axis=1) - per.min(axis=1)) / np.abs(averages),
            per.max(axis=1) - per.min(axis=1),
        )
    current = float(problem.valences @ averages)
    return FluxReport(
        element_left=x[:-1],
        element_right=x[1:],
        per_element=per,
        averages=averages,
        nonuniformity=np.abs(nonuniformity),
        current=current,
    )
