"""Adaptive moving-mesh machinery and the outer solve/adapt loop.

The mesh is driven by a monitor function built from a least-squares estimate
of the second derivative of the potential.  Equidistribution of the monitor
is reached either by integrating the gradient flow of the discrete mesh
energy on the computational coordinates (the MMPDE route, to a preset time
t = 10) or by jumping straight to the flow's steady state, which in one
dimension is available in closed form.  The physical mesh is then recovered
from the computational one by piecewise-linear interpolation, the previous
solution is transferred, and the PDE is re-solved; five rounds of this
suffice for the problems treated here.

For charge amplitudes where the uniform-mesh system is numerically
unsolvable (the regularized charge transition falls below the mesh scale),
``adapt_and_solve`` falls back to a deterministic rescue ladder that raises
the amplitude geometrically while re-adapting the mesh, bisecting any rung
the solver cannot cross.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import solve_ivp
from scipy.sparse import diags

from .fem import (
    DiscreteSolution,
    FluxReport,
    Mesh,
    SolveError,
    SolverControls,
    compute_fluxes,
    initial_guess,
    solve_nonlinear,
    solve_with_continuation,
    transfer,
)
from .model import NECK_LEFT, NECK_RIGHT, PnpProblem, ValidationError


class MeshError(RuntimeError):
    """Mesh evolution produced an invalid (non-monotone) mesh."""


@dataclass(frozen=True)
class MonitorConfig:
    """Monitor-function settings.

    ``optimal`` is rho = (1 + |phi''|^2)^(1/3); ``boundary`` adds explicit
    concentration wells at the neck edges with an adaptive floor constant.
    """

    variant: str = "boundary"
    smoothing_sweeps: int = 2

    def __post_init__(self):
        if self.variant not in ("optimal", "boundary"):
            raise ValidationError(f"unknown monitor variant {self.variant!r}")
        if self.smoothing_sweeps < 0:
            raise ValidationError("smoothing_sweeps must be >= 0")


@dataclass(frozen=True)
class MonitorSamples:
    """Per-element mesh-density values and their total mass."""

    values: np.ndarray     # (n_elements,)
    sigma_h: float

    @classmethod
    def from_element_values(cls, mesh: Mesh, values: np.ndarray) -> "MonitorSamples":
        values = np.ascontiguousarray(values, dtype=float)
        if values.shape != (mesh.n_nodes - 1,):
            raise ValidationError("one monitor value per element required")
        if np.any(values <= 0):
            raise ValidationError("monitor values must be > 0")
        sigma = float(values @ mesh.element_sizes)
        values.setflags(write=False)
        return cls(values=values, sigma_h=sigma)


@dataclass(frozen=True)
class MeshIterate:
    """The three meshes of one adaptation step."""

    physical: Mesh
    computational: np.ndarray
    reference: np.ndarray


def second_derivative_estimate(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Nodal second derivatives from least-squares quadratic fits.

    Five-node stencils, centered where possible and shifted one-sided at the
    boundaries; returns twice the leading coefficient at each node.
    """
    x = mesh.nodes
    y = np.asarray(values, dtype=float)
    N = x.size
    if N < 5:
        raise ValidationError("second-derivative estimate needs at least 5 nodes")
    lo = np.clip(np.arange(N) - 2, 0, N - 5)
    idx = lo[:, None] + np.arange(5)
    xs = x[idx] - x[:, None]
    scale = np.abs(xs).max(axis=1)
    if np.any(scale == 0):
        raise ValidationError("degenerate stencil: coincident nodes")
    xs = xs / scale[:, None]
    ys = y[idx]
    # batched 3x3 normal equations for [1, xs, xs^2]
    p = [np.sum(xs ** m, axis=1) for m in range(5)]
    A = np.empty((N, 3, 3))
    for i in range(3):
        for j in range(3):
            A[:, i, j] = p[i + j]
    rhs = np.stack([ys.sum(axis=1), (xs * ys).sum(axis=1), (xs ** 2 * ys).sum(axis=1)], axis=1)
    coef = np.linalg.solve(A, rhs[..., None])[..., 0]
    return 2.0 * coef[:, 2] / scale ** 2


def monitor(mesh: Mesh, phi_second: np.ndarray, config: MonitorConfig = MonitorConfig()) -> MonitorSamples:
    """Per-element monitor values (mean of the two nodal evaluations)."""
    x = mesh.nodes
    curv = 1.0 + np.abs(np.asarray(phi_second, dtype=float)) ** 2
    if config.variant == "optimal":
        nodal = curv ** (1.0 / 3.0)
    else:
        base = curv ** (2.0 / 3.0)
        floor = 4.0 / base.max()
        nodal = np.sqrt(
            base
            + 1.0 / (np.exp(4.0 * (x - NECK_LEFT) ** 2) - 1.0 + floor)
            + 1.0 / (np.exp(4.0 * (x - NECK_RIGHT) ** 2) - 1.0 + floor)
        )
    element = 0.5 * (nodal[:-1] + nodal[1:])
    return MonitorSamples.from_element_values(mesh, element)


def mesh_energy(x_nodes: np.ndarray, xi_nodes: np.ndarray, rho: MonitorSamples) -> float:
    """Discrete equidistribution energy
    I_h = 1/2 sum_j (dxi_j)^2 / (rho_j dx_j^2) * dx_j."""
    dx = np.diff(np.asarray(x_nodes, dtype=float))
    dxi = np.diff(np.asarray(xi_nodes, dtype=float))
    return float(0.5 * np.sum(dxi ** 2 / (rho.values * dx)))


def energy_gradient(x_nodes: np.ndarray, xi_nodes: np.ndarray, rho: MonitorSamples) -> np.ndarray:
    """Gradient of the mesh energy over the interior computational nodes.

    d I_h / d xi_j uses the left- and right-element monitor values.
    """
    dx = np.diff(np.asarray(x_nodes, dtype=float))
    dxi = np.diff(np.asarray(xi_nodes, dtype=float))
    g = dxi / (rho.values * dx)
    return g[:-1] - g[1:]


def evolve_computational_mesh(
    x_nodes: np.ndarray,
    rho: MonitorSamples,
    t_final: float = 10.0,
    rtol: float = 1e-6,
    atol: float = 1e-9,
    checkpoints=None,
):
    """Integrate the gradient flow d xi/dt = -dI_h/dxi from the uniform mesh.

    Endpoints stay pinned at 0 and 1.  The flow is linear in xi with a
    constant tridiagonal Jacobian, integrated by a stiff (BDF) method.
    Returns the computational mesh at ``t_final``; with ``checkpoints`` it
    also returns the mesh at each checkpoint time.
    """
    x = np.asarray(x_nodes, dtype=float)
    N = x.size
    wgt = 1.0 / (rho.values * np.diff(x))

    def rhs(t, xi_int):
        xi = np.concatenate([[0.0], xi_int, [1.0]])
        g = np.diff(xi) * wgt
        return g[1:] - g[:-1]

    main = -(wgt[:-1] + wgt[1:])
    off = wgt[1:-1]
    jac = diags([off, main, off], offsets=[-1, 0, 1], format="csc")
    xi0 = np.linspace(0.0, 1.0, N)[1:-1]
    t_eval = None if checkpoints is None else np.asarray(checkpoints, dtype=float)
    sol = solve_ivp(
        rhs, (0.0, t_final), xi0, method="BDF",
        jac=lambda t, y: jac, rtol=rtol, atol=atol, t_eval=t_eval,
    )
    if not sol.success:
        raise MeshError(f"gradient-flow integration failed: {sol.message}")
    xi = np.concatenate([[0.0], sol.y[:, -1], [1.0]])
    if np.any(np.diff(xi) <= 0):
        raise MeshError("gradient flow produced a non-monotone computational mesh")
    if checkpoints is None:
        return xi
    traj = [np.concatenate([[0.0], sol.y[:, i], [1.0]]) for i in range(sol.y.shape[1])]
    return xi, traj


def equidistribute(x_nodes: np.ndarray, rho: MonitorSamples) -> np.ndarray:
    """Steady state of the gradient flow: xi_j = sum_{i<j} rho_i dx_i / sigma_h."""
    mass = rho.values * np.diff(np.asarray(x_nodes, dtype=float))
    xi = np.concatenate([[0.0], np.cumsum(mass)]) / mass.sum()
    xi[-1] = 1.0
    return xi


def recover_physical_mesh(x_old: np.ndarray, xi_new: np.ndarray) -> np.ndarray:
    """Evaluate the correspondence x = Psi(xi) at the uniform reference nodes."""
    x_old = np.asarray(x_old, dtype=float)
    xi_new = np.asarray(xi_new, dtype=float)
    if np.any(np.diff(xi_new) <= 0):
        raise MeshError("computational mesh must be strictly increasing")
    ref = np.linspace(0.0, 1.0, x_old.size)
    x_new = np.interp(ref, xi_new, x_old)
    x_new[0], x_new[-1] = 0.0, 1.0
    if np.any(np.diff(x_new) <= 0):
        raise MeshError("recovered physical mesh is not strictly increasing")
    return x_new


def equidistribution_defect(mesh: Mesh, rho: MonitorSamples) -> float:
    """Relative sup-norm deviation of the per-element monitor mass from equal."""
    mass = rho.values * mesh.element_sizes
    target = rho.sigma_h / mesh.element_sizes.size
    return float(np.abs(mass - target).max() / target)


def _smooth(values: np.ndarray, sweeps: int) -> np.ndarray:
    out = values
    for _ in range(sweeps):
        nxt = out.copy()
        nxt[1:-1] = 0.25 * out[:-2] + 0.5 * out[1:-1] + 0.25 * out[2:]
        nxt[0] = 0.75 * out[0] + 0.25 * out[1]
        nxt[-1] = 0.75 * out[-1] + 0.25 * out[-2]
        out = nxt
    return out


@dataclass(frozen=True)
class OuterIterate:
    """Diagnostics for one round of the solve/adapt loop."""

    iteration: int
    mesh: Mesh
    fluxes: FluxReport
    defect: float
    newton_like: bool  # False when the round needed the rescue ladder


@dataclass(frozen=True)
class AdaptResult:
    mesh: Mesh
    solution: DiscreteSolution
    fluxes: FluxReport
    history: tuple


def _next_mesh(mesh: Mesh, solution: DiscreteSolution, config: MonitorConfig,
               mesh_update: str) -> Mesh:
    phi2 = second_derivative_estimate(mesh, solution.phi)
    rho = monitor(mesh, phi2, config)
    smoothed = MonitorSamples.from_element_values(
        mesh, _smooth(rho.values, config.smoothing_sweeps))
    if mesh_update == "direct":
        xi = equidistribute(mesh.nodes, smoothed)
    else:
        xi = evolve_computational_mesh(mesh.nodes, smoothed)
    return Mesh(recover_physical_mesh(mesh.nodes, xi))


class _Rescue:
    """Geometric amplitude ladder with interleaved mesh adaptation.

    Deterministic: ladder rungs, adaptation, and bisection depend only on the
    target problem, never on external state.
    """

    def __init__(self, problem: PnpProblem, n_nodes: int, controls: SolverControls,
                 config: MonitorConfig, mesh_update: str, max_depth: int = 8):
        self.problem = problem
        self.controls = controls
        self.config = config
        self.mesh_update = mesh_update
        self.max_depth = max_depth
        base = replace(problem, charge=replace(problem.charge, amplitude=0.0))
        mesh = Mesh.uniform(n_nodes)
        self.mesh = mesh
        self.solution = solve_with_continuation(base, mesh, None, controls)
        self.amplitude = 0.0

    def _problem_at(self, amplitude: float) -> PnpProblem:
        return replace(self.problem, charge=replace(self.problem.charge, amplitude=amplitude))

    def _attempt(self, amplitude: float):
        prob = self._problem_at(amplitude)
        self.solution = solve_nonlinear(prob, self.mesh, transfer(self.solution, self.mesh, prob),
                                        self.controls)
        self.amplitude = amplitude

    def _adapt(self):
        prob = self._problem_at(self.amplitude)
        mesh = _next_mesh(self.mesh, self.solution, self.config, self.mesh_update)
        guess = transfer(self.solution, mesh, prob)
        self.solution = solve_nonlinear(prob, mesh, guess, self.controls)
        self.mesh = mesh

    def step(self, amplitude: float, depth: int = 0):
        saved = (self.mesh, self.solution, self.amplitude)
        try:
            self._attempt(amplitude)
            return
        except SolveError:
            self.mesh, self.solution, self.amplitude = saved
        try:
            self._adapt()
            self._attempt(amplitude)
            return
        except SolveError:
            self.mesh, self.solution, self.amplitude = saved
        if depth >= self.max_depth:
            raise SolveError(f"rescue ladder stuck below amplitude {amplitude}", None, np.inf)
        mid = np.sqrt(self.amplitude * amplitude) if self.amplitude > 0 else amplitude / 4.0
        self.step(mid, depth + 1)
        self.step(amplitude, depth + 1)

    def run(self):
        target = self.problem.charge.amplitude
        steps = self.controls.continuation_q_steps
        for q in [target * 4.0 ** (-i) for i in range(steps - 1, -1, -1)]:
            self.step(q)
        return self.mesh, self.solution


def adapt_and_solve(
    problem: PnpProblem,
    n_nodes: int = 301,
    controls: SolverControls = SolverControls(),
    n_outer: int = 5,
    config: MonitorConfig = MonitorConfig(),
    mesh_update: str = "direct",
    guess: DiscreteSolution | None = None,
) -> AdaptResult:
    """Alternate PDE solves with mesh adaptation for ``n_outer`` rounds.

    Round 1 solves on the uniform mesh (falling back to the rescue ladder if
    that system is unsolvable); each later round re-equidistributes the mesh
    against the current solution's monitor, transfers the solution, and
    re-solves.  ``mesh_update`` selects the closed-form equidistribution
    ("direct", default) or the gradient flow integrated to t = 10
    ("gradient-flow").  A ``guess`` only seeds Newton; it does not alter the
    mesh schedule.
    """
    if n_nodes < 5:
        raise ValidationError("adaptive pipeline needs at least 5 nodes")
    if mesh_update not in ("direct", "gradient-flow"):
        raise ValidationError(f"unknown mesh_update {mesh_update!r}")
    mesh = Mesh.uniform(n_nodes)
    seed = transfer(guess, mesh, problem) if guess is not None else None
    newton_like = True
    try:
        solution = solve_with_continuation(problem, mesh, seed, controls)
    except SolveError:
        mesh, solution = _Rescue(problem, n_nodes, controls, config, mesh_update).run()
        newton_like = False
    history = []
    for it in range(n_outer):
        if it > 0:
            mesh_new = _next_mesh(mesh, solution, config, mesh_update)
            seed = transfer(solution, mesh_new, problem)
            newton_like = True
            try:
                solution = solve_with_continuation(problem, mesh_new, seed, controls)
                mesh = mesh_new
            except SolveError:
                mesh, solution = _Rescue(problem, n_nodes, controls, config, mesh_update).run()
                newton_like = False
        fluxes = compute_fluxes(problem, mesh, solution)
        phi2 = second_derivative_estimate(mesh, solution.phi)
        rho = monitor(mesh, phi2, config)
        history.append(OuterIterate(
            iteration=it + 1,
            mesh=mesh,
            fluxes=fluxes,
            defect=equidistribution_defect(mesh, rho),
            newton_like=newton_like,
        ))
    return AdaptResult(mesh=mesh, solution=solution, fluxes=history[-1].fluxes,
                       history=tuple(history))
