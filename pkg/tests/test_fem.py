import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnpflux import (
    DiscreteSolution,
    Mesh,
    SolveError,
    SolverControls,
    ValidationError,
    assemble_residual,
    compute_fluxes,
    electrochemical_profile,
    initial_guess,
    mu_ideal,
    paper_problem,
    solve_nonlinear,
    solve_with_continuation,
)
from pnpflux.fem import assemble_jacobian_banded, transfer


def constant_problem(c=0.008):
    return paper_problem(L=c, R=c, voltage=0.0, q0=0.0)


def constant_state(problem, mesh):
    N = mesh.n_nodes
    phi = np.zeros(N)
    conc = np.tile(np.asarray(problem.bc.left)[:, None], (1, N))
    return DiscreteSolution(mesh=mesh, phi=phi, concentrations=conc)


def random_state(problem, mesh, rng):
    phi = problem.bc.voltage * (1 - mesh.nodes)
    phi[0], phi[-1] = problem.bc.voltage, 0.0
    phi[1:-1] += rng.normal(0, 0.3, mesh.n_nodes - 2)
    conc = np.vstack([
        np.interp(mesh.nodes, [0, 1], [problem.bc.left[k], problem.bc.right[k]])
        for k in range(problem.n_species)
    ])
    conc[:, 1:-1] *= rng.uniform(0.6, 1.6, (problem.n_species, mesh.n_nodes - 2))
    conc[:, 0] = problem.bc.left
    conc[:, -1] = problem.bc.right
    return DiscreteSolution(mesh=mesh, phi=phi, concentrations=conc)


def hand_residual(problem, mesh, state):
    """Straightforward per-element reimplementation of the weak form
    (plain loops, 2-point Gauss rule), independent of the package assembly."""
    from pnpflux import channel_area, permanent_charge_density

    x = mesh.nodes
    N = x.size
    n = problem.n_species
    z = problem.valences
    D = problem.diffusions
    res = np.zeros((N, n + 1))
    gauss = [0.5 - 0.5 / math.sqrt(3), 0.5 + 0.5 / math.sqrt(3)]
    for e in range(N - 1):
        xl, xr = x[e], x[e + 1]
        dx = xr - xl
        dphi = (state.phi[e + 1] - state.phi[e]) / dx
        for gp in gauss:
            xq = xl + gp * dx
            wq = dx / 2
            h = channel_area(xq, problem.geometry)
            Q = permanent_charge_density(xq, problem.charge)
            psi = {e: 1 - gp, e + 1: gp}
            dpsi = {e: -1 / dx, e + 1: 1 / dx}
            rho = Q
            for i in range(n):
                ci = state.concentrations[i, e] * (1 - gp) + state.concentrations[i, e + 1] * gp
                rho += z[i] * ci
            for node, val in psi.items():
                res[node, 0] += wq * (problem.epsilon ** 2 * h * dphi * dpsi[node]
                                      - h * rho * val)
            for k in range(n):
                ck = state.concentrations[k, e] * (1 - gp) + state.concentrations[k, e + 1] * gp
                dck = (state.concentrations[k, e + 1] - state.concentrations[k, e]) / dx
                G = D[k] * h * (z[k] * ck * dphi + dck)
                for node in psi:
                    res[node, 1 + k] += wq * G * dpsi[node]
    return res[1:-1].reshape(-1)


class TestMesh:
    def test_validation(self):
        with pytest.raises(ValidationError):
            Mesh(np.array([0.0, 0.5, 0.9]))
        with pytest.raises(ValidationError):
            Mesh(np.array([0.0, 0.5, 0.5, 1.0]))
        mesh = Mesh.uniform(11)
        assert mesh.n_nodes == 11

    def test_nodes_read_only(self):
        mesh = Mesh.uniform(5)
        with pytest.raises(ValueError):
            mesh.nodes[1] = 0.3


class TestAssembly:
    def test_constant_solution_zero_residual(self):
        problem = constant_problem()
        mesh = Mesh.uniform(31)
        res = assemble_residual(problem, mesh, constant_state(problem, mesh))
        assert np.abs(res).max() == 0.0

    def test_matches_hand_assembly(self):
        rng = np.random.default_rng(7)
        problem = paper_problem(voltage=4.0, q0=0.02)
        mesh = Mesh.uniform(5)
        state = random_state(problem, mesh, rng)
        res = assemble_residual(problem, mesh, state)
        expected = hand_residual(problem, mesh, state)
        np.testing.assert_allclose(res, expected, rtol=1e-13, atol=1e-18)

    def test_matches_hand_assembly_nonuniform(self):
        rng = np.random.default_rng(11)
        problem = paper_problem(voltage=-3.0, q0=0.1)
        mesh = Mesh(np.array([0.0, 0.2, 0.45, 0.8, 1.0]))
        state = random_state(problem, mesh, rng)
        np.testing.assert_allclose(
            assemble_residual(problem, mesh, state),
            hand_residual(problem, mesh, state), rtol=1e-13, atol=1e-18)

    def test_locality_of_coupling(self):
        rng = np.random.default_rng(1)
        problem = paper_problem(voltage=2.0, q0=0.01)
        mesh = Mesh.uniform(12)
        state = random_state(problem, mesh, rng)
        base = assemble_residual(problem, mesh, state)
        jnode = 5
        phi = state.phi.copy()
        phi[jnode] += 1e-3
        bumped = DiscreteSolution(mesh=mesh, phi=phi, concentrations=state.concentrations)
        delta = assemble_residual(problem, mesh, bumped) - base
        touched = np.nonzero(np.abs(delta) > 0)[0]
        nodes = touched // 3 + 1  # interior node index of each residual row
        assert set(nodes) <= {jnode - 1, jnode, jnode + 1}

    def test_boundary_mismatch_rejected(self):
        problem = paper_problem(voltage=5.0)
        mesh = Mesh.uniform(9)
        state = constant_state(constant_problem(), mesh)
        with pytest.raises(ValidationError):
            assemble_residual(problem, mesh, state)


class TestJacobian:
    @pytest.mark.parametrize("excess,radii", [("ideal", (0.0, 0.0)),
                                              ("hard-sphere", (0.2, 0.4))])
    def test_matches_central_differences(self, excess, radii):
        rng = np.random.default_rng(3)
        problem = paper_problem(L=0.5, R=0.1, voltage=2.0, q0=0.3,
                                excess=excess, radii=radii)
        mesh = Mesh(np.sort(np.concatenate([[0, 1], rng.uniform(0.05, 0.95, 8)])))
        state = random_state(problem, mesh, rng)
        res, ab = assemble_jacobian_banded(problem, mesh, state)
        m = res.size
        kl = ku = 5
        dense = np.zeros((m, m))
        for j in range(m):
            for i in range(max(0, j - kl), min(m, j + ku + 1)):
                dense[i, j] = ab[ku + i - j, j]

        def packed(u):
            phi = state.phi.copy()
            conc = state.concentrations.copy()
            U = u.reshape(-1, 3)
            phi[1:-1] = U[:, 0]
            conc[0, 1:-1] = U[:, 1]
            conc[1, 1:-1] = U[:, 2]
            s = DiscreteSolution(mesh=mesh, phi=phi, concentrations=conc)
            return assemble_residual(problem, mesh, s)

        u0 = np.stack([state.phi[1:-1], state.concentrations[0, 1:-1],
                       state.concentrations[1, 1:-1]], axis=1).ravel()
        fd = np.zeros((m, m))
        step = 1e-7
        for j in range(m):
            up, um = u0.copy(), u0.copy()
            up[j] += step
            um[j] -= step
            fd[:, j] = (packed(up) - packed(um)) / (2 * step)
        assert np.abs(dense - fd).max() / np.abs(fd).max() < 1e-6


class TestSolve:
    def test_constant_solution_converges_immediately(self):
        problem = constant_problem()
        mesh = Mesh.uniform(51)
        out = solve_nonlinear(problem, mesh, constant_state(problem, mesh))
        assert np.abs(out.phi).max() == 0.0

    def test_residual_below_tolerance(self):
        problem = paper_problem(voltage=10.0)
        mesh = Mesh.uniform(101)
        out = solve_nonlinear(problem, mesh, initial_guess(problem, mesh))
        res = assemble_residual(problem, mesh, out)
        assert np.abs(res).max() <= SolverControls().tolerance

    def test_positivity_of_solution(self):
        problem = paper_problem(voltage=-40.0, q0=0.001)
        mesh = Mesh.uniform(101)
        out = solve_with_continuation(problem, mesh, None)
        assert (out.concentrations > 0).all()

    def test_failure_carries_best_iterate(self):
        problem = paper_problem(voltage=10.0, q0=1.0)
        mesh = Mesh.uniform(41)
        with pytest.raises(SolveError) as info:
            solve_nonlinear(problem, mesh, initial_guess(problem, mesh),
                            SolverControls(max_iterations=3, max_stalls=2))
        assert info.value.residual_norm < np.inf
        assert info.value.best is not None

    def test_continuation_reaches_moderate_charge(self):
        problem = paper_problem(voltage=10.0, q0=0.002)
        mesh = Mesh.uniform(151)
        out = solve_with_continuation(problem, mesh, None)
        res = assemble_residual(problem, mesh, out)
        assert np.abs(res).max() <= 1e-10


class TestInitialGuess:
    def test_linear_profiles(self):
        problem = paper_problem(voltage=10.0)
        mesh = Mesh.uniform(11)
        guess = initial_guess(problem, mesh)
        mid = 5  # x = 0.5
        assert guess.phi[mid] == pytest.approx(5.0, rel=1e-14)
        assert guess.concentrations[0, mid] == pytest.approx(0.0045, rel=1e-14)

    def test_boundary_invariants(self):
        problem = paper_problem(L=0.5, R=0.1, voltage=-17.0)
        mesh = Mesh.uniform(7)
        guess = initial_guess(problem, mesh)
        guess.check_boundary(problem)

    def test_constant_case(self):
        problem = constant_problem()
        mesh = Mesh.uniform(9)
        guess = initial_guess(problem, mesh)
        assert np.all(guess.phi == 0)
        assert np.ptp(guess.concentrations) == 0


class TestFluxes:
    def test_zero_for_constant_solution(self):
        problem = constant_problem()
        mesh = Mesh.uniform(21)
        report = compute_fluxes(problem, mesh, constant_state(problem, mesh))
        assert np.abs(report.per_element).max() == 0.0
        assert report.current == 0.0

    def test_sign_law(self):
        for V in (10.0, -25.0, 40.0):
            problem = paper_problem(voltage=V)
            mesh = Mesh.uniform(101)
            out = solve_nonlinear(problem, mesh, initial_guess(problem, mesh))
            report = compute_fluxes(problem, mesh, out)
            mu = electrochemical_profile(problem, out)
            for k in range(2):
                assert np.sign(report.averages[k]) == np.sign(mu[k, 0] - mu[k, -1])

    def test_current_is_valence_weighted_sum(self):
        problem = paper_problem(voltage=10.0)
        mesh = Mesh.uniform(51)
        out = solve_nonlinear(problem, mesh, initial_guess(problem, mesh))
        report = compute_fluxes(problem, mesh, out)
        assert report.current == pytest.approx(
            report.averages[0] - report.averages[1], rel=1e-14)


class TestElectrochemicalProfile:
    def test_unit_state(self):
        problem = paper_problem(L=1.0, R=1.0, voltage=0.0)
        mesh = Mesh.uniform(9)
        state = constant_state(problem, mesh)
        mu = electrochemical_profile(problem, state)
        assert np.abs(mu).max() == 0.0

    def test_boundary_values(self):
        problem = paper_problem(voltage=10.0)
        mesh = Mesh.uniform(21)
        guess = initial_guess(problem, mesh)
        mu = electrochemical_profile(problem, guess)
        for k, z in enumerate((1, -1)):
            assert mu[k, 0] == pytest.approx(z * 10 + math.log(0.008), rel=1e-14)
            assert mu[k, -1] == pytest.approx(math.log(0.001), rel=1e-14)

    def test_hard_sphere_correction_small_when_dilute(self):
        problem = paper_problem(voltage=10.0, excess="hard-sphere", radii=(0.2, 0.4))
        ideal = paper_problem(voltage=10.0)
        mesh = Mesh.uniform(21)
        guess = initial_guess(problem, mesh)
        mu_hs = electrochemical_profile(problem, guess)
        mu_id = electrochemical_profile(ideal, guess)
        diff = np.abs(mu_hs - mu_id).max()
        assert 0 < diff < 0.05


class TestMirrorSymmetry:
    def test_species_swap_under_voltage_reversal(self):
        # with zero charge, (phi, c1, c2) -> (-phi, c2, c1) maps V to -V
        mesh = Mesh.uniform(81)
        for V in (10.0, 30.0):
            plus = paper_problem(voltage=V)
            minus = paper_problem(voltage=-V)
            Jp = compute_fluxes(plus, mesh, solve_nonlinear(
                plus, mesh, initial_guess(plus, mesh))).averages
            Jm = compute_fluxes(minus, mesh, solve_nonlinear(
                minus, mesh, initial_guess(minus, mesh))).averages
            assert abs(Jp[0] - Jm[1]) / abs(Jp[0]) < 1e-6


class TestTransfer:
    def test_identity_on_same_mesh(self):
        problem = paper_problem(voltage=10.0)
        mesh = Mesh.uniform(21)
        guess = initial_guess(problem, mesh)
        again = transfer(guess, mesh, problem)
        np.testing.assert_array_equal(again.phi, guess.phi)

    @given(st.integers(min_value=5, max_value=40))
    @settings(max_examples=10, deadline=None)
    def test_preserves_positivity(self, n):
        problem = paper_problem(voltage=10.0)
        mesh = Mesh.uniform(21)
        guess = initial_guess(problem, mesh)
        target = Mesh.uniform(n)
        moved = transfer(guess, target, problem)
        assert (moved.concentrations > 0).all()
