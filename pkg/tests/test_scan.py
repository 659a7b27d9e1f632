import numpy as np
import pytest

from pnpflux import (
    AxisSpec,
    ContourSet,
    GridSpec,
    ProblemTemplate,
    RatioSurface,
    ValidationError,
    build_surface,
    classify_regions,
    detect_saddle_nodes,
    internal_profiles,
    sweep_q,
    sweep_v,
    trace_unity_contours,
)
from pnpflux.scan import Contour


def synthetic_surface(f1, f2, q0s, vs):
    q0s = np.asarray(q0s, dtype=float)
    vs = np.asarray(vs, dtype=float)
    Q, V = np.meshgrid(q0s, vs)
    lam = np.stack([f1(Q, V), f2(Q, V)])
    return RatioSurface(
        q0=q0s, voltage=vs, J=np.ones_like(lam), lam=lam,
        ok=np.ones(Q.shape, dtype=bool),
        reference_J=np.ones((2, vs.size)),
    )


class TestAxisSpec:
    def test_linear(self):
        np.testing.assert_allclose(AxisSpec(0, 1, 3).values(), [0, 0.5, 1])

    def test_log(self):
        vals = AxisSpec(1e-4, 1.0, 5, spacing="log").values()
        np.testing.assert_allclose(np.diff(np.log(vals)), np.log(10))

    def test_hybrid_is_sorted_and_spans(self):
        vals = AxisSpec(1e-4, 3.0, 30, spacing="hybrid").values()
        assert vals[0] == pytest.approx(1e-4)
        assert vals[-1] == pytest.approx(3.0)
        assert (np.diff(vals) > 0).all()
        assert vals.size == 30

    def test_validation(self):
        with pytest.raises(ValidationError):
            AxisSpec(1, 0, 5)
        with pytest.raises(ValidationError):
            AxisSpec(0, 1, 5, spacing="log")
        with pytest.raises(ValidationError):
            AxisSpec(0, 1, 1)


class TestSweepQ:
    def test_small_charge_ordering(self, fast_template):
        sweep = sweep_q(10.0, [1e-4, 1e-3], fast_template)
        assert sweep.ok.all()
        assert (sweep.lam[0] < 1).all()
        assert (sweep.lam[1] > 1).all()

    def test_ratios_approach_unity(self, fast_template):
        sweep = sweep_q(10.0, [1e-5, 1e-4], fast_template)
        # lambda - 1 = O(q0): slope magnitudes here are a few hundred
        assert abs(sweep.lam[0, 0] - 1) < 0.01
        assert abs(sweep.lam[1, 0] - 1) < 0.01
        assert abs(sweep.lam[0, 1] - 1) < 0.1

    def test_universal_ordering(self, fast_template):
        sweep = sweep_q(10.0, [1e-4, 1e-3, 1e-2], fast_template)
        assert (sweep.lam[0] < sweep.lam[1]).all()

    def test_unsorted_rejected(self, fast_template):
        with pytest.raises(ValidationError):
            sweep_q(10.0, [1e-3, 1e-4], fast_template)

    def test_large_charge_selectivity(self, fast_template):
        sweep = sweep_q(50.0, [1.0], fast_template)
        assert sweep.ok.all()
        assert sweep.lam[0, 0] < 0.05   # cation nearly shut off
        assert sweep.lam[1, 0] < 1.0    # anion still reduced at V = 50


class TestSweepV:
    def test_intercepts_near_critical_voltages(self, fast_template):
        vs = np.array([-25.0, -15.0, 15.0, 25.0])
        sweep = sweep_v(1e-4, vs, fast_template)
        assert sweep.ok.all()
        # lambda_1 crosses 1 between 15 and 25, lambda_2 between -25 and -15
        assert (sweep.lam[0, 2] - 1) * (sweep.lam[0, 3] - 1) < 0
        assert (sweep.lam[1, 0] - 1) * (sweep.lam[1, 1] - 1) < 0

    def test_selectivity_window(self, fast_template):
        sweep = sweep_v(0.04, np.array([-10.0, -5.0]), fast_template)
        assert (sweep.lam[1] > 2).all()   # anion flux strongly enhanced
        assert (sweep.lam[0] < 0.5).all()

    def test_linear_vs_nonlinear_current_voltage(self, fast_template):
        vs = np.linspace(-110, 40, 7)
        nearly = sweep_v(0.0005, vs, fast_template)
        bent = sweep_v(0.003, vs, fast_template)

        def lack_of_fit(sweep):
            coef = np.polyfit(vs, sweep.J[0], 1)
            resid = sweep.J[0] - np.polyval(coef, vs)
            return np.abs(resid).max() / np.abs(sweep.J[0]).max()

        assert lack_of_fit(nearly) < 0.05
        assert lack_of_fit(bent) > 3 * lack_of_fit(nearly)


class TestBuildSurface:
    def test_small_grid_structure(self, fast_template):
        grid = GridSpec(
            q0_axis=AxisSpec(1e-4, 1e-2, 3, spacing="log"),
            v_axis=AxisSpec(-30.0, 30.0, 3),
            template=fast_template,
        )
        surface = build_surface(grid)
        assert surface.ok.all()
        assert (surface.lam[0] < surface.lam[1]).all()

    def test_worker_count_does_not_change_results(self, tiny_template):
        grid = GridSpec(
            q0_axis=AxisSpec(1e-4, 1e-3, 2, spacing="log"),
            v_axis=AxisSpec(-10.0, 10.0, 3),
            template=tiny_template,
        )
        serial = build_surface(grid, workers=1)
        parallel = build_surface(grid, workers=2)
        np.testing.assert_array_equal(serial.lam, parallel.lam)
        np.testing.assert_array_equal(serial.J, parallel.J)

    def test_warm_start_matches_cold_start(self, fast_template):
        grid = GridSpec(
            q0_axis=AxisSpec(2e-4, 2e-3, 3, spacing="log"),
            v_axis=AxisSpec(5.0, 15.0, 2),
            template=fast_template,
        )
        surface = build_surface(grid)
        # cold solves at a few grid points reproduce the warm-started fluxes
        rng = np.random.default_rng(0)
        for _ in range(3):
            i = rng.integers(0, 2)
            j = rng.integers(0, 3)
            cold = fast_template.solve(float(surface.q0[j]), float(surface.voltage[i]))
            rel = np.abs(cold.fluxes.averages - surface.J[:, i, j]) / np.abs(surface.J[:, i, j])
            assert rel.max() < 1e-8


class TestContours:
    def test_synthetic_plane(self):
        q0s = np.linspace(0.2, 1.8, 9)
        vs = np.linspace(-0.8, 0.8, 9)
        surface = synthetic_surface(lambda q, v: q + v, lambda q, v: q + v + 5.0, q0s, vs)
        refiner = lambda q0, v: (q0 + v, q0 + v + 5.0)
        contours = trace_unity_contours(surface, refiner=refiner, tol=1e-6, max_refine=40)
        species1 = [c for c in contours.curves if c.species == 1]
        assert len(species1) == 1
        pts = species1[0].points
        np.testing.assert_allclose(pts[:, 0] + pts[:, 1], 1.0, atol=1e-6)
        # species 2 never crosses unity on this window
        assert not [c for c in contours.curves if c.species == 2]

    def test_vertices_satisfy_tolerance(self):
        q0s = np.linspace(0.2, 1.8, 7)
        vs = np.linspace(-0.8, 0.8, 7)
        f1 = lambda q, v: q * np.exp(v)
        surface = synthetic_surface(f1, lambda q, v: q * 0 + 2.0, q0s, vs)
        refiner = lambda q0, v: (f1(q0, v), 2.0)
        contours = trace_unity_contours(surface, refiner=refiner, tol=1e-3)
        for curve in contours.curves:
            for q0, v in curve.points:
                assert abs(f1(q0, v) - 1.0) < 1e-3

    def test_no_crossing_gives_empty_set(self):
        q0s = np.linspace(0.1, 1.0, 4)
        vs = np.linspace(0.0, 1.0, 4)
        surface = synthetic_surface(lambda q, v: q * 0 + 2.0, lambda q, v: q * 0 + 3.0, q0s, vs)
        contours = trace_unity_contours(surface, refiner=lambda q, v: (2.0, 3.0))
        assert contours.curves == ()

    def test_skips_failed_cells(self):
        q0s = np.linspace(0.2, 1.8, 5)
        vs = np.linspace(-0.8, 0.8, 5)
        surface = synthetic_surface(lambda q, v: q + v, lambda q, v: q + v + 5.0, q0s, vs)
        ok = surface.ok.copy()
        ok[:, :] = False
        broken = RatioSurface(q0=surface.q0, voltage=surface.voltage, J=surface.J,
                              lam=surface.lam, ok=ok, reference_J=surface.reference_J)
        contours = trace_unity_contours(broken, refiner=lambda q, v: (q + v, q + v + 5.0))
        assert contours.curves == ()


class TestClassifyRegions:
    def test_sign_patterns(self):
        q0s = np.array([0.1, 0.2])
        vs = np.array([0.0, 1.0])
        lam1 = np.array([[1.5, 0.5], [0.5, 0.5]])
        lam2 = np.array([[2.0, 2.0], [2.0, 0.8]])
        surface = RatioSurface(
            q0=q0s, voltage=vs, J=np.ones((2, 2, 2)),
            lam=np.stack([lam1, lam2]), ok=np.ones((2, 2), dtype=bool),
            reference_J=np.ones((2, 2)),
        )
        labels, anomalies = classify_regions(surface)
        assert labels[0, 0] == "I"
        assert labels[0, 1] == "II"
        assert labels[1, 0] == "II"
        assert labels[1, 1] == "III"
        assert not anomalies.any()

    def test_anomaly_flagged(self):
        surface = RatioSurface(
            q0=np.array([0.1, 0.2]), voltage=np.array([0.0, 1.0]),
            J=np.ones((2, 2, 2)),
            lam=np.stack([np.full((2, 2), 1.5), np.full((2, 2), 0.5)]),
            ok=np.ones((2, 2), dtype=bool),
            reference_J=np.ones((2, 2)),
        )
        labels, anomalies = classify_regions(surface)
        assert anomalies.all()
        assert (labels == "").all()


class TestSaddleNodes:
    def test_fold_detected(self):
        v = np.linspace(-1, 1, 21)
        q0 = 1.0 - v ** 2  # fold at (1, 0)
        contour = Contour(species=2, points=np.column_stack([q0, v]))
        points = detect_saddle_nodes(ContourSet(curves=(contour,)))
        assert len(points) == 1
        assert points[0].q0 == pytest.approx(1.0, abs=1e-6)
        assert points[0].voltage == pytest.approx(0.0, abs=1e-6)
        assert points[0].species == 2

    def test_monotone_contour_empty(self):
        v = np.linspace(-1, 1, 15)
        contour = Contour(species=1, points=np.column_stack([np.exp(v), v]))
        assert detect_saddle_nodes(ContourSet(curves=(contour,))) == []

    def test_minimum_also_detected(self):
        v = np.linspace(-1, 1, 21)
        contour = Contour(species=1, points=np.column_stack([1.0 + v ** 2, v]))
        points = detect_saddle_nodes(ContourSet(curves=(contour,)))
        assert len(points) == 1
        assert points[0].q0 == pytest.approx(1.0, abs=1e-6)


class TestInternalProfiles:
    def test_constant_case_flat(self):
        template = ProblemTemplate(L=0.01, R=0.01, n_nodes=41, n_outer=2)
        profiles = internal_profiles(template, 0.0, 0.0, with_reference=False)
        assert np.abs(profiles.phi).max() < 1e-10
        assert np.abs(profiles.fluxes.per_element).max() < 1e-12

    def test_sharp_layers_at_neck_edges(self, fast_template):
        profiles = internal_profiles(fast_template, 0.04, 10.0, with_reference=False)
        x = profiles.x
        dphi = np.abs(np.diff(profiles.phi) / np.diff(x))
        near = ((np.abs(0.5 * (x[:-1] + x[1:]) - 1 / 3) < 0.05)
                | (np.abs(0.5 * (x[:-1] + x[1:]) - 2 / 3) < 0.05))
        assert dphi[near].max() > 10 * dphi[~near].max()

    def test_lambda_reported(self, fast_template):
        profiles = internal_profiles(fast_template, 1e-3, 10.0)
        assert profiles.lam is not None
        lam1, lam2 = profiles.lam
        assert lam1 < 1 < lam2
