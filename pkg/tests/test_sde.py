import numpy as np
import pytest

import fbsdelab as fl
from fbsdelab.errors import DomainError, SimulationError


def brownian():
    return fl.ForwardSpec(mu=0.0, sigma=1.0, x0=0.0, horizon=1.0)


def cubic_drift():
    # drift x - 0.1 x^3 is only locally Lipschitz; the taming guard applies
    return fl.ForwardSpec(mu=lambda t, x: x - 0.1 * x ** 3, sigma=0.3,
                          x0=1.0, horizon=1.0)


class TestTimeGrid:
    def test_basics(self):
        tg = fl.TimeGrid(0.0, 1.0, 4)
        assert tg.dt == 0.25
        np.testing.assert_allclose(tg.times(), [0.0, 0.25, 0.5, 0.75, 1.0])
        assert tg.refined(2).n_steps == 8

    def test_validation(self):
        with pytest.raises(DomainError):
            fl.TimeGrid(0.0, 1.0, 0)
        with pytest.raises(DomainError):
            fl.TimeGrid(1.0, 1.0, 4)


class TestSimulate:
    def test_frozen_dynamics(self):
        fwd = fl.ForwardSpec(mu=0.0, sigma=0.0, x0=1.5, horizon=1.0)
        ens = fl.simulate(fwd, fl.TimeGrid(0, 1, 16), 50, seed=1)
        assert np.all(ens.states == 1.5)

    def test_initial_state_column(self):
        ens = fl.simulate(brownian(), fl.TimeGrid(0, 1, 8), 100, seed=3)
        assert np.all(ens.states[:, 0] == 0.0)

    def test_brownian_moments(self):
        n = 40_000
        ens = fl.simulate(brownian(), fl.TimeGrid(0, 1, 64), n, seed=9)
        xT = ens.states[:, -1]
        assert abs(xT.mean()) <= 4.0 / np.sqrt(n)
        var = xT.var(ddof=1)
        var_se = np.sqrt(2.0 / (n - 1))       # variance of the sample variance of N(0,1)
        assert abs(var - 1.0) <= 5.0 * var_se

    def test_noise_sanity_diagnostics(self):
        ens = fl.simulate(brownian(), fl.TimeGrid(0, 1, 32), 20_000, seed=4)
        sanity = ens.noise_sanity()
        assert sanity["max_abs_mean_over_se"] < 5.0
        assert sanity["max_abs_var_dev_over_se"] < 6.0

    def test_determinism_bitwise(self):
        a = fl.simulate(cubic_drift(), fl.TimeGrid(0, 1, 32), 500, seed=77)
        b = fl.simulate(cubic_drift(), fl.TimeGrid(0, 1, 32), 500, seed=77)
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.dW, b.dW)

    def test_paths_independent_of_ensemble_size(self):
        # per-block substreams: path i never depends on how many paths follow
        small = fl.simulate(brownian(), fl.TimeGrid(0, 1, 16), 10, seed=5)
        large = fl.simulate(brownian(), fl.TimeGrid(0, 1, 16), 6000, seed=5)
        assert np.array_equal(small.states, large.states[:10])
        assert np.array_equal(small.dW, large.dW[:10])

    def test_driftless_paths_reproduce_increments(self):
        # X_{k+1} - X_k = dW_k up to float cancellation in the subtraction
        ens = fl.simulate(brownian(), fl.TimeGrid(0, 1, 16), 200, seed=6, scheme="euler")
        np.testing.assert_allclose(np.diff(ens.states, axis=1), ens.dW,
                                   rtol=0.0, atol=1e-12)

    def test_unknown_scheme_rejected(self):
        with pytest.raises(DomainError):
            fl.simulate(brownian(), fl.TimeGrid(0, 1, 4), 10, seed=0, scheme="milstein")

    def test_ensemble_arrays_frozen(self):
        ens = fl.simulate(brownian(), fl.TimeGrid(0, 1, 4), 10, seed=0)
        with pytest.raises(ValueError):
            ens.states[0, 0] = 99.0

    def test_explosion_raises_with_location(self):
        fwd = fl.ForwardSpec(mu=lambda t, x: x ** 3, sigma=0.0, x0=10.0, horizon=4.0)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(SimulationError) as err:
                fl.simulate(fwd, fl.TimeGrid(0, 4, 8), 4, seed=0, scheme="euler")
        assert err.value.path_index >= 0
        assert err.value.step >= 1
        assert "tamed" in str(err.value)

    def test_taming_keeps_cubic_drift_finite(self):
        fwd = fl.ForwardSpec(mu=lambda t, x: x ** 3, sigma=0.0, x0=10.0, horizon=4.0)
        ens = fl.simulate(fwd, fl.TimeGrid(0, 4, 8), 4, seed=0, scheme="tamed_euler")
        assert np.all(np.isfinite(ens.states))

    def test_taming_gap_shrinks_quadratically_for_lipschitz_drift(self):
        # on linear drift, tamed and plain Euler differ by O(dt^2) per step
        fwd_lin = fl.ForwardSpec(mu=lambda t, x: 0.8 * x, sigma=0.2, x0=1.0, horizon=1.0)
        gaps = []
        for n in (32, 64, 128):
            tg = fl.TimeGrid(0, 1, n)
            plain = fl.simulate(fwd_lin, tg, 200, seed=11, scheme="euler")
            tamed = fl.simulate(fwd_lin, tg, 200, seed=11, scheme="tamed_euler")
            # matched noise: per-step gap after one step from the same state
            one_step_gap = np.max(np.abs(plain.states[:, 1] - tamed.states[:, 1]))
            gaps.append(one_step_gap)
        # dt halves -> per-step gap shrinks by ~4
        assert gaps[0] / gaps[1] == pytest.approx(4.0, rel=0.2)
        assert gaps[1] / gaps[2] == pytest.approx(4.0, rel=0.2)

    def test_weak_self_convergence_of_tamed_scheme(self):
        # coarse run against an independent fine-step reference
        fwd = cubic_drift()
        coarse = fl.simulate(fwd, fl.TimeGrid(0, 1, 256), 40_000, seed=101)
        fine = fl.simulate(fwd, fl.TimeGrid(0, 1, 4096), 40_000, seed=202)
        mc, sc = coarse.states[:, -1].mean(), coarse.states[:, -1].std(ddof=1) / 200.0
        mf, sf = fine.states[:, -1].mean(), fine.states[:, -1].std(ddof=1) / 200.0
        assert abs(mc - mf) <= 3.0 * np.hypot(sc, sf)

    def test_moments_stable_under_dt_halving(self):
        fwd = cubic_drift()
        a = fl.simulate(fwd, fl.TimeGrid(0, 1, 256), 20_000, seed=7)
        b = fl.simulate(fwd, fl.TimeGrid(0, 1, 512), 20_000, seed=7)
        assert np.max(np.abs(a.states)) < 10.0
        for p in (2, 4, 6, 8):
            ma = np.mean(np.abs(a.states[:, -1]) ** p)
            mb = np.mean(np.abs(b.states[:, -1]) ** p)
            assert abs(ma - mb) / ma < 0.1, p

    def test_csv_export_roundtrip_shape(self, tmp_path):
        ens = fl.simulate(brownian(), fl.TimeGrid(0, 1, 3), 5, seed=2)
        path = tmp_path / "paths.csv"
        ens.to_csv(path)
        rows = path.read_text().strip().splitlines()
        assert rows[0] == "path_id,t,X,dW"
        assert len(rows) == 1 + 5 * 4
        first = rows[1].split(",")
        assert first[0] == "0" and float(first[2]) == 0.0


class TestControlledSimulate:
    def test_zero_policy_matches_uncontrolled(self, benchmark_cps):
        tg = fl.TimeGrid(0, 1, 32)
        controlled = fl.controlled_simulate(
            benchmark_cps, fl.ControlPolicy.zero(), tg, 300, seed=21)
        plain = fl.simulate(benchmark_cps.uncontrolled_forward(), tg, 300, seed=21)
        assert np.array_equal(controlled.states, plain.states)

    def test_pure_integration(self):
        # A = 0, sigma = 0, B = 1, u = 1 from x0 = 0: X_t = t exactly
        cps = fl.ControlProblemSpec(A=0.0, B=1.0, sigma=0.0, delta=0.0, target=0.0,
                                    control_weight=1.0, terminal_weight=0.0,
                                    x0=0.0, horizon=1.0)
        tg = fl.TimeGrid(0, 1, 64)
        ens = fl.controlled_simulate(cps, fl.ControlPolicy.constant(1.0), tg, 3,
                                     seed=0, scheme="euler")
        np.testing.assert_allclose(ens.states[0], tg.times(), atol=1e-14)

    def test_feedback_cost_matches_quadratic_value(self, benchmark_cps, benchmark_value):
        tg = fl.TimeGrid(0, 1, 128)
        ric = fl.solve_riccati(benchmark_cps, tg)
        est = fl.estimate_cost(benchmark_cps, fl.ControlPolicy.riccati_feedback(ric),
                               tg, 20_000, seed=13)
        assert abs(est.mean - benchmark_value) <= 3.0 * est.stderr + 0.01
