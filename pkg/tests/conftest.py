import numpy as np
import pytest

import fbsdelab as fl


@pytest.fixture(scope="session")
def benchmark_cps():
    """Unperturbed tracking problem with the tanh/log-cosh closed form."""
    return fl.ControlProblemSpec(
        A=0.0, B=1.0, sigma=1.0, delta=0.0, target=0.0,
        control_weight=1.0, terminal_weight=0.0, x0=1.0, horizon=1.0)


@pytest.fixture(scope="session")
def perturbed_cps():
    return fl.ControlProblemSpec(
        A=0.0, B=1.0, sigma=1.0, delta=0.1, target=0.0,
        control_weight=1.0, terminal_weight=0.0, x0=1.0, horizon=1.0)


@pytest.fixture(scope="session")
def benchmark_setup(benchmark_cps):
    return fl.ProblemSetup.from_control(benchmark_cps, "lqr_delta0")


@pytest.fixture(scope="session")
def perturbed_setup(perturbed_cps):
    return fl.ProblemSetup.from_control(perturbed_cps, "lqr_delta01")


@pytest.fixture(scope="session")
def benchmark_value():
    return float(np.tanh(1.0) + np.log(np.cosh(1.0)))


@pytest.fixture(scope="session")
def grid128():
    return fl.TimeGrid(0.0, 1.0, 128)


@pytest.fixture(scope="session")
def benchmark_ensemble(benchmark_setup, grid128):
    """Production-scale ensemble shared by the backward-solver tests."""
    return fl.simulate(benchmark_setup.forward, grid128, 100_000, seed=5)


@pytest.fixture(scope="session")
def benchmark_direct_solution(benchmark_ensemble, benchmark_setup):
    return fl.solve_lsmc(benchmark_ensemble, benchmark_setup.driver,
                         fl.BasisSpec("polynomial", 4))
