import numpy as np
import pytest
from hypothesis import settings

from qeclosure.closure import NearEqMatrices
from qeclosure.ensemble import EquilibriumSpec, sample_equilibrium
from qeclosure.hamiltonian import ObservableSet, fpu_chain, harmonic_chain, harmonic_oscillator, position

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

EXACT = EquilibriumSpec(analytic_gaussian=True)
FPU_SPEC = EquilibriumSpec(burn_in=500, thinning=20, proposal_scale=0.4, chains=1000, chain_group=250)


@pytest.fixture(scope="session")
def oscillator():
    return harmonic_oscillator()


@pytest.fixture(scope="session")
def q_only():
    return ObservableSet([position(0, 1)])


@pytest.fixture(scope="session")
def osc_batch(oscillator):
    return sample_equilibrium(oscillator, EXACT, 100_000, seed=11)


@pytest.fixture(scope="session")
def chain8():
    return harmonic_chain(8)


@pytest.fixture(scope="session")
def fpu16():
    return fpu_chain(16, 0.25)


def scalar_mats(C=1.0, D=1.0):
    return NearEqMatrices([[C]], [[0.0]], [[D]])


def random_instance(rng, m, j_scale=1.0):
    X = rng.normal(size=(m, m))
    Y = rng.normal(size=(m, m))
    S = rng.normal(size=(m, m))
    return NearEqMatrices(X @ X.T + 0.5 * np.eye(m), j_scale * (S - S.T), Y @ Y.T)


# one pass/fail line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def record_criterion(label, passed, detail=""):
    ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")
    print(ACCEPTANCE_LINES[-1])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
