import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from qeclosure.closure import (
    GaussianLinearProvider,
    MonteCarloProvider,
    NearEqMatrices,
    adiabatic_drift,
    closure_potential_derivatives,
    drift_jacobian,
    hamiltonian_eval,
    lagrangian_eval,
    legendre_mu,
    near_eq_matrices,
    residual_at,
    with_derivatives,
)
from qeclosure.ensemble import MomentSet, estimate_moments, sample_equilibrium
from qeclosure.errors import DegenerateObservablesError, LowOverlapError
from qeclosure.hamiltonian import ObservableSet, harmonic_oscillator, momentum, position, position_square

from conftest import EXACT

vec2 = hnp.arrays(np.float64, 2, elements=st.floats(-3, 3))


def gaussian_moments(lam, C, drift, D):
    lam = np.asarray(lam, float)
    return MomentSet(lam, C @ lam, 0.5 * lam @ C @ lam, C, drift, D, 0.5 * float(lam @ D @ lam))


def random_moments(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(2, 2))
    Y = rng.normal(size=(2, 2))
    lam = rng.normal(size=2)
    return gaussian_moments(lam, X @ X.T + 0.3 * np.eye(2), rng.normal(size=2), Y @ Y.T)


def unit_moments(lam):
    return gaussian_moments([lam], np.eye(1), np.zeros(1), np.eye(1))


def test_residual_examples():
    ms = unit_moments(0.0)
    assert residual_at([[0.7]], [[0.2]], ms, [0.0], [1.0]) == pytest.approx([0.7])
    ms1 = unit_moments(1.0)
    assert residual_at([[0.7]], [[0.2]], ms1, [1.0], [0.0]) == pytest.approx([0.2])
    with pytest.raises(ValueError):
        residual_at([[0.7, 1.0]], [[0.2, 0.1]], ms1, [1.0], [0.0])


def test_lagrangian_examples():
    ms = random_moments(1)
    f = np.linalg.solve(ms.C, ms.drift)
    zero = gaussian_moments([0.0, 0.0], ms.C, ms.drift, ms.D)
    assert lagrangian_eval(zero, zero.lam, f, 0.7) == pytest.approx(0.0, abs=1e-14)
    assert lagrangian_eval(unit_moments(1.0), [1.0], [0.0], 0.5) == pytest.approx(0.125)


@given(st.integers(0, 10_000), vec2, st.floats(0, 1))
def test_lagrangian_structure(seed, lam_dot, eps):
    ms = random_moments(seed)
    L = lagrangian_eval(ms, ms.lam, lam_dot, eps)
    assert L >= 0
    assert L - lagrangian_eval(ms, ms.lam, lam_dot, 0.0) == pytest.approx(eps**2 * ms.w, abs=1e-12)


def test_lagrangian_adiabatic_limit_ignores_d():
    ms = random_moments(3)
    other = MomentSet(ms.lam, ms.a, ms.phi, ms.C, ms.drift, ms.D + 5.0, ms.w + 7.0)
    assert lagrangian_eval(ms, ms.lam, [0.3, -0.1], 0.0) == lagrangian_eval(other, ms.lam, [0.3, -0.1], 0.0)


def test_legendre_examples():
    ms = random_moments(4)
    f = adiabatic_drift(ms)
    assert np.allclose(legendre_mu(ms, ms.lam, f).mu, 0.0, atol=1e-14)
    assert legendre_mu(unit_moments(0.0), [0.0], [2.0]).mu == pytest.approx([2.0])


@given(st.integers(0, 10_000), vec2, st.floats(0, 1))
def test_legendre_identity(seed, lam_dot, eps):
    ms = random_moments(seed)
    pair = legendre_mu(ms, ms.lam, lam_dot, eps)
    L = lagrangian_eval(ms, ms.lam, lam_dot, eps)
    assert pair.hamiltonian_value + L == pytest.approx(float(lam_dot @ pair.mu), abs=1e-12 * (1 + abs(L)))


def test_hamiltonian_examples():
    ms = random_moments(5)
    assert hamiltonian_eval(ms, ms.lam, [0.0, 0.0], 0.6) == pytest.approx(-0.36 * ms.w)
    assert hamiltonian_eval(unit_moments(1.0), [1.0], [1.0], 1.0) == pytest.approx(0.0)
    z = gaussian_moments([0.0, 0.0], ms.C, ms.drift, ms.D)
    mu = np.array([0.4, -1.2])
    ci = np.linalg.inv(ms.C)
    assert hamiltonian_eval(z, z.lam, mu, 0.3) == pytest.approx(0.5 * mu @ ci @ mu + ms.drift @ ci @ mu)


def test_singular_c_raises():
    ms = gaussian_moments([1.0, 0.0], np.zeros((2, 2)), np.zeros(2), np.eye(2))
    with pytest.raises(DegenerateObservablesError):
        lagrangian_eval(ms, ms.lam, [0.0, 0.0], 0.5)


def test_adiabatic_drift_oscillator(oscillator, osc_batch, q_only):
    prov = MonteCarloProvider(oscillator, q_only, osc_batch, with_errors=True)
    for lam in (0.0, 0.8):
        ms = prov.moments([lam])
        assert abs(adiabatic_drift(ms)[0]) < 3 * ms.std_errors["drift"][0] / ms.C[0, 0] + 1e-12


def test_adiabatic_drift_rotation():
    # A = (q, p) on the unit oscillator: C = I, LA = (p, -q) = Omega A
    omega = np.array([[0.0, 1.0], [-1.0, 0.0]])
    prov = GaussianLinearProvider(np.eye(2), omega, np.zeros((2, 2)))
    lam = np.array([0.3, -0.7])
    assert np.allclose(adiabatic_drift(prov.moments(lam)), omega @ lam)


def test_drift_jacobian_examples(oscillator, osc_batch, q_only):
    prov = MonteCarloProvider(oscillator, q_only, osc_batch)
    assert abs(drift_jacobian(prov, [0.2])[0, 0]) < 0.05
    C = np.array([[2.0, 0.3], [0.3, 1.0]])
    J = np.array([[0.0, 0.8], [-0.8, 0.0]])
    exact = np.linalg.solve(C, J)
    g = GaussianLinearProvider(C, J, np.eye(2))
    assert np.allclose(drift_jacobian(g, [0.4, -0.2]), exact, rtol=1e-3)


def test_drift_jacobian_second_order():
    # nonlinear drift through a lambda-dependent C: f = C(lam)^{-1} J lam
    class Curved:
        def moments(self, lam, crn=False):
            lam = np.asarray(lam, float)
            C = np.eye(2) * (1 + lam @ lam)
            drift = np.array([lam[1], -lam[0]]) + 0.3 * lam**2
            return MomentSet(lam, C @ lam, 0.0, C, drift, np.eye(2), 0.5 * lam @ lam)

    lam = np.array([0.5, -0.4])
    exact = drift_jacobian(Curved(), lam, 1e-5)
    e1 = np.abs(drift_jacobian(Curved(), lam, 0.02) - exact).max()
    e2 = np.abs(drift_jacobian(Curved(), lam, 0.01) - exact).max()
    assert 3.0 < e1 / e2 < 5.0


def test_probe_low_overlap_names_direction(oscillator, q_only):
    small = sample_equilibrium(oscillator, EXACT, 500, seed=1)
    prov = MonteCarloProvider(oscillator, q_only, small)
    with pytest.raises(LowOverlapError) as info:
        drift_jacobian(prov, [5.0], 0.5)
    assert info.value.direction == 0


def test_closure_potential_derivatives(oscillator, osc_batch, q_only):
    prov = MonteCarloProvider(oscillator, q_only, osc_batch)
    g0, h0 = closure_potential_derivatives(prov, [0.0])
    d0 = near_eq_matrices(oscillator, osc_batch, q_only).D
    assert abs(g0[0]) < 1e-7 and h0[0, 0] == pytest.approx(d0[0, 0], rel=1e-3)
    g, h = closure_potential_derivatives(prov, [0.6])
    assert g[0] == pytest.approx(0.6, abs=0.02) and h[0, 0] == pytest.approx(1.0, abs=0.03)
    ms = with_derivatives(prov, [0.6])
    assert ms.w == pytest.approx(0.5 * 0.36 * ms.D[0, 0], rel=1e-14)


def test_hessian_symmetric_two_dims():
    g = GaussianLinearProvider(np.array([[2.0, 0.3], [0.3, 1.0]]), np.zeros((2, 2)), np.array([[1.0, 0.2], [0.2, 0.5]]))
    grad, hess = closure_potential_derivatives(g, [0.3, 0.1])
    assert np.allclose(hess, hess.T) and np.allclose(hess, g.D0, atol=1e-6)
    assert np.allclose(grad, g.D0 @ [0.3, 0.1], atol=1e-8)


def test_near_eq_oscillator(oscillator, osc_batch, q_only):
    mats = near_eq_matrices(oscillator, osc_batch, q_only)
    se = mats.std_errors
    assert abs(mats.C[0, 0] - 1) < 3 * se["C"][0, 0]
    assert mats.Jmat[0, 0] == 0.0
    assert abs(mats.D[0, 0] - 1) < 3 * se["D"][0, 0]
    assert mats.d_consistent() and mats.j_is_zero()


def test_near_eq_odd_pair_has_nonzero_j(oscillator, osc_batch):
    mats = near_eq_matrices(oscillator, osc_batch, ObservableSet([position(0, 1), momentum(0, 1)]))
    assert not mats.j_is_zero()
    assert np.allclose(mats.Jmat, -mats.Jmat.T)
    assert mats.Jmat[1, 0] == pytest.approx(-1.0, abs=0.02)  # <(Lp) q> = -<q^2>
    assert mats.d_consistent()


def test_near_eq_even_squares_fpu(fpu16):
    from conftest import FPU_SPEC

    batch = sample_equilibrium(fpu16, FPU_SPEC, 20_000, seed=2)
    raw = ObservableSet([position_square(0, 16), position_square(7, 16)])
    c = batch.observables(raw).mean(axis=0)
    obs = ObservableSet([position_square(0, 16, c[0]), position_square(7, 16, c[1])])
    mats = near_eq_matrices(fpu16, batch, obs)
    assert mats.j_is_zero(4.0)
    assert np.all(np.linalg.eigvalsh(mats.D) >= -1e-8 * np.trace(mats.D))


def test_near_eq_requires_equilibrium(oscillator, osc_batch, q_only):
    from qeclosure.ensemble import reweight

    with pytest.raises(ValueError):
        near_eq_matrices(oscillator, reweight(osc_batch, q_only, [0.3]), q_only)


def test_matrices_json_roundtrip():
    m = NearEqMatrices(np.eye(2), [[0, 1], [-1, 0]], np.diag([1.0, 2.0]), std_errors={"C": np.ones((2, 2))})
    back = NearEqMatrices.from_dict(m.to_dict())
    assert np.array_equal(back.Jmat, m.Jmat) and np.array_equal(back.std_errors["C"], m.std_errors["C"])


def test_moment_set_json_roundtrip(oscillator, osc_batch, q_only):
    ms = estimate_moments(oscillator, q_only, [0.3], osc_batch)
    back = MomentSet.from_dict(ms.to_dict())
    assert np.array_equal(back.D, ms.D) and back.phi == ms.phi


def test_provider_cache_radius(oscillator, osc_batch, q_only):
    prov = MonteCarloProvider(oscillator, q_only, osc_batch, cache_radius=0.01)
    assert prov.moments([0.3001]) is prov.moments([0.2999])


def test_provider_resamples_far_out(oscillator, q_only):
    small = sample_equilibrium(oscillator, EXACT, 2000, seed=1)
    prov = MonteCarloProvider(oscillator, q_only, small, spec=EXACT, seed=4)
    ms = prov.moments([6.0])
    assert prov.resampled == 1 and ms.a[0] == pytest.approx(6.0, abs=0.2)
    with pytest.raises(LowOverlapError):
        prov.moments([7.0], crn=True)
