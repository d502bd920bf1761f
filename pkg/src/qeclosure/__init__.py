"""Best-fit quasi-equilibrium closure for underresolved Hamiltonian dynamics."""

__version__ = "0.1.0"

from .closure import (
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
)
from .ensemble import (
    EquilibriumSpec,
    MomentSet,
    SampleBatch,
    estimate_moments,
    log_partition_shift,
    resample_quasi_equilibrium,
    reweight,
    sample_equilibrium,
)
from .hamiltonian import (
    HamiltonianSystem,
    Observable,
    ObservableSet,
    PhaseVector,
    fpu_chain,
    harmonic_chain,
    harmonic_oscillator,
    liouville_apply,
    symplectic_step,
    time_reverse,
)
from .reduced import (
    ClosureConfig,
    ClosureTrajectory,
    InitialCondition,
    entropy_and_rate,
    integrate_adiabatic,
    integrate_far,
    integrate_near_G,
    integrate_near_M,
)
from .verify import (
    HJGrid,
    analytic_even_solution,
    even_mode_decomposition,
    hj_solve_1d,
    resolve_ensemble,
    tune_epsilon,
)
