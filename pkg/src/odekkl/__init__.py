"""Learning state observers for nonlinear systems by differentiating
through a fixed-step ODE solver.

The two observer families:

* :class:`~odekkl.observer.KklObserver` integrates a stable latent filter
  of the measurements and decodes states with a learned inverse map; the
  filter eigenvalues can be trained jointly with the decoder.
* :class:`~odekkl.observer.LuenbergerObserver` corrects a partially known
  model with output injection and learns the unknown drift residual.

See the README for the CLI (`odekkl simulate|train|eval|sweep|genmap`)
and file formats.
"""

from .integrate import DivergenceError, TimeGrid, Trajectory, rk4_step, solve_coupled, solve_ivp
from .net import MlpNet, MlpSpec, init_params, jacobian_input, lipschitz_upper_bound
from .observer import (
    KklObserver,
    LuenbergerObserver,
    d_eigenvalues,
    estimate,
    kkl_dim,
    latent_drift,
    latent_drift_nonauto,
    load_observer,
    luenberger_drift,
    make_kkl_observer,
    make_luenberger_observer,
    run_observer,
    save_observer,
)
from .systems import ExcitationSpec, NoiseSpec, SystemSpec, make_system, sample_noise
from .train import (
    Dataset,
    LossBreakdown,
    TrainConfig,
    TrainingDivergence,
    generate_dataset,
    grad_adjoint,
    grad_backprop,
    loss_lagrange,
    loss_nonauto,
    loss_regularized,
    pde_penalty,
    train,
)
from .evaluation import (
    ErrorBoundReport,
    ScenarioResult,
    SweepPoint,
    convergence_time,
    error_bound_report,
    generalization_map,
    rmse,
    robustness_sweep,
    scenario_matrix,
    sylvester_transform,
)

__version__ = "0.1.0"
