"""EM-based trajectory optimization for time-varying linear-Gaussian systems.

The package fits per-timestep affine-Gaussian dynamics from rollouts,
smooths latent states against exponential-transformed cost observations,
and improves a time-varying linear-Gaussian policy through closed-form
per-step maximization, benchmarked against a finite-horizon LQR baseline
on a noisy planar point mass.
"""

from .costs import COST_CLIP, CostObservationLaw, QuadraticCost, instantaneous_cost, observed_cost, observed_cost_pdf
from .dynamics import EpisodeData, FitConfig, LtvModel, LtvStep, NiwPrior, condition_step, fit_model, posterior_joint
from .em import (
    StepQuadratic,
    TransitionMoments,
    assemble_quadratic,
    bounded_step,
    closed_form_step,
    covariance_decay_report,
    expected_path_cost,
    soc_em_1,
    soc_em_2,
    surrogate_gradient,
    surrogate_hessian,
    surrogate_term,
    surrogate_value,
    transition_moments,
)
from .harness import RunConfig, RunResult, evaluate_policy, export_results, generate_observations, load_config, run_soc_em
from .lqr import RiccatiPass, lqr_backward, make_phi0, value_at
from .policy import PolicyParams, PolicyStep, sample_action
from .simulator import PlantConfig, Rollout, measure, run_episode, step
from .smoothing import FilterState, SmoothedPosterior, augment, kalman_filter, rts_smooth, sample_latent_paths

__version__ = "0.1.0"
