"""Trust-region adjoint matching for fine-tuning flow-matching policies."""

from .adjoint import (
    LAMBDA_MIN,
    AdjointPath,
    adjoint_matching_loss,
    adjoint_matching_loss_and_grad,
    solve_lean_adjoint,
    terminal_adjoint,
)
from .config import RunConfig, parse_config
from .critic import CriticEnsemble, action_grad, critic_init, critic_update, ensemble_value, polyak_update, td_targets
from .envs import (
    BimodalBandit,
    EnvSpec,
    PointMass2D,
    ReplayBuffer,
    Transition,
    bimodal_bandit_step,
    generate_behavior_dataset,
    pointmass2d_step,
)
from .errors import (
    AdjointDivergenceError,
    ConfigError,
    DomainError,
    FormatError,
    InvalidArchitectureError,
    NonFiniteGradientError,
    NumericalDivergenceError,
    ShapeError,
    TrqamError,
    TrustRegionDomainError,
    UnsupportedOpError,
)
from .flow import (
    DenoisingTrajectory,
    FlowSchedule,
    VelocityField,
    fm_loss,
    pretrain_bc,
    sample_memoryless_sde,
    sample_ode,
    schedule_g,
)
from .numerics import OptimizerState, ParamVector, adam_step, clip_global_norm, grad_params, mlp_forward, mlp_init, vjp_input
from .trainer import TrainerState, evaluate_policy, external_kl_step, init_trainer, qam_fixed_step, run_phase, trqam_step
from .trust_region import TrustRegionState, dual_update, effective_sigma, ema_update, path_kl_estimate

__version__ = "0.1.0"
