"""Flow-matching policies: the OT schedule, ODE/SDE samplers and BC pretraining.

A velocity field is any object with ``__call__(s, x, tau) -> v`` on batched
arrays (``s`` of shape ``(B, ds)``, ``x`` of shape ``(B, da)``, ``tau`` of
shape ``(B,)`` or a scalar) and, when it is used as the frozen base field of
the adjoint solve, ``vjp_x(s, x, tau, cotangent)``. Network-backed fields
take the concatenation ``[s, x, tau]`` as input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import DomainError, NumericalDivergenceError, ShapeError


def schedule_g(tau):
    """Memoryless OT diffusion coefficient ``sqrt(2 (1 - tau) / tau)``."""
    t = np.asarray(tau, dtype=np.float64)
    if np.any(t <= 0.0) or np.any(t > 1.0):
        raise DomainError(f"schedule_g needs tau in (0, 1], got {tau}")
    g = np.sqrt(2.0 * (1.0 - t) / t)
    return float(g) if g.ndim == 0 else g


@dataclass(frozen=True)
class FlowSchedule:
    num_steps: int = 10
    tau_clamp: float | None = None

    def __post_init__(self):
        if self.num_steps < 1:
            raise DomainError("num_steps must be positive")
        if self.tau_clamp is None:
            object.__setattr__(self, "tau_clamp", 0.5 / self.num_steps)
        if not 0.0 < self.tau_clamp <= self.h:
            raise DomainError(f"tau_clamp must lie in (0, h], got {self.tau_clamp}")

    @property
    def h(self) -> float:
        return 1.0 / self.num_steps

    @property
    def taus(self) -> np.ndarray:
        """Grid ``k / K`` for ``k = 0..K``."""
        return np.arange(self.num_steps + 1) / self.num_steps

    @property
    def eval_taus(self) -> np.ndarray:
        """Clamped evaluation times ``max(tau_k, tau_clamp)`` for ``k = 0..K-1``."""
        return np.maximum(self.taus[:-1], self.tau_clamp)


class VelocityField:
    """An MLP velocity field on the input ``[s, x, tau]``."""

    def __init__(self, params: nx.ParamVector, state_dim: int, action_dim: int):
        if params.in_dim != state_dim + action_dim + 1 or params.out_dim != action_dim:
            raise ShapeError(
                f"network {list(params.layer_sizes)} does not fit state_dim={state_dim}, action_dim={action_dim}"
            )
        self.params = params
        self.state_dim = state_dim
        self.action_dim = action_dim

    @classmethod
    def init(cls, state_dim, action_dim, hidden=(64, 64), activation="gelu", seed=0):
        sizes = [state_dim + action_dim + 1, *hidden, action_dim]
        return cls(nx.mlp_init(sizes, activation, seed), state_dim, action_dim)

    def with_params(self, params: nx.ParamVector) -> "VelocityField":
        return VelocityField(params, self.state_dim, self.action_dim)

    @staticmethod
    def inputs(s, x, tau) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), x.shape[:-1])
        s = np.broadcast_to(np.asarray(s, dtype=np.float64), x.shape[:-1] + (np.shape(s)[-1],))
        return np.concatenate([s, x, tau[..., None]], axis=-1)

    def __call__(self, s, x, tau) -> np.ndarray:
        return nx.mlp_forward(self.params, self.inputs(s, x, tau))

    def vjp_x(self, s, x, tau, cotangent) -> np.ndarray:
        full = nx.vjp_input(self.params, self.inputs(s, x, tau), cotangent)
        return full[..., self.state_dim : self.state_dim + self.action_dim]


class GaussianOTVelocity:
    """Exact OT-path velocity for a target ``N(mean, diag(std**2))`` independent of the state.

    With ``X_tau = (1 - tau) X_0 + tau X_1`` and Gaussian endpoints the
    conditional expectation ``E[X_1 - X_0 | X_tau = x]`` is affine in ``x``.
    """

    def __init__(self, mean, std):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.std = np.broadcast_to(np.asarray(std, dtype=np.float64), self.mean.shape).copy()

    def slope(self, tau):
        tau = np.asarray(tau, dtype=np.float64)[..., None]
        var = (1.0 - tau) ** 2 + tau**2 * self.std**2
        return (tau * self.std**2 - (1.0 - tau)) / var

    def __call__(self, s, x, tau):
        x = np.asarray(x, dtype=np.float64)
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), x.shape[:-1])
        return self.mean + self.slope(tau) * (x - tau[..., None] * self.mean)

    def vjp_x(self, s, x, tau, cotangent):
        x = np.asarray(x, dtype=np.float64)
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), x.shape[:-1])
        return np.asarray(cotangent) * self.slope(tau)


@dataclass(frozen=True)
class DenoisingTrajectory:
    """A batch of sampled denoising paths.

    ``points[b, k]`` is ``X_{tau_k}`` of path ``b`` and ``noises[b, k]`` the
    standard normal draw used on the step from ``tau_k`` to ``tau_{k+1}``.
    """

    states: np.ndarray = field(repr=False)
    points: np.ndarray = field(repr=False)
    noises: np.ndarray = field(repr=False)
    schedule: FlowSchedule
    lambda_used: float = 1.0

    def __post_init__(self):
        K = self.schedule.num_steps
        if self.points.shape[1] != K + 1 or self.noises.shape[1] != K:
            raise ShapeError(f"trajectory arrays do not match a {K}-step schedule")

    @property
    def batch_size(self) -> int:
        return self.points.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.points[:, -1]


def _check_finite(x, step, what="trajectory"):
    if not np.all(np.isfinite(x)):
        raise NumericalDivergenceError(f"{what} became non-finite at step {step}", step=step)


def sample_ode(v: Callable, states, x0, schedule: FlowSchedule) -> np.ndarray:
    """Deterministic Euler integration of ``dX = v dtau`` from ``x0`` to ``tau = 1``."""
    x = np.array(x0, dtype=np.float64)
    h = schedule.h
    for k, tau in enumerate(schedule.taus[:-1]):
        x = x + h * v(states, x, tau)
        _check_finite(x, k)
    return x


def sample_memoryless_sde(
    v_ft: Callable,
    states,
    schedule: FlowSchedule,
    rng: np.random.Generator | None = None,
    *,
    action_dim: int | None = None,
    x0=None,
    noises=None,
    lambda_used: float = 1.0,
) -> DenoisingTrajectory:
    """Memoryless Euler-Maruyama sampler with diffusion ``g(tau)``.

    ``lambda_used`` is recorded but never enters the dynamics. Pass ``x0`` and
    ``noises`` to replay a recorded path.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    B, K = states.shape[0], schedule.num_steps
    if x0 is None:
        if action_dim is None:
            action_dim = v_ft.action_dim
        x0 = rng.standard_normal((B, action_dim))
    x0 = np.asarray(x0, dtype=np.float64)
    if noises is None:
        noises = rng.standard_normal((B, K, x0.shape[-1]))
    noises = np.asarray(noises, dtype=np.float64)
    h, sqrt_h = schedule.h, np.sqrt(schedule.h)
    points = np.empty((B, K + 1, x0.shape[-1]))
    points[:, 0] = x = x0
    for k, tau in enumerate(schedule.eval_taus):
        drift = 2.0 * v_ft(states, x, tau) - x / tau
        x = x + h * drift + sqrt_h * schedule_g(tau) * noises[:, k]
        _check_finite(x, k)
        points[:, k + 1] = x
    return DenoisingTrajectory(states, points, noises, schedule, float(lambda_used))


# ---------------------------------------------------------------------------
# flow-matching loss and behavior cloning


def fm_draws(states, actions, rng: np.random.Generator):
    """Sample ``(x_tau, tau, target)`` for the OT flow-matching regression."""
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    x0 = rng.standard_normal(actions.shape)
    tau = rng.uniform(0.0, 1.0, size=actions.shape[0])
    x_tau = (1.0 - tau[:, None]) * x0 + tau[:, None] * actions
    return x_tau, tau, actions - x0


def fm_loss(v, states, actions, rng: np.random.Generator) -> float:
    """Mean over the batch of ``||v(s, X_tau, tau) - (a - X_0)||^2``."""
    if len(actions) == 0:
        raise DomainError("empty batch")
    x_tau, tau, target = fm_draws(states, actions, rng)
    if isinstance(v, nx.ParamVector):
        pred = nx.mlp_forward(v, VelocityField.inputs(states, x_tau, tau))
    else:
        pred = v(np.atleast_2d(states), x_tau, tau)
    return float(np.mean(np.sum((pred - target) ** 2, axis=-1)))


def fm_loss_and_grad(params: nx.ParamVector, states, actions, rng) -> tuple[float, np.ndarray]:
    x_tau, tau, target = fm_draws(states, actions, rng)
    inputs = VelocityField.inputs(np.atleast_2d(states), x_tau, tau)
    return nx.grad_params(params, lambda net: nx.mean(nx.sqnorm(net(inputs) - target, axis=1)))


@dataclass(frozen=True)
class BCConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 3e-4
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "gelu"
    seed: int = 0
    log_every: int = 100


def pretrain_bc(dataset, config: BCConfig = BCConfig(), sink: Callable | None = None, init=None) -> nx.ParamVector:
    """Fit the base velocity field to the buffer's ``(s, a)`` pairs with Adam."""
    if len(dataset) == 0:
        raise DomainError("behavior cloning needs a non-empty dataset")
    if init is None:
        sizes = [dataset.state_dim + dataset.action_dim + 1, *config.hidden, dataset.action_dim]
        init = nx.mlp_init(sizes, config.activation, config.seed)
    rng = np.random.default_rng(config.seed)
    params, opt = init, nx.adam_init(init, lr=config.lr)
    for step in range(config.steps):
        batch = dataset.sample(config.batch_size, rng)
        loss, grad = fm_loss_and_grad(params, batch.s, batch.a, rng)
        opt, params = nx.adam_step(opt, params, grad)
        if sink is not None and (step % config.log_every == 0 or step == config.steps - 1):
            sink({"step": step, "bc_loss": loss})
    return params
