"""The fine-tuning loop: TRQAM and the fixed-lambda and external-penalty baselines.

One iteration runs, in order: the critic TD update, sampling with the
memoryless SDE, the terminal and lean adjoints, one clipped Adam step on the
adjoint-matching loss, the KL estimate (on the same paths, before the policy
step), the EMA and dual updates, and the target-network update.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import numerics as nx
from .adjoint import adjoint_matching_loss_and_grad, solve_lean_adjoint, terminal_adjoint
from .config import RunConfig
from .critic import (
    CriticEnsemble,
    bandit_oracle_critic,
    critic_init,
    critic_update,
    polyak_update,
    td_targets,
)
from .envs import ReplayBuffer
from .errors import DomainError, NumericalDivergenceError
from .flow import FlowSchedule, VelocityField, sample_memoryless_sde, sample_ode
from .trust_region import (
    TrustRegionState,
    dual_update,
    ema_update,
    kl_from_deltas,
    kl_penalty_term,
)

log = logging.getLogger("trqam")


@dataclass
class TrainerState:
    config: RunConfig
    v_base: VelocityField
    v_ft: VelocityField
    policy_opt: nx.OptimizerState
    critic: object
    trust: TrustRegionState
    buffer: ReplayBuffer
    rng: np.random.Generator
    step: int = 0
    phase: str = "offline"
    env_state: np.ndarray | None = None
    env_t: int = 0

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def schedule(self) -> FlowSchedule:
        return FlowSchedule(self.config.flow_steps)


def init_trainer(config: RunConfig, base_params: nx.ParamVector, buffer: ReplayBuffer) -> TrainerState:
    """Start from ``v_ft = v_base`` with a fresh critic and dual state."""
    ds, da = buffer.state_dim, buffer.action_dim
    v_base = VelocityField(base_params, ds, da)
    if config.critic_mode == "oracle":
        if config.env != "bandit":
            raise DomainError("the oracle critic is only available on the bandit")
        critic = bandit_oracle_critic(config.critic_error, config.critic_error_freq)
    else:
        critic = critic_init(
            ds, da, config.critic_hidden, config.ensemble_size, config.activation, config.seed, config.lr,
            rho_pess=config.rho_pess, polyak=config.polyak, gamma=config.gamma, max_grad_norm=config.max_grad_norm,
        )
    lam_min = 0.0 if config.variant == "external_kl" else config.lambda_min
    trust = TrustRegionState(
        lam=config.lambda_0, kl_ema=0.0, eps_kl=config.eps_kl(0, "offline"), eta=config.eta_lambda,
        rho_ema=config.rho_ema, lam_min=lam_min,
    )
    return TrainerState(
        config=config,
        v_base=v_base,
        v_ft=VelocityField(base_params, ds, da),
        policy_opt=nx.adam_init(base_params, lr=config.lr),
        critic=critic,
        trust=trust,
        buffer=buffer,
        rng=np.random.default_rng([config.seed, 1]),
    )


def _policy_iteration(state: TrainerState, batch, sink: Callable | None) -> TrainerState:
    cfg, rng, sched = state.config, state.rng, state.schedule
    critic, trust = state.critic, replace(state.trust, eps_kl=cfg.eps_kl(state.step, state.phase))
    record = {"step": state.step, "variant": cfg.variant}

    critic_loss = None
    if isinstance(critic, CriticEnsemble):
        def sampler(s2):
            return sample_memoryless_sde(state.v_ft, s2, sched, rng).terminal
        targets = td_targets(critic, batch, sampler)
        critic, critic_loss = critic_update(critic, batch, targets)

    v_ft, opt = state.v_ft, state.policy_opt
    adj_loss = kl_hat = mean_q = gnorm = None
    try:
        traj = sample_memoryless_sde(v_ft, batch.s, sched, rng, lambda_used=trust.lam)
        a_term = terminal_adjoint(critic, batch.s, traj.terminal, cfg.beta)
        mean_q = float(np.mean(critic.value(batch.s, traj.terminal)))
        adj = solve_lean_adjoint(state.v_base, traj, a_term, cfg.beta)
    except NumericalDivergenceError as exc:
        if cfg.on_divergence == "halt":
            raise
        log.warning("step %d: %s", state.step, exc)
        record["diverged"] = True
    else:
        if cfg.variant == "trqam":
            value, grad, delta = adjoint_matching_loss_and_grad(v_ft.params, state.v_base, traj, adj, trust.lam)
        elif cfg.variant == "qam_fixed":
            value, grad, delta = adjoint_matching_loss_and_grad(v_ft.params, state.v_base, traj, adj, 1.0)
        else:
            extra = kl_penalty_term(sched, traj.batch_size, trust.lam)
            value, grad, delta = adjoint_matching_loss_and_grad(v_ft.params, state.v_base, traj, adj, 1.0, extra=extra)
        kl_hat = kl_from_deltas(delta, sched)
        adj_loss = value - trust.lam * kl_hat if cfg.variant == "external_kl" else value
        gnorm = nx.global_norm(grad)
        grad = nx.clip_global_norm(grad, cfg.max_grad_norm)
        opt, params = nx.adam_step(opt, v_ft.params, grad)
        v_ft = v_ft.with_params(params)
        trust = ema_update(trust, kl_hat)
        if cfg.variant != "qam_fixed" and not cfg.freeze_lambda:
            trust = dual_update(trust)

    if isinstance(critic, CriticEnsemble):
        critic = polyak_update(critic)

    if sink is not None:
        record.update(
            {
                "lambda": trust.lam,
                "kl_hat": kl_hat,
                "kl_ema": trust.kl_ema,
                "eps_kl": trust.eps_kl,
                "adj_loss": adj_loss,
                "critic_loss": critic_loss,
                "mean_q": mean_q,
                "grad_norm_pre_clip": gnorm,
            }
        )
        sink(record)
    return replace(state, v_ft=v_ft, policy_opt=opt, critic=critic, trust=trust, step=state.step + 1)


def trqam_step(state: TrainerState, batch, sink: Callable | None = None) -> TrainerState:
    if state.variant != "trqam":
        raise DomainError(f"trqam_step called on a {state.variant} trainer")
    return _policy_iteration(state, batch, sink)


def qam_fixed_step(state: TrainerState, batch, beta: float | None = None, sink: Callable | None = None) -> TrainerState:
    """Adjoint matching with ``lambda = 1``; ``beta`` overrides the configured terminal scale."""
    if state.variant != "qam_fixed":
        raise DomainError(f"qam_fixed_step called on a {state.variant} trainer")
    if beta is not None and beta != state.config.beta:
        state = replace(state, config=replace(state.config, beta=float(beta)))
    return _policy_iteration(state, batch, sink)


def external_kl_step(state: TrainerState, batch, sink: Callable | None = None) -> TrainerState:
    if state.variant != "external_kl":
        raise DomainError(f"external_kl_step called on a {state.variant} trainer")
    return _policy_iteration(state, batch, sink)


def train_step(state: TrainerState, batch, sink: Callable | None = None) -> TrainerState:
    return _policy_iteration(state, batch, sink)


def _online_env_step(state: TrainerState, env) -> TrainerState:
    horizon = state.config.horizon or env.spec.horizon
    s = env.reset(state.rng) if state.env_state is None else state.env_state
    a = sample_memoryless_sde(state.v_ft, s, state.schedule, state.rng).terminal
    s2, r, done, _ = env.step(s, a)
    state.buffer.push_many(s, a, r, s2, done)
    t = state.env_t + 1
    if done[0] or t >= horizon:
        return replace(state, env_state=None, env_t=0)
    return replace(state, env_state=s2, env_t=t)


def run_phase(state: TrainerState, phase: str, steps: int, env=None, sink=None, eval_sink=None) -> TrainerState:
    """Run ``steps`` iterations; the online phase adds one environment transition per iteration."""
    if phase not in ("offline", "online"):
        raise DomainError(f"unknown phase {phase!r}")
    if phase == "offline" and len(state.buffer) == 0:
        raise DomainError("the offline phase needs a populated buffer")
    if phase == "online" and env is None:
        raise DomainError("the online phase needs an environment")
    state = replace(state, phase=phase)
    cfg = state.config
    for _ in range(steps):
        if phase == "online":
            state = _online_env_step(state, env)
        batch = state.buffer.sample(cfg.batch_size, state.rng)
        state = _policy_iteration(state, batch, sink)
        if env is not None and eval_sink is not None and cfg.eval_interval and state.step % cfg.eval_interval == 0:
            eval_sink(evaluation_record(state, env))
    return state


def evaluation_record(state: TrainerState, env) -> dict:
    cfg = state.config
    rng = np.random.default_rng([cfg.seed, 2, state.step])
    ret, succ = evaluate_policy(state.v_ft, env, cfg.eval_episodes, rng, state.schedule, cfg.eval_mode, cfg.horizon)
    return {"step": state.step, "mean_return": ret, "success_rate": succ, "episodes": cfg.eval_episodes}


def policy_actions(v_ft, states, rng, schedule: FlowSchedule, mode: str = "sde") -> np.ndarray:
    if mode == "ode":
        x0 = rng.standard_normal((states.shape[0], v_ft.action_dim))
        return sample_ode(v_ft, states, x0, schedule)
    return sample_memoryless_sde(v_ft, states, schedule, rng).terminal


def evaluate_policy(v_ft, env, episodes: int, rng, schedule: FlowSchedule | None = None, mode="sde", horizon=0):
    """Mean undiscounted return and success rate over ``episodes`` parallel episodes.

    ``v_ft`` is a velocity field or any ``policy(states, rng) -> actions`` callable
    with an ``is_policy`` attribute.
    """
    if episodes <= 0:
        raise DomainError("episodes must be positive")
    schedule = schedule or FlowSchedule()
    horizon = horizon or env.spec.horizon
    states = env.reset(rng, episodes)
    returns = np.zeros(episodes)
    success = np.zeros(episodes, dtype=bool)
    alive = np.ones(episodes, dtype=bool)
    for _ in range(horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        s = states[idx]
        a = v_ft(s, rng) if getattr(v_ft, "is_policy", False) else policy_actions(v_ft, s, rng, schedule, mode)
        s2, r, done, succ = env.step(s, a)
        returns[idx] += r
        success[idx] |= succ
        states[idx] = s2
        alive[idx[done]] = False
    return float(returns.mean()), float(success.mean())


class JsonlSink:
    """Appends one JSON object per line; ``None`` values are written as null."""

    def __init__(self, path, mode="w"):
        self._fh = open(path, mode)

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record, allow_nan=False) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ListSink(list):
    def __call__(self, record: dict) -> None:
        self.append(record)
