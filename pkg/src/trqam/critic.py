"""Critic ensemble with target networks and the TD backup.

Each member is an MLP on ``[s, a]`` with a scalar output. The guidance value
is ``mean_i Q_i - rho_pess * std_i Q_i`` with the population standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import numerics as nx
from .envs import BANDIT_MODES, BANDIT_WIDTH
from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class CriticEnsemble:
    online: tuple[nx.ParamVector, ...]
    target: tuple[nx.ParamVector, ...]
    opt: tuple[nx.OptimizerState, ...]
    rho_pess: float = 0.5
    polyak: float = 0.005
    gamma: float = 0.99
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if len(self.online) == 0 or len(self.online) != len(self.target) or len(self.opt) != len(self.online):
            raise ShapeError("online, target and optimizer counts must match and be non-zero")
        if self.rho_pess < 0 or not 0.0 <= self.polyak <= 1.0 or not 0.0 <= self.gamma < 1.0:
            raise DomainError("need rho_pess >= 0, polyak in [0, 1], gamma in [0, 1)")

    @property
    def size(self) -> int:
        return len(self.online)

    def action_grad(self, s, a) -> np.ndarray:
        return action_grad(self, s, a)

    def value(self, s, a) -> np.ndarray:
        return ensemble_value(self, s, a)


def critic_init(state_dim, action_dim, hidden=(64, 64), n=2, activation="gelu", seed=0, lr=3e-4, **kwargs):
    sizes = [state_dim + action_dim, *hidden, 1]
    online = tuple(nx.mlp_init(sizes, activation, seed * 1000 + 17 + i) for i in range(n))
    return CriticEnsemble(online, online, tuple(nx.adam_init(p, lr=lr) for p in online), **kwargs)


def _inputs(s, a):
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if s.shape[0] != a.shape[0]:
        raise ShapeError(f"state batch {s.shape[0]} and action batch {a.shape[0]} differ")
    return np.concatenate([s, a], axis=-1)


def member_values(ens: CriticEnsemble, s, a, which="online") -> np.ndarray:
    """Array of shape ``(K_ens, B)``."""
    nets = ens.online if which == "online" else ens.target
    x = _inputs(s, a)
    return np.stack([nx.mlp_forward(p, x)[:, 0] for p in nets])


def aggregate(q: np.ndarray, rho_pess: float) -> np.ndarray:
    return q.mean(axis=0) - rho_pess * q.std(axis=0)


def ensemble_value(ens: CriticEnsemble, s, a, which="online") -> np.ndarray:
    if which not in ("online", "target"):
        raise DomainError(f"which must be 'online' or 'target', got {which!r}")
    return aggregate(member_values(ens, s, a, which), ens.rho_pess)


def aggregate_weights(q: np.ndarray, rho_pess: float) -> np.ndarray:
    """``dV/dQ_i`` for the pessimistic aggregate; zero std contributes nothing."""
    n = q.shape[0]
    std = q.std(axis=0)
    centred = q - q.mean(axis=0)
    safe = np.where(std > 0, std, 1.0)
    return 1.0 / n - rho_pess * np.where(std > 0, centred / (n * safe), 0.0)


def action_grad(ens: CriticEnsemble, s, a) -> np.ndarray:
    """``grad_a`` of the online guidance value, row-wise."""
    x = _inputs(s, a)
    da = x.shape[1] - np.atleast_2d(s).shape[1]
    q = member_values(ens, s, a)
    weights = aggregate_weights(q, ens.rho_pess)
    total = np.zeros((x.shape[0], da))
    for p, w in zip(ens.online, weights):
        total += nx.vjp_input(p, x, w[:, None])[:, -da:]
    return total


def td_targets(ens: CriticEnsemble, batch, policy_sampler: Callable, gamma: float | None = None) -> np.ndarray:
    """``r + (1 - done) * gamma * V_target(s', a')`` with one ``a'`` per transition."""
    if len(batch.r) == 0:
        raise DomainError("empty batch")
    gamma = ens.gamma if gamma is None else gamma
    a2 = policy_sampler(batch.s2)
    v2 = ensemble_value(ens, batch.s2, a2, "target")
    return batch.r + (1.0 - batch.done.astype(np.float64)) * gamma * v2


def critic_update(ens: CriticEnsemble, batch, targets) -> tuple[CriticEnsemble, float]:
    """One clipped Adam step per member on the mean squared TD error."""
    x = _inputs(batch.s, batch.a)
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    online, opts, losses = [], [], []
    for p, opt in zip(ens.online, ens.opt):
        loss, grad = nx.grad_params(p, lambda net: nx.mean(nx.sqnorm(net(x) - y, axis=1)))
        grad = nx.clip_global_norm(grad, ens.max_grad_norm)
        opt, p = nx.adam_step(opt, p, grad)
        online.append(p)
        opts.append(opt)
        losses.append(loss)
    return replace(ens, online=tuple(online), opt=tuple(opts)), float(np.mean(losses))


def polyak_update(ens: CriticEnsemble) -> CriticEnsemble:
    rate = ens.polyak
    target = tuple(t.with_values((1.0 - rate) * t.values + rate * o.values) for t, o in zip(ens.target, ens.online))
    return replace(ens, target=target)


class OracleCritic:
    """A fixed, known critic exposing the same interface as the ensemble.

    ``q(s, a)`` returns values of shape ``(B,)``; ``dq(s, a)`` the action gradient.
    """

    def __init__(self, q: Callable, dq: Callable):
        self.q, self.dq = q, dq

    def value(self, s, a):
        return np.asarray(self.q(np.atleast_2d(s), np.atleast_2d(a)), dtype=np.float64)

    def action_grad(self, s, a):
        return np.asarray(self.dq(np.atleast_2d(s), np.atleast_2d(a)), dtype=np.float64)


def bandit_oracle_critic(error_amp: float = 0.0, freq: float = 25.0, phase: float = 0.0) -> OracleCritic:
    """Exact bandit Q plus an injected error ``error_amp * sin(freq * a + phase)``."""
    def q(s, a):
        x = a[:, 0]
        return sum(h * np.exp(-((x - c) ** 2) / BANDIT_WIDTH) for c, h in BANDIT_MODES) + error_amp * np.sin(freq * x + phase)

    def dq(s, a):
        x = a[:, 0]
        g = sum(-2.0 * (x - c) / BANDIT_WIDTH * h * np.exp(-((x - c) ** 2) / BANDIT_WIDTH) for c, h in BANDIT_MODES)
        return (g + error_amp * freq * np.cos(freq * x + phase))[:, None]

    return OracleCritic(q, dq)
