"""Lean adjoint and the adjoint-matching regression.

The backward recursion is the exact discrete adjoint of the Euler sampler
under the frozen base drift ``b(x, tau) = 2 v_base(s, x, tau) - x / tau``::

    a_K = -beta * grad_a Q(s, X_K)
    a_k = a_{k+1} + h * J_b(X_k, tau_k)^T a_{k+1}

so ``a_k`` is the sensitivity of the terminal reward to ``X_k``. The loss term
for step ``k`` regresses the control applied on ``[tau_k, tau_{k+1}]`` onto the
adjoint at the end of that step, ``a_{k+1}``. With this pairing the gradient of
the loss at ``v_ft = v_base`` equals ``2 / h`` times the gradient obtained by
backpropagating ``-beta Q(s, X_K)`` through the whole sampling chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import AdjointDivergenceError, DomainError, ShapeError, TrustRegionDomainError
from .flow import DenoisingTrajectory, VelocityField, schedule_g

LAMBDA_MIN = 1e-3


@dataclass(frozen=True)
class AdjointPath:
    """Adjoints ``a_0..a_K`` per path, shape ``(B, K + 1, da)``."""

    adjoints: np.ndarray = field(repr=False)
    beta: float
    trajectory: DenoisingTrajectory = field(repr=False)

    @property
    def terminal(self) -> np.ndarray:
        return self.adjoints[:, -1]

    @property
    def matched(self) -> np.ndarray:
        """Adjoint paired with loss step ``k``: ``a_{k+1}``, shape ``(B, K, da)``."""
        return self.adjoints[:, 1:]


def terminal_adjoint(critic, s, x1, beta: float) -> np.ndarray:
    """``-beta * grad_a Q(s, x1)`` using the critic's guidance value."""
    if beta <= 0:
        raise DomainError("beta must be positive")
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    grad = np.asarray(critic.action_grad(np.atleast_2d(s), x1), dtype=np.float64)
    if grad.shape != x1.shape:
        raise ShapeError(f"critic action gradient has shape {grad.shape}, expected {x1.shape}")
    return -beta * grad


def solve_lean_adjoint(v_base, traj: DenoisingTrajectory, a_terminal, beta: float = 1.0) -> AdjointPath:
    """Integrate the lean adjoint backward along ``traj`` through the frozen base drift."""
    a = np.array(np.broadcast_to(a_terminal, traj.terminal.shape), dtype=np.float64)
    if a.shape != traj.terminal.shape:
        raise ShapeError("terminal adjoint must have the action dimension")
    sched = traj.schedule
    h, K = sched.h, sched.num_steps
    out = np.empty_like(traj.points)
    out[:, K] = a
    for k in range(K - 1, -1, -1):
        tau = sched.eval_taus[k]
        a = a + h * (2.0 * v_base.vjp_x(traj.states, traj.points[:, k], tau, a) - a / tau)
        if not np.all(np.isfinite(a)):
            raise AdjointDivergenceError(f"lean adjoint became non-finite at step {k}", step=k)
        out[:, k] = a
    return AdjointPath(out, float(beta), traj)


def _sigma(schedule, lam):
    if lam < LAMBDA_MIN:
        raise TrustRegionDomainError(f"lambda={lam} is below the floor {LAMBDA_MIN}")
    return schedule_g(schedule.eval_taus) / np.sqrt(lam)


def _flat_inputs(traj: DenoisingTrajectory):
    """Network inputs for every (path, step) pair, row-major in the path index."""
    B, K = traj.batch_size, traj.schedule.num_steps
    taus = np.broadcast_to(traj.schedule.eval_taus, (B, K))
    states = np.repeat(traj.states, K, axis=0)
    x = traj.points[:, :K].reshape(B * K, -1)
    return VelocityField.inputs(states, x, taus.reshape(-1))


def _base_values(v_base, traj):
    B, K = traj.batch_size, traj.schedule.num_steps
    sd = traj.states.shape[-1]
    inp = _flat_inputs(traj)
    return v_base(inp[:, :sd], inp[:, sd:-1], inp[:, -1]).reshape(B, K, -1)


def adjoint_matching_terms(traj: DenoisingTrajectory, adj: AdjointPath, lam: float):
    """Per-step weights ``2 / sigma`` and the matched adjoints ``sigma * a_{k+1}``."""
    sigma = _sigma(traj.schedule, lam)
    return 2.0 / sigma, sigma[None, :, None] * adj.matched


def adjoint_matching_loss(v_ft, v_base, traj: DenoisingTrajectory, adj: AdjointPath, lam: float) -> float:
    """Batch mean of ``sum_k ||(2/sigma_k)(v_ft - v_base) + sigma_k a_{k+1}||^2``."""
    w, target = adjoint_matching_terms(traj, adj, lam)
    B, K = traj.batch_size, traj.schedule.num_steps
    inp = _flat_inputs(traj)
    if isinstance(v_ft, nx.ParamVector):
        ft = nx.mlp_forward(v_ft, inp).reshape(B, K, -1)
    else:
        sd = traj.states.shape[-1]
        ft = v_ft(inp[:, :sd], inp[:, sd:-1], inp[:, -1]).reshape(B, K, -1)
    resid = w[None, :, None] * (ft - _base_values(v_base, traj)) + target
    return float(np.sum(resid**2) / B)


def adjoint_matching_loss_and_grad(
    v_ft_params: nx.ParamVector, v_base, traj: DenoisingTrajectory, adj: AdjointPath, lam: float, *, extra=None
):
    """Loss, parameter gradient and the detached ``v_ft - v_base``, shape ``(B, K, da)``.

    ``extra(pred, base)`` may add further traced terms to the scalar loss; it
    receives the traced flat prediction and the constant base outputs.
    """
    w, target = adjoint_matching_terms(traj, adj, lam)
    B, K = traj.batch_size, traj.schedule.num_steps
    inp = _flat_inputs(traj)
    base = _base_values(v_base, traj).reshape(B * K, -1)
    row_w = np.repeat(w[None, :], B, axis=0).reshape(-1, 1)
    offset = target.reshape(B * K, -1) - row_w * base
    captured = {}

    def loss_fn(net):
        pred = net(inp)
        captured["pred"] = pred.value
        loss = nx.vsum(nx.sqnorm(nx.mul(pred, row_w) + offset)) / B
        if extra is not None:
            loss = loss + extra(pred, base)
        return loss

    value, grad = nx.grad_params(v_ft_params, loss_fn)
    return value, grad, (captured["pred"] - base).reshape(B, K, -1)
