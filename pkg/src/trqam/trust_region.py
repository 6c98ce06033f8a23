"""Path-KL estimate, EMA smoothing and projected dual descent on lambda."""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from .adjoint import LAMBDA_MIN, _base_values, _flat_inputs
from .errors import ConfigError, DomainError
from .flow import DenoisingTrajectory, FlowSchedule, schedule_g


@dataclass(frozen=True)
class TrustRegionState:
    lam: float = 1.0
    kl_ema: float = 0.0
    eps_kl: float = 0.5
    eta: float = 0.1
    rho_ema: float = 0.01
    lam_min: float = LAMBDA_MIN

    def __post_init__(self):
        # a zero floor is only meaningful for the penalty-weight variant
        if self.lam_min < 0:
            raise DomainError("lam_min must be non-negative")
        if self.lam < self.lam_min:
            raise DomainError(f"lambda={self.lam} is below lam_min={self.lam_min}")
        if self.kl_ema < 0:
            raise DomainError("kl_ema must be non-negative")
        if self.eps_kl <= 0 or self.eta <= 0:
            raise DomainError("eps_kl and eta must be positive")
        if not 0.0 < self.rho_ema <= 1.0:
            raise DomainError("rho_ema must lie in (0, 1]")


def step_kl_weights(schedule: FlowSchedule) -> np.ndarray:
    """``2h / g(tau_k)^2`` on the clamped grid."""
    return 2.0 * schedule.h / schedule_g(schedule.eval_taus) ** 2


def kl_from_deltas(delta: np.ndarray, schedule: FlowSchedule) -> float:
    """Estimator value from velocity differences of shape ``(B, K, da)``."""
    if delta.shape[0] == 0:
        raise DomainError("empty batch")
    per_step = np.sum(delta**2, axis=-1)
    return float(np.sum(per_step * step_kl_weights(schedule)[None, :]) / delta.shape[0])


def path_kl_estimate(v_ft, v_base, traj: DenoisingTrajectory) -> float:
    """``(1/B) sum_b sum_k (2h / g_k^2) ||v_ft - v_base||^2`` at the recorded points."""
    if traj.batch_size == 0:
        raise DomainError("empty batch")
    B, K = traj.batch_size, traj.schedule.num_steps
    inp = _flat_inputs(traj)
    if isinstance(v_ft, nx.ParamVector):
        ft = nx.mlp_forward(v_ft, inp).reshape(B, K, -1)
    else:
        sd = traj.states.shape[-1]
        ft = v_ft(inp[:, :sd], inp[:, sd:-1], inp[:, -1]).reshape(B, K, -1)
    return kl_from_deltas(ft - _base_values(v_base, traj), traj.schedule)


def kl_penalty_term(schedule: FlowSchedule, batch_size: int, weight: float):
    """Traced ``weight * D_hat`` for use as the ``extra`` hook of the adjoint loss."""
    row_w = np.tile(step_kl_weights(schedule), batch_size)[:, None] * (weight / batch_size)

    def extra(pred, base):
        return nx.vsum(nx.mul(nx.mul(pred - base, pred - base), row_w))

    return extra


def ema_update(state: TrustRegionState, kl_hat: float) -> TrustRegionState:
    if kl_hat < 0 or not np.isfinite(kl_hat):
        raise DomainError(f"KL estimate must be finite and non-negative, got {kl_hat}")
    return replace(state, kl_ema=(1.0 - state.rho_ema) * state.kl_ema + state.rho_ema * kl_hat)


def dual_update(state: TrustRegionState) -> TrustRegionState:
    """``lambda <- max(lam_min, lambda + eta (D_bar - eps))``."""
    return replace(state, lam=max(state.lam_min, state.lam + state.eta * (state.kl_ema - state.eps_kl)))


def effective_sigma(state: TrustRegionState, tau) -> float:
    if state.lam < LAMBDA_MIN:
        raise DomainError(f"lambda={state.lam} is below the floor {LAMBDA_MIN}")
    return schedule_g(tau) / np.sqrt(state.lam)


@dataclass(frozen=True)
class BudgetSchedule:
    """A KL budget that may switch once, at a step or at the online phase."""

    initial: float
    later: float | None = None
    switch_step: int | None = None
    at_online: bool = False

    def __post_init__(self):
        for v in (self.initial, self.later):
            if v is not None and not v > 0:
                raise ConfigError("eps_kl must be positive")
        if self.later is not None and self.switch_step is None and not self.at_online:
            raise ConfigError("a two-phase budget needs a switch point")

    def __call__(self, step: int, phase: str = "offline") -> float:
        if self.later is None:
            return self.initial
        if self.at_online:
            return self.later if phase == "online" else self.initial
        return self.later if step >= self.switch_step else self.initial

    @classmethod
    def parse(cls, value) -> "BudgetSchedule":
        """Accepts a number or ``"a -> b at online"`` / ``"a -> b at <step>"``."""
        if isinstance(value, BudgetSchedule):
            return value
        if isinstance(value, bool):
            raise ConfigError("eps_kl must be a number or a schedule string")
        if isinstance(value, (int, float)):
            return cls(float(value))
        m = re.fullmatch(r"\s*([^\s>-][^\s]*)\s*->\s*([^\s]+)\s+at\s+(\w+)\s*", str(value))
        if m is None:
            try:
                return cls(float(value))
            except ValueError:
                raise ConfigError(f"cannot parse eps_kl {value!r}; expected a number or 'a -> b at online|<step>'") from None
        try:
            a, b = float(m.group(1)), float(m.group(2))
        except ValueError:
            raise ConfigError(f"cannot parse eps_kl {value!r}") from None
        when = m.group(3)
        if when == "online":
            return cls(a, b, at_online=True)
        if when.isdigit():
            return cls(a, b, switch_step=int(when))
        raise ConfigError(f"eps_kl switch point must be 'online' or a step, got {when!r}")

    def describe(self):
        if self.later is None:
            return self.initial
        return f"{self.initial} -> {self.later} at {'online' if self.at_online else self.switch_step}"
