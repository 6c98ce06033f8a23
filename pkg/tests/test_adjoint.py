import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trqam import numerics as nx
from trqam.adjoint import (
    LAMBDA_MIN,
    adjoint_matching_loss,
    adjoint_matching_loss_and_grad,
    adjoint_matching_terms,
    solve_lean_adjoint,
    terminal_adjoint,
)
from trqam.critic import OracleCritic, critic_init
from trqam.errors import AdjointDivergenceError, DomainError, TrustRegionDomainError
from trqam.flow import DenoisingTrajectory, FlowSchedule, VelocityField, sample_memoryless_sde, schedule_g
from trqam.oracles import bptt_gradient_oracle


class LinearField:
    """``v(x) = A x``, independent of state and tau."""

    def __init__(self, A):
        self.A = np.asarray(A, dtype=float)

    def __call__(self, s, x, tau):
        return np.asarray(x) @ self.A.T

    def vjp_x(self, s, x, tau, cot):
        return np.asarray(cot) @ self.A


def _critic(q, dq):
    return OracleCritic(q, dq)


def _toy_traj(seed, B=4, K=10, ds=1, da=1, hidden=(8,)):
    rng = np.random.default_rng(seed)
    v = VelocityField.init(ds, da, hidden, "tanh", seed)
    s = rng.normal(size=(B, ds))
    return v, sample_memoryless_sde(v, s, FlowSchedule(K), rng)


# -- terminal adjoint


def test_terminal_constant_critic_zero():
    c = _critic(lambda s, a: np.ones(len(a)), lambda s, a: np.zeros_like(a))
    assert np.array_equal(terminal_adjoint(c, np.zeros((3, 1)), np.ones((3, 2)), 2.0), np.zeros((3, 2)))


def test_terminal_linear_critic():
    w = np.array([0.5, -2.0])
    c = _critic(lambda s, a: a @ w, lambda s, a: np.broadcast_to(w, a.shape))
    out = terminal_adjoint(c, np.zeros((2, 1)), np.zeros((2, 2)), 3.0)
    assert np.array_equal(out, np.tile(-3.0 * w, (2, 1)))


def test_terminal_quadratic_critic():
    c = _critic(lambda s, a: -0.5 * np.sum(a**2, 1), lambda s, a: -a)
    x1 = np.array([[0.3, -1.1]])
    assert np.allclose(terminal_adjoint(c, np.zeros((1, 1)), x1, 2.5), 2.5 * x1, atol=0)


def test_terminal_matches_ensemble_gradient():
    ens = critic_init(2, 1, (8,), 3, "gelu", seed=4)
    s, a = np.ones((5, 2)), np.linspace(-1, 1, 5)[:, None]
    assert np.array_equal(terminal_adjoint(ens, s, a, 1.5), -1.5 * ens.action_grad(s, a))


def test_terminal_beta_must_be_positive():
    c = _critic(lambda s, a: a[:, 0], lambda s, a: np.ones_like(a))
    with pytest.raises(DomainError):
        terminal_adjoint(c, np.zeros((1, 1)), np.zeros((1, 1)), 0.0)


# -- lean adjoint


def test_lean_zero_terminal_all_zero():
    v, traj = _toy_traj(0)
    adj = solve_lean_adjoint(v, traj, np.zeros((4, 1)))
    assert np.array_equal(adj.adjoints, np.zeros((4, 11, 1)))


def test_lean_frozen_drift_constant():
    class Cancel:
        def __call__(self, s, x, tau):
            return x / (2 * tau)

        def vjp_x(self, s, x, tau, cot):
            return cot / (2 * tau)

    _, traj = _toy_traj(1)
    a1 = np.array([[0.5], [-1.0], [2.0], [0.0]])
    adj = solve_lean_adjoint(Cancel(), traj, a1)
    assert np.allclose(adj.adjoints, a1[:, None, :], rtol=1e-15, atol=1e-15)


def test_lean_linear_field_matrix_product():
    A = np.array([[0.3, -0.2], [0.1, 0.6]])
    sched = FlowSchedule(10)
    rng = np.random.default_rng(2)
    traj = sample_memoryless_sde(LinearField(A), np.zeros((3, 1)), sched, rng, action_dim=2)
    a1 = rng.normal(size=(3, 2))
    adj = solve_lean_adjoint(LinearField(A), traj, a1)
    ref = a1.copy()
    for k in range(9, -1, -1):
        M = np.eye(2) + sched.h * (2 * A - np.eye(2) / sched.eval_taus[k])
        ref = ref @ M  # row vectors: a_k^T = a_{k+1}^T M
        assert np.allclose(adj.adjoints[:, k], ref, rtol=1e-13, atol=1e-15)
    assert np.array_equal(adj.terminal, a1)


@settings(max_examples=30, deadline=None)
@given(st.floats(-100, 100, allow_nan=False).filter(lambda c: c != 0), st.integers(0, 50))
def test_lean_linear_in_terminal(c, seed):
    v, traj = _toy_traj(seed % 5)
    t = np.random.default_rng(seed).normal(size=(4, 1))
    a = solve_lean_adjoint(v, traj, t).adjoints
    b = solve_lean_adjoint(v, traj, c * t).adjoints
    assert np.allclose(b, c * a, rtol=1e-12, atol=1e-300)


def test_lean_divergence_reports_step():
    class Blowup:
        def __call__(self, s, x, tau):
            return np.zeros_like(x)

        def vjp_x(self, s, x, tau, cot):
            return cot * (np.inf if tau < 0.5 else 1.0)

    _, traj = _toy_traj(3)
    with pytest.raises(AdjointDivergenceError) as info:
        solve_lean_adjoint(Blowup(), traj, np.ones((4, 1)))
    assert info.value.step == 4


# -- adjoint-matching loss


def _one_step_traj(delta_a=1):
    sched = FlowSchedule(1)
    pts = np.zeros((1, 2, delta_a))
    return DenoisingTrajectory(np.zeros((1, 1)), pts, np.zeros((1, 1, delta_a)), sched, 1.0)


def test_loss_zero_at_base_with_zero_adjoint():
    v, traj = _toy_traj(4)
    adj = solve_lean_adjoint(v, traj, np.zeros((4, 1)))
    assert adjoint_matching_loss(v.params, v, traj, adj, 0.3) == 0.0


def test_loss_stationary_point():
    traj = _one_step_traj()
    tau = traj.schedule.eval_taus[0]
    lam = schedule_g(tau) ** 2  # makes sigma_n = 1
    base = lambda s, x, t: np.zeros_like(x)  # noqa: E731
    ft = lambda s, x, t: np.full_like(x, 0.5)  # noqa: E731
    adj = solve_lean_adjoint(LinearField([[0.0]]), traj, np.array([[-1.0]]))
    assert adjoint_matching_loss(ft, base, traj, adj, lam) == pytest.approx(0.0, abs=1e-28)


def test_loss_lambda_below_floor():
    v, traj = _toy_traj(5)
    adj = solve_lean_adjoint(v, traj, np.ones((4, 1)))
    with pytest.raises(TrustRegionDomainError):
        adjoint_matching_loss(v.params, v, traj, adj, LAMBDA_MIN / 2)


@pytest.mark.parametrize("lam", [0.01, 0.25, 1.0, 4.0])
def test_loss_minimizer_closed_form(lam):
    # one-parameter field v_ft = v_base + theta; the quadratic minimizer is analytic
    from scipy.optimize import brentq

    sched = FlowSchedule(10)
    rng = np.random.default_rng(6)
    traj = sample_memoryless_sde(LinearField([[0.2]]), np.zeros((8, 1)), sched, rng, action_dim=1)
    adj = solve_lean_adjoint(LinearField([[0.2]]), traj, rng.normal(size=(8, 1)))
    base = LinearField([[0.2]])
    sig2 = schedule_g(sched.eval_taus) ** 2 / lam
    A = adj.matched[:, :, 0]
    # sum_bk (2 theta / sigma_k + sigma_k a_bk)^2 is minimized at theta* = -sum_bk a_bk / (2 B sum_k 1/sigma_k^2)
    theta_star = -A.sum() / (2 * A.shape[0] * np.sum(1 / sig2))

    def loss(theta):
        ft = lambda s, x, t: base(s, x, t) + theta  # noqa: E731
        return adjoint_matching_loss(ft, base, traj, adj, lam)

    # central differences are exact for a quadratic, so the root of the slope is the numeric minimizer
    def slope(theta, d=1e-2):
        return (loss(theta + d) - loss(theta - d)) / (2 * d)

    numeric = brentq(slope, theta_star - 10, theta_star + 10, xtol=1e-14, rtol=1e-15)
    assert numeric == pytest.approx(theta_star, abs=1e-8 * max(1.0, abs(theta_star)))


def test_per_step_minimizer_scales_with_lambda():
    # the per-step unconstrained minimizer is -sigma^2 a / 2, so quadrupling lambda quarters it
    traj = _one_step_traj()
    adj = solve_lean_adjoint(LinearField([[0.0]]), traj, np.array([[0.8]]))
    tau = traj.schedule.eval_taus[0]
    for lam in (0.5, 2.0):
        dv = -(schedule_g(tau) ** 2 / lam) * 0.8 / 2
        ft = lambda s, x, t, dv=dv: np.full_like(x, dv)  # noqa: E731
        zero = lambda s, x, t: np.zeros_like(x)  # noqa: E731
        assert adjoint_matching_loss(ft, zero, traj, adj, lam) == pytest.approx(0.0, abs=1e-24)


def test_loss_weights_scale_with_lambda():
    v, traj = _toy_traj(7)
    adj = solve_lean_adjoint(v, traj, np.ones((4, 1)))
    w1, t1 = adjoint_matching_terms(traj, adj, 1.0)
    for c in (0.25, 3.0):
        wc, tc = adjoint_matching_terms(traj, adj, c)
        assert np.allclose(wc**2, c * w1**2, rtol=1e-14)  # 4 / sigma^2 scales by c
        assert np.allclose(tc**2, t1**2 / c, rtol=1e-14)  # sigma^2 scales by 1/c


def test_loss_and_grad_value_matches_loss():
    v, traj = _toy_traj(8)
    adj = solve_lean_adjoint(v, traj, np.random.default_rng(0).normal(size=(4, 1)))
    ft = v.params.with_values(v.params.values + 0.01)
    value, _, delta = adjoint_matching_loss_and_grad(ft, v, traj, adj, 0.7)
    assert value == pytest.approx(adjoint_matching_loss(ft, v, traj, adj, 0.7), rel=1e-13)
    assert delta.shape == (4, 10, 1)


def test_loss_gradient_finite_differences():
    v, traj = _toy_traj(9, hidden=(6,))
    adj = solve_lean_adjoint(v, traj, np.random.default_rng(1).normal(size=(4, 1)))
    ft = v.params.with_values(v.params.values + np.random.default_rng(2).normal(scale=0.05, size=v.params.values.size))
    _, grad, _ = adjoint_matching_loss_and_grad(ft, v, traj, adj, 0.5)
    eps = 1e-6
    num = np.empty_like(grad)
    for i in range(grad.size):
        e = np.zeros_like(grad)
        e[i] = eps
        num[i] = (adjoint_matching_loss(ft.with_values(ft.values + e), v, traj, adj, 0.5)
                  - adjoint_matching_loss(ft.with_values(ft.values - e), v, traj, adj, 0.5)) / (2 * eps)
    assert np.linalg.norm(grad - num) <= 1e-4 * np.linalg.norm(num)


def test_loss_is_stop_gradient_in_base_and_adjoint():
    # moving the base net changes the loss value but the gradient only flows through v_ft
    v, traj = _toy_traj(10)
    adj = solve_lean_adjoint(v, traj, np.ones((4, 1)))
    _, g1, _ = adjoint_matching_loss_and_grad(v.params, v, traj, adj, 1.0)
    assert g1.shape == v.params.values.shape


# -- gradient equivalence with backpropagation through the chain


@pytest.mark.parametrize("seed", range(20))
def test_gradient_equivalence_with_bptt(seed):
    rng = np.random.default_rng(100 + seed)
    ds, da = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    hidden = (int(rng.integers(4, 17)),)
    act = ("tanh", "gelu", "relu")[seed % 3]
    v = VelocityField(nx.mlp_init([ds + da + 1, *hidden, da], act, seed), ds, da)
    critic = critic_init(ds, da, (8,), 2, "tanh", seed)
    s = rng.normal(size=(6, ds))
    traj = sample_memoryless_sde(v, s, FlowSchedule(10), rng)
    beta = 1.0
    adj = solve_lean_adjoint(v, traj, terminal_adjoint(critic, s, traj.terminal, beta), beta)
    lam = float(rng.choice([0.1, 1.0, 3.0]))
    _, am, _ = adjoint_matching_loss_and_grad(v.params, v, traj, adj, lam)
    bp = bptt_gradient_oracle(v.params, critic, traj, beta)
    cos = am @ bp / (np.linalg.norm(am) * np.linalg.norm(bp))
    assert cos >= 0.999
    h = traj.schedule.h
    assert np.linalg.norm(am - (2 / h) * bp) <= 1e-3 * np.linalg.norm(am)
