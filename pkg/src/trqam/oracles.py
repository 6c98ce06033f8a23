"""Independent reference computations used by the tests and by ``verify``.

Nothing here calls the code it is meant to check: the backprop-through-time
oracle has its own per-layer backward pass, the KL references are written in
closed form, and the Girsanov check simulates its own SDE. Only
``ParamVector`` and the forward pass are shared.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import erf

from .errors import DomainError, NumericalDivergenceError
from .numerics import ParamVector

MAX_ATOMS = 64


# ---------------------------------------------------------------------------
# discrete distributions and exponential tilting


@dataclass(frozen=True)
class DiscreteDist:
    atoms: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms)
        probs = np.asarray(self.probs, dtype=np.float64)
        if atoms.shape[0] != probs.shape[0] or probs.ndim != 1:
            raise DomainError("atoms and probs must align")
        if probs.size == 0 or probs.size > MAX_ATOMS:
            raise DomainError(f"support size must lie in 1..{MAX_ATOMS}")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise DomainError("probs must be non-negative and sum to one")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "probs", probs)


def tilt_distribution(base: DiscreteDist, q_values, beta: float) -> DiscreteDist:
    """``p(a) proportional to base(a) exp(beta Q(a))``, max-shifted before exponentiation."""
    q = np.asarray(q_values, dtype=np.float64)
    if q.shape != base.probs.shape:
        raise DomainError("q_values must align with the atoms")
    logits = beta * q
    support = base.probs > 0
    shift = logits[support].max()
    w = np.where(support, base.probs * np.exp(np.where(support, logits - shift, 0.0)), 0.0)
    p = w / w.sum()
    # the normalization tolerance is absolute, so renormalize once more in extended range
    return DiscreteDist(base.atoms, p / p.sum())


def _check_shared(p: DiscreteDist, q: DiscreteDist):
    if p.probs.shape != q.probs.shape or not np.array_equal(p.atoms, q.atoms):
        raise DomainError("distributions must share their atoms")


def kl_discrete(p: DiscreteDist, q: DiscreteDist) -> float:
    _check_shared(p, q)
    mask = p.probs > 0
    if np.any(q.probs[mask] <= 0):
        raise DomainError("KL is infinite: q vanishes where p has mass")
    return float(max(0.0, np.sum(p.probs[mask] * np.log(p.probs[mask] / q.probs[mask]))))


def tv_discrete(p: DiscreteDist, q: DiscreteDist) -> float:
    _check_shared(p, q)
    return float(0.5 * np.sum(np.abs(p.probs - q.probs)))


class BoundViolation(AssertionError):
    def __init__(self, message, details):
        super().__init__(f"{message}: {details}")
        self.details = details


@dataclass(frozen=True)
class TiltBoundsReport:
    eps: float
    beta: float
    kl: float
    kl_bound: float
    tv: float
    tv_bound: float
    ratio_min: float
    ratio_max: float

    @property
    def kl_margin(self) -> float:
        return self.kl_bound - self.kl

    @property
    def tv_margin(self) -> float:
        return self.tv_bound - self.tv

    @property
    def ratio_margin(self) -> float:
        return min(np.log(self.ratio_min) + 2 * self.beta * self.eps, 2 * self.beta * self.eps - np.log(self.ratio_max))


def check_tilt_bounds(base: DiscreteDist, q, q_tilde, beta: float, tol: float = 1e-12) -> TiltBoundsReport:
    """Compare the tilted laws under an exact and a perturbed critic against the amplification bounds."""
    q, q_tilde = np.asarray(q, dtype=np.float64), np.asarray(q_tilde, dtype=np.float64)
    eps = float(np.max(np.abs(q - q_tilde)))
    p, pt = tilt_distribution(base, q, beta), tilt_distribution(base, q_tilde, beta)
    mask = base.probs > 0
    ratio = p.probs[mask] / pt.probs[mask]
    report = TiltBoundsReport(
        eps=eps,
        beta=float(beta),
        kl=kl_discrete(p, pt),
        kl_bound=2 * beta * eps,
        tv=tv_discrete(p, pt),
        tv_bound=0.5 * np.expm1(2 * beta * eps),
        ratio_min=float(ratio.min()),
        ratio_max=float(ratio.max()),
    )
    bound = np.exp(2 * beta * eps)
    details = {"base": base.probs.tolist(), "q": q.tolist(), "q_tilde": q_tilde.tolist(), "beta": beta, "report": report}
    if report.kl > report.kl_bound + tol:
        raise BoundViolation("KL bound violated", details)
    if report.tv > report.tv_bound + tol:
        raise BoundViolation("TV bound violated", details)
    if report.ratio_max > bound * (1 + tol) or report.ratio_min < (1 - tol) / bound:
        raise BoundViolation("likelihood-ratio bound violated", details)
    return report


def tilt_bounds_sweep(n: int = 1000, seed: int = 0, max_atoms: int = 16, max_beta: float = 10.0, max_eps: float = 1.0):
    """Randomized instances; returns the count of violations and the smallest margins seen."""
    rng = np.random.default_rng(seed)
    violations, kl_m, tv_m, ratio_m = [], np.inf, np.inf, np.inf
    for i in range(n):
        m = int(rng.integers(2, max_atoms + 1))
        probs = rng.dirichlet(np.full(m, rng.uniform(0.2, 2.0)))
        base = DiscreteDist(np.arange(m), probs / probs.sum())
        q = rng.normal(0.0, 2.0, m)
        eps = rng.uniform(0.0, max_eps)
        noise = rng.uniform(-1.0, 1.0, m)
        q_tilde = q + eps * noise / max(np.max(np.abs(noise)), 1e-12)
        beta = rng.uniform(0.0, max_beta)
        try:
            r = check_tilt_bounds(base, q, q_tilde, beta)
        except BoundViolation as exc:
            violations.append({"instance": i, "details": str(exc)})
            continue
        kl_m, tv_m, ratio_m = min(kl_m, r.kl_margin), min(tv_m, r.tv_margin), min(ratio_m, r.ratio_margin)
    return {"instances": n, "violations": violations, "min_kl_margin": kl_m, "min_tv_margin": tv_m,
            "min_ratio_margin": ratio_m}


# ---------------------------------------------------------------------------
# Gaussian chains


def exact_gaussian_chain_kl(mean_deltas, variances) -> float:
    """``sum_k ||dmu_k||^2 / (2 var_k)`` for chains with shared per-step covariance ``var_k I``."""
    deltas = np.asarray(mean_deltas, dtype=np.float64)
    var = np.asarray(variances, dtype=np.float64).reshape(-1)
    if deltas.ndim == 1:
        deltas = deltas[:, None]
    if deltas.shape[0] != var.shape[0]:
        raise DomainError("one variance per step is required")
    if np.any(var <= 0):
        raise DomainError("variances must be positive")
    return float(np.sum(np.sum(deltas**2, axis=1) / (2.0 * var)))


def ot_g(tau):
    tau = np.asarray(tau, dtype=np.float64)
    return np.sqrt(2.0 * (1.0 - tau) / tau)


def clamped_grid(num_steps: int, tau_clamp: float | None = None):
    h = 1.0 / num_steps
    eps = 0.5 * h if tau_clamp is None else tau_clamp
    return h, np.maximum(np.arange(num_steps) / num_steps, eps)


def constant_shift_chain_kl(delta_v, num_steps: int) -> float:
    """Reference value for a velocity difference that is the same vector at every point."""
    h, taus = clamped_grid(num_steps)
    dv = np.atleast_1d(np.asarray(delta_v, dtype=np.float64))
    return exact_gaussian_chain_kl(np.tile(2 * h * dv, (num_steps, 1)), h * ot_g(taus) ** 2)


class AffineVelocity:
    """``v(s, x, tau) = slope(tau) * x + offset(tau)`` applied per coordinate."""

    def __init__(self, slope: Callable, offset: Callable, action_dim: int = 1):
        self.slope, self.offset, self.action_dim = slope, offset, action_dim

    def __call__(self, s, x, tau):
        x = np.asarray(x, dtype=np.float64)
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), x.shape[:-1])[..., None]
        return self.slope(tau) * x + self.offset(tau)

    def vjp_x(self, s, x, tau, cotangent):
        x = np.asarray(x, dtype=np.float64)
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), x.shape[:-1])[..., None]
        return np.asarray(cotangent) * self.slope(tau) * np.ones_like(x)


def gaussian_ot_slope(std: float):
    def slope(tau):
        return (tau * std**2 - (1 - tau)) / ((1 - tau) ** 2 + tau**2 * std**2)

    return slope


def linear_chain_moments(slopes, offsets, num_steps: int, m0: float = 0.0, p0: float = 1.0):
    """Mean and variance of the 1-D memoryless Euler chain for ``v_k(x) = slopes[k] x + offsets[k]``."""
    h, taus = clamped_grid(num_steps)
    m = np.empty(num_steps + 1)
    p = np.empty(num_steps + 1)
    m[0], p[0] = m0, p0
    for k in range(num_steps):
        a = 1.0 + h * (2.0 * slopes[k] - 1.0 / taus[k])
        m[k + 1] = a * m[k] + 2.0 * h * offsets[k]
        p[k + 1] = a * a * p[k] + h * ot_g(taus[k]) ** 2
    return m, p


def linear_chain_path_kl(slopes_ft, offsets_ft, slopes_base, offsets_base, num_steps, m0=0.0, p0=1.0) -> float:
    """Exact KL between the fine-tuned and base 1-D Euler chains (same start law, same noise)."""
    h, taus = clamped_grid(num_steps)
    m, p = linear_chain_moments(slopes_ft, offsets_ft, num_steps, m0, p0)
    total = 0.0
    for k in range(num_steps):
        da = np.asarray(slopes_ft[k]) - slopes_base[k]
        dc = np.asarray(offsets_ft[k]) - offsets_base[k]
        second = da * da * (p[k] + m[k] ** 2) + 2 * da * dc * m[k] + dc * dc
        total += (2 * h) ** 2 * second / (2 * h * ot_g(taus[k]) ** 2)
    return float(total)


def control_cost_linear(slopes_ft, offsets_ft, slopes_base, offsets_base, num_steps, lam: float, m0=0.0, p0=1.0):
    """``(1 / 2 lam) E sum_k h u_k^2`` with the control ``u = 2 (v_ft - v_base) / sigma``, ``sigma = g / sqrt(lam)``."""
    h, taus = clamped_grid(num_steps)
    m, p = linear_chain_moments(slopes_ft, offsets_ft, num_steps, m0, p0)
    total = 0.0
    for k in range(num_steps):
        sigma = ot_g(taus[k]) / np.sqrt(lam)
        da = (slopes_ft[k] - slopes_base[k]) * 2 / sigma
        dc = (offsets_ft[k] - offsets_base[k]) * 2 / sigma
        total += h * (da * da * (p[k] + m[k] ** 2) + 2 * da * dc * m[k] + dc * dc)
    return float(total / (2 * lam))


def gaussian_kl_1d(m1, v1, m0, v0) -> float:
    """``KL(N(m1, v1) || N(m0, v0))``."""
    return float(0.5 * (v1 / v0 + (m1 - m0) ** 2 / v0 - 1.0 + np.log(v0 / v1)))


@dataclass(frozen=True)
class DPIReport:
    path_kl: float
    terminal_kl: float

    @property
    def margin(self) -> float:
        return self.path_kl - self.terminal_kl


def check_dpi_terminal(path_kl: float, terminal_kl: float, tol: float = 1e-9) -> DPIReport:
    if terminal_kl > path_kl + tol:
        raise BoundViolation("terminal KL exceeds path KL", {"path_kl": path_kl, "terminal_kl": terminal_kl})
    return DPIReport(float(path_kl), float(terminal_kl))


def linear_gaussian_dpi(slopes_ft, offsets_ft, slopes_base, offsets_base, num_steps) -> DPIReport:
    m1, p1 = linear_chain_moments(slopes_ft, offsets_ft, num_steps)
    m0, p0 = linear_chain_moments(slopes_base, offsets_base, num_steps)
    terminal = gaussian_kl_1d(m1[-1], p1[-1], m0[-1], p0[-1])
    path = linear_chain_path_kl(slopes_ft, offsets_ft, slopes_base, offsets_base, num_steps)
    return check_dpi_terminal(path, terminal)


def dpi_sweep(n: int = 100, seed: int = 0, num_steps: int = 10, target_std: float = 0.7):
    """Random affine perturbations of the exact OT velocity for ``N(0, target_std^2)``."""
    rng = np.random.default_rng(seed)
    h, taus = clamped_grid(num_steps)
    base_slopes = gaussian_ot_slope(target_std)(taus)
    base_offsets = np.zeros(num_steps)
    reports, violations = [], []
    for i in range(n):
        ds = rng.normal(0.0, 0.5, num_steps) * rng.uniform(0, 1)
        dc = rng.normal(0.0, 1.0, num_steps) * rng.uniform(0, 1)
        try:
            reports.append(linear_gaussian_dpi(base_slopes + ds, base_offsets + dc, base_slopes, base_offsets, num_steps))
        except BoundViolation as exc:
            violations.append({"instance": i, "details": str(exc)})
    margin = min((r.margin for r in reports), default=np.inf)
    return {"instances": n, "violations": violations, "min_margin": margin}


# ---------------------------------------------------------------------------
# Girsanov: control cost against the likelihood ratio


class OUDrift:
    def __init__(self, theta: float = 1.0):
        self.theta = theta

    def __call__(self, x, tau):
        return -self.theta * x


class GirsanovResult(NamedTuple):
    estimate: float
    se: float


@dataclass(frozen=True)
class GirsanovComparison:
    cost: GirsanovResult
    llr: GirsanovResult
    diff_se: float
    n_steps: int

    @property
    def z_score(self) -> float:
        diff = self.cost.estimate - self.llr.estimate
        return 0.0 if diff == 0 else float(abs(diff) / self.diff_se)


def _girsanov_paths(u, lam, base_drift, n_paths, seed, n_steps, sigma, x0, dim):
    if n_paths < 2:
        raise DomainError("need at least two paths")
    rng = np.random.default_rng(seed)
    h = 1.0 / n_steps
    x = np.broadcast_to(np.asarray(x0, dtype=np.float64), (n_paths, dim)).copy()
    cost = np.zeros(n_paths)
    llr = np.zeros(n_paths)
    var = lam * sigma**2 * h
    for j in range(n_steps):
        tau = j * h
        ctrl = np.asarray(u(x, tau), dtype=np.float64) * np.ones_like(x)
        b = base_drift(x, tau)
        mean_ctrl = x + h * (b + sigma * ctrl)
        mean_base = x + h * b
        x_next = mean_ctrl + np.sqrt(var) * rng.standard_normal(x.shape)
        cost += h * np.sum(ctrl**2, axis=1) / (2.0 * lam)
        llr += (np.sum((x_next - mean_base) ** 2, axis=1) - np.sum((x_next - mean_ctrl) ** 2, axis=1)) / (2.0 * var)
        x = x_next
        if not np.all(np.isfinite(x)):
            raise NumericalDivergenceError(f"Girsanov paths diverged at fine step {j}", step=j)
    return cost, llr


def _mean_se(values):
    n = values.size
    return GirsanovResult(float(values.mean()), float(values.std(ddof=1) / np.sqrt(n)))


def girsanov_mc_kl(u, lam: float, base_drift=None, n_paths: int = 10_000, seed: int = 0, *, n_steps: int = 100,
                   sigma: float = 1.0, x0=0.0, dim: int = 1) -> GirsanovResult:
    """Monte-Carlo ``(1 / 2 lam) E int ||u||^2`` along paths of ``dX = (b + sigma u) dt + sqrt(lam) sigma dW``.

    ``n_steps`` defaults to ten times the 10-step policy grid.
    """
    if n_paths < 1000:
        raise DomainError("the Girsanov oracle needs at least 1000 paths")
    cost, _ = _girsanov_paths(u, lam, base_drift or OUDrift(), n_paths, seed, n_steps, sigma, x0, dim)
    return _mean_se(cost)


def girsanov_compare(u, lam: float, base_drift=None, n_paths: int = 10_000, seed: int = 0, *, n_steps: int = 100,
                     sigma: float = 1.0, x0=0.0, dim: int = 1) -> GirsanovComparison:
    """Control-cost estimator next to the log-likelihood-ratio estimator on the same paths."""
    cost, llr = _girsanov_paths(u, lam, base_drift or OUDrift(), n_paths, seed, n_steps, sigma, x0, dim)
    diff = cost - llr
    return GirsanovComparison(_mean_se(cost), _mean_se(llr), float(diff.std(ddof=1) / np.sqrt(diff.size)), n_steps)


# ---------------------------------------------------------------------------
# backpropagation through the sampling chain


def _phi_cdf(z):
    return 0.5 * (1.0 + erf(z / np.sqrt(2.0)))


def _activation(name, z):
    if name == "gelu":
        return z * _phi_cdf(z)
    if name == "tanh":
        return np.tanh(z)
    return np.where(z > 0, z, 0.0)


def _activation_deriv(name, z):
    if name == "gelu":
        return _phi_cdf(z) + z * np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    if name == "tanh":
        return 1.0 / np.cosh(z) ** 2
    return np.where(z > 0, 1.0, 0.0)


def _split(params: ParamVector):
    out, offset = [], 0
    for n_in, n_out in zip(params.layer_sizes[:-1], params.layer_sizes[1:]):
        w = params.values[offset : offset + n_in * n_out].reshape(n_out, n_in)
        offset += n_in * n_out
        out.append((w, params.values[offset : offset + n_out]))
        offset += n_out
    return out


def _forward_cache(params: ParamVector, x):
    layers = _split(params)
    acts, pres = [x], []
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w.T + b
        pres.append(z)
        h = _activation(params.activation, z) if i < len(layers) - 1 else z
        acts.append(h)
    return layers, acts, pres


def _backward(params: ParamVector, cache, g_out):
    """Gradients w.r.t. the input and the flat parameters, summed over rows."""
    layers, acts, pres = cache
    grads = []
    g = g_out
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        if i < len(layers) - 1:
            g = g * _activation_deriv(params.activation, pres[i])
        grads.append((g.T @ acts[i], g.sum(axis=0)))
        g = g @ w
    flat = np.concatenate([np.concatenate([gw.reshape(-1), gb]) for gw, gb in reversed(grads)])
    return g, flat


def _critic_grad_manual(critic, s, a):
    """Action gradient of the guidance value, by the oracle's own backward pass when possible."""
    online = getattr(critic, "online", None)
    if online is None:
        return np.asarray(critic.action_grad(s, a), dtype=np.float64)
    x = np.concatenate([s, a], axis=1)
    n = len(online)
    caches = [_forward_cache(p, x) for p in online]
    q = np.stack([c[1][-1][:, 0] for c in caches])
    mean, std = q.mean(axis=0), q.std(axis=0)
    total = np.zeros_like(a)
    for qi, p, cache in zip(q, online, caches):
        pess = np.where(std > 0, (qi - mean) / (n * np.where(std > 0, std, 1.0)), 0.0)
        w = 1.0 / n - critic.rho_pess * pess
        g_in, _ = _backward(p, cache, w[:, None])
        total += g_in[:, s.shape[1]:]
    return total


def bptt_gradient_oracle(v_ft_params: ParamVector, critic, traj, beta: float = 1.0) -> np.ndarray:
    """``grad_theta`` of the batch mean of ``-beta Q(s, X_K)`` through the full Euler chain.

    The chain is re-run from the trajectory's recorded start points and noises
    with ``v_ft_params``; the net input is ``[s, x, tau]``.
    """
    s = np.asarray(traj.states, dtype=np.float64)
    noises = np.asarray(traj.noises, dtype=np.float64)
    B, K = noises.shape[0], noises.shape[1]
    h, taus = clamped_grid(K, traj.schedule.tau_clamp)
    x = np.array(traj.points[:, 0], dtype=np.float64)
    caches, xs = [], [x]
    for k in range(K):
        inp = np.concatenate([s, x, np.full((B, 1), taus[k])], axis=1)
        cache = _forward_cache(v_ft_params, inp)
        v = cache[1][-1]
        x = x + h * (2.0 * v - x / taus[k]) + np.sqrt(h) * ot_g(taus[k]) * noises[:, k]
        caches.append(cache)
        xs.append(x)
    g_x = -beta * _critic_grad_manual(critic, s, x) / B
    grad = np.zeros(v_ft_params.values.size)
    ds = s.shape[1]
    for k in range(K - 1, -1, -1):
        g_in, g_p = _backward(v_ft_params, caches[k], 2.0 * h * g_x)
        grad += g_p
        g_x = g_x * (1.0 - h / taus[k]) + g_in[:, ds : ds + g_x.shape[1]]
    return grad


# ---------------------------------------------------------------------------
# verify entry point


@dataclass
class CheckResult:
    name: str
    passed: bool
    margin: float | None = None
    details: dict = field(default_factory=dict)
    seconds: float = 0.0


def _timed(name, fn):
    start = time.perf_counter()
    try:
        passed, margin, details = fn()
    except Exception as exc:  # a crashing oracle is a failed check, reported with its message
        passed, margin, details = False, None, {"error": f"{type(exc).__name__}: {exc}"}
    return CheckResult(name, bool(passed), None if margin is None else float(margin), details, time.perf_counter() - start)


def _check_tilt_bounds_sweep(seed):
    r = tilt_bounds_sweep(1000, seed)
    return not r["violations"], min(r["min_kl_margin"], r["min_tv_margin"], r["min_ratio_margin"]), r


def _check_girsanov(seed):
    comp = girsanov_compare(lambda x, t: 0.8 * x + 0.5 * np.sin(3 * t), lam=0.5, base_drift=OUDrift(1.5),
                            n_paths=10_000, seed=seed, x0=0.3)
    details = {"cost": comp.cost.estimate, "cost_se": comp.cost.se, "llr": comp.llr.estimate, "llr_se": comp.llr.se,
               "diff_se": comp.diff_se, "z": comp.z_score}
    return comp.z_score <= 3.0, 3.0 - comp.z_score, details


def _check_dpi(seed):
    r = dpi_sweep(100, seed)
    return not r["violations"], r["min_margin"], r


def _check_chain_kl(seed):
    from .flow import FlowSchedule, sample_memoryless_sde
    from .trust_region import path_kl_estimate

    rng = np.random.default_rng(seed)
    worst = 0.0
    for K in (5, 10, 20):
        dv = rng.normal(size=2)
        base = AffineVelocity(lambda t: -0.5 * np.ones_like(t), lambda t: 0.1 * t, 2)
        ft = AffineVelocity(base.slope, lambda t, dv=dv: 0.1 * t + dv, 2)
        traj = sample_memoryless_sde(ft, np.zeros((16, 1)), FlowSchedule(K), rng, action_dim=2)
        est = path_kl_estimate(ft, base, traj)
        ref = constant_shift_chain_kl(dv, K)
        worst = max(worst, abs(est - ref) / ref)
    return worst <= 1e-12, 1e-12 - worst, {"max_rel_err": worst}


def run_all(seed: int = 0) -> dict:
    """Run every oracle check; the report is JSON-serializable."""
    checks = [
        _timed("tilt_amplification_bounds", lambda: _check_tilt_bounds_sweep(seed)),
        _timed("girsanov_two_estimators", lambda: _check_girsanov(seed)),
        _timed("dpi_terminal_vs_path", lambda: _check_dpi(seed)),
        _timed("gaussian_chain_kl_estimator", lambda: _check_chain_kl(seed)),
    ]
    out = []
    for c in checks:
        details = {k: v for k, v in c.details.items() if k != "violations"}
        if "violations" in c.details:
            details["violations"] = len(c.details["violations"])
            details["first_violations"] = c.details["violations"][:3]
        out.append({"name": c.name, "passed": c.passed, "margin": c.margin, "seconds": round(c.seconds, 3),
                    "details": details})
    return {"passed": all(c["passed"] for c in out), "checks": out}
