"""Toy environments, behavior datasets and the replay buffer.

Two environments are provided. ``bandit`` is a one-step problem whose reward
has a good mode at ``a = +1`` and a worse one at ``a = -1``; its exact Q
function is the reward itself. ``pointmass2d`` is a 2-D navigation task with
state ``[position, goal]`` and dense negative-distance reward.

Environment step functions are vectorized over a leading batch axis.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import DomainError, FormatError, ShapeError


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    horizon: int
    reward: str = ""
    success: str = ""

    def __post_init__(self):
        if min(self.state_dim, self.action_dim, self.horizon) <= 0:
            raise DomainError("environment dimensions and horizon must be positive")


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    done: bool


@dataclass(frozen=True)
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.s.shape[0]


# ---------------------------------------------------------------------------
# replay buffer


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, state_dim: int, action_dim: int, capacity: int = 1_000_000):
        if capacity <= 0:
            raise DomainError("capacity must be positive")
        self.state_dim, self.action_dim, self.capacity = state_dim, action_dim, capacity
        n = min(capacity, 4096)
        self._s = np.zeros((n, state_dim))
        self._a = np.zeros((n, action_dim))
        self._r = np.zeros(n)
        self._s2 = np.zeros((n, state_dim))
        self._done = np.zeros(n, dtype=bool)
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    def _grow(self, needed):
        n = self._r.size
        if needed <= n or n >= self.capacity:
            return
        new = min(self.capacity, max(needed, 2 * n))
        for name in ("_s", "_a", "_r", "_s2", "_done"):
            old = getattr(self, name)
            arr = np.zeros((new,) + old.shape[1:], dtype=old.dtype)
            arr[:n] = old
            setattr(self, name, arr)

    def push(self, t: Transition) -> None:
        self.push_many(np.atleast_2d(t.s), np.atleast_2d(t.a), np.atleast_1d(t.r), np.atleast_2d(t.s2), np.atleast_1d(t.done))

    def push_many(self, s, a, r, s2, done) -> None:
        s, a, s2 = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (s, a, s2))
        r = np.atleast_1d(np.asarray(r, dtype=np.float64))
        done = np.atleast_1d(np.asarray(done, dtype=bool))
        if s.shape[1] != self.state_dim or s2.shape[1] != self.state_dim or a.shape[1] != self.action_dim:
            raise ShapeError("transition dimensions do not match the buffer")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a)) and np.all(np.isfinite(r)) and np.all(np.isfinite(s2))):
            raise DomainError("transitions must be finite")
        for i in range(s.shape[0]):
            self._grow(len(self) + 1)
            j = self.inserted % self.capacity
            self._s[j], self._a[j], self._r[j], self._s2[j], self._done[j] = s[i], a[i], r[i], s2[i], done[i]
            self.inserted += 1

    def _order(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        n = len(self)
        if self.inserted <= self.capacity:
            return np.arange(n)
        start = self.inserted % self.capacity
        return (start + np.arange(n)) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform sampling with replacement over occupied slots."""
        if len(self) == 0:
            raise DomainError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self), size=batch_size)
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._done[idx])

    def all(self) -> Batch:
        idx = self._order()
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._done[idx])

    def copy(self) -> "ReplayBuffer":
        out = ReplayBuffer(self.state_dim, self.action_dim, self.capacity)
        data = self.all()
        out.push_many(data.s, data.a, data.r, data.s2, data.done)
        return out

    def __eq__(self, other):
        if not isinstance(other, ReplayBuffer):
            return NotImplemented
        a, b = self.all(), other.all()
        return all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("s", "a", "r", "s2", "done"))

    __hash__ = None


# ---------------------------------------------------------------------------
# bandit

BANDIT_WIDTH = 0.02
BANDIT_MODES = ((1.0, 1.0), (-1.0, 0.5))  # (location, height)
BANDIT_DATA_STD = 0.1


def bimodal_bandit_reward(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)[..., 0]
    return sum(h * np.exp(-((a - c) ** 2) / BANDIT_WIDTH) for c, h in BANDIT_MODES)


def bimodal_bandit_step(state, action):
    """One-step episode: ``(state, reward, done=True)``."""
    state = np.asarray(state, dtype=np.float64)
    r = bimodal_bandit_reward(action)
    return state, r, np.ones(np.shape(r), dtype=bool)


def bandit_value_gaussian(mean: float, std: float) -> float:
    """Expected reward of ``a ~ N(mean, std^2)`` in closed form."""
    total = BANDIT_WIDTH + 2.0 * std**2
    return float(sum(h * np.sqrt(BANDIT_WIDTH / total) * np.exp(-((mean - c) ** 2) / total) for c, h in BANDIT_MODES))


def bandit_value_uniform(lo: float, hi: float) -> float:
    """Expected reward of ``a ~ U(lo, hi)`` in closed form."""
    root = np.sqrt(BANDIT_WIDTH)
    total = 0.0
    for c, h in BANDIT_MODES:
        total += h * 0.5 * np.sqrt(np.pi) * root * (erf((hi - c) / root) - erf((lo - c) / root))
    return float(total / (hi - lo))


def bandit_value_mixture(std: float = BANDIT_DATA_STD) -> float:
    """Value of the symmetric behavior mixture ``0.5 N(1, std^2) + 0.5 N(-1, std^2)``."""
    return 0.5 * (bandit_value_gaussian(1.0, std) + bandit_value_gaussian(-1.0, std))


class BimodalBandit:
    spec = EnvSpec(
        "bandit",
        state_dim=1,
        action_dim=1,
        horizon=1,
        reward="exp(-(a-1)^2/0.02) + 0.5 exp(-(a+1)^2/0.02)",
        success="|a - 1| <= 0.2",
    )

    def reset(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        return np.zeros((n, 1))

    def step(self, states, actions):
        s2, r, done = bimodal_bandit_step(states, actions)
        success = np.abs(np.asarray(actions)[..., 0] - 1.0) <= 0.2
        return s2, r, done, success

    def scripted_action(self, states, rng, kind="good"):
        n = np.asarray(states).shape[0]
        centre = 1.0 if kind == "good" else -1.0
        return centre + BANDIT_DATA_STD * rng.standard_normal((n, 1))


# ---------------------------------------------------------------------------
# point mass

POINTMASS_GOAL_RADIUS = 0.1
POINTMASS_GOAL_BONUS = 10.0
POINTMASS_SPEED = 0.1


def pointmass2d_step(state, action):
    """``state = [px, py, gx, gy]``; returns ``(next_state, reward, done)``."""
    state = np.asarray(state, dtype=np.float64)
    action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    pos, goal = state[..., :2], state[..., 2:]
    pos = np.clip(pos + POINTMASS_SPEED * action, -1.0, 1.0)
    dist = np.linalg.norm(pos - goal, axis=-1)
    done = dist < POINTMASS_GOAL_RADIUS
    reward = np.where(done, POINTMASS_GOAL_BONUS, -dist)
    return np.concatenate([pos, goal], axis=-1), reward, done


class PointMass2D:
    """Navigation to a fixed goal from uniformly random starts in ``[-1, 1]^2``."""

    def __init__(self, goal=(0.5, 0.5), decoy=(-0.6, -0.6), horizon=50, noise=0.3):
        self.goal = np.asarray(goal, dtype=np.float64)
        self.decoy = np.asarray(decoy, dtype=np.float64)
        self.noise = noise
        self.spec = EnvSpec(
            "pointmass2d",
            state_dim=4,
            action_dim=2,
            horizon=horizon,
            reward="-||pos - goal|| per step, +10 and terminate within 0.1 of the goal",
            success="goal reached before the horizon",
        )

    def reset(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        pos = rng.uniform(-1.0, 1.0, size=(n, 2))
        return np.concatenate([pos, np.broadcast_to(self.goal, (n, 2))], axis=-1)

    def step(self, states, actions):
        s2, r, done = pointmass2d_step(states, actions)
        return s2, r, done, done.copy()

    def scripted_action(self, states, rng, kind="good"):
        """Unit-speed move toward the goal (``good``) or toward the decoy, plus noise."""
        states = np.asarray(states)
        target = states[..., 2:] if kind == "good" else np.broadcast_to(self.decoy, states[..., :2].shape)
        delta = target - states[..., :2]
        norm = np.linalg.norm(delta, axis=-1, keepdims=True)
        direction = delta / np.maximum(norm, 1e-8) * np.minimum(1.0, norm / POINTMASS_SPEED)
        return np.clip(direction + self.noise * rng.standard_normal(direction.shape), -1.0, 1.0)


def make_env(name: str, **kwargs):
    if name == "bandit":
        return BimodalBandit()
    if name == "pointmass2d":
        return PointMass2D(**kwargs)
    raise DomainError(f"unknown environment {name!r}")


def generate_behavior_dataset(env, behavior: str, n: int, seed: int, capacity: int | None = None) -> ReplayBuffer:
    """Roll a suboptimal behavior policy for ``n`` transitions.

    ``mixture-of-scripted`` picks the good or the bad scripted controller with
    equal probability at every step; ``uniform-noisy`` draws actions uniformly
    (from ``[-1.5, 1.5]`` on the bandit, the action box on the point mass).
    """
    if n <= 0:
        raise DomainError("dataset size must be positive")
    if behavior not in ("mixture-of-scripted", "uniform-noisy"):
        raise DomainError(f"unknown behavior {behavior!r}")
    rng = np.random.default_rng(seed)
    spec = env.spec
    buf = ReplayBuffer(spec.state_dim, spec.action_dim, capacity or max(n, 1))
    states, t = env.reset(rng), 0
    while len(buf) < n:
        if behavior == "uniform-noisy":
            bound = 1.5 if spec.name == "bandit" else 1.0
            action = rng.uniform(-bound, bound, size=(1, spec.action_dim))
        else:
            kind = "good" if rng.random() < 0.5 else "bad"
            action = env.scripted_action(states, rng, kind)
        s2, r, done, _ = env.step(states, action)
        buf.push_many(states, action, r, s2, done)
        t += 1
        if done[0] or t >= spec.horizon:
            states, t = env.reset(rng), 0
        else:
            states = s2
    return buf


# ---------------------------------------------------------------------------
# dataset file: b"TRQD", u32 version, u64 count, u32 state dim, u32 action dim,
# then packed little-endian records (s, a, r, s2 as f64, done as u8)

DATA_MAGIC = b"TRQD"
DATA_VERSION = 1
_DATA_HEADER = struct.Struct("<4sIQII")


def _record_dtype(ds, da):
    return np.dtype([("s", "<f8", (ds,)), ("a", "<f8", (da,)), ("r", "<f8"), ("s2", "<f8", (ds,)), ("done", "u1")])


def dataset_to_bytes(buf: ReplayBuffer) -> bytes:
    data = buf.all()
    rec = np.zeros(len(data), dtype=_record_dtype(buf.state_dim, buf.action_dim))
    rec["s"], rec["a"], rec["r"], rec["s2"], rec["done"] = data.s, data.a, data.r, data.s2, data.done
    header = _DATA_HEADER.pack(DATA_MAGIC, DATA_VERSION, len(data), buf.state_dim, buf.action_dim)
    return header + rec.tobytes()


def dataset_from_bytes(blob: bytes, capacity: int | None = None) -> ReplayBuffer:
    if len(blob) < _DATA_HEADER.size:
        raise FormatError("truncated dataset header")
    magic, version, count, ds, da = _DATA_HEADER.unpack_from(blob)
    if magic != DATA_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    if version != DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    dtype = _record_dtype(ds, da)
    if len(blob) != _DATA_HEADER.size + count * dtype.itemsize:
        raise FormatError("dataset payload size does not match the header")
    rec = np.frombuffer(blob, dtype=dtype, offset=_DATA_HEADER.size)
    buf = ReplayBuffer(ds, da, capacity or max(count, 1))
    if count:
        buf.push_many(rec["s"], rec["a"], rec["r"], rec["s2"], rec["done"].astype(bool))
    return buf


def save_dataset(path, buf: ReplayBuffer) -> None:
    Path(path).write_bytes(dataset_to_bytes(buf))


def load_dataset(path, capacity: int | None = None) -> ReplayBuffer:
    return dataset_from_bytes(Path(path).read_bytes(), capacity)


def export_csv(path, buf: ReplayBuffer) -> None:
    data = buf.all()
    ds, da = buf.state_dim, buf.action_dim
    header = [f"s{i}" for i in range(ds)] + [f"a{i}" for i in range(da)] + ["r"] + [f"s2_{i}" for i in range(ds)] + ["done"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(data)):
            writer.writerow(
                [repr(float(x)) for x in data.s[i]]
                + [repr(float(x)) for x in data.a[i]]
                + [repr(float(data.r[i]))]
                + [repr(float(x)) for x in data.s2[i]]
                + [int(data.done[i])]
            )
