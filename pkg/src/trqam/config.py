"""Run configuration: a flat YAML mapping with at most one level of sections.

Keys may be written flat (``eps_kl: 0.5``), dotted (``trust.eps_kl: 0.5``) or
inside a one-level section (``trust: {eps_kl: 0.5}``); the section name is
only for readability and is dropped.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import yaml

from .errors import ConfigError
from .trust_region import BudgetSchedule

VARIANTS = ("trqam", "qam_fixed", "external_kl")
ENVS = ("bandit", "pointmass2d")
BEHAVIORS = ("mixture-of-scripted", "uniform-noisy")


@dataclass(frozen=True)
class RunConfig:
    variant: str = "trqam"
    env: str = "bandit"
    behavior: str = "mixture-of-scripted"
    seed: int = 0
    dataset_size: int = 10_000
    horizon: int = 0  # 0 keeps the environment default

    hidden: tuple[int, ...] = (64, 64)
    critic_hidden: tuple[int, ...] = (64, 64)
    activation: str = "gelu"
    flow_steps: int = 10

    eps_kl: BudgetSchedule = field(default_factory=lambda: BudgetSchedule(0.5))
    eta_lambda: float = 0.1
    rho_ema: float = 0.01
    lambda_0: float = 1.0
    lambda_min: float = 1e-3
    freeze_lambda: bool = False
    beta: float = 1.0

    gamma: float = 0.99
    ensemble_size: int = 2
    rho_pess: float = 0.5
    polyak: float = 0.005
    critic_mode: str = "learned"
    critic_error: float = 0.0
    critic_error_freq: float = 25.0

    batch_size: int = 64
    lr: float = 3e-4
    max_grad_norm: float = 1.0
    bc_steps: int = 2000
    bc_lr: float = 1e-3
    offline_steps: int = 2000
    online_steps: int = 0
    eval_interval: int = 500
    eval_episodes: int = 100
    eval_mode: str = "sde"
    on_divergence: str = "halt"

    dataset_path: str = ""
    checkpoint_path: str = ""

    def __post_init__(self):
        if not isinstance(self.eps_kl, BudgetSchedule):
            object.__setattr__(self, "eps_kl", BudgetSchedule.parse(self.eps_kl))
        for name in ("hidden", "critic_hidden"):
            object.__setattr__(self, name, tuple(int(n) for n in getattr(self, name)))
        _validate(self)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eps_kl"] = self.eps_kl.describe()
        d["hidden"], d["critic_hidden"] = list(self.hidden), list(self.critic_hidden)
        return d

    def with_overrides(self, **kwargs) -> "RunConfig":
        return parse_mapping({**self.to_dict(), **kwargs})


_POSITIVE = ("dataset_size", "flow_steps", "eta_lambda", "lambda_0", "lambda_min", "beta", "ensemble_size",
             "batch_size", "lr", "bc_lr", "max_grad_norm", "eval_episodes")
_NON_NEGATIVE = ("rho_pess", "critic_error", "bc_steps", "offline_steps", "online_steps", "eval_interval",
                 "horizon", "seed")
_CHOICES = {
    "variant": VARIANTS,
    "env": ENVS,
    "behavior": BEHAVIORS,
    "activation": ("gelu", "tanh", "relu"),
    "critic_mode": ("learned", "oracle"),
    "eval_mode": ("sde", "ode"),
    "on_divergence": ("halt", "continue"),
}


def _validate(cfg: RunConfig):
    for name in _POSITIVE:
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be positive, got {getattr(cfg, name)!r}")
    for name in _NON_NEGATIVE:
        if not getattr(cfg, name) >= 0:
            raise ConfigError(f"{name} must be non-negative, got {getattr(cfg, name)!r}")
    for name, options in _CHOICES.items():
        if getattr(cfg, name) not in options:
            raise ConfigError(f"{name} must be one of {', '.join(options)}, got {getattr(cfg, name)!r}")
    if not 0.0 < cfg.rho_ema <= 1.0:
        raise ConfigError(f"rho_ema must lie in (0, 1], got {cfg.rho_ema!r}")
    if not 0.0 <= cfg.polyak <= 1.0:
        raise ConfigError(f"polyak must lie in [0, 1], got {cfg.polyak!r}")
    if not 0.0 <= cfg.gamma < 1.0:
        raise ConfigError(f"gamma must lie in [0, 1), got {cfg.gamma!r}")
    if cfg.lambda_0 < cfg.lambda_min:
        raise ConfigError("lambda_0 must be at least lambda_min")
    if not cfg.hidden or not cfg.critic_hidden or min(cfg.hidden + cfg.critic_hidden) <= 0:
        raise ConfigError("hidden sizes must be positive integers")


_INT_FIELDS = {f.name for f in fields(RunConfig) if f.type in ("int",)}
_FLOAT_FIELDS = {f.name for f in fields(RunConfig) if f.type in ("float",)}
_BOOL_FIELDS = {f.name for f in fields(RunConfig) if f.type in ("bool",)}
_TUPLE_FIELDS = {"hidden", "critic_hidden"}


def _coerce(name, value):
    try:
        if name == "eps_kl":
            return BudgetSchedule.parse(value)
        if name in _TUPLE_FIELDS:
            if isinstance(value, (int, str)) and not isinstance(value, bool):
                value = [int(v) for v in str(value).replace(",", " ").split()]
            return tuple(int(v) for v in value)
        if name in _BOOL_FIELDS:
            if isinstance(value, bool):
                return value
            raise ConfigError(f"{name} must be true or false, got {value!r}")
        if name in _INT_FIELDS:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
            return int(value)
        if name in _FLOAT_FIELDS:
            if isinstance(value, bool):
                raise ConfigError(f"{name} must be a number, got {value!r}")
            return float(value)
        return "" if value is None else str(value)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid value for {name}: {value!r}") from None


def _flatten(doc: dict) -> dict:
    out = {}
    for key, value in doc.items():
        key = str(key)
        if isinstance(value, dict):
            for sub, v in value.items():
                if isinstance(v, dict):
                    raise ConfigError(f"section {key}.{sub} nests deeper than one level")
                out[f"{key}.{sub}"] = v
        else:
            out[key] = value
    flat = {}
    for key, value in out.items():
        name = key.split(".")[-1] if key.count(".") <= 1 else None
        if name is None:
            raise ConfigError(f"key {key!r} nests deeper than one level")
        if name in flat:
            raise ConfigError(f"key {name!r} given more than once")
        flat[name] = value
    return flat


def parse_mapping(doc: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    kwargs = {}
    for name, value in _flatten(doc).items():
        if name not in known:
            raise ConfigError(f"unknown config key {name!r}")
        kwargs[name] = _coerce(name, value)
    return RunConfig(**kwargs)


def parse_config(text: str) -> RunConfig:
    try:
        doc = yaml.safe_load(text) if text and text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config document: {exc}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    return parse_mapping(doc)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


__all__ = ["RunConfig", "parse_config", "parse_mapping", "load_config", "dump_config"]
