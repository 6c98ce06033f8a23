"""Command-line entry point: ``trqam {gen-data,pretrain,train,eval,verify}``.

Every command reads ``--config`` (YAML, optional), lets ``--seed`` override the
configured seed and writes its outputs into ``--out`` (default: the current
directory). Failures exit with status 2 and a one-line JSON error on stderr;
``verify`` exits with status 1 when any oracle check fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import RunConfig, dump_config, load_config
from .envs import export_csv, generate_behavior_dataset, load_dataset, make_env, save_dataset
from .errors import ConfigError, FormatError, TrqamError
from .flow import BCConfig, FlowSchedule, VelocityField, pretrain_bc
from .oracles import run_all
from .trainer import JsonlSink, evaluate_policy, init_trainer, run_phase

log = logging.getLogger("trqam")

DATASET_FILE = "dataset.trqd"
BASE_FILE = "base.trqp"
FINETUNED_FILE = "finetuned.trqp"
CHECKPOINT_VERSION = 1


def _configure_logging():
    level = os.environ.get("TRQAM_LOG_LEVEL", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"TRQAM_LOG_LEVEL must be one of error, info, debug; got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _make_env(cfg: RunConfig):
    if cfg.env == "pointmass2d" and cfg.horizon:
        return make_env(cfg.env, horizon=cfg.horizon)
    return make_env(cfg.env)


def manifest_path(params_path) -> Path:
    return Path(params_path).with_suffix(".json")


def save_checkpoint(path, params: nx.ParamVector, cfg: RunConfig, role: str, state_dim: int, action_dim: int, **extra):
    path = Path(path)
    nx.save_params(path, params)
    manifest = {
        "format": "trqam-checkpoint",
        "version": CHECKPOINT_VERSION,
        "params_file": path.name,
        "role": role,
        "layer_sizes": list(params.layer_sizes),
        "activation": params.activation,
        "state_dim": state_dim,
        "action_dim": action_dim,
        "config": cfg.to_dict(),
        **extra,
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[nx.ParamVector, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    mpath = manifest_path(path)
    if not mpath.exists():
        raise FormatError(f"checkpoint manifest {mpath} is missing")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint manifest {mpath} is not valid JSON: {exc}") from None
    if manifest.get("format") != "trqam-checkpoint" or manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{mpath} is not a supported checkpoint manifest")
    params = nx.load_params(path, manifest["activation"])
    if list(params.layer_sizes) != manifest["layer_sizes"]:
        raise FormatError("checkpoint layer sizes disagree with the manifest")
    return params, manifest


def _dataset_path(cfg, out: Path) -> Path:
    return Path(cfg.dataset_path) if cfg.dataset_path else out / DATASET_FILE


def cmd_gen_data(cfg: RunConfig, out: Path) -> dict:
    env = _make_env(cfg)
    buf = generate_behavior_dataset(env, cfg.behavior, cfg.dataset_size, cfg.seed)
    path = out / DATASET_FILE
    save_dataset(path, buf)
    export_csv(path.with_suffix(".csv"), buf)
    return {"command": "gen-data", "dataset": str(path), "transitions": len(buf)}


def cmd_pretrain(cfg: RunConfig, out: Path) -> dict:
    buf = load_dataset(_dataset_path(cfg, out))
    bc = BCConfig(cfg.bc_steps, cfg.batch_size, cfg.bc_lr, cfg.hidden, cfg.activation, cfg.seed)
    with JsonlSink(out / "bc_metrics.jsonl") as sink:
        params = pretrain_bc(buf, bc, sink)
    path = out / BASE_FILE
    save_checkpoint(path, params, cfg, "base", buf.state_dim, buf.action_dim, bc_steps=cfg.bc_steps)
    return {"command": "pretrain", "checkpoint": str(path)}


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    base_path = Path(cfg.checkpoint_path) if cfg.checkpoint_path else out / BASE_FILE
    params, _ = load_checkpoint(base_path)
    buf = load_dataset(_dataset_path(cfg, out), capacity=cfg.dataset_size + cfg.online_steps)
    env = _make_env(cfg)
    state = init_trainer(cfg, params, buf)
    with JsonlSink(out / "metrics.jsonl") as sink, JsonlSink(out / "eval.jsonl") as eval_sink:
        state = run_phase(state, "offline", cfg.offline_steps, env, sink, eval_sink)
        if cfg.online_steps:
            state = run_phase(state, "online", cfg.online_steps, env, sink, eval_sink)
    path = out / FINETUNED_FILE
    save_checkpoint(path, state.v_ft.params, cfg, "finetuned", buf.state_dim, buf.action_dim, step=state.step,
                    lambda_final=state.trust.lam, kl_ema_final=state.trust.kl_ema)
    if state.v_base.params != params:
        raise TrqamError("the base velocity field changed during training")
    return {"command": "train", "checkpoint": str(path), "steps": state.step, "lambda": state.trust.lam}


def cmd_eval(cfg: RunConfig, out: Path, checkpoint: str | None = None) -> dict:
    path = Path(checkpoint) if checkpoint else (Path(cfg.checkpoint_path) if cfg.checkpoint_path else out / FINETUNED_FILE)
    params, manifest = load_checkpoint(path)
    v = VelocityField(params, manifest["state_dim"], manifest["action_dim"])
    env = _make_env(cfg)
    rng = np.random.default_rng([cfg.seed, 3])
    ret, succ = evaluate_policy(v, env, cfg.eval_episodes, rng, FlowSchedule(cfg.flow_steps), cfg.eval_mode, cfg.horizon)
    report = {"command": "eval", "checkpoint": str(path), "mean_return": ret, "success_rate": succ,
              "episodes": cfg.eval_episodes, "seed": cfg.seed}
    (out / "eval_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def cmd_verify(cfg: RunConfig, out: Path) -> dict:
    report = run_all(cfg.seed)
    (out / "verify_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trqam", description="Trust-region adjoint matching for flow policies.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("gen-data", "roll the behavior policy and write the dataset"),
        ("pretrain", "behavior-clone the base velocity field"),
        ("train", "fine-tune from the base checkpoint (offline, then online)"),
        ("eval", "evaluate a checkpoint"),
        ("verify", "run the analytic oracle suite"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, help="overrides the configured seed")
        p.add_argument("--out", default=".", help="output directory")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint to evaluate (default: OUT/finetuned.trqp)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_logging()
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        log.info("config:\n%s", dump_config(cfg))
        if args.command == "gen-data":
            result = cmd_gen_data(cfg, out)
        elif args.command == "pretrain":
            result = cmd_pretrain(cfg, out)
        elif args.command == "train":
            result = cmd_train(cfg, out)
        elif args.command == "eval":
            result = cmd_eval(cfg, out, args.checkpoint)
        else:
            result = cmd_verify(cfg, out)
    except (TrqamError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps(result))
    if args.command == "verify" and not result["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
