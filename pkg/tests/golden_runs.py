"""Fixed runs whose metric sequences are pinned by golden files in tests/golden/."""

from trqam.config import RunConfig
from trqam.envs import BimodalBandit, generate_behavior_dataset
from trqam.flow import BCConfig, pretrain_bc
from trqam.trainer import ListSink, init_trainer, run_phase

GOLDEN_CONFIG = dict(env="bandit", seed=0, dataset_size=1000, hidden=(32, 32), critic_hidden=(32, 32), bc_steps=200,
                     offline_steps=500, eps_kl=0.5)
GOLDEN_KEYS = ("step", "lambda", "kl_ema", "adj_loss")


def bandit_golden_run(steps=500):
    cfg = RunConfig(**GOLDEN_CONFIG)
    env = BimodalBandit()
    buf = generate_behavior_dataset(env, cfg.behavior, cfg.dataset_size, cfg.seed)
    base = pretrain_bc(buf, BCConfig(cfg.bc_steps, cfg.batch_size, cfg.bc_lr, cfg.hidden, cfg.activation, cfg.seed))
    sink = ListSink()
    run_phase(init_trainer(cfg, base, buf), "offline", steps, env, sink)
    return [{k: r[k] for k in GOLDEN_KEYS} for r in sink]
