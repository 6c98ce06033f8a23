#!/usr/bin/env python3
"""Demo: a critic with a high-frequency error, with and without a trust region.

The bandit critic is the exact Q plus 0.3*sin(25a). Its gradient error is
7.5 in magnitude, so at beta = 5 the terminal adjoints are dominated by the
error. Three variants are fine-tuned from the same prior:

  qam_fixed    fixed lambda = 1, nothing limits how far the policy drifts
  external_kl  lambda * D added to the loss as a penalty, weight by dual ascent
  trqam        lambda inside the matching regression, also by dual ascent

    python3 demos/adversarial_critic.py [--steps 2000]

Watch the peak of the smoothed KL relative to the 0.1 budget. The penalty
variant only reacts after the deviation has happened, so its peaks are
larger than the internal variant's.
"""

import argparse

import numpy as np

from trqam.config import RunConfig
from trqam.envs import BimodalBandit, generate_behavior_dataset
from trqam.flow import BCConfig, pretrain_bc
from trqam.trainer import ListSink, init_trainer, run_phase


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=2000)
    args = parser.parse_args()

    env = BimodalBandit()
    buf = generate_behavior_dataset(env, "mixture-of-scripted", 5000, seed=0)
    base = pretrain_bc(buf, BCConfig(steps=1500, lr=1e-3))
    eps = 0.1
    for variant in ("qam_fixed", "external_kl", "trqam"):
        cfg = RunConfig(variant=variant, critic_mode="oracle", critic_error=0.3, beta=5.0, eps_kl=eps, eta_lambda=0.1,
                        rho_ema=0.1, lr=3e-4, eval_interval=0, on_divergence="continue")
        sink = ListSink()
        run_phase(init_trainer(cfg, base, buf.copy()), "offline", args.steps, env, sink)
        d = np.array([r["kl_ema"] for r in sink])
        print(f"{variant:12s} peak D {d.max() / eps:5.2f}x budget   final lambda {sink[-1]['lambda']:.3f}")


if __name__ == "__main__":
    main()
