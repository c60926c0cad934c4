"""Command-line entry point: ``python -m bqpg --mode {train,gradquality,selftest}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from ..checkpoint import load_kernel, load_policy
from ..errors import BQPGError, ConfigError
from .config import env_params, load_config, train_config
from .gradquality import GradQualityConfig, grad_quality_study
from .selftest import run_selftest

logger = logging.getLogger(__name__)


def build_parser():
    p = argparse.ArgumentParser(prog="bqpg", description="Bayesian-quadrature policy-gradient experiments")
    p.add_argument("--mode", required=True, choices=("train", "gradquality", "selftest"))
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--checkpoint", help="policy checkpoint for gradquality")
    p.add_argument("--kernel-checkpoint", help="kernel checkpoint for gradquality")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def gradquality_config(cfg) -> GradQualityConfig:
    rank = int(cfg["kernel.fisher_rank"])
    return GradQualityConfig(
        env=cfg["env.name"], env_params=env_params(cfg), sample_sizes=tuple(cfg["gradquality.sample_sizes"]),
        repeats=int(cfg["gradquality.repeats"]), oracle_n=int(cfg["gradquality.oracle_n"]),
        estimators=tuple(cfg["gradquality.estimators"]), q=cfg["gradquality.q"], gamma=float(cfg["gae.gamma"]),
        tau=float(cfg["gae.tau"]), cg_iters=int(cfg["cg.max_iters"]), cg_tol=float(cfg["cg.tol"]),
        uapg_delta=int(cfg["uapg.delta"]), kernel_fit_steps=int(cfg["gradquality.kernel_fit_steps"]),
        kernel_fit_n=int(cfg["gradquality.kernel_fit_n"]), fit_critic=bool(cfg["gradquality.fit_critic"]),
        policy_hidden=tuple(cfg["policy.hidden"]),
        c1=float(cfg["kernel.c1"]), c2=float(cfg["kernel.c2"]), sigma2=float(cfg["kernel.sigma2"]),
        features=cfg["kernel.features"], fisher_rank=rank if rank > 0 else None,
        svd_power_iters=int(cfg["kernel.svd_power_iters"]), seed=int(cfg["seed"]),
    )


def _run_train(cfg):
    from ..algos import train

    record = train(train_config(cfg))
    print(f"wrote {os.path.join(cfg['out'], 'train.csv')} ({len(record.rows)} iterations, "
          f"complete={record.complete})")
    return 0 if record.complete else 1


def _run_gradquality(cfg, checkpoint, kernel_checkpoint):
    gq = gradquality_config(cfg)
    policy = load_policy(checkpoint) if checkpoint else None
    kernel = load_kernel(kernel_checkpoint) if kernel_checkpoint else None
    result = grad_quality_study(gq, policy, kernel)
    os.makedirs(cfg["out"], exist_ok=True)
    path = os.path.join(cfg["out"], "gradquality.csv")
    with open(path, "w", newline="") as fh:
        fh.write(result.csv_text())
    with open(os.path.join(cfg["out"], "gradquality.json"), "w") as fh:
        json.dump({"config": {k: v for k, v in sorted(cfg.items())}, "oracle_split_cosine": result.oracle_split_cosine},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {path}")
    return 0


def run_cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 and a usage message on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out:
            overrides["out"] = args.out
        cfg = load_config(args.config, overrides=overrides)
        if args.mode == "selftest":
            return 1 if run_selftest(int(cfg["seed"])) else 0
        if args.mode == "train":
            return _run_train(cfg)
        return _run_gradquality(cfg, args.checkpoint or cfg["policy.checkpoint"] or None,
                                args.kernel_checkpoint or cfg["kernel.checkpoint"] or None)
    except (ConfigError, BQPGError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run_cli())
