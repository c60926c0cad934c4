"""Experiment configuration: a flat ``key = value`` text format.

Grammar (one statement per line)::

    # comment                       ignored, as is anything after an unquoted '#'
    [section]                       prefixes following keys with "section."
    dotted.key = value              value is int, float, true/false, "string",
                                    bare-word string, or [v1, v2, ...]

Keys are case-insensitive.  A key may be overridden from the environment:
``BQPG_TRAIN__BATCH_SIZE=512`` sets ``train.batch_size`` (prefix ``BQPG_``,
``__`` for each dot, value parsed with the same rules).

Recognized keys and defaults are listed in ``DEFAULTS``.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Optional

from ..errors import ConfigError

ENV_PREFIX = "BQPG_"

DEFAULTS = {
    "mode": "train",
    "seed": 0,
    "out": "runs/out",
    "env.name": "lqr",
    "policy.hidden": [64, 64],
    "policy.checkpoint": "",
    "train.algorithm": "vanilla",
    "train.estimator": "mc",
    "train.iterations": 200,
    "train.batch_size": 15000,
    "train.step_size": 0.01,
    "train.lr": 7e-4,
    "train.damping": 0.1,
    "train.normalize_advantages": True,
    "train.checkpoint_every": 0,
    "train.kernel_lr": 1e-3,
    "train.mll_points": 1024,
    "train.critic_lr": 0.5,
    "train.critic_steps": 25,
    "gae.gamma": 0.995,
    "gae.tau": 0.97,
    "cg.max_iters": 50,
    "cg.tol": 1e-10,
    "kernel.c1": 1.0,
    "kernel.c2": 5e-5,
    "kernel.sigma2": 1e-4,
    "kernel.grid_size": 128,
    "kernel.features": "deep",
    "kernel.feature_hidden": [64, 48, 10],
    "kernel.fisher_route": "truncated_svd",
    "kernel.fisher_rank": 0,  # 0 = min(|Theta|, 512, n)
    "kernel.fisher_damping": 0.0,
    "kernel.svd_power_iters": 2,
    "kernel.svd_oversample": 10,
    "kernel.checkpoint": "",
    "uapg.delta": 100,
    "uapg.epsilon": 3.0,
    "gradquality.sample_sizes": [512, 2048, 8192],
    "gradquality.repeats": 25,
    "gradquality.oracle_n": 100000,
    "gradquality.estimators": ["mc", "dbqpg"],
    "gradquality.q": "gae",  # returns | gae
    "gradquality.kernel_fit_steps": 0,
    "gradquality.fit_critic": True,
    "gradquality.kernel_fit_n": 2048,
}

_NUM = re.compile(r"^[+-]?(\d+\.?\d*([eE][+-]?\d+)?|\.\d+([eE][+-]?\d+)?|inf|nan)$")
_INT = re.compile(r"^[+-]?\d+$")


def parse_value(text: str):
    t = text.strip()
    if not t:
        raise ConfigError("empty value")
    if t.startswith("[") and t.endswith("]"):
        inner = t[1:-1].strip()
        return [parse_value(p) for p in _split_list(inner)] if inner else []
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    if _INT.match(t):
        return int(t)
    if _NUM.match(low):
        return float(t)
    return t


def _split_list(s):
    parts, depth, cur, quote = [], 0, [], None
    for ch in s:
        if quote:
            cur.append(ch)
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
            cur.append(ch)
        elif ch == "[":
            depth += 1
            cur.append(ch)
        elif ch == "]":
            depth -= 1
            cur.append(ch)
        elif ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if "".join(cur).strip():
        parts.append("".join(cur))
    return parts


def _strip_comment(line):
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def parse_config_text(text: str) -> dict:
    out, section = {}, ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]") and "=" not in line:
            section = line[1:-1].strip().lower()
            if not re.match(r"^[a-z0-9_.]+$", section):
                raise ConfigError(f"line {lineno}: bad section name {section!r}")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip().lower()
        if not re.match(r"^[a-z0-9_.]+$", key):
            raise ConfigError(f"line {lineno}: bad key {key!r}")
        full = f"{section}.{key}" if section else key
        try:
            out[full] = parse_value(value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX) and len(name) > len(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            out[key] = parse_value(value)
    return out


def load_config(path: Optional[str] = None, environ=None, overrides: Optional[dict] = None) -> dict:
    """Defaults, then the file, then ``BQPG_*`` variables, then explicit overrides."""
    cfg = dict(DEFAULTS)
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            cfg.update(parse_config_text(fh.read()))
    cfg.update(env_overrides(environ))
    cfg.update(overrides or {})
    return cfg


def env_params(cfg: dict) -> dict:
    return {k[4:]: v for k, v in cfg.items() if k.startswith("env.") and k != "env.name"}


def train_config(cfg: dict):
    from ..algos import TrainConfig

    rank = int(cfg["kernel.fisher_rank"])
    return TrainConfig(
        env=cfg["env.name"], env_params=env_params(cfg), algorithm=cfg["train.algorithm"],
        estimator=cfg["train.estimator"], iterations=int(cfg["train.iterations"]),
        batch_size=int(cfg["train.batch_size"]), step_size=float(cfg["train.step_size"]), lr=float(cfg["train.lr"]),
        damping=float(cfg["train.damping"]), gamma=float(cfg["gae.gamma"]), tau=float(cfg["gae.tau"]),
        normalize_advantages=bool(cfg["train.normalize_advantages"]), policy_hidden=tuple(cfg["policy.hidden"]),
        cg_iters=int(cfg["cg.max_iters"]), cg_tol=float(cfg["cg.tol"]), c1=float(cfg["kernel.c1"]),
        c2=float(cfg["kernel.c2"]), sigma2=float(cfg["kernel.sigma2"]), grid_size=int(cfg["kernel.grid_size"]),
        features=cfg["kernel.features"], feature_hidden=tuple(cfg["kernel.feature_hidden"]),
        fisher_route=cfg["kernel.fisher_route"], fisher_rank=rank if rank > 0 else None,
        fisher_damping=float(cfg["kernel.fisher_damping"]), svd_power_iters=int(cfg["kernel.svd_power_iters"]),
        svd_oversample=int(cfg["kernel.svd_oversample"]), kernel_lr=float(cfg["train.kernel_lr"]),
        mll_points=int(cfg["train.mll_points"]), critic_lr=float(cfg["train.critic_lr"]),
        critic_steps=int(cfg["train.critic_steps"]), uapg_delta=int(cfg["uapg.delta"]),
        uapg_epsilon=float(cfg["uapg.epsilon"]), seed=int(cfg["seed"]),
        checkpoint_every=int(cfg["train.checkpoint_every"]), out_dir=cfg["out"],
    )
