"""Flat key=value run configuration shared by every CLI command.

A config file holds `key = value` lines (# comments allowed). Unknown keys
are rejected; values are coerced to the declared field types. Every
command writes its resolved config next to its outputs so a run can be
reproduced from the artifact directory alone.
"""

import os
from dataclasses import asdict, dataclass, fields

from .errors import ContractError

ENV_CONFIG = "SPECEDIT_CONFIG"
FORMAT_VERSION = 1


@dataclass
class RunConfig:
    seed: int = 0
    # data generation
    data_clips: int = 2048
    # training
    base_steps: int = 20000
    adapter_steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-2
    dropout_p: float = 0.05
    t_train: int = 200
    log_every: int = 100
    # edit defaults (timbre/accomp tasks; texture overrides via task defaults)
    pool_rate: int = 2
    alpha: float = 0.5
    guidance_scale: float = 7.5
    steps: int = 50
    sampler: str = "deterministic"
    use_task_defaults: bool = True
    # sweep study (non-swept axes pinned to the tradeoff-figure setting)
    sweep_requests: int = 32
    sweep_alpha_fixed: float = 0.55
    sweep_pool_fixed: int = 2
    sweep_lambda_fixed: float = 7.5
    sweep_workers: int = 1
    # evaluation
    eval_requests: int = 32


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, raw):
    kind = _FIELDS[key]
    raw = raw.strip()
    if kind == "bool" or kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ContractError(f"config key {key}: bad boolean {raw!r}")
    if kind == "int" or kind is int:
        return int(raw)
    if kind == "float" or kind is float:
        return float(raw)
    return raw


def parse_config_text(text, base=None):
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ContractError(f"config line {lineno}: expected key = value")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ContractError(f"config line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, raw))
    return cfg


def load_config(path=None, overrides=()):
    """Config from (optional) file plus key=value override strings."""
    cfg = RunConfig()
    path = path or os.environ.get(ENV_CONFIG)
    if path:
        with open(path) as f:
            cfg = parse_config_text(f.read(), cfg)
    for item in overrides:
        if "=" not in item:
            raise ContractError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ContractError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, raw))
    return cfg


def write_resolved(path, cfg, extra=None):
    """Dump the resolved config (plus per-command extras) as sorted lines."""
    lines = [f"format_version = {FORMAT_VERSION}"]
    payload = asdict(cfg)
    payload.update(extra or {})
    for key in sorted(payload):
        lines.append(f"{key} = {payload[key]}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
