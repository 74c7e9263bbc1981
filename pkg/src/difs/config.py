"""Run configuration.

A single INI-style file with one section per pipeline phase is the source
of truth; command-line --set overrides individual keys, the DIFS_SEED
environment variable and --seed override the seed, and every command
persists the fully resolved configuration next to its outputs.
"""

import configparser
import copy
import os

from .errors import ValidationError

ENV_SEED = "DIFS_SEED"

# Desk-scale defaults. StageConfig's own dataclass defaults carry the
# full-scale schedule (peak 5e-5 then 5e-6, 1000 warmup steps, batch 48);
# the desk values below keep the toy pipeline trainable in minutes.
DEFAULTS = {
    "run": {"seed": 20260809},
    "corpus": {
        "n_train": 2000,
        "n_val": 200,
        "n_test": 200,
        "n_conversations": 300,
        "d_s": 16,
        "min_words": 3,
        "max_words": 5,
        "max_exchanges": 3,
        "noise_sigma": 0.05,
    },
    "lm": {"d_l": 32, "n_layers": 4, "n_heads": 4, "max_context": 512},
    "adapters": {
        "n_a": 10,
        "para_layers": 1,
        "para_heads": 8,
        "para_dropout": 0.1,
        "k": 5,
        "d_h": 64,
    },
    "pretrain": {
        "batch_size": 64,
        "max_steps": 4000,
        "min_steps": 800,
        "eval_interval": 250,
        "lr": 3e-3,
        "weight_decay": 0.01,
        "warmup_steps": 100,
        "n_samples": 12000,
        "gate_qa_accuracy": 0.95,
        "gate_exact_match": 0.9,
        "gate_subset": 48,
    },
    "stage1": {
        "max_lr": 2e-3,
        "warmup_steps": 100,
        "epochs": 3,
        "batch_size": 16,
        "weight_decay": 0.05,
        "steps_per_epoch": 120,
        "n_val_samples": 96,
    },
    "stage2a": {
        "max_lr": 5e-4,
        "warmup_steps": 100,
        "epochs": 3,
        "batch_size": 16,
        "weight_decay": 0.05,
        "steps_per_epoch": 90,
        "n_val_samples": 96,
    },
    "stage2b": {
        "max_lr": 5e-4,
        "warmup_steps": 100,
        "epochs": 3,
        "batch_size": 16,
        "weight_decay": 0.05,
        "steps_per_epoch": 90,
        "n_val_samples": 96,
    },
    "stage3": {
        "max_lr": 5e-4,
        "warmup_steps": 0,
        "epochs": 3,
        "batch_size": 16,
        "weight_decay": 0.05,
        "steps_per_epoch": 120,
        "n_val_samples": 64,
        "alignment_pool_size": 512,
        "mixture_dual": 0.7,
        "mixture_linguistic": 0.15,
        "mixture_paralinguistic": 0.15,
    },
    "eval": {"max_new_tokens": 24, "judge": "mock"},
}


class RunConfig:
    """Typed, resolved configuration."""

    def __init__(self, values: dict):
        self.values = values

    def section(self, name: str) -> dict:
        if name not in self.values:
            raise ValidationError(f"unknown config section {name!r}")
        return self.values[name]

    def get(self, section: str, key: str):
        sec = self.section(section)
        if key not in sec:
            raise ValidationError(f"unknown config key {section}.{key}")
        return sec[key]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def write(self, path):
        parser = configparser.ConfigParser()
        for section, entries in self.values.items():
            parser[section] = {k: repr(v) for k, v in entries.items()}
        with open(path, "w", encoding="utf-8") as fh:
            parser.write(fh)


def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip().strip("'\"")
    except ValueError:
        raise ValidationError(
            f"config value {section}.{key}={raw!r} has the wrong type"
        ) from None


def resolve_config(path=None, overrides=(), seed=None) -> RunConfig:
    """Merge defaults, the config file, --set overrides, env, and --seed."""
    values = copy.deepcopy(DEFAULTS)
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
        for section in parser.sections():
            if section not in values:
                raise ValidationError(f"unknown config section {section!r}")
            for key, raw in parser.items(section):
                if key not in values[section]:
                    raise ValidationError(f"unknown config key {section}.{key}")
                values[section][key] = _coerce(section, key, raw, values[section][key])
    for override in overrides:
        if "=" not in override or "." not in override.split("=", 1)[0]:
            raise ValidationError(
                f"override {override!r} must look like section.key=value"
            )
        target, raw = override.split("=", 1)
        section, key = target.split(".", 1)
        if section not in values or key not in values[section]:
            raise ValidationError(f"unknown config key {section}.{key}")
        values[section][key] = _coerce(section, key, raw, values[section][key])
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        values["run"]["seed"] = _coerce("run", "seed", env_seed, 0)
    if seed is not None:
        values["run"]["seed"] = int(seed)
    return RunConfig(values)
