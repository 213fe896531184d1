"""Flat ``key = value`` experiment configs.

Lines are ``key = value``; ``#`` starts a comment; nesting is spelled with
dotted keys such as ``loss.lambda_adv``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from fractions import Fraction
from pathlib import Path


class ConfigError(ValueError):
    """Unknown key, missing required key, or a value of the wrong type."""


TASKS = ("autoencoder", "vae", "inversion")
COMPARATORS = ("identity", "random_tiny", "trained_tiny")

# keys that do not change what a run computes, left out of the config hash
VOLATILE = {"iters", "out", "eval_every", "checkpoint_every", "label"}


def _fraction(text: str) -> Fraction:
    value = Fraction(text.strip())
    if value <= 0:
        raise ValueError("must be positive")
    return value


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = ""
    dataset: str = ""
    dataset_train_count: int = 384
    dataset_test_count: int = 64
    dataset_size: int = 36
    image_size: int = 32
    scale: Fraction = Fraction(1, 8)
    seed: int = 0
    iters: int = 2000
    batch_size: int = 8
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    gate_threshold: float = 0.1
    dtype: str = "float32"
    init: str = "he_uniform"
    min_width: int = 4
    loss_lambda_feat: float = 0.0
    loss_lambda_adv: float = 0.0
    loss_lambda_img: float = 1.0
    loss_image: str = "se"
    kl_weight: float = 0.0
    comparator: str = "random_tiny"
    comparator_tap: str = "conv2"
    comparator_train_iters: int = 300
    inversion_phi: str = "random_tiny"
    inversion_tap: str = "fc4"
    ae_arch: str = "conv"
    vae_latent_dim: int = 64
    vae_sigma: str = "learned"
    eval_every: int = 0
    checkpoint_every: int = 0
    out: str = "runs/default"
    label: str = ""

    @property
    def run_label(self) -> str:
        return self.label or self.task


PARSERS = {
    "task": _choice(*TASKS),
    "dataset": str,
    "dataset_train_count": int,
    "dataset_test_count": int,
    "dataset_size": int,
    "image_size": int,
    "scale": _fraction,
    "seed": int,
    "iters": int,
    "batch_size": int,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "gate_threshold": float,
    "dtype": _choice("float32", "float64"),
    "init": _choice("glorot_uniform", "he_uniform"),
    "min_width": int,
    "loss_lambda_feat": float,
    "loss_lambda_adv": float,
    "loss_lambda_img": float,
    "loss_image": _choice("se", "l1"),
    "kl_weight": float,
    "comparator": _choice(*COMPARATORS),
    "comparator_tap": str,
    "comparator_train_iters": int,
    "inversion_phi": _choice(*COMPARATORS),
    "inversion_tap": str,
    "ae_arch": _choice("conv", "latent"),
    "vae_latent_dim": int,
    "vae_sigma": _choice("learned", "zero"),
    "eval_every": int,
    "checkpoint_every": int,
    "out": str,
    "label": str,
}
REQUIRED = ("task", "dataset")
# dotted spelling used in files: first underscore after a known prefix becomes a dot
PREFIXES = ("dataset", "loss", "comparator", "inversion", "ae", "vae")


def key_of(attr: str) -> str:
    for prefix in PREFIXES:
        if attr.startswith(prefix + "_"):
            return prefix + "." + attr[len(prefix) + 1 :]
    return attr


def attr_of(key: str) -> str:
    return key.replace(".", "_")


KEYS = {key_of(f.name): f.name for f in fields(ExperimentConfig)}


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Parsed values keyed by attribute name; no defaults are applied."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        attr = KEYS[key]
        try:
            values[attr] = PARSERS[attr](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return values


def resolve(values: dict[str, object], overrides: dict[str, object] | None = None) -> ExperimentConfig:
    merged = dict(values)
    for attr, value in (overrides or {}).items():
        if value is not None:
            merged[attr] = PARSERS[attr](str(value)) if isinstance(value, str) else value
    for attr in REQUIRED:
        if not merged.get(attr):
            raise ConfigError(f"missing required key {key_of(attr)!r}")
    cfg = ExperimentConfig(**merged)
    if cfg.image_size % 8:
        raise ConfigError("image_size must be a multiple of 8")
    if cfg.dataset_size < cfg.image_size:
        raise ConfigError("dataset.size must be at least image_size")
    return cfg


def load(path, overrides: dict[str, object] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return resolve(parse_text(text, str(path)), overrides)


def loads(text: str, overrides: dict[str, object] | None = None) -> ExperimentConfig:
    return resolve(parse_text(text), overrides)


def dump(cfg: ExperimentConfig) -> str:
    """The resolved config, every key spelled out, in a form :func:`loads` accepts."""
    lines = [f"{key_of(f.name)} = {format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    semantic = replace(cfg, **{attr: getattr(ExperimentConfig, attr) for attr in VOLATILE})
    return hashlib.sha256(dump(semantic).encode()).hexdigest()[:16]
