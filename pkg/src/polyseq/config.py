"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Unknown keys are an
error. Missing keys keep the defaults below.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    corpus: str = ""
    vocab: str = ""
    out_dir: str = "run"
    seed: int = 0
    vocab_size: int = 0  # 0: take it from the vocab file, else from the corpus
    val_fraction: float = 0.1
    loss: str = "ls"
    mode: str = "uncond"

    # generator
    seq_len: int = 100
    batch_size: int = 32
    embedding_dim: int = 32
    hidden_size: int = 512
    g_pretrain_lr: float = 1e-3
    g_adv_lr: float = 1e-2
    clip_norm: float = 5.0
    init_scale: float = 0.08

    # discriminator
    d_embedding_dim: int = 32
    d_conv_layers: int = 5
    d_feature_maps: int = 400
    d_filter_width: int = 20
    d_dropout: float = 0.25
    d_lr: float = 1e-4

    # pretraining
    pretrain_epochs: int = 100
    pretrain_d_batches: int = 1

    # adversarial
    adv_epochs: int = 100
    rollouts: int = 32
    discount: float = 0.99
    rollout_update_rate: float = 0.9
    g_steps: int = 1
    d_steps: int = 5
    d_epochs_per_step: int = 3
    d_batches: int = 1
    init_checkpoint: str = ""

    # bookkeeping
    bleu_samples: int = 64
    checkpoint_every: int = 10
    reward_floor: float = 0.02
    reward_patience: int = 10
    bleu_drop: float = 0.3

    def validate(self) -> None:
        if self.loss not in ("ce", "ls"):
            raise ConfigError(f"loss must be 'ce' or 'ls', got {self.loss!r}")
        if self.mode not in ("uncond", "cond"):
            raise ConfigError(f"mode must be 'uncond' or 'cond', got {self.mode!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        for name in ("seq_len", "batch_size", "hidden_size", "embedding_dim", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def dumps(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _convert(name: str, kind, text: str):
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind.__name__}") from None
    return text


def loads_config(text: str, source: str = "<string>") -> RunConfig:
    kinds = {f.name: {"int": int, "float": float, "str": str}[f.type] for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in kinds:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _convert(key, kinds[key], value)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = loads_config(text, str(path))
    base = path.parent
    for key in ("corpus", "vocab", "out_dir", "init_checkpoint"):
        value = getattr(cfg, key)
        if value and not Path(value).is_absolute():
            setattr(cfg, key, str(base / value))
    return cfg


def defaults_text() -> str:
    return RunConfig().dumps()


def replace(cfg: RunConfig, **changes) -> RunConfig:
    out = dataclasses.replace(cfg, **{k: v for k, v in changes.items() if v is not None})
    out.validate()
    return out
