"""Pretraining and adversarial phases with checkpoints, metrics and resume.

Every epoch draws its randomness from ``hash_seed(seed, phase, epoch)``, so
a resumed run replays exactly the epochs an uninterrupted run would.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import neural_core as nc
from .adv_trainer import (AdvConfig, DivergenceDetected, DivergenceMonitor, adversarial_epoch, hash_seed,
                          pretrain_generator_epoch, sample_bleu, train_discriminator)
from .config import RunConfig
from .discriminator import Discriminator, DiscriminatorConfig
from .evaluation import validation_nll
from .generator import Generator, GeneratorConfig, RolloutPolicy, StartMode
from .tokenizer import Vocabulary, load_corpus

logger = logging.getLogger(__name__)

PRETRAIN, ADVERSARIAL = "pretrain", "adv"
_PHASE_TAG = {PRETRAIN: 1, ADVERSARIAL: 2}
_SPLIT_TAG = 7

PRETRAIN_COLUMNS = ("epoch", "train_nll", "val_nll", "d_loss_real", "d_loss_fake", "bleu4",
                    "score_real", "score_fake")
ADV_COLUMNS = ("epoch", "mean_reward", "g_loss", "d_loss_real", "d_loss_fake", "bleu4",
               "score_real", "score_fake")


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    train: np.ndarray
    val: np.ndarray
    vocab_size: int


def windows(pieces, seq_len: int) -> np.ndarray:
    """Non-overlapping ``seq_len`` windows; short tails are dropped."""
    rows = [p[i:i + seq_len] for p in pieces for i in range(0, len(p) - seq_len + 1, seq_len)]
    if not rows:
        return np.zeros((0, seq_len), dtype=np.int64)
    return np.asarray(rows, dtype=np.int64)


def split_pieces(pieces, val_fraction: float, seed: int):
    order = np.random.default_rng([seed, _SPLIT_TAG]).permutation(len(pieces))
    n_val = int(round(len(pieces) * val_fraction)) if len(pieces) > 1 else 0
    if val_fraction > 0 and len(pieces) > 1:
        n_val = min(max(n_val, 1), len(pieces) - 1)
    val = [pieces[i] for i in sorted(order[:n_val])]
    train = [pieces[i] for i in sorted(order[n_val:])]
    return train, val


def resolve_vocab_size(cfg: RunConfig, pieces) -> int:
    if cfg.vocab_size:
        return cfg.vocab_size
    if cfg.vocab:
        return len(Vocabulary.load(cfg.vocab))
    return max((max(p) for p in pieces if p), default=0) + 1


def load_dataset(cfg: RunConfig) -> Dataset:
    if not cfg.corpus:
        raise DataError("config needs a corpus path")
    pieces = load_corpus(cfg.corpus)
    vocab_size = resolve_vocab_size(cfg, pieces)
    top = max((max(p) for p in pieces if p), default=0)
    if top >= vocab_size:
        raise DataError(f"corpus token {top} is outside the vocabulary of size {vocab_size}")
    train, val = split_pieces(pieces, cfg.val_fraction, cfg.seed)
    data = Dataset(windows(train, cfg.seq_len), windows(val, cfg.seq_len), vocab_size)
    if len(data.train) == 0:
        raise DataError(f"no training piece is at least seq_len={cfg.seq_len} tokens long")
    logger.info("%d train / %d validation windows of %d tokens", len(data.train), len(data.val), cfg.seq_len)
    return data


def generator_config(cfg: RunConfig, vocab_size: int) -> GeneratorConfig:
    return GeneratorConfig(vocab_size=vocab_size, embedding_dim=cfg.embedding_dim, hidden_size=cfg.hidden_size,
                           seq_len=cfg.seq_len, batch_size=cfg.batch_size, pretrain_lr=cfg.g_pretrain_lr,
                           adv_lr=cfg.g_adv_lr, clip_norm=cfg.clip_norm, init_scale=cfg.init_scale)


def discriminator_config(cfg: RunConfig, vocab_size: int) -> DiscriminatorConfig:
    return DiscriminatorConfig(vocab_size=vocab_size, embedding_dim=cfg.d_embedding_dim,
                               conv_layers=cfg.d_conv_layers, feature_maps=cfg.d_feature_maps,
                               filter_width=cfg.d_filter_width, head=cfg.loss, dropout=cfg.d_dropout,
                               lr=cfg.d_lr, clip_norm=cfg.clip_norm, init_scale=cfg.init_scale)


def adv_config(cfg: RunConfig) -> AdvConfig:
    return AdvConfig(rollouts=cfg.rollouts, discount=cfg.discount, rollout_update_rate=cfg.rollout_update_rate,
                     g_steps=cfg.g_steps, d_steps=cfg.d_steps, d_epochs_per_step=cfg.d_epochs_per_step,
                     d_batches=cfg.d_batches, total_adv_epochs=cfg.adv_epochs, bleu_samples=cfg.bleu_samples)


def checkpoint_path(cfg: RunConfig, phase: str) -> Path:
    return Path(cfg.out_dir) / f"{phase}_last.psgn"


def metrics_path(cfg: RunConfig, phase: str) -> Path:
    return Path(cfg.out_dir) / f"{phase}.metrics.tsv"


def format_row(epoch: int, values) -> str:
    return "\t".join([str(epoch)] + [f"{float(v):.6f}" for v in values]) + "\n"


def _truncate_metrics(path: Path, epochs: int) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[:epochs]))


def model_meta(cfg: RunConfig, vocab_size: int) -> dict:
    return {
        "vocab_size": vocab_size, "seq_len": cfg.seq_len, "mode": cfg.mode, "loss": cfg.loss,
        "embedding_dim": cfg.embedding_dim, "hidden_size": cfg.hidden_size,
        "d_embedding_dim": cfg.d_embedding_dim, "d_conv_layers": cfg.d_conv_layers,
        "d_feature_maps": cfg.d_feature_maps, "d_filter_width": cfg.d_filter_width,
    }


def check_meta(meta: dict, cfg: RunConfig, vocab_size: int) -> None:
    expected = model_meta(cfg, vocab_size)
    bad = {k: (meta.get(k), v) for k, v in expected.items() if meta.get(k) != v}
    if bad:
        detail = ", ".join(f"{k}: checkpoint {a!r} vs config {b!r}" for k, (a, b) in sorted(bad.items()))
        raise nc.CheckpointError(f"checkpoint does not match config ({detail})")


def _bleu(gen: Generator, data: Dataset, n: int, seed: int) -> float:
    if not n or len(data.val) == 0:
        return float("nan")
    return sample_bleu(gen, data.val, n, seed, start_pool=data.train)


def run_pretrain(cfg: RunConfig, resume: bool = False, log=print) -> Path:
    """Teacher-forced G epochs, each followed by D updates on real/fake batches."""
    data = load_dataset(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gcfg, dcfg = generator_config(cfg, data.vocab_size), discriminator_config(cfg, data.vocab_size)
    mode = StartMode(cfg.mode)
    ckpt, metrics = checkpoint_path(cfg, PRETRAIN), metrics_path(cfg, PRETRAIN)

    start, bleu_peak = 1, float("nan")
    if resume and ckpt.exists():
        meta, sets = nc.load_checkpoint(ckpt)
        check_meta(meta, cfg, data.vocab_size)
        gen = Generator(gcfg, sets["g"], mode=mode)
        disc = Discriminator(dcfg, sets["d"])
        start = int(meta["epoch"]) + 1
        bleu_peak = float(meta.get("bleu_peak", "nan"))
        log(f"resuming pretraining at epoch {start} from {ckpt}")
    else:
        gen = Generator(gcfg, seed=hash_seed(cfg.seed, 11), mode=mode)
        disc = Discriminator(dcfg, seed=hash_seed(cfg.seed, 12))
    _truncate_metrics(metrics, start - 1)
    if start == 1:
        metrics.write_text("")

    for epoch in range(start, cfg.pretrain_epochs + 1):
        seed = hash_seed(cfg.seed, _PHASE_TAG[PRETRAIN], epoch)
        train_nll = pretrain_generator_epoch(gen, data.train, seed)
        d_real = d_fake = float("nan")
        if cfg.pretrain_d_batches:
            d_real, d_fake = train_discriminator(disc, gen, data.train, cfg.batch_size, cfg.pretrain_d_batches,
                                                 1, hash_seed(seed, 1))
        val_nll = validation_nll(gen.params, data.val, mode) if len(data.val) else float("nan")
        bleu = _bleu(gen, data, cfg.bleu_samples, hash_seed(seed, 2))
        if not math.isnan(bleu) and not bleu <= bleu_peak:
            bleu_peak = bleu
        rng = np.random.default_rng([seed, 3])
        real = data.train[rng.integers(len(data.train), size=cfg.batch_size)]
        fake = gen.sample(cfg.batch_size, seed=hash_seed(seed, 4), start_pool=data.train)
        row = (train_nll, val_nll, d_real, d_fake, bleu, disc.score(real).mean(), disc.score(fake).mean())
        with metrics.open("a") as fh:
            fh.write(format_row(epoch, row))
        log(f"pretrain epoch {epoch}: train_nll {train_nll:.4f} val_nll {val_nll:.4f} bleu4 {bleu:.4f}")
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.pretrain_epochs:
            meta = dict(model_meta(cfg, data.vocab_size), phase=PRETRAIN, epoch=epoch, bleu_peak=bleu_peak)
            nc.save_checkpoint(ckpt, {"g": gen.params, "d": disc.params}, meta)
    return ckpt


def run_adversarial(cfg: RunConfig, resume: bool = False, log=print) -> Path:
    """Policy-gradient epochs; raises DivergenceDetected with ``last_checkpoint`` set."""
    data = load_dataset(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gcfg, dcfg = generator_config(cfg, data.vocab_size), discriminator_config(cfg, data.vocab_size)
    acfg = adv_config(cfg)
    mode = StartMode(cfg.mode)
    ckpt, metrics = checkpoint_path(cfg, ADVERSARIAL), metrics_path(cfg, ADVERSARIAL)

    if resume and ckpt.exists():
        meta, sets = nc.load_checkpoint(ckpt)
        source, start = ckpt, int(meta["epoch"]) + 1
        rollout_params = sets["r"]
        log(f"resuming adversarial training at epoch {start} from {ckpt}")
    else:
        source = Path(cfg.init_checkpoint) if cfg.init_checkpoint else checkpoint_path(cfg, PRETRAIN)
        if not source.exists():
            raise nc.CheckpointError(f"no pretrained checkpoint at {source}")
        meta, sets = nc.load_checkpoint(source)
        start = 1
        # the policy-gradient objective gets a fresh optimizer state
        sets["g"] = sets["g"].copy()
        sets["g"].m = {k: np.zeros_like(v) for k, v in sets["g"].items()}
        sets["g"].v = {k: np.zeros_like(v) for k, v in sets["g"].items()}
        sets["g"].step = 0
        rollout_params = sets["g"].copy()
    check_meta(meta, cfg, data.vocab_size)
    gen = Generator(gcfg, sets["g"], mode=mode)
    disc = Discriminator(dcfg, sets["d"])
    rollout = RolloutPolicy(rollout_params)
    bleu_peak = float(meta.get("bleu_peak", "nan"))
    monitor = DivergenceMonitor(cfg.reward_floor, cfg.reward_patience, cfg.bleu_drop,
                                None if math.isnan(bleu_peak) else bleu_peak)
    monitor.low_epochs = int(meta.get("low_epochs", 0)) if start > 1 else 0
    _truncate_metrics(metrics, start - 1)
    if start == 1:
        metrics.write_text("")
    last_good = source

    for epoch in range(start, cfg.adv_epochs + 1):
        seed = hash_seed(cfg.seed, _PHASE_TAG[ADVERSARIAL], epoch)
        m = adversarial_epoch(gen, rollout, disc, data.train, acfg, seed, validation=data.val)
        with metrics.open("a") as fh:
            fh.write(format_row(epoch, [m[c] for c in ADV_COLUMNS[1:]]))
        log(f"adv epoch {epoch}: reward {m['mean_reward']:.4f} g_loss {m['g_loss']:.4f} bleu4 {m['bleu4']:.4f}")
        try:
            monitor.update(m["mean_reward"], m["bleu4"])
        except DivergenceDetected as exc:
            exc.last_checkpoint = str(last_good)
            raise
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.adv_epochs:
            meta = dict(model_meta(cfg, data.vocab_size), phase=ADVERSARIAL, epoch=epoch,
                        bleu_peak=bleu_peak, low_epochs=monitor.low_epochs)
            nc.save_checkpoint(ckpt, {"g": gen.params, "d": disc.params, "r": rollout.params}, meta)
            last_good = ckpt
    return ckpt


def load_generator(path) -> tuple[dict, Generator]:
    """Rebuild the generator stored in any phase checkpoint."""
    meta, sets = nc.load_checkpoint(path)
    try:
        gcfg = GeneratorConfig(vocab_size=int(meta["vocab_size"]), embedding_dim=int(meta["embedding_dim"]),
                               hidden_size=int(meta["hidden_size"]), seq_len=int(meta["seq_len"]))
        params = sets["g"]
    except KeyError as exc:
        raise nc.CheckpointError(f"{path}: missing {exc} in checkpoint") from exc
    if params["emb"].shape != (gcfg.vocab_size, gcfg.embedding_dim):
        raise nc.CheckpointError(f"{path}: embedding shape {params['emb'].shape} disagrees with header")
    return meta, Generator(gcfg, params, mode=StartMode(meta.get("mode", "uncond")))
