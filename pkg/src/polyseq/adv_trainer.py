"""Monte Carlo rewards and the adversarial training loop.

Random streams are derived from an integer seed plus fixed tags, so every
function here is reproducible from its arguments alone. Rollouts for
prefix length t use ``default_rng([seed, t])`` and draw one (N, B) block of
uniforms per sampled position.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .discriminator import FAKE, REAL, DiscriminatorConfig, Discriminator, d_forward
from .evaluation import bleu4
from .generator import (Generator, RolloutPolicy, StartMode, continue_sequences, prefix_states,
                        update_rollout)
from .neural_core import ParamSet

logger = logging.getLogger(__name__)

# tags mixed into derived seeds
_G_SAMPLE, _REWARD, _D_FAKE, _D_REAL, _D_DROP, _SCORE, _BLEU, _SHUFFLE = range(8)


class DivergenceDetected(RuntimeError):
    pass


@dataclass
class AdvConfig:
    rollouts: int = 32
    discount: float = 0.99
    rollout_update_rate: float = 0.9
    g_steps: int = 1
    d_steps: int = 5
    d_epochs_per_step: int = 3
    d_batches: int = 1
    total_adv_epochs: int = 100
    bleu_samples: int = 64

    def __post_init__(self):
        if self.rollouts < 1:
            raise ValueError("rollouts must be >= 1")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must be in (0, 1]")
        if not 0.0 <= self.rollout_update_rate <= 1.0:
            raise ValueError("rollout_update_rate must be in [0, 1]")


@dataclass
class RewardMatrix:
    values: np.ndarray  # discounted, [B, T]
    raw: np.ndarray  # before discounting, in [0, 1]


def compute_rewards(samples: np.ndarray, rollout: RolloutPolicy | ParamSet, disc_params: ParamSet,
                    disc_config: DiscriminatorConfig, rollouts: int = 32, discount: float = 0.99,
                    seed: int = 0, mode: StartMode = StartMode.UNCONDITIONAL) -> RewardMatrix:
    """Q(b, t): mean discriminator score over ``rollouts`` completions of y_1..y_t.

    The last column is the score of the sampled sequence itself. Column t
    (1-based) is then scaled by discount ** (t - 1).
    """
    params = rollout.params if isinstance(rollout, RolloutPolicy) else rollout
    samples = np.asarray(samples, dtype=np.int64)
    batch, length = samples.shape
    hs, cs = prefix_states(params, samples, mode)
    raw = np.empty((batch, length), dtype=np.float64)
    tiled = np.tile(samples, (rollouts, 1))
    for t in range(1, length):
        rng = np.random.default_rng([seed, t])
        completed = continue_sequences(
            params, tiled, t, np.tile(hs[:, t], (rollouts, 1)), np.tile(cs[:, t], (rollouts, 1)),
            lambda n: rng.random((rollouts, batch)).reshape(-1))
        scores = d_forward(completed, disc_params, disc_config)
        raw[:, t - 1] = scores.reshape(rollouts, batch).mean(axis=0, dtype=np.float64)
    raw[:, length - 1] = d_forward(samples, disc_params, disc_config)
    scale = discount ** np.arange(length, dtype=np.float64)
    return RewardMatrix(raw * scale, raw)


class DivergenceMonitor:
    """Flags reward collapse or a large BLEU drop from the pretraining peak."""

    def __init__(self, reward_floor: float = 0.02, patience: int = 10, bleu_drop: float = 0.3,
                 bleu_peak: float | None = None):
        self.reward_floor = reward_floor
        self.patience = patience
        self.bleu_drop = bleu_drop
        self.bleu_peak = bleu_peak
        self.low_epochs = 0

    def update(self, mean_reward: float, bleu: float | None = None) -> None:
        self.low_epochs = self.low_epochs + 1 if mean_reward < self.reward_floor else 0
        if self.low_epochs >= self.patience:
            raise DivergenceDetected(
                f"mean reward below {self.reward_floor} for {self.low_epochs} consecutive epochs")
        if bleu is not None and not math.isnan(bleu) and self.bleu_peak is not None:
            if self.bleu_peak - bleu > self.bleu_drop:
                raise DivergenceDetected(
                    f"BLEU-4 fell from {self.bleu_peak:.4f} to {bleu:.4f}")


def _real_batch(real: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    return real[rng.integers(len(real), size=size)]


def train_discriminator(disc: Discriminator, gen: Generator, real: np.ndarray, batch_size: int,
                        batches: int, epochs: int, seed: int) -> tuple[float, float]:
    """Alternate all-real and all-fake minibatches; returns mean (real, fake) losses."""
    rng = np.random.default_rng([seed, _D_REAL])
    fakes = gen.sample(batches * batch_size, seed=hash_seed(seed, _D_FAKE), start_pool=real)
    reals = _real_batch(real, batches * batch_size, rng)
    disc.rng = np.random.default_rng([seed, _D_DROP])
    loss_real, loss_fake = [], []
    for _ in range(epochs):
        for k in range(batches):
            sl = slice(k * batch_size, (k + 1) * batch_size)
            loss_real.append(disc.train_step(reals[sl], REAL))
            loss_fake.append(disc.train_step(fakes[sl], FAKE))
    return float(np.mean(loss_real)), float(np.mean(loss_fake))


def hash_seed(*parts: int) -> int:
    """Fold non-negative integers into one 64-bit seed."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def sample_bleu(gen: Generator, references: np.ndarray, n: int, seed: int, start_pool=None) -> float:
    samples = gen.sample(n, seed=seed, start_pool=start_pool if start_pool is not None else references)
    return bleu4(samples, references).bleu4


def adversarial_epoch(gen: Generator, rollout: RolloutPolicy, disc: Discriminator, real: np.ndarray,
                      config: AdvConfig, seed: int, validation: np.ndarray | None = None) -> dict:
    """One round of generator policy-gradient steps followed by discriminator updates."""
    real = np.asarray(real, dtype=np.int64)
    batch_size = gen.config.batch_size
    metrics = dict(mean_reward=float("nan"), g_loss=float("nan"), d_loss_real=float("nan"),
                   d_loss_fake=float("nan"), bleu4=float("nan"), score_real=float("nan"),
                   score_fake=float("nan"))
    rewards_seen, g_losses, fake_scores = [], [], []
    for step in range(config.g_steps):
        samples = gen.sample(batch_size, seed=hash_seed(seed, _G_SAMPLE, step), start_pool=real)
        rewards = compute_rewards(samples, rollout, disc.params, disc.config, config.rollouts,
                                  config.discount, hash_seed(seed, _REWARD, step), gen.mode)
        g_losses.append(gen.policy_gradient_step(samples, rewards.values))
        rewards_seen.append(rewards.raw[:, gen.mode.offset:].mean())
        fake_scores.append(rewards.raw[:, -1].mean())
        update_rollout(rollout, gen.params, config.rollout_update_rate)
    if rewards_seen:
        metrics["mean_reward"] = float(np.mean(rewards_seen))
        metrics["g_loss"] = float(np.mean(g_losses))

    d_real, d_fake = [], []
    for step in range(config.d_steps):
        lr_, lf_ = train_discriminator(disc, gen, real, batch_size, config.d_batches,
                                       config.d_epochs_per_step, hash_seed(seed, 100 + step))
        d_real.append(lr_)
        d_fake.append(lf_)
    if d_real:
        metrics["d_loss_real"] = float(np.mean(d_real))
        metrics["d_loss_fake"] = float(np.mean(d_fake))

    score_rng = np.random.default_rng([seed, _SCORE])
    metrics["score_real"] = float(disc.score(_real_batch(real, batch_size, score_rng)).mean())
    if not fake_scores:
        fake = gen.sample(batch_size, seed=hash_seed(seed, _SCORE), start_pool=real)
        fake_scores.append(disc.score(fake).mean())
    metrics["score_fake"] = float(np.mean(fake_scores))
    if validation is not None and len(validation) and config.bleu_samples:
        metrics["bleu4"] = sample_bleu(gen, validation, config.bleu_samples,
                                       hash_seed(seed, _BLEU), start_pool=real)
    return metrics


def pretrain_generator_epoch(gen: Generator, train: np.ndarray, seed: int) -> float:
    """One shuffled pass of teacher-forced NLL steps; returns the mean batch loss."""
    train = np.asarray(train, dtype=np.int64)
    order = np.random.default_rng([seed, _SHUFFLE]).permutation(len(train))
    bs = gen.config.batch_size
    losses = [gen.nll_pretrain_step(train[order[i:i + bs]]) for i in range(0, len(order), bs)]
    return float(np.mean(losses)) if losses else float("nan")
