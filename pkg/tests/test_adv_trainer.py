import math

import numpy as np
import pytest

from oracles import brute_force_rewards
from polyseq.adv_trainer import (AdvConfig, DivergenceDetected, DivergenceMonitor, adversarial_epoch,
                                 compute_rewards, hash_seed, train_discriminator)
from polyseq.discriminator import Discriminator, DiscriminatorConfig, init_params as d_init
from polyseq.generator import Generator, GeneratorConfig, RolloutPolicy, StartMode, init_params as g_init


def tiny_models(seed=0, vocab=4, seq_len=4):
    gcfg = GeneratorConfig(vocab_size=vocab, embedding_dim=3, hidden_size=6, seq_len=seq_len, batch_size=3)
    dcfg = DiscriminatorConfig(vocab_size=vocab, embedding_dim=3, conv_layers=1, feature_maps=5, filter_width=2)
    gp = g_init(gcfg, np.random.default_rng(seed))
    gp["out_w"] *= 30  # peaked but not degenerate next-token distributions
    dp = d_init(dcfg, np.random.default_rng(seed + 1))
    dp["out_w"] *= 40
    return gcfg, dcfg, gp, dp


def zero_disc(dcfg):
    dp = d_init(dcfg, np.random.default_rng(0))
    for k in dp:
        dp[k][...] = 0.0
    return dp


class TestRewards:
    def test_constant_discriminator(self):
        gcfg, dcfg, gp, _ = tiny_models()
        samples = np.random.default_rng(0).integers(0, 4, size=(3, 4))
        r = compute_rewards(samples, gp, zero_disc(dcfg), dcfg, rollouts=5, discount=0.9, seed=1)
        np.testing.assert_array_equal(r.raw, 0.5)
        np.testing.assert_allclose(r.values, np.tile(0.5 * 0.9 ** np.arange(4), (3, 1)), rtol=1e-12)

    def test_constant_undiscounted(self):
        gcfg, dcfg, gp, _ = tiny_models()
        samples = np.zeros((2, 4), dtype=int)
        r = compute_rewards(samples, gp, zero_disc(dcfg), dcfg, rollouts=3, discount=1.0, seed=2)
        assert np.unique(r.values).tolist() == [0.5]

    def test_terminal_column(self):
        from polyseq.discriminator import d_forward
        gcfg, dcfg, gp, dp = tiny_models()
        samples = np.random.default_rng(3).integers(0, 4, size=(5, 4))
        r = compute_rewards(samples, gp, dp, dcfg, rollouts=1, discount=1.0, seed=0)
        np.testing.assert_array_equal(r.values[:, -1], d_forward(samples, dp, dcfg))

    def test_matches_brute_force(self):
        gcfg, dcfg, gp, dp = tiny_models(seed=4)
        gp64 = gp.astype(np.float64)
        samples = np.random.default_rng(5).integers(0, 4, size=(3, 4))
        got = compute_rewards(samples, gp64, dp, dcfg, rollouts=8, discount=0.95, seed=11)
        want = brute_force_rewards(samples, gp64, dp, dcfg, rollouts=8, discount=0.95, seed=11)
        np.testing.assert_allclose(got.values, want, atol=1e-6)
        other = compute_rewards(samples, gp64, dp, dcfg, rollouts=8, discount=0.95, seed=12)
        assert np.abs(other.values[:, :-1] - got.values[:, :-1]).max() > 1e-3

    def test_bounded_and_deterministic(self):
        gcfg, dcfg, gp, dp = tiny_models(seed=6)
        samples = np.random.default_rng(7).integers(0, 4, size=(4, 4))
        a = compute_rewards(samples, RolloutPolicy(gp), dp, dcfg, rollouts=4, seed=3)
        b = compute_rewards(samples, RolloutPolicy(gp), dp, dcfg, rollouts=4, seed=3)
        np.testing.assert_array_equal(a.values, b.values)
        assert (a.raw >= 0).all() and (a.raw <= 1).all()

    def test_config_validation(self):
        for bad in (dict(rollouts=0), dict(discount=0.0), dict(discount=1.5), dict(rollout_update_rate=2.0)):
            with pytest.raises(ValueError):
                AdvConfig(**bad)


class TestMonitor:
    def test_reward_floor(self):
        mon = DivergenceMonitor(reward_floor=0.02, patience=3)
        mon.update(0.01)
        mon.update(0.01)
        mon.update(0.5)  # resets the streak
        mon.update(0.01)
        mon.update(0.01)
        with pytest.raises(DivergenceDetected):
            mon.update(0.01)

    def test_bleu_drop(self):
        mon = DivergenceMonitor(bleu_drop=0.3, bleu_peak=0.8)
        mon.update(0.5, 0.55)
        mon.update(0.5, float("nan"))
        with pytest.raises(DivergenceDetected):
            mon.update(0.5, 0.45)


def small_setup(seed=0, head="ls"):
    gcfg = GeneratorConfig(vocab_size=5, embedding_dim=4, hidden_size=8, seq_len=8, batch_size=4, adv_lr=1e-2)
    dcfg = DiscriminatorConfig(vocab_size=5, embedding_dim=4, conv_layers=2, feature_maps=6, filter_width=3,
                               head=head, lr=1e-3)
    real = np.tile(np.array([1, 2, 3, 4, 1, 2, 3, 4]), (16, 1))
    return Generator(gcfg, seed=seed), Discriminator(dcfg, seed=seed), real


def snapshot(*models):
    return [{k: v.copy() for k, v in m.params.items()} for m in models]


class TestEpoch:
    def test_no_op_epoch(self):
        gen, disc, real = small_setup()
        rollout = RolloutPolicy(gen.params)
        before = snapshot(gen, disc, rollout)
        m = adversarial_epoch(gen, rollout, disc, real, AdvConfig(rollouts=2, g_steps=0, d_steps=0), seed=0,
                              validation=real)
        for old, new in zip(before, snapshot(gen, disc, rollout)):
            for k in old:
                np.testing.assert_array_equal(old[k], new[k])
        assert set(m) == {"mean_reward", "g_loss", "d_loss_real", "d_loss_fake", "bleu4", "score_real",
                          "score_fake"}
        assert math.isfinite(m["score_fake"]) and math.isfinite(m["bleu4"])

    def test_bit_reproducible(self):
        results = []
        for _ in range(2):
            gen, disc, real = small_setup(seed=1)
            rollout = RolloutPolicy(gen.params)
            m = adversarial_epoch(gen, rollout, disc, real, AdvConfig(rollouts=3, d_steps=2, d_epochs_per_step=2),
                                  seed=5, validation=real)
            results.append((m, snapshot(gen, disc, rollout)))
        assert results[0][0] == results[1][0]
        for a, b in zip(results[0][1], results[1][1]):
            for k in a:
                np.testing.assert_array_equal(a[k], b[k])

    def test_epoch_moves_everything(self):
        gen, disc, real = small_setup()
        rollout = RolloutPolicy(gen.params)
        before = snapshot(gen, disc, rollout)
        adversarial_epoch(gen, rollout, disc, real, AdvConfig(rollouts=2, d_steps=1, d_epochs_per_step=1), seed=0)
        for old, new in zip(before, snapshot(gen, disc, rollout)):
            assert any(not np.array_equal(old[k], new[k]) for k in old)

    @pytest.mark.parametrize("head", ["ls", "ce"])
    def test_separable_trajectory_logged(self, head):
        gen, disc, real = small_setup(head=head)
        rollout = RolloutPolicy(gen.params)
        cfg = AdvConfig(rollouts=2, d_steps=1, d_epochs_per_step=1)
        trajectory = [adversarial_epoch(gen, rollout, disc, real, cfg, seed=hash_seed(9, e))["score_fake"]
                      for e in range(20)]
        assert len(trajectory) == 20
        assert all(math.isfinite(s) and 0.0 <= s <= 1.0 for s in trajectory)

    def test_conditional_rewards_skip_given_token(self):
        gen, disc, real = small_setup()
        gen.mode = StartMode.CONDITIONAL
        rollout = RolloutPolicy(gen.params)
        m = adversarial_epoch(gen, rollout, disc, real, AdvConfig(rollouts=2, d_steps=0), seed=0)
        assert 0.0 <= m["mean_reward"] <= 1.0


def test_train_discriminator_losses():
    gen, disc, real = small_setup()
    lr_, lf_ = train_discriminator(disc, gen, real, batch_size=4, batches=2, epochs=2, seed=0)
    assert lr_ >= 0 and lf_ >= 0


def test_hash_seed():
    assert hash_seed(1, 2) == hash_seed(1, 2)
    assert hash_seed(1, 2) != hash_seed(2, 1)
