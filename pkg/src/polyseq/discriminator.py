"""CNN realness classifier over token sequences.

Embedding, a stack of valid-padding ReLU convolutions, max-over-time
pooling, dropout and a dense head. The head is either a 2-way softmax
trained with cross-entropy or a sigmoid trained with squared error.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import neural_core as nc
from .neural_core import ParamSet

REAL = 1
FAKE = 0
SCORE_CHUNK = 1024


class SequenceTooShort(ValueError):
    pass


class Head(str, enum.Enum):
    SOFTMAX_CE = "ce"
    SIGMOID_LS = "ls"


@dataclass
class DiscriminatorConfig:
    vocab_size: int
    embedding_dim: int = 32
    conv_layers: int = 5
    feature_maps: int = 400
    filter_width: int = 20
    head: Head = Head.SIGMOID_LS
    dropout: float = 0.25
    lr: float = 1e-4
    clip_norm: float = nc.CLIP_NORM
    init_scale: float = nc.INIT_SCALE

    def __post_init__(self):
        self.head = Head(self.head)
        if self.conv_layers < 1 or self.filter_width < 1 or self.feature_maps < 1:
            raise ValueError("discriminator needs at least one conv layer of positive size")

    @property
    def receptive_field(self) -> int:
        return self.conv_layers * (self.filter_width - 1) + 1


def init_params(config: DiscriminatorConfig, rng: np.random.Generator) -> ParamSet:
    ps = ParamSet({"emb": nc.uniform_init(rng, (config.vocab_size, config.embedding_dim), config.init_scale)})
    channels = config.embedding_dim
    for k in range(config.conv_layers):
        shape = (config.filter_width, channels, config.feature_maps)
        ps[f"conv{k}_w"] = nc.fan_in_init(rng, shape, config.filter_width * channels)
        ps[f"conv{k}_b"] = np.zeros(config.feature_maps, dtype=nc.DTYPE)
        channels = config.feature_maps
    outputs = 2 if config.head is Head.SOFTMAX_CE else 1
    ps["out_w"] = nc.uniform_init(rng, (channels, outputs), config.init_scale)
    ps["out_b"] = np.zeros(outputs, dtype=nc.DTYPE)
    return ps


def logits_forward(params: ParamSet, tokens: np.ndarray, config: DiscriminatorConfig,
                   train: bool = False, rng: np.random.Generator | None = None):
    tokens = np.asarray(tokens)
    if tokens.shape[1] < config.receptive_field:
        raise SequenceTooShort(
            f"sequence length {tokens.shape[1]} < receptive field {config.receptive_field}")
    x, emb_cache = nc.embedding_lookup(params["emb"], tokens)
    conv_caches = []
    for k in range(config.conv_layers):
        x, conv_cache = nc.conv1d(x, params[f"conv{k}_w"], params[f"conv{k}_b"])
        x, mask = nc.relu(x)
        conv_caches.append((conv_cache, mask))
    pooled, pool_cache = nc.max_over_time(x)
    dropped, drop_mask = nc.dropout(pooled, config.dropout, train, rng)
    logits, out_cache = nc.dense(dropped, params["out_w"], params["out_b"])
    return logits, (emb_cache, conv_caches, pool_cache, drop_mask, out_cache)


def logits_backward(dlogits: np.ndarray, cache, config: DiscriminatorConfig) -> dict[str, np.ndarray]:
    emb_cache, conv_caches, pool_cache, drop_mask, out_cache = cache
    grads = {}
    dx, grads["out_w"], grads["out_b"] = nc.dense_backward(dlogits, out_cache)
    dx = nc.dropout_backward(dx, drop_mask)
    dx = nc.max_over_time_backward(dx, pool_cache)
    for k in reversed(range(config.conv_layers)):
        conv_cache, mask = conv_caches[k]
        dx = nc.relu_backward(dx, mask)
        dx, grads[f"conv{k}_w"], grads[f"conv{k}_b"] = nc.conv1d_backward(dx, conv_cache)
    grads["emb"] = nc.embedding_backward(dx, emb_cache)
    return grads


def scores_from_logits(logits: np.ndarray, head: Head) -> np.ndarray:
    if Head(head) is Head.SOFTMAX_CE:
        return nc.softmax(logits)[:, REAL]
    return nc.sigmoid(logits[:, 0])


def d_forward(tokens: np.ndarray, params: ParamSet, config: DiscriminatorConfig,
              train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Realness scores in [0, 1], one per sequence."""
    tokens = np.asarray(tokens)
    if train:
        logits, _ = logits_forward(params, tokens, config, True, rng)
        return scores_from_logits(logits, config.head)
    out = [scores_from_logits(logits_forward(params, tokens[i:i + SCORE_CHUNK], config)[0], config.head)
           for i in range(0, len(tokens), SCORE_CHUNK)]
    return np.concatenate(out) if out else np.zeros(0, dtype=params.dtype)


def d_loss(params: ParamSet, tokens: np.ndarray, label: int, config: DiscriminatorConfig,
           train: bool = False, rng: np.random.Generator | None = None):
    """Loss of a single-label batch and its gradients."""
    logits, cache = logits_forward(params, tokens, config, train, rng)
    n = logits.shape[0]
    if config.head is Head.SOFTMAX_CE:
        loss, dlogits = nc.softmax_cross_entropy(logits, np.full(n, label))
    else:
        score = nc.sigmoid(logits[:, 0])
        target = np.full(n, float(label), dtype=score.dtype)
        loss, dscore = nc.least_squares_loss(score, target)
        dlogits = nc.sigmoid_backward(dscore, score)[:, None]
    return loss, logits_backward(dlogits, cache, config)


class Discriminator:
    def __init__(self, config: DiscriminatorConfig, params: ParamSet | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, np.random.default_rng(seed))
        self.rng = np.random.default_rng([seed, 1])

    def score(self, tokens: np.ndarray) -> np.ndarray:
        return d_forward(tokens, self.params, self.config)

    def train_step(self, batch: np.ndarray, label: int) -> float:
        """One Adam step toward ``label`` (REAL or FAKE); returns the pre-update loss."""
        if label not in (REAL, FAKE):
            raise ValueError("label must be REAL (1) or FAKE (0)")
        loss, grads = d_loss(self.params, batch, label, self.config, train=True, rng=self.rng)
        grads, _ = nc.clip_by_global_norm(grads, self.config.clip_norm)
        nc.adam_step(self.params, grads, self.config.lr)
        return loss
