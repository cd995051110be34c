"""LSTM generator: NLL pretraining, sampling, rollouts and policy gradient.

Position 0 of every sequence is either generated from the zero start token
(unconditional) or copied from a real sequence (conditional). The input at
position j > 0 is the token at j - 1; in conditional mode position 0 is
given and never scored.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import neural_core as nc
from .neural_core import ParamSet

START_TOKEN = 0


class GeneratorError(ValueError):
    pass


class OutOfRangeToken(GeneratorError):
    pass


class StartMode(str, enum.Enum):
    UNCONDITIONAL = "uncond"
    CONDITIONAL = "cond"

    @property
    def offset(self) -> int:
        return 0 if self is StartMode.UNCONDITIONAL else 1


@dataclass
class GeneratorConfig:
    vocab_size: int
    embedding_dim: int = 32
    hidden_size: int = 512
    seq_len: int = 100
    batch_size: int = 32
    pretrain_lr: float = 1e-3
    adv_lr: float = 1e-2
    clip_norm: float = nc.CLIP_NORM
    init_scale: float = nc.INIT_SCALE

    def __post_init__(self):
        if min(self.vocab_size, self.embedding_dim, self.hidden_size, self.batch_size) < 1:
            raise ValueError("generator sizes must be positive")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")


def init_params(config: GeneratorConfig, rng: np.random.Generator) -> ParamSet:
    v, e, h = config.vocab_size, config.embedding_dim, config.hidden_size
    s = config.init_scale
    bias = np.zeros(4 * h, dtype=nc.DTYPE)
    bias[h:2 * h] = 1.0  # forget gate
    return ParamSet({
        "emb": nc.uniform_init(rng, (v, e), s),
        "lstm_w": nc.uniform_init(rng, (e, 4 * h), s),
        "lstm_u": nc.uniform_init(rng, (h, 4 * h), s),
        "lstm_b": bias,
        "out_w": nc.uniform_init(rng, (h, v), s),
        "out_b": np.zeros(v, dtype=nc.DTYPE),
    })


def _check_tokens(seqs: np.ndarray, vocab_size: int) -> None:
    if seqs.size and (seqs.min() < 0 or seqs.max() >= vocab_size):
        raise OutOfRangeToken(f"token ids must lie in [0, {vocab_size})")


def shifted_inputs(seqs: np.ndarray) -> np.ndarray:
    """Teacher-forcing inputs: the start token followed by seqs[:, :-1]."""
    inputs = np.empty_like(seqs)
    inputs[:, 0] = START_TOKEN
    inputs[:, 1:] = seqs[:, :-1]
    return inputs


def forward(params: ParamSet, inputs: np.ndarray, h0=None, c0=None):
    """Teacher-forced logits [B, L, V] for input tokens [B, L]."""
    xs, emb_cache = nc.embedding_lookup(params["emb"], inputs)
    hs, lstm_cache = nc.lstm_sequence(xs, params["lstm_w"], params["lstm_u"], params["lstm_b"], h0, c0)
    logits, out_cache = nc.dense(hs, params["out_w"], params["out_b"])
    return logits, (emb_cache, lstm_cache, out_cache)


def backward(dlogits: np.ndarray, cache) -> dict[str, np.ndarray]:
    emb_cache, lstm_cache, out_cache = cache
    dhs, dw_out, db_out = nc.dense_backward(dlogits, out_cache)
    dxs, dw, du, db = nc.lstm_sequence_backward(dhs, lstm_cache)
    return {"emb": nc.embedding_backward(dxs, emb_cache), "lstm_w": dw, "lstm_u": du,
            "lstm_b": db, "out_w": dw_out, "out_b": db_out}


def weighted_nll(params: ParamSet, seqs: np.ndarray, mode: StartMode = StartMode.UNCONDITIONAL,
                 weights: np.ndarray | None = None):
    """Mean over scored positions of -w * log G(y_t | y_<t), and its gradients."""
    seqs = np.asarray(seqs)
    vocab = params["out_b"].shape[0]
    _check_tokens(seqs, vocab)
    off = StartMode(mode).offset
    inputs = shifted_inputs(seqs)[:, off:]
    targets = seqs[:, off:]
    logits, cache = forward(params, inputs)
    w = None if weights is None else np.asarray(weights)[:, off:].reshape(-1)
    loss, dlogits = nc.softmax_cross_entropy(logits.reshape(-1, vocab), targets.reshape(-1), w)
    return loss, backward(dlogits.reshape(logits.shape), cache)


def sequence_nll(params: ParamSet, seqs: np.ndarray, mode: StartMode = StartMode.UNCONDITIONAL) -> float:
    """Teacher-forced mean NLL in nats per scored token; no gradients."""
    seqs = np.asarray(seqs)
    vocab = params["out_b"].shape[0]
    _check_tokens(seqs, vocab)
    off = StartMode(mode).offset
    logits, _ = forward(params, shifted_inputs(seqs)[:, off:])
    logp = nc.log_softmax(logits)
    targets = seqs[:, off:]
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    return float(-picked.mean(dtype=np.float64))


def _sample_tokens(logits: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw from softmax(logits) rows using uniforms ``u``."""
    probs = nc.softmax(logits.astype(np.float64))
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=-1)
    return np.minimum(idx, logits.shape[-1] - 1)


def _input_table(params: ParamSet) -> np.ndarray:
    # emb[tok] @ W + b for every token, so a sampling step is one gather
    return params["emb"] @ params["lstm_w"] + params["lstm_b"]


def _step(params: ParamSet, tokens: np.ndarray, h, c, table=None):
    if table is None:
        table = _input_table(params)
    h, c = nc.lstm_cell(table[tokens] + h @ params["lstm_u"], c)
    return h @ params["out_w"] + params["out_b"], h, c


def prefix_states(params: ParamSet, seqs: np.ndarray, mode: StartMode):
    """Hidden/cell states before each position: arrays [B, T+1, H].

    ``hs[:, j]`` is the state that, fed the token seqs[:, j-1], predicts
    position j.
    """
    off = StartMode(mode).offset
    batch, length = seqs.shape
    hidden = params["lstm_u"].shape[0]
    dtype = params["emb"].dtype
    hs = np.zeros((batch, length + 1, hidden), dtype=dtype)
    cs = np.zeros_like(hs)
    inputs = shifted_inputs(seqs)
    h = np.zeros((batch, hidden), dtype=dtype)
    c = np.zeros_like(h)
    xs, _ = nc.embedding_lookup(params["emb"], inputs)
    for j in range(off, length):
        h, c, _ = nc.lstm_step(xs[:, j], h, c, params["lstm_w"], params["lstm_u"], params["lstm_b"])
        hs[:, j + 1] = h
        cs[:, j + 1] = c
    return hs, cs


def continue_sequences(params: ParamSet, seqs: np.ndarray, t: int, h, c,
                       draw) -> np.ndarray:
    """Overwrite positions t.. of ``seqs`` by sampling.

    ``h, c`` are the states before consuming seqs[:, t-1] (or the zero
    state for t == 0). ``draw(n)`` returns n uniforms per step.
    """
    out = seqs.copy()
    length = out.shape[1]
    table = _input_table(params)
    for j in range(t, length):
        tokens = out[:, j - 1] if j > 0 else np.full(out.shape[0], START_TOKEN)
        logits, h, c = _step(params, tokens, h, c, table)
        out[:, j] = _sample_tokens(logits, draw(out.shape[0]))
    return out


def start_tokens(n: int, mode: StartMode, rng: np.random.Generator, start_pool=None) -> np.ndarray:
    if StartMode(mode) is StartMode.UNCONDITIONAL:
        return np.full(n, START_TOKEN, dtype=np.int64)
    if start_pool is None or len(start_pool) == 0:
        raise GeneratorError("conditional sampling needs a pool of real sequences")
    pool = np.asarray(start_pool)
    return pool[rng.integers(len(pool), size=n), 0].astype(np.int64)


def sample_sequences(n: int, params: ParamSet, seq_len: int, mode: StartMode = StartMode.UNCONDITIONAL,
                     seed: int = 0, start_pool=None) -> np.ndarray:
    """Autoregressive multinomial samples at temperature 1; [n, seq_len] int64."""
    rng = np.random.default_rng(seed)
    mode = StartMode(mode)
    seqs = np.zeros((n, seq_len), dtype=np.int64)
    if n == 0:
        return seqs
    first = start_tokens(n, mode, rng, start_pool)
    hidden = params["lstm_u"].shape[0]
    h = np.zeros((n, hidden), dtype=params["emb"].dtype)
    c = np.zeros_like(h)
    if mode is StartMode.CONDITIONAL:
        seqs[:, 0] = first
    return continue_sequences(params, seqs, mode.offset, h, c, rng.random)


def rollout_complete(prefix: np.ndarray, params: ParamSet, seq_len: int, seed: int = 0,
                     mode: StartMode = StartMode.UNCONDITIONAL) -> np.ndarray:
    """Keep ``prefix`` [B, t] verbatim and sample the remaining positions."""
    prefix = np.atleast_2d(np.asarray(prefix, dtype=np.int64))
    t = prefix.shape[1]
    if not 1 <= t <= seq_len:
        raise GeneratorError(f"prefix length must be in [1, {seq_len}], got {t}")
    seqs = np.zeros((prefix.shape[0], seq_len), dtype=np.int64)
    seqs[:, :t] = prefix
    if t == seq_len:
        return seqs
    hs, cs = prefix_states(params, seqs[:, :t], mode)
    rng = np.random.default_rng(seed)
    return continue_sequences(params, seqs, t, hs[:, t], cs[:, t], rng.random)


class RolloutPolicy:
    """Slowly blended copy of the generator weights used for rollouts."""

    def __init__(self, params: ParamSet):
        self.params = ParamSet({k: v.copy() for k, v in params.items()})

    def update(self, generator_params: ParamSet, rate: float = 0.9) -> "RolloutPolicy":
        return update_rollout(self, generator_params, rate)


def update_rollout(rollout: RolloutPolicy, generator_params: ParamSet, rate: float = 0.9) -> RolloutPolicy:
    """rollout <- rate * rollout + (1 - rate) * generator, per tensor."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    rollout.params.check_compatible(generator_params)
    for name, w in rollout.params.items():
        g = generator_params[name]
        if rate == 0.0:
            w[...] = g
        elif rate != 1.0:
            w[...] = rate * w + (1.0 - rate) * g
    return rollout


class Generator:
    def __init__(self, config: GeneratorConfig, params: ParamSet | None = None, seed: int = 0,
                 mode: StartMode = StartMode.UNCONDITIONAL):
        self.config = config
        self.mode = StartMode(mode)
        self.params = params if params is not None else init_params(config, np.random.default_rng(seed))

    def _update(self, grads, lr):
        grads, norm = nc.clip_by_global_norm(grads, self.config.clip_norm)
        nc.adam_step(self.params, grads, lr)
        return norm

    def nll_pretrain_step(self, batch: np.ndarray) -> float:
        """One teacher-forced Adam step; returns the pre-update mean NLL."""
        loss, grads = weighted_nll(self.params, batch, self.mode)
        self._update(grads, self.config.pretrain_lr)
        return loss

    def policy_gradient_step(self, sequences: np.ndarray, rewards: np.ndarray) -> float:
        """Ascend mean_t log G(y_t | y_<t) * Q(t); returns the surrogate loss."""
        rewards = np.asarray(rewards, dtype=self.params.dtype)
        if rewards.shape != np.shape(sequences):
            raise GeneratorError(f"rewards {rewards.shape} do not match sequences {np.shape(sequences)}")
        if not np.all(np.isfinite(rewards)):
            raise nc.NonFiniteGradient("non-finite rewards")
        loss, grads = weighted_nll(self.params, sequences, self.mode, rewards)
        self._update(grads, self.config.adv_lr)
        return loss

    def sample(self, n: int, seed: int, start_pool=None) -> np.ndarray:
        return sample_sequences(n, self.params, self.config.seq_len, self.mode, seed, start_pool)

    def nll(self, seqs: np.ndarray) -> float:
        return sequence_nll(self.params, seqs, self.mode)
