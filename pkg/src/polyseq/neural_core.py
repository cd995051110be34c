"""Layers with explicit backward passes, Adam, and checkpoint I/O.

Arrays are plain numpy arrays. Every op computes in the dtype of its
inputs, so casting a ParamSet to float64 (``ParamSet.astype``) gives the
64-bit accumulation mode used for sharp gradient checks. Forward functions
return ``(output, cache)``; the matching ``*_backward`` takes the upstream
gradient and the cache.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

DTYPE = np.float32
CLIP_NORM = 5.0
INIT_SCALE = 0.08


class ShapeMismatch(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamSet:
    """Named weight tensors plus Adam moments and step counter."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self.tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        for name, value in (tensors or {}).items():
            self[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value)
        self.tensors[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __contains__(self, name) -> bool:
        return name in self.tensors

    def keys(self):
        return self.tensors.keys()

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def num_values(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, value in self.tensors.items():
            out.tensors[name] = value.copy()
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        out.step = self.step
        return out

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for name, value in self.tensors.items():
            out.tensors[name] = value.astype(dtype)
            out.m[name] = self.m[name].astype(dtype)
            out.v[name] = self.v[name].astype(dtype)
        out.step = self.step
        return out

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(value) for name, value in self.tensors.items()}

    def check_compatible(self, other: "ParamSet") -> None:
        if list(self.keys()) != list(other.keys()):
            raise ShapeMismatch(f"parameter names differ: {list(self.keys())} vs {list(other.keys())}")
        for name in self:
            if self[name].shape != other[name].shape:
                raise ShapeMismatch(f"{name}: {self[name].shape} vs {other[name].shape}")


def uniform_init(rng: np.random.Generator, shape, scale: float = INIT_SCALE, dtype=DTYPE) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape).astype(dtype)


def fan_in_init(rng: np.random.Generator, shape, fan_in: int, dtype=DTYPE) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: no overflow, one transcendental
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    return dout * out * (1.0 - out)


def relu(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def dropout(x: np.ndarray, rate: float, train: bool, rng: np.random.Generator | None = None):
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not train or rate <= 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return x * mask, mask


def dropout_backward(dout: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return dout if mask is None else dout * mask


# ---------------------------------------------------------------------------
# embedding / dense
# ---------------------------------------------------------------------------

def embedding_lookup(table: np.ndarray, ids: np.ndarray):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id outside [0, {table.shape[0]})")
    return table[ids], (ids, table.shape)


def embedding_backward(dout: np.ndarray, cache) -> np.ndarray:
    ids, shape = cache
    dtable = np.zeros(shape, dtype=dout.dtype)
    np.add.at(dtable, ids.reshape(-1), dout.reshape(-1, shape[1]))
    return dtable


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"dense: x {x.shape}, w {w.shape}, b {b.shape}")
    return x @ w + b, (x, w)


def dense_backward(dout: np.ndarray, cache):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ w.T, x2.T @ d2, d2.sum(axis=0)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

def _check_lstm(x, h, c, w, u, b):
    hidden = h.shape[-1]
    if (w.shape != (x.shape[-1], 4 * hidden) or u.shape != (hidden, 4 * hidden)
            or b.shape != (4 * hidden,) or c.shape != h.shape or x.shape[0] != h.shape[0]):
        raise ShapeMismatch(f"lstm: x {x.shape}, h {h.shape}, c {c.shape}, "
                            f"W {w.shape}, U {u.shape}, b {b.shape}")


def _gates(z: np.ndarray, c: np.ndarray):
    hidden = c.shape[-1]
    ifo = sigmoid(z[:, :3 * hidden])
    i, f, o = ifo[:, :hidden], ifo[:, hidden:2 * hidden], ifo[:, 2 * hidden:]
    g = np.tanh(z[:, 3 * hidden:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return i, f, o, g, c_new, tc


def lstm_step(x, h, c, w, u, b):
    """One LSTM step. Gates are packed [input, forget, output, candidate]."""
    _check_lstm(x, h, c, w, u, b)
    z = x @ w + h @ u + b
    i, f, o, g, c_new, tc = _gates(z, c)
    h_new = o * tc
    return h_new, c_new, (x, h, c, w, u, i, f, o, g, tc)


def lstm_cell(z, c):
    """Gate nonlinearities for precomputed pre-activations z; returns (h, c)."""
    _, _, o, _, c_new, tc = _gates(z, c)
    return o * tc, c_new


def _gate_grads(dh, dc, c, i, f, o, g, tc):
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * c * f * (1.0 - f),
        dh * tc * o * (1.0 - o),
        dc * i * (1.0 - g * g),
    ], axis=1)
    return dz, dc * f


def lstm_step_backward(dh, dc, cache):
    """Returns (dx, dh_prev, dc_prev, dW, dU, db)."""
    x, h, c, w, u, i, f, o, g, tc = cache
    dz, dc_prev = _gate_grads(dh, dc, c, i, f, o, g, tc)
    return dz @ w.T, dz @ u.T, dc_prev, x.T @ dz, h.T @ dz, dz.sum(axis=0)


def lstm_sequence(xs, w, u, b, h0=None, c0=None):
    """Run the cell over ``xs`` [B, L, E]; returns all hidden states [B, L, H]."""
    batch, length, _ = xs.shape
    hidden = u.shape[0]
    h = np.zeros((batch, hidden), dtype=xs.dtype) if h0 is None else h0
    c = np.zeros((batch, hidden), dtype=xs.dtype) if c0 is None else c0
    _check_lstm(xs[:, 0] if length else np.zeros((batch, w.shape[0]), xs.dtype), h, c, w, u, b)
    xw = xs @ w + b
    hs = np.empty((batch, length, hidden), dtype=xs.dtype)
    steps = []
    for t in range(length):
        z = xw[:, t] + h @ u
        i, f, o, g, c_new, tc = _gates(z, c)
        steps.append((h, c, i, f, o, g, tc))
        h = o * tc
        c = c_new
        hs[:, t] = h
    return hs, (xs, w, u, steps)


def lstm_sequence_backward(dhs, cache):
    """Backprop through time; returns (dxs, dW, dU, db)."""
    xs, w, u, steps = cache
    batch, length, _ = xs.shape
    hidden = u.shape[0]
    dz_all = np.empty((batch, length, 4 * hidden), dtype=xs.dtype)
    h_prev = np.empty((batch, length, hidden), dtype=xs.dtype)
    dh_next = np.zeros((batch, hidden), dtype=xs.dtype)
    dc_next = np.zeros((batch, hidden), dtype=xs.dtype)
    for t in reversed(range(length)):
        h, c, i, f, o, g, tc = steps[t]
        dz, dc_next = _gate_grads(dhs[:, t] + dh_next, dc_next, c, i, f, o, g, tc)
        dz_all[:, t] = dz
        h_prev[:, t] = h
        dh_next = dz @ u.T
    flat_dz = dz_all.reshape(-1, 4 * hidden)
    dw = xs.reshape(-1, xs.shape[-1]).T @ flat_dz
    du = h_prev.reshape(-1, hidden).T @ flat_dz
    return dz_all @ w.T, dw, du, flat_dz.sum(axis=0)


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------

def conv1d(x, filters, bias):
    """Valid 1-D convolution: x [B, L, E], filters [W, E, F] -> [B, L-W+1, F]."""
    width, channels, maps = filters.shape
    if x.ndim != 3 or x.shape[2] != channels or bias.shape != (maps,):
        raise ShapeMismatch(f"conv1d: x {x.shape}, filters {filters.shape}, bias {bias.shape}")
    if x.shape[1] < width:
        raise ShapeMismatch(f"conv1d: length {x.shape[1]} shorter than filter width {width}")
    out_len = x.shape[1] - width + 1
    cols = np.lib.stride_tricks.sliding_window_view(x, width, axis=1)  # [B, L', E, W]
    cols = cols.transpose(0, 1, 3, 2).reshape(x.shape[0] * out_len, width * channels)
    # one 2-D GEMM; stacked matmul skips BLAS
    y = (cols @ filters.reshape(width * channels, maps) + bias).reshape(x.shape[0], out_len, maps)
    return y, (cols, filters, x.shape)


def conv1d_backward(dy, cache):
    """Returns (dx, dfilters, dbias)."""
    cols, filters, x_shape = cache
    width, channels, maps = filters.shape
    flat_dy = dy.reshape(-1, maps)
    dfilters = (cols.T @ flat_dy).reshape(filters.shape)
    dcols = (flat_dy @ filters.reshape(width * channels, maps).T).reshape(
        dy.shape[0], dy.shape[1], width, channels)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    out_len = dy.shape[1]
    for k in range(width):
        dx[:, k:k + out_len] += dcols[:, :, k]
    return dx, dfilters, flat_dy.sum(axis=0)


def max_over_time(x):
    """[B, L, F] -> [B, F]; the first maximum wins ties."""
    idx = x.argmax(axis=1)
    return np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0], (idx, x.shape)


def max_over_time_backward(dout, cache):
    idx, shape = cache
    dx = np.zeros(shape, dtype=dout.dtype)
    np.put_along_axis(dx, idx[:, None, :], dout[:, None, :], axis=1)
    return dx


# ---------------------------------------------------------------------------
# heads and losses
# ---------------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, targets, weights=None, denom=None):
    """Weighted mean of -log softmax(logits)[target] over rows.

    ``logits`` [N, V], ``targets`` [N]. The sum is divided by ``denom``
    (default N). Returns (loss, dlogits).
    """
    targets = np.asarray(targets)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ShapeMismatch(f"targets {targets.shape} for logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise IndexError("target id out of range")
    logp = log_softmax(logits)
    picked = -logp[np.arange(n), targets]
    w = np.ones(n, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    denom = n if denom is None else denom
    loss = float((w * picked).sum() / denom) if n else 0.0
    dlogits = np.exp(logp)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits *= (w / logits.dtype.type(denom if denom else 1))[:, None]
    return loss, dlogits


def least_squares_loss(scores, targets):
    """Mean squared error; returns (loss, dscores)."""
    diff = scores - targets
    n = diff.size
    return float((diff * diff).sum() / n), (2.0 / n) * diff


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float = CLIP_NORM):
    """Rescale all gradients when their joint L2 norm exceeds ``max_norm``."""
    norm = global_norm(grads)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * g.dtype.type(scale) for k, g in grads.items()}
    return grads, norm


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamSet:
    """Bias-corrected Adam update, in place. Nothing changes if a gradient is non-finite."""
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeMismatch(f"gradient for {name}: {g.shape} vs {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    params.step += 1
    t = params.step
    corr1 = 1.0 - beta1 ** t
    corr2 = 1.0 - beta2 ** t
    for name, w in params.items():
        g = grads[name]
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr:
            w -= (lr * (m / corr1) / (np.sqrt(v / corr2) + eps)).astype(w.dtype)
    return params


def finite_diff_check(loss_fn: Callable[[ParamSet], tuple[float, Mapping[str, np.ndarray]]],
                      params: ParamSet, epsilon: float = 1e-3, fraction: float = 0.01,
                      min_coords: int = 50, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` returns ``(loss, grads)`` and must be deterministic.
    The analytic gradient is taken at the dtype of ``params``; the central
    differences always run on a float64 copy, since float32 losses resolve
    only ~1e-7 and would drown small coordinates in rounding noise. A random
    ``fraction`` of coordinates (at least ``min_coords``) is checked.
    """
    _, grads = loss_fn(params)
    grads = {k: np.asarray(v, dtype=np.float64) for k, v in grads.items()}
    probe = params.astype(np.float64)
    coords = [(name, i) for name in probe for i in range(probe[name].size)]
    rng = np.random.default_rng(seed)
    count = min(len(coords), max(min_coords, int(np.ceil(fraction * len(coords)))))
    picks = rng.choice(len(coords), size=count, replace=False)
    worst = 0.0
    for k in picks:
        name, i = coords[k]
        flat = probe[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + epsilon
        up = float(loss_fn(probe)[0])
        flat[i] = orig - epsilon
        down = float(loss_fn(probe)[0])
        flat[i] = orig
        numeric = (up - down) / (2.0 * epsilon)
        analytic = float(grads[name].reshape(-1)[i])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"PSGN"
FORMAT_VERSION = 1
ADAM_M_SUFFIX = "@adam_m"
ADAM_V_SUFFIX = "@adam_v"


def save_checkpoint(path, paramsets: Mapping[str, ParamSet], meta: Mapping | None = None) -> None:
    """Write ``{prefix: ParamSet}`` with Adam state under suffixed names.

    Layout: magic, u16 version, u32 header length, JSON header, then
    records of (u16 name length, name, u8 rank, u32 dims..., f32 LE data).
    """
    header = dict(meta or {})
    header["adam_steps"] = {prefix: ps.step for prefix, ps in paramsets.items()}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray(MAGIC + struct.pack("<HI", FORMAT_VERSION, len(blob)) + blob)
    for prefix, ps in paramsets.items():
        for name, value in ps.items():
            for suffix, arr in (("", value), (ADAM_M_SUFFIX, ps.m[name]), (ADAM_V_SUFFIX, ps.v[name])):
                full = f"{prefix}/{name}{suffix}".encode("utf-8")
                out += struct.pack("<H", len(full)) + full
                out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
                out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, ParamSet]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(data[10:10 + hlen].decode("utf-8"))
    pos = 10 + hlen
    raw: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack("<H", data[pos:pos + 2])
            name = data[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            rank = data[pos]
            dims = struct.unpack(f"<{rank}I", data[pos + 1:pos + 1 + 4 * rank])
            pos += 1 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            raw[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims).astype(DTYPE)
            pos += 4 * size
    except (struct.error, ValueError, IndexError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt record") from exc
    sets: dict[str, ParamSet] = {}
    for full, arr in raw.items():
        if full.endswith((ADAM_M_SUFFIX, ADAM_V_SUFFIX)):
            continue
        prefix, name = full.split("/", 1)
        ps = sets.setdefault(prefix, ParamSet())
        ps[name] = arr
        ps.m[name] = raw.get(full + ADAM_M_SUFFIX, np.zeros_like(arr))
        ps.v[name] = raw.get(full + ADAM_V_SUFFIX, np.zeros_like(arr))
    for prefix, step in meta.get("adam_steps", {}).items():
        if prefix in sets:
            sets[prefix].step = int(step)
    return meta, sets
