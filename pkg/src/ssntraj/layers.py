"""Trainable layer primitives: affine maps, LSTM cells, multi-head attention.

All layers are thin parameter bundles plus pure functions over tape tensors,
so the same code path serves training (tracked) and evaluation (untracked).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError
from .tensor import Tensor

LSTM_GATE_NAMES = ("W_f", "W_i", "W_c", "W_o", "U_f", "U_i", "U_c", "U_o", "b_f", "b_i", "b_c", "b_o")


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, requires_grad=True) -> Tensor:
    """Weight init: uniform(-k, k) with k = 1/sqrt(fan_in)."""
    k = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-k, k, size=shape), requires_grad=requires_grad)


def zeros_init(shape: tuple[int, ...], requires_grad=True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


@dataclass
class LinearLayer:
    """Affine map y = W x + b with W (out, in) and b (out,)."""

    W: Tensor
    b: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, in_size: int, out_size: int) -> "LinearLayer":
        return cls(W=uniform_init(rng, (out_size, in_size), in_size), b=zeros_init((out_size,)))

    @property
    def in_size(self) -> int:
        return self.W.shape[1]

    @property
    def out_size(self) -> int:
        return self.W.shape[0]

    def param_count(self) -> int:
        return self.out_size * (self.in_size + 1)


def linear_forward(x: Tensor, layer: LinearLayer) -> Tensor:
    """Apply the affine map to each row of x (N, in) -> (N, out)."""
    if x.data.ndim != 2 or x.shape[1] != layer.in_size:
        raise DimensionError(f"linear_forward: input {x.shape} does not match W {layer.W.shape}")
    return T.add_bias(T.matmul(x, T.transpose(layer.W)), layer.b)


@dataclass
class LstmParams:
    """Gate weights for one LSTM cell: W_* (hidden, input), U_* (hidden, hidden), b_* (hidden,)."""

    W_f: Tensor
    W_i: Tensor
    W_c: Tensor
    W_o: Tensor
    U_f: Tensor
    U_i: Tensor
    U_c: Tensor
    U_o: Tensor
    b_f: Tensor
    b_i: Tensor
    b_c: Tensor
    b_o: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, input_size: int, hidden_size: int) -> "LstmParams":
        fields = {}
        for g in ("f", "i", "c", "o"):
            fields["W_" + g] = uniform_init(rng, (hidden_size, input_size), input_size)
        for g in ("f", "i", "c", "o"):
            fields["U_" + g] = uniform_init(rng, (hidden_size, hidden_size), hidden_size)
        for g in ("f", "i", "c", "o"):
            fields["b_" + g] = zeros_init((hidden_size,))
        # forget bias starts at +1 so early training does not flush the cell state
        fields["b_f"].data[:] = 1.0
        return cls(**fields)

    @property
    def input_size(self) -> int:
        return self.W_f.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.W_f.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in LSTM_GATE_NAMES}

    def param_count(self) -> int:
        h, n = self.hidden_size, self.input_size
        return 4 * (h * n + h * h + h)


def lstm_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmParams) -> tuple[Tensor, Tensor]:
    """One LSTM cell update from (h_prev, c_prev) given the input vector x_t.

    Gates use the logistic sigmoid; candidate and output squash with tanh:
    c_t = f * c_prev + i * c~, h_t = o * tanh(c_t).
    """
    h = p.hidden_size
    if x_t.shape != (p.input_size,):
        raise DimensionError(f"lstm_step: input {x_t.shape} does not match weights ({p.input_size},)")
    if h_prev.shape != (h,) or c_prev.shape != (h,):
        raise DimensionError(f"lstm_step: state shapes {h_prev.shape}/{c_prev.shape} do not match hidden ({h},)")

    xc = T.reshape(x_t, (p.input_size, 1))
    hc = T.reshape(h_prev, (h, 1))
    cc = T.reshape(c_prev, (h, 1))

    def gate(w, u, b):
        return T.add(T.add(T.matmul(w, xc), T.matmul(u, hc)), T.reshape(b, (h, 1)))

    f = T.sigmoid(gate(p.W_f, p.U_f, p.b_f))
    i = T.sigmoid(gate(p.W_i, p.U_i, p.b_i))
    ctil = T.tanh(gate(p.W_c, p.U_c, p.b_c))
    o = T.sigmoid(gate(p.W_o, p.U_o, p.b_o))
    c_t = T.add(T.mul(f, cc), T.mul(i, ctil))
    h_t = T.mul(o, T.tanh(c_t))
    return T.reshape(h_t, (h,)), T.reshape(c_t, (h,))


def lstm_last_output(xs: Tensor, p: LstmParams) -> Tensor:
    """Run the cell over the rows of xs (T, input) from a zero state and keep
    only the final hidden vector; intermediate states stay on the tape for BPTT."""
    if xs.data.ndim != 2:
        raise DimensionError(f"lstm_last_output: expected (T, input), got {xs.shape}")
    if xs.shape[0] < 1:
        raise UsageError("lstm_last_output: empty sequence")
    return T.lstm_sequence(xs, p.named())


@dataclass
class MhsaParams:
    """Projections for multi-head self-attention over C-wide tokens."""

    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    heads: int

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int, heads: int) -> "MhsaParams":
        if channels % heads != 0:
            raise DimensionError(f"mhsa: heads {heads} must divide channels {channels}")
        mats = {n: uniform_init(rng, (channels, channels), channels) for n in ("W_q", "W_k", "W_v", "W_o")}
        return cls(heads=heads, **mats)

    @property
    def channels(self) -> int:
        return self.W_q.shape[0]

    def param_count(self) -> int:
        return 4 * self.channels * self.channels

    def named(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in ("W_q", "W_k", "W_v", "W_o")}


def mhsa(tokens: Tensor, p: MhsaParams, kv_tokens: Tensor | None = None) -> Tensor:
    """Scaled dot-product multi-head attention.

    Queries come from ``tokens`` (N, C); keys and values from ``kv_tokens``
    (M, C), defaulting to the queries (plain self-attention). Per head:
    softmax(Q K^T / sqrt(d)) V, heads concatenated, then the output projection.
    """
    c = p.channels
    if tokens.data.ndim != 2 or tokens.shape[1] != c:
        raise DimensionError(f"mhsa: tokens {tokens.shape} do not match channels {c}")
    if tokens.shape[0] < 1:
        raise UsageError("mhsa: empty token set")
    if c % p.heads != 0:
        raise DimensionError(f"mhsa: heads {p.heads} must divide channels {c}")
    kv = tokens if kv_tokens is None else kv_tokens
    if kv.data.ndim != 2 or kv.shape[1] != c:
        raise DimensionError(f"mhsa: kv tokens {kv.shape} do not match channels {c}")
    if kv.shape[0] < 1:
        raise UsageError("mhsa: empty key/value token set")

    q = T.matmul(tokens, T.transpose(p.W_q))
    k = T.matmul(kv, T.transpose(p.W_k))
    v = T.matmul(kv, T.transpose(p.W_v))
    d = c // p.heads
    inv_sqrt_d = 1.0 / np.sqrt(d)
    head_outs = []
    for h in range(p.heads):
        # scaling Q (N x d) instead of the score matrix (N x M) saves work
        qh = T.scale(T.slice_axis(q, 1, h * d, (h + 1) * d), inv_sqrt_d)
        kh = T.slice_axis(k, 1, h * d, (h + 1) * d)
        vh = T.slice_axis(v, 1, h * d, (h + 1) * d)
        attn = T.softmax_rows(T.matmul(qh, T.transpose(kh)))
        head_outs.append(T.matmul(attn, vh))
    joined = head_outs[0] if p.heads == 1 else T.concat(head_outs, axis=1)
    return T.matmul(joined, T.transpose(p.W_o))


def attention_weights(tokens: np.ndarray, p: MhsaParams, kv_tokens: np.ndarray | None = None) -> list[np.ndarray]:
    """Per-head attention matrices for inspection/tests (numpy, no tape)."""
    kv = tokens if kv_tokens is None else kv_tokens
    q = tokens @ p.W_q.data.T
    k = kv @ p.W_k.data.T
    d = p.channels // p.heads
    mats = []
    for h in range(p.heads):
        s = (q[:, h * d:(h + 1) * d] @ k[:, h * d:(h + 1) * d].T) / np.sqrt(d)
        z = s - s.max(axis=1, keepdims=True)
        e = np.exp(z)
        mats.append(e / e.sum(axis=1, keepdims=True))
    return mats
