"""Dense tensors with reverse-mode automatic differentiation.

Values are contiguous row-major float64 numpy buffers. Every operation that
sees a tracked input appends a node to an implicit tape (parent links plus a
backward closure); ``backward`` on a scalar sink replays the tape in reverse
topological order. Gradients accumulate across repeated backward calls until
``zero_grad`` is called.

Broadcasting is deliberately absent except for bias addition over the leading
row axis (``add_bias``); every other shape mismatch raises ``DimensionError``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import DimensionError, UsageError
from .geometry import wrap_angle as wrap_angle_np

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked on the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype == np.float64 and data.flags.c_contiguous:
            self.data = data
        else:
            self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        """Populate ``grad`` on every tracked ancestor of this scalar sink.

        Repeated calls accumulate; call ``zero_grad`` on the leaves (or use
        ``ParamStore.zero_grad``) between optimization steps.
        """
        if self.size != 1:
            raise UsageError(f"backward() requires a scalar sink, got shape {self.shape}")
        if not self.requires_grad:
            return

        order = _toposort(self)
        adjoint: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: own the buffer so callers may update it in place
                node.grad = np.array(g) if node.grad is None else node.grad + g
                continue
            # interior node: retain the adjoint without copying
            node.grad = g if node.grad is None else node.grad + g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = adjoint.get(id(parent))
                # out-of-place accumulation: closures may hand the same array
                # to several parents (e.g. add), so stored adjoints are never
                # mutated in place
                adjoint[id(parent)] = pg if acc is None else acc + pg


def _toposort(sink: Tensor) -> list[Tensor]:
    """Reverse topological order of the tape above ``sink`` (iterative DFS)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(sink, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _track(out: Tensor, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return _track(out, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _track(out, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _track(out, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    return _track(out, (a,), lambda g: (g * c,), "scale")


def add_bias(m: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias add: (N, C) + (C,). The only broadcast in the kernel."""
    if m.data.ndim != 2 or b.data.ndim != 1 or m.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: shapes {m.shape} and {b.shape} are not (N,C)+(C,)")
    out = Tensor(m.data + b.data)
    return _track(out, (m, b), lambda g: (g, g.sum(axis=0)), "add_bias")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows, so both assembled branches are safe
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    out = Tensor(s)
    return _track(out, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t)
    return _track(out, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def _gelu_np(x: np.ndarray) -> np.ndarray:
    # exact Gaussian-CDF form x * Phi(x)
    return x * ndtr(x)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    out = Tensor(_gelu_np(x))

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (ndtr(x) + x * pdf),)

    return _track(out, (a,), backward, "gelu")


def wrap_angle(a: Tensor) -> Tensor:
    """Wrap every entry to (-pi, pi]. Gradient passes through unchanged."""
    out = Tensor(wrap_angle_np(a.data))
    return _track(out, (a,), lambda g: (g,), "wrap_angle")


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    out = Tensor(a.data.reshape(shape))
    return _track(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    out = Tensor(a.data.T)
    return _track(out, (a,), lambda g: (np.ascontiguousarray(g.T),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("concat: empty tensor list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = [0]
    for s in sizes:
        offsets.append(offsets[-1] + s)
    ndim = out.data.ndim

    def backward(g):
        grads = []
        for i in range(len(sizes)):
            idx = [slice(None)] * ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _track(out, tuple(tensors), backward, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _track(out, (a,), backward, "slice")


def pad2d(a: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the two trailing spatial axes of a (C, H, W) tensor."""
    if a.data.ndim != 3:
        raise DimensionError(f"pad2d: expected (C,H,W), got {a.shape}")
    out = Tensor(np.pad(a.data, ((0, 0), (top, bottom), (left, right))))
    h, w = a.shape[1], a.shape[2]

    def backward(g):
        return (np.ascontiguousarray(g[:, top:top + h, left:left + w]),)

    return _track(out, (a,), backward, "pad2d")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return _track(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(a.data.mean())
    return _track(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean")


def avgpool2d(a: Tensor, window: int, stride: int) -> Tensor:
    """Mean pooling over (window x window) patches of a (C, H, W) tensor."""
    if a.data.ndim != 3:
        raise DimensionError(f"avgpool2d: expected (C,H,W), got {a.shape}")
    c, h, w = a.shape
    if window > h or window > w:
        raise DimensionError(f"avgpool2d: window {window} exceeds input {h}x{w}")
    if stride < 1:
        raise DimensionError(f"avgpool2d: stride must be >= 1, got {stride}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    inv = 1.0 / (window * window)
    if ho == 1 and wo == 1 and window == h == w:
        # global pool: one mean per channel
        out = Tensor(a.data.sum(axis=(1, 2)).reshape(c, 1, 1) * inv)

        def backward_full(g):
            return (np.broadcast_to(g * inv, a.shape).copy(),)

        return _track(out, (a,), backward_full, "avgpool2d")

    acc = np.zeros((c, ho, wo))
    for ki in range(window):
        for kj in range(window):
            acc += a.data[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
    out = Tensor(acc * inv)

    def backward(g):
        ga = np.zeros_like(a.data)
        gs = g * inv
        for ki in range(window):
            for kj in range(window):
                ga[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += gs
        return (ga,)

    return _track(out, (a,), backward, "avgpool2d")


# ---------------------------------------------------------------------------
# matrix / attention ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul: expected matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ for {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return (ga, gb)

    return _track(out, (a, b), backward, "matmul")


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, stabilized by row-max subtraction."""
    if m.data.ndim != 2:
        raise DimensionError(f"softmax_rows: expected a matrix, got {m.shape}")
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _track(out, (m,), backward, "softmax_rows")


def row_standardize(m: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row to zero mean / unit variance (no learned affine)."""
    if m.data.ndim != 2:
        raise DimensionError(f"row_standardize: expected a matrix, got {m.shape}")
    n = m.shape[1]
    mu = m.data.mean(axis=1, keepdims=True)
    var = ((m.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (m.data - mu) * inv
    out = Tensor(xhat)

    def backward(g):
        gm = (g - g.mean(axis=1, keepdims=True)
              - xhat * (g * xhat).mean(axis=1, keepdims=True)) * inv
        return (gm,)

    return _track(out, (m,), backward, "row_standardize")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_extent(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, ho, wo))
    for ki in range(kh):
        for kj in range(kw):
            cols[:, ki, kj] = xp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
    return cols.reshape(c * kh * kw, ho * wo)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (C,H,W) input with (O,C,kh,kw) kernels plus bias."""
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise DimensionError(f"conv2d: expected (C,H,W) and (O,C,kh,kw), got {x.shape}, {kernels.shape}")
    c, h, w = x.shape
    o, ck, kh, kw = kernels.shape
    if ck != c:
        raise DimensionError(f"conv2d: input channels {c} do not match kernel channels {ck}")
    if bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {o} kernels")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = kernels.data.reshape(o, c * kh * kw)
    out = Tensor((kmat @ cols + bias.data[:, None]).reshape(o, ho, wo))

    def backward(g):
        gmat = g.reshape(o, ho * wo)
        gk = (gmat @ cols.T).reshape(kernels.shape) if kernels.requires_grad else None
        gb = gmat.sum(axis=1) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ gmat).reshape(c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += gcols[:, ki, kj]
            gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        return (gx, gk, gb)

    return _track(out, (x, kernels, bias), backward, "conv2d")


# ---------------------------------------------------------------------------
# fused LSTM sequence (single tape node running the whole unroll)
# ---------------------------------------------------------------------------

def lstm_sequence(xs: Tensor, weights: dict[str, Tensor]) -> Tensor:
    """Run an LSTM over the rows of ``xs`` (T, input) from a zero initial state
    and return the final hidden state (hidden,).

    ``weights`` maps the twelve parameter names W_f..b_o to tensors. The whole
    unroll is one tape node; its backward is textbook backpropagation through
    time over the saved per-step activations. The per-step arithmetic matches
    ``layers.lstm_step`` operation for operation, so chaining single steps
    reproduces this op bit for bit.
    """
    if xs.data.ndim != 2:
        raise DimensionError(f"lstm_sequence: expected (T, input), got {xs.shape}")
    t_steps = xs.shape[0]
    if t_steps < 1:
        raise UsageError("lstm_sequence: empty sequence")
    names = ("W_f", "W_i", "W_c", "W_o", "U_f", "U_i", "U_c", "U_o", "b_f", "b_i", "b_c", "b_o")
    w = {k: weights[k] for k in names}
    hidden = w["W_f"].shape[0]
    in_size = w["W_f"].shape[1]
    if xs.shape[1] != in_size:
        raise DimensionError(f"lstm_sequence: input width {xs.shape[1]} does not match weights ({in_size})")

    wd = {k: w[k].data for k in names}
    tracked = _grad_enabled and (xs.requires_grad or any(w[k].requires_grad for k in names))
    if not tracked:
        # evaluation fast path: batch the input projections once, loop only the
        # recurrence (numerically equivalent; last-bit association may differ)
        wcat = np.vstack([wd["W_f"], wd["W_i"], wd["W_c"], wd["W_o"]])
        ucat = np.vstack([wd["U_f"], wd["U_i"], wd["U_c"], wd["U_o"]])
        bcat = np.concatenate([wd["b_f"], wd["b_i"], wd["b_c"], wd["b_o"]])
        xp = xs.data @ wcat.T + bcat
        hv = np.zeros(hidden)
        cv = np.zeros(hidden)
        for t in range(t_steps):
            z = xp[t] + ucat @ hv
            gates = _sigmoid_np(z)
            ctil = np.tanh(z[2 * hidden:3 * hidden])
            cv = gates[:hidden] * cv + gates[hidden:2 * hidden] * ctil
            hv = gates[3 * hidden:] * np.tanh(cv)
        return Tensor(hv)

    bcol = {k: wd[k].reshape(hidden, 1) for k in ("b_f", "b_i", "b_c", "b_o")}

    h = np.zeros((hidden, 1))
    c = np.zeros((hidden, 1))
    # per-step activations saved as (T, hidden) rows for the vectorized BPTT
    h_prev = np.empty((t_steps, hidden))
    c_prev = np.empty((t_steps, hidden))
    f_all = np.empty((t_steps, hidden))
    i_all = np.empty((t_steps, hidden))
    ctil_all = np.empty((t_steps, hidden))
    o_all = np.empty((t_steps, hidden))
    tc_all = np.empty((t_steps, hidden))
    for t in range(t_steps):
        xc = xs.data[t].reshape(in_size, 1)
        f = _sigmoid_np((wd["W_f"] @ xc + wd["U_f"] @ h) + bcol["b_f"])
        i = _sigmoid_np((wd["W_i"] @ xc + wd["U_i"] @ h) + bcol["b_i"])
        ctil = np.tanh((wd["W_c"] @ xc + wd["U_c"] @ h) + bcol["b_c"])
        o = _sigmoid_np((wd["W_o"] @ xc + wd["U_o"] @ h) + bcol["b_o"])
        c_new = f * c + i * ctil
        tc = np.tanh(c_new)
        h_prev[t] = h[:, 0]
        c_prev[t] = c[:, 0]
        f_all[t] = f[:, 0]
        i_all[t] = i[:, 0]
        ctil_all[t] = ctil[:, 0]
        o_all[t] = o[:, 0]
        tc_all[t] = tc[:, 0]
        h = o * tc
        c = c_new
    out = Tensor(np.ascontiguousarray(h.reshape(hidden)))

    def backward(g):
        # backpropagation through time: the recurrence runs stepwise, all
        # weight gradients collapse into per-gate GEMMs over stacked rows
        ucat = np.vstack([wd["U_f"], wd["U_i"], wd["U_c"], wd["U_o"]])
        wcat = np.vstack([wd["W_f"], wd["W_i"], wd["W_c"], wd["W_o"]])
        acts = np.empty((t_steps, 4 * hidden))
        dh = g.reshape(hidden).copy()
        dc = np.zeros(hidden)
        for t in range(t_steps - 1, -1, -1):
            f, i, ctil, o, tc = f_all[t], i_all[t], ctil_all[t], o_all[t], tc_all[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            row = acts[t]
            row[:hidden] = dc * c_prev[t] * f * (1.0 - f)
            row[hidden:2 * hidden] = dc * ctil * i * (1.0 - i)
            row[2 * hidden:3 * hidden] = dc * i * (1.0 - ctil * ctil)
            row[3 * hidden:] = do * o * (1.0 - o)
            dh = ucat.T @ row
            dc = dc * f
        dxs = acts @ wcat
        dwcat = acts.T @ xs.data
        ducat = acts.T @ h_prev
        dbcat = acts.sum(axis=0)
        grads = [dxs]
        for gi in range(4):
            grads.append(dwcat[gi * hidden:(gi + 1) * hidden])
        for gi in range(4):
            grads.append(ducat[gi * hidden:(gi + 1) * hidden])
        for gi in range(4):
            grads.append(dbcat[gi * hidden:(gi + 1) * hidden])
        return tuple(grads)

    return _track(out, (xs,) + tuple(w[k] for k in names), backward, "lstm_sequence")
