"""Finite-difference gradient verification for every registered primitive,
layer, and composite unit, plus a tiny end-to-end network check.

Each check builds fresh tracked inputs, runs the op, contracts the output to a
scalar against a fixed random projection, and compares the tape gradients with
central differences (eps = 1e-5). The reported number is the worst
|g_analytic - g_fd| / max(1, |g_fd|) over all elements and seeds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .layers import LstmParams, LinearLayer, MhsaParams, linear_forward, lstm_last_output, lstm_step, mhsa
from .network import (CBlockParams, ConvParams, NetworkConfig, build_network, c_block, fmhsa, iru,
                      rru, ssn_block, stem, ucd, UcdParams, RruParams, FmhsaParams, IruParams)
from .tensor import Tensor
from .training import trajectory_loss

EPS = 1e-5
PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _max_rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    denom = np.maximum(1.0, np.abs(fd))
    return float((np.abs(analytic - fd) / denom).max())


def check_gradients(inputs: list[Tensor], forward: Callable[[], Tensor], rng) -> float:
    """Worst relative error between tape gradients and central differences."""
    out = forward()
    proj = rng.standard_normal(out.shape)
    sink = T.tsum(T.mul(out, Tensor(proj)))
    for p in inputs:
        p.grad = None
    sink.backward()

    def value() -> float:
        return float((forward().data * proj).sum())

    worst = 0.0
    for p in inputs:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + EPS
            hi = value()
            flat[i] = orig - EPS
            lo = value()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * EPS)
        worst = max(worst, _max_rel_err(analytic, fd))
    return worst


# ---------------------------------------------------------------------------
# registered checks: name -> builder(rng) -> (inputs, forward)
# ---------------------------------------------------------------------------

def _check_matmul(rng):
    a, b = _t(rng, 4, 3), _t(rng, 3, 5)
    return [a, b], lambda: T.matmul(a, b)


def _check_conv2d(rng):
    x, k, b = _t(rng, 2, 6, 6), _t(rng, 3, 2, 3, 3), _t(rng, 3)
    return [x, k, b], lambda: T.conv2d(x, k, b, stride=2, padding=1)


def _check_add(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    return [a, b], lambda: T.add(a, b)


def _check_sub(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    return [a, b], lambda: T.sub(a, b)


def _check_mul(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    return [a, b], lambda: T.mul(a, b)


def _check_scale(rng):
    a = _t(rng, 3, 4)
    return [a], lambda: T.scale(a, -1.7)


def _check_add_bias(rng):
    m, b = _t(rng, 4, 5), _t(rng, 5)
    return [m, b], lambda: T.add_bias(m, b)


def _check_sigmoid(rng):
    a = _t(rng, 3, 4)
    return [a], lambda: T.sigmoid(a)


def _check_tanh(rng):
    a = _t(rng, 3, 4)
    return [a], lambda: T.tanh(a)


def _check_gelu(rng):
    a = _t(rng, 3, 4)
    return [a], lambda: T.gelu(a)


def _check_wrap_angle(rng):
    a = _t(rng, 3, 4)
    return [a], lambda: T.wrap_angle(a)


def _check_reshape(rng):
    a = _t(rng, 3, 4)
    return [a], lambda: T.reshape(a, (2, 6))


def _check_transpose(rng):
    a = _t(rng, 3, 4)
    return [a], lambda: T.transpose(a)


def _check_concat(rng):
    a, b = _t(rng, 2, 3), _t(rng, 4, 3)
    return [a, b], lambda: T.concat([a, b], axis=0)


def _check_slice(rng):
    a = _t(rng, 4, 6)
    return [a], lambda: T.slice_axis(a, 1, 1, 4)


def _check_pad2d(rng):
    a = _t(rng, 2, 3, 3)
    return [a], lambda: T.pad2d(a, 0, 1, 0, 1)


def _check_sum(rng):
    a = _t(rng, 3, 4)
    return [a], lambda: T.tsum(a)


def _check_mean(rng):
    a = _t(rng, 3, 4)
    return [a], lambda: T.tmean(a)


def _check_avgpool2d(rng):
    a = _t(rng, 3, 6, 6)
    return [a], lambda: T.avgpool2d(a, 2, 2)


def _check_softmax_rows(rng):
    a = _t(rng, 4, 5)
    return [a], lambda: T.softmax_rows(a)


def _check_row_standardize(rng):
    a = _t(rng, 4, 6)
    return [a], lambda: T.row_standardize(a)


def _check_lstm_sequence(rng):
    p = LstmParams.create(rng, 3, 5)
    xs = _t(rng, 4, 3)
    inputs = [xs] + list(p.named().values())
    return inputs, lambda: lstm_last_output(xs, p)


def _check_linear_forward(rng):
    layer = LinearLayer.create(rng, 4, 3)
    x = _t(rng, 5, 4)
    return [x, layer.W, layer.b], lambda: linear_forward(x, layer)


def _check_lstm_step(rng):
    p = LstmParams.create(rng, 3, 4)
    x, h, c = _t(rng, 3), _t(rng, 4), _t(rng, 4)

    def forward():
        h_t, c_t = lstm_step(x, h, c, p)
        return T.concat([h_t, c_t], axis=0)

    return [x, h, c] + list(p.named().values()), forward


def _check_mhsa(rng):
    p = MhsaParams.create(rng, 8, 2)
    tokens = _t(rng, 5, 8)
    return [tokens] + list(p.named().values()), lambda: mhsa(tokens, p)


def _check_mhsa_kv(rng):
    p = MhsaParams.create(rng, 8, 2)
    tokens, kv = _t(rng, 6, 8), _t(rng, 3, 8)
    return [tokens, kv] + list(p.named().values()), lambda: mhsa(tokens, p, kv_tokens=kv)


def _collect(bundle) -> list[Tensor]:
    out = []
    stack = [bundle]
    while stack:
        item = stack.pop()
        if isinstance(item, Tensor):
            out.append(item)
        elif isinstance(item, ConvParams):
            out.extend([item.kernel, item.bias])
        elif isinstance(item, LinearLayer):
            out.extend([item.W, item.b])
        elif isinstance(item, LstmParams):
            out.extend(item.named().values())
        elif isinstance(item, MhsaParams):
            out.extend(item.named().values())
        elif isinstance(item, (list, tuple)):
            stack.extend(item)
        elif isinstance(item, (CBlockParams, RruParams, FmhsaParams, IruParams, UcdParams)):
            stack.extend(getattr(item, f.name) for f in item.__dataclass_fields__.values())
    return out


def _check_c_block(rng):
    p = CBlockParams(
        lstm=LstmParams.create(rng, 4, 6),
        fc1=LinearLayer.create(rng, 6, 6),
        fc2=LinearLayer.create(rng, 6, 20),
    )
    x = _t(rng, 1, 5, 4)
    return [x] + _collect(p), lambda: c_block(x, p)


def _check_stem(rng):
    convs = (
        ConvParams.create(rng, 3, 2, 7, stride=2, padding=3),
        ConvParams.create(rng, 2, 3, 5, stride=1, padding=2),
        ConvParams.create(rng, 3, 3, 3, stride=1, padding=1),
    )
    x = _t(rng, 3, 8, 8)
    return [x] + _collect(list(convs)), lambda: stem(x, convs)


def _check_ucd(rng):
    p = UcdParams(conv=ConvParams.create(rng, 3, 2, 1))
    x = _t(rng, 3, 5, 5)
    return [x] + _collect(p), lambda: ucd(x, p)


def _make_block(rng, c=4, heads=2, stride=2):
    return (
        RruParams(conv1=ConvParams.create(rng, c, c, 3, padding=1),
                  conv2=ConvParams.create(rng, c, c, 3, padding=1)),
        FmhsaParams(kv_conv=ConvParams.create(rng, c, c, stride, stride=stride),
                    attn=MhsaParams.create(rng, c, heads)),
        IruParams(conv_large=ConvParams.create(rng, c, c, 5, padding=2),
                  expand=LinearLayer.create(rng, c, 4 * c),
                  project=LinearLayer.create(rng, 4 * c, c),
                  conv_small=ConvParams.create(rng, c, c, 3, padding=1)),
    )


def _check_rru(rng):
    r, _, _ = _make_block(rng)
    x = _t(rng, 4, 4, 4)
    return [x] + _collect(r), lambda: rru(x, r)


def _check_fmhsa(rng):
    _, f, _ = _make_block(rng)
    x = _t(rng, 4, 4, 4)
    return [x] + _collect(f), lambda: fmhsa(x, f)


def _check_iru(rng):
    _, _, i = _make_block(rng)
    x = _t(rng, 4, 4, 4)
    return [x] + _collect(i), lambda: iru(x, i)


def _check_ssn_block(rng):
    from .network import SsnBlockParams
    r, f, i = _make_block(rng)
    blk = SsnBlockParams(rru=r, fmhsa=f, iru=i)
    x = _t(rng, 4, 4, 4)
    return [x] + _collect(r) + _collect(f) + _collect(i), lambda: ssn_block(x, blk)


def _check_trajectory_loss(rng):
    pred = _t(rng, 3, 3)
    target = rng.standard_normal((3, 3))
    return [pred], lambda: trajectory_loss(pred, target, 0.7)


CHECKS: list[tuple[str, Callable]] = [
    ("matmul", _check_matmul),
    ("conv2d", _check_conv2d),
    ("add", _check_add),
    ("sub", _check_sub),
    ("mul", _check_mul),
    ("scale", _check_scale),
    ("add_bias", _check_add_bias),
    ("sigmoid", _check_sigmoid),
    ("tanh", _check_tanh),
    ("gelu", _check_gelu),
    ("wrap_angle", _check_wrap_angle),
    ("reshape", _check_reshape),
    ("transpose", _check_transpose),
    ("concat", _check_concat),
    ("slice", _check_slice),
    ("pad2d", _check_pad2d),
    ("sum", _check_sum),
    ("mean", _check_mean),
    ("avgpool2d", _check_avgpool2d),
    ("softmax_rows", _check_softmax_rows),
    ("row_standardize", _check_row_standardize),
    ("lstm_sequence", _check_lstm_sequence),
    ("linear_forward", _check_linear_forward),
    ("lstm_step", _check_lstm_step),
    ("mhsa", _check_mhsa),
    ("mhsa_kv", _check_mhsa_kv),
    ("c_block", _check_c_block),
    ("stem", _check_stem),
    ("ucd", _check_ucd),
    ("rru", _check_rru),
    ("fmhsa", _check_fmhsa),
    ("iru", _check_iru),
    ("ssn_block", _check_ssn_block),
    ("trajectory_loss", _check_trajectory_loss),
]


def tiny_config() -> NetworkConfig:
    """Smallest legal network used for the end-to-end differentiability check."""
    return NetworkConfig(
        raster_size=16,
        stem_channels=(4, 4, 4),
        stage_depths=(1, 1, 1),
        stage_channels=(4, 8, 8),
        heads=(2, 4, 8),
        lstm_hidden=8,
        waypoints=2,
    )


def check_end_to_end(seed: int = 0, sample_fraction: float = 0.05) -> float:
    """Finite-difference check of the whole network on a random parameter
    sample, using the projected-output scalar as the sink."""
    rng = np.random.default_rng([7, seed])
    cfg = tiny_config()
    graph, params = build_network(cfg, seed)
    raster = rng.standard_normal((3, cfg.raster_size, cfg.raster_size))
    proj = rng.standard_normal((cfg.waypoints, 3))

    def value() -> float:
        return float((graph.forward_tensor(Tensor(raster)).data * proj).sum())

    params.zero_grad()
    sink = T.tsum(T.mul(graph.forward_tensor(Tensor(raster)), Tensor(proj)))
    sink.backward()

    tensors = params.tensors()
    sizes = np.array([t.size for t in tensors])
    cum = np.concatenate([[0], np.cumsum(sizes)])
    total = int(cum[-1])
    n_sample = max(1, int(round(sample_fraction * total)))
    picks = rng.choice(total, size=n_sample, replace=False)

    worst = 0.0
    for flat_idx in picks:
        ti = int(np.searchsorted(cum, flat_idx, side="right") - 1)
        off = int(flat_idx - cum[ti])
        p = tensors[ti]
        buf = p.data.reshape(-1)
        orig = buf[off]
        buf[off] = orig + EPS
        hi = value()
        buf[off] = orig - EPS
        lo = value()
        buf[off] = orig
        fd = (hi - lo) / (2.0 * EPS)
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[off])
        worst = max(worst, abs(analytic - fd) / max(1.0, abs(fd)))
    return worst


def run_suite(n_seeds: int = 10, include_end_to_end: bool = True,
              fault_op: str | None = None, seed_base: int = 0) -> list[CheckResult]:
    """Run every registered check over ``n_seeds`` seeds.

    ``fault_op`` is a test hook: it perturbs the analytic gradient of the named
    check so the suite must report a failure (exercises the nonzero-exit path).
    """
    results = []
    known = {name for name, _ in CHECKS}
    if fault_op is not None and fault_op not in known and fault_op != "end_to_end":
        raise ValidationError(f"unknown op for fault injection: {fault_op!r}")
    for ci, (name, builder) in enumerate(CHECKS):
        worst = 0.0
        for seed in range(n_seeds):
            rng = np.random.default_rng([1000 + ci, seed_base + seed])
            inputs, forward = builder(rng)
            err = check_gradients(inputs, forward, rng)
            worst = max(worst, err)
        if fault_op == name:
            worst += 1.0  # injected fault: force a visible failure
        results.append(CheckResult(name, worst, PRIMITIVE_TOL))
    if include_end_to_end:
        err = check_end_to_end(seed=seed_base)
        if fault_op == "end_to_end":
            err += 1.0
        results.append(CheckResult("end_to_end", err, END_TO_END_TOL))
    return results
