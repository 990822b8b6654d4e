"""Loss, optimizers, the desk-scale training loop, and checkpoint files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, TruncationError, ValidationError
from .network import NetworkConfig, NetworkGraph, ParamStore, TrajectoryPrediction, build_network
from .scenes import Dataset, RasterConfig, ego_targets, rasterize
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SSNCK"
CHECKPOINT_VERSION = 1
STEP_RECORD_NAME = "train_step"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 5
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    yaw_loss_weight: float = 1.0
    sample_stride: int = 10  # take every Nth frame of a scene as a sample
    grad_clip: float = 10.0  # global gradient norm cap; 0 disables

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if not (self.learning_rate > 0):
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.seed < 0:
            raise ValidationError(f"seed must be >= 0, got {self.seed}")
        if self.yaw_loss_weight < 0:
            raise ValidationError(f"yaw_loss_weight must be >= 0, got {self.yaw_loss_weight}")
        if self.sample_stride < 1:
            raise ValidationError(f"sample_stride must be >= 1, got {self.sample_stride}")
        if self.grad_clip < 0:
            raise ValidationError(f"grad_clip must be >= 0, got {self.grad_clip}")


def trajectory_loss(pred, target: np.ndarray, yaw_weight: float = 1.0) -> Tensor:
    """Mean squared waypoint error: mean_k(dx^2 + dy^2) plus the weighted mean
    of squared yaw errors, with yaw differences wrapped to (-pi, pi] before
    squaring."""
    if isinstance(pred, TrajectoryPrediction):
        pred = Tensor(pred.waypoints)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.data.ndim != 2 or pred.shape[1] != 3:
        raise DimensionError(f"trajectory_loss: prediction {pred.shape} vs target {target.shape}")
    k = pred.shape[0]
    diff = T.sub(pred, Tensor(target))
    xy = T.slice_axis(diff, 1, 0, 2)
    yaw = T.wrap_angle(T.slice_axis(diff, 1, 2, 3))
    loss = T.scale(T.tsum(T.mul(xy, xy)), 1.0 / k)
    return T.add(loss, T.scale(T.tsum(T.mul(yaw, yaw)), yaw_weight / k))


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_gradients(params: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    sq = 0.0
    for _, p in params.items():
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    total = float(np.sqrt(sq))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for _, p in params.items():
            if p.grad is not None:
                p.grad *= factor
    return total


def optimizer_step(params: ParamStore, state: OptimizerState, cfg: TrainConfig) -> OptimizerState:
    """Apply one SGD or Adam update in place from the stored gradients."""
    lr = cfg.learning_rate
    if cfg.optimizer == "sgd":
        for _, p in params.items():
            if p.grad is not None:
                p.data -= lr * p.grad
        state.step += 1
        return state

    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if p.data.shape != g.shape:
            raise DimensionError(f"optimizer_step: gradient shape {g.shape} != param {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return state


@dataclass
class Checkpoint:
    version: int
    net_cfg: NetworkConfig
    params: ParamStore
    step: int


def training_samples(dataset: Dataset, stride: int, k: int) -> list[int]:
    """Frame indices usable as samples: every stride-th frame of each scene
    that still has k future frames."""
    out = []
    for sc in dataset.scenes:
        for fi in range(sc.frame_start_index, sc.frame_end_index, stride):
            if fi + k < sc.frame_end_index:
                out.append(fi)
    return out


def fit(dataset: Dataset, net_cfg: NetworkConfig, train_cfg: TrainConfig,
        rcfg: RasterConfig | None = None,
        progress=None) -> tuple[Checkpoint, list[tuple[int, int, float]]]:
    """Train on (raster -> future waypoints) pairs, one sample per optimizer
    step, deterministic sample order per seed. Returns the checkpoint and the
    (epoch, step, loss) trace."""
    net_cfg.validate()
    train_cfg.validate()
    if rcfg is None:
        rcfg = RasterConfig(size=net_cfg.raster_size)
    if rcfg.size != net_cfg.raster_size:
        raise ValidationError(
            f"raster size {rcfg.size} does not match network raster_size {net_cfg.raster_size}")

    samples = training_samples(dataset, train_cfg.sample_stride, net_cfg.waypoints)
    if not samples:
        raise ValidationError("no usable training samples (dataset empty after stride sampling)")

    graph, params = build_network(net_cfg, train_cfg.seed)
    state = OptimizerState()
    trace: list[tuple[int, int, float]] = []
    step = 0
    for epoch in range(train_cfg.epochs):
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(samples))
        for idx in order:
            fi = samples[int(idx)]
            raster = rasterize(dataset, fi, rcfg)
            target = ego_targets(dataset, fi, net_cfg.waypoints)
            params.zero_grad()
            pred = graph.forward_tensor(Tensor(raster))
            loss = trajectory_loss(pred, target, train_cfg.yaw_loss_weight)
            loss.backward()
            if train_cfg.grad_clip > 0:
                clip_gradients(params, train_cfg.grad_clip)
            optimizer_step(params, state, train_cfg)
            step += 1
            trace.append((epoch, step, loss.item()))
            if progress is not None:
                progress(epoch, step, trace[-1][2])
    return Checkpoint(CHECKPOINT_VERSION, net_cfg, params, step), trace


def epoch_mean_losses(trace: list[tuple[int, int, float]]) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for epoch, _, loss in trace:
        by_epoch.setdefault(epoch, []).append(loss)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def write_loss_csv(path, trace: list[tuple[int, int, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,step,loss\n")
        for epoch, step, loss in trace:
            fh.write(f"{epoch},{step},{loss:.12g}\n")


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Layout: magic SSNCK, u32 version, length-prefixed canonical network
    config text, then tensor records (u32 name length, name, u32 ndim, u32
    dims..., float64 little-endian data). The training step counter is the
    final record, a scalar named train_step."""
    from .runconfig import canonical_network_text

    blob = bytearray(CHECKPOINT_MAGIC)
    blob += struct.pack("<I", ckpt.version)
    cfg_text = canonical_network_text(ckpt.net_cfg).encode("utf-8")
    blob += struct.pack("<I", len(cfg_text)) + cfg_text
    for name, p in ckpt.params.items():
        blob += _tensor_record(name, p.data)
    blob += _tensor_record(STEP_RECORD_NAME, np.array(float(ckpt.step)))
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, blob: bytes, label: str):
        self.blob = blob
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncationError(f"{self.label}: truncated at byte {self.pos} (needed {n} more)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.blob)


def load_checkpoint(path) -> Checkpoint:
    from .runconfig import parse_network_text

    blob = Path(path).read_bytes()
    r = _Reader(blob, str(path))
    magic = r.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    cfg_text = r.take(r.u32()).decode("utf-8")
    net_cfg = parse_network_text(cfg_text)

    store = ParamStore()
    step = 0
    while not r.exhausted:
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(count * 8), dtype="<f8").reshape(shape).copy()
        if name == STEP_RECORD_NAME:
            step = int(data.reshape(-1)[0])
        else:
            store.add(name, Tensor(data, requires_grad=True))
    return Checkpoint(version, net_cfg, store, step)


def checkpoint_to_network(ckpt: Checkpoint) -> tuple[NetworkGraph, ParamStore]:
    """Rebuild a wired network graph holding the checkpoint's parameters."""
    graph, params = build_network(ckpt.net_cfg, seed=0)
    built = set(params.names())
    loaded = set(ckpt.params.names())
    if built != loaded:
        missing = sorted(built - loaded)
        extra = sorted(loaded - built)
        raise FormatError(f"checkpoint parameters do not match the architecture: "
                          f"missing {missing[:3]}..., unexpected {extra[:3]}...")
    for name, p in params.items():
        src = ckpt.params[name]
        if src.data.shape != p.data.shape:
            raise FormatError(f"checkpoint tensor {name}: shape {src.data.shape} != {p.data.shape}")
        p.data[:] = src.data
    return graph, params
