"""The SSN trajectory network: per-channel C-blocks, a three-conv stem, stages
of RRU/FMHSA/IRU blocks separated by UCD reductions, and a pooled regression
head emitting (x, y, yaw) waypoints in the ego frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dataclass_fields

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .layers import LinearLayer, LstmParams, MhsaParams, linear_forward, lstm_last_output, mhsa, uniform_init, zeros_init
from .tensor import Tensor, no_grad, wrap_angle_np


@dataclass
class NetworkConfig:
    """Architecture hyperparameters. The 64-pixel default keeps desk-scale
    training feasible; 224 mirrors the full-size input."""

    raster_size: int = 64
    in_channels: int = 3
    stem_channels: tuple[int, int, int] = (16, 32, 32)
    stage_depths: tuple[int, int, int] = (2, 2, 2)
    stage_channels: tuple[int, int, int] = (32, 64, 128)
    heads: tuple[int, int, int] = (2, 4, 8)
    kv_reduction_stride: int = 2
    ffn_expansion: int = 4
    lstm_hidden: int = 128
    waypoints: int = 12

    def validate(self) -> None:
        if self.raster_size <= 0 or self.raster_size % 8 != 0:
            raise ValidationError(f"raster_size must be a positive multiple of 8, got {self.raster_size}")
        if self.in_channels != 3:
            raise ValidationError(f"in_channels must be 3 (one sub-graph per raster channel), got {self.in_channels}")
        for name in ("stem_channels", "stage_depths", "stage_channels", "heads"):
            v = getattr(self, name)
            if len(v) != 3 or any(int(x) <= 0 for x in v):
                raise ValidationError(f"{name} must hold 3 positive entries, got {v}")
        if self.stem_channels[2] != self.stage_channels[0]:
            raise ValidationError(
                f"stem_channels[2] ({self.stem_channels[2]}) must equal stage_channels[0] "
                f"({self.stage_channels[0]}): the stem feeds stage 0 directly")
        for i in range(3):
            if self.stage_channels[i] % self.heads[i] != 0:
                raise ValidationError(
                    f"heads[{i}] ({self.heads[i]}) must divide stage_channels[{i}] ({self.stage_channels[i]})")
        if self.kv_reduction_stride < 1:
            raise ValidationError(f"kv_reduction_stride must be >= 1, got {self.kv_reduction_stride}")
        if self.ffn_expansion < 1:
            raise ValidationError(f"ffn_expansion must be >= 1, got {self.ffn_expansion}")
        if self.lstm_hidden < 1:
            raise ValidationError(f"lstm_hidden must be >= 1, got {self.lstm_hidden}")
        if self.waypoints < 1:
            raise ValidationError(f"waypoints must be >= 1, got {self.waypoints}")


@dataclass
class TrajectoryPrediction:
    """K future ego poses (x, y, yaw), ego frame, increasing timestep order."""

    waypoints: np.ndarray  # (K, 3), yaw wrapped to (-pi, pi]

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64)
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 3:
            raise DimensionError(f"waypoints must be (K, 3), got {self.waypoints.shape}")

    @property
    def k(self) -> int:
        return self.waypoints.shape[0]


class ParamStore:
    """Ordered mapping of canonical parameter names to tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        self._params[name] = t
        return t

    def add_bundle(self, prefix: str, bundle) -> None:
        """Register every tensor field (or dict entry) of a parameter bundle."""
        if isinstance(bundle, dict):
            items = bundle.items()
        else:
            items = ((f.name, getattr(bundle, f.name)) for f in dataclass_fields(bundle))
        for name, value in items:
            if isinstance(value, Tensor):
                self.add(f"{prefix}.{name}", value)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def total_count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def zero_all(self) -> None:
        """Set every parameter value to 0 (testing aid)."""
        for t in self._params.values():
            t.data[:] = 0.0


# ---------------------------------------------------------------------------
# parameter bundles per unit
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    kernel: Tensor  # (O, C, kh, kw)
    bias: Tensor    # (O,)
    stride: int = 1
    padding: int = 0

    @classmethod
    def create(cls, rng, in_ch: int, out_ch: int, k: int, stride=1, padding=0) -> "ConvParams":
        kernel = uniform_init(rng, (out_ch, in_ch, k, k), in_ch * k * k)
        return cls(kernel=kernel, bias=zeros_init((out_ch,)), stride=stride, padding=padding)

    def param_count(self) -> int:
        return self.kernel.size + self.bias.size


def conv_apply(x: Tensor, p: ConvParams) -> Tensor:
    return T.conv2d(x, p.kernel, p.bias, stride=p.stride, padding=p.padding)


@dataclass
class CBlockParams:
    """Flatten -> LSTM over image rows -> two fully connected layers."""

    lstm: LstmParams
    fc1: LinearLayer
    fc2: LinearLayer


@dataclass
class RruParams:
    conv1: ConvParams
    conv2: ConvParams


@dataclass
class FmhsaParams:
    kv_conv: ConvParams
    attn: MhsaParams


@dataclass
class IruParams:
    conv_large: ConvParams
    expand: LinearLayer
    project: LinearLayer
    conv_small: ConvParams


@dataclass
class SsnBlockParams:
    rru: RruParams
    fmhsa: FmhsaParams
    iru: IruParams


@dataclass
class UcdParams:
    conv: ConvParams


@dataclass
class HeadParams:
    proj: LinearLayer
    out: LinearLayer


# ---------------------------------------------------------------------------
# unit forward functions
# ---------------------------------------------------------------------------

def split_subgraphs(raster: Tensor) -> list[Tensor]:
    """Channel-wise split of a (3, H, W) raster into three (1, H, W) maps."""
    if raster.data.ndim != 3 or raster.shape[0] != 3:
        raise DimensionError(f"split_subgraphs: expected (3, H, W), got {raster.shape}")
    return [T.slice_axis(raster, 0, i, i + 1) for i in range(3)]


def c_block(sub_graph: Tensor, p: CBlockParams) -> Tensor:
    """Scan the rows of one (1, H, W) map with an LSTM, keep the final output,
    map it through two linear layers, and reshape back to (1, H, W)."""
    if sub_graph.data.ndim != 3 or sub_graph.shape[0] != 1:
        raise DimensionError(f"c_block: expected (1, H, W), got {sub_graph.shape}")
    _, h, w = sub_graph.shape
    rows = T.reshape(sub_graph, (h, w))
    last = lstm_last_output(rows, p.lstm)
    z = T.reshape(last, (1, p.lstm.hidden_size))
    z = T.gelu(linear_forward(z, p.fc1))
    z = linear_forward(z, p.fc2)
    return T.reshape(z, (1, h, w))


def stem(x: Tensor, convs: tuple[ConvParams, ConvParams, ConvParams]) -> Tensor:
    """7/5/3 conv cascade; the first conv strides by 2, GELU after each."""
    out = x
    for p in convs:
        out = T.gelu(conv_apply(out, p))
    return out


def ucd(x: Tensor, p: UcdParams) -> Tensor:
    """1x1 channel projection followed by the 0.5 downsampling (2x2 mean pool,
    stride 2). Odd extents are zero-padded below/right so output is ceil(n/2)."""
    out = conv_apply(x, p.conv)
    _, h, w = out.shape
    pad_h, pad_w = h % 2, w % 2
    if pad_h or pad_w:
        out = T.pad2d(out, 0, pad_h, 0, pad_w)
    return T.avgpool2d(out, 2, 2)


def rru(x: Tensor, p: RruParams) -> Tensor:
    """Two stacked 3x3 convolutions (GELU between), shape preserving."""
    return conv_apply(T.gelu(conv_apply(x, p.conv1)), p.conv2)


def _to_tokens(x: Tensor) -> Tensor:
    c, h, w = x.shape
    return T.transpose(T.reshape(x, (c, h * w)))


def _from_tokens(tokens: Tensor, c: int, h: int, w: int) -> Tensor:
    return T.reshape(T.transpose(tokens), (c, h, w))


def fmhsa(x: Tensor, p: FmhsaParams) -> Tensor:
    """Attention over all H*W positions with keys/values taken from a strided
    convolutional reduction of the map. Token features are standardized per
    token before the query/key/value projections; no internal residual."""
    c, h, w = x.shape
    s = p.kv_conv.stride
    kv_in = x
    pad_h = (-h) % s
    pad_w = (-w) % s
    if pad_h or pad_w:
        kv_in = T.pad2d(x, 0, pad_h, 0, pad_w)
    reduced = conv_apply(kv_in, p.kv_conv)
    queries = T.row_standardize(_to_tokens(x))
    kv = T.row_standardize(_to_tokens(reduced))
    out_tokens = mhsa(queries, p.attn, kv_tokens=kv)
    return _from_tokens(out_tokens, c, h, w)


def iru(x: Tensor, p: IruParams) -> Tensor:
    """5x5 conv -> per-position linear expansion (GELU, 4x) and projection ->
    3x3 conv. Shape preserving."""
    c, h, w = x.shape
    out = conv_apply(x, p.conv_large)
    tokens = _to_tokens(out)
    tokens = T.gelu(linear_forward(tokens, p.expand))
    tokens = linear_forward(tokens, p.project)
    out = _from_tokens(tokens, c, h, w)
    return conv_apply(out, p.conv_small)


def ssn_block(x: Tensor, p: SsnBlockParams) -> Tensor:
    """A = RRU(X); B = FMHSA(A); output = IRU(B) + B."""
    a = rru(x, p.rru)
    b = fmhsa(a, p.fmhsa)
    return T.add(iru(b, p.iru), b)


# ---------------------------------------------------------------------------
# whole-network graph
# ---------------------------------------------------------------------------

@dataclass
class NetworkGraph:
    cfg: NetworkConfig
    cblocks: list[CBlockParams]
    stem_convs: tuple[ConvParams, ConvParams, ConvParams]
    stages: list[list[SsnBlockParams]]
    ucds: list[UcdParams]
    head: HeadParams
    params: ParamStore = field(repr=False, default=None)

    def forward_tensor(self, raster: Tensor) -> Tensor:
        """Full forward pass to the raw (K, 3) waypoint tensor (tape-tracked)."""
        s = self.cfg.raster_size
        if raster.shape != (3, s, s):
            raise DimensionError(f"network_forward: raster {raster.shape} does not match config (3, {s}, {s})")
        maps = [c_block(sg, cb) for sg, cb in zip(split_subgraphs(raster), self.cblocks)]
        x = T.concat(maps, axis=0)
        x = stem(x, self.stem_convs)
        for i, blocks in enumerate(self.stages):
            for blk in blocks:
                x = ssn_block(x, blk)
            if i < len(self.ucds):
                x = ucd(x, self.ucds[i])
        _, h, w = x.shape
        # maps stay square (square raster, symmetric reductions)
        pooled = T.avgpool2d(x, h, 1)
        pooled = T.reshape(pooled, (1, self.cfg.stage_channels[2]))
        z = T.gelu(linear_forward(pooled, self.head.proj))
        z = linear_forward(z, self.head.out)
        return T.reshape(z, (self.cfg.waypoints, 3))

    def predict(self, raster) -> TrajectoryPrediction:
        """Untracked forward returning waypoints with yaw wrapped to (-pi, pi]."""
        t = raster if isinstance(raster, Tensor) else Tensor(raster)
        with no_grad():
            out = self.forward_tensor(t).data.copy()
        out[:, 2] = wrap_angle_np(out[:, 2])
        return TrajectoryPrediction(out)


def network_forward(raster, graph: NetworkGraph) -> TrajectoryPrediction:
    return graph.predict(raster)


def build_network(cfg: NetworkConfig, seed: int) -> tuple[NetworkGraph, ParamStore]:
    """Deterministically initialize the full graph; parameter names follow the
    stage.block.unit.tensor convention in creation order."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    store = ParamStore()

    cblocks = []
    for i in range(3):
        lstm = LstmParams.create(rng, cfg.raster_size, cfg.lstm_hidden)
        fc1 = LinearLayer.create(rng, cfg.lstm_hidden, cfg.lstm_hidden)
        fc2 = LinearLayer.create(rng, cfg.lstm_hidden, cfg.raster_size * cfg.raster_size)
        store.add_bundle(f"cblock{i}.lstm", lstm)
        store.add_bundle(f"cblock{i}.fc1", fc1)
        store.add_bundle(f"cblock{i}.fc2", fc2)
        cblocks.append(CBlockParams(lstm=lstm, fc1=fc1, fc2=fc2))

    s1, s2, s3 = cfg.stem_channels
    stem_convs = (
        ConvParams.create(rng, cfg.in_channels, s1, 7, stride=2, padding=3),
        ConvParams.create(rng, s1, s2, 5, stride=1, padding=2),
        ConvParams.create(rng, s2, s3, 3, stride=1, padding=1),
    )
    for j, p in enumerate(stem_convs):
        store.add_bundle(f"stem.conv{j}", p)

    stages: list[list[SsnBlockParams]] = []
    ucds: list[UcdParams] = []
    for si in range(3):
        c = cfg.stage_channels[si]
        blocks = []
        for bi in range(cfg.stage_depths[si]):
            prefix = f"stage{si}.block{bi}"
            r = RruParams(
                conv1=ConvParams.create(rng, c, c, 3, padding=1),
                conv2=ConvParams.create(rng, c, c, 3, padding=1),
            )
            store.add_bundle(f"{prefix}.rru.conv1", r.conv1)
            store.add_bundle(f"{prefix}.rru.conv2", r.conv2)
            s = cfg.kv_reduction_stride
            f = FmhsaParams(
                kv_conv=ConvParams.create(rng, c, c, s, stride=s, padding=0),
                attn=MhsaParams.create(rng, c, cfg.heads[si]),
            )
            store.add_bundle(f"{prefix}.fmhsa.kv_conv", f.kv_conv)
            store.add_bundle(f"{prefix}.fmhsa", f.attn.named())
            iu = IruParams(
                conv_large=ConvParams.create(rng, c, c, 5, padding=2),
                expand=LinearLayer.create(rng, c, cfg.ffn_expansion * c),
                project=LinearLayer.create(rng, cfg.ffn_expansion * c, c),
                conv_small=ConvParams.create(rng, c, c, 3, padding=1),
            )
            store.add_bundle(f"{prefix}.iru.conv_large", iu.conv_large)
            store.add_bundle(f"{prefix}.iru.expand", iu.expand)
            store.add_bundle(f"{prefix}.iru.project", iu.project)
            store.add_bundle(f"{prefix}.iru.conv_small", iu.conv_small)
            blocks.append(SsnBlockParams(rru=r, fmhsa=f, iru=iu))
        stages.append(blocks)
        if si < 2:
            u = UcdParams(conv=ConvParams.create(rng, c, cfg.stage_channels[si + 1], 1))
            store.add_bundle(f"ucd{si}.conv", u.conv)
            ucds.append(u)

    c3 = cfg.stage_channels[2]
    head = HeadParams(
        proj=LinearLayer.create(rng, c3, c3),
        out=LinearLayer.create(rng, c3, 3 * cfg.waypoints),
    )
    store.add_bundle("head.proj", head.proj)
    store.add_bundle("head.out", head.out)

    graph = NetworkGraph(cfg=cfg, cblocks=cblocks, stem_convs=stem_convs,
                         stages=stages, ucds=ucds, head=head, params=store)
    return graph, store
