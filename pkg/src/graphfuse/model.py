"""Single-stream adaptive graph convolutional network."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .errors import ConfigError, ShapeError
from .fusion import RgbProjection
from .graph import AdjacencyStack
from .nn import BatchNorm, Conv2d, Linear, Module, Parameter
from .tensor import Tensor, bmm, concat, global_avg_pool, pad_zeros, relu

DEFAULT_BLOCKS: Tuple[Tuple[int, int], ...] = (
    (64, 1), (64, 1), (64, 1), (64, 1),
    (128, 2), (128, 1), (128, 1),
    (256, 2), (256, 1), (256, 1),
)


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``blocks`` lists ``(out_channels, temporal_stride)`` per block. The first
    block has no residual branch unless ``first_residual`` is set. When
    ``rgb_feature_dim > 0`` a trainable projection maps per-frame RGB features
    to ``rgb_embed_dim`` channels on the first ``rgb_nodes`` nodes; those
    channels are inserted at ``rgb_channel_offset`` and count towards
    ``in_channels``.
    """

    num_nodes: int
    in_channels: int = 3
    num_classes: int = 27
    num_persons: int = 1
    blocks: Tuple[Tuple[int, int], ...] = DEFAULT_BLOCKS
    temporal_kernel: int = 9
    subsets: int = 3
    embed_factor: int = 4
    adaptive: bool = True
    first_residual: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    rgb_feature_dim: int = 0
    rgb_embed_dim: int = 0
    rgb_nodes: Optional[int] = None
    rgb_channel_offset: int = 3

    def __post_init__(self):
        self.blocks = tuple((int(c), int(s)) for c, s in self.blocks)
        if not self.blocks:
            raise ConfigError("model needs at least one block")
        if any(s not in (1, 2) for _, s in self.blocks):
            raise ConfigError(f"temporal strides must be 1 or 2, got {[s for _, s in self.blocks]}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError(f"temporal_kernel must be odd, got {self.temporal_kernel}")
        if min(self.num_nodes, self.in_channels, self.num_persons, self.subsets) < 1:
            raise ConfigError("num_nodes, in_channels, num_persons and subsets must be positive")
        if any(c // self.embed_factor < 1 for c, _ in self.blocks):
            raise ConfigError("embed_factor leaves a block with zero embedding channels")
        if self.rgb_feature_dim:
            if self.rgb_embed_dim < 1:
                raise ConfigError("rgb_embed_dim must be positive when rgb_feature_dim is set")
            if self.rgb_nodes is None:
                self.rgb_nodes = self.num_nodes
            if self.rgb_nodes > self.num_nodes:
                raise ConfigError("rgb_nodes cannot exceed num_nodes")
            if not 0 <= self.rgb_channel_offset <= self.in_channels - self.rgb_embed_dim:
                raise ConfigError("rgb_channel_offset does not fit in in_channels")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        d = dict(d)
        if "blocks" in d:
            d["blocks"] = tuple(tuple(b) for b in d["blocks"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


class AdaptiveGraphConv(Module):
    """Spatial graph convolution with fixed, learned and data-dependent adjacency.

    For each subset k the aggregation matrix is ``A_k + B_k + C_k``, where
    ``A_k`` is the fixed normalized partition, ``B_k`` a free N x N parameter
    (zero-initialized) and ``C_k`` a softmax-normalized embedded similarity.
    """

    def __init__(self, cin: int, cout: int, adjacency: np.ndarray, cfg: ModelConfig, rng, dtype):
        super().__init__()
        k, n, _ = adjacency.shape
        self.inter = cout // cfg.embed_factor
        self.register_buffer("A", np.asarray(adjacency, dtype=dtype))
        self.B = Parameter(np.zeros((k, n, n), dtype=dtype)) if cfg.adaptive else None
        self.conv_a = [Conv2d(cin, self.inter, 1, rng=rng, dtype=dtype) for _ in range(k)]
        self.conv_b = [Conv2d(cin, self.inter, 1, rng=rng, dtype=dtype) for _ in range(k)]
        self.conv_d = [Conv2d(cin, cout, 1, rng=rng, dtype=dtype) for _ in range(k)]
        self.bn = BatchNorm(cout, cfg.bn_momentum, cfg.bn_eps, dtype=dtype)
        if cin != cout:
            self.down = Conv2d(cin, cout, 1, rng=rng, dtype=dtype)
            self.down_bn = BatchNorm(cout, cfg.bn_momentum, cfg.bn_eps, dtype=dtype)
        else:
            self.down = None

    def forward(self, x: Tensor) -> Tensor:
        b, c, t, n = x.shape
        a_fixed = self._buffers["A"]
        if n != a_fixed.shape[-1]:
            raise ShapeError(f"input has {n} nodes but the graph layer was built for {a_fixed.shape[-1]}")
        adj = Tensor(a_fixed)
        if self.B is not None:
            adj = adj + self.B
        scale = 1.0 / (self.inter * t)
        flat = x.reshape(b, c * t, n)
        y = None
        for k in range(len(self.conv_d)):
            theta = self.conv_a[k](x).permute(0, 3, 1, 2).reshape(b, n, self.inter * t)
            phi = self.conv_b[k](x).reshape(b, self.inter * t, n)
            # normalize over source nodes v of entry (v, w)
            sim = F.softmax(bmm(theta, phi) * scale, axis=1)
            z = bmm(flat, sim + adj[k]).reshape(b, c, t, n)
            zk = self.conv_d[k](z)
            y = zk if y is None else y + zk
        y = self.bn(y)
        res = x if self.down is None else self.down_bn(self.down(x))
        return relu(y + res)


class TemporalConv(Module):
    """(k_t x 1) convolution along time followed by batch norm."""

    def __init__(self, cin: int, cout: int, kernel: int, stride: int, cfg: ModelConfig, rng, dtype):
        super().__init__()
        pad = (kernel - 1) // 2
        self.conv = Conv2d(cin, cout, (kernel, 1), (stride, 1), (pad, 0), rng=rng, dtype=dtype)
        self.bn = BatchNorm(cout, cfg.bn_momentum, cfg.bn_eps, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class AgcnBlock(Module):
    def __init__(self, cin, cout, stride, adjacency, cfg: ModelConfig, residual: bool, rng, dtype):
        super().__init__()
        self.gcn = AdaptiveGraphConv(cin, cout, adjacency, cfg, rng, dtype)
        self.tcn = TemporalConv(cout, cout, cfg.temporal_kernel, stride, cfg, rng, dtype)
        self.residual_mode = "none"
        self.residual = None
        if residual:
            if cin == cout and stride == 1:
                self.residual_mode = "identity"
            else:
                self.residual_mode = "project"
                self.residual = TemporalConv(cin, cout, 1, stride, cfg, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.tcn(self.gcn(x))
        if self.residual_mode == "identity":
            y = y + x
        elif self.residual_mode == "project":
            y = y + self.residual(x)
        return relu(y)


class AGCN(Module):
    """Input (B, M, C, T, N) -> logits (B, K).

    Pipeline: optional RGB projection, data batch norm over the M*N*C
    features of each time step, the block stack, global average pooling over
    time and nodes, mean over persons, and a linear classifier.
    """

    def __init__(self, cfg: ModelConfig, adjacency, seed: int = 0, dtype=np.float32):
        super().__init__()
        a = adjacency.subsets if isinstance(adjacency, AdjacencyStack) else np.asarray(adjacency)
        if a.ndim == 2:
            a = a[None]
        if a.shape[1:] != (cfg.num_nodes, cfg.num_nodes):
            raise ShapeError(f"adjacency is {a.shape[1:]} but the model has {cfg.num_nodes} nodes")
        if a.shape[0] != cfg.subsets:
            raise ShapeError(f"adjacency has {a.shape[0]} subsets, config says {cfg.subsets}")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        if cfg.rgb_feature_dim:
            self.rgb_proj = RgbProjection(
                cfg.rgb_feature_dim, cfg.rgb_embed_dim, cfg.rgb_nodes, cfg.num_persons, rng=rng, dtype=dtype
            )
        else:
            self.rgb_proj = None
        self.data_bn = BatchNorm(cfg.num_persons * cfg.num_nodes * cfg.in_channels, cfg.bn_momentum, cfg.bn_eps, dtype)
        self.blocks: List[AgcnBlock] = []
        cin = cfg.in_channels
        for i, (cout, stride) in enumerate(cfg.blocks):
            residual = cfg.first_residual or i > 0
            self.blocks.append(AgcnBlock(cin, cout, stride, a, cfg, residual, rng, dtype))
            cin = cout
        self.fc = Linear(cin, cfg.num_classes, rng=rng, dtype=dtype)

    @property
    def dtype(self):
        return self.fc.weight.dtype

    def check_input(self, shape: Sequence[int], rgb_shape: Optional[Sequence[int]] = None) -> None:
        cfg = self.cfg
        expect_c = cfg.in_channels - (cfg.rgb_embed_dim if cfg.rgb_feature_dim else 0)
        if len(shape) != 5:
            raise ShapeError(f"expected (B, M, C, T, N) input, got {tuple(shape)}")
        _, m, c, _, n = shape
        if n != cfg.num_nodes:
            raise ShapeError(f"input has N={n} nodes but the model expects N={cfg.num_nodes}")
        if m != cfg.num_persons:
            raise ShapeError(f"input has M={m} persons but the model expects M={cfg.num_persons}")
        if c != expect_c:
            raise ShapeError(f"input has C={c} channels but the model expects C={expect_c}")
        if cfg.rgb_feature_dim:
            if rgb_shape is None:
                raise ShapeError("model has an RGB projection but no RGB features were given")
            if len(rgb_shape) != 3 or rgb_shape[0] != shape[0] or rgb_shape[1] != shape[3]:
                raise ShapeError(f"RGB features {tuple(rgb_shape)} do not align with input {tuple(shape)}")

    def forward(self, x: Tensor, rgb: Optional[Tensor] = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        self.check_input(x.shape, None if rgb is None else rgb.shape)
        cfg = self.cfg
        if self.rgb_proj is not None:
            rgb = rgb if isinstance(rgb, Tensor) else Tensor(rgb, dtype=self.dtype)
            feats = self.rgb_proj(rgb)  # (B, M, C_E, T, N_rgb)
            if cfg.rgb_nodes < cfg.num_nodes:
                feats = pad_zeros(feats, 4, 0, cfg.num_nodes - cfg.rgb_nodes)
            off = cfg.rgb_channel_offset
            x = concat([x[:, :, :off], feats, x[:, :, off:]], axis=2)
        b, m, c, t, n = x.shape
        x = x.permute(0, 1, 4, 2, 3).reshape(b, m * n * c, t)
        x = self.data_bn(x)
        x = x.reshape(b, m, n, c, t).permute(0, 1, 3, 4, 2).reshape(b * m, c, t, n)
        for block in self.blocks:
            x = block(x)
        pooled = global_avg_pool(x).reshape(b, m, -1).mean(axis=1)
        return self.fc(pooled)


@dataclass
class ParamCount:
    total: int
    breakdown: Dict[str, object] = field(default_factory=dict)


def count_parameters(cfg: ModelConfig) -> ParamCount:
    """Closed-form trainable parameter count of ``AGCN(cfg)``."""
    n, ks = cfg.num_nodes, cfg.subsets
    conv1x1 = lambda ci, co: ci * co + co  # noqa: E731
    bn = lambda c: 2 * c  # noqa: E731
    breakdown: Dict[str, object] = {}
    total = 0
    if cfg.rgb_feature_dim:
        rgb = conv1x1(cfg.rgb_feature_dim, cfg.rgb_embed_dim * cfg.rgb_nodes * cfg.num_persons)
        breakdown["rgb_projection"] = rgb
        total += rgb
    data_bn = bn(cfg.num_persons * cfg.num_nodes * cfg.in_channels)
    breakdown["data_bn"] = data_bn
    total += data_bn
    blocks = []
    cin = cfg.in_channels
    for i, (cout, stride) in enumerate(cfg.blocks):
        inter = cout // cfg.embed_factor
        parts = {
            "adaptive_B": ks * n * n if cfg.adaptive else 0,
            "theta_phi": 2 * ks * conv1x1(cin, inter),
            "spatial_W": ks * conv1x1(cin, cout),
            "gcn_bn": bn(cout),
            "gcn_down": conv1x1(cin, cout) + bn(cout) if cin != cout else 0,
            "temporal": cout * cout * cfg.temporal_kernel + cout + bn(cout),
            "residual": 0,
        }
        if (cfg.first_residual or i > 0) and not (cin == cout and stride == 1):
            parts["residual"] = conv1x1(cin, cout) + bn(cout)
        blocks.append(parts)
        total += sum(parts.values())
        cin = cout
    breakdown["blocks"] = blocks
    breakdown["classifier"] = conv1x1(cin, cfg.num_classes)
    total += breakdown["classifier"]
    return ParamCount(total, breakdown)


def parameter_count(model: Module) -> int:
    """Count by walking the model's parameter tensors."""
    return sum(p.size for p in model.parameters())
