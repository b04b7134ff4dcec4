"""Fusing IMU signals and RGB-derived features into skeleton graph inputs.

Skeleton sequences have layout (M, C, T, N). Additional modalities are
brought into the same layout and then either concatenated on the channel
axis (extra node attributes) or on the node axis (extra graph nodes, with the
graph enlarged to match). Both can be combined; when extra nodes carry fewer
channels than the channel-fused skeleton, the missing channels are zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DataError, ShapeError, UsageError
from .graph import AdjacencyStack, AttachmentSpec, SkeletonGraph, append_nodes, build_adjacency
from .nn import Linear, Module
from .tensor import Tensor, broadcast_repeat, concat, pad_zeros

SKELETON = "skeleton"
IMU = "imu"
RGB = "rgb_features"

LAYOUTS = {
    SKELETON: ("M", "C", "T", "N"),
    IMU: ("M", "C", "S", "T"),
}
RGB_NODE_LAYOUT = ("M", "C", "T", "N")
RGB_FLAT_LAYOUT = ("T", "F")

IMU_MODES = ("off", "channel_broadcast", "spatial_nodes")
RGB_MODES = ("off", "channel_per_node", "spatial_nodes")

TensorLike = Union[Tensor, np.ndarray]


def _t(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class ModalityBlock:
    """One modality's tensor with a named-dimension layout."""

    kind: str
    tensor: Tensor
    layout: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        self.tensor = _t(self.tensor)
        if self.kind not in (SKELETON, IMU, RGB):
            raise UsageError(f"unknown modality kind {self.kind!r}")
        if self.layout is None:
            if self.kind == RGB:
                self.layout = RGB_FLAT_LAYOUT if self.tensor.ndim == 2 else RGB_NODE_LAYOUT
            else:
                self.layout = LAYOUTS[self.kind]
        self.layout = tuple(self.layout)
        if len(self.layout) != self.tensor.ndim:
            raise ShapeError(
                f"{self.kind} layout {self.layout} does not match tensor shape {self.tensor.shape}"
            )

    @property
    def dims(self) -> dict:
        return dict(zip(self.layout, self.tensor.shape))

    def dim(self, name: str) -> int:
        return self.dims[name]


@dataclass
class FusionPlan:
    """Which modalities fuse, and on which dimension.

    ``attachment`` places appended IMU nodes, ``rgb_attachment`` appended
    RGB nodes (RGB nodes are appended before IMU nodes). All sequences are
    resampled to the skeleton's length after ``frame_stride`` subsampling.
    """

    imu_mode: str = "off"
    attachment: AttachmentSpec = field(default_factory=lambda: AttachmentSpec(0))
    rgb_mode: str = "off"
    rgb_embed_dim: int = 0
    rgb_attachment: AttachmentSpec = field(default_factory=lambda: AttachmentSpec(0))
    frame_stride: int = 1

    def __post_init__(self):
        if self.imu_mode not in IMU_MODES:
            raise ConfigError(f"imu_mode must be one of {IMU_MODES}, got {self.imu_mode!r}")
        if self.rgb_mode not in RGB_MODES:
            raise ConfigError(f"rgb_mode must be one of {RGB_MODES}, got {self.rgb_mode!r}")
        if self.frame_stride < 1:
            raise ConfigError(f"frame_stride must be >= 1, got {self.frame_stride}")
        if self.rgb_mode == "channel_per_node" and self.rgb_embed_dim < 1:
            raise ConfigError("rgb_mode 'channel_per_node' needs rgb_embed_dim >= 1")

    @property
    def combination(self) -> str:
        """'skeleton', 'channel', 'spatial' or 'mixed' by the dims the extra modalities use."""
        modes = {m for m in (self.imu_mode, self.rgb_mode) if m != "off"}
        if not modes:
            return "skeleton"
        if modes <= {"channel_broadcast", "channel_per_node"}:
            return "channel"
        if modes == {"spatial_nodes"}:
            return "spatial"
        return "mixed"

    def to_dict(self) -> dict:
        return {
            "imu_mode": self.imu_mode,
            "attachment": self.attachment.to_dict(),
            "rgb_mode": self.rgb_mode,
            "rgb_embed_dim": self.rgb_embed_dim,
            "rgb_attachment": self.rgb_attachment.to_dict(),
            "frame_stride": self.frame_stride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionPlan":
        allowed = {"imu_mode", "attachment", "rgb_mode", "rgb_embed_dim", "rgb_attachment", "frame_stride"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown fusion plan keys {sorted(unknown)}")
        return cls(
            imu_mode=d.get("imu_mode", "off"),
            attachment=AttachmentSpec.from_dict(d.get("attachment", {"count": 0})),
            rgb_mode=d.get("rgb_mode", "off"),
            rgb_embed_dim=int(d.get("rgb_embed_dim", 0)),
            rgb_attachment=AttachmentSpec.from_dict(d.get("rgb_attachment", {"count": 0})),
            frame_stride=int(d.get("frame_stride", 1)),
        )


@dataclass
class FusedSample:
    tensor: Tensor
    graph: SkeletonGraph
    adjacency: AdjacencyStack
    label: Optional[int] = None


# -- time alignment -------------------------------------------------------------
def resample_time(x: TensorLike, length: int, axis: int = -1) -> Tensor:
    """Piecewise-linear resampling of ``axis`` to ``length`` uniformly spaced points."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    axis = axis % arr.ndim
    src = arr.shape[axis]
    if src < 1:
        raise DataError("cannot resample an empty sequence")
    if length < 1:
        raise DataError(f"target length must be >= 1, got {length}")
    if src == length:
        return Tensor(arr.copy(), dtype=arr.dtype if arr.dtype.kind == "f" else None)
    pos = np.linspace(0.0, src - 1, length) if length > 1 else np.zeros(1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = length
    frac = frac.reshape(shape)
    out = a + (b - a) * frac
    dtype = arr.dtype if arr.dtype.kind == "f" else np.float32
    return Tensor(out.astype(dtype))


def subsample_frames(x: TensorLike, stride: int, axis: int = -1) -> Tensor:
    """Keep time indices 0, k, 2k, ... along ``axis``."""
    if stride < 1:
        raise ConfigError(f"frame stride must be >= 1, got {stride}")
    t = _t(x)
    index = [slice(None)] * t.ndim
    index[axis % t.ndim] = slice(None, None, stride)
    return t[tuple(index)]


# -- IMU -----------------------------------------------------------------------
def _require(block: ModalityBlock, kind: str) -> None:
    if not isinstance(block, ModalityBlock) or block.kind != kind:
        got = block.kind if isinstance(block, ModalityBlock) else type(block).__name__
        raise UsageError(f"expected a {kind} block, got {got}")


def imu_to_nodes(imu: ModalityBlock) -> Tensor:
    """(M, C_IMU, S, T) -> (M, C_IMU, T, S): each sensor becomes a graph node."""
    _require(imu, IMU)
    return imu.tensor.permute(0, 1, 3, 2)


def imu_broadcast_channels(imu: ModalityBlock, num_nodes: int) -> Tensor:
    """(M, C_IMU, S, T) -> (M, S * C_IMU, T, N), identical on every node.

    Channels are sensor-major: s0c0, s0c1, ..., s1c0, ...
    """
    _require(imu, IMU)
    if num_nodes <= 0:
        raise UsageError(f"number of nodes must be positive, got {num_nodes}")
    m, c, s, t = imu.tensor.shape
    flat = imu.tensor.permute(0, 2, 1, 3).reshape(m, s * c, t, 1)
    return broadcast_repeat(flat, (m, s * c, t, num_nodes))


# -- fusion primitives ---------------------------------------------------------------
def fuse_channel(parts: Sequence[TensorLike]) -> Tensor:
    """Concatenate (M, C_i, T, N) parts along the channel axis, in the given order."""
    parts = [_t(p) for p in parts]
    if not parts:
        raise ShapeError("fuse_channel needs at least one part")
    ref = parts[0].shape
    for i, p in enumerate(parts):
        if p.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(
                f"part {i} has shape {p.shape}; (M, T, N) must match {(ref[0], ref[2], ref[3])}"
            )
    if len(parts) == 1:
        return parts[0]
    return concat(parts, axis=1)


def fuse_spatial(
    skel: TensorLike,
    extra: TensorLike,
    graph: SkeletonGraph,
    spec: AttachmentSpec,
    label: Optional[int] = None,
) -> FusedSample:
    """Append ``extra``'s N_E nodes to the skeleton; grows the graph per ``spec``."""
    skel, extra = _t(skel), _t(extra)
    if skel.ndim != 4 or extra.ndim != 4:
        raise ShapeError(f"fuse_spatial expects (M, C, T, N) tensors, got {skel.shape} and {extra.shape}")
    if skel.shape[3] != graph.n_nodes:
        raise ShapeError(f"skeleton has {skel.shape[3]} nodes, graph has {graph.n_nodes}")
    if skel.shape[1] != extra.shape[1]:
        raise ShapeError(
            f"channel mismatch: skeleton has C={skel.shape[1]}, extra nodes have C={extra.shape[1]}; "
            "combine with channel fusion (fuse_combined) to zero-fill the missing channels"
        )
    if (skel.shape[0], skel.shape[2]) != (extra.shape[0], extra.shape[2]):
        raise ShapeError(f"(M, T) differ between skeleton {skel.shape} and extra nodes {extra.shape}")
    n_extra = extra.shape[3]
    if spec.count != n_extra:
        raise ConfigError(f"attachment spec adds {spec.count} nodes but {n_extra} were given")
    g = append_nodes(graph, spec)
    out = skel if n_extra == 0 else concat([skel, extra], axis=3)
    return FusedSample(out, g, build_adjacency(g), label)


def _zero_fill(nodes: Tensor, channels: int) -> Tensor:
    have = nodes.shape[1]
    if have == channels:
        return nodes
    return pad_zeros(nodes, 1, 0, channels - have)


def fuse_combined(
    skel: Union[ModalityBlock, TensorLike],
    rgb: Optional[Union[ModalityBlock, TensorLike]],
    imu: Optional[ModalityBlock],
    plan: FusionPlan,
    graph: SkeletonGraph,
    label: Optional[int] = None,
) -> FusedSample:
    """Fuse skeleton, per-node RGB features and IMU signals according to ``plan``.

    Channel parts are concatenated skeleton -> RGB -> IMU. Node parts are
    appended RGB first, then IMU. Appended nodes carry their values in the
    first C_SK channels and zeros in every channel added by channel fusion.
    """
    sk = skel.tensor if isinstance(skel, ModalityBlock) else _t(skel)
    if sk.ndim != 4:
        raise ShapeError(f"skeleton must be (M, C, T, N), got {sk.shape}")
    m, c_sk, t, n_sk = sk.shape
    if n_sk != graph.n_nodes:
        raise ShapeError(f"skeleton has {n_sk} nodes, graph has {graph.n_nodes}")

    rgb_t = None
    if plan.rgb_mode != "off":
        if rgb is None:
            raise ConfigError(f"plan uses rgb_mode={plan.rgb_mode!r} but no RGB block was given")
        rgb_t = rgb.tensor if isinstance(rgb, ModalityBlock) else _t(rgb)
        if rgb_t.ndim != 4:
            raise ConfigError(f"RGB features must be per-node (M, C, T, N), got {rgb_t.shape}")
    elif rgb is not None:
        raise ConfigError("an RGB block was given but the plan has rgb_mode='off'")
    if plan.imu_mode != "off":
        if imu is None:
            raise ConfigError(f"plan uses imu_mode={plan.imu_mode!r} but no IMU block was given")
        _require(imu, IMU)
    elif imu is not None:
        raise ConfigError("an IMU block was given but the plan has imu_mode='off'")

    for name, x, time_axis in (("RGB", rgb_t, 2), ("IMU", None if imu is None else imu.tensor, 3)):
        if x is None:
            continue
        if x.shape[0] != m:
            raise ConfigError(f"{name} has M={x.shape[0]} but skeleton has M={m}")
        if x.shape[time_axis] != t:
            raise ConfigError(f"{name} has T={x.shape[time_axis]}, not aligned to skeleton T={t}")

    channel_parts: List[Tensor] = [sk]
    node_parts: List[Tuple[str, Tensor, AttachmentSpec]] = []
    if plan.rgb_mode == "channel_per_node":
        if rgb_t.shape[1] != plan.rgb_embed_dim or rgb_t.shape[3] != n_sk:
            raise ConfigError(
                f"per-node RGB features {rgb_t.shape} do not match C_E={plan.rgb_embed_dim}, N={n_sk}"
            )
        channel_parts.append(rgb_t)
    elif plan.rgb_mode == "spatial_nodes":
        node_parts.append(("RGB", rgb_t, plan.rgb_attachment))
    if plan.imu_mode == "channel_broadcast":
        channel_parts.append(imu_broadcast_channels(imu, n_sk))
    elif plan.imu_mode == "spatial_nodes":
        node_parts.append(("IMU", imu_to_nodes(imu), plan.attachment))

    fused = fuse_channel(channel_parts)
    c_total = fused.shape[1]
    g = graph
    pieces = [fused]
    for name, nodes, spec in node_parts:
        if nodes.shape[1] != c_sk:
            raise ShapeError(
                f"{name} nodes have C={nodes.shape[1]} but appended nodes need the skeleton's C={c_sk}"
            )
        if spec.count != nodes.shape[3]:
            raise ConfigError(f"{name} attachment adds {spec.count} nodes but {nodes.shape[3]} were given")
        g = append_nodes(g, spec)
        pieces.append(_zero_fill(nodes, c_total))
    out = pieces[0] if len(pieces) == 1 else concat(pieces, axis=3)
    return FusedSample(out, g, build_adjacency(g), label)


def predicted_shape(
    plan: FusionPlan,
    m: int,
    c_sk: int,
    t: int,
    n_sk: int,
    c_imu: int = 0,
    s: int = 0,
    c_rgb: int = 0,
    n_rgb: int = 0,
) -> Tuple[int, int, int, int]:
    """Output (M, C, T, N) of :func:`fuse_combined` for a plan and input sizes.

    ``c_rgb`` is C_E for per-node RGB features, ``n_rgb`` the node count of
    RGB spatial nodes.
    """
    c, n = c_sk, n_sk
    if plan.rgb_mode == "channel_per_node":
        c += c_rgb
    elif plan.rgb_mode == "spatial_nodes":
        n += n_rgb
    if plan.imu_mode == "channel_broadcast":
        c += s * c_imu
    elif plan.imu_mode == "spatial_nodes":
        n += s
    return m, c, t, n


def align_blocks(
    skel: ModalityBlock,
    imu: Optional[ModalityBlock] = None,
    rgb: Optional[ModalityBlock] = None,
    frame_stride: int = 1,
) -> Tuple[ModalityBlock, Optional[ModalityBlock], Optional[ModalityBlock]]:
    """Subsample the skeleton (and RGB) by ``frame_stride`` and resample the rest to its length."""
    _require(skel, SKELETON)
    sk = subsample_frames(skel.tensor, frame_stride, axis=2)
    t = sk.shape[2]
    out_imu = out_rgb = None
    if imu is not None:
        _require(imu, IMU)
        out_imu = ModalityBlock(IMU, resample_time(imu.tensor, t, axis=3))
    if rgb is not None:
        _require(rgb, RGB)
        axis = rgb.layout.index("T")
        sub = subsample_frames(rgb.tensor, frame_stride, axis=axis)
        out_rgb = ModalityBlock(RGB, resample_time(sub, t, axis=axis), rgb.layout)
    return ModalityBlock(SKELETON, sk), out_imu, out_rgb


# -- RGB -------------------------------------------------------------------------
def crop_joint_patches(frame: TensorLike, joints2d, patch: int) -> Tuple[Tensor, np.ndarray]:
    """Crop a ``patch`` x ``patch`` window around each (x, y) pixel coordinate.

    Windows that leave the image replicate the border pixels. Joints with a
    non-finite coordinate yield an all-zero patch and are flagged in the
    returned boolean array.
    """
    img = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    if img.ndim != 3:
        raise ShapeError(f"frame must be (C, H, W), got {img.shape}")
    if patch < 1 or patch % 2 == 0:
        raise ConfigError(f"patch size must be a positive odd number, got {patch}")
    joints = np.asarray(joints2d, dtype=np.float64).reshape(-1, 2)
    c, h, w = img.shape
    r = patch // 2
    offsets = np.arange(-r, r + 1)
    out = np.zeros((len(joints), c, patch, patch), dtype=img.dtype if img.dtype.kind == "f" else np.float32)
    invalid = ~np.all(np.isfinite(joints), axis=1)
    for i, (x, y) in enumerate(joints):
        if invalid[i]:
            continue
        cx, cy = int(math.floor(x + 0.5)), int(math.floor(y + 0.5))
        rows = np.clip(cy + offsets, 0, h - 1)
        cols = np.clip(cx + offsets, 0, w - 1)
        out[i] = img[:, rows[:, None], cols[None, :]]
    return Tensor(out), invalid


class RgbProjection(Module):
    """Trainable map from per-frame features (T, F) to per-node channels (M, C_E, T, N).

    Output element (m, c, t, n) is feature ``(m * C_E + c) * N + n`` of the
    projected frame vector. Batched input (B, T, F) gives (B, M, C_E, T, N).
    """

    def __init__(self, feature_dim: int, embed_dim: int, num_nodes: int, num_persons: int = 1, rng=None, dtype=np.float32):
        super().__init__()
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.num_nodes = num_nodes
        self.num_persons = num_persons
        self.linear = Linear(feature_dim, embed_dim * num_nodes * num_persons, rng=rng, dtype=dtype)

    def forward(self, feat: Tensor) -> Tensor:
        feat = _t(feat)
        if feat.shape[-1] != self.feature_dim:
            raise ShapeError(f"RGB features have F={feat.shape[-1]}, projection expects F={self.feature_dim}")
        y = self.linear(feat)
        m, ce, n = self.num_persons, self.embed_dim, self.num_nodes
        if feat.ndim == 2:
            t = feat.shape[0]
            return y.reshape(t, m, ce, n).permute(1, 2, 0, 3)
        if feat.ndim == 3:
            b, t = feat.shape[:2]
            return y.reshape(b, t, m, ce, n).permute(0, 2, 3, 1, 4)
        raise ShapeError(f"RGB features must be (T, F) or (B, T, F), got {feat.shape}")


def rgb_feature_project(feat: Union[ModalityBlock, TensorLike], projection: RgbProjection) -> Tensor:
    """Project flat per-frame RGB features onto skeleton nodes; differentiable."""
    if isinstance(feat, ModalityBlock):
        _require(feat, RGB)
        feat = feat.tensor
    return projection(_t(feat))
