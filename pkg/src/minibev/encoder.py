"""Dual-complexity image encoding paths with depth lifting.

The large path runs recent frames at full resolution through a deeper
backbone and a richer depth head; the small path runs the remaining
history at half resolution through a shallower one. Both produce
per-camera frustum features via the outer-product lift of 2-D features
with a per-pixel categorical depth distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from minibev import autodiff as ad
from minibev import nn
from minibev.autodiff import ShapeError, Tensor
from minibev.bev import FrustumGeometry, depth_bin_centers
from minibev.scene import Camera, CameraRig, FramePacket


@dataclass(frozen=True)
class EncoderConfig:
    path_kind: str  # "large" | "small"
    input_hw: tuple[int, int]
    stage_channels: tuple[int, ...] = (12, 24, 40)
    stage_blocks: tuple[int, ...] = (1, 1, 1)
    depth_refine_layers: int = 3
    n_depth_bins: int = 32
    depth_range: tuple[float, float] = (1.0, 30.0)
    feature_channels: int = 16

    def __post_init__(self):
        if self.path_kind not in ("large", "small"):
            raise ShapeError(f"unknown encoder path kind {self.path_kind!r}")
        if self.n_depth_bins < 2:
            raise ShapeError(f"need at least 2 depth bins, got {self.n_depth_bins}")
        if self.depth_range[0] <= 0:
            raise ShapeError(f"minimum depth must be positive, got {self.depth_range[0]}")
        if len(self.stage_channels) != len(self.stage_blocks):
            raise ShapeError("stage_channels and stage_blocks must align")

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.stage_channels)

    @property
    def feat_hw(self) -> tuple[int, int]:
        h, w = self.input_hw
        s = self.total_stride
        if h % s or w % s:
            raise ShapeError(f"input {h}x{w} not divisible by total stride {s}")
        return (h // s, w // s)


@dataclass(frozen=True)
class HybridSequenceConfig:
    k_short: int = 2
    m_long: int = 7
    share_backbone: bool = False

    def __post_init__(self):
        if self.k_short < 1:
            raise ShapeError(f"k_short must be >= 1, got {self.k_short}")
        if self.m_long < 0:
            raise ShapeError(f"m_long must be >= 0, got {self.m_long}")

    @property
    def n_frames(self) -> int:
        return self.k_short + self.m_long


class Backbone:
    """Stem + strided stages of residual blocks, with a two-scale lateral merge."""

    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig):
        ch = cfg.stage_channels
        self.stem = nn.Conv2d(rng, 3, 3, 3, ch[0], stride=2)
        self.downs = [
            nn.Conv2d(rng, 3, 3, ch[i - 1], ch[i], stride=2) for i in range(1, len(ch))
        ]
        self.blocks = [
            [nn.ResidualBlock(rng, ch[i]) for _ in range(cfg.stage_blocks[i])]
            for i in range(len(ch))
        ]
        c_out = cfg.feature_channels
        self.lateral_deep = nn.Conv2d(rng, 1, 1, ch[-1], c_out)
        self.lateral_skip = (
            nn.Conv2d(rng, 3, 3, ch[-2], c_out, stride=2) if len(ch) >= 3 else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.silu(self.stem(x))
        for blk in self.blocks[0]:
            y = blk(y)
        skip = None
        for si, down in enumerate(self.downs, start=1):
            y = ad.silu(down(y))
            for blk in self.blocks[si]:
                y = blk(y)
            if si == len(self.downs) - 1:
                skip = y
        deep = self.lateral_deep(y)
        if skip is not None and self.lateral_skip is not None:
            deep = ad.add(deep, self.lateral_skip(skip))
        return ad.silu(deep)

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.stem.named_params(f"{prefix}.stem")
        for i, down in enumerate(self.downs):
            yield from down.named_params(f"{prefix}.down{i + 1}")
        for si, blocks in enumerate(self.blocks):
            for bi, blk in enumerate(blocks):
                yield from blk.named_params(f"{prefix}.stage{si}.block{bi}")
        yield from self.lateral_deep.named_params(f"{prefix}.lateral_deep")
        if self.lateral_skip is not None:
            yield from self.lateral_skip.named_params(f"{prefix}.lateral_skip")


class DepthHead:
    """Camera-aware categorical depth over metric bins.

    Normalized intrinsics gate the feature channels (a squeeze-excite style
    conditioning), then refinement convs and a 1x1 projection produce
    per-pixel bin logits.
    """

    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig):
        c = cfg.feature_channels
        self.cam_gate = nn.Linear(rng, 4, c)
        self.refine = [nn.Conv2d(rng, 3, 3, c, c) for _ in range(cfg.depth_refine_layers)]
        self.out = nn.Conv2d(rng, 1, 1, c, cfg.n_depth_bins)
        self.n_bins = cfg.n_depth_bins

    def __call__(self, feats: Tensor, cam_vecs: np.ndarray) -> Tensor:
        if cam_vecs.shape != (feats.shape[0], 4):
            raise ShapeError(
                f"depth head: camera vectors {cam_vecs.shape} vs features {feats.shape}"
            )
        gate = ad.sigmoid(self.cam_gate(ad.tensor(cam_vecs)))  # (N, C)
        y = ad.mul(feats, ad.reshape(gate, (feats.shape[0], 1, 1, feats.shape[3])))
        for conv in self.refine:
            y = ad.silu(conv(y))
        logits = self.out(y)  # (N, H, W, D)
        dist = ad.softmax(logits, axis=3)
        return ad.transpose(dist, (0, 3, 1, 2))  # (N, D, H, W)

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.cam_gate.named_params(f"{prefix}.cam_gate")
        for i, conv in enumerate(self.refine):
            yield from conv.named_params(f"{prefix}.refine{i}")
        yield from self.out.named_params(f"{prefix}.out")


class ImageEncoder:
    """One encoding path: backbone features plus categorical depth, then lift."""

    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig,
                 backbone: Backbone | None = None):
        self.cfg = cfg
        cfg.feat_hw  # validates divisibility eagerly
        self.backbone = backbone if backbone is not None else Backbone(rng, cfg)
        self._owns_backbone = backbone is None
        self.depth_head = DepthHead(rng, cfg)

    def encode_images(self, images: np.ndarray | Tensor) -> Tensor:
        """(N, H, W, 3) images -> (N, H/8, W/8, C) feature maps."""
        x = images if isinstance(images, Tensor) else ad.tensor(images)
        if x.ndim != 4 or x.shape[1:3] != tuple(self.cfg.input_hw):
            raise ShapeError(
                f"encoder expects (N, {self.cfg.input_hw[0]}, {self.cfg.input_hw[1]}, 3) "
                f"images, got {x.shape}"
            )
        return self.backbone(x)

    def predict_depth(self, feats: Tensor, cameras: list[Camera]) -> Tensor:
        """Per-pixel depth distribution (N, D, H, W); bins sum to one."""
        cam_vecs = np.stack([_normalized_intrinsics(c) for c in cameras])
        if feats.shape[0] != len(cameras):
            raise ShapeError(f"{feats.shape[0]} feature maps vs {len(cameras)} cameras")
        dist = self.depth_head(feats, cam_vecs)
        if dist.shape[1] != self.cfg.n_depth_bins:
            raise ShapeError(
                f"depth head produced {dist.shape[1]} bins, config says "
                f"{self.cfg.n_depth_bins}"
            )
        return dist

    def geometry(self) -> FrustumGeometry:
        h, w = self.cfg.feat_hw
        return FrustumGeometry(
            depth_centers=depth_bin_centers(*self.cfg.depth_range, self.cfg.n_depth_bins),
            feat_h=h, feat_w=w, stride=self.cfg.total_stride,
        )

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        if self._owns_backbone:
            yield from self.backbone.named_params(f"{prefix}.backbone")
        yield from self.depth_head.named_params(f"{prefix}.depth_head")


def _normalized_intrinsics(cam: Camera) -> np.ndarray:
    return np.array([
        cam.fx / cam.width, cam.fy / cam.height,
        cam.cx / cam.width, cam.cy / cam.height,
    ])


def lift(features: Tensor, depth_dist: Tensor) -> Tensor:
    """Outer-product lift: frustum[n, d, y, x, c] = depth[n, d, y, x] * feat[n, y, x, c]."""
    if features.ndim != 4 or depth_dist.ndim != 4:
        raise ShapeError(f"lift: features {features.shape}, depth {depth_dist.shape}")
    n, h, w, c = features.shape
    if depth_dist.shape[0] != n or depth_dist.shape[2:] != (h, w):
        raise ShapeError(
            f"lift: spatial dims differ, features {features.shape} vs depth "
            f"{depth_dist.shape}"
        )
    d = depth_dist.shape[1]
    return ad.mul(
        ad.reshape(depth_dist, (n, d, h, w, 1)),
        ad.reshape(features, (n, 1, h, w, c)),
    )


@dataclass
class FrameFrustum:
    """Per-frame lifted features plus everything needed to splat and supervise."""

    frustum: Tensor  # (n_cam, D, H, W, C)
    depth_dist: Tensor  # (n_cam, D, H, W)
    path_kind: str
    geometry: FrustumGeometry
    cameras: tuple[Camera, ...]
    frame_index: int
    images_hw: tuple[int, int]


class HybridEncoder:
    """Routes the newest k_short frames through the large path, the rest small."""

    def __init__(self, rng: np.random.Generator, large_cfg: EncoderConfig,
                 small_cfg: EncoderConfig, hybrid: HybridSequenceConfig):
        if large_cfg.input_hw[0] * large_cfg.input_hw[1] <= \
                small_cfg.input_hw[0] * small_cfg.input_hw[1]:
            raise ShapeError(
                f"large path resolution {large_cfg.input_hw} must exceed small path "
                f"{small_cfg.input_hw}"
            )
        if hybrid.share_backbone and large_cfg.stage_channels != small_cfg.stage_channels:
            raise ShapeError("share_backbone requires matching stage channels")
        self.hybrid = hybrid
        self.large = ImageEncoder(rng, large_cfg)
        self.small = ImageEncoder(
            rng, small_cfg,
            backbone=self.large.backbone if hybrid.share_backbone else None,
        )
        n_large = nn.param_count(self.large.named_params("l"))
        n_small = nn.param_count(self.small.named_params("s"))
        if not hybrid.share_backbone and n_large <= n_small:
            raise ShapeError(
                f"large path must have more parameters than small "
                f"({n_large} vs {n_small})"
            )

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.large.named_params(f"{prefix}.large")
        yield from self.small.named_params(f"{prefix}.small")

    def path_for_frame(self, position: int, n_frames: int) -> str:
        """Frames are ordered oldest -> newest; the newest k_short go large."""
        return "large" if position >= n_frames - self.hybrid.k_short else "small"

    def encode_sequence(self, frames: list[FramePacket], rig: CameraRig) -> list[FrameFrustum]:
        """Per-frame frustum features, input order preserved.

        Frames routed to the small path are bilinearly downsampled to the
        small config's resolution, with intrinsics rescaled to match. All
        frames of one path are batched through the convolutions together.
        """
        n = len(frames)
        if n != self.hybrid.n_frames:
            raise ShapeError(
                f"sequence length {n} != k_short + m_long = {self.hybrid.n_frames}"
            )
        routes = [self.path_for_frame(i, n) for i in range(n)]
        out: list[FrameFrustum | None] = [None] * n
        for kind, enc in (("large", self.large), ("small", self.small)):
            positions = [i for i in range(n) if routes[i] == kind]
            if not positions:
                continue
            h, w = enc.cfg.input_hw
            cams = scaled_cameras(rig, h, w)
            stack = []
            for i in positions:
                imgs = frames[i].images
                if imgs.shape[1:3] != (h, w):
                    imgs = np.stack([nn.resize_bilinear_np(im, h, w) for im in imgs])
                stack.append(imgs)
            batch = np.concatenate(stack)  # (n_frames_in_path * n_cam, h, w, 3)
            feats = enc.encode_images(batch)
            dist = enc.predict_depth(feats, list(cams) * len(positions))
            frustum = lift(feats, dist)
            n_cam = len(rig)
            geom = enc.geometry()
            for bi, i in enumerate(positions):
                sl = slice(bi * n_cam, (bi + 1) * n_cam)
                out[i] = FrameFrustum(
                    frustum=_slice_batch(frustum, sl),
                    depth_dist=_slice_batch(dist, sl),
                    path_kind=kind,
                    geometry=geom,
                    cameras=cams,
                    frame_index=frames[i].t_index,
                    images_hw=(h, w),
                )
        return [f for f in out if f is not None]


def _slice_batch(t: Tensor, sl: slice) -> Tensor:
    """Differentiable slice along the leading axis."""
    idx = np.arange(t.shape[0])[sl]

    def backward(g):
        out = np.zeros(t.shape)
        out[idx] = g
        return (out,)

    return ad.record_op("slice_batch", np.ascontiguousarray(t.data[sl]), (t,), backward)


def scaled_cameras(rig: CameraRig, h: int, w: int) -> tuple[Camera, ...]:
    """Cameras with intrinsics rescaled for a resized image resolution."""
    out = []
    for cam in rig.cameras:
        sx = w / cam.width
        sy = h / cam.height
        out.append(Camera(
            fx=cam.fx * sx, fy=cam.fy * sy,
            cx=(cam.cx + 0.5) * sx - 0.5, cy=(cam.cy + 0.5) * sy - 0.5,
            rotation=cam.rotation, translation=cam.translation,
            width=w, height=h,
        ))
    return tuple(out)
