"""Per-task BEV processing: adaptive channel selection, independent task
encoders, center-heatmap detection, multi-label segmentation, and the
weighted total loss.

Detection and segmentation each get their own grid size, selector, and
encoder; the two branches share no parameters, so gradients of one task's
loss cannot touch the other's weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from minibev import autodiff as ad
from minibev import nn
from minibev.autodiff import ShapeError, Tensor
from minibev.bev import BEVGrid

REG_CHANNELS = 8  # dx, dy, log l, log w, sin yaw, cos yaw, vx, vy
SEG_CLASSES = ("vehicle", "drivable", "divider")


class AdaptiveSelector:
    """Per-channel sigmoid gate from globally pooled features."""

    def __init__(self, rng: np.random.Generator, channels: int, task: str,
                 zero_init: bool = False):
        self.task = task
        self.channels = channels
        if zero_init:
            w = np.zeros((channels, channels))
        else:
            w = rng.normal(size=(channels, channels)) * np.sqrt(1.0 / channels)
        self.w = ad.param(w)

    def __call__(self, F: Tensor) -> Tensor:
        if F.ndim != 3 or F.shape[2] != self.channels:
            raise ShapeError(
                f"adaptive_select[{self.task}]: expected (X, Y, {self.channels}), "
                f"got {F.shape}"
            )
        pooled = ad.reshape(ad.global_avg_pool(F), (1, self.channels))
        gate = ad.sigmoid(ad.matmul(pooled, self.w))
        return ad.mul(F, ad.reshape(gate, (1, 1, self.channels)))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w


def adaptive_select(F: Tensor, selector: AdaptiveSelector) -> Tensor:
    return selector(F)


class TaskEncoder:
    """Three residual blocks with a two-level pyramid and lateral fusion.

    Output spatial extent equals the input extent; weights are per-task.
    """

    def __init__(self, rng: np.random.Generator, channels: int, task: str):
        self.task = task
        self.channels = channels
        self.block1 = nn.ResidualBlock(rng, channels)
        self.down = nn.Conv2d(rng, 3, 3, channels, channels, stride=2)
        self.block2 = nn.ResidualBlock(rng, channels)
        self.block3 = nn.ResidualBlock(rng, channels)
        self.lateral = nn.Conv2d(rng, 1, 1, channels, channels)
        self.up_proj = nn.Conv2d(rng, 1, 1, channels, channels)
        self.out_conv = nn.Conv2d(rng, 3, 3, channels, channels)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.channels:
            raise ShapeError(
                f"task encoder[{self.task}]: expected (X, Y, {self.channels}), got {x.shape}"
            )
        f_full = self.block1(x)
        f_half = self.block3(self.block2(ad.silu(self.down(f_full))))
        up = ad.bilinear_resample(
            self.up_proj(f_half), nn.upsample2x_coords(x.shape[0], x.shape[1])
        )
        merged = ad.add(self.lateral(f_full), up)
        return ad.silu(self.out_conv(ad.silu(merged)))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.block1.named_params(f"{prefix}.block1")
        yield from self.down.named_params(f"{prefix}.down")
        yield from self.block2.named_params(f"{prefix}.block2")
        yield from self.block3.named_params(f"{prefix}.block3")
        yield from self.lateral.named_params(f"{prefix}.lateral")
        yield from self.up_proj.named_params(f"{prefix}.up_proj")
        yield from self.out_conv.named_params(f"{prefix}.out_conv")


class DetectionHead:
    """Center heatmap + per-cell box regression over the detection grid."""

    def __init__(self, rng: np.random.Generator, channels: int, n_classes: int = 1,
                 heatmap_bias: float = -2.94):
        self.n_classes = n_classes
        self.trunk = nn.Conv2d(rng, 3, 3, channels, channels)
        self.heat = nn.Conv2d(rng, 1, 1, channels, n_classes, bias_init=heatmap_bias)
        self.reg = nn.Conv2d(rng, 1, 1, channels, REG_CHANNELS)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        y = ad.silu(self.trunk(x))
        return self.heat(y), self.reg(y)

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.trunk.named_params(f"{prefix}.trunk")
        yield from self.heat.named_params(f"{prefix}.heat")
        yield from self.reg.named_params(f"{prefix}.reg")


class SegmentationHead:
    """Independent per-class logits (multi-label; classes may overlap)."""

    def __init__(self, rng: np.random.Generator, channels: int,
                 n_classes: int = len(SEG_CLASSES)):
        self.n_classes = n_classes
        self.trunk = nn.Conv2d(rng, 3, 3, channels, channels)
        self.out = nn.Conv2d(rng, 1, 1, channels, n_classes)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(ad.silu(self.trunk(x)))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.trunk.named_params(f"{prefix}.trunk")
        yield from self.out.named_params(f"{prefix}.out")


def binarize(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Probability >= threshold convention (logit 0 at threshold 0.5 is in)."""
    probs = 1.0 / (1.0 + np.exp(-np.asarray(logits)))
    return probs >= threshold


@dataclass
class Detection:
    x: float
    y: float
    length: float
    width: float
    yaw: float
    vx: float
    vy: float
    score: float
    cls: int


def decode_detections(heatmap_logits: np.ndarray, regression: np.ndarray,
                      grid: BEVGrid, score_thresh: float = 0.25,
                      max_dets: int = 24) -> list[Detection]:
    """Peaks of the sigmoid heatmap (3x3 local maxima) decoded to metric boxes."""
    heat = 1.0 / (1.0 + np.exp(-heatmap_logits))
    nx, ny, n_cls = heat.shape
    xp = np.pad(heat, ((1, 1), (1, 1), (0, 0)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1))
    local_max = win.reshape(nx, ny, n_cls, 9).max(axis=3)
    peaks = (heat >= local_max) & (heat >= score_thresh)
    dets: list[Detection] = []
    for i, j, c in zip(*np.nonzero(peaks)):
        r = regression[i, j]
        cx = (i - nx / 2 + 0.5) * grid.cell_m + r[0]
        cy = (j - ny / 2 + 0.5) * grid.cell_m + r[1]
        dets.append(Detection(
            x=float(cx), y=float(cy),
            length=float(np.exp(r[2])), width=float(np.exp(r[3])),
            yaw=float(np.arctan2(r[4], r[5])),
            vx=float(r[6]), vy=float(r[7]),
            score=float(heat[i, j, c]), cls=int(c),
        ))
    dets.sort(key=lambda d: -d.score)
    return dets[:max_dets]


@dataclass(frozen=True)
class LossWeights:
    depth: float = 3.0
    cls: float = 1.0
    bbox: float = 0.25
    seg_vehicle: float = 1.0
    seg_drivable: float = 1.0
    seg_divider: float = 1.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not np.isfinite(v) or v < 0:
                raise ShapeError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class TaskOutputs:
    heatmap_logits: Tensor
    regression: Tensor
    seg_logits: Tensor
    depth_terms: list[tuple[Tensor, np.ndarray, np.ndarray]]  # (dist, one-hot, mask)


@dataclass
class TaskTargets:
    heatmap: np.ndarray
    regression: np.ndarray
    reg_mask: np.ndarray
    seg_masks: np.ndarray  # (X_s, Y_s, 3)


def depth_to_bins(depth_map: np.ndarray, d_min: float, d_max: float,
                  n_bins: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Min-pool a metric depth map to feature resolution and one-hot bin it.

    Zeros (no hit) are ignored by the min pooling; pixels with no valid
    depth in range are masked out. Returns (one_hot (D, H, W), mask (1, H, W)).
    """
    H, W = depth_map.shape
    h, w = H // stride, W // stride
    blocks = depth_map[:h * stride, :w * stride].reshape(h, stride, w, stride)
    blocks = blocks.transpose(0, 2, 1, 3).reshape(h, w, stride * stride)
    masked = np.where(blocks > 0, blocks, np.inf)
    nearest = masked.min(axis=2)
    width = (d_max - d_min) / n_bins
    bins = np.floor((nearest - d_min) / width).astype(np.int64)
    valid = np.isfinite(nearest) & (bins >= 0) & (bins < n_bins)
    one_hot = np.zeros((n_bins, h, w))
    ii, jj = np.nonzero(valid)
    one_hot[bins[valid], ii, jj] = 1.0
    return one_hot, valid[None].astype(np.float64)


def total_loss(outputs: TaskOutputs, targets: TaskTargets,
               w: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of depth, heatmap, box-regression, and per-class seg losses.

    Terms with zero weight are skipped entirely; the returned dict carries
    each term's unweighted value for logging.
    """
    terms: dict[str, float] = {}
    total = ad.tensor(0.0)

    if w.depth > 0 and outputs.depth_terms:
        depth_losses = []
        for dist, one_hot, mask in outputs.depth_terms:
            depth_losses.append(ad.bce_probs(dist, one_hot, mask=mask))
        depth = depth_losses[0]
        for extra in depth_losses[1:]:
            depth = ad.add(depth, extra)
        depth = ad.scale(depth, 1.0 / len(depth_losses))
        terms["depth"] = depth.item()
        total = ad.add(total, ad.scale(depth, w.depth))

    if w.cls > 0:
        cls = ad.gaussian_focal_loss(outputs.heatmap_logits, targets.heatmap)
        terms["cls"] = cls.item()
        total = ad.add(total, ad.scale(cls, w.cls))

    if w.bbox > 0:
        n_pos = max(1.0, float(targets.reg_mask.sum()))
        bbox = ad.weighted_l1_loss(
            outputs.regression, targets.regression, targets.reg_mask,
            norm=n_pos * REG_CHANNELS,
        )
        terms["bbox"] = bbox.item()
        total = ad.add(total, ad.scale(bbox, w.bbox))

    seg_weights = (w.seg_vehicle, w.seg_drivable, w.seg_divider)
    for ci, (name, sw) in enumerate(zip(SEG_CLASSES, seg_weights)):
        if sw <= 0:
            continue
        logits_c = _slice_channel(outputs.seg_logits, ci)
        seg = ad.sigmoid_focal_loss(
            logits_c, targets.seg_masks[:, :, ci], alpha=0.25, gamma=2.0
        )
        terms[f"seg_{name}"] = seg.item()
        total = ad.add(total, ad.scale(seg, sw))

    return total, terms


def _slice_channel(t: Tensor, c: int) -> Tensor:
    def backward(g):
        out = np.zeros(t.shape)
        out[:, :, c] = g
        return (out,)

    return ad.record_op("slice_channel", np.ascontiguousarray(t.data[:, :, c]),
                        (t,), backward)
