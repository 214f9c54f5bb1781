"""Temporal integration of ego-aligned BEV feature sequences.

The core unit fuses two adjacent frames: per-cell queries come from the
channel concatenation of both frames, keys/values from each frame
separately, and attention runs independently inside non-overlapping w x w
windows. A learnable scalar gate (initialized to zero, so fusion starts
as the identity) scales the averaged attention output added onto the
target frame. A backward sweep (current to oldest) followed by a forward
sweep (oldest to current) propagates information across the sequence.

fuse_baseline implements the reference variants used by the temporal
ablation: global concat+conv, global attention, sweeps with concat+conv
in place of attention, and forward-only attention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from minibev import autodiff as ad
from minibev import nn
from minibev.autodiff import ShapeError, Tensor
from minibev.bev import BEVFeature

GLOBAL_ATTENTION_TOKEN_BUDGET = 8192


class AFFMParams:
    """Projections and gate for adjacent-frame fusion; shared across all steps."""

    def __init__(self, rng: np.random.Generator, channels: int, window: int = 4,
                 gamma_init: float = 0.0):
        if window < 1:
            raise ShapeError(f"window size must be >= 1, got {window}")
        c = channels
        self.channels = c
        self.window = window
        self.wq = ad.param(rng.normal(size=(2 * c, c)) * np.sqrt(1.0 / (2 * c)))
        self.wk = ad.param(rng.normal(size=(c, c)) * np.sqrt(1.0 / c))
        self.wv = ad.param(rng.normal(size=(c, c)) * np.sqrt(1.0 / c))
        self.gamma = ad.param(np.full((1,), float(gamma_init)))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.wq", self.wq
        yield f"{prefix}.wk", self.wk
        yield f"{prefix}.wv", self.wv
        yield f"{prefix}.gamma", self.gamma


def window_partition(x: Tensor, w: int) -> tuple[Tensor, tuple[int, int, int]]:
    """(X, Y, C) -> (n_windows, w*w, C) tokens; pads bottom/right if needed."""
    X, Y, C = x.shape
    pad_x = (-X) % w
    pad_y = (-Y) % w
    if pad_x or pad_y:
        x = ad.pad_spatial(x, pad_x, pad_y)
    Xp, Yp = X + pad_x, Y + pad_y
    gx, gy = Xp // w, Yp // w
    t = ad.reshape(x, (gx, w, gy, w, C))
    t = ad.transpose(t, (0, 2, 1, 3, 4))
    return ad.reshape(t, (gx * gy, w * w, C)), (Xp, Yp, C)


def window_merge(tokens: Tensor, padded_shape: tuple[int, int, int], w: int,
                 out_shape: tuple[int, int, int]) -> Tensor:
    Xp, Yp, C = padded_shape
    gx, gy = Xp // w, Yp // w
    t = ad.reshape(tokens, (gx, gy, w, w, C))
    t = ad.transpose(t, (0, 2, 1, 3, 4))
    x = ad.reshape(t, (Xp, Yp, C))
    if (Xp, Yp) != out_shape[:2]:
        x = _crop_spatial(x, out_shape[0], out_shape[1])
    return x


def _crop_spatial(x: Tensor, X: int, Y: int) -> Tensor:
    def backward(g):
        out = np.zeros(x.shape)
        out[:X, :Y, :] = g
        return (out,)

    return ad.record_op("crop_spatial", np.ascontiguousarray(x.data[:X, :Y, :]),
                        (x,), backward)


def _project_tokens(tokens: Tensor, weight: Tensor) -> Tensor:
    return ad.matmul(tokens, weight)  # (nw, T, C) @ (C, C')


def affm(f_i: Tensor, f_j: Tensor, p: AFFMParams) -> Tensor:
    """Fuse frame i into frame j: f_j + gamma * Avg(Atn(q, k_i, v_i), Atn(q, k_j, v_j)).

    Queries are per-cell projections of the concatenated pair; attention is
    evaluated over the cells of each w x w window independently.
    """
    if f_i.shape != f_j.shape:
        raise ShapeError(f"affm: shapes differ, {f_i.shape} vs {f_j.shape}")
    if f_i.ndim != 3 or f_i.shape[2] != p.channels:
        raise ShapeError(
            f"affm: expected (X, Y, {p.channels}) features, got {f_i.shape}"
        )
    ti, padded = window_partition(f_i, p.window)
    tj, _ = window_partition(f_j, p.window)
    q = _project_tokens(ad.concat([ti, tj], axis=-1), p.wq)
    att_i = ad.scaled_dot_attention(q, _project_tokens(ti, p.wk), _project_tokens(ti, p.wv))
    att_j = ad.scaled_dot_attention(q, _project_tokens(tj, p.wk), _project_tokens(tj, p.wv))
    fused = ad.mul(ad.mean2(att_i, att_j), ad.reshape(p.gamma, (1, 1, 1)))
    return window_merge(ad.add(tj, fused), padded, p.window, f_j.shape)


@dataclass
class BEVSequence:
    """Ego-aligned BEV features ordered oldest -> current (index -1 is current)."""

    features: list[Tensor]

    def __post_init__(self):
        if not self.features:
            raise ShapeError("BEVSequence needs at least one frame")
        shape = self.features[0].shape
        for f in self.features[1:]:
            if f.shape != shape:
                raise ShapeError(
                    f"BEVSequence shapes differ: {f.shape} vs {shape}"
                )

    @classmethod
    def from_bev_features(cls, feats: list[BEVFeature]) -> "BEVSequence":
        pose = feats[-1].pose
        for f in feats:
            if f.pose != pose:
                raise ShapeError("BEVSequence requires features aligned to one pose")
        return cls(features=[f.tensor for f in feats])

    def __len__(self) -> int:
        return len(self.features)


def integrate(seq: BEVSequence | list[Tensor], p: AFFMParams) -> Tensor:
    """Backward then forward adjacent-fusion sweeps; returns the current frame.

    Works on a copy of the sequence: within a sweep, later steps see the
    frames already updated by earlier steps, and callers' inputs are never
    mutated.
    """
    feats = seq.features if isinstance(seq, BEVSequence) else list(seq)
    if not feats:
        raise ShapeError("integrate: empty sequence")
    work = list(feats)  # work[k] holds f_{-(n-1-k)}; work[-1] is f_0
    n = len(work)
    for i in range(0, n - 1):
        # f_{-(i+1)} <- affm(f_{-i}, f_{-(i+1)})
        work[n - 2 - i] = affm(work[n - 1 - i], work[n - 2 - i], p)
    for i in range(n - 2, -1, -1):
        # f_{-i} <- affm(f_{-(i+1)}, f_{-i})
        work[n - 1 - i] = affm(work[n - 2 - i], work[n - 1 - i], p)
    return work[-1]


BASELINE_KINDS = (
    "global_concat_conv",
    "global_attention",
    "adjacent_concat_conv",
    "forward_only_affm",
    "backward_forward_adjacent_concat_conv",
)


class FusionBaseline:
    """Reference temporal-fusion variants for the ablation suite.

    Convolutional variants are identity-initialized (their output starts as
    the current frame's channels), mirroring the zero-initialized gate of
    the attention variants, so every method starts from the same point.
    """

    def __init__(self, rng: np.random.Generator, kind: str, channels: int,
                 n_frames: int, window: int = 8,
                 token_budget: int = GLOBAL_ATTENTION_TOKEN_BUDGET):
        if kind not in BASELINE_KINDS:
            raise ShapeError(f"unknown fusion baseline {kind!r}")
        self.kind = kind
        self.channels = channels
        self.n_frames = n_frames
        self.window = window
        self.token_budget = token_budget
        c = channels
        if kind == "global_concat_conv":
            self.conv = _identity_concat_conv(n_frames, c, pick_last=True)
        elif kind in ("adjacent_concat_conv", "backward_forward_adjacent_concat_conv"):
            self.conv = _identity_concat_conv(2, c, pick_last=True)
        elif kind == "forward_only_affm":
            self.affm = AFFMParams(rng, c, window=window)
        elif kind == "global_attention":
            self.wq = ad.param(rng.normal(size=(c, c)) * np.sqrt(1.0 / c))
            self.wk = ad.param(rng.normal(size=(c, c)) * np.sqrt(1.0 / c))
            self.wv = ad.param(rng.normal(size=(c, c)) * np.sqrt(1.0 / c))
            self.gamma = ad.param(np.zeros(1))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        if self.kind in ("global_concat_conv", "adjacent_concat_conv",
                         "backward_forward_adjacent_concat_conv"):
            yield from self.conv.named_params(f"{prefix}.conv")
        elif self.kind == "forward_only_affm":
            yield from self.affm.named_params(f"{prefix}.affm")
        elif self.kind == "global_attention":
            yield f"{prefix}.wq", self.wq
            yield f"{prefix}.wk", self.wk
            yield f"{prefix}.wv", self.wv
            yield f"{prefix}.gamma", self.gamma

    def __call__(self, seq: BEVSequence | list[Tensor]) -> Tensor:
        feats = seq.features if isinstance(seq, BEVSequence) else list(seq)
        if not feats:
            raise ShapeError("fuse_baseline: empty sequence")
        n = len(feats)
        if n == 1:
            return feats[0]
        if self.kind == "global_concat_conv":
            if n != self.n_frames:
                raise ShapeError(f"baseline built for {self.n_frames} frames, got {n}")
            return self.conv(ad.concat(feats, axis=-1))
        if self.kind == "adjacent_concat_conv":
            work = list(feats)
            for i in range(n - 2, -1, -1):
                work[n - 1 - i] = self.conv(
                    ad.concat([work[n - 2 - i], work[n - 1 - i]], axis=-1)
                )
            return work[-1]
        if self.kind == "backward_forward_adjacent_concat_conv":
            work = list(feats)
            for i in range(0, n - 1):
                work[n - 2 - i] = self.conv(
                    ad.concat([work[n - 1 - i], work[n - 2 - i]], axis=-1)
                )
            for i in range(n - 2, -1, -1):
                work[n - 1 - i] = self.conv(
                    ad.concat([work[n - 2 - i], work[n - 1 - i]], axis=-1)
                )
            return work[-1]
        if self.kind == "forward_only_affm":
            work = list(feats)
            for i in range(n - 2, -1, -1):
                work[n - 1 - i] = affm(work[n - 2 - i], work[n - 1 - i], self.affm)
            return work[-1]
        # global attention: current-frame cells query the cells of every frame
        current = feats[-1]
        X, Y, C = current.shape
        n_tokens = n * X * Y
        if n_tokens > self.token_budget:
            raise ShapeError(
                f"global attention over {n_tokens} tokens exceeds the budget "
                f"{self.token_budget}"
            )
        qt = ad.reshape(ad.matmul(ad.reshape(current, (X * Y, C)), self.wq), (1, X * Y, C))
        all_cells = ad.concat([ad.reshape(f, (X * Y, C)) for f in feats], axis=0)
        kt = ad.reshape(ad.matmul(all_cells, self.wk), (1, n_tokens, C))
        vt = ad.reshape(ad.matmul(all_cells, self.wv), (1, n_tokens, C))
        att = ad.reshape(ad.scaled_dot_attention(qt, kt, vt), (X, Y, C))
        return ad.add(current, ad.mul(att, ad.reshape(self.gamma, (1, 1, 1))))


class _IdentityConcatConv:
    """3x3 conv over concatenated frames whose center tap starts as identity."""

    def __init__(self, n_frames: int, channels: int, pick_last: bool):
        w = np.zeros((3, 3, n_frames * channels, channels))
        block = (n_frames - 1) * channels if pick_last else 0
        for c in range(channels):
            w[1, 1, block + c, c] = 1.0
        self.w = ad.param(w)
        self.b = ad.param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.w, stride=1, padding=1)
        return ad.add(y, ad.reshape(self.b, (1, 1, self.b.shape[0])))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


def _identity_concat_conv(n_frames: int, channels: int,
                          pick_last: bool) -> _IdentityConcatConv:
    return _IdentityConcatConv(n_frames, channels, pick_last)


def fuse_baseline(seq: BEVSequence | list[Tensor], baseline: FusionBaseline) -> Tensor:
    return baseline(seq)
