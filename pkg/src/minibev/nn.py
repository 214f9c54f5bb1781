"""Small parameterized layers shared by the encoders, fusion, and heads.

Layers own their parameter tensors and expose them through named_params()
for the optimizer and checkpointing. Initialization is He-style for convs
feeding the SiLU activation; output layers can be zero-initialized.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from minibev import autodiff as ad
from minibev.autodiff import Tensor


class Conv2d:
    def __init__(self, rng: np.random.Generator, kh: int, kw: int, cin: int, cout: int,
                 stride: int = 1, padding: int | None = None, zero_init: bool = False,
                 bias_init: float = 0.0):
        if padding is None:
            padding = kh // 2
        self.stride = stride
        self.padding = padding
        if zero_init:
            w = np.zeros((kh, kw, cin, cout))
        else:
            w = rng.normal(size=(kh, kw, cin, cout)) * np.sqrt(2.0 / (kh * kw * cin))
        self.w = ad.param(w)
        self.b = ad.param(np.full(cout, bias_init))

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.w, stride=self.stride, padding=self.padding)
        bshape = (1,) * (y.ndim - 1) + (self.b.shape[0],)
        return ad.add(y, ad.reshape(self.b, bshape))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class Linear:
    def __init__(self, rng: np.random.Generator, cin: int, cout: int,
                 zero_init: bool = False, bias: bool = True):
        if zero_init:
            w = np.zeros((cin, cout))
        else:
            w = rng.normal(size=(cin, cout)) * np.sqrt(1.0 / cin)
        self.w = ad.param(w)
        self.b = ad.param(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.w)
        if self.b is None:
            return y
        bshape = (1,) * (y.ndim - 1) + (self.b.shape[0],)
        return ad.add(y, ad.reshape(self.b, bshape))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class ResidualBlock:
    """conv-silu-conv with additive skip, then silu."""

    def __init__(self, rng: np.random.Generator, channels: int):
        self.conv1 = Conv2d(rng, 3, 3, channels, channels)
        self.conv2 = Conv2d(rng, 3, 3, channels, channels)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv2(ad.silu(self.conv1(x)))
        return ad.silu(ad.add(x, y))

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.conv1.named_params(f"{prefix}.conv1")
        yield from self.conv2.named_params(f"{prefix}.conv2")


def collect_params(named: Iterator[tuple[str, Tensor]]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for name, t in named:
        if name in out:
            raise ValueError(f"duplicate parameter name {name}")
        out[name] = t
    return out


def param_count(named: Iterator[tuple[str, Tensor]]) -> int:
    return sum(t.size for _, t in named)


def upsample2x_coords(h_out: int, w_out: int) -> np.ndarray:
    """Bilinear source coordinates mapping an (h, w) map to (h_out, w_out)."""
    r = (np.arange(h_out) + 0.5) / 2.0 - 0.5
    c = (np.arange(w_out) + 0.5) / 2.0 - 0.5
    rr, cc = np.meshgrid(r, c, indexing="ij")
    return np.stack([rr, cc], axis=-1)


def resize_bilinear_np(img: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Plain numpy bilinear resize of (H, W, C) arrays; used for input prep only."""
    H, W = img.shape[:2]
    r = (np.arange(h_out) + 0.5) * (H / h_out) - 0.5
    c = (np.arange(w_out) + 0.5) * (W / w_out) - 0.5
    r0 = np.clip(np.floor(r).astype(int), 0, H - 1)
    c0 = np.clip(np.floor(c).astype(int), 0, W - 1)
    r1 = np.clip(r0 + 1, 0, H - 1)
    c1 = np.clip(c0 + 1, 0, W - 1)
    fr = np.clip(r - r0, 0.0, 1.0)[:, None, None]
    fc = np.clip(c - c0, 0.0, 1.0)[None, :, None]
    a = img[r0][:, c0] * (1 - fr) * (1 - fc)
    b = img[r0][:, c1] * (1 - fr) * fc
    d = img[r1][:, c0] * fr * (1 - fc)
    e = img[r1][:, c1] * fr * fc
    return a + b + d + e
