"""Minimal float64 tensor library with tape-based reverse-mode autodiff.

Tensors are dense row-major numpy arrays. Operations executed while a Tape
is active are recorded; Tape.backward replays the records in reverse and
accumulates gradients into every reachable tensor with requires_grad set.
Every forward op validates shapes (ShapeError) and output finiteness
(NumericError): NaN/Inf is a hard error, never a silent value.

The op inventory is exactly what the perception pipeline needs: matmul
(2-D and batched), strided/padded 2-D convolution, bilinear resampling,
channel concatenation, broadcast add/sub/mul, scalar scale, softmax,
sigmoid, global average pooling, elementwise two-tensor mean, 3x3 stride-1
max pooling, shape plumbing (reshape/transpose/pad), scaled dot-product
attention, and fused loss primitives with hand-derived backward rules
(kept fused for numerical stability; each is finite-difference checked).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from minibev.kernels import scatter_rows, scatter_rows_weighted


class ShapeError(ValueError):
    """Operands do not conform for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf, or violated a numeric contract."""


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # preserves 0-d shape: already contiguous
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Tape:
    """Ordered record of differentiable ops; replayed in reverse by backward."""

    _tls = threading.local()

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable, bool]] = []

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        stack = getattr(Tape._tls, "stack", None)
        if stack is None:
            stack = Tape._tls.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._tls.stack.pop()

    @staticmethod
    def active() -> "Tape | None":
        stack = getattr(Tape._tls, "stack", None)
        return stack[-1] if stack else None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable,
               fresh: bool = True) -> None:
        self._records.append((out, inputs, backward, fresh))

    def backward(self, root: Tensor) -> None:
        """Populate .grad on every tensor reachable from a scalar root.

        Each record is visited exactly once, in reverse order; records whose
        output received no gradient are skipped. Gradients accumulate (+=)
        when a tensor feeds multiple ops.
        """
        if root.data.shape != ():
            raise ShapeError(f"backward: root must be a scalar, got shape {root.data.shape}")
        root.grad = np.ones((), dtype=np.float64)
        for out, inputs, backward_fn, fresh in reversed(self._records):
            gout = out.grad
            if gout is None:
                continue
            grads = backward_fn(gout)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    # non-fresh rules may return views of gout or shared
                    # arrays, which cannot be adopted as grad buffers
                    t.grad = g if fresh else np.array(g, dtype=np.float64, copy=True)
                else:
                    t.grad += g


def record_op(name: str, out_data: np.ndarray, inputs: tuple[Tensor, ...],
              backward: Callable, fresh: bool = True) -> Tensor:
    """Public hook for custom differentiable ops defined outside this module.

    backward(gout) must return one gradient array (or None) per input; with
    fresh=True those arrays must be newly allocated and pairwise distinct
    (they are adopted as gradient buffers without copying).
    """
    return _record(name, out_data, inputs, backward, fresh)


def _record(name: str, out_data: np.ndarray, inputs: tuple[Tensor, ...],
            backward: Callable, fresh: bool = True) -> Tensor:
    """Finiteness-check the result and record it on the active tape."""
    # the sum is finite iff every element is (inf/nan propagate); one pass,
    # no temporary bool array
    with np.errstate(over="ignore", invalid="ignore"):
        if not np.isfinite(out_data.sum()):
            if not np.all(np.isfinite(out_data)):
                raise NumericError(f"{name}: non-finite value in output")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = Tape.active()
    if tape is not None and needs:
        tape.record(out, inputs, backward, fresh)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), backward, fresh=False)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), backward, fresh=False)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        return (g * s,)

    return _record("scale", a.data * s, (a,), backward)


def mean2(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise mean of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mean2: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        return 0.5 * g, 0.5 * g

    return _record("mean2", 0.5 * (a.data + b.data), (a, b), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _record("reshape", a.data.reshape(shape), (a,), backward, fresh=False)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def pad_spatial(a: Tensor, pad_rows: int, pad_cols: int) -> Tensor:
    """Zero-pad the trailing end of the first two axes of an (X, Y, C) tensor."""
    if a.ndim != 3:
        raise ShapeError(f"pad_spatial: expected rank-3 input, got shape {a.shape}")
    out = np.pad(a.data, ((0, pad_rows), (0, pad_cols), (0, 0)))
    X, Y = a.shape[0], a.shape[1]

    def backward(g):
        return (np.ascontiguousarray(g[:X, :Y, :]),)

    return _record("pad_spatial", out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    base = list(tensors[0].shape)
    ax = axis % len(base)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != ax and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(
                f"concat: shape {t.shape} incompatible with {tensors[0].shape} on axis {ax}"
            )
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=ax))
            for i in range(len(tensors))
        )

    return _record("concat", np.concatenate([t.data for t in tensors], axis=ax),
                   tuple(tensors), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        return (np.full(a.shape, float(g)),)

    return _record("sum_all", np.asarray(a.data.sum()), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.size

    def backward(g):
        return (np.full(a.shape, float(g) / n),)

    return _record("mean_all", np.asarray(a.data.mean()), (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and reductions
# ---------------------------------------------------------------------------

def _expit(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _expit(a.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _record("sigmoid", y, (a,), backward)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); the pipeline's smooth activation, built from suite ops."""
    return mul(a, sigmoid(a))


def softmax(a: Tensor, axis: int) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", y, (a,), backward)


def global_avg_pool(a: Tensor) -> Tensor:
    """Mean over spatial axes: (H, W, C) -> (C,) or (N, H, W, C) -> (N, C)."""
    if a.ndim == 3:
        axes = (0, 1)
    elif a.ndim == 4:
        axes = (1, 2)
    else:
        raise ShapeError(f"global_avg_pool: expected rank 3 or 4, got shape {a.shape}")
    n = a.shape[axes[0]] * a.shape[axes[1]]

    def backward(g):
        expanded = np.expand_dims(np.expand_dims(g, axes[0]), axes[1])
        return (np.broadcast_to(expanded / n, a.shape).copy(),)

    return _record("global_avg_pool", a.data.mean(axis=axes), (a,), backward)


def maxpool3x3(a: Tensor) -> Tensor:
    """3x3 stride-1 max pool with implicit -inf border; output matches input shape."""
    if a.ndim != 3:
        raise ShapeError(f"maxpool3x3: expected rank-3 input, got shape {a.shape}")
    H, W, C = a.shape
    xp = np.pad(a.data, ((1, 1), (1, 1), (0, 0)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1))  # (H, W, C, 3, 3)
    flat = win.reshape(H, W, C, 9)
    tap = flat.argmax(axis=3)
    out = np.take_along_axis(flat, tap[..., None], axis=3)[..., 0]
    ii = np.arange(H)[:, None, None] + tap // 3 - 1
    jj = np.arange(W)[None, :, None] + tap % 3 - 1
    cc = np.broadcast_to(np.arange(C)[None, None, :], tap.shape)
    src = ((ii * W + jj) * C + cc).ravel()

    def backward(g):
        acc = scatter_rows(src, g.reshape(-1, 1), H * W * C)
        return (acc.reshape(H, W, C),)

    return _record("maxpool3x3", np.ascontiguousarray(out), (a,), backward)


# ---------------------------------------------------------------------------
# matmul / convolution / resampling
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

        def backward(g):
            return g @ bd.T, ad.T @ g

        return _record("matmul", ad @ bd, (a, b), backward)

    if ad.ndim == 3 and bd.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        B, M, K = ad.shape
        out = (ad.reshape(B * M, K) @ bd).reshape(B, M, bd.shape[1])

        def backward(g):
            g2 = g.reshape(B * M, -1)
            return (g2 @ bd.T).reshape(ad.shape), ad.reshape(B * M, K).T @ g2

        return _record("matmul", out, (a, b), backward)

    if ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

        def backward(g):
            return g @ bd.swapaxes(1, 2), ad.swapaxes(1, 2) @ g

        return _record("matmul", ad @ bd, (a, b), backward)

    raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")


_COL2IM_INDEX_CACHE: dict[tuple, np.ndarray] = {}


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    N, Hp, Wp, C = xp.shape
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (N, Ho, Wo, kh, kw, C), (s0, s1 * sh, s2 * sw, s1, s2, s3)
    )
    return win.reshape(N * Ho * Wo, kh * kw * C)


def _col2im_index(N: int, Hp: int, Wp: int, Ho: int, Wo: int,
                  kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    key = (N, Hp, Wp, Ho, Wo, kh, kw, sh, sw)
    idx = _COL2IM_INDEX_CACHE.get(key)
    if idx is None:
        n = np.arange(N)[:, None, None, None, None]
        ho = np.arange(Ho)[None, :, None, None, None]
        wo = np.arange(Wo)[None, None, :, None, None]
        ki = np.arange(kh)[None, None, None, :, None]
        kj = np.arange(kw)[None, None, None, None, :]
        idx = ((n * Hp + ho * sh + ki) * Wp + (wo * sw + kj)).ravel().astype(np.int64)
        _COL2IM_INDEX_CACHE[key] = idx
    return idx


def conv2d(x: Tensor, k: Tensor, stride: int | tuple[int, int] = 1,
           padding: int | tuple[int, int] = 0) -> Tensor:
    """2-D convolution over channels-last input.

    x: (H, W, Cin) or (N, H, W, Cin); k: (kh, kw, Cin, Cout). Zero padding.
    Implemented as im2col + GEMM; backward reuses the same column geometry
    with a scatter-add (col2im) for the input gradient.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d: input shape {x.shape}, kernel shape {k.shape}")
    kh, kw, cin, cout = k.shape
    if xd.shape[3] != cin:
        raise ShapeError(
            f"conv2d: input channels {xd.shape[3]} != kernel channels {cin} "
            f"(input {x.shape}, kernel {k.shape})"
        )
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    N, H, W, _ = xd.shape
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if Hp < kh or Wp < kw:
        raise ShapeError(f"conv2d: kernel {k.shape[:2]} larger than padded input {(Hp, Wp)}")
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    xpad = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else xd
    cols = _im2col(xpad, kh, kw, sh, sw)
    k2 = k.data.reshape(kh * kw * cin, cout)
    out = (cols @ k2).reshape(N, Ho, Wo, cout)

    def backward(g):
        g2 = g.reshape(N * Ho * Wo, cout)
        # recompute columns rather than holding them through the whole step
        xpad_b = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else xd
        cols_b = _im2col(xpad_b, kh, kw, sh, sw)
        dk = (cols_b.T @ g2).reshape(k.shape)
        dcols = (g2 @ k2.T).reshape(N * Ho * Wo * kh * kw, cin)
        idx = _col2im_index(N, Hp, Wp, Ho, Wo, kh, kw, sh, sw)
        dxp = scatter_rows(idx, dcols, N * Hp * Wp).reshape(N, Hp, Wp, cin)
        dx = dxp[:, ph:ph + H, pw:pw + W, :] if (ph or pw) else dxp
        if squeeze:
            dx = dx[0]
        return np.ascontiguousarray(dx), dk

    return _record("conv2d", out[0] if squeeze else out, (x, k), backward)


def bilinear_resample(x: Tensor, coords: np.ndarray) -> Tensor:
    """Sample an (H, W, C) tensor at fractional (row, col) positions.

    coords: (Ho, Wo, 2) float array in source pixel units. Samples outside
    the source extent contribute zero. Linear in x; coords are constants.
    """
    if x.ndim != 3 or coords.ndim != 3 or coords.shape[2] != 2:
        raise ShapeError(
            f"bilinear_resample: input shape {x.shape}, coords shape {coords.shape}"
        )
    H, W, C = x.shape
    Ho, Wo = coords.shape[:2]
    r = coords[..., 0].ravel()
    c = coords[..., 1].ravel()
    i0 = np.floor(r).astype(np.int64)
    j0 = np.floor(c).astype(np.int64)
    fr = r - i0
    fc = c - j0
    idxs = []
    ws = []
    for di, dj, w in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        ii = i0 + di
        jj = j0 + dj
        valid = (ii >= 0) & (ii < H) & (jj >= 0) & (jj < W)
        flat = np.where(valid, ii * W + jj, 0)
        idxs.append(np.where(valid, flat, -1))
        ws.append(np.where(valid, w, 0.0))
    xf = x.data.reshape(H * W, C)
    out = np.zeros((Ho * Wo, C))
    for flat, w in zip(idxs, ws):
        out += w[:, None] * xf[np.maximum(flat, 0)]
    idx_cat = np.concatenate(idxs)
    w_cat = np.concatenate(ws)

    def backward(g):
        g2 = g.reshape(Ho * Wo, C)
        tiled = np.tile(g2, (4, 1))
        dx = scatter_rows_weighted(idx_cat, tiled, w_cat, H * W)
        return (dx.reshape(H, W, C),)

    return _record("bilinear_resample", out.reshape(Ho, Wo, C), (x,), backward)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the trailing two axes; 2-D or batched 3-D.

    Fused into one record: only the attention weights are retained for the
    backward pass (this runs inside every temporal-fusion step, so the
    score matrices are the hottest transient in the stack).
    """
    if q.ndim not in (2, 3) or q.ndim != k.ndim or k.ndim != v.ndim:
        raise ShapeError(
            f"scaled_dot_attention: ranks q={q.shape} k={k.shape} v={v.shape}"
        )
    d = q.shape[-1]
    if d == 0 or k.shape[-2] == 0 or q.shape[-2] == 0:
        raise ShapeError(
            f"scaled_dot_attention: empty token/feature axis q={q.shape} k={k.shape}"
        )
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise ShapeError(
            f"scaled_dot_attention: q={q.shape}, k={k.shape}, v={v.shape} do not conform"
        )
    if q.ndim == 3 and (q.shape[0] != k.shape[0] or q.shape[0] != v.shape[0]):
        raise ShapeError(
            f"scaled_dot_attention: batch mismatch q={q.shape} k={k.shape} v={v.shape}"
        )
    inv_sqrt_d = 1.0 / np.sqrt(d)
    kt = k.data.swapaxes(-1, -2)
    s = (q.data @ kt) * inv_sqrt_d
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    a = s  # attention weights, rows sum to one
    out = a @ v.data

    def backward(g):
        gv = a.swapaxes(-1, -2) @ g
        ga = g @ v.data.swapaxes(-1, -2)
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True))
        gq = (gs @ k.data) * inv_sqrt_d
        gk = (gs.swapaxes(-1, -2) @ q.data) * inv_sqrt_d
        return gq, gk, gv

    return _record("scaled_dot_attention", out, (q, k, v), backward)


# ---------------------------------------------------------------------------
# fused loss primitives (stable forward, analytic backward)
# ---------------------------------------------------------------------------

def _loss_weights(shape: tuple[int, ...], mask: np.ndarray | None) -> tuple[np.ndarray, float]:
    if mask is None:
        w = np.ones(shape)
    else:
        w = np.broadcast_to(np.asarray(mask, dtype=np.float64), shape)
    return w, max(float(w.sum()), 1.0)


def bce_probs(p: Tensor, target: np.ndarray, mask: np.ndarray | None = None,
              eps: float = 1e-12) -> Tensor:
    """Mean binary cross entropy against probabilities in (0, 1).

    Probabilities are clamped to [eps, 1-eps]; the gradient is zero in the
    clamped region. mask broadcasts against p and reweights the mean.
    """
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), p.shape)
    w, norm = _loss_weights(p.shape, mask)
    pc = np.clip(p.data, eps, 1.0 - eps)
    loss = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    val = float((w * loss).sum() / norm)
    inside = (p.data > eps) & (p.data < 1.0 - eps)

    def backward(g):
        dp = -(t / pc) + (1.0 - t) / (1.0 - pc)
        return (float(g) * w * inside * dp / norm,)

    return _record("bce_probs", np.asarray(val), (p,), backward)


def sigmoid_focal_loss(logits: Tensor, target: np.ndarray, alpha: float | None = 0.25,
                       gamma: float = 2.0, mask: np.ndarray | None = None) -> Tensor:
    """Mean focal loss on logits; with alpha=None and gamma=0 this is exactly BCE."""
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), logits.shape)
    w, norm = _loss_weights(logits.shape, mask)
    z = logits.data
    p = _expit(z)
    log_p = -np.logaddexp(0.0, -z)
    log_1p = -np.logaddexp(0.0, z)
    pos = -np.power(1.0 - p, gamma) * log_p
    neg = -np.power(p, gamma) * log_1p
    if alpha is None:
        wp, wn = 1.0, 1.0
    else:
        wp, wn = float(alpha), 1.0 - float(alpha)
    loss = wp * t * pos + wn * (1.0 - t) * neg
    val = float((w * loss).sum() / norm)

    def backward(g):
        dpos = gamma * p * np.power(1.0 - p, gamma) * log_p - np.power(1.0 - p, gamma + 1.0)
        dneg = -gamma * (1.0 - p) * np.power(p, gamma) * log_1p + np.power(p, gamma + 1.0)
        dz = wp * t * dpos + wn * (1.0 - t) * dneg
        return (float(g) * w * dz / norm,)

    return _record("sigmoid_focal_loss", np.asarray(val), (logits,), backward)


def gaussian_focal_loss(logits: Tensor, heatmap: np.ndarray, alpha: float = 2.0,
                        beta: float = 4.0) -> Tensor:
    """Center-heatmap focal loss on logits against a Gaussian-splatted target.

    Cells with target exactly 1 are positives; all others are negatives
    down-weighted by (1 - target)^beta. Normalized by the positive count.
    """
    h = np.broadcast_to(np.asarray(heatmap, dtype=np.float64), logits.shape)
    z = logits.data
    p = _expit(z)
    log_p = -np.logaddexp(0.0, -z)
    log_1p = -np.logaddexp(0.0, z)
    pos_mask = h >= 1.0
    n_pos = max(1.0, float(pos_mask.sum()))
    neg_w = np.power(1.0 - h, beta) * (~pos_mask)
    loss = -(pos_mask * np.power(1.0 - p, alpha) * log_p + neg_w * np.power(p, alpha) * log_1p)
    val = float(loss.sum() / n_pos)

    def backward(g):
        dpos = alpha * p * np.power(1.0 - p, alpha) * log_p - np.power(1.0 - p, alpha + 1.0)
        dneg = -alpha * (1.0 - p) * np.power(p, alpha) * log_1p + np.power(p, alpha + 1.0)
        dz = pos_mask * dpos + neg_w * dneg
        return (float(g) * dz / n_pos,)

    return _record("gaussian_focal_loss", np.asarray(val), (logits,), backward)


def weighted_l1_loss(pred: Tensor, target: np.ndarray, weights: np.ndarray,
                     norm: float) -> Tensor:
    """sum(weights * |pred - target|) / norm with sign-based backward."""
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), pred.shape)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), pred.shape)
    norm = max(float(norm), 1e-12)
    diff = pred.data - t
    val = float((w * np.abs(diff)).sum() / norm)

    def backward(g):
        return (float(g) * w * np.sign(diff) / norm,)

    return _record("weighted_l1_loss", np.asarray(val), (pred,), backward)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor] | dict[str, Tensor],
               h: float = 1e-5, sample: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must be a deterministic scalar-valued function of the given parameter
    tensors (checked by evaluating twice). With sample set, at most that
    many coordinates per tensor are checked (seeded subset); otherwise all.
    Relative error per coordinate: |a - n| / max(1e-8, |a| + |n|).
    """
    if isinstance(params, dict):
        plist = list(params.values())
    else:
        plist = list(params)
    y0 = f()
    y1 = f()
    if not np.array_equal(y0.data, y1.data):
        raise NumericError("grad_check: f is not deterministic under repeated evaluation")

    for t in plist:
        t.grad = None
    with Tape() as tape:
        y = f()
        if y.data.shape != ():
            raise ShapeError(f"grad_check: f must return a scalar, got shape {y.data.shape}")
        tape.backward(y)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in plist]

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for t, an in zip(plist, analytic):
        n_coords = t.size
        if sample is not None and n_coords > sample:
            coords = rng.choice(n_coords, size=sample, replace=False)
        else:
            coords = range(n_coords)
        flat = t.data.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = an.reshape(-1)[i]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst
