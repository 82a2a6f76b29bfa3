"""Differentiable tensor primitives.

Values are plain float64 numpy arrays in C (row-major) order; shape metadata
and the flat-data invariant come with the ndarray. Every primitive returns a
GradPair: the forward value plus a backward closure that holds whatever
per-op context the backward pass needs. Calling ``backward(upstream)`` with
an array shaped like the value returns one gradient per forward input, in
argument order (inputs first, then parameters).

All primitives are pure: same inputs (and same generator state, for dropout)
give bitwise-identical outputs, so they are safe to call from many threads
on distinct outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, ShapeError

Tensor = np.ndarray


@dataclass
class GradPair:
    """Forward value plus the backward pass for one primitive application."""

    value: np.ndarray
    backward: Callable[[np.ndarray], tuple[np.ndarray, ...]]


def as_tensor(x) -> np.ndarray:
    """Coerce to a float64 C-order array."""
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def _require_shape(x: np.ndarray, ndim: int, what: str) -> None:
    if x.ndim != ndim:
        raise ShapeError(f"{what} must be {ndim}-d, got shape {x.shape}")


# ---------------------------------------------------------------------------
# dense / conv / pooling
# ---------------------------------------------------------------------------


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> GradPair:
    """Affine map: out[b, j] = sum_i x[b, i] * W[i, j] + bias[j]."""
    _require_shape(x, 2, "dense input")
    _require_shape(weights, 2, "dense weights")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"dense: input shape {x.shape} does not match weights shape {weights.shape}"
        )
    if bias.shape != (weights.shape[1],):
        raise ShapeError(
            f"dense: bias shape {bias.shape} does not match weights shape {weights.shape}"
        )
    out = x @ weights + bias

    def backward(up: np.ndarray) -> tuple[np.ndarray, ...]:
        return up @ weights.T, x.T @ up, up.sum(axis=0)

    return GradPair(out, backward)


def conv_output_size(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Output extent and (before, after) pad amounts for one spatial axis."""
    if padding == "valid":
        if k > size:
            raise ShapeError(f"kernel extent {k} larger than input extent {size}")
        return (size - k) // stride + 1, 0, 0
    if padding == "same":
        out = -(-size // stride)  # ceil
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    raise ParameterError(f"unknown padding {padding!r}; expected 'valid' or 'same'")


def conv2d(
    x: Tensor,
    kernels: Tensor,
    bias: Tensor,
    padding: str = "valid",
    stride: int = 1,
) -> GradPair:
    """Batched 2-d cross-correlation (no kernel flip) over [b, c, h, w].

    Kernels are [filters, c, kh, kw]; output is [b, filters, h', w'] with
    h' = (h - kh) // stride + 1 under valid padding.
    """
    _require_shape(x, 4, "conv2d input")
    _require_shape(kernels, 4, "conv2d kernels")
    if not (isinstance(stride, (int, np.integer)) and stride >= 1):
        raise ParameterError(f"conv2d stride must be a positive int, got {stride!r}")
    b, c, h, w = x.shape
    f, ck, kh, kw = kernels.shape
    if ck != c:
        raise ShapeError(
            f"conv2d: input shape {x.shape} has {c} channels but kernels shape "
            f"{kernels.shape} expect {ck}"
        )
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {f} filters")

    out_h, pad_t, pad_b = conv_output_size(h, kh, stride, padding)
    out_w, pad_l, pad_r = conv_output_size(w, kw, stride, padding)
    if pad_t or pad_b or pad_l or pad_r:
        xp = np.pad(x, ((0, 0), (0, 0), (pad_t, pad_b), (pad_l, pad_r)))
    else:
        xp = x
    if kh > xp.shape[2] or kw > xp.shape[3]:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{xp.shape[2]}x{xp.shape[3]}"
        )

    # im2col: one gather shared by the forward GEMM and both backward GEMMs
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(b * out_h * out_w, c * kh * kw)
    w2 = kernels.reshape(f, c * kh * kw)
    out = (cols @ w2.T).reshape(b, out_h, out_w, f)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias[None, :, None, None]

    def backward(up: np.ndarray) -> tuple[np.ndarray, ...]:
        d_bias = up.sum(axis=(0, 2, 3))
        up_flat = up.transpose(0, 2, 3, 1).reshape(b * out_h * out_w, f)
        d_kernels = (up_flat.T @ cols).reshape(f, c, kh, kw)
        # col2im: strided adds per kernel tap scatter the column gradient back
        d_cols = (up_flat @ w2).reshape(b, out_h, out_w, c, kh, kw)
        d_cols = d_cols.transpose(0, 3, 1, 2, 4, 5)
        d_xp = np.zeros_like(xp) if xp is not x else np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                d_xp[
                    :,
                    :,
                    i : i + (out_h - 1) * stride + 1 : stride,
                    j : j + (out_w - 1) * stride + 1 : stride,
                ] += d_cols[:, :, :, :, i, j]
        d_x = d_xp[:, :, pad_t : pad_t + h, pad_l : pad_l + w]
        if not (d_x.flags.owndata and d_x.flags.c_contiguous):
            d_x = np.ascontiguousarray(d_x)
        return d_x, d_kernels, d_bias

    return GradPair(out, backward)


def maxpool2d(
    x: Tensor,
    window: tuple[int, int] = (2, 2),
    stride: tuple[int, int] = (2, 2),
    padding: str = "valid",
) -> GradPair:
    """Windowed max over [b, c, h, w]; defaults halve the spatial extents.

    With the default 2x2/2 configuration odd trailing rows/columns are
    dropped (floor division). Gradient routes to the first maximal element
    of each window in row-major scan order.
    """
    _require_shape(x, 4, "maxpool2d input")
    wh, ww = window
    sh, sw = stride
    b, c, h, w = x.shape
    out_h, pad_t, pad_b = conv_output_size(h, wh, sh, padding)
    out_w, pad_l, pad_r = conv_output_size(w, ww, sw, padding)

    if padding == "valid" and window == (2, 2) and (sh, sw) == (2, 2):
        # The dominant 2x2/2 case: three maximum passes beat the argmax
        # machinery; boolean routing keeps the first-maximal row-major
        # tie-break of the general path.
        hc, wc = out_h * 2, out_w * 2
        xt = x[:, :, :hc, :wc]
        a = xt[:, :, 0::2, 0::2]
        b_ = xt[:, :, 0::2, 1::2]
        c_ = xt[:, :, 1::2, 0::2]
        d_ = xt[:, :, 1::2, 1::2]
        out = np.maximum(np.maximum(a, b_), np.maximum(c_, d_))

        def backward(up: np.ndarray) -> tuple[np.ndarray, ...]:
            d_x = np.zeros_like(x)
            taken = a == out
            d_x[:, :, 0::2, 0::2][:, :, :out_h, :out_w] = up * taken
            m = (b_ == out) & ~taken
            d_x[:, :, 0::2, 1::2][:, :, :out_h, :out_w] = up * m
            taken |= m
            m = (c_ == out) & ~taken
            d_x[:, :, 1::2, 0::2][:, :, :out_h, :out_w] = up * m
            taken |= m
            d_x[:, :, 1::2, 1::2][:, :, :out_h, :out_w] = up * ((d_ == out) & ~taken)
            return (d_x,)

        return GradPair(np.ascontiguousarray(out), backward)

    if padding == "valid" and window == (sh, sw):
        # Non-overlapping tiles: reshape is faster and tie-break matches the
        # general path because the window layout stays row-major.
        hc, wc = out_h * sh, out_w * sw
        tiles = x[:, :, :hc, :wc].reshape(b, c, out_h, sh, out_w, sw)
        tiles = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, out_h, out_w, sh * sw)
        idx = tiles.argmax(axis=-1)
        out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

        def backward(up: np.ndarray) -> tuple[np.ndarray, ...]:
            d_tiles = np.zeros_like(tiles)
            np.put_along_axis(d_tiles, idx[..., None], up[..., None], axis=-1)
            d_tiles = d_tiles.reshape(b, c, out_h, out_w, sh, sw)
            d_x = np.zeros_like(x)
            d_x[:, :, :hc, :wc] = d_tiles.transpose(0, 1, 2, 4, 3, 5).reshape(
                b, c, hc, wc
            )
            return (d_x,)

        return GradPair(np.ascontiguousarray(out), backward)

    # Padded positions hold -inf so they can never win the max.
    if pad_t or pad_b or pad_l or pad_r:
        xp = np.pad(
            x,
            ((0, 0), (0, 0), (pad_t, pad_b), (pad_l, pad_r)),
            constant_values=-np.inf,
        )
    else:
        xp = x
    win = sliding_window_view(xp, (wh, ww), axis=(2, 3))[:, :, ::sh, ::sw]
    flat = win.reshape(b, c, out_h, out_w, wh * ww)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(up: np.ndarray) -> tuple[np.ndarray, ...]:
        d_xp = np.zeros(xp.shape)
        bb, cc, oi, oj = np.indices(idx.shape)
        rows = oi * sh + idx // ww
        cols = oj * sw + idx % ww
        np.add.at(d_xp, (bb, cc, rows, cols), up)
        d_x = d_xp[:, :, pad_t : pad_t + h, pad_l : pad_l + w]
        if d_x.base is not None:
            d_x = d_x.copy()
        return (d_x,)

    return GradPair(np.ascontiguousarray(out), backward)


def global_pool(x: Tensor, mode: str) -> GradPair:
    """Per-channel spatial reduction of [b, c, h, w] to [b, c]."""
    _require_shape(x, 4, "global_pool input")
    b, c, h, w = x.shape
    if mode == "avg":
        out = x.mean(axis=(2, 3))

        def backward(up: np.ndarray) -> tuple[np.ndarray, ...]:
            return (np.broadcast_to(up[:, :, None, None], x.shape) / (h * w),)

        return GradPair(out, backward)
    if mode == "max":
        flat = x.reshape(b, c, h * w)
        idx = flat.argmax(axis=-1)  # first max in row-major scan
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def backward(up: np.ndarray) -> tuple[np.ndarray, ...]:
            d_flat = np.zeros_like(flat)
            np.put_along_axis(d_flat, idx[..., None], up[..., None], axis=-1)
            return (d_flat.reshape(x.shape),)

        return GradPair(out, backward)
    raise ParameterError(f"unknown global_pool mode {mode!r}; expected 'avg' or 'max'")


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------


def activation(x: Tensor, kind: str) -> GradPair:
    """Elementwise relu or sigmoid. relu's gradient at exactly 0 is 0."""
    if kind == "relu":
        mask = x > 0
        out = np.where(mask, x, 0.0)

        def backward(up: np.ndarray) -> tuple[np.ndarray, ...]:
            return (up * mask,)

        return GradPair(out, backward)
    if kind == "sigmoid":
        # Stable split: exp only ever sees non-positive arguments.
        out = np.empty_like(x)
        neg = x < 0
        e = np.exp(x[neg])
        out[neg] = e / (1.0 + e)
        out[~neg] = 1.0 / (1.0 + np.exp(-x[~neg]))

        def backward(up: np.ndarray) -> tuple[np.ndarray, ...]:
            return (up * out * (1.0 - out),)

        return GradPair(out, backward)
    raise ParameterError(f"unknown activation {kind!r}; expected 'relu' or 'sigmoid'")


def concat(inputs: Sequence[Tensor]) -> GradPair:
    """Concatenate along the feature axis (axis 1); other extents must agree."""
    if len(inputs) == 0:
        raise ParameterError("concat needs at least one input")
    first = inputs[0]
    for t in inputs[1:]:
        if t.ndim != first.ndim or t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat: shape {t.shape} incompatible with {first.shape} "
                "outside the feature axis"
            )
    widths = [t.shape[1] for t in inputs]
    out = np.concatenate(inputs, axis=1) if len(inputs) > 1 else first.copy()
    offsets = np.cumsum(widths)[:-1]

    def backward(up: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(np.ascontiguousarray(g) for g in np.split(up, offsets, axis=1))

    return GradPair(out, backward)


def dropout(x: Tensor, rate: float, rng, training: bool) -> GradPair:
    """Inverted dropout: train-time scaling by 1/(1-rate), identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        out = x.copy()

        def backward(up: np.ndarray) -> tuple[np.ndarray, ...]:
            return (up,)

        return GradPair(out, backward)
    if rng is None:
        raise ParameterError("dropout in training mode needs a random generator")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = x * keep * scale

    def backward(up: np.ndarray) -> tuple[np.ndarray, ...]:
        return (up * keep * scale,)

    return GradPair(out, backward)


def flatten(x: Tensor) -> GradPair:
    """Collapse all non-batch axes into one feature axis."""
    out = x.reshape(x.shape[0], -1)

    def backward(up: np.ndarray) -> tuple[np.ndarray, ...]:
        return (up.reshape(x.shape),)

    return GradPair(out.copy(), backward)


def add(a: Tensor, b: Tensor) -> GradPair:
    """Elementwise sum of two same-shape tensors (residual skip)."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a + b

    def backward(up: np.ndarray) -> tuple[np.ndarray, ...]:
        return up, up.copy()

    return GradPair(out, backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    op: Callable[..., GradPair],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    projection_seed: int = 0,
    max_coords: int | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The op's output is reduced to a scalar through a fixed random projection;
    the analytic gradient of that scalar (via the op's backward) is compared
    against (f(x+eps) - f(x-eps)) / (2 eps) coordinate by coordinate. The op
    must be deterministic across calls. When ``max_coords`` is set, at most
    that many coordinates per input are probed (seeded choice), which keeps
    whole-network checks affordable.
    """
    if eps <= 0:
        raise ParameterError(f"grad_check eps must be positive, got {eps}")
    rng = np.random.default_rng(projection_seed)
    inputs = [np.asarray(t, dtype=np.float64) for t in inputs]
    pair = op(*inputs)
    proj = rng.standard_normal(pair.value.shape)
    analytic = pair.backward(proj)
    if len(analytic) != len(inputs):
        raise ShapeError(
            f"backward returned {len(analytic)} gradients for {len(inputs)} inputs"
        )

    worst = 0.0
    for x, grad in zip(inputs, analytic):
        if grad.shape != x.shape:
            raise ShapeError(f"gradient shape {grad.shape} != input shape {x.shape}")
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = rng.choice(x.size, size=max_coords, replace=False)
        for c in coords:
            orig = x.flat[c]
            x.flat[c] = orig + eps
            s_plus = float(np.vdot(proj, op(*inputs).value))
            x.flat[c] = orig - eps
            s_minus = float(np.vdot(proj, op(*inputs).value))
            x.flat[c] = orig
            fd = (s_plus - s_minus) / (2.0 * eps)
            a = float(grad.flat[c])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            worst = max(worst, err)
    return worst
