"""Neural-network operations on NCHW tensors, each with its backward rule."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, active_tape

BILINEAR_CONVENTION = "align_corners"


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided view of shape (N, C, kh, kw, Ho, Wo) over a padded NCHW array."""
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    return as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has {cin} channels, weight {weight.shape} expects {wcin}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"conv2d kernel {weight.shape} larger than padded input {x.shape} (padding={padding})")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, kh, kw, stride)
    ho, wo = win.shape[4], win.shape[5]
    cols = win.transpose(1, 2, 3, 0, 4, 5).reshape(cin * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(cout, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out_t = Tensor(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3), dtype=out.dtype)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(cin, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j].transpose(
                        1, 0, 2, 3
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return active_tape().record("conv2d", out_t, inputs, backward)


def maxpool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Window maximum; ties resolve to the first position in row-major order."""
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ValueError(f"invalid window={window} / stride={stride}")
    if h < window or w < window:
        raise ValueError(f"maxpool window {window} larger than spatial extent {h}x{w}")
    win = _windows(x.data, window, window, stride)
    ho, wo = win.shape[4], win.shape[5]
    flat = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for idx in range(window * window):
            i, j = divmod(idx, window)
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(arg == idx, g, 0)
        return (gx,)

    return active_tape().record("maxpool2d", Tensor(out, dtype=x.dtype), (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.maximum(x.data, 0), dtype=x.dtype)  # NaN propagates rather than vanishing
    return active_tape().record("relu", out, (x,), lambda g: (g * mask,))


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) align-corners linear interpolation weights."""
    if n_out < 1 or n_in < 1:
        raise ValueError(f"interpolation extents must be positive, got {n_in} -> {n_out}")
    scale = (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
    src = np.arange(n_out) * scale
    lo = np.minimum(np.floor(src).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear upsampling with aligned corners; same size returns ``x`` unchanged."""
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ValueError(f"upsample target must be positive, got {out_h}x{out_w}")
    if out_h < h or out_w < w:
        raise ValueError(f"upsample_bilinear only enlarges: {h}x{w} -> {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return x
    ah = interp_matrix(h, out_h, x.dtype)
    aw = interp_matrix(w, out_w, x.dtype)
    out = ah @ x.data @ aw.T

    def backward(g):
        return (ah.T @ g @ aw,)

    return active_tape().record("upsample_bilinear", Tensor(out, dtype=x.dtype), (x,), backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(f"concat_channels shape mismatch: {ref} vs {p.shape}; upsample first")
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])
    out = Tensor(np.concatenate([p.data for p in parts], axis=1), dtype=parts[0].dtype)

    def backward(g):
        return tuple(g[:, offsets[k] : offsets[k + 1]] for k in range(len(parts)))

    return active_tape().record("concat_channels", out, tuple(parts), backward)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return active_tape().record("softmax", Tensor(p, dtype=x.dtype), (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: Optional[int] = None) -> Tensor:
    """Mean pixel-wise cross-entropy over the non-ignored pixels of an NCHW score map."""
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = np.ones(labels.shape, dtype=bool) if ignore_index is None else labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"label {labels[pos]} at position {pos} outside [0, {c})")
    safe = np.where(valid, labels, 0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    count = int(valid.sum())
    denom = max(count, 1)
    loss = float(np.where(valid, logsum - picked, 0).sum(dtype=np.float64) / denom)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1, axis=1)
        scale = (valid[:, None] * (float(np.asarray(g).reshape(-1)[0]) / denom)).astype(logits.dtype)
        return (p * scale,)

    # the scalar itself stays 64-bit so weighted sums of losses are exact to ~1e-15
    return active_tape().record(
        "softmax_cross_entropy", Tensor(loss, dtype=np.float64), (logits,), backward
    )
