"""Reference float64 kernels for the interpreter.

These favour clarity over speed; they are the numerical ground truth the
optimization passes are checked against.
"""

from __future__ import annotations

import math

import numpy as np


class KernelError(ValueError):
    pass


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def fake_quantize(x, scale: float, zero_point: int, qmin: int, qmax: int):
    return np.clip(round_half_away(np.asarray(x) / scale) + zero_point, qmin, qmax)


def dequantize(q, scale: float, zero_point: int):
    return scale * (np.asarray(q, dtype=np.float64) - zero_point)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def conv2d(x: np.ndarray, w: np.ndarray, stride=(1, 1), padding=(0, 0)) -> np.ndarray:
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, o, ho, wo))
    for ki in range(kh):
        for kj in range(kw):
            patch = xp[:, :, ki : ki + sh * (ho - 1) + 1 : sh, kj : kj + sw * (wo - 1) + 1 : sw]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, ki, kj])
    return out


def bilinear(img: np.ndarray, py: np.ndarray, px: np.ndarray, padding: str = "border") -> np.ndarray:
    """Sample a [C, H, W] image at fractional pixel coordinates.

    ``border`` clamps coordinates into the image; ``zeros`` treats every
    out-of-image corner as zero.
    """
    _, h, w = img.shape
    if padding == "border":
        py = np.clip(py, 0.0, h - 1.0)
        px = np.clip(px, 0.0, w - 1.0)
    elif padding != "zeros":
        raise KernelError(f"unsupported padding mode {padding!r}")
    y0 = np.floor(py)
    x0 = np.floor(px)
    fy = py - y0
    fx = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    out = np.zeros((img.shape[0],) + py.shape)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = img[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += np.where(valid, wy * wx, 0.0) * vals
    return out


def grid_sample(x: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Bilinear, border padding, corners aligned to [-1, 1]."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, grid.shape[1], grid.shape[2]))
    for b in range(n):
        px = (grid[b, ..., 0] + 1.0) * 0.5 * (w - 1)
        py = (grid[b, ..., 1] + 1.0) * 0.5 * (h - 1)
        out[b] = bilinear(x[b], py, px, "border")
    return out


def rotate(x: np.ndarray, angle: float) -> np.ndarray:
    """Rotate the last two axes counter-clockwise by ``angle`` radians about the centre."""
    h, w = x.shape[-2:]
    flat = x.reshape((-1, h, w))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ca, sa = math.cos(angle), math.sin(angle)
    # inverse map: source = R(-angle) (dest - centre) + centre
    sx = ca * (xx - cx) + sa * (yy - cy) + cx
    sy = -sa * (xx - cx) + ca * (yy - cy) + cy
    return bilinear(flat, sy, sx, "border").reshape(x.shape)


def inverse(a: np.ndarray) -> np.ndarray:
    """Batched matrix inverse by Gauss-Jordan elimination with partial pivoting."""
    n = a.shape[-1]
    mats = a.reshape((-1, n, n))
    out = np.empty_like(mats, dtype=np.float64)
    for b, m in enumerate(mats):
        aug = np.hstack([m.astype(np.float64), np.eye(n)])
        for col in range(n):
            piv = col + int(np.argmax(np.abs(aug[col:, col])))
            if aug[piv, col] == 0.0:
                raise KernelError("matrix is singular")
            if piv != col:
                aug[[col, piv]] = aug[[piv, col]]
            aug[col] /= aug[col, col]
            for r in range(n):
                if r != col and aug[r, col] != 0.0:
                    aug[r] -= aug[r, col] * aug[col]
        out[b] = aug[:, n:]
    return out.reshape(a.shape)


def modulated_deform_conv2d(
    x: np.ndarray,
    offset: np.ndarray,
    mask: np.ndarray,
    w: np.ndarray,
    stride=(1, 1),
    padding=(0, 0),
) -> np.ndarray:
    """Deformable conv v2: per-tap (dy, dx) offsets and a modulation mask, zero padding."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    ho, wo = offset.shape[2], offset.shape[3]
    base_y = (np.arange(ho) * sh - ph)[:, None].astype(np.float64)
    base_x = (np.arange(wo) * sw - pw)[None, :].astype(np.float64)
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for ki in range(kh):
            for kj in range(kw):
                k = ki * kw + kj
                py = base_y + ki + offset[b, 2 * k]
                px = base_x + kj + offset[b, 2 * k + 1]
                cols = bilinear(x[b], py, px, "zeros") * mask[b, k]
                out[b] += np.einsum("chw,oc->ohw", cols, w[:, :, ki, kj])
    return out


def attention(q, kt, v, scale: float) -> np.ndarray:
    return np.matmul(softmax(np.matmul(q, kt) * scale, axis=-1), v)
