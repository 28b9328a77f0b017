"""Pure-numpy reference implementations of the hot kernels.

Used as the fallback backend when the compiled extension is unavailable and
as the comparison baseline in the kernel benchmark. Semantics (including the
column layout and index conventions) must stay in lockstep with `_core.pyx`.
"""

import numpy as np

NAME = "numpy"


def im2col(x, kh, kw, stride, pad):
    """Unfold (N, C, H, W) into convolution columns (N, C*kh*kw, oh*ow).

    Row order is channel-major, then kernel row, then kernel column.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def col2im(cols, h, w, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add columns back onto (N, C, H, W)."""
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    n, ckk, _ = cols.shape
    c = ckk // (kh * kw)
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    xpad = np.zeros((n, c, hp, wp), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xpad[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols6[:, :, i, j]
    if pad > 0:
        return np.ascontiguousarray(xpad[:, :, pad : pad + h, pad : pad + w])
    return xpad


def cell_histograms(mag, ang, cell_px, bins, signed):
    """Accumulate gradient magnitudes into per-cell orientation histograms.

    `ang` is in radians (any range); orientations are folded onto [0, pi)
    when unsigned, [0, 2*pi) otherwise, then hard-assigned to equal-width
    bins. Returns (H//cell_px, W//cell_px, bins).
    """
    mag = np.ascontiguousarray(mag, dtype=np.float64)
    ang = np.ascontiguousarray(ang, dtype=np.float64)
    h, w = mag.shape
    ncy, ncx = h // cell_px, w // cell_px
    period = 2.0 * np.pi if signed else np.pi
    folded = np.mod(ang, period)
    b = np.floor(folded / (period / bins)).astype(np.int64)
    np.minimum(b, bins - 1, out=b)
    cy = np.arange(h) // cell_px
    cx = np.arange(w) // cell_px
    idx = (cy[:, None] * ncx + cx[None, :]) * bins + b
    hist = np.bincount(idx.ravel(), weights=mag.ravel(), minlength=ncy * ncx * bins)
    return hist.reshape(ncy, ncx, bins)


def bilinear_crop(image, rect, out_px):
    """Crop the normalized rectangle (x0, y0, x1, y1) and resample it to
    out_px x out_px with bilinear interpolation (edge-clamped)."""
    image = np.ascontiguousarray(image, dtype=np.float64)
    h, w = image.shape[0], image.shape[1]
    x0, y0, x1, y1 = (float(v) for v in rect)
    u = (np.arange(out_px, dtype=np.float64) + 0.5) / out_px
    sx = np.clip((x0 + u * (x1 - x0)) * w - 0.5, 0.0, w - 1.0)
    sy = np.clip((y0 + u * (y1 - y0)) * h - 0.5, 0.0, h - 1.0)
    ix0 = np.floor(sx).astype(np.int64)
    iy0 = np.floor(sy).astype(np.int64)
    ix1 = np.minimum(ix0 + 1, w - 1)
    iy1 = np.minimum(iy0 + 1, h - 1)
    fx = sx - ix0
    fy = sy - iy0
    fy, fx = fy[:, None, None], fx[None, :, None]
    v00 = image[iy0][:, ix0]
    v01 = image[iy0][:, ix1]
    v10 = image[iy1][:, ix0]
    v11 = image[iy1][:, ix1]
    return (
        (1.0 - fy) * (1.0 - fx) * v00
        + (1.0 - fy) * fx * v01
        + fy * (1.0 - fx) * v10
        + fy * fx * v11
    )
