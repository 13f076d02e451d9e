"""Small raster helpers shared by the augmentations and the toy world."""

import numpy as np

from . import _accel

LUMA = np.array([0.299, 0.587, 0.114])


def gaussian_kernel(sigma):
    r = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-r, r + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma):
    """Separable gaussian blur of an (h, w, c) raster with edge replication."""
    if sigma <= 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    out = _accel.blur_rows(img, k)
    out = _accel.blur_rows(np.ascontiguousarray(out.transpose(1, 0, 2)), k).transpose(1, 0, 2)
    return np.ascontiguousarray(out)


def resize_bilinear(img, out_h, out_w):
    """Half-pixel-centered bilinear resize of an (h, w, c) raster."""
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = (1 - fx) * img[y0][:, x0] + fx * img[y0][:, x1]
    bot = (1 - fx) * img[y1][:, x0] + fx * img[y1][:, x1]
    return (1 - fy) * top + fy * bot


def to_grayscale(img):
    g = img @ LUMA
    return np.repeat(g[..., None], 3, axis=2)


def color_jitter(img, brightness, contrast, saturation):
    out = img * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    gray = to_grayscale(out)
    out = gray + (out - gray) * saturation
    return np.clip(out, 0.0, 1.0)
