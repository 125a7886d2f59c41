"""Pixel-plane primitives shared by every other module.

An image plane is a 2-D float64 array with intensities nominally in [0, 1].
Values are kept as unclamped reals between operations; quantization happens
only at file I/O. Stencil operations use replicate (edge) padding, and each
linear operation here ships with its exact adjoint so gradient code can
reuse the same padding rules.
"""

from __future__ import annotations

import numpy as np

from .rng import SeededRng

# 3x3 Sobel stencils, scaled by 1/4 so a unit step edge has |gx| = 1.
SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]]) / 4.0
SOBEL_Y = SOBEL_X.T.copy()


def as_plane(data, *, check_finite: bool = True) -> np.ndarray:
    """Coerce to a 2-D float64 plane, optionally verifying finiteness."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"image plane must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"image plane must be non-empty, got shape {arr.shape}")
    if check_finite and not np.all(np.isfinite(arr)):
        raise ValueError("image plane contains NaN or Inf")
    return arr


def clamp01(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def gaussian_noise(img: np.ndarray, sigma: float, rng: SeededRng) -> np.ndarray:
    """img + sigma * z with z ~ N(0, I). Output is not clamped."""
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    img = as_plane(img)
    if sigma == 0.0:
        return img.copy()
    return img + sigma * rng.normal(img.shape)


def pad_replicate(img: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return img.copy()
    h, w = img.shape
    out = np.empty((h + 2 * pad, w + 2 * pad), dtype=img.dtype)
    out[pad:pad + h, pad:pad + w] = img
    out[:pad, pad:pad + w] = img[0]
    out[pad + h:, pad:pad + w] = img[-1]
    out[:, :pad] = out[:, pad:pad + 1]
    out[:, pad + w:] = out[:, pad + w - 1:pad + w]
    return out


def pad_replicate_adjoint(grad: np.ndarray, pad: int) -> np.ndarray:
    """Adjoint of pad_replicate: fold border rows/cols back onto the edge.

    Replicate padding copies edge pixels outward, so its transpose sums the
    padded border back into the pixels it was copied from.
    """
    if pad == 0:
        return grad.copy()
    out = grad.copy()
    for _ in range(pad):
        core = out[1:-1, 1:-1].copy()
        core[0, :] += out[0, 1:-1]
        core[-1, :] += out[-1, 1:-1]
        core[:, 0] += out[1:-1, 0]
        core[:, -1] += out[1:-1, -1]
        core[0, 0] += out[0, 0]
        core[0, -1] += out[0, -1]
        core[-1, 0] += out[-1, 0]
        core[-1, -1] += out[-1, -1]
        out = core
    return out


def correlate3x3(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation with replicate borders."""
    padded = pad_replicate(img, 1)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))


def correlate3x3_adjoint(grad: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of correlate3x3 under the same replicate padding."""
    h, w = grad.shape
    padded_grad = np.zeros((h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            padded_grad[di:di + h, dj:dj + w] += kernel[di, dj] * grad
    return pad_replicate_adjoint(padded_grad, 1)


def sobel_gradient(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sobel gx, gy and gradient magnitude with replicate borders.

    Kernels carry a 1/4 normalization so magnitudes stay O(1) on [0, 1]
    images. Non-finite values propagate; training aborts on them at the
    loss, not here.
    """
    img = as_plane(img, check_finite=False)
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise ValueError(f"sobel_gradient needs at least 3x3, got {img.shape}")
    gx = correlate3x3(img, SOBEL_X)
    gy = correlate3x3(img, SOBEL_Y)
    return gx, gy, np.hypot(gx, gy)


def sobel_adjoint(d_gx: np.ndarray, d_gy: np.ndarray) -> np.ndarray:
    """Adjoint of (img -> gx, gy); used to backpropagate magnitude losses."""
    return correlate3x3_adjoint(d_gx, SOBEL_X) + correlate3x3_adjoint(d_gy, SOBEL_Y)
