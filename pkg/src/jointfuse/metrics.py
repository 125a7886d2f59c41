"""Objective fusion-quality scores.

Three reference-free metrics over [0, 1] planes:

  ssim   mean local SSIM (Wang et al.), uniform 8x8 window, stride 1,
         C1 = 0.01^2 and C2 = 0.03^2 on unit dynamic range
  q_mi   normalized mutual information retained from both sources,
         2 * [MI(F,A)/(H(F)+H(A)) + MI(F,B)/(H(F)+H(B))], 64-bin histograms
  q_abf  gradient-preservation score after Xydeas & Petrovic (2000), with
         the sigmoid responses normalized so perfect preservation scores 1

`ssim_and_grad` additionally returns d(ssim)/d(first image) for use inside
training losses; it shares the window machinery with `ssim`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .image import as_plane, clamp01, sobel_gradient

SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

MI_BINS = 64

# Xydeas-Petrovic sigmoid constants: (ceiling, slope, midpoint).
ABF_STRENGTH = (0.9994, 15.0, 0.5)
ABF_ORIENT = (0.9879, 22.0, 0.8)


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = as_plane(a)
    b = as_plane(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def _window_sums(x: np.ndarray, k: int) -> np.ndarray:
    """Sums over every k x k window (stride 1) via an integral image."""
    c = np.cumsum(np.cumsum(np.pad(x, ((1, 0), (1, 0))), axis=0), axis=1)
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def _window_scatter(w: np.ndarray, k: int) -> np.ndarray:
    """Adjoint of _window_sums: add each window value over its support."""
    return _window_sums(np.pad(w, k - 1), k)


def _ssim_terms(x: np.ndarray, y: np.ndarray):
    k = SSIM_WINDOW
    n = float(k * k)
    mx = _window_sums(x, k) / n
    my = _window_sums(y, k) / n
    vx = _window_sums(x * x, k) / n - mx * mx
    vy = _window_sums(y * y, k) / n - my * my
    cxy = _window_sums(x * y, k) / n - mx * my
    lum = (2.0 * mx * my + SSIM_C1) / (mx * mx + my * my + SSIM_C1)
    cs = (2.0 * cxy + SSIM_C2) / (vx + vy + SSIM_C2)
    return mx, my, vx, vy, cxy, lum, cs


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM of two equal-size planes (at least 8x8)."""
    a, b = _check_pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    *_, lum, cs = _ssim_terms(a, b)
    return float(np.mean(lum * cs))


def ssim_and_grad(x: np.ndarray, ref: np.ndarray) -> tuple[float, np.ndarray]:
    """SSIM(x, ref) and its exact gradient with respect to x.

    Part of the differentiable training path: non-finite values propagate
    into the returned value instead of raising.
    """
    x = as_plane(x, check_finite=False)
    ref = as_plane(ref, check_finite=False)
    if x.shape != ref.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {ref.shape}")
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    k = SSIM_WINDOW
    n = float(k * k)
    mx, my, vx, vy, cxy, lum, cs = _ssim_terms(x, ref)
    value = float(np.mean(lum * cs))

    dl = (2.0 * my - lum * 2.0 * mx) / (mx * mx + my * my + SSIM_C1)  # d lum / d mx
    ds_dv = -cs / (vx + vy + SSIM_C2)                                 # d cs / d vx
    ds_dc = 2.0 / (vx + vy + SSIM_C2)                                 # d cs / d cxy
    # Partials of lum*cs with respect to the raw window sums Sx, Sxx, Sxy.
    a_term = (cs * dl + lum * (ds_dv * (-2.0 * mx) + ds_dc * (-my))) / n
    b_term = lum * ds_dv / n
    c_term = lum * ds_dc / n

    n_windows = float(lum.size)
    grad = (_window_scatter(a_term, k)
            + 2.0 * x * _window_scatter(b_term, k)
            + ref * _window_scatter(c_term, k)) / n_windows
    return value, grad


def _quantize(img: np.ndarray, bins: int) -> np.ndarray:
    idx = np.floor(clamp01(img) * bins).astype(np.int64)
    return np.minimum(idx, bins - 1)


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-np.sum(nz * np.log2(nz)))


def _mutual_information(i: np.ndarray, j: np.ndarray, bins: int) -> tuple[float, float, float]:
    joint = np.bincount(i.ravel() * bins + j.ravel(), minlength=bins * bins)
    joint = joint.astype(np.float64) / joint.sum()
    joint = joint.reshape(bins, bins)
    pi = joint.sum(axis=1)
    pj = joint.sum(axis=0)
    h_i = _entropy(pi)
    h_j = _entropy(pj)
    h_ij = _entropy(joint.ravel())
    return h_i + h_j - h_ij, h_i, h_j


def q_mi(src1: np.ndarray, src2: np.ndarray, fused: np.ndarray) -> float:
    """Normalized mutual-information fusion metric, values roughly in [0, 2]."""
    src1, src2 = _check_pair(src1, src2)
    _, fused = _check_pair(src1, fused)
    f = _quantize(fused, MI_BINS)
    total = 0.0
    for src in (src1, src2):
        mi, h_f, h_s = _mutual_information(f, _quantize(src, MI_BINS), MI_BINS)
        if h_f + h_s == 0.0:
            warnings.warn("q_mi: fused and source are both constant; term set to 0",
                          RuntimeWarning, stacklevel=2)
            continue
        total += mi / (h_f + h_s)
    return 2.0 * total


def _orientation(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    # Undirected edge orientation in (-pi/2, pi/2]; tiny guard against gx=0.
    denom = np.where(gx == 0.0, 1e-12, gx)
    return np.arctan(gy / denom)


def _preservation_sigmoid(value: np.ndarray, constants: tuple[float, float, float]) -> np.ndarray:
    ceiling, slope, midpoint = constants
    raw = ceiling / (1.0 + np.exp(-slope * (value - midpoint)))
    peak = ceiling / (1.0 + np.exp(-slope * (1.0 - midpoint)))
    return raw / peak


def _edge_preservation(g_src, a_src, g_fused, a_fused) -> np.ndarray:
    stronger_src = g_src > g_fused
    safe_src = np.where(g_src == 0.0, 1e-12, g_src)
    safe_fused = np.where(g_fused == 0.0, 1e-12, g_fused)
    strength_ratio = np.where(stronger_src, g_fused / safe_src, g_src / safe_fused)
    orient_match = 1.0 - np.abs(a_src - a_fused) * (2.0 / np.pi)
    return (_preservation_sigmoid(strength_ratio, ABF_STRENGTH)
            * _preservation_sigmoid(orient_match, ABF_ORIENT))


def q_abf(src1: np.ndarray, src2: np.ndarray, fused: np.ndarray) -> float:
    """Gradient-preservation score in [0, 1], symmetric in the sources."""
    src1, src2 = _check_pair(src1, src2)
    _, fused = _check_pair(src1, fused)
    if src1.shape[0] < 3 or src1.shape[1] < 3:
        raise ValueError(f"q_abf needs at least 3x3, got {src1.shape}")
    gx1, gy1, g1 = sobel_gradient(src1)
    gx2, gy2, g2 = sobel_gradient(src2)
    gxf, gyf, gf = sobel_gradient(fused)
    a1 = _orientation(gx1, gy1)
    a2 = _orientation(gx2, gy2)
    af = _orientation(gxf, gyf)
    q1 = _edge_preservation(g1, a1, gf, af)
    q2 = _edge_preservation(g2, a2, gf, af)
    weight_total = np.sum(g1 + g2)
    if weight_total == 0.0:
        return 0.0
    return float(np.sum(q1 * g1 + q2 * g2) / weight_total)


@dataclass
class MetricReport:
    """One row of fusion scores; ssim is the mean against the two sources."""

    q_mi: float
    q_abf: float
    ssim: float

    @classmethod
    def compute(cls, src1: np.ndarray, src2: np.ndarray, fused: np.ndarray) -> "MetricReport":
        return cls(
            q_mi=q_mi(src1, src2, fused),
            q_abf=q_abf(src1, src2, fused),
            ssim=0.5 * (ssim(fused, src1) + ssim(fused, src2)),
        )
