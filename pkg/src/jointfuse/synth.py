"""Procedural two-modality image pairs for training and evaluation.

Each pair shares the same blob geometry but renders it with different
contrast: the first channel emphasizes smooth bright masses (thermal-like),
the second emphasizes edges and adds a stripe texture (visible-like). All
randomness comes from one seeded stream, so datasets are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image import clamp01, gaussian_noise
from .operators import LinearDegradation, parse_opspec
from .rng import SeededRng


def _normalize(field: np.ndarray) -> np.ndarray:
    lo = float(field.min())
    hi = float(field.max())
    if hi - lo < 1e-12:
        return np.zeros_like(field)
    return (field - lo) / (hi - lo)


def _blob_field(size: int, rng: SeededRng, n_blobs: int) -> np.ndarray:
    grid = np.arange(size, dtype=np.float64) / size
    yy = grid[:, None]
    xx = grid[None, :]
    field = np.zeros((size, size))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(), rng.uniform()
        radius = 0.10 + 0.12 * rng.uniform()
        amp = 0.6 + 0.4 * rng.uniform()
        field += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius ** 2))
    return field


def make_clean_pair(size: int, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """One geometry rendered as (thermal-like, visible-like) planes in [0, 1].

    The dominant gradients are deliberately disjoint: the first channel puts
    all its contrast on mass boundaries, the second on background texture.
    A plain average of the two halves both, which is what a fusion engine
    should visibly beat.
    """
    if size < 8:
        raise ValueError(f"pair size must be at least 8, got {size}")
    geometry = _blob_field(size, rng, n_blobs=3)
    masses = _normalize(geometry)
    inside = np.clip((masses - 0.35) / 0.25, 0.0, 1.0)
    thermal = clamp01(0.1 + 0.85 * inside)

    grid = np.arange(size, dtype=np.float64) / size
    freq_y = 3.0 + 4.0 * rng.uniform()
    freq_x = 3.0 + 4.0 * rng.uniform()
    phase = 2.0 * np.pi * rng.uniform()
    stripes = 0.5 + 0.5 * np.sin(2.0 * np.pi * (freq_y * grid[:, None]
                                                + freq_x * grid[None, :]) + phase)
    visible = clamp01(0.12 + 0.75 * stripes * (1.0 - inside) + 0.1 * inside)
    return thermal, visible


@dataclass
class SynthPair:
    clean1: np.ndarray
    clean2: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    op1: LinearDegradation
    op2: LinearDegradation

    def as_train_tuple(self):
        return self.clean1, self.clean2, self.y1, self.y2, self.op1, self.op2


def build_dataset(count: int, size: int, spec1: str, spec2: str, sigma: float,
                  seed: int) -> list[SynthPair]:
    """Degraded pair dataset: y_i = A_i(clean_i) + noise."""
    rng = SeededRng(seed)
    dims = (size, size)
    op1 = parse_opspec(spec1, dims)
    op2 = parse_opspec(spec2, dims)
    pairs = []
    for _ in range(count):
        clean1, clean2 = make_clean_pair(size, rng)
        y1 = gaussian_noise(op1.apply(clean1), sigma, rng)
        y2 = gaussian_noise(op2.apply(clean2), sigma, rng)
        pairs.append(SynthPair(clean1, clean2, y1, y2, op1, op2))
    return pairs
