import numpy as np
import pytest

from jointfuse import Blur, Composite, Downsample, Identity, SeededRng
from jointfuse.operators import gaussian_kernel


def random_plane(rng: SeededRng, dims, lo=0.0, hi=1.0):
    """Plane with values spread over [lo, hi], deterministic from the stream."""
    raw = rng.normal(dims)
    span = raw.max() - raw.min()
    if span == 0:
        return np.full(dims, 0.5 * (lo + hi))
    return lo + (hi - lo) * (raw - raw.min()) / span


def random_weight_map(rng: SeededRng, dims):
    return np.clip(0.5 + 0.35 * rng.normal(dims), 0.0, 1.0)


def invertible_blur(rng: SeededRng, dims, min_gain=0.2, gamma=0.0):
    """Blur with a zero-free kernel DFT, redrawn until well conditioned."""
    while True:
        sigma = 0.4 + 1.2 * rng.uniform()
        size = 3 if rng.randint(2) == 0 else 5
        op = Blur(dims, gaussian_kernel(size, sigma), wiener_gamma=gamma)
        if op.min_frequency_gain() > min_gain:
            return op


def random_exact_op(rng: SeededRng, dims):
    """Operator whose pinv applier is an exact {1,2}-inverse of it.

    Identity, downsampling, invertible blur at gamma=0, or two-stage
    composites of those.
    """
    kind = rng.randint(5)
    if kind == 0:
        return Identity(dims)
    if kind == 1:
        return invertible_blur(rng, dims)
    if kind == 2:
        return Downsample(dims, 2)
    if kind == 3:
        return Composite([invertible_blur(rng, dims), Downsample(dims, 2)])
    return Composite([Downsample(dims, 2),
                      Identity((dims[0] // 2, dims[1] // 2))])


@pytest.fixture
def rng():
    return SeededRng(0xC0FFEE)
