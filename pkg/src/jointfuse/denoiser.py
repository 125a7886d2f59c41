"""Noise predictors for the sampler.

Two interchangeable predictors, both returning a noise estimate for the
joint state plus the first fusion weight map:

  OracleDenoiser  inverts the step-0 reconstruction for a known clean
                  target; isolates sampler mechanics from learning quality.
  TinyDenoiser    a 4-layer convnet (two 3x3 trunk convs, two 3x3 heads,
                  sigmoid on the weight head) with hand-derived gradients.
                  A desk-scale stand-in for a full multi-task network.

Network parameters serialize to a little-endian binary file: magic "TNP1",
per-field shape table, then raw float64 data in declaration order.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import pad_replicate_adjoint
from .joint import JointState
from .rng import SeededRng
from .sampler import DiffusionSchedule

PARAMS_MAGIC = b"TNP1"
TRUNK_CHANNELS = 16


@dataclass
class DenoiserOutput:
    eps: JointState
    weight1: np.ndarray


def oracle_predict(x_t: JointState, t: int, sched: DiffusionSchedule,
                   clean: JointState, w1_const: float) -> DenoiserOutput:
    """The exact noise that makes the step-0 reconstruction equal `clean`.

    eps = (x_t - clean) / sqrt(1 - alpha_bar_t); the weight map is constant.
    """
    if not 1 <= t <= sched.steps:
        raise ValueError(f"t must be in [1, {sched.steps}], got {t}")
    if not 0.0 < w1_const < 1.0:
        raise ValueError(f"w1_const must lie strictly inside (0, 1), got {w1_const}")
    ab = float(sched.alpha_bar[t])
    if ab >= 1.0:
        raise ValueError("alpha_bar_t must be below 1 for the oracle inversion")
    inv = 1.0 / math.sqrt(1.0 - ab)
    eps = JointState(*((xp - cp) * inv for xp, cp in zip(x_t.planes(), clean.planes())))
    return DenoiserOutput(eps=eps, weight1=np.full(x_t.dims, float(w1_const)))


class OracleDenoiser:
    def __init__(self, clean: JointState, w1_const: float = 0.5):
        self.clean = clean
        self.w1_const = float(w1_const)

    def predict(self, x_t: JointState, t: int, sched: DiffusionSchedule) -> DenoiserOutput:
        return oracle_predict(x_t, t, sched, self.clean, self.w1_const)


# ---------------------------------------------------------------------------
# Tiny convolutional predictor.
# ---------------------------------------------------------------------------


@dataclass
class TinyNetParams:
    """Fixed-layout parameters; field order is the serialization order."""

    conv1_w: np.ndarray  # (16, 4, 3, 3)
    conv1_b: np.ndarray  # (16,)
    conv2_w: np.ndarray  # (16, 16, 3, 3)
    conv2_b: np.ndarray  # (16,)
    eps_w: np.ndarray    # (3, 16, 3, 3)
    eps_b: np.ndarray    # (3,)
    w_w: np.ndarray      # (1, 16, 3, 3)
    w_b: np.ndarray      # (1,)

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]

    def copy(self) -> "TinyNetParams":
        return TinyNetParams(**{name: arr.copy() for name, arr in self.arrays()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(arr)) for _, arr in self.arrays())


EXPECTED_SHAPES = {
    "conv1_w": (TRUNK_CHANNELS, 4, 3, 3), "conv1_b": (TRUNK_CHANNELS,),
    "conv2_w": (TRUNK_CHANNELS, TRUNK_CHANNELS, 3, 3), "conv2_b": (TRUNK_CHANNELS,),
    "eps_w": (3, TRUNK_CHANNELS, 3, 3), "eps_b": (3,),
    "w_w": (1, TRUNK_CHANNELS, 3, 3), "w_b": (1,),
}


def zero_params() -> TinyNetParams:
    return TinyNetParams(**{name: np.zeros(shape) for name, shape in EXPECTED_SHAPES.items()})


def init_params(rng: SeededRng, scale: float = 1.0) -> TinyNetParams:
    """He-style random init drawn deterministically from the stream."""
    fields = {}
    for name, shape in EXPECTED_SHAPES.items():
        if name.endswith("_b"):
            fields[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            fields[name] = rng.normal(shape) * (scale * math.sqrt(2.0 / fan_in))
    return TinyNetParams(**fields)


def save_params(params: TinyNetParams, path) -> None:
    chunks = [PARAMS_MAGIC, struct.pack("<I", len(EXPECTED_SHAPES))]
    for name, arr in params.arrays():
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in params.arrays():
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> TinyNetParams:
    data = Path(path).read_bytes()
    if data[:4] != PARAMS_MAGIC:
        raise ValueError(f"{path}: not a TNP1 parameter file")
    offset = 4
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    names = list(EXPECTED_SHAPES)
    if count != len(names):
        raise ValueError(f"{path}: expected {len(names)} parameter fields, got {count}")
    shapes = []
    for name in names:
        (ndim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        if shape != EXPECTED_SHAPES[name]:
            raise ValueError(f"{path}: field {name} has shape {shape}, "
                             f"expected {EXPECTED_SHAPES[name]}")
        shapes.append(shape)
    fields = {}
    for name, shape in zip(names, shapes):
        size = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
        offset += size * 8
        fields[name] = arr.reshape(shape).astype(np.float64)
    params = TinyNetParams(**fields)
    if not params.all_finite():
        raise ValueError(f"{path}: parameter file contains non-finite values")
    return params


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (H*W, C*9) patch matrix under replicate padding."""
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    # (C, H, W, 3, 3) -> (H*W, C*9)
    return windows.transpose(1, 2, 0, 3, 4).reshape(h * w, c * 9)


def _col2im_adjoint(dcols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    """Adjoint of _im2col, folding pad contributions back onto edges."""
    patches = dcols.reshape(h, w, c, 3, 3)
    dpad = np.zeros((c, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            dpad[:, di:di + h, dj:dj + w] += patches[:, :, :, di, dj].transpose(2, 0, 1)
    dx = np.empty((c, h, w))
    for ch in range(c):
        dx[ch] = pad_replicate_adjoint(dpad[ch], 1)
    return dx


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n_out = w.shape[0]
    _, h, width = x.shape
    cols = _im2col(x)
    out = cols @ w.reshape(n_out, -1).T + b
    return out.T.reshape(n_out, h, width), cols


def _conv3x3_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray,
                      in_channels: int):
    n_out, h, width = dout.shape
    dflat = dout.reshape(n_out, -1).T
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    dcols = dflat @ w.reshape(n_out, -1)
    dx = _col2im_adjoint(dcols, in_channels, h, width)
    return dx, dw, db


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    expx = np.exp(x[~pos])
    out[~pos] = expx / (1.0 + expx)
    return out


@dataclass
class TinyForwardCache:
    stacked: np.ndarray
    cols1: np.ndarray
    pre1: np.ndarray
    h1: np.ndarray
    cols2: np.ndarray
    pre2: np.ndarray
    h2: np.ndarray
    cols_eps: np.ndarray
    cols_w: np.ndarray
    weight1: np.ndarray


def tiny_forward_cached(p: TinyNetParams, x_t: JointState, t: int,
                        steps: int) -> tuple[DenoiserOutput, TinyForwardCache]:
    h, w = x_t.dims
    if h < 3 or w < 3:
        raise ValueError(f"tiny net needs at least 3x3 planes, got {x_t.dims}")
    stacked = np.stack([x_t.src1, x_t.src2, x_t.fused,
                        np.full((h, w), t / float(steps))])
    pre1, cols1 = _conv3x3(stacked, p.conv1_w, p.conv1_b)
    h1 = np.maximum(pre1, 0.0)
    pre2, cols2 = _conv3x3(h1, p.conv2_w, p.conv2_b)
    h2 = np.maximum(pre2, 0.0)
    eps_planes, cols_eps = _conv3x3(h2, p.eps_w, p.eps_b)
    w_pre, cols_w = _conv3x3(h2, p.w_w, p.w_b)
    weight1 = _sigmoid(w_pre[0])
    out = DenoiserOutput(
        eps=JointState(eps_planes[0], eps_planes[1], eps_planes[2]),
        weight1=weight1,
    )
    cache = TinyForwardCache(stacked, cols1, pre1, h1, cols2, pre2, h2,
                             cols_eps, cols_w, weight1)
    return out, cache


def tiny_forward(p: TinyNetParams, x_t: JointState, t: int, steps: int) -> DenoiserOutput:
    out, _ = tiny_forward_cached(p, x_t, t, steps)
    return out


def tiny_backward_net(p: TinyNetParams, cache: TinyForwardCache,
                      d_eps: np.ndarray, d_weight1: np.ndarray) -> TinyNetParams:
    """Backpropagate (d loss / d eps planes, d loss / d weight map) to params."""
    d_w_pre = (d_weight1 * cache.weight1 * (1.0 - cache.weight1))[None, :, :]
    dh2_eps, d_eps_w, d_eps_b = _conv3x3_backward(d_eps, cache.cols_eps, p.eps_w,
                                                  TRUNK_CHANNELS)
    dh2_w, d_w_w, d_w_b = _conv3x3_backward(d_w_pre, cache.cols_w, p.w_w,
                                            TRUNK_CHANNELS)
    dh2 = (dh2_eps + dh2_w) * (cache.pre2 > 0.0)
    dh1, d_conv2_w, d_conv2_b = _conv3x3_backward(dh2, cache.cols2, p.conv2_w,
                                                  TRUNK_CHANNELS)
    dh1 *= cache.pre1 > 0.0
    _, d_conv1_w, d_conv1_b = _conv3x3_backward(dh1, cache.cols1, p.conv1_w, 4)
    return TinyNetParams(d_conv1_w, d_conv1_b, d_conv2_w, d_conv2_b,
                         d_eps_w, d_eps_b, d_w_w, d_w_b)


class TinyDenoiser:
    def __init__(self, params: TinyNetParams):
        self.params = params

    def predict(self, x_t: JointState, t: int, sched: DiffusionSchedule) -> DenoiserOutput:
        return tiny_forward(self.params, x_t, t, sched.steps)
