"""Few-step corrected DDIM sampling loop.

The reverse chain runs on the full joint state. Each step predicts noise
and a fusion weight map, reconstructs the step-0 estimate, projects it
through the joint observation model, then advances deterministically
(sigma_t = 0). The default three-step schedule interpolates alpha_bar
linearly from 0.9 down to 0.3; conventional thousand-step schedules are
meaningless at this step count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .image import clamp01
from .joint import (
    CorrectionScale,
    JointObservation,
    JointOperator,
    JointState,
    correct,
)
from .operators import LinearDegradation
from .rng import SeededRng


@dataclass
class DiffusionSchedule:
    """Cumulative alpha_bar values indexed 0..T with alpha_bar[0] = 1."""

    steps: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        if self.alpha_bar.shape != (self.steps + 1,):
            raise ValueError(
                f"alpha_bar must have length T+1={self.steps + 1}, got {self.alpha_bar.shape}")
        if self.alpha_bar[0] != 1.0:
            raise ValueError("alpha_bar[0] must be 1")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if self.alpha_bar[-1] <= 0.0:
            raise ValueError("alpha_bar must stay positive")

    def betas(self) -> np.ndarray:
        """Per-step noise rates beta_t = 1 - alpha_bar[t]/alpha_bar[t-1]."""
        return 1.0 - self.alpha_bar[1:] / self.alpha_bar[:-1]


@dataclass
class FusionConfig:
    steps: int = 3
    alpha_bar_first: float = 0.9
    alpha_bar_last: float = 0.3
    sigma_y: float = 0.0
    ddim_normalize: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.alpha_bar_last < self.alpha_bar_first < 1.0:
            raise ValueError(
                "need 0 < alpha_bar_last < alpha_bar_first < 1, got "
                f"{self.alpha_bar_last} / {self.alpha_bar_first}")
        if self.sigma_y < 0:
            raise ValueError("sigma_y must be non-negative")


def make_schedule(cfg: FusionConfig) -> DiffusionSchedule:
    """Linear alpha_bar schedule from alpha_bar_first (t=1) to alpha_bar_last (t=T)."""
    if cfg.steps == 1:
        values = np.array([cfg.alpha_bar_last])
    else:
        values = np.linspace(cfg.alpha_bar_first, cfg.alpha_bar_last, cfg.steps)
    return DiffusionSchedule(cfg.steps, np.concatenate([[1.0], values]))


def forward_noise(x0: JointState, t: int, sched: DiffusionSchedule,
                  rng: SeededRng) -> JointState:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, per plane.

    The three planes consume independent draws in (src1, src2, fused) order.
    """
    if not 0 <= t <= sched.steps:
        raise ValueError(f"t must be in [0, {sched.steps}], got {t}")
    ab = float(sched.alpha_bar[t])
    if ab == 1.0:
        return x0.copy()
    scale = math.sqrt(ab)
    noise = math.sqrt(1.0 - ab)
    return JointState(*(scale * plane + noise * rng.normal(plane.shape)
                        for plane in x0.planes()))


def ddim_step(x_t: JointState, eps: JointState, t: int, sched: DiffusionSchedule,
              normalize: bool = False) -> tuple[JointState, Callable[[JointState], JointState]]:
    """One deterministic reverse step, split around the external correction.

    Returns the step-0 estimate x0_hat = x_t - sqrt(1 - alpha_bar_t) * eps
    (divided by sqrt(alpha_bar_t) when `normalize`, the textbook DDIM form)
    and a stepper that advances a corrected estimate to x_{t-1} as
    sqrt(alpha_bar_{t-1}) * corrected + sqrt(1 - alpha_bar_{t-1}) * eps.
    """
    if not 1 <= t <= sched.steps:
        raise ValueError(f"t must be in [1, {sched.steps}], got {t}")
    ab_t = float(sched.alpha_bar[t])
    ab_prev = float(sched.alpha_bar[t - 1])
    noise_t = math.sqrt(1.0 - ab_t)
    x0_planes = [xp - noise_t * ep for xp, ep in zip(x_t.planes(), eps.planes())]
    if normalize:
        inv = 1.0 / math.sqrt(ab_t)
        x0_planes = [p * inv for p in x0_planes]
    x0_hat = JointState(*x0_planes)

    scale_prev = math.sqrt(ab_prev)
    noise_prev = math.sqrt(1.0 - ab_prev)

    def stepper(corrected: JointState) -> JointState:
        return JointState(*(scale_prev * cp + noise_prev * ep
                            for cp, ep in zip(corrected.planes(), eps.planes())))

    return x0_hat, stepper


class Denoiser(Protocol):
    def predict(self, x_t: JointState, t: int, sched: DiffusionSchedule):
        """Return a DenoiserOutput for the joint state at step t."""


@dataclass
class FusionResult:
    fused: np.ndarray
    trace: list[JointState] = field(default_factory=list)
    final_state: JointState | None = None


def run_fusion(y1: np.ndarray, y2: np.ndarray, a1: LinearDegradation,
               a2: LinearDegradation, den: Denoiser, cfg: FusionConfig,
               keep_trace: bool = False) -> FusionResult:
    """Full corrected-DDIM fusion loop.

    Initialization pulls each observation back through its pseudoinverse and
    seeds the fused plane with their plain average, then forward-noises the
    triple to level T. Each of the T reverse steps predicts (eps, weight
    map), reconstructs the step-0 estimate, projects it through the joint
    observation model and advances. The fused plane of the final state is
    clamped to [0, 1] only at extraction; the trace keeps the corrected
    estimate of every step for diagnostics.
    """
    if tuple(a1.in_dims) != tuple(a2.in_dims):
        raise ValueError(f"operators disagree on clean dims: {a1.in_dims} vs {a2.in_dims}")
    sched = make_schedule(cfg)
    rng = SeededRng(cfg.seed)

    restored1 = a1.apply_pinv(y1)
    restored2 = a2.apply_pinv(y2)
    init = JointState(restored1, restored2, 0.5 * (restored1 + restored2))
    obs = JointObservation.of(np.asarray(y1, dtype=np.float64),
                              np.asarray(y2, dtype=np.float64), a1.in_dims)

    state = forward_noise(init, sched.steps, sched, rng)
    trace: list[JointState] = []
    for t in range(sched.steps, 0, -1):
        out = den.predict(state, t, sched)
        joint = JointOperator(a1, a2, out.weight1)
        x0_hat, stepper = ddim_step(state, out.eps, t, sched, cfg.ddim_normalize)
        scale = CorrectionScale.for_step(cfg.sigma_y, float(sched.alpha_bar[t]))
        corrected = correct(x0_hat, joint, obs, scale)
        if keep_trace:
            trace.append(corrected.copy())
        state = stepper(corrected)

    fused = clamp01(state.fused)
    if not np.all(np.isfinite(fused)):
        raise FloatingPointError("fusion produced non-finite values")
    return FusionResult(fused=fused, trace=trace, final_state=state)
