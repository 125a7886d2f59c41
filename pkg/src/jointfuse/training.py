"""Losses, hand-derived gradients and the Adam training loop.

Training unrolls exactly one corrected reverse step per sample: the network
predicts (eps, weight map) for a noised state, the step-0 estimate is
projected through the joint observation model, and the corrected triple is
supervised against the clean sources. The projection is linear in the state
estimate, so its adjoint is applied analytically; the weight map enters the
fused block bilinearly and gets its own elementwise gradient.

All norms are per-pixel means so the loss weights are size-free. The total
loss is rec + lambda * fusion, with the fusion term per task:

  ir_vis   |xf - max(labels)|_1 + gamma * |grad xf - max(grad labels)|_1,
           grad = Sobel magnitude, max elementwise
  medical  sum_i |xf - label_i|_1 + phi * (1 - SSIM(xf, label_i))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .denoiser import (
    TinyNetParams,
    init_params,
    tiny_backward_net,
    tiny_forward_cached,
    zero_params,
)
from .image import sobel_adjoint, sobel_gradient
from .joint import CorrectionScale, JointObservation, JointState
from .metrics import ssim_and_grad
from .operators import LinearDegradation
from .rng import SeededRng
from .sampler import DiffusionSchedule, FusionConfig, forward_noise, make_schedule


class NumericalError(RuntimeError):
    """Training diverged (NaN / Inf loss)."""


@dataclass
class LossHyper:
    lam: float = 10.0
    gamma: float = 20.0
    phi: float = 10.0
    task: str = "ir_vis"

    def __post_init__(self):
        if min(self.lam, self.gamma, self.phi) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.task not in ("ir_vis", "medical"):
            raise ValueError(f"task must be 'ir_vis' or 'medical', got {self.task!r}")


def _l1_and_grad(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def loss_total(pred_state: JointState, w1: np.ndarray,
               labels: tuple[np.ndarray, np.ndarray],
               h: LossHyper) -> tuple[float, dict[str, float]]:
    """Total loss and a per-term breakdown.

    The weight map is part of the prediction interface but does not enter
    the loss value; it reaches the loss only through the fused plane.
    """
    value, terms, _ = loss_and_grad(pred_state, w1, labels, h)
    return value, terms


def loss_and_grad(pred_state: JointState, w1: np.ndarray,
                  labels: tuple[np.ndarray, np.ndarray],
                  h: LossHyper) -> tuple[float, dict[str, float], JointState]:
    """Loss, per-term breakdown and the gradient with respect to the state."""
    lab1, lab2 = labels
    if lab1.shape != pred_state.dims or lab2.shape != pred_state.dims:
        raise ValueError("label dims do not match prediction")
    rec1, d_src1 = _l1_and_grad(pred_state.src1, lab1)
    rec2, d_src2 = _l1_and_grad(pred_state.src2, lab2)
    rec = rec1 + rec2

    xf = pred_state.fused
    if h.task == "ir_vis":
        target = np.maximum(lab1, lab2)
        intensity, d_fused = _l1_and_grad(xf, target)
        gx, gy, mag = sobel_gradient(xf)
        _, _, mag1 = sobel_gradient(lab1)
        _, _, mag2 = sobel_gradient(lab2)
        grad_term, d_mag = _l1_and_grad(mag, np.maximum(mag1, mag2))
        safe = np.where(mag == 0.0, 1.0, mag)
        scale = np.where(mag == 0.0, 0.0, d_mag / safe)
        d_fused = d_fused + h.gamma * sobel_adjoint(scale * gx, scale * gy)
        fusion = intensity + h.gamma * grad_term
        terms = {"rec": rec, "fusion_intensity": intensity, "fusion_gradient": grad_term}
    else:
        fusion = 0.0
        d_fused = np.zeros_like(xf)
        ssim_total = 0.0
        for lab in (lab1, lab2):
            l1_term, d_l1 = _l1_and_grad(xf, lab)
            ssim_value, d_ssim = ssim_and_grad(xf, lab)
            fusion += l1_term + h.phi * (1.0 - ssim_value)
            ssim_total += ssim_value
            d_fused = d_fused + d_l1 - h.phi * d_ssim
        terms = {"rec": rec, "fusion_ssim_mean": 0.5 * ssim_total}

    total = rec + h.lam * fusion
    terms["fusion"] = fusion
    terms["total"] = total
    grad = JointState(d_src1, d_src2, h.lam * d_fused)
    return total, terms, grad


# ---------------------------------------------------------------------------
# One unrolled corrected step, differentiable by hand.
# ---------------------------------------------------------------------------


@dataclass
class TrainSample:
    """Everything one sample contributes to a training step.

    The timestep and forward noise are drawn once when the sample is built,
    so the loss is a deterministic function of the parameters.
    """

    x_t: JointState
    t: int
    obs: JointObservation
    op1: LinearDegradation
    op2: LinearDegradation
    label1: np.ndarray
    label2: np.ndarray


def _unrolled_step(params: TinyNetParams, sample: TrainSample,
                   sched: DiffusionSchedule, cfg: FusionConfig):
    """Forward pass of net -> step-0 estimate -> projection correction."""
    out, cache = tiny_forward_cached(params, sample.x_t, sample.t, sched.steps)
    ab = float(sched.alpha_bar[sample.t])
    coeff = math.sqrt(1.0 - ab)
    if cfg.ddim_normalize:
        coeff /= math.sqrt(ab)
        x0 = [(xp / math.sqrt(ab)) - coeff * ep
              for xp, ep in zip(sample.x_t.planes(), out.eps.planes())]
    else:
        x0 = [xp - coeff * ep for xp, ep in zip(sample.x_t.planes(), out.eps.planes())]
    x1h, x2h, xfh = x0

    w1 = out.weight1
    w2 = 1.0 - w1
    u1 = sample.op1.apply_pinv(sample.op1.apply(x1h) - sample.obs.obs1)
    u2 = sample.op2.apply_pinv(sample.op2.apply(x2h) - sample.obs.obs2)
    r3 = -w1 * x1h - w2 * x2h + xfh
    s = CorrectionScale.for_step(cfg.sigma_y, ab).factor
    corrected = JointState(
        x1h - s * u1,
        x2h - s * u2,
        xfh - s * (w1 * u1 + w2 * u2 + r3),
    )
    ctx = (out, cache, coeff, (x1h, x2h, xfh), (u1, u2), w1, s)
    return corrected, ctx


def _unrolled_step_backward(params: TinyNetParams, sample: TrainSample,
                            d_state: JointState, ctx) -> TinyNetParams:
    out, cache, coeff, (x1h, x2h, _), (u1, u2), w1, s = ctx
    g1, g2, gf = d_state.planes()
    w2 = 1.0 - w1

    d_u1 = -s * (g1 + w1 * gf)
    d_u2 = -s * (g2 + w2 * gf)
    d_x1h = g1 + s * w1 * gf + sample.op1.apply_transpose(
        sample.op1.apply_pinv_transpose(d_u1))
    d_x2h = g2 + s * w2 * gf + sample.op2.apply_transpose(
        sample.op2.apply_pinv_transpose(d_u2))
    d_xfh = (1.0 - s) * gf
    d_w1 = s * gf * ((x1h - u1) - (x2h - u2))

    d_eps = np.stack([-coeff * d_x1h, -coeff * d_x2h, -coeff * d_xfh])
    return tiny_backward_net(params, cache, d_eps, d_w1)


def _accumulate(total: TinyNetParams, delta: TinyNetParams, weight: float) -> None:
    for (_, dst), (_, src) in zip(total.arrays(), delta.arrays()):
        dst += weight * src


def tiny_backward(params: TinyNetParams, batch: list[TrainSample],
                  sched: DiffusionSchedule, h: LossHyper,
                  cfg: FusionConfig) -> tuple[TinyNetParams, float]:
    """Exact analytic gradient of the mean batch loss, plus the loss value.

    Per-sample gradients are averaged in batch order so the reduction is
    bit-reproducible.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    grads = zero_params()
    total_loss = 0.0
    weight = 1.0 / len(batch)
    for sample in batch:
        corrected, ctx = _unrolled_step(params, sample, sched, cfg)
        value, _, d_state = loss_and_grad(corrected, ctx[0].weight1,
                                          (sample.label1, sample.label2), h)
        d_scaled = JointState(*(weight * p for p in d_state.planes()))
        sample_grads = _unrolled_step_backward(params, sample, d_scaled, ctx)
        _accumulate(grads, sample_grads, 1.0)
        total_loss += weight * value
    return grads, total_loss


def batch_loss(params: TinyNetParams, batch: list[TrainSample],
               sched: DiffusionSchedule, h: LossHyper, cfg: FusionConfig) -> float:
    """Mean loss only; the finite-difference side of the gradient check."""
    total = 0.0
    for sample in batch:
        corrected, ctx = _unrolled_step(params, sample, sched, cfg)
        value, _, _ = loss_and_grad(corrected, ctx[0].weight1,
                                    (sample.label1, sample.label2), h)
        total += value
    return total / len(batch)


def make_train_sample(clean1: np.ndarray, clean2: np.ndarray, y1: np.ndarray,
                      y2: np.ndarray, op1: LinearDegradation,
                      op2: LinearDegradation, sched: DiffusionSchedule,
                      rng: SeededRng) -> TrainSample:
    """Draw a timestep, build the noised init state and freeze the sample."""
    t = rng.randint(sched.steps) + 1
    restored1 = op1.apply_pinv(np.asarray(y1, dtype=np.float64))
    restored2 = op2.apply_pinv(np.asarray(y2, dtype=np.float64))
    init = JointState(restored1, restored2, 0.5 * (restored1 + restored2))
    x_t = forward_noise(init, t, sched, rng)
    obs = JointObservation.of(y1, y2, op1.in_dims)
    return TrainSample(x_t, t, obs, op1, op2,
                       np.asarray(clean1, dtype=np.float64),
                       np.asarray(clean2, dtype=np.float64))


# ---------------------------------------------------------------------------
# Adam.
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: TinyNetParams, grads: TinyNetParams) -> TinyNetParams:
        self.step += 1
        bias1 = 1.0 - self.beta1 ** self.step
        bias2 = 1.0 - self.beta2 ** self.step
        new_fields = {}
        for (name, p), (_, g) in zip(params.arrays(), grads.arrays()):
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * g * g
            m_hat = m / bias1
            v_hat = v / bias2
            new_fields[name] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)
        return TinyNetParams(**new_fields)


@dataclass
class TrainResult:
    params: TinyNetParams
    losses: list[float]


def train(dataset, h: LossHyper, epochs: int, batch: int, adam: AdamState,
          seed: int, cfg: FusionConfig | None = None,
          init_scale: float = 1.0) -> TrainResult:
    """Adam training over a sequence of (clean1, clean2, y1, y2, op1, op2).

    Deterministic given the seed: shuffling, timestep draws and forward
    noise all come from one stream. Aborts with the step index on NaN loss.
    """
    if cfg is None:
        cfg = FusionConfig(seed=seed)
    sched = make_schedule(cfg)
    rng = SeededRng(seed)
    params = init_params(rng, scale=init_scale)
    losses: list[float] = []
    pairs = list(dataset)
    if not pairs:
        raise ValueError("dataset is empty")
    step_index = 0
    for _ in range(epochs):
        order = list(range(len(pairs)))
        for i in range(len(order) - 1, 0, -1):  # Fisher-Yates from the stream
            j = rng.randint(i + 1)
            order[i], order[j] = order[j], order[i]
        for start in range(0, len(order), batch):
            chosen = order[start:start + batch]
            if not chosen:
                continue
            samples = [make_train_sample(*pairs[k], sched=sched, rng=rng)
                       for k in chosen]
            grads, value = tiny_backward(params, samples, sched, h, cfg)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at step {step_index}")
            losses.append(value)
            params = adam.update(params, grads)
            step_index += 1
    return TrainResult(params=params, losses=losses)
