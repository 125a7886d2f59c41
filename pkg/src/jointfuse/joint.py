"""Joint degradation-and-fusion observation model.

Two degraded observations and the fusion constraint are stacked into one
block system acting on the joint state [x1, x2, xf]:

    [ y1 ]   [  A1    0    0 ] [ x1 ]
    [ y2 ] = [   0   A2    0 ] [ x2 ]
    [  0 ]   [ -W1  -W2    I ] [ xf ]

with complementary per-pixel fusion weights W2 = 1 - W1. The block
operator's generalized inverse has the closed form

    [  P1        0       0 ]
    [   0       P2       0 ]          P_i = pinv applier of A_i
    [ W1*P1   W2*P2      I ]

which is evaluated implicitly (never materialized in production paths).
The projection correction subtracts pinv(residual) from a state estimate,
optionally scaled down when the observations are noisy. A matrix-free
conjugate-gradient solver provides the true orthogonal projection as an
independent oracle, and dense materialization (size-capped) backs the
Moore-Penrose condition checks.

For rank-deficient degradations (e.g. downsampling) the closed form is a
{1,2,3}-inverse rather than the full Moore-Penrose inverse: condition (4),
symmetry of pinv(A) @ A, fails whenever some P_i A_i != I. The condition
checker reports the measured deviations instead of hiding them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .image import as_plane
from .operators import (
    MATERIALIZE_CAP,
    ConditionReport,
    ConvergenceError,
    LinearDegradation,
    mp_condition_report,
)


@dataclass
class JointState:
    """The joint variable: two restored source planes plus the fused plane."""

    src1: np.ndarray
    src2: np.ndarray
    fused: np.ndarray

    def __post_init__(self):
        self.src1 = as_plane(self.src1, check_finite=False)
        self.src2 = as_plane(self.src2, check_finite=False)
        self.fused = as_plane(self.fused, check_finite=False)
        if not (self.src1.shape == self.src2.shape == self.fused.shape):
            raise ValueError("joint state planes must share dimensions")

    @property
    def dims(self) -> tuple[int, int]:
        return self.src1.shape

    def copy(self) -> "JointState":
        return JointState(self.src1.copy(), self.src2.copy(), self.fused.copy())

    def planes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.src1, self.src2, self.fused


@dataclass
class JointObservation:
    """Right-hand side of the joint system.

    Observations built from data carry an identically-zero third block (the
    fusion row's target). The same container holds images of the block
    operator, where the third slot is the fusion-constraint residual.
    """

    obs1: np.ndarray
    obs2: np.ndarray
    constraint: np.ndarray | None = None

    def __post_init__(self):
        self.obs1 = as_plane(self.obs1, check_finite=False)
        self.obs2 = as_plane(self.obs2, check_finite=False)
        if self.constraint is None:
            raise ValueError("constraint block required; use JointObservation.of()")
        self.constraint = as_plane(self.constraint, check_finite=False)

    @classmethod
    def of(cls, obs1: np.ndarray, obs2: np.ndarray,
           state_dims: tuple[int, int]) -> "JointObservation":
        """Observation with the zero fusion block, sized for the clean domain."""
        return cls(obs1, obs2, np.zeros(state_dims))

    def blocks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.obs1, self.obs2, self.constraint


class JointOperator:
    """The block operator, parameterized by two degradations and a weight map.

    Only the first fusion weight is stored; the second is read everywhere as
    its complement, so W1 + W2 = 1 holds by construction.
    """

    def __init__(self, op1: LinearDegradation, op2: LinearDegradation,
                 weight1: np.ndarray):
        weight1 = as_plane(weight1)
        if op1.in_dims != op2.in_dims:
            raise ValueError(
                f"operators act on different clean domains: {op1.in_dims} vs {op2.in_dims}")
        if tuple(weight1.shape) != tuple(op1.in_dims):
            raise ValueError(
                f"weight map {weight1.shape} does not match clean domain {op1.in_dims}")
        self.op1 = op1
        self.op2 = op2
        self.weight1 = np.clip(weight1, 0.0, 1.0)
        assert float(self.weight1.min()) >= 0.0 and float(self.weight1.max()) <= 1.0

    @property
    def weight2(self) -> np.ndarray:
        return 1.0 - self.weight1

    @property
    def state_dims(self) -> tuple[int, int]:
        return self.op1.in_dims


@dataclass
class CorrectionScale:
    """Per-step attenuation of the correction term under observation noise.

    factor = sqrt(1 - alpha_bar_t) / (sqrt(1 - alpha_bar_t) + sigma_y),
    which is 1 exactly in the noise-free case so the scaled and unscaled
    correction paths coincide bit for bit.
    """

    sigma_y: float = 0.0
    factor: float = 1.0

    def __post_init__(self):
        if self.sigma_y < 0:
            raise ValueError("sigma_y must be non-negative")
        if not 0.0 <= self.factor <= 1.0:
            raise ValueError("correction factor must lie in [0, 1]")

    @classmethod
    def for_step(cls, sigma_y: float, alpha_bar_t: float) -> "CorrectionScale":
        if sigma_y == 0.0:
            return cls(0.0, 1.0)
        root = math.sqrt(max(1.0 - alpha_bar_t, 0.0))
        return cls(sigma_y, root / (root + sigma_y))


def joint_apply(j: JointOperator, s: JointState) -> JointObservation:
    """Image of the state under the block operator.

    The third block is the fusion-constraint residual: zero exactly when
    xf = W1*x1 + W2*x2.
    """
    if s.dims != j.state_dims:
        raise ValueError(f"state dims {s.dims} do not match operator {j.state_dims}")
    fusion_row = -j.weight1 * s.src1 - j.weight2 * s.src2 + s.fused
    return JointObservation(j.op1.apply(s.src1), j.op2.apply(s.src2), fusion_row)


def joint_pinv_apply(j: JointOperator, o: JointObservation) -> JointState:
    """Closed-form generalized inverse applied blockwise.

    The fusion block reuses the two restored blocks rather than recomputing
    the child pseudoinverses.
    """
    u1 = j.op1.apply_pinv(o.obs1)
    u2 = j.op2.apply_pinv(o.obs2)
    if o.constraint.shape != j.state_dims:
        raise ValueError(
            f"constraint block {o.constraint.shape} does not match domain {j.state_dims}")
    fused = j.weight1 * u1 + j.weight2 * u2 + o.constraint
    return JointState(u1, u2, fused)


def joint_transpose_apply(j: JointOperator, o: JointObservation) -> JointState:
    """Transpose of the block operator (observation -> state domain)."""
    v3 = o.constraint
    return JointState(
        j.op1.apply_transpose(o.obs1) - j.weight1 * v3,
        j.op2.apply_transpose(o.obs2) - j.weight2 * v3,
        v3.copy(),
    )


def residual(j: JointOperator, s: JointState, obs: JointObservation) -> JointObservation:
    img = joint_apply(j, s)
    return JointObservation(img.obs1 - obs.obs1, img.obs2 - obs.obs2,
                            img.constraint - obs.constraint)


def correct(est: JointState, j: JointOperator, obs: JointObservation,
            scale: CorrectionScale | None = None) -> JointState:
    """Projection correction: est - factor * pinv(A_joint)(A_joint est - y).

    With factor 1 (noise-free) the output satisfies the fusion row exactly
    and the data rows up to each operator's range projection.
    """
    if scale is None:
        scale = CorrectionScale()
    delta = joint_pinv_apply(j, residual(j, est, obs))
    f = scale.factor
    return JointState(
        est.src1 - f * delta.src1,
        est.src2 - f * delta.src2,
        est.fused - f * delta.fused,
    )


# ---------------------------------------------------------------------------
# Conjugate-gradient orthogonal projection (independent oracle).
# ---------------------------------------------------------------------------


def _dot(a: JointObservation, b: JointObservation) -> float:
    return (float(np.vdot(a.obs1, b.obs1)) + float(np.vdot(a.obs2, b.obs2))
            + float(np.vdot(a.constraint, b.constraint)))


def _axpy(alpha: float, x: JointObservation, y: JointObservation) -> JointObservation:
    return JointObservation(y.obs1 + alpha * x.obs1, y.obs2 + alpha * x.obs2,
                            y.constraint + alpha * x.constraint)


def _inf_norm(o: JointObservation) -> float:
    return max(float(np.max(np.abs(o.obs1))), float(np.max(np.abs(o.obs2))),
               float(np.max(np.abs(o.constraint))))


def _jacobi_diag(j: JointOperator) -> JointObservation:
    """Approximate diag of A_joint A_joint^T, blockwise."""
    d1 = np.full(j.op1.out_dims, max(j.op1.row_norm_sq(), 1e-12))
    d2 = np.full(j.op2.out_dims, max(j.op2.row_norm_sq(), 1e-12))
    w1 = j.weight1
    d3 = w1 * w1 + (1.0 - w1) * (1.0 - w1) + 1.0
    return JointObservation(d1, d2, d3)


def cg_project(est: JointState, j: JointOperator, obs: JointObservation,
               tol: float = 1e-8, max_iter: int = 500) -> JointState:
    """True orthogonal projection of est onto {z : A_joint z = y}.

    Solves the normal equations (A A^T) mu = A est - y with Jacobi-
    preconditioned CG, then returns z = est - A^T mu. The CG residual is the
    constraint residual of the current iterate, so convergence is declared
    on its infinity norm.
    """
    b = residual(j, est, obs)
    if _inf_norm(b) <= tol:
        return est.copy()
    diag = _jacobi_diag(j)

    def precondition(o: JointObservation) -> JointObservation:
        return JointObservation(o.obs1 / diag.obs1, o.obs2 / diag.obs2,
                                o.constraint / diag.constraint)

    def normal_op(o: JointObservation) -> JointObservation:
        return joint_apply(j, joint_transpose_apply(j, o))

    mu = JointObservation(np.zeros(j.op1.out_dims), np.zeros(j.op2.out_dims),
                          np.zeros(j.state_dims))
    r = b
    z = precondition(r)
    p = z
    rz = _dot(r, z)
    converged = False
    for _ in range(max_iter):
        ap = normal_op(p)
        denom = _dot(p, ap)
        if denom <= 0.0:
            break
        alpha = rz / denom
        mu = _axpy(alpha, p, mu)
        r = _axpy(-alpha, ap, r)
        if _inf_norm(r) <= tol:
            converged = True
            break
        z = precondition(r)
        rz_new = _dot(r, z)
        p = _axpy(rz_new / rz, p, z)
        rz = rz_new
    if not converged and _inf_norm(r) > tol:
        raise ConvergenceError(
            f"cg_project stalled: constraint residual {_inf_norm(r):.3e} > tol {tol:.3e} "
            f"after {max_iter} iterations")
    step = joint_transpose_apply(j, mu)
    return JointState(est.src1 - step.src1, est.src2 - step.src2, est.fused - step.fused)


# ---------------------------------------------------------------------------
# Dense oracles (size-capped).
# ---------------------------------------------------------------------------


def _block_pixels(j: JointOperator) -> list[int]:
    dims = [j.op1.out_dims, j.op2.out_dims, j.state_dims]
    return [d[0] * d[1] for d in dims]


def _check_cap(j: JointOperator) -> None:
    n_state = j.state_dims[0] * j.state_dims[1]
    if n_state > MATERIALIZE_CAP or any(p > MATERIALIZE_CAP for p in _block_pixels(j)):
        raise ValueError(f"joint materialization capped at {MATERIALIZE_CAP} pixels per block")


def state_to_vec(s: JointState) -> np.ndarray:
    return np.concatenate([s.src1.ravel(), s.src2.ravel(), s.fused.ravel()])


def vec_to_state(vec: np.ndarray, dims: tuple[int, int]) -> JointState:
    n = dims[0] * dims[1]
    return JointState(vec[:n].reshape(dims), vec[n:2 * n].reshape(dims),
                      vec[2 * n:3 * n].reshape(dims))


def obs_to_vec(o: JointObservation) -> np.ndarray:
    return np.concatenate([o.obs1.ravel(), o.obs2.ravel(), o.constraint.ravel()])


def vec_to_obs(vec: np.ndarray, j: JointOperator) -> JointObservation:
    n1 = j.op1.out_dims[0] * j.op1.out_dims[1]
    n2 = j.op2.out_dims[0] * j.op2.out_dims[1]
    return JointObservation(
        vec[:n1].reshape(j.op1.out_dims),
        vec[n1:n1 + n2].reshape(j.op2.out_dims),
        vec[n1 + n2:].reshape(j.state_dims),
    )


def materialize_joint(j: JointOperator) -> np.ndarray:
    """Dense block matrix, probed column by column (test oracle)."""
    _check_cap(j)
    dims = j.state_dims
    n = dims[0] * dims[1]
    rows = sum(_block_pixels(j))
    mat = np.zeros((rows, 3 * n))
    probe = np.zeros(3 * n)
    for col in range(3 * n):
        probe[col] = 1.0
        mat[:, col] = obs_to_vec(joint_apply(j, vec_to_state(probe, dims)))
        probe[col] = 0.0
    return mat


def materialize_joint_pinv(j: JointOperator) -> np.ndarray:
    """Dense closed-form generalized inverse (test oracle)."""
    _check_cap(j)
    dims = j.state_dims
    n = dims[0] * dims[1]
    rows = sum(_block_pixels(j))
    mat = np.zeros((3 * n, rows))
    probe = np.zeros(rows)
    for col in range(rows):
        probe[col] = 1.0
        mat[:, col] = state_to_vec(joint_pinv_apply(j, vec_to_obs(probe, j)))
        probe[col] = 0.0
    return mat


def check_mp_conditions(j: JointOperator, tol: float = 1e-8) -> ConditionReport:
    """Dense evaluation of all four Moore-Penrose conditions for the pair."""
    return mp_condition_report(materialize_joint(j), materialize_joint_pinv(j), tol)
