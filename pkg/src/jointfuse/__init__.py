"""Fusion of two degraded images by few-step projected diffusion.

Every reverse-diffusion step is corrected by projecting the current
estimate through a joint degradation-and-fusion block operator with a
closed-form generalized inverse, so intermediate samples stay consistent
with both observations and the fusion constraint.
"""

from .denoiser import (
    DenoiserOutput,
    OracleDenoiser,
    TinyDenoiser,
    TinyNetParams,
    init_params,
    load_params,
    oracle_predict,
    save_params,
    tiny_forward,
    zero_params,
)
from .image import gaussian_noise, sobel_gradient
from .joint import (
    CorrectionScale,
    JointObservation,
    JointOperator,
    JointState,
    cg_project,
    check_mp_conditions,
    correct,
    joint_apply,
    joint_pinv_apply,
)
from .metrics import MetricReport, q_abf, q_mi, ssim
from .operators import (
    Blur,
    Composite,
    ConditionReport,
    ConvergenceError,
    Downsample,
    Identity,
    LinearDegradation,
    OpSpecError,
    gaussian_kernel,
    materialize,
    materialize_pinv,
    parse_opspec,
    source_dims_for_spec,
    svd_pinv,
    verify_operator,
)
from .pgm import PgmFormatError, load_pgm, save_pgm
from .rng import SeededRng
from .sampler import (
    DiffusionSchedule,
    FusionConfig,
    FusionResult,
    ddim_step,
    forward_noise,
    make_schedule,
    run_fusion,
)
from .synth import SynthPair, build_dataset, make_clean_pair
from .training import (
    AdamState,
    LossHyper,
    NumericalError,
    TrainResult,
    TrainSample,
    batch_loss,
    loss_and_grad,
    loss_total,
    make_train_sample,
    tiny_backward,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
