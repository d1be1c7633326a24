"""Desk-scale laboratory for score-based generative models on Gaussian mixtures.

Everything is built around analytic score oracles: the data distribution is
an isotropic Gaussian mixture, so true, empirical and conditional diffused
scores are available in closed form and every loss, gap and bound can be
estimated with known error bars.
"""

from .errors import ConfigError, MagnitudeError, NumericalFailure, ScheduleError, UndefinedCorrelation
from .estimates import Estimate
from .gmm import (
    Dataset,
    GmmSpec,
    empirical_diffused_score,
    fisher_mc,
    kl_mc,
    log_density_at_time,
    reference_mixture,
    sample_diffused,
    sample_gmm,
    sample_gmm_truncated,
    second_moment,
    true_diffused_score,
)
from .losses import (
    DecompositionReport,
    McConfig,
    decompose,
    denoising_loss,
    empirical_dsm,
    epsilon_loss,
    esm_loss,
    gen_gap,
    kl_bound_terms,
    mismatch_empirical,
    mismatch_gap_bound_report,
    mismatch_true,
    population_risk,
    score_error,
    smoothed_w2_bound_report,
)
from .mlp import (
    MlpArch,
    ParamVector,
    ScoreNet,
    backprop_eps_loss,
    eps_forward,
    init_params,
    new_net,
    sampling_score_fn,
    score_from_eps,
)
from .optimizers import (
    AdamConfig,
    GradStats,
    SgldConfig,
    adam_step,
    batch_inverse_temperature,
    grad_norm_proxy,
    last_window_avg,
    sgld_generalization_bound,
    sgld_step,
    train,
)
from .schedules import (
    NoiseSchedule,
    TimeMeasure,
    build_cosine_schedule,
    build_uniform_schedule,
    conditional_score,
    ei_backward_sample,
    forward_sample,
    lambda_measure,
    uniform_time_measure,
)
from .topology import (
    BoundParams,
    DistanceMatrix,
    minimize_magnitude_bound,
    mst_lifetime_sum,
    positive_magnitude,
    pseudometric_matrix,
    record_trajectory,
    standard_scales,
    topology_report,
    trajectory_bound_rhs,
)
from .trajectory import LossProbe, TrajectoryRecord, make_loss_probe
from .transport import correlations, w2_bruteforce, w2_exact, w2_report

__version__ = "0.1.0"
