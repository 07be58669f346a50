"""Reward-aligned sampling from masked discrete diffusion models.

Twisted sequential Monte Carlo over the masked-diffusion reverse chain, with
the twist supplied by an exact enumeration oracle, a Monte-Carlo estimator,
or a learned head trained by contrastive distribution matching or by
soft-value regression. Everything is verifiable against exact enumeration
on small state spaces.
"""

from .diffusion import (
    DataDist,
    DenoiserTrainConfig,
    MlpDenoiser,
    NoiseSchedule,
    TabularDenoiser,
    Vocab,
    forward_noise,
    reverse_step_dist,
    reverse_step_sample,
    sample_base,
    sample_base_batch,
    train_denoiser,
    transition_logprob,
)
from .nn import AdamWState, EmaState, MlpSpec, adamw_step, ema_update
from .oracle import DistTable, ExactOracle, kl, tv
from .rewards import RewardFn, eval_batch, make_reward, motif_count, pattern_match, token_count, with_latency
from .smc import (
    BaseProposal,
    SmcConfig,
    SmcResult,
    TiltedProposal,
    best_of_n,
    ess,
    incremental_log_weight,
    multinomial_resample,
    tilted_proposal,
    twist_smc,
)
from .training import (
    PositiveBuffer,
    TrainConfig,
    TrainResult,
    cdm_negatives,
    cdm_refresh_buffer,
    cdm_step,
    svdd_step,
    time_averaged_target_kl,
    train,
)
from .twist import (
    ConstantTwist,
    ExactTwist,
    LearnedTwist,
    McTwist,
    McTwistConfig,
    exact_twist_fn,
    make_twist,
    mc_log_twist,
    twist_features,
)

__version__ = "0.1.0"
