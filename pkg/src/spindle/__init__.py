"""Absorbing-state discrete text diffusion with a per-token spindle schedule."""

from .corpus import (
    CLS_ID,
    MASK_ID,
    PAD_ID,
    UNK_ID,
    SurprisalTable,
    Vocab,
    build_vocab,
    detokenize,
    surprisal_table,
    tokenize,
)
from .denoiser import (
    Checkpoint,
    DenoiserConfig,
    DenoiserParams,
    backward,
    forward,
    init_params,
    load_checkpoint,
    predict_x0_logits,
    save_checkpoint,
)
from .diffusion import (
    ScheduleParams,
    SequenceSchedule,
    flat_schedule,
    forward_marginal,
    forward_sample,
    posterior,
    reveal_probs,
    schedule_from_alpha_bar,
    schedule_from_betas,
    skip_posterior,
    spindle_alpha_raw,
    spindle_schedule,
)
from .evaluation import (
    MetricsReport,
    bleu4,
    elbo_eval,
    exact_elbo,
    model_predict_fn,
    quality_diversity_sweep,
    self_bleu4,
    sentence_bleu,
)
from .sampling import GenerationResult, SampleConfig, generate, generate_batch, top_k_filter
from .training import (
    AdamState,
    LossBreakdown,
    TrainConfig,
    TrainResult,
    adam_step,
    diffusion_loss,
    diffusion_loss_batch,
    learning_rate_at,
    masked_position_kl,
    mlm_pretrain_step,
    reverse_mixture_row,
    run_training,
)

__version__ = "0.1.0"
