"""Variational-bound training for the absorbing chain, plus MLM pretraining.

The per-step objective draws t uniformly from {1..T}, corrupts the batch
with the forward process, and charges each masked position
reveal_prob * (-log p(x0^i | x_t)); at t = 1 the reveal probability is 1 and
the term is the full reconstruction loss. The sampled term is importance
weighted by T so its expectation matches the full bound; the prior term is
identically 0 because every schedule ends fully masked.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import denoiser
from .corpus import MASK_ID, PAD_ID, SurprisalTable, Vocab
from .denoiser import DenoiserParams, save_checkpoint, load_checkpoint
from .diffusion import (
    ScheduleParams,
    SequenceSchedule,
    forward_sample,
    reveal_probs,
    spindle_schedule,
)
from .rng import as_generator, stream


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    warmup_steps: int = 100
    batch_size: int = 32
    total_steps: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    mlm_pretrain_steps: int = 0
    mlm_mask_rate: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("learning_rate, batch_size, total_steps must be positive")
        if not 0 < self.mlm_mask_rate < 1:
            raise ValueError("mlm_mask_rate must be in (0, 1)")
        if self.warmup_steps < 0 or self.mlm_pretrain_steps < 0:
            raise ValueError("step counts must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    """One sampled-t estimate of the bound, in nats. l_t_kl carries the
    masked-position KL when t >= 2, l_0 the t = 1 reconstruction, l_T the
    (analytically zero) prior term. total is the importance-weighted
    per-content-token estimate.
    """

    l_t_kl: float
    l_0: float
    l_T: float
    total: float
    num_tokens: int = 0


def _pad_batch(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    valid = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        valid[i, : len(s)] = True
    return out, valid


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    z = np.exp(logits - m)
    return logits - m - np.log(z.sum(axis=-1, keepdims=True))


def masked_position_kl(reveal_prob: float, model_prob_truth: float) -> float:
    """KL(q(x_{t-1}^i | x_t, x_0) || p_theta(x_{t-1}^i | x_t)) at a masked
    position collapses to reveal_prob * (-log of the model's mass on the true
    token); the mask-stay components cancel exactly.
    """
    return float(reveal_prob) * -float(np.log(model_prob_truth))


def reverse_mixture_row(
    pred_row: np.ndarray, reveal_prob: float, num_classes: int
) -> np.ndarray:
    """p_theta(x_{t-1}^i | x_t) at a masked position: the model's clean-token
    distribution scaled by the reveal probability, plus mask-stay mass.
    """
    row = np.zeros(num_classes)
    row[: len(pred_row)] = reveal_prob * pred_row
    row[MASK_ID] += 1.0 - reveal_prob
    return row


def diffusion_loss_batch(
    params: DenoiserParams,
    seqs: list[np.ndarray],
    scheds: list[SequenceSchedule],
    t_draws: np.ndarray,
    rng: np.random.Generator | int | None,
    *,
    train: bool = True,
    want_grads: bool = True,
) -> tuple[LossBreakdown, dict[str, np.ndarray] | None]:
    """Sampled-t bound estimate and its parameter gradients for a batch.

    Each item carries its own schedule and time draw. Gradients are of
    `total`, i.e. already importance-weighted and per-token normalized.
    """
    rng = as_generator(rng)
    big_t = scheds[0].num_steps
    for s in scheds:
        if s.num_steps != big_t:
            raise ValueError("all schedules in a batch must share T")
        if np.any(s.alpha_bar[-1] != 0.0):
            raise ValueError("prior term nonzero: schedule must end fully masked")
    t_draws = np.asarray(t_draws, dtype=np.int64)
    if ((t_draws < 1) | (t_draws > big_t)).any():
        raise ValueError("t draws must lie in {1..T}")

    xts, reveals = [], []
    for x0, sched, t in zip(seqs, scheds, t_draws):
        x0 = np.asarray(x0, dtype=np.int64)
        if (x0 == MASK_ID).any():
            raise ValueError("training sequence contains [MASK]")
        xts.append(forward_sample(x0, int(t), sched, rng))
        reveals.append(reveal_probs(int(t), int(t) - 1, sched))

    xt_pad, valid = _pad_batch(xts)
    x0_pad, _ = _pad_batch([np.asarray(s, dtype=np.int64) for s in seqs])
    r_pad = np.zeros_like(xt_pad, dtype=np.float64)
    for i, r in enumerate(reveals):
        r_pad[i, : len(r)] = r

    mode = params.config.mode
    t_in = t_draws if mode in ("lte", "pte") else None
    logits, cache = denoiser.forward(params, xt_pad, t_in, train=train, rng=rng)

    masked = (xt_pad == MASK_ID) & valid
    logp = _log_softmax(logits)
    rows = np.arange(xt_pad.shape[0])[:, None]
    cols = np.arange(xt_pad.shape[1])[None, :]
    ce = -logp[rows, cols, x0_pad]
    weights = np.where(masked, r_pad, 0.0)

    per_item = (weights * np.where(masked, ce, 0.0)).sum(axis=1)
    is_recon = t_draws == 1
    l0 = float(per_item[is_recon].sum())
    l_kl = float(per_item[~is_recon].sum())
    num_tokens = int(valid.sum())
    total = big_t * (l_kl + l0) / num_tokens

    grads = None
    if want_grads:
        onehot_grad = np.exp(logp)
        onehot_grad[rows, cols, x0_pad] -= 1.0
        upstream = onehot_grad * (weights * big_t / num_tokens)[:, :, None]
        upstream[~masked] = 0.0
        grads = denoiser.backward(cache, upstream.astype(params.dtype))
    return LossBreakdown(l_kl, l0, 0.0, total, num_tokens), grads


def diffusion_loss(
    params: DenoiserParams,
    x0: np.ndarray,
    t_draw: int,
    sched: SequenceSchedule,
    rng: np.random.Generator | int | None,
    *,
    train: bool = True,
    want_grads: bool = True,
) -> tuple[LossBreakdown, dict[str, np.ndarray] | None]:
    """Single-sequence form of `diffusion_loss_batch`."""
    return diffusion_loss_batch(
        params, [np.asarray(x0)], [sched], np.array([t_draw]), rng,
        train=train, want_grads=want_grads,
    )


def mlm_pretrain_step(
    params: DenoiserParams,
    seqs: list[np.ndarray],
    mask_rate: float,
    rng: np.random.Generator | int | None,
    *,
    train: bool = True,
    want_grads: bool = True,
) -> tuple[float, dict[str, np.ndarray] | None]:
    """Masked-LM cross entropy: mask each position independently, score masked
    positions only, averaged per masked token. A draw that masks nothing is
    retried once and then the item is skipped. lte/pte models receive the
    sentinel step t = T.
    """
    if not 0 < mask_rate <= 1:
        raise ValueError("mask_rate must be in (0, 1]")
    rng = as_generator(rng)
    xts, keep = [], []
    for x0 in seqs:
        x0 = np.asarray(x0, dtype=np.int64)
        if (x0 == MASK_ID).any():
            raise ValueError("training sequence contains [MASK]")
        m = rng.random(len(x0)) < mask_rate
        if not m.any():
            m = rng.random(len(x0)) < mask_rate
        if not m.any():
            continue
        xts.append(np.where(m, MASK_ID, x0))
        keep.append(x0)
    if not xts:
        return 0.0, params.zeros_like() if want_grads else None

    xt_pad, valid = _pad_batch(xts)
    x0_pad, _ = _pad_batch(keep)
    mode = params.config.mode
    t_in = np.full(len(xts), params.config.num_steps) if mode in ("lte", "pte") else None
    logits, cache = denoiser.forward(params, xt_pad, t_in, train=train, rng=rng)
    masked = (xt_pad == MASK_ID) & valid
    logp = _log_softmax(logits)
    rows = np.arange(xt_pad.shape[0])[:, None]
    cols = np.arange(xt_pad.shape[1])[None, :]
    ce = -logp[rows, cols, x0_pad]
    num_masked = int(masked.sum())
    loss = float(ce[masked].sum() / num_masked)

    grads = None
    if want_grads:
        upstream = np.exp(logp)
        upstream[rows, cols, x0_pad] -= 1.0
        upstream[~masked] = 0.0
        upstream /= num_masked
        grads = denoiser.backward(cache, upstream.astype(params.dtype))
    return loss, grads


# --- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: DenoiserParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like())


def learning_rate_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 1e-8 to the target over warmup_steps, then constant."""
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return 1e-8 + (cfg.learning_rate - 1e-8) * step / cfg.warmup_steps
    return cfg.learning_rate


def adam_step(
    params: DenoiserParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
    step: int,
) -> tuple[DenoiserParams, AdamState, bool]:
    """One decoupled-weight-decay Adam update (in place; step is 1-based).

    Weight decay applies to matrices only, never biases or norm gains. A
    non-finite gradient skips the whole update and reports it.
    """
    if set(grads) != set(params.tensors):
        raise ValueError("gradient names do not match parameters")
    for name, g in grads.items():
        if g.shape != params.tensors[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.isfinite(g).all():
            return params, state, True
    lr = learning_rate_at(step, cfg)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, g in grads.items():
        p = params.tensors[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if cfg.weight_decay > 0 and p.ndim >= 2:
            update = update + cfg.weight_decay * p
        p -= lr * update
    return params, state, False


# --- training orchestration ------------------------------------------------------

@dataclass
class TrainResult:
    params: DenoiserParams
    opt_state: AdamState
    metrics: list[dict]
    final_step: int


def _opt_records(state: AdamState) -> dict[str, np.ndarray]:
    rec = {f"opt.m.{k}": v for k, v in state.m.items()}
    rec.update({f"opt.v.{k}": v for k, v in state.v.items()})
    return rec


def opt_state_from_records(params: DenoiserParams, records: dict[str, np.ndarray]) -> AdamState:
    state = AdamState.zeros(params)
    for name in params.names():
        if f"opt.m.{name}" in records:
            state.m[name] = records[f"opt.m.{name}"].astype(params.dtype)
            state.v[name] = records[f"opt.v.{name}"].astype(params.dtype)
    return state


def run_training(
    params: DenoiserParams,
    vocab: Vocab,
    surprisal: SurprisalTable,
    sequences: list[np.ndarray],
    sched_params: ScheduleParams,
    cfg: TrainConfig,
    *,
    out_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    log_every: int = 50,
    start_step: int = 0,
    opt_state: AdamState | None = None,
    val_fn=None,
    val_every: int = 0,
    stop_fn=None,
) -> TrainResult:
    """MLM pretraining (first mlm_pretrain_steps steps) followed by diffusion
    training. Every step derives its randomness from (seed, step), so a run
    resumed from a checkpoint replays identically; checkpoints round live
    state through their float32 on-disk form so interrupted and uninterrupted
    runs agree bitwise.
    """
    if not sequences:
        raise ValueError("no training sequences")
    sequences = [np.asarray(s, dtype=np.int64) for s in sequences]
    if opt_state is None:
        opt_state = AdamState.zeros(params)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    sched_cache: dict[int, SequenceSchedule] = {}

    def sched_for(idx: int) -> SequenceSchedule:
        if idx not in sched_cache:
            sched_cache[idx] = spindle_schedule(surprisal.h_for(sequences[idx]), sched_params)
        return sched_cache[idx]

    metrics: list[dict] = []
    metrics_path = out / "metrics.jsonl" if out is not None else None
    total = cfg.mlm_pretrain_steps + cfg.total_steps
    t_start = time.monotonic()
    vocab_hash = vocab.content_hash()

    def emit_checkpoint(step: int) -> None:
        nonlocal params, opt_state
        path = out / f"checkpoint_{step:07d}.spnd"
        save_checkpoint(
            path, params, lam=sched_params.lam, vocab_hash=vocab_hash,
            step=step, extra_tensors=_opt_records(opt_state),
        )
        ckpt = load_checkpoint(path, dtype=params.dtype)
        params = ckpt.params
        opt_state = opt_state_from_records(params, ckpt.extra_tensors)

    step = start_step
    while step < total:
        step += 1
        mlm_phase = step <= cfg.mlm_pretrain_steps
        rng = stream(cfg.seed, "train", step)
        idx = rng.integers(0, len(sequences), size=cfg.batch_size)
        batch = [sequences[i] for i in idx]
        if mlm_phase:
            loss, grads = mlm_pretrain_step(params, batch, cfg.mlm_mask_rate, rng)
            breakdown = LossBreakdown(0.0, 0.0, 0.0, loss)
            opt_step = step
        else:
            scheds = [sched_for(i) for i in idx]
            t_draws = rng.integers(1, sched_params.num_steps + 1, size=cfg.batch_size)
            breakdown, grads = diffusion_loss_batch(params, batch, scheds, t_draws, rng)
            loss = breakdown.total
            opt_step = step - cfg.mlm_pretrain_steps
            if opt_step == 1:
                opt_state = AdamState.zeros(params)  # fresh optimizer per phase
        params, opt_state, skipped = adam_step(params, grads, opt_state, cfg, opt_step)

        record = None
        if step % log_every == 0 or step == total:
            record = {
                "step": step,
                "phase": "mlm" if mlm_phase else "diffusion",
                "loss_total": float(loss),
                "l_t_kl": breakdown.l_t_kl,
                "l0": breakdown.l_0,
                "lT": breakdown.l_T,
                "lr": learning_rate_at(opt_step, cfg),
                "elapsed_s": time.monotonic() - t_start,
            }
            if skipped:
                record["skipped_update"] = True
        if val_fn is not None and val_every > 0 and (step % val_every == 0 or step == total):
            if record is None:
                record = {"step": step, "phase": "mlm" if mlm_phase else "diffusion"}
            record["val_elbo"] = float(val_fn(params, step))
        if record is not None:
            metrics.append(record)
            if metrics_path is not None:
                with metrics_path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
        if out is not None and checkpoint_every > 0 and step % checkpoint_every == 0:
            emit_checkpoint(step)
        if stop_fn is not None and stop_fn(metrics, step):
            break

    if out is not None:
        emit_checkpoint(step)
    return TrainResult(params, opt_state, metrics, step)
