"""Closed-form absorbing-chain diffusion math.

Each token follows an independent two-state chain: it keeps its identity
with probability alpha_bar[t, i] after t forward steps and is [MASK]
otherwise. The spindle schedule gives every position its own retention
curve based on how informative its token is, while preserving the global
rate of information destruction (weighted mean retention = 1 - t/T).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import MASK_ID
from .rng import as_generator


@dataclass(frozen=True)
class ScheduleParams:
    """Global schedule knobs: number of steps T, spindle amplitude lam
    (lam = 0 reduces exactly to beta_t = 1/(T - t + 1)), and an optional
    margin keeping interior retention probabilities away from 0/1.
    """

    num_steps: int
    lam: float = 0.3
    clamp_eps: float = 0.0

    def __post_init__(self) -> None:
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not 0 <= self.clamp_eps < 0.5:
            raise ValueError("clamp_eps must be in [0, 0.5)")


@dataclass(frozen=True)
class SequenceSchedule:
    """Retention probabilities for one concrete sequence.

    alpha_bar has shape (T+1, n) with alpha_bar[0] == 1 and alpha_bar[T] == 0,
    nonincreasing in t. clamp_events counts raw values that fell outside
    [0, 1] or broke monotonicity before correction.
    """

    alpha_bar: np.ndarray
    h_seq: np.ndarray
    clamp_events: int = 0

    @property
    def num_steps(self) -> int:
        return self.alpha_bar.shape[0] - 1

    @property
    def length(self) -> int:
        return self.alpha_bar.shape[1]


def spindle_alpha_raw(h_seq: np.ndarray, params: ScheduleParams) -> np.ndarray:
    """Pre-clamp retention grid, shape (T+1, n) (or (B, T+1, n) for batched h).

    alpha_bar[t, i] = 1 - t/T - lam*sin(pi*t/T) * (1 - mean(h)/h[i]).
    The h-weighted mean of each row is exactly 1 - t/T for any lam.
    """
    h = np.asarray(h_seq, dtype=np.float64)
    if h.ndim not in (1, 2):
        raise ValueError("h_seq must be 1-D or 2-D")
    if h.shape[-1] < 1:
        raise ValueError("sequence must be non-empty")
    if not np.all((h > 0) & np.isfinite(h)):
        raise ValueError("all surprisals must be positive and finite")
    T = params.num_steps
    t = np.arange(T + 1, dtype=np.float64)
    s_t = params.lam * np.sin(t * np.pi / T)
    h_tilde = 1.0 - h.mean(axis=-1, keepdims=True) / h
    frac = 1.0 - t / T
    if h.ndim == 1:
        return frac[:, None] - s_t[:, None] * h_tilde[None, :]
    return frac[None, :, None] - s_t[None, :, None] * h_tilde[:, None, :]


def _clamp_monotone(raw: np.ndarray, params: ScheduleParams) -> tuple[np.ndarray, int]:
    lo, hi = params.clamp_eps, 1.0 - params.clamp_eps
    clipped = np.clip(raw, lo, hi)
    mono = np.minimum.accumulate(clipped, axis=-2)
    mono[..., 0, :] = 1.0
    mono[..., -1, :] = 0.0
    interior = raw[..., 1:-1, :]
    events = int(((interior < lo) | (interior > hi)).sum())
    events += int((clipped[..., 1:-1, :] != mono[..., 1:-1, :]).sum())
    return mono, events


def spindle_schedule(h_seq: np.ndarray, params: ScheduleParams) -> SequenceSchedule:
    """Schedule for one sequence: raw spindle values clamped to [0, 1], made
    nonincreasing by a running minimum, with the t=0 and t=T rows forced to
    exactly 1 and 0.
    """
    h = np.asarray(h_seq, dtype=np.float64)
    if h.ndim != 1:
        raise ValueError("h_seq must be 1-D; use spindle_alpha_bar_batch for batches")
    raw = spindle_alpha_raw(h, params)
    alpha_bar, events = _clamp_monotone(raw, params)
    return SequenceSchedule(alpha_bar, h, events)


def spindle_alpha_bar_batch(h_batch: np.ndarray, params: ScheduleParams) -> np.ndarray:
    """Clamped retention grids for a batch of surprisal rows, (B, T+1, n)."""
    raw = spindle_alpha_raw(np.asarray(h_batch, dtype=np.float64), params)
    alpha_bar, _ = _clamp_monotone(raw, params)
    return alpha_bar


def flat_schedule(length: int, params: ScheduleParams) -> SequenceSchedule:
    """Position-independent schedule alpha_bar[t] = 1 - t/T (the lam = 0 case)."""
    return spindle_schedule(np.ones(length), params)


def schedule_from_alpha_bar(alpha_bar: np.ndarray, h_seq: np.ndarray | None = None) -> SequenceSchedule:
    """Wrap an explicit retention grid (rows t=0..T) as a schedule.

    Unlike spindle schedules, explicit grids may end above 0; the prior term
    of the training bound is only finite when alpha_bar[T] == 0.
    """
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    if alpha_bar.ndim != 2:
        raise ValueError("alpha_bar must be (T+1, n)")
    if not np.allclose(alpha_bar[0], 1.0):
        raise ValueError("alpha_bar must start at 1")
    if (np.diff(alpha_bar, axis=0) > 1e-12).any():
        raise ValueError("alpha_bar must be nonincreasing in t")
    if h_seq is None:
        h_seq = np.ones(alpha_bar.shape[1])
    return SequenceSchedule(alpha_bar, np.asarray(h_seq, dtype=np.float64))


def schedule_from_betas(betas: np.ndarray, h_seq: np.ndarray | None = None) -> SequenceSchedule:
    """Schedule from an explicit per-step per-position beta table, shape (T, n)."""
    betas = np.asarray(betas, dtype=np.float64)
    alpha_bar = np.ones((betas.shape[0] + 1, betas.shape[1]))
    alpha_bar[1:] = np.cumprod(1.0 - betas, axis=0)
    return schedule_from_alpha_bar(alpha_bar, h_seq)


def _check_t(t: int, sched: SequenceSchedule) -> None:
    if not 0 <= t <= sched.num_steps:
        raise ValueError(f"t={t} out of range [0, {sched.num_steps}]")


def _check_seq(x: np.ndarray, sched: SequenceSchedule) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    if x.shape != (sched.length,):
        raise ValueError(f"sequence length {x.shape} does not match schedule n={sched.length}")
    return x


def forward_marginal(
    x0: np.ndarray, t: int, sched: SequenceSchedule, num_classes: int
) -> np.ndarray:
    """q(x_t | x_0) as an (n, K) row-stochastic grid: mass alpha_bar[t, i] on
    x0[i] and the rest on [MASK].
    """
    x0 = _check_seq(x0, sched)
    _check_t(t, sched)
    a = sched.alpha_bar[t]
    grid = np.zeros((sched.length, num_classes))
    rows = np.arange(sched.length)
    grid[rows, x0] = a
    grid[rows, MASK_ID] += 1.0 - a
    return grid


def forward_sample(
    x0: np.ndarray, t: int, sched: SequenceSchedule, rng: np.random.Generator | int | None
) -> np.ndarray:
    """One draw from q(x_t | x_0): keep each token with prob alpha_bar[t, i]."""
    x0 = _check_seq(x0, sched)
    _check_t(t, sched)
    rng = as_generator(rng)
    keep = rng.random(sched.length) < sched.alpha_bar[t]
    return np.where(keep, x0, MASK_ID)


def reveal_probs(t: int, s: int, sched: SequenceSchedule) -> np.ndarray:
    """Per-position probability that a token masked at step t is revealed when
    jumping back to step s < t: (alpha_bar[s] - alpha_bar[t]) / (1 - alpha_bar[t]).
    """
    if not 0 <= s < t:
        raise ValueError(f"need 0 <= s < t, got s={s}, t={t}")
    _check_t(t, sched)
    a_t = sched.alpha_bar[t]
    a_s = sched.alpha_bar[s]
    denom = 1.0 - a_t
    out = np.ones(sched.length)
    ok = denom > 0
    out[ok] = (a_s[ok] - a_t[ok]) / denom[ok]
    return np.clip(out, 0.0, 1.0)


def _posterior_grid(
    xt: np.ndarray, x0: np.ndarray, t: int, s: int, sched: SequenceSchedule, num_classes: int
) -> np.ndarray:
    masked = xt == MASK_ID
    if np.any(~masked & (xt != x0)):
        raise ValueError("xt inconsistent with x0 at an unmasked position")
    if np.any(masked & (sched.alpha_bar[t] >= 1.0)):
        raise ValueError("impossible state: masked position with retention probability 1")
    reveal = reveal_probs(t, s, sched)
    grid = np.zeros((sched.length, num_classes))
    rows = np.arange(sched.length)
    grid[rows[~masked], x0[~masked]] = 1.0
    grid[rows[masked], x0[masked]] = reveal[masked]
    grid[rows[masked], MASK_ID] += 1.0 - reveal[masked]
    return grid


def posterior(
    xt: np.ndarray, x0: np.ndarray, t: int, sched: SequenceSchedule, num_classes: int
) -> np.ndarray:
    """q(x_{t-1} | x_t, x_0) per position: point mass on x0 where xt is
    unmasked; otherwise reveal/stay split between x0 and [MASK].
    """
    if t < 1:
        raise ValueError("posterior requires t >= 1")
    xt = _check_seq(xt, sched)
    x0 = _check_seq(x0, sched)
    _check_t(t, sched)
    return _posterior_grid(xt, x0, t, t - 1, sched, num_classes)


def skip_posterior(
    xt: np.ndarray, x0hat: np.ndarray, t: int, s: int, sched: SequenceSchedule, num_classes: int
) -> np.ndarray:
    """q(x_s | x_t, x0hat) for any jump s < t; the two-state chain makes this
    the same reveal/stay form with alpha_bar[s] in place of alpha_bar[t-1].
    """
    if not 0 <= s < t:
        raise ValueError(f"need 0 <= s < t, got s={s}, t={t}")
    xt = _check_seq(xt, sched)
    x0hat = _check_seq(x0hat, sched)
    _check_t(t, sched)
    return _posterior_grid(xt, x0hat, t, s, sched, num_classes)
