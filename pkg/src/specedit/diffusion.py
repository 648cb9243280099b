"""Noise schedule, forward noising, training loss, guidance, and samplers.

The schedule stores the per-step retention level (the cumulative product of
one minus the per-step variances). Note the naming tension: this quantity
multiplies the *signal* in the forward process x_t = sqrt(r_t) x +
sqrt(1 - r_t) eps, so larger retention means less noise; we keep that
formula exactly and call the array `retention` to avoid ambiguity.

Guidance is computed in noise-prediction space. Scores and predicted noise
differ only by a negative per-step scaling, so the affine combination used
for classifier-free guidance is identical in either space.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .backbone import Conditioning, predict_noise_batch
from .conditioning import encode_text_batch, text_pos_table
from .errors import ContractError, DimensionError
from .synthdata import N_BINS, N_FRAMES, ConditionTokens, null_tokens

T_TRAIN_DEFAULT = 200
# Per-step variances are the standard [1e-4, 0.02] line rescaled by
# 1000/T so the terminal retention is comparable to a 1000-step schedule.
VAR_LO, VAR_HI, VAR_REF_STEPS = 1e-4, 0.02, 1000


@dataclass(frozen=True)
class NoiseSchedule:
    t_train: int
    variances: np.ndarray
    retention: np.ndarray  # strictly decreasing, in (0, 1)

    def __post_init__(self):
        r = self.retention
        if not (np.all(np.diff(r) < 0) and 0 < r[-1] and r[0] < 1):
            raise ContractError("retention must be strictly decreasing within (0, 1)")


def make_schedule(t_train=T_TRAIN_DEFAULT, kind="linear"):
    """Linear variance schedule scaled to t_train steps."""
    if t_train < 2:
        raise ContractError(f"t_train must be >= 2, got {t_train}")
    if kind != "linear":
        raise ContractError(f"unknown schedule kind {kind!r}")
    variances = np.linspace(VAR_LO, VAR_HI, t_train) * (VAR_REF_STEPS / t_train)
    if variances[-1] >= 1.0:
        raise ContractError(f"t_train={t_train} drives per-step variance above 1")
    retention = np.cumprod(1.0 - variances)
    return NoiseSchedule(t_train, variances, retention)


def forward_noise(x, t, eps, schedule):
    """x_t = sqrt(r_t) * x + sqrt(1 - r_t) * eps for retention r_t."""
    x = np.asarray(x)
    eps = np.asarray(eps)
    if x.shape != eps.shape:
        raise DimensionError(f"forward_noise: x {x.shape} vs eps {eps.shape}")
    if not 0 <= t < schedule.t_train:
        raise ContractError(f"timestep {t} outside [0, {schedule.t_train})")
    r = schedule.retention[t]
    return np.sqrt(r) * x + np.sqrt(1.0 - r) * eps


@dataclass(frozen=True)
class GuidanceConfig:
    """CFG scale plus the choice of negative branch.

    standard mode guides against the null caption; negative_prompt mode
    guides against the given negative tokens. Either way the negative
    branch carries no audio features.
    """

    scale: float = 7.5
    mode: str = "standard"
    negative_tokens: Optional[ConditionTokens] = None

    def __post_init__(self):
        if self.scale < 0:
            raise ContractError(f"guidance scale must be >= 0, got {self.scale}")
        if self.mode not in ("standard", "negative_prompt"):
            raise ContractError(f"unknown guidance mode {self.mode!r}")
        if self.mode == "negative_prompt" and self.negative_tokens is None:
            raise ContractError("negative_prompt mode requires negative tokens")

    def resolve_negative(self):
        return self.negative_tokens if self.mode == "negative_prompt" else null_tokens()


def _predict(x_t, t_arr, cond, base, adapter, config):
    out = predict_noise_batch(x_t, t_arr, cond, base, adapter, config)
    return out.data


def encode_negative_branch(negatives, base):
    """Text features for a list of negative captions (no audio features)."""
    table = base["text.embed"]
    return encode_text_batch(negatives, table, text_pos_table(table.data.dtype))


def guided_noise_prediction(x_t, t, cond_pos, guidance, base, adapter=None,
                            config=None, neg_c_y=None):
    """eps_neg + scale * (eps_pos - eps_neg) over a batch.

    cond_pos carries the positive branch (text + audio + alpha). The
    negative branch carries no audio features; its caption comes from the
    guidance config (null caption in standard mode, the negative prompt in
    negative_prompt mode), or per example from neg_c_y when given.
    """
    x_t = np.asarray(x_t)
    bsz = x_t.shape[0]
    t_arr = np.full(bsz, t, dtype=np.int64) if np.ndim(t) == 0 else np.asarray(t)
    eps_pos = _predict(x_t, t_arr, cond_pos, base, adapter, config)
    if neg_c_y is None:
        neg_c_y = encode_negative_branch([guidance.resolve_negative()] * bsz, base)
    eps_neg = _predict(x_t, t_arr, Conditioning(c_y=neg_c_y), base, adapter, config)
    return eps_neg + guidance.scale * (eps_pos - eps_neg)


def subschedule(schedule, steps):
    """Evenly strided descending timesteps; steps == t_train gives stride 1."""
    if not 1 <= steps <= schedule.t_train:
        raise ContractError(f"steps {steps} outside [1, {schedule.t_train}]")
    stride = schedule.t_train // steps
    return [schedule.t_train - 1 - i * stride for i in range(steps)]


def sample_batch(base, adapter, cond_pos, guidance, schedule, n=None, steps=50,
                 rng=None, mode="deterministic", init=None, config=None,
                 neg_c_y=None, start_noise=None):
    """Iterative denoising; returns (B, 64, 64) arrays clamped to [0, 1].

    Starts from standard normal noise (drawn from rng, or passed directly
    as start_noise for callers managing per-example seeds), or from the
    partially noised `init=(x_start, strength)` pair at the sub-schedule
    step nearest strength * t_train. deterministic mode is the
    variance-free update; ancestral adds schedule-scaled fresh noise.
    """
    if mode not in ("deterministic", "ancestral"):
        raise ContractError(f"unknown sampler mode {mode!r}")
    if rng is None and start_noise is None:
        raise ContractError("sample requires a seeded rng or explicit start noise")
    bsz = n if n is not None else cond_pos.c_y.data.shape[0]
    dtype = base["in.conv.w"].data.dtype
    ts = subschedule(schedule, steps)
    ret = schedule.retention

    if init is not None:
        x_start, strength = init
        if not 0.0 < strength <= 1.0:
            raise ContractError(f"init strength {strength} outside (0, 1]")
        target = strength * schedule.t_train
        t0 = min(ts, key=lambda t: abs(t - target))
        ts = [t for t in ts if t <= t0]
        x_start = np.asarray(x_start, dtype=dtype)
        if x_start.ndim == 2:
            x_start = np.broadcast_to(x_start, (bsz,) + x_start.shape)
        eps0 = start_noise if start_noise is not None else \
            rng.standard_normal(x_start.shape)
        x = forward_noise(x_start, t0, eps0.astype(dtype), schedule).astype(dtype)
    elif start_noise is not None:
        x = np.asarray(start_noise, dtype=dtype).copy()
    else:
        x = rng.standard_normal((bsz, N_BINS, N_FRAMES)).astype(dtype)

    for i, t in enumerate(ts):
        eps = guided_noise_prediction(x, t, cond_pos, guidance, base, adapter,
                                      config, neg_c_y)
        r_t = ret[t]
        r_next = ret[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x0_hat = (x - np.sqrt(1.0 - r_t) * eps) / np.sqrt(r_t)
        if mode == "deterministic":
            x = np.sqrt(r_next) * x0_hat + np.sqrt(1.0 - r_next) * eps
        else:
            sigma = 0.0
            if r_next < 1.0:
                sigma = np.sqrt((1.0 - r_next) / (1.0 - r_t)) * np.sqrt(
                    max(1.0 - r_t / r_next, 0.0))
            coef = np.sqrt(max(1.0 - r_next - sigma ** 2, 0.0))
            x = np.sqrt(r_next) * x0_hat + coef * eps
            if sigma > 0.0:
                x = x + sigma * rng.standard_normal(x.shape).astype(dtype)
        x = x.astype(dtype)

    return np.clip(x, 0.0, 1.0)


def sample(base, adapter, cond_pos, guidance, schedule, steps=50, rng=None,
           mode="deterministic", init=None, config=None):
    """Single-sample wrapper returning one (64, 64) grid."""
    out = sample_batch(base, adapter, cond_pos, guidance, schedule, n=1,
                       steps=steps, rng=rng, mode=mode, init=init, config=config)
    return out[0]


def training_loss(batch, rng, base, adapter, alpha, schedule, config=None):
    """Mean squared error between true and predicted noise over a batch.

    batch items are (grid, AudioFeatures-or-None, ConditionTokens); audio
    pooling and condition dropout are the caller's job. Timesteps are
    uniform over the schedule, noise is standard normal, and examples are
    grouped by audio-sequence length so each group runs as one stacked
    forward pass. Returns a scalar Tensor (differentiable).
    """
    if not batch:
        raise ContractError("training_loss: empty batch")
    bsz = len(batch)
    dtype = base["in.conv.w"].data.dtype
    t_all = rng.integers(0, schedule.t_train, size=bsz)
    eps_all = rng.standard_normal((bsz, N_BINS, N_FRAMES)).astype(dtype)

    groups = {}
    for i, (grid, feats, tokens) in enumerate(batch):
        key = -1 if feats is None else feats.seq.shape[0]
        groups.setdefault(key, []).append(i)

    table = base["text.embed"]
    tpos = text_pos_table(dtype)
    total = None
    for key in sorted(groups):
        idx = groups[key]
        grids = np.stack([np.asarray(batch[i][0], dtype=dtype) for i in idx])
        eps = eps_all[idx]
        t_grp = t_all[idx]
        x_t = (np.sqrt(schedule.retention[t_grp])[:, None, None] * grids +
               np.sqrt(1.0 - schedule.retention[t_grp])[:, None, None] * eps).astype(dtype)
        c_y = encode_text_batch([batch[i][2] for i in idx], table, tpos)
        c_x = None
        if key >= 0:
            c_x = nx.tensor(np.stack([batch[i][1].seq for i in idx]), dtype=dtype)
        cond = Conditioning(c_y=c_y, c_x=c_x, alpha=alpha if key >= 0 else 0.0)
        pred = predict_noise_batch(x_t, t_grp, cond, base, adapter, config)
        diff = nx.sub(pred, nx.tensor(eps))
        part = nx.scale(nx.mean_(nx.mul(diff, diff)), len(idx) / bsz)
        total = part if total is None else nx.add(total, part)
    return total
