"""Zero-shot editing front-end: the three edit tasks plus the SDEdit baseline.

An edit samples from pure noise under the fused text+audio condition with
negative-prompt guidance; fidelity to the input comes entirely from the
pooled audio features, not from the initialization. The SDEdit baseline
instead partially noises the input (0.75 of the schedule) and denoises
under the positive text alone, with the null caption as guidance anchor.

Requests carry their own seeds. Batched execution groups requests with
identical hyperparameters into one stacked sampler run; per-request start
noise comes from per-request generators, so results do not depend on how
requests were grouped.
"""

import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .backbone import Conditioning
from .conditioning import POOL_RATES, encode_audio, encode_text_batch, pool_features, text_pos_table
from .diffusion import GuidanceConfig, encode_negative_branch, make_schedule, sample_batch, subschedule
from .errors import ContractError
from .metrics import attribute_oracle
from .synthdata import (
    ACCOMPS,
    N_BINS,
    N_FRAMES,
    TEXTURES,
    TIMBRES,
    ClipSpec,
    ConditionTokens,
    caption_tokens,
    edit_tokens,
    low_quality_tokens,
    render_spectrogram,
    write_grid,
)
from .training import instantiate_adapter, instantiate_base

SDEDIT_STRENGTH = 0.75
TASK_CLASSES = {"timbre": TIMBRES, "texture": TEXTURES, "accomp": ACCOMPS}

# Inference defaults per task: pooling rate, audio scale, guidance scale.
TASK_DEFAULTS = {
    "timbre": {"pool_rate": 2, "alpha": 0.5, "guidance_scale": 7.5},
    "accomp": {"pool_rate": 2, "alpha": 0.5, "guidance_scale": 7.5},
    "texture": {"pool_rate": 1, "alpha": 0.4, "guidance_scale": 7.5},
}


@dataclass(frozen=True)
class EditRequest:
    """Everything needed to reproduce one edit bit-for-bit."""

    task: str
    target_class: str
    clip: Optional[ClipSpec] = None
    grid: Optional[np.ndarray] = None
    negative: Optional[ConditionTokens] = None  # overrides the task default
    pool_rate: int = 2
    alpha: float = 0.5
    guidance_scale: float = 7.5
    steps: int = 50
    seed: int = 0
    sampler: str = "deterministic"

    def __post_init__(self):
        if self.task not in TASK_CLASSES:
            raise ContractError(f"unknown edit task {self.task!r}")
        if self.target_class not in TASK_CLASSES[self.task]:
            raise ContractError(
                f"target {self.target_class!r} invalid for task {self.task}")
        if self.clip is None and self.grid is None:
            raise ContractError("request needs a clip spec or a grid")
        if self.pool_rate not in POOL_RATES:
            raise ContractError(f"pooling rate {self.pool_rate} not in {POOL_RATES}")
        if self.alpha < 0 or self.guidance_scale < 0:
            raise ContractError("alpha and guidance scale must be >= 0")
        if self.task == "timbre" and self.clip is not None and \
                self.clip.timbre_class == self.target_class:
            raise ContractError("timbre edit must request a class change")

    def input_grid(self):
        if self.grid is not None:
            return np.asarray(self.grid, dtype=np.float32)
        return render_spectrogram(self.clip)

    def source_timbre(self):
        if self.clip is not None:
            return self.clip.timbre_class
        scores = attribute_oracle(self.input_grid()).timbre
        return max(scores, key=scores.get)


def request_with_defaults(task, target_class, **kw):
    merged = dict(TASK_DEFAULTS[task])
    merged.update(kw)
    return EditRequest(task=task, target_class=target_class, **merged)


def positive_tokens(request):
    src = request.source_timbre() if request.task == "accomp" else None
    return edit_tokens(request.task, request.target_class, source_timbre=src)


def negative_tokens(request):
    """Task defaults: the source timbre caption for timbre transfer (the
    'original instrument' prompt), the reserved low-quality token otherwise."""
    if request.negative is not None:
        return request.negative
    if request.task == "timbre":
        if request.clip is not None:
            return caption_tokens(request.clip, "timbre")
        return ConditionTokens("timbre", f"timbre:{request.source_timbre()}")
    return low_quality_tokens()


@dataclass
class EditResult:
    edited: np.ndarray
    request: EditRequest
    timesteps: list
    wall_time: float
    baseline: Optional[str] = None  # None for adapter edits, 'sdedit' for SDEdit


def _checkpoints(base_ckpt, adapter_ckpt):
    base, enc, unet = instantiate_base(base_ckpt)
    adapter = None
    if adapter_ckpt is not None:
        adapter = instantiate_adapter(adapter_ckpt)
        for site in ("mid", "dec2", "dec1"):
            for kind in ("wk", "wv"):
                name = f"adapter.{site}.{kind}"
                if name not in adapter:
                    raise ContractError(f"adapter checkpoint missing {name}")
                if adapter[name].data.shape != base[f"attn.{site}.{kind}"].data.shape:
                    raise ContractError(
                        f"adapter tensor {name} shape {adapter[name].data.shape} "
                        f"incompatible with base")
    return base, enc, unet, adapter


def _group_key(req):
    return (req.pool_rate, req.alpha, req.guidance_scale, req.steps, req.sampler)


def edit_batch(requests, base_ckpt, adapter_ckpt, guidance_mode="negative_prompt"):
    """Run adapter edits, grouping compatible requests into stacked passes."""
    base, enc, unet, adapter = _checkpoints(base_ckpt, adapter_ckpt)
    if adapter is None:
        raise ContractError("adapter edits need an adapter checkpoint")
    schedule = make_schedule(unet.t_max)
    table = base["text.embed"]
    tpos = text_pos_table(table.data.dtype)
    results = [None] * len(requests)

    groups = {}
    for i, req in enumerate(requests):
        if req.sampler != "deterministic":
            raise ContractError("batched edits support the deterministic sampler only")
        groups.setdefault(_group_key(req), []).append(i)

    for key in sorted(groups):
        idx = groups[key]
        reqs = [requests[i] for i in idx]
        rate, alpha, lam, steps, _ = key
        t0 = time.perf_counter()
        feats = [pool_features(encode_audio(r.input_grid(), enc), rate) for r in reqs]
        c_x = nx.tensor(np.stack([f.seq for f in feats]), dtype=table.data.dtype)
        c_y = encode_text_batch([positive_tokens(r) for r in reqs], table, tpos)
        if guidance_mode == "negative_prompt":
            negs = [negative_tokens(r) for r in reqs]
        else:
            negs = [GuidanceConfig(lam, "standard").resolve_negative() for r in reqs]
        neg_cy = encode_negative_branch(negs, base)
        noise = np.stack([
            np.random.default_rng(r.seed).standard_normal((N_BINS, N_FRAMES))
            for r in reqs])
        cond = Conditioning(c_y=c_y, c_x=c_x, alpha=alpha)
        out = sample_batch(base, adapter, cond, GuidanceConfig(lam, "standard"),
                           schedule, steps=steps, config=unet,
                           neg_c_y=neg_cy, start_noise=noise)
        wall = (time.perf_counter() - t0) / len(reqs)
        ts = subschedule(schedule, steps)
        for j, i in enumerate(idx):
            results[i] = EditResult(out[j].astype(np.float32), reqs[j], ts, wall)
    return results


def edit(request, base_ckpt, adapter_ckpt, guidance_mode="negative_prompt"):
    """One adapter edit; see edit_batch for the mechanics."""
    return edit_batch([request], base_ckpt, adapter_ckpt, guidance_mode)[0]


def sdedit_batch(requests, base_ckpt):
    """SDEdit baseline: partial forward noising, text-only guided denoise."""
    base, enc, unet, _ = _checkpoints(base_ckpt, None)
    schedule = make_schedule(unet.t_max)
    table = base["text.embed"]
    tpos = text_pos_table(table.data.dtype)
    results = [None] * len(requests)
    groups = {}
    for i, req in enumerate(requests):
        if req.sampler != "deterministic":
            raise ContractError("batched edits support the deterministic sampler only")
        groups.setdefault((req.guidance_scale, req.steps), []).append(i)

    for key in sorted(groups):
        idx = groups[key]
        reqs = [requests[i] for i in idx]
        lam, steps = key
        t0 = time.perf_counter()
        grids = np.stack([r.input_grid() for r in reqs])
        c_y = encode_text_batch([positive_tokens(r) for r in reqs], table, tpos)
        noise = np.stack([
            np.random.default_rng(r.seed).standard_normal((N_BINS, N_FRAMES))
            for r in reqs])
        guidance = GuidanceConfig(lam, "standard")
        out = sample_batch(base, None, Conditioning(c_y=c_y), guidance, schedule,
                           steps=steps, config=unet,
                           init=(grids, SDEDIT_STRENGTH), start_noise=noise)
        wall = (time.perf_counter() - t0) / len(reqs)
        full = subschedule(schedule, steps)
        t_start = min(full, key=lambda t: abs(t - SDEDIT_STRENGTH * schedule.t_train))
        ts = [t for t in full if t <= t_start]
        for j, i in enumerate(idx):
            results[i] = EditResult(out[j].astype(np.float32), reqs[j], ts, wall,
                                    baseline="sdedit")
    return results


def sdedit_baseline(request, base_ckpt):
    return sdedit_batch([request], base_ckpt)[0]


def write_edit_result(path_base, result):
    """Grid file plus deterministic JSON sidecar (volatile fields excluded)."""
    write_grid(f"{path_base}.sgrid", result.edited)
    req = result.request
    sidecar = {
        "format": "specedit-edit-meta",
        "version": 1,
        "task": req.task,
        "target_class": req.target_class,
        "clip": None if req.clip is None else {
            "melody": list(req.clip.melody), "timbre": req.clip.timbre_class,
            "texture": req.clip.texture_class, "accomp": req.clip.accomp_class,
            "seed": req.clip.seed},
        "pool_rate": req.pool_rate,
        "alpha": req.alpha,
        "guidance_scale": req.guidance_scale,
        "steps": req.steps,
        "seed": req.seed,
        "sampler": req.sampler,
        "baseline": result.baseline,
        "timesteps": list(result.timesteps),
    }
    with open(f"{path_base}.json", "w") as f:
        json.dump(sidecar, f, sort_keys=True, indent=1)
        f.write("\n")
