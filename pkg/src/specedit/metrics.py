"""Objective evaluation: chroma fidelity, Gaussian Frechet distance, and an
analytic attribute oracle scoring how strongly each timbre/texture/accomp
class is present in a grid.

Everything here is a pure float64 function of its inputs. The oracle works
directly off the rendering model: it estimates and removes the texture
baseline, finds the per-segment fundamental in the melodic register, reads
partial amplitudes at the four harmonic offsets, and compares them against
the timbre templates by cosine; texture and accompaniment are detected from
column-energy periodicity and residual energy on the +4-semitone and bass
tracks.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .synthdata import (
    ACCOMP_SCALE,
    ACCOMPS,
    BASS_PITCH,
    FLOOR_LEVEL,
    FRAMES_PER_STEP,
    MELODY_LEN,
    N_BINS,
    N_FRAMES,
    PARTIAL_OFFSETS,
    PITCH_MAX,
    PITCH_MIN,
    PULSE_PERIOD,
    TEXTURES,
    THIRD_OFFSET,
    TIMBRE_TEMPLATES,
    TIMBRES,
)

SILENT_NORM = 1e-9
COV_REGULARIZER = 1e-6
N_CHROMA = 12


def _check_grid(x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (N_BINS, N_FRAMES):
        raise DimensionError(f"expected {(N_BINS, N_FRAMES)} grid, got {x.shape}")
    return x


def chroma_extract(x):
    """12xT pitch-class energies: bins folded mod 12 per frame."""
    x = _check_grid(x)
    out = np.zeros((N_CHROMA, N_FRAMES))
    for c in range(N_CHROMA):
        out[c] = x[c::N_CHROMA].sum(axis=0)
    return out


def chroma_similarity_detailed(a, b):
    """(mean framewise cosine, degenerate flag).

    Frames where either chroma vector has norm below the silence threshold
    are skipped; if every frame is skipped the score is 0 and the flag set.
    """
    ca = chroma_extract(a)
    cb = chroma_extract(b)
    na = np.linalg.norm(ca, axis=0)
    nb = np.linalg.norm(cb, axis=0)
    keep = (na >= SILENT_NORM) & (nb >= SILENT_NORM)
    if not keep.any():
        return 0.0, True
    cos = (ca[:, keep] * cb[:, keep]).sum(axis=0) / (na[keep] * nb[keep])
    return float(np.clip(cos, -1.0, 1.0).mean()), False


def chroma_similarity(a, b):
    if np.asarray(a).shape != np.asarray(b).shape:
        raise DimensionError(
            f"chroma_similarity: {np.asarray(a).shape} vs {np.asarray(b).shape}")
    return chroma_similarity_detailed(a, b)[0]


# ---------------------------------------------------------------------------
# Gaussian Frechet distance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise DimensionError(f"stats shapes {mean.shape} / {cov.shape}")
        cov = 0.5 * (cov + cov.T)
        w, v = np.linalg.eigh(cov)
        if w.min() < -1e-10:
            cov = (v * np.clip(w, 0.0, None)) @ v.T
            cov = 0.5 * (cov + cov.T)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


def feature_stats(features, dim=None):
    """Sample mean and unbiased covariance of row vectors.

    With fewer than dim+1 samples the covariance cannot be full rank and is
    regularized by adding COV_REGULARIZER to the diagonal.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ContractError(f"feature_stats needs a nonempty (n, d) array, got {feats.shape}")
    n, d = feats.shape
    if dim is not None and d != dim:
        raise DimensionError(f"feature dim {d} != declared {dim}")
    mu = feats.mean(axis=0)
    xc = feats - mu
    cov = (xc.T @ xc) / (n - 1) if n > 1 else np.zeros((d, d))
    if n < d + 1:
        cov = cov + COV_REGULARIZER * np.eye(d)
    return GaussianStats(mu, cov)


def _psd_sqrt(mat):
    w, v = np.linalg.eigh(mat)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(s1, s2):
    """||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)."""
    if s1.mean.shape != s2.mean.shape:
        raise ContractError(f"dimension mismatch {s1.mean.shape} vs {s2.mean.shape}")
    root1 = _psd_sqrt(s1.cov)
    inner = root1 @ s2.cov @ root1
    inner = 0.5 * (inner + inner.T)
    cross = _psd_sqrt(inner)
    diff = s1.mean - s2.mean
    d = float(diff @ diff + np.trace(s1.cov) + np.trace(s2.cov) - 2.0 * np.trace(cross))
    return max(d, 0.0)


# ---------------------------------------------------------------------------
# analytic attribute oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleScores:
    timbre: dict
    texture: dict
    accomp: dict
    degenerate: bool = False

    def for_task(self, task):
        table = {"timbre": self.timbre, "texture": self.texture, "accomp": self.accomp}
        if task not in table:
            raise ContractError(f"unknown oracle task {task!r}")
        return table[task]


def _centered_cosine(a, b):
    ac = a - a.mean()
    bc = b - b.mean()
    na, nb = np.linalg.norm(ac), np.linalg.norm(bc)
    if na < SILENT_NORM or nb < SILENT_NORM:
        return 0.0
    return float(np.clip(ac @ bc / (na * nb), -1.0, 1.0))


def attribute_oracle(x):
    """Per-class presence scores for timbre, texture, and accompaniment.

    All scores live in [-1, 1]; on silent input every score is 0 and the
    degenerate flag is set.
    """
    x = _check_grid(x)
    if x.sum() < SILENT_NORM:
        zeros_t = {c: 0.0 for c in TIMBRES}
        zeros_x = {c: 0.0 for c in TEXTURES}
        zeros_a = {c: 0.0 for c in ACCOMPS}
        return OracleScores(zeros_t, zeros_x, zeros_a, True)

    frames = np.arange(N_FRAMES)
    energy = x.sum(axis=0)
    comb0 = (frames % PULSE_PERIOD == 0).astype(np.float64)
    comb4 = (frames % PULSE_PERIOD == PULSE_PERIOD // 2).astype(np.float64)
    r_pulse = max(_centered_cosine(energy, comb0), 0.0)
    r_offbeat = max(_centered_cosine(energy, comb4), 0.0)
    floor_level = float(np.clip(np.quantile(x, 0.10) / FLOOR_LEVEL, 0.0, 1.0))
    texture = {
        "pulse": r_pulse,
        "offbeat": r_offbeat,
        "floor": floor_level,
        "none": float(np.clip(1.0 - max(r_pulse, r_offbeat, floor_level), -1.0, 1.0)),
    }

    # remove the per-column texture baseline before harmonic analysis
    baseline = np.median(x, axis=0)
    xs = np.clip(x - baseline[None, :], 0.0, None)

    n_seg = N_FRAMES // FRAMES_PER_STEP
    seg = xs.reshape(N_BINS, n_seg, FRAMES_PER_STEP).mean(axis=2)
    register = slice(PITCH_MIN, PITCH_MAX)
    partial_sum = np.zeros(len(PARTIAL_OFFSETS))
    third_ratios = []
    bass_ratios = []
    fundamentals = []
    for s in range(n_seg):
        v = seg[:, s]
        p = PITCH_MIN + int(np.argmax(v[register]))
        fund = v[p]
        if fund < SILENT_NORM:
            continue
        fundamentals.append(p)
        for k, off in enumerate(PARTIAL_OFFSETS):
            if p + off < N_BINS:
                partial_sum[k] += v[p + off] / fund
        if p + THIRD_OFFSET < N_BINS:
            third_ratios.append(v[p + THIRD_OFFSET] / fund)
        if p != BASS_PITCH:
            bass_ratios.append(v[BASS_PITCH] / fund)

    if not fundamentals:
        zeros_t = {c: 0.0 for c in TIMBRES}
        zeros_a = {c: 0.0 for c in ACCOMPS}
        return OracleScores(zeros_t, texture, zeros_a, True)

    measured = partial_sum / len(fundamentals)
    mnorm = np.linalg.norm(measured)
    timbre = {}
    for name in TIMBRES:
        template = np.asarray(TIMBRE_TEMPLATES[name])
        timbre[name] = float(np.clip(
            measured @ template / (mnorm * np.linalg.norm(template)), -1.0, 1.0))

    r_third = float(np.mean(third_ratios)) if third_ratios else 0.0
    r_bass = float(np.mean(bass_ratios)) if bass_ratios else 0.0
    s_third = float(np.clip(r_third / ACCOMP_SCALE, 0.0, 1.0))
    s_bass = float(np.clip(r_bass / ACCOMP_SCALE, 0.0, 1.0))
    accomp = {
        "third": s_third,
        "bass": s_bass,
        "none": float(np.clip(1.0 - max(s_third, s_bass), -1.0, 1.0)),
    }
    return OracleScores(timbre, texture, accomp, False)


def transfer_score(x, task, target_class):
    """(oracle score + 1) / 2 for the requested class, in [0, 1]."""
    scores = attribute_oracle(x).for_task(task)
    if target_class not in scores:
        raise ContractError(f"unknown class {target_class!r} for task {task}")
    return (scores[target_class] + 1.0) / 2.0


def clip_stats(grids, enc):
    """GaussianStats of mean-pooled frozen-encoder features over clips."""
    from .conditioning import clip_feature_vector
    feats = np.stack([clip_feature_vector(g, enc) for g in grids])
    return feature_stats(feats)
