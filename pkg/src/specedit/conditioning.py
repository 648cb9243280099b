"""Conditioning streams: frozen audio patch encoder and token text encoder.

The audio side stands in for a pretrained masked-autoencoder feature
extractor: a seeded orthogonal projection of 8x8 spectrogram patches plus a
fixed sinusoidal position table. It is frozen from the moment it is
initialized and must stay bit-identical across all training stages.

The text side is a learned embedding table over the small caption
vocabulary; it trains during base pretraining and is frozen afterwards.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError
from .synthdata import N_BINS, N_FRAMES, VOCAB, ConditionTokens, null_tokens

PATCH = 8
N_PATCHES = (N_BINS // PATCH) * (N_FRAMES // PATCH)
D_AUDIO = 32
D_TEXT = 32
L_TEXT = 4
POOL_RATES = (1, 2, 4, 8)
POS_SCALE = 0.25


@dataclass(frozen=True)
class AudioFeatures:
    """A (length, D_AUDIO) feature sequence and its pooling rate (1 = raw)."""

    seq: np.ndarray
    pooling_rate: int = 1

    def __post_init__(self):
        if self.seq.ndim != 2 or self.seq.shape[1] != D_AUDIO:
            raise DimensionError(f"audio features must be (L, {D_AUDIO}), got {self.seq.shape}")
        expect = -(-N_PATCHES // self.pooling_rate)
        if self.seq.shape[0] != expect:
            raise DimensionError(
                f"length {self.seq.shape[0]} inconsistent with pooling rate "
                f"{self.pooling_rate} (want {expect})")


def sinusoid_table(length, dim, scale=POS_SCALE):
    """Fixed sin/cos position table, float64, scaled to keep rows O(scale)."""
    pos = np.arange(length)[:, None]
    j = np.arange(0, dim, 2)[None, :]
    angle = pos / np.power(10000.0, j / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table * scale


def init_audio_encoder(seed):
    """Frozen patch projection (QR-orthogonal columns) + position table."""
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(PATCH * PATCH, PATCH * PATCH))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity
    return {
        "proj": q[:, :D_AUDIO].copy(),
        "pos": sinusoid_table(N_PATCHES, D_AUDIO),
    }


def encode_audio(grid, enc):
    """Unpooled audio features of a 64x64 grid.

    Non-overlapping 8x8 patches are taken row-major, flattened row-major,
    projected to D_AUDIO, and tagged with the patch-index position vector.
    """
    grid = np.asarray(grid)
    if grid.shape != (N_BINS, N_FRAMES):
        raise DimensionError(f"expected {(N_BINS, N_FRAMES)} grid, got {grid.shape}")
    nb = N_BINS // PATCH
    nf = N_FRAMES // PATCH
    patches = grid.reshape(nb, PATCH, nf, PATCH).transpose(0, 2, 1, 3).reshape(
        N_PATCHES, PATCH * PATCH)
    seq = patches.astype(np.float64) @ enc["proj"] + enc["pos"]
    return AudioFeatures(seq.astype(grid.dtype if grid.dtype == np.float64 else np.float32), 1)


def pool_features(feats, rate):
    """Combined max+mean pooling over consecutive windows of the sequence.

    Each window of `rate` rows (the last may be short) is reduced to
    0.5 * (elementwise max + elementwise mean), so the output stays inside
    the window's componentwise range and the feature width is unchanged.
    """
    if rate not in POOL_RATES:
        raise ContractError(f"pooling rate {rate} not in {POOL_RATES}")
    if feats.pooling_rate != 1:
        raise ContractError("pool_features expects unpooled input")
    if rate == 1:
        return feats
    seq = feats.seq
    out = []
    for start in range(0, seq.shape[0], rate):
        win = seq[start:start + rate]
        out.append(0.5 * (win.max(axis=0) + win.mean(axis=0)))
    return AudioFeatures(np.stack(out).astype(seq.dtype), rate)


def zero_audio_features(rate=1, dtype=np.float32):
    """The dropped-audio condition: an all-zero matrix at the given rate."""
    length = -(-N_PATCHES // rate)
    return AudioFeatures(np.zeros((length, D_AUDIO), dtype=dtype), rate)


def init_text_embed(seed, dtype=np.float32):
    """Trainable token embedding table (V, D_TEXT); trained in stage 1 only."""
    rng = np.random.default_rng(seed)
    table = rng.normal(scale=0.3, size=(len(VOCAB), D_TEXT))
    return nx.tensor(table.astype(dtype), requires_grad=True)


def text_pos_table(dtype=np.float32):
    return sinusoid_table(L_TEXT, D_TEXT).astype(dtype)


def encode_text(tokens, table, pos):
    """Text features (L_TEXT, D_TEXT) for one caption.

    Slot embeddings get the fixed slot position vector added, except for
    the null condition whose rows are exactly the null embedding.
    """
    return nx.reshape(encode_text_batch([tokens], table, pos), (L_TEXT, D_TEXT))


def encode_text_batch(tokens_list, table, pos):
    """Stacked text features (B, L_TEXT, D_TEXT); differentiable w.r.t. table."""
    ids = np.array([t.token_ids() for t in tokens_list], dtype=np.int64)
    emb = nx.embedding(table, ids)
    posb = np.broadcast_to(pos, (len(tokens_list), L_TEXT, pos.shape[1])).copy()
    for i, t in enumerate(tokens_list):
        if t.null_flag:
            posb[i] = 0.0  # null rows equal the null embedding exactly
    return nx.add(emb, nx.Tensor(posb.astype(table.data.dtype)))


def drop_conditions(feats, tokens, rng, p=0.05):
    """Training-time condition dropout for classifier-free guidance.

    Independently with probability p the audio features are replaced by a
    zero matrix, and the tokens by the null caption. Draw order is fixed:
    audio first, then text.
    """
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"dropout probability {p} outside [0, 1]")
    if rng.random() < p:
        feats = zero_audio_features(feats.pooling_rate, feats.seq.dtype)
    if rng.random() < p:
        tokens = null_tokens()
    return feats, tokens


def clip_feature_vector(grid, enc):
    """Mean-pooled frozen encoder features; the Frechet-metric feature."""
    return encode_audio(np.asarray(grid, dtype=np.float64), enc).seq.mean(axis=0)
