"""Noise-prediction network: a two-level encoder/decoder over the 64x64 grid.

Layout is channels-last (B, H, W, C) so attention sites flatten to token
sequences for free. Each residual block is norm -> gated nonlinearity ->
3x3 conv with the timestep embedding injected as a per-example channel
bias. Three cross-attention sites (bottleneck and both decoder levels)
carry the frozen text branch and, when adapters are present, the decoupled
audio branch fused as z_text + alpha * z_audio with a shared query.

Absolute position is supplied only by fixed coordinate channels at the
input (global ramps plus patch-phase harmonics); without them the audio
branch could not route patch tokens to grid locations when denoising from
pure noise.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .conditioning import D_AUDIO, D_TEXT, L_TEXT, PATCH, init_text_embed
from .errors import ContractError, DimensionError
from .synthdata import N_BINS, N_FRAMES, VOCAB

ATTN_SITES = ("mid", "dec2", "dec1")


@dataclass(frozen=True)
class UNetConfig:
    level_channels: tuple = (16, 32)
    bottleneck_channels: int = 32
    attn_width: int = 32
    heads: int = 2
    temb_dim: int = 32
    t_max: int = 200
    coord_channels: int = 6

    def __post_init__(self):
        if self.attn_width % self.heads:
            raise ContractError(
                f"attention width {self.attn_width} not divisible by {self.heads} heads")
        if self.attn_width != D_TEXT or self.attn_width != D_AUDIO:
            raise ContractError("attention width must match the conditioning width")


def coordinate_channels(config):
    """Fixed per-pixel position features: global ramps + patch-phase sin/cos."""
    r = np.arange(N_BINS, dtype=np.float64)[:, None] * np.ones((1, N_FRAMES))
    c = np.arange(N_FRAMES, dtype=np.float64)[None, :] * np.ones((N_BINS, 1))
    chans = [
        r / (N_BINS - 1), c / (N_FRAMES - 1),
        np.sin(2 * np.pi * r / PATCH), np.cos(2 * np.pi * r / PATCH),
        np.sin(2 * np.pi * c / PATCH), np.cos(2 * np.pi * c / PATCH),
    ]
    return np.stack(chans, axis=-1)


def timestep_embedding(t, dim, dtype=np.float32):
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    j = np.arange(0, dim, 2)
    angle = t[:, None] / np.power(10000.0, j / dim)[None, :]
    out = np.zeros((t.shape[0], dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out.astype(dtype)


def _resblock_names(config):
    c1, c2 = config.level_channels
    cb = config.bottleneck_channels
    return [
        ("enc1a", c1, c1), ("enc1b", c1, c1),
        ("enc2a", c1, c2), ("enc2b", c2, c2),
        ("mid_a", cb, cb), ("mid_b", cb, cb),
        ("dec2", c2, c2), ("dec1", c1, c1),
    ]


def _site_channels(config):
    c1, c2 = config.level_channels
    return {"mid": config.bottleneck_channels, "dec2": c2, "dec1": c1}


def init_params(config, rng, dtype=np.float32):
    """Seeded base parameters (the text encoder table included).

    Weights use fan-in scaled Gaussians; residual output projections and
    the final conv start at zero so the untrained model predicts zero
    noise. Insertion order of the dict is fixed and doubles as the
    serialization order.
    """
    params = {}

    def norm01(*shape):
        return rng.normal(size=shape)

    def put(name, arr):
        params[name] = nx.tensor(arr.astype(dtype), requires_grad=True)

    def put_proj(name, fan_in, fan_out, zero=False):
        if zero:
            put(name, np.zeros((fan_in, fan_out)))
        else:
            put(name, norm01(fan_in, fan_out) / np.sqrt(fan_in))

    td = config.temb_dim
    put_proj("time.w1", td, td)
    put("time.b1", np.zeros(td))
    put_proj("time.w2", td, td)
    put("time.b2", np.zeros(td))

    c1, c2 = config.level_channels
    cin0 = 1 + config.coord_channels
    put("in.conv.w", norm01(3, 3, cin0, c1) / np.sqrt(9 * cin0))
    put("in.conv.b", np.zeros(c1))

    for name, ci, co in _resblock_names(config):
        put(f"rb.{name}.norm.g", np.ones(ci))
        put(f"rb.{name}.norm.b", np.zeros(ci))
        put(f"rb.{name}.conv.w", norm01(3, 3, ci, co) / np.sqrt(9 * ci))
        put(f"rb.{name}.conv.b", np.zeros(co))
        put_proj(f"rb.{name}.temb.w", td, co)
        put(f"rb.{name}.temb.b", np.zeros(co))
        if ci != co:
            put_proj(f"rb.{name}.skip.w", ci, co)

    put_proj("cat2.w", c2 + c2, c2)
    put("cat2.b", np.zeros(c2))
    put_proj("cat1.w", c2 + c1, c1)
    put("cat1.b", np.zeros(c1))

    d = config.attn_width
    for site, ch in _site_channels(config).items():
        put(f"attn.{site}.ln.g", np.ones(ch))
        put(f"attn.{site}.ln.b", np.zeros(ch))
        put_proj(f"attn.{site}.wq", ch, d)
        put_proj(f"attn.{site}.wk", D_TEXT, d)
        put_proj(f"attn.{site}.wv", D_TEXT, d)
        put_proj(f"attn.{site}.wo", d, ch, zero=True)

    put("out.norm.g", np.ones(c1))
    put("out.norm.b", np.zeros(c1))
    put("out.conv.w", np.zeros((3, 3, c1, 1)))
    put("out.conv.b", np.zeros(1))

    params["text.embed"] = init_text_embed(int(rng.integers(0, 2 ** 63)), dtype=dtype)
    return params


def init_adapter_from_text(base):
    """Adapter key/value projections initialized as copies of the text ones.

    Copying works because audio and text features share one width; starting
    from the trained text projections is what makes fine-tuning short.
    """
    adapter = {}
    for site in ATTN_SITES:
        for kind in ("wk", "wv"):
            src = base[f"attn.{site}.{kind}"]
            if src.data.shape != (D_AUDIO, src.data.shape[1]):
                raise ContractError(
                    f"audio width {D_AUDIO} incompatible with text projection "
                    f"{src.data.shape} at site {site}")
            adapter[f"adapter.{site}.{kind}"] = nx.tensor(
                src.data.copy(), requires_grad=True)
    return adapter


def param_count(params):
    return sum(int(np.prod(p.data.shape)) for p in params.values())


def set_requires_grad(params, flag):
    for p in params.values():
        p.requires_grad = flag


@dataclass
class Conditioning:
    """Encoded conditions for one forward pass (batch-stacked)."""

    c_y: nx.Tensor                 # (B, L_TEXT, D_TEXT)
    c_x: "nx.Tensor | None" = None  # (B, L_audio, D_AUDIO) or None for text-only
    alpha: float = 0.0


def fused_cross_attention(z, c_y, c_x, alpha, base, adapter, site="mid"):
    """z_text + alpha * z_audio with one shared query projection.

    z is (n, channels) for a single example; c_y is (L_TEXT, D_TEXT) and
    c_x (L_audio, D_AUDIO). This is the raw fusion of the two attention
    branches; the network wraps it with pre-norm and an output projection.
    """
    zb = z if isinstance(z, nx.Tensor) else nx.tensor(z)
    cy = c_y if isinstance(c_y, nx.Tensor) else nx.tensor(c_y)
    q = nx.project(zb, base[f"attn.{site}.wq"])
    kt = nx.project(cy, base[f"attn.{site}.wk"])
    vt = nx.project(cy, base[f"attn.{site}.wv"])
    z_text = nx.attention(q, kt, vt)
    if c_x is None or adapter is None or alpha == 0.0:
        return z_text
    cx = c_x if isinstance(c_x, nx.Tensor) else nx.tensor(c_x)
    ka = nx.project(cx, adapter[f"adapter.{site}.wk"])
    va = nx.project(cx, adapter[f"adapter.{site}.wv"])
    z_audio = nx.attention(q, ka, va)
    return nx.add(z_text, nx.scale(z_audio, alpha))


def _attn_block(site, h, cond, base, adapter, heads):
    b, hh, ww, ch = h.data.shape
    z = nx.reshape(h, (b, hh * ww, ch))
    zn = nx.layernorm(z, base[f"attn.{site}.ln.g"], base[f"attn.{site}.ln.b"])
    q = nx.project(zn, base[f"attn.{site}.wq"])
    kt = nx.project(cond.c_y, base[f"attn.{site}.wk"])
    vt = nx.project(cond.c_y, base[f"attn.{site}.wv"])
    zf = nx.attention_heads(q, kt, vt, heads)
    if cond.c_x is not None and adapter is not None and cond.alpha != 0.0:
        ka = nx.project(cond.c_x, adapter[f"adapter.{site}.wk"])
        va = nx.project(cond.c_x, adapter[f"adapter.{site}.wv"])
        za = nx.attention_heads(q, ka, va, heads)
        zf = nx.add(zf, nx.scale(za, cond.alpha))
    out = nx.add(z, nx.project(zf, base[f"attn.{site}.wo"]))
    return nx.reshape(out, (b, hh, ww, ch))


def _resblock(name, h, temb_act, base):
    g = base[f"rb.{name}.norm.g"]
    bta = base[f"rb.{name}.norm.b"]
    y = nx.silu(nx.layernorm(h, g, bta))
    y = nx.conv3x3(y, base[f"rb.{name}.conv.w"], base[f"rb.{name}.conv.b"])
    shift = nx.add_bias(nx.matmul(temb_act, base[f"rb.{name}.temb.w"]),
                        base[f"rb.{name}.temb.b"])
    y = nx.add_example_bias(y, shift)
    skip_w = base.get(f"rb.{name}.skip.w")
    skip = h if skip_w is None else nx.project(h, skip_w)
    return nx.add(skip, y)


def predict_noise_batch(x_t, t, cond, base, adapter=None, config=None, coords=None):
    """Predicted noise for a batch: x_t (B, 64, 64) -> (B, 64, 64) Tensor."""
    config = config or UNetConfig()
    xt = x_t if isinstance(x_t, nx.Tensor) else nx.tensor(x_t)
    if xt.data.ndim != 3 or xt.data.shape[1:] != (N_BINS, N_FRAMES):
        raise DimensionError(f"predict_noise: input shape {xt.data.shape}")
    t = np.atleast_1d(np.asarray(t))
    if t.min() < 0 or t.max() >= config.t_max:
        raise ContractError(f"timestep outside [0, {config.t_max})")
    bsz = xt.data.shape[0]
    dtype = base["in.conv.w"].data.dtype

    if coords is None:
        coords = coordinate_channels(config)
    cgrid = nx.Tensor(np.broadcast_to(
        coords.astype(dtype), (bsz,) + coords.shape).copy())
    h = nx.concat_last([nx.reshape(xt, (bsz, N_BINS, N_FRAMES, 1)), cgrid])

    te = nx.Tensor(timestep_embedding(t, config.temb_dim, dtype))
    te = nx.add_bias(nx.matmul(te, base["time.w1"]), base["time.b1"])
    te = nx.add_bias(nx.matmul(nx.silu(te), base["time.w2"]), base["time.b2"])
    temb_act = nx.silu(te)

    h = nx.conv3x3(h, base["in.conv.w"], base["in.conv.b"])
    h1 = _resblock("enc1b", _resblock("enc1a", h, temb_act, base), temb_act, base)
    h2 = nx.avgpool2x2(h1)
    h2 = _resblock("enc2b", _resblock("enc2a", h2, temb_act, base), temb_act, base)
    hm = nx.avgpool2x2(h2)
    hm = _resblock("mid_a", hm, temb_act, base)
    hm = _attn_block("mid", hm, cond, base, adapter, config.heads)
    hm = _resblock("mid_b", hm, temb_act, base)

    u2 = nx.concat_last([nx.upsample2x(hm), h2])
    u2 = nx.add_bias(nx.project(u2, base["cat2.w"]), base["cat2.b"])
    u2 = _resblock("dec2", u2, temb_act, base)
    u2 = _attn_block("dec2", u2, cond, base, adapter, config.heads)

    u1 = nx.concat_last([nx.upsample2x(u2), h1])
    u1 = nx.add_bias(nx.project(u1, base["cat1.w"]), base["cat1.b"])
    u1 = _resblock("dec1", u1, temb_act, base)
    u1 = _attn_block("dec1", u1, cond, base, adapter, config.heads)

    y = nx.silu(nx.layernorm(u1, base["out.norm.g"], base["out.norm.b"]))
    y = nx.conv3x3(y, base["out.conv.w"], base["out.conv.b"])
    return nx.reshape(y, (bsz, N_BINS, N_FRAMES))


def predict_noise(x_t, t, c_y, c_x, alpha, base, adapter=None, config=None):
    """Single-example wrapper; c_y is (L_TEXT, D_TEXT), c_x (L, D_AUDIO) or None."""
    cy = c_y if isinstance(c_y, nx.Tensor) else nx.tensor(c_y)
    cy = nx.reshape(cy, (1, L_TEXT, D_TEXT))
    cx = None
    if c_x is not None:
        arr = c_x if isinstance(c_x, nx.Tensor) else nx.tensor(np.asarray(c_x))
        cx = nx.reshape(arr, (1,) + arr.data.shape[-2:])
    cond = Conditioning(c_y=cy, c_x=cx, alpha=alpha)
    x = np.asarray(x_t, dtype=base["in.conv.w"].data.dtype)[None]
    return nx.reshape(predict_noise_batch(x, [t], cond, base, adapter, config),
                      (N_BINS, N_FRAMES))
