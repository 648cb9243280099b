"""Two-stage training: text-conditioned base pretraining, then adapters.

Stage 1 trains every base parameter (text embeddings included) on
self-descriptive captions with text dropout; there is no audio branch.
Stage 2 freezes the base bit-for-bit, initializes the adapters from the
text key/value projections, and trains only those, drawing the audio
pooling rate per example from {1,2,4,8} and applying independent audio and
text dropout.

Checkpoints are a single file: JSON manifest (config echo, stage, step,
loss log, tensor index, content hash) followed by raw little-endian
blobs. Loading verifies magic, version, and hash, so a flipped byte
surfaces as ChecksumError rather than silent corruption.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .backbone import UNetConfig, init_adapter_from_text, init_params, set_requires_grad
from .conditioning import drop_conditions, encode_audio, init_audio_encoder, pool_features
from .diffusion import make_schedule, training_loss
from .errors import ChecksumError, ContractError, DataFormatError
from .synthdata import null_tokens

POOL_CHOICES = (1, 2, 4, 8)


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "base"            # base | adapter
    steps: int = 20000
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-2
    dropout_p: float = 0.05
    seed: int = 0
    t_train: int = 200
    alpha_train: float = 1.0       # audio branch weight while training adapters
    log_every: int = 100

    def __post_init__(self):
        if self.stage not in ("base", "adapter"):
            raise ContractError(f"unknown stage {self.stage!r}")
        if self.steps <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ContractError("steps, batch size, and lr must be positive")


class AdamW:
    """First/second-moment adaptive steps with decoupled weight decay.

    Decay applies only to matrices and conv kernels (ndim >= 2); biases and
    norm affine vectors are exempt. Update order follows dict insertion
    order, which is fixed, so optimization is bit-deterministic.
    """

    def __init__(self, params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.data.dtype)


@dataclass
class TrainResult:
    tensors: dict                  # name -> np.ndarray (params + encoder)
    loss_log: list                 # [step, loss] pairs
    config: TrainConfig
    unet: UNetConfig
    smoothed_first: float = 0.0    # mean loss over the first log window
    smoothed_last: float = 0.0     # mean loss over the last log window


def _drop_text(tokens, rng, p):
    return null_tokens() if rng.random() < p else tokens


def _smoothed(values, window):
    w = min(window, len(values))
    return float(np.mean(values[:w])), float(np.mean(values[-w:]))


def pretrain_base(config, records, unet=None, progress=None):
    """Stage 1: train the text-conditioned base on self-captioned clips."""
    if config.stage != "base":
        raise ContractError("pretrain_base requires stage='base'")
    if not records:
        raise ContractError("pretrain_base: empty dataset")
    unet = unet or UNetConfig(t_max=config.t_train)
    rng = np.random.default_rng(config.seed)
    base = init_params(unet, rng)
    enc = init_audio_encoder(int(rng.integers(0, 2 ** 63)))
    schedule = make_schedule(config.t_train)
    opt = AdamW(base, config.lr, config.weight_decay)

    loss_log = []
    losses = []
    for step in range(config.steps):
        idx = rng.integers(0, len(records), size=config.batch_size)
        batch = []
        for i in idx:
            rec = records[int(i)]
            batch.append((rec.grid, None, _drop_text(rec.tokens, rng, config.dropout_p)))
        opt.zero_grad()
        loss = training_loss(batch, rng, base, None, 0.0, schedule, unet)
        val = loss.item()
        if not np.isfinite(val):
            raise ContractError(f"training diverged at step {step}: loss={val}")
        loss.backward()
        opt.step()
        losses.append(val)
        if step % config.log_every == 0 or step == config.steps - 1:
            loss_log.append([step, val])
            if progress:
                progress(step, val)

    first, last = _smoothed(losses, config.log_every)
    tensors = {name: p.data.copy() for name, p in base.items()}
    tensors["encoder.proj"] = enc["proj"].copy()
    tensors["encoder.pos"] = enc["pos"].copy()
    return TrainResult(tensors, loss_log, config, unet, first, last)


def _frozen_digest(base):
    h = hashlib.sha256()
    for name in sorted(base):
        h.update(name.encode())
        h.update(np.ascontiguousarray(base[name].data).tobytes())
    return h.hexdigest()


def train_adapter(base_ckpt, config, records, progress=None):
    """Stage 2: freeze the base checkpoint and train only adapter weights."""
    if config.stage != "adapter":
        raise ContractError("train_adapter requires stage='adapter'")
    if not records:
        raise ContractError("train_adapter: empty dataset")
    base, enc, unet = instantiate_base(base_ckpt)
    set_requires_grad(base, False)
    before = _frozen_digest(base)

    adapter = init_adapter_from_text(base)
    schedule = make_schedule(config.t_train)
    rng = np.random.default_rng(config.seed)
    opt = AdamW(adapter, config.lr, config.weight_decay)

    raw_feats = [encode_audio(rec.grid, enc) for rec in records]
    loss_log = []
    losses = []
    for step in range(config.steps):
        idx = rng.integers(0, len(records), size=config.batch_size)
        batch = []
        for i in idx:
            rec = records[int(i)]
            rate = POOL_CHOICES[int(rng.integers(len(POOL_CHOICES)))]
            feats = pool_features(raw_feats[int(i)], rate)
            feats, tokens = drop_conditions(feats, rec.tokens, rng, config.dropout_p)
            batch.append((rec.grid, feats, tokens))
        opt.zero_grad()
        loss = training_loss(batch, rng, base, adapter, config.alpha_train,
                             schedule, unet)
        val = loss.item()
        if not np.isfinite(val):
            raise ContractError(f"training diverged at step {step}: loss={val}")
        loss.backward()
        opt.step()
        losses.append(val)
        if step % config.log_every == 0 or step == config.steps - 1:
            loss_log.append([step, val])
            if progress:
                progress(step, val)

    if _frozen_digest(base) != before:
        raise ContractError("frozen base parameters changed during stage 2")
    first, last = _smoothed(losses, config.log_every)
    tensors = {name: p.data.copy() for name, p in adapter.items()}
    return TrainResult(tensors, loss_log, config, unet, first, last)


# ---------------------------------------------------------------------------
# checkpoint file format
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SECKPT\x00\x01"
CKPT_VERSION = 1


def save_checkpoint(path, stage, step, config_echo, loss_log, tensors):
    """Write manifest + blobs; the manifest hash covers every blob byte."""
    names = list(tensors)
    blobs = []
    index = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        code = {"float32": "<f4", "float64": "<f8"}.get(arr.dtype.name)
        if code is None:
            raise ContractError(f"tensor {name} has unsupported dtype {arr.dtype}")
        blob = arr.astype(code).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": code,
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    manifest = {
        "format": "specedit-checkpoint", "version": CKPT_VERSION,
        "stage": stage, "step": step, "config": config_echo,
        "loss_log": loss_log, "tensors": index,
        "blob_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        f.write(payload)


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise DataFormatError(f"{path}: not a specedit checkpoint")
        raw = f.read(4)
        if len(raw) != 4:
            raise DataFormatError(f"{path}: truncated manifest")
        (hlen,) = struct.unpack("<I", raw)
        head = f.read(hlen)
        if len(head) != hlen:
            raise DataFormatError(f"{path}: truncated manifest")
        manifest = json.loads(head.decode("utf-8"))
        if manifest.get("version") != CKPT_VERSION:
            raise DataFormatError(
                f"{path}: checkpoint version {manifest.get('version')} unsupported")
        payload = f.read()
    if hashlib.sha256(payload).hexdigest() != manifest["blob_sha256"]:
        raise ChecksumError(f"{path}: blob hash mismatch")
    tensors = {}
    for entry in manifest["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start:start + n], dtype=entry["dtype"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(manifest, tensors)


def result_to_checkpoint(path, result):
    save_checkpoint(path, result.config.stage,
                    result.config.steps, {
                        "train": asdict(result.config),
                        "unet": asdict(result.unet)},
                    result.loss_log, result.tensors)


def instantiate_base(ckpt):
    """Rebuild (base params, audio encoder, unet config) from a checkpoint."""
    unet_echo = ckpt.manifest["config"]["unet"]
    unet = UNetConfig(**{k: tuple(v) if isinstance(v, list) else v
                         for k, v in unet_echo.items()})
    base = {}
    enc = {}
    for name, arr in ckpt.tensors.items():
        if name.startswith("encoder."):
            enc[name.split(".", 1)[1]] = arr
        else:
            base[name] = nx.Tensor(arr.copy(), requires_grad=False)
    if "proj" not in enc or "pos" not in enc:
        raise DataFormatError("checkpoint lacks encoder tensors")
    return base, enc, unet


def instantiate_adapter(ckpt):
    adapter = {}
    for name, arr in ckpt.tensors.items():
        if not name.startswith("adapter."):
            raise DataFormatError(f"unexpected tensor {name} in adapter checkpoint")
        adapter[name] = nx.Tensor(arr.copy(), requires_grad=False)
    return adapter
