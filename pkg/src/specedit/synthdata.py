"""Procedural generator of paired (spectrogram, caption) clips.

A clip is a 64x64 time-frequency grid rendered from a symbolic ClipSpec:
a 16-step melody over semitone-spaced bins plus three categorical
attributes (timbre, texture, accompaniment). Because bins are semitones
and partial offsets are integer semitones, every musical attribute can be
recovered analytically from the rendered grid, which is what makes the
fidelity/transferability metrics exact.

Also owns the on-disk formats: a record dataset (header + fixed-size
binary records) and a single-grid file, both little-endian with JSON text
headers and bit-exact round trips.
"""

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DataFormatError

N_BINS = 64
N_FRAMES = 64
MELODY_LEN = 16
FRAMES_PER_STEP = 4
PITCH_MIN = 12
PITCH_MAX = 40  # exclusive; keeps p + 24 < N_BINS

# Partial k at bin p + offset; 19 is the nearest integer to 12*log2(3).
PARTIAL_OFFSETS = (0, 12, 19, 24)

TIMBRES = ("pure", "bright", "odd", "dark")
TEXTURES = ("none", "pulse", "offbeat", "floor")
ACCOMPS = ("none", "third", "bass")
TASKS = ("none", "timbre", "texture", "accomp")

TIMBRE_TEMPLATES = {
    "pure": (1.0, 0.0, 0.0, 0.0),
    "bright": (1.0, 0.7, 0.5, 0.35),
    "odd": (1.0, 0.0, 0.6, 0.0),
    "dark": (1.0, 0.3, 0.1, 0.05),
}

PULSE_PERIOD = 8
PULSE_MAGNITUDE = 0.3
FLOOR_LEVEL = 0.05
ACCOMP_SCALE = 0.6
THIRD_OFFSET = 4
BASS_PITCH = 12

# Text vocabulary. Index 0 is the designated null token; <low_quality> is
# the reserved generic negative. Class words are namespaced so every class
# has a globally unique index.
NULL_TOKEN = "<null>"
LOW_QUALITY_TOKEN = "<low_quality>"
VOCAB = (
    (NULL_TOKEN, LOW_QUALITY_TOKEN)
    + tuple(f"task:{t}" for t in TASKS)
    + tuple(f"timbre:{c}" for c in TIMBRES)
    + tuple(f"texture:{c}" for c in TEXTURES)
    + tuple(f"accomp:{c}" for c in ACCOMPS)
)
VOCAB_INDEX = {w: i for i, w in enumerate(VOCAB)}
NULL_ID = VOCAB_INDEX[NULL_TOKEN]


@dataclass(frozen=True)
class ClipSpec:
    """Symbolic description of one clip; ground truth for all metrics."""

    melody: tuple
    timbre_class: str
    texture_class: str
    accomp_class: str
    seed: int

    def __post_init__(self):
        if len(self.melody) != MELODY_LEN:
            raise ContractError(f"melody must have {MELODY_LEN} steps, got {len(self.melody)}")
        for p in self.melody:
            if not (PITCH_MIN <= int(p) < PITCH_MAX):
                raise ContractError(f"melody pitch {p} outside [{PITCH_MIN}, {PITCH_MAX})")
        if self.timbre_class not in TIMBRES:
            raise ContractError(f"unknown timbre class {self.timbre_class!r}")
        if self.texture_class not in TEXTURES:
            raise ContractError(f"unknown texture class {self.texture_class!r}")
        if self.accomp_class not in ACCOMPS:
            raise ContractError(f"unknown accomp class {self.accomp_class!r}")
        object.__setattr__(self, "melody", tuple(int(p) for p in self.melody))

    def clip_id(self):
        """Short stable identifier derived from the spec contents."""
        blob = json.dumps(
            [list(self.melody), self.timbre_class, self.texture_class,
             self.accomp_class, self.seed]).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class ConditionTokens:
    """Token-level caption: task word plus up to two class words.

    null_flag marks the empty-caption condition used for guidance; it
    forces every slot to the null token when encoded.
    """

    task: str
    primary_class: Optional[str] = None
    secondary_class: Optional[str] = None
    null_flag: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}")
        for word in (self.primary_class, self.secondary_class):
            if word is not None and word not in VOCAB_INDEX:
                raise ContractError(f"unknown vocabulary word {word!r}")
        if self.null_flag and (self.primary_class or self.secondary_class):
            raise ContractError("null_flag tokens must not carry class words")

    def token_ids(self):
        """Four slot ids: task, primary, secondary, trailing null anchor."""
        if self.null_flag:
            return (NULL_ID, NULL_ID, NULL_ID, NULL_ID)
        prim = NULL_ID if self.primary_class is None else VOCAB_INDEX[self.primary_class]
        sec = NULL_ID if self.secondary_class is None else VOCAB_INDEX[self.secondary_class]
        return (VOCAB_INDEX[f"task:{self.task}"], prim, sec, NULL_ID)


def null_tokens():
    """The empty-caption condition ('inputting an empty string' analog)."""
    return ConditionTokens(task="none", null_flag=True)


def low_quality_tokens():
    """Generic negative caption used by the texture/accomp edit tasks."""
    return ConditionTokens(task="none", primary_class=LOW_QUALITY_TOKEN)


def sample_clip_spec(rng, constraints=None):
    """Draw a ClipSpec uniformly over unpinned attributes.

    The melody is a random walk: uniform start in the pitch range, then
    steps drawn from {-2,-1,0,+1,+2} clamped to stay in range. constraints
    may pin timbre_class / texture_class / accomp_class / melody.
    """
    constraints = dict(constraints or {})
    unknown = set(constraints) - {"timbre_class", "texture_class", "accomp_class", "melody"}
    if unknown:
        raise ContractError(f"unknown constraint keys {sorted(unknown)}")

    if "melody" in constraints:
        melody = tuple(int(p) for p in constraints["melody"])
    else:
        pitch = int(rng.integers(PITCH_MIN, PITCH_MAX))
        melody = [pitch]
        for _ in range(MELODY_LEN - 1):
            pitch = int(np.clip(pitch + rng.integers(-2, 3), PITCH_MIN, PITCH_MAX - 1))
            melody.append(pitch)
        melody = tuple(melody)

    def pick(key, choices):
        if key in constraints:
            val = constraints[key]
            if val not in choices:
                raise ContractError(f"constraint {key}={val!r} not in {choices}")
            return val
        return choices[int(rng.integers(len(choices)))]

    timbre = pick("timbre_class", TIMBRES)
    texture = pick("texture_class", TEXTURES)
    accomp = pick("accomp_class", ACCOMPS)
    seed = int(rng.integers(0, 2 ** 63))
    return ClipSpec(melody, timbre, texture, accomp, seed)


def _add_voice(grid, pitches_per_frame, template, gain):
    for t in range(N_FRAMES):
        p = pitches_per_frame[t]
        for k, off in enumerate(PARTIAL_OFFSETS):
            b = p + off
            if b < N_BINS and template[k] > 0.0:
                grid[b, t] += gain * template[k]


def render_spectrogram(spec):
    """Render a ClipSpec to its 64x64 magnitude grid in [0, 1].

    Pure function of the spec: melody partials, then accompaniment voice,
    then texture, summed and clipped. Partials that would fall above the
    top bin (possible only for the +4 semitone accompaniment) are dropped.
    """
    grid = np.zeros((N_BINS, N_FRAMES), dtype=np.float32)
    template = TIMBRE_TEMPLATES[spec.timbre_class]
    frame_pitch = [spec.melody[t // FRAMES_PER_STEP] for t in range(N_FRAMES)]

    _add_voice(grid, frame_pitch, template, 1.0)

    if spec.accomp_class == "third":
        _add_voice(grid, [p + THIRD_OFFSET for p in frame_pitch], template, ACCOMP_SCALE)
    elif spec.accomp_class == "bass":
        _add_voice(grid, [BASS_PITCH] * N_FRAMES, template, ACCOMP_SCALE)

    if spec.texture_class == "pulse":
        grid[:, 0::PULSE_PERIOD] += PULSE_MAGNITUDE
    elif spec.texture_class == "offbeat":
        grid[:, PULSE_PERIOD // 2::PULSE_PERIOD] += PULSE_MAGNITUDE
    elif spec.texture_class == "floor":
        grid += FLOOR_LEVEL

    return np.clip(grid, 0.0, 1.0)


def caption_tokens(spec, task):
    """Deterministic caption for a clip under the given task framing.

    task='none' gives the self-descriptive caption used for pretraining:
    the timbre word plus the most salient secondary attribute (the
    accompaniment if present, else the texture if present). Task-specific
    framings describe the clip's own class for that task; the timbre word
    rides along for the accomp task the way a duet prompt names both
    instruments.
    """
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}")
    timbre_word = f"timbre:{spec.timbre_class}"
    if task == "none":
        if spec.accomp_class != "none":
            secondary = f"accomp:{spec.accomp_class}"
        elif spec.texture_class != "none":
            secondary = f"texture:{spec.texture_class}"
        else:
            secondary = None
        return ConditionTokens("none", timbre_word, secondary)
    if task == "timbre":
        return ConditionTokens("timbre", timbre_word)
    if task == "texture":
        return ConditionTokens("texture", f"texture:{spec.texture_class}")
    return ConditionTokens("accomp", timbre_word, f"accomp:{spec.accomp_class}")


def edit_tokens(task, target_class, source_timbre=None):
    """Positive caption for an edit command (task, target class)."""
    if task == "timbre":
        if target_class not in TIMBRES:
            raise ContractError(f"timbre target {target_class!r} not in {TIMBRES}")
        return ConditionTokens("timbre", f"timbre:{target_class}")
    if task == "texture":
        if target_class not in TEXTURES:
            raise ContractError(f"texture target {target_class!r} not in {TEXTURES}")
        return ConditionTokens("texture", f"texture:{target_class}")
    if task == "accomp":
        if target_class not in ACCOMPS:
            raise ContractError(f"accomp target {target_class!r} not in {ACCOMPS}")
        prim = None if source_timbre is None else f"timbre:{source_timbre}"
        return ConditionTokens("accomp", prim, f"accomp:{target_class}")
    raise ContractError(f"unknown edit task {task!r}")


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"SEDSET\x00\x01"
GRID_MAGIC = b"SEGRID\x00\x01"
FORMAT_VERSION = 1

_TASK_CODE = {t: i for i, t in enumerate(TASKS)}
_TIMBRE_CODE = {c: i for i, c in enumerate(TIMBRES)}
_TEXTURE_CODE = {c: i for i, c in enumerate(TEXTURES)}
_ACCOMP_CODE = {c: i for i, c in enumerate(ACCOMPS)}

_REC_HEAD = struct.Struct("<16B3BQ Bhhb")  # melody, classes, seed, tokens
_GRID_BYTES = N_BINS * N_FRAMES * 4


@dataclass(frozen=True)
class DatasetRecord:
    spec: ClipSpec
    grid: np.ndarray
    tokens: ConditionTokens


def _json_header(kind, extra):
    head = {"format": kind, "version": FORMAT_VERSION}
    head.update(extra)
    return json.dumps(head, sort_keys=True).encode("utf-8")


def _read_header(f, magic, kind, path):
    got = f.read(len(magic))
    if got != magic:
        raise DataFormatError(f"{path}: bad magic bytes for {kind}")
    raw = f.read(4)
    if len(raw) != 4:
        raise DataFormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw)
    body = f.read(hlen)
    if len(body) != hlen:
        raise DataFormatError(f"{path}: truncated header")
    head = json.loads(body.decode("utf-8"))
    if head.get("format") != kind:
        raise DataFormatError(f"{path}: unexpected format {head.get('format')!r}")
    if head.get("version") != FORMAT_VERSION:
        raise DataFormatError(
            f"{path}: version {head.get('version')} unsupported (want {FORMAT_VERSION})")
    return head


def write_dataset(path, records):
    """Serialize records to the binary dataset format (bit-exact round trip)."""
    header = _json_header("specedit-dataset", {
        "count": len(records), "bins": N_BINS, "frames": N_FRAMES,
        "dtype": "<f4", "fields": ["melody[16]u8", "timbre u8", "texture u8",
                                   "accomp u8", "seed u64", "task u8",
                                   "primary i16", "secondary i16", "null i8"],
    })
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for rec in records:
            s, tok = rec.spec, rec.tokens
            prim = -1 if tok.primary_class is None else VOCAB_INDEX[tok.primary_class]
            sec = -1 if tok.secondary_class is None else VOCAB_INDEX[tok.secondary_class]
            f.write(_REC_HEAD.pack(
                *s.melody, _TIMBRE_CODE[s.timbre_class], _TEXTURE_CODE[s.texture_class],
                _ACCOMP_CODE[s.accomp_class], s.seed, _TASK_CODE[tok.task],
                prim, sec, int(tok.null_flag)))
            grid = np.ascontiguousarray(rec.grid, dtype="<f4")
            if grid.shape != (N_BINS, N_FRAMES):
                raise ContractError(f"grid shape {grid.shape} != {(N_BINS, N_FRAMES)}")
            f.write(grid.tobytes())


def read_dataset(path):
    """Load a dataset file, verifying magic, version, and record count."""
    records = []
    with open(path, "rb") as f:
        head = _read_header(f, DATASET_MAGIC, "specedit-dataset", path)
        for _ in range(head["count"]):
            raw = f.read(_REC_HEAD.size)
            if len(raw) != _REC_HEAD.size:
                raise DataFormatError(f"{path}: truncated record")
            vals = _REC_HEAD.unpack(raw)
            melody = vals[:16]
            spec = ClipSpec(melody, TIMBRES[vals[16]], TEXTURES[vals[17]],
                            ACCOMPS[vals[18]], vals[19])
            task = TASKS[vals[20]]
            prim = None if vals[21] < 0 else VOCAB[vals[21]]
            sec = None if vals[22] < 0 else VOCAB[vals[22]]
            tokens = ConditionTokens(task, prim, sec, bool(vals[23]))
            blob = f.read(_GRID_BYTES)
            if len(blob) != _GRID_BYTES:
                raise DataFormatError(f"{path}: truncated grid")
            grid = np.frombuffer(blob, dtype="<f4").reshape(N_BINS, N_FRAMES).copy()
            records.append(DatasetRecord(spec, grid, tokens))
        if f.read(1):
            raise DataFormatError(f"{path}: trailing bytes after {head['count']} records")
    return records


def write_grid(path, grid):
    """Write a single spectrogram grid (the edit output format)."""
    grid = np.ascontiguousarray(grid, dtype="<f4")
    header = _json_header("specedit-grid", {
        "bins": grid.shape[0], "frames": grid.shape[1], "dtype": "<f4"})
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(grid.tobytes())


def read_grid(path):
    with open(path, "rb") as f:
        head = _read_header(f, GRID_MAGIC, "specedit-grid", path)
        n = head["bins"] * head["frames"] * 4
        blob = f.read(n)
        if len(blob) != n:
            raise DataFormatError(f"{path}: truncated grid payload")
        return np.frombuffer(blob, dtype="<f4").reshape(head["bins"], head["frames"]).copy()


def build_dataset(n_clips, seed, caption_task="none"):
    """Sample, render, and caption n_clips clips deterministically."""
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n_clips):
        spec = sample_clip_spec(rng)
        records.append(DatasetRecord(
            spec, render_spectrogram(spec), caption_tokens(spec, caption_task)))
    return records
