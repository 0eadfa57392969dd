"""Synthetic audio-visual scenes with exact ground truth, and their container.

A prototype bank holds one latent identity per instrument.  The visual and
audio embeddings are fixed isometric images of that latent, so sounding
objects and the audio they produce are related by a (hidden) linear map and
the ground-truth sounding slots are recoverable by an oracle that knows it.

Each scene has N object slots per frame.  A few instruments are visible,
extra slots repeat visible instruments the way a detector emits duplicate
boxes, and at most ``max_clutter`` slots hold background clutter orthogonal
to every instrument.  A sounding object also carries a shared "playing"
direction, so motion is visible even without the audio.  Slots are shuffled
per frame.  Audio at segment t is the mean of the sounding instruments'
audio embeddings (silence is the zero vector), plus noise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

INSTRUMENT_NAMES = ("piano", "guitar", "violin", "cello", "flute", "drum", "trumpet", "saxophone")

WORDS = (
    "<pad>", "is", "the", "sounding", "in", "this", "video", "how", "many", "instruments",
    "are", "first", "segment", "always", "?", "there", "a", "at", "all", "times",
    "playing", "does", "sound", "make", "visible", "what", "which", "of", "any", "ever",
    "one", "two",
) + INSTRUMENT_NAMES
VOCAB = {w: i for i, w in enumerate(WORDS)}
PAD = VOCAB["<pad>"]
MAX_COUNT = 4

EXISTENTIAL, COUNTING, TEMPORAL = 0, 1, 2
QUESTION_TYPES = {EXISTENTIAL: "existential", COUNTING: "counting", TEMPORAL: "temporal"}

TEMPLATES = {
    "exist": "is the {x} sounding in this video ?",
    "exist_visible": "is there a {x} in the video ?",
    "count_sounding": "how many instruments are sounding ?",
    "count_visible": "how many instruments are in the video ?",
    "always": "is the {x} always sounding ?",
    "first": "is the {x} sounding in the first segment ?",
}

MAGIC = b"APLF"
VERSION = 1
_HEADER = struct.Struct("<4sI6II")


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class SizeMismatchError(ContainerError):
    pass


@dataclass(frozen=True)
class SceneDims:
    T: int = 4
    N: int = 8
    d_a: int = 16
    d_o: int = 24
    L_max: int = 12
    n_instruments: int = 6

    def __post_init__(self):
        if self.n_instruments < 2 or self.n_instruments > len(INSTRUMENT_NAMES):
            raise ValueError(f"n_instruments must be in 2..{len(INSTRUMENT_NAMES)}")
        if self.n_instruments > min(self.d_a, self.d_o):
            raise ValueError("n_instruments cannot exceed min(d_a, d_o)")
        if self.N < 2:
            raise ValueError("N must be at least 2")

    @property
    def C(self) -> int:
        return answer_vocab_size(self.n_instruments)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def answer_vocab_size(n_instruments: int) -> int:
    return n_instruments + MAX_COUNT + 1 + 2


def answer_names(n_instruments: int) -> list[str]:
    return list(INSTRUMENT_NAMES[:n_instruments]) + [str(k) for k in range(MAX_COUNT + 1)] + ["yes", "no"]


def answer_id(answer: str, n_instruments: int) -> int:
    return answer_names(n_instruments).index(answer)


@dataclass(frozen=True)
class ScenePrototype:
    instrument_id: int
    visual: np.ndarray
    audio: np.ndarray
    name_token: int


@dataclass(frozen=True)
class PrototypeBank:
    prototypes: tuple[ScenePrototype, ...]
    visual_basis: np.ndarray  # (d_o, k) orthonormal columns
    audio_basis: np.ndarray  # (d_a, k) orthonormal columns
    playing: np.ndarray  # (d_o,) unit cue added to objects while they sound

    def __len__(self) -> int:
        return len(self.prototypes)

    @property
    def visual(self) -> np.ndarray:
        return np.stack([p.visual for p in self.prototypes])

    @property
    def audio(self) -> np.ndarray:
        return np.stack([p.audio for p in self.prototypes])

    def visual_to_latent(self, x: np.ndarray) -> np.ndarray:
        return x @ self.visual_basis

    def audio_to_latent(self, x: np.ndarray) -> np.ndarray:
        return x @ self.audio_basis


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def make_bank(seed: int, dims: SceneDims) -> PrototypeBank:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB4]))
    k = dims.n_instruments
    latent = _orthonormal(rng, k, k)
    basis = _orthonormal(rng, dims.d_o, k + 1)
    visual_basis, playing = basis[:, :k], basis[:, k]
    audio_basis = _orthonormal(rng, dims.d_a, k)
    protos = tuple(
        ScenePrototype(
            instrument_id=i,
            visual=visual_basis @ latent[i],
            audio=audio_basis @ latent[i],
            name_token=VOCAB[INSTRUMENT_NAMES[i]],
        )
        for i in range(k)
    )
    return PrototypeBank(protos, visual_basis, audio_basis, playing)


@dataclass
class VideoSample:
    audio: np.ndarray  # (T, d_a) float32
    objects: np.ndarray  # (T, N, d_o) float32
    tokens: np.ndarray  # (length,) int
    label: int
    question_type: int
    sounding: np.ndarray  # (T, N) bool, slots whose instrument sounds at t
    relevant: np.ndarray  # (T, N) bool, slots the question is about
    slot_ids: np.ndarray  # (T, N) int8, instrument id per slot, -1 for clutter

    @property
    def question(self) -> str:
        return " ".join(WORDS[t] for t in self.tokens)


def tokenize(text: str) -> np.ndarray:
    return np.array([VOCAB[w] for w in text.split()], dtype=np.int64)


def _clutter(rng: np.random.Generator, bank: PrototypeBank, dims: SceneDims, count: int) -> np.ndarray:
    """Random unit vectors orthogonal to every instrument and to the playing cue."""
    span = np.column_stack([bank.visual.T, bank.playing])
    x = rng.standard_normal((count, dims.d_o))
    x -= (x @ span) @ np.linalg.pinv(span)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_scene(
    seed,
    dims: SceneDims,
    bank: PrototypeBank,
    noise_sigma: float = 0.1,
    question_type: int | None = None,
    playing_cue: float = 0.5,
    max_clutter: int = 2,
) -> VideoSample:
    if len(bank) < 2 or len(bank) != dims.n_instruments:
        raise ValueError(f"bank has {len(bank)} prototypes, dims expect {dims.n_instruments}")
    if bank.visual.shape[1] != dims.d_o or bank.audio.shape[1] != dims.d_a:
        raise ValueError("bank embedding widths disagree with dims")
    rng = np.random.default_rng(seed)
    T, N, n_inst = dims.T, dims.N, dims.n_instruments

    n_visible = int(rng.integers(1, min(MAX_COUNT, n_inst, N) + 1))
    visible = rng.choice(n_inst, size=n_visible, replace=False)
    pattern = np.zeros((n_inst, T), dtype=bool)
    for inst in visible:
        u = rng.random()
        if u < 0.3:
            pattern[inst] = True
        elif u < 0.7:
            while not pattern[inst].any():
                pattern[inst] = rng.random(T) < 0.5

    # extra detections of visible instruments fill the frame; a few clutter boxes remain
    n_clutter = int(rng.integers(0, min(max_clutter, N - n_visible) + 1))
    n_inst_slots = N - n_clutter
    base_ids = np.full(N, -1, dtype=np.int8)
    base_ids[:n_visible] = visible
    base_ids[n_visible:n_inst_slots] = rng.choice(visible, size=n_inst_slots - n_visible)
    base_vis = np.zeros((N, dims.d_o))
    base_vis[:n_inst_slots] = bank.visual[base_ids[:n_inst_slots]]
    base_vis[n_inst_slots:] = _clutter(rng, bank, dims, n_clutter)

    slot_ids = np.empty((T, N), dtype=np.int8)
    objects = np.empty((T, N, dims.d_o))
    audio = np.zeros((T, dims.d_a))
    for t in range(T):
        perm = rng.permutation(N)
        slot_ids[t] = base_ids[perm]
        objects[t] = base_vis[perm]
        on = np.flatnonzero(pattern[:, t])
        if on.size:
            audio[t] = bank.audio[on].mean(axis=0)
    sounding = np.zeros((T, N), dtype=bool)
    for t in range(T):
        sounding[t] = [sid >= 0 and pattern[sid, t] for sid in slot_ids[t]]
    objects[sounding] += playing_cue * bank.playing
    objects += noise_sigma * rng.standard_normal(objects.shape)
    audio += noise_sigma * rng.standard_normal(audio.shape)

    if question_type is None:
        question_type = int(rng.integers(0, 3))
    ever = pattern.any(axis=1)

    def pick(yes_pool, no_pool):
        answer_yes = rng.random() < 0.5
        pool = yes_pool if (answer_yes and len(yes_pool)) or not len(no_pool) else no_pool
        return int(rng.choice(pool))

    everyone = np.arange(n_inst)
    if question_type == EXISTENTIAL:
        cond = ever if rng.random() < 0.5 else np.isin(everyone, visible)
        key = "exist" if cond is ever else "exist_visible"
        x = pick(everyone[cond], everyone[~cond])
        text, relevant_ids = TEMPLATES[key].format(x=INSTRUMENT_NAMES[x]), [x]
        answer = "yes" if cond[x] else "no"
    elif question_type == COUNTING:
        if rng.random() < 0.5:
            text, relevant_ids = TEMPLATES["count_sounding"], everyone[ever].tolist()
            answer = str(len(relevant_ids))
        else:
            text, relevant_ids = TEMPLATES["count_visible"], visible.tolist()
            answer = str(n_visible)
    elif question_type == TEMPORAL:
        if rng.random() < 0.5:
            cond = pattern.all(axis=1)
            key = "always"
        else:
            cond = pattern[:, 0]
            key = "first"
        # "no" candidates favour visible instruments so the answer is not
        # decided by visibility alone
        no_pool = np.intersect1d(everyone[~cond], visible) if np.intersect1d(everyone[~cond], visible).size else everyone[~cond]
        x = pick(everyone[cond], no_pool)
        text, relevant_ids = TEMPLATES[key].format(x=INSTRUMENT_NAMES[x]), [x]
        answer = "yes" if cond[x] else "no"
    else:
        raise ValueError(f"unknown question type {question_type}")

    tokens = tokenize(text)
    if tokens.size > dims.L_max:
        raise ValueError(f"question longer than L_max={dims.L_max}")
    return VideoSample(
        audio=audio.astype(np.float32),
        objects=objects.astype(np.float32),
        tokens=tokens,
        label=answer_id(answer, n_inst),
        question_type=question_type,
        sounding=sounding,
        relevant=np.isin(slot_ids, relevant_ids) & (slot_ids >= 0),
        slot_ids=slot_ids,
    )


def evaluate_rule(tokens, sounding: np.ndarray, slot_ids: np.ndarray, n_instruments: int) -> int:
    """Recompute the answer label from the question text and ground-truth maps."""
    words = [WORDS[t] for t in tokens]
    text = " ".join(words)
    names = [w for w in words if w in INSTRUMENT_NAMES]
    target = INSTRUMENT_NAMES.index(names[0]) if names else None

    def sounds_at(t):
        return {int(i) for i, s in zip(slot_ids[t], sounding[t]) if s and i >= 0}

    per_t = [sounds_at(t) for t in range(sounding.shape[0])]
    if text == TEMPLATES["count_sounding"]:
        answer = str(len(set().union(*per_t)))
    elif text == TEMPLATES["count_visible"]:
        answer = str(len({int(i) for i in slot_ids[0] if i >= 0}))
    elif text.startswith("is there a"):
        answer = "yes" if target in {int(i) for i in slot_ids[0] if i >= 0} else "no"
    elif "always" in words:
        answer = "yes" if all(target in s for s in per_t) else "no"
    elif "first" in words:
        answer = "yes" if target in per_t[0] else "no"
    else:
        answer = "yes" if any(target in s for s in per_t) else "no"
    return answer_id(answer, n_instruments)


# -- feature container -----------------------------------------------------------


def record_dtype(dims: SceneDims) -> np.dtype:
    T, N = dims.T, dims.N
    return np.dtype(
        [
            ("audio", "<f4", (T, dims.d_a)),
            ("objects", "<f4", (T, N, dims.d_o)),
            ("tokens", "<u4", (dims.L_max,)),
            ("length", "<u4"),
            ("label", "<u4"),
            ("question_type", "<u4"),
            ("sounding", "u1", (T, N)),
            ("relevant", "u1", (T, N)),
            ("slot_ids", "i1", (T, N)),
        ]
    )


@dataclass
class FeatureContainer:
    dims: SceneDims
    records: np.ndarray  # structured array with record_dtype(dims)

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def from_samples(cls, samples, dims: SceneDims) -> "FeatureContainer":
        recs = np.zeros(len(samples), dtype=record_dtype(dims))
        for i, s in enumerate(samples):
            r = recs[i]
            r["audio"] = s.audio
            r["objects"] = s.objects
            r["tokens"][: len(s.tokens)] = s.tokens
            r["length"] = len(s.tokens)
            r["label"] = s.label
            r["question_type"] = s.question_type
            r["sounding"] = s.sounding
            r["relevant"] = s.relevant
            r["slot_ids"] = s.slot_ids
        return cls(dims, recs)

    def sample(self, i: int) -> VideoSample:
        r = self.records[i]
        return VideoSample(
            audio=np.array(r["audio"], dtype=np.float32),
            objects=np.array(r["objects"], dtype=np.float32),
            tokens=np.array(r["tokens"][: r["length"]], dtype=np.int64),
            label=int(r["label"]),
            question_type=int(r["question_type"]),
            sounding=r["sounding"].astype(bool),
            relevant=r["relevant"].astype(bool),
            slot_ids=np.array(r["slot_ids"]),
        )

    def subset(self, index) -> "FeatureContainer":
        return FeatureContainer(self.dims, self.records[index])

    @property
    def audio(self) -> np.ndarray:
        return self.records["audio"]

    @property
    def objects(self) -> np.ndarray:
        return self.records["objects"]

    @property
    def labels(self) -> np.ndarray:
        return self.records["label"].astype(np.int64)

    @property
    def lengths(self) -> np.ndarray:
        return self.records["length"].astype(np.int64)

    @property
    def question_types(self) -> np.ndarray:
        return self.records["question_type"].astype(np.int64)

    def header_bytes(self) -> bytes:
        d = self.dims
        return _HEADER.pack(MAGIC, VERSION, d.T, d.N, d.d_a, d.d_o, d.L_max, d.C, len(self))

    def to_bytes(self) -> bytes:
        return self.header_bytes() + self.records.tobytes()


def write_container(path, container: FeatureContainer) -> None:
    Path(path).write_bytes(container.to_bytes())


def container_from_bytes(blob: bytes) -> FeatureContainer:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("bad magic: not an APLF feature container")
    if len(blob) < _HEADER.size:
        raise TruncatedError(f"truncated: header needs {_HEADER.size} bytes, file has {len(blob)}")
    _, version, T, N, d_a, d_o, L_max, C, count = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file is v{version}, reader is v{VERSION}")
    n_inst = C - (MAX_COUNT + 1 + 2)
    try:
        dims = SceneDims(T=T, N=N, d_a=d_a, d_o=d_o, L_max=L_max, n_instruments=n_inst)
    except ValueError as exc:
        raise ContainerError(f"invalid dims in header: {exc}") from exc
    dtype = record_dtype(dims)
    expected = _HEADER.size + count * dtype.itemsize
    if len(blob) < expected:
        raise TruncatedError(f"truncated: header declares {count} records ({expected} bytes), file has {len(blob)}")
    if len(blob) > expected:
        raise SizeMismatchError(f"file has {len(blob) - expected} trailing bytes beyond {count} declared records")
    records = np.frombuffer(blob, dtype=dtype, count=count, offset=_HEADER.size).copy()
    return FeatureContainer(dims, records)


def read_container(path) -> FeatureContainer:
    return container_from_bytes(Path(path).read_bytes())


# -- datasets ----------------------------------------------------------------------

SPLITS = ("train", "val", "test")


def split_sizes(n_samples: int, ratios) -> list[int]:
    ratios = list(ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    sizes = [int(np.floor(n_samples * r + 1e-9)) for r in ratios]
    sizes[0] += n_samples - sum(sizes)
    return sizes


def sample_seed(master_seed: int, split: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, split, index])


def generate_dataset(
    seed: int,
    n_samples: int,
    split_ratios=(0.8, 0.1, 0.1),
    dims: SceneDims | None = None,
    noise_sigma: float = 0.1,
    playing_cue: float = 0.5,
    max_clutter: int = 2,
) -> tuple[FeatureContainer, FeatureContainer, FeatureContainer]:
    """Train/val/test containers; question types cycle so counts stay balanced."""
    dims = dims or SceneDims()
    bank = make_bank(seed, dims)
    out = []
    for split, size in enumerate(split_sizes(n_samples, split_ratios)):
        samples = [
            generate_scene(
                sample_seed(seed, split, i), dims, bank, noise_sigma,
                question_type=i % 3, playing_cue=playing_cue, max_clutter=max_clutter,
            )
            for i in range(size)
        ]
        out.append(FeatureContainer.from_samples(samples, dims))
    return tuple(out)
