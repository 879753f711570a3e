"""Synthetic speaker corpora with a controllable source-to-target covariate shift.

Each speaker is a latent mean vector; a recording is that mean plus a slow
AR(1) wander plus white noise. Target-domain recordings additionally pass
through a fixed rotation (in the plane of the first two coordinates) and a
fixed offset along the unit diagonal.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .network import SOURCE, TARGET

CORPUS_MAGIC = b"ASEC"
CORPUS_VERSION = 1
WANDER_COEF = 0.9
WANDER_SCALE = 0.3


class SynthError(ValueError):
    pass


class CorpusFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


@dataclass
class SynthSpec:
    num_source_speakers: int = 8
    num_target_speakers: int = 6
    recordings_per_speaker: int = 6
    frames_per_recording: tuple[int, int] = (80, 160)
    frame_dim: int = 8
    speaker_scatter: float = 1.0
    channel_noise: float = 2.0
    shift_rotation_angle: float = 0.5
    shift_offset_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        self.frames_per_recording = tuple(int(v) for v in self.frames_per_recording)
        lo, hi = self.frames_per_recording
        if lo < 1 or hi < lo:
            raise SynthError("frames_per_recording must be a range 1 <= lo <= hi")
        if min(self.num_source_speakers, self.num_target_speakers, self.recordings_per_speaker) < 0:
            raise SynthError("counts must be non-negative")
        if self.speaker_scatter <= 0 or self.channel_noise <= 0:
            raise SynthError("speaker_scatter and channel_noise must be positive")
        if self.frame_dim < 1:
            raise SynthError("frame_dim must be >= 1")
        if self.frame_dim < 2 and self.shift_rotation_angle != 0:
            raise SynthError("a nonzero rotation needs frame_dim >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frames_per_recording"] = list(self.frames_per_recording)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise SynthError(f"unknown synth keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class Recording:
    id: str
    speaker: int
    domain: int
    frames: np.ndarray  # [time, frame_dim]

    def __eq__(self, other):
        return (isinstance(other, Recording) and self.id == other.id
                and self.speaker == other.speaker and self.domain == other.domain
                and self.frames.shape == other.frames.shape
                and np.array_equal(self.frames, other.frames))


class Corpus:
    """An ordered collection of recordings with unique ids."""

    def __init__(self, recordings=()):
        self.recordings: list[Recording] = list(recordings)
        ids = [r.id for r in self.recordings]
        if len(set(ids)) != len(ids):
            raise SynthError("recording ids must be unique")
        for r in self.recordings:
            if not np.all(np.isfinite(r.frames)):
                raise SynthError(f"recording {r.id} has non-finite frames")

    def __len__(self) -> int:
        return len(self.recordings)

    def __iter__(self) -> Iterator[Recording]:
        return iter(self.recordings)

    def __getitem__(self, i) -> Recording:
        return self.recordings[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, Corpus) and self.recordings == other.recordings

    def __add__(self, other: "Corpus") -> "Corpus":
        return Corpus(self.recordings + other.recordings)

    def by_id(self) -> dict[str, Recording]:
        return {r.id: r for r in self.recordings}

    @property
    def speakers(self) -> list[int]:
        return sorted({r.speaker for r in self.recordings})

    def subset(self, keep) -> "Corpus":
        return Corpus([r for r in self.recordings if keep(r)])


def shift_map(frame_dim: int, angle: float, offset_scale: float) -> tuple[np.ndarray, np.ndarray]:
    """The target-domain affine map ``x -> x @ R + b``."""
    rot = np.eye(frame_dim)
    if frame_dim >= 2:
        c, s = np.cos(angle), np.sin(angle)
        rot[:2, :2] = [[c, s], [-s, c]]
    u = np.ones(frame_dim) / np.sqrt(frame_dim)
    return rot, offset_scale * u


def _recording_frames(rng: np.random.Generator, mean: np.ndarray, length: int, noise: float) -> np.ndarray:
    d = mean.shape[0]
    wander_std = WANDER_SCALE * noise
    innov = rng.normal(0.0, wander_std * np.sqrt(1.0 - WANDER_COEF ** 2), size=(length, d))
    wander = np.empty((length, d))
    wander[0] = rng.normal(0.0, wander_std, size=d)
    for t in range(1, length):
        wander[t] = WANDER_COEF * wander[t - 1] + innov[t]
    return mean + wander + rng.normal(0.0, noise, size=(length, d))


def _domain(spec: SynthSpec, domain: int, n_speakers: int, first_speaker: int, prefix: str) -> list[Recording]:
    tag = "src" if domain == SOURCE else "tgt"
    rot, offset = shift_map(spec.frame_dim, spec.shift_rotation_angle, spec.shift_offset_scale)
    lo, hi = spec.frames_per_recording
    out = []
    for k in range(n_speakers):
        spk = first_speaker + k
        mean = np.random.default_rng([spec.seed, domain, spk]).normal(
            0.0, spec.speaker_scatter, size=spec.frame_dim)
        for r in range(spec.recordings_per_speaker):
            rng = np.random.default_rng([spec.seed, domain, spk, r + 1])
            length = int(rng.integers(lo, hi + 1))
            frames = _recording_frames(rng, mean, length, spec.channel_noise)
            if domain == TARGET:
                frames = frames @ rot + offset
            out.append(Recording(f"{prefix}{tag}-spk{spk:03d}-rec{r:02d}", spk, domain,
                                 frames.astype(np.float32).astype(np.float64)))
    return out


def generate(spec: SynthSpec, prefix: str = "") -> tuple[Corpus, Corpus]:
    """Source and target corpora; frames are rounded to float32 precision.

    ``prefix`` is prepended to every recording id so corpora generated with
    different seeds can be merged.
    """
    source = Corpus(_domain(spec, SOURCE, spec.num_source_speakers, 0, prefix))
    target = Corpus(_domain(spec, TARGET, spec.num_target_speakers, spec.num_source_speakers, prefix))
    return source, target


# binary corpus file --------------------------------------------------------

def corpus_bytes(corpus: Corpus) -> bytes:
    chunks = [CORPUS_MAGIC, struct.pack("<II", CORPUS_VERSION, len(corpus))]
    for r in corpus:
        rid = r.id.encode("utf-8")
        frames = np.asarray(r.frames, dtype="<f4")
        if frames.ndim != 2:
            raise SynthError(f"recording {r.id} frames must be 2-D")
        chunks.append(struct.pack("<I", len(rid)) + rid)
        chunks.append(struct.pack("<IBII", r.speaker, r.domain, *frames.shape))
        chunks.append(frames.tobytes(order="C"))
    return b"".join(chunks)


def write_corpus(corpus: Corpus, path) -> None:
    Path(path).write_bytes(corpus_bytes(corpus))


def _unpack(buf: bytes, offset: int, fmt: str, what: str):
    size = struct.calcsize(fmt)
    if offset + size > len(buf):
        raise CorpusFormatError(f"truncated corpus file while reading {what}", offset)
    return struct.unpack_from(fmt, buf, offset), offset + size


def corpus_from_bytes(buf: bytes) -> Corpus:
    if len(buf) < 4 or buf[:4] != CORPUS_MAGIC:
        raise CorpusFormatError("bad corpus magic", 0)
    (version, count), off = _unpack(buf, 4, "<II", "header")
    if version != CORPUS_VERSION:
        raise CorpusFormatError(f"unsupported corpus version {version}", 4)
    recs = []
    for _ in range(count):
        (n,), off = _unpack(buf, off, "<I", "id length")
        if off + n > len(buf):
            raise CorpusFormatError("truncated corpus file while reading id", off)
        try:
            rid = buf[off:off + n].decode("utf-8")
        except UnicodeDecodeError:
            raise CorpusFormatError("recording id is not valid UTF-8", off) from None
        off += n
        (spk, dom, time, dim), off = _unpack(buf, off, "<IBII", "record header")
        if dom not in (SOURCE, TARGET):
            raise CorpusFormatError(f"invalid domain tag {dom}", off - 9)
        nbytes = 4 * time * dim
        if off + nbytes > len(buf):
            raise CorpusFormatError("truncated corpus file while reading frames", off)
        frames = np.frombuffer(buf, dtype="<f4", count=time * dim, offset=off)
        recs.append(Recording(rid, spk, dom, frames.reshape(time, dim).astype(np.float64)))
        off += nbytes
    if off != len(buf):
        raise CorpusFormatError("trailing bytes after last record", off)
    try:
        return Corpus(recs)
    except SynthError as exc:
        raise CorpusFormatError(str(exc), off) from None


def read_corpus(path) -> Corpus:
    return corpus_from_bytes(Path(path).read_bytes())
