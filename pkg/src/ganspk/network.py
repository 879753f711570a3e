"""Embedding network, cosine classifier head and domain discriminator.

Parameter names are flat strings prefixed by the sub-network they belong to:
``E.`` (embedding function / generator), ``C.`` (cosine classifier) and
``D.`` (domain discriminator). Batch-norm running statistics live in a
separate ``bn`` mapping and are never touched by an optimizer.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Value

SOURCE = 0
TARGET = 1

CHECKPOINT_MAGIC = b"ASEM"
CHECKPOINT_VERSION = 1
POOL_EPS = 1e-6


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class NetworkConfig:
    frame_dim: int = 8
    encoder_hidden: list[int] = field(default_factory=lambda: [64, 64])
    residual_blocks: int = 2
    post_pool_widths: list[int] = field(default_factory=lambda: [512, 512])
    embedding_dim: int = 64
    num_speakers: int = 8
    disc_widths: list[int] = field(default_factory=lambda: [256, 256])
    attention_hidden: int = 64
    use_batchnorm: bool = True
    aux_head: bool = False

    def __post_init__(self):
        self.encoder_hidden = [int(w) for w in self.encoder_hidden]
        self.post_pool_widths = [int(w) for w in self.post_pool_widths]
        self.disc_widths = [int(w) for w in self.disc_widths]
        widths = [self.frame_dim, self.attention_hidden, *self.encoder_hidden,
                  *self.post_pool_widths, *self.disc_widths]
        if any(w < 1 for w in widths) or not self.encoder_hidden or not self.disc_widths:
            raise ConfigError("all network widths must be >= 1")
        if self.embedding_dim < 2:
            raise ConfigError("embedding_dim must be >= 2")
        if self.num_speakers < 2:
            raise ConfigError("num_speakers must be >= 2")
        if len(self.post_pool_widths) != 2:
            raise ConfigError("post_pool_widths must have exactly two entries")
        if self.residual_blocks < 0:
            raise ConfigError("residual_blocks must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown network keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class SpeakerBatch:
    frames: np.ndarray  # [batch, time, frame_dim]
    speaker_labels: np.ndarray
    domain: int = SOURCE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.speaker_labels = np.asarray(self.speaker_labels, dtype=np.int64)
        if self.frames.ndim != 3:
            raise ad.ShapeError("SpeakerBatch", self.frames.shape, detail="expected [batch, time, dim]")
        if len(self.speaker_labels) != self.frames.shape[0]:
            raise ad.ShapeError("SpeakerBatch", self.frames.shape, self.speaker_labels.shape)


@dataclass
class ModelState:
    config: NetworkConfig
    params: dict[str, np.ndarray]
    bn: dict[str, np.ndarray]

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def copy(self) -> "ModelState":
        return ModelState(NetworkConfig.from_dict(self.config.to_dict()),
                          {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.bn.items()})

    def values(self, trainable: tuple[str, ...] = ()) -> dict[str, Value]:
        """Wrap parameters as graph leaves; groups in ``trainable`` record gradients."""
        return {k: Value(v, requires_grad=k.split(".", 1)[0] in trainable)
                for k, v in self.params.items()}


# construction --------------------------------------------------------------

def _dense(rng, params, name, fan_in, fan_out, bn=False, bn_stats=None):
    params[f"{name}.W"] = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, fan_out))
    params[f"{name}.b"] = np.zeros(fan_out)
    if bn:
        params[f"{name}.gamma"] = np.ones(fan_out)
        params[f"{name}.beta"] = np.zeros(fan_out)
        bn_stats[f"{name}.mean"] = np.zeros(fan_out)
        bn_stats[f"{name}.var"] = np.ones(fan_out)


def init_model(config: NetworkConfig, seed: int = 0) -> ModelState:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    bn: dict[str, np.ndarray] = {}
    use_bn = config.use_batchnorm
    width = config.frame_dim
    for i, h in enumerate(config.encoder_hidden):
        _dense(rng, p, f"E.enc{i}", width, h, use_bn, bn)
        width = h
    for j in range(config.residual_blocks):
        _dense(rng, p, f"E.res{j}.fc1", width, width, use_bn, bn)
        _dense(rng, p, f"E.res{j}.fc2", width, width)
        p[f"E.res{j}.fc2.W"] *= 0.5
    _dense(rng, p, "E.att.fc1", width, config.attention_hidden)
    _dense(rng, p, "E.att.fc2", config.attention_hidden, 1)
    pooled = 2 * width
    w1, w2 = config.post_pool_widths
    _dense(rng, p, "E.fc1", pooled, w1, use_bn, bn)
    _dense(rng, p, "E.fc2", w1, w2, use_bn, bn)
    _dense(rng, p, "E.fc3", w2, config.embedding_dim)
    p["C.W"] = rng.normal(0.0, 1.0, size=(config.embedding_dim, config.num_speakers))
    width = config.embedding_dim
    for i, h in enumerate(config.disc_widths):
        _dense(rng, p, f"D.fc{i}", width, h, use_bn, bn)
        width = h
    _dense(rng, p, "D.out", width, 1)
    if config.aux_head:
        _dense(rng, p, "D.aux", width, config.num_speakers)
    return ModelState(config, p, bn)


def with_aux_head(model: ModelState, seed: int = 0) -> ModelState:
    """Copy of ``model`` with a freshly initialized auxiliary speaker head on D.

    E, C and the existing D trunk are kept; a model that already has the head
    is returned as a plain copy.
    """
    if model.config.aux_head:
        return model.copy()
    fresh = init_model(dataclasses.replace(model.config, aux_head=True), seed)
    fresh.params.update({k: v.copy() for k, v in model.params.items()})
    fresh.bn.update({k: v.copy() for k, v in model.bn.items()})
    return fresh


# forward pieces ------------------------------------------------------------

def _linear(pv, name, x):
    return ad.matmul(x, pv[f"{name}.W"]) + pv[f"{name}.b"]


def _bn(pv, name, x, bn, train, new_stats):
    key_m, key_v = f"{name}.mean", f"{name}.var"
    if key_m not in bn:
        return x
    out, (m, v) = ad.batch_norm(x, pv[f"{name}.gamma"], pv[f"{name}.beta"], train=train,
                                running_mean=bn[key_m], running_var=bn[key_v])
    if train and new_stats is not None:
        new_stats[key_m] = m
        new_stats[key_v] = v
    return out


def attentive_stats_pool(h, pv: Mapping[str, Value], prefix: str = "E.att",
                         return_weights: bool = False):
    """Attention-weighted mean and standard deviation over the time axis.

    ``h`` is ``[batch, time, d]``; the result is ``[batch, 2d]``.
    """
    h = ad.as_value(h)
    if h.ndim != 3 or h.shape[1] < 1:
        raise ad.ShapeError("attentive_stats_pool", h.shape, detail="need [batch, time>=1, d]")
    scores = _linear(pv, f"{prefix}.fc2", ad.elu(_linear(pv, f"{prefix}.fc1", h)))
    weights = ad.softmax(scores, axis=1)  # [batch, time, 1]
    mu = ad.vsum(weights * h, axis=1)
    second = ad.vsum(weights * ad.square(h), axis=1)
    sigma = ad.sqrt(second - ad.square(mu) + POOL_EPS)
    pooled = ad.concat([mu, sigma], axis=1)
    if return_weights:
        return pooled, weights
    return pooled


def frame_encoder(pv, frames, config: NetworkConfig, bn, train, new_stats=None) -> Value:
    x = ad.as_value(frames)
    for i in range(len(config.encoder_hidden)):
        name = f"E.enc{i}"
        x = ad.elu(_bn(pv, name, _linear(pv, name, x), bn, train, new_stats))
    for j in range(config.residual_blocks):
        name = f"E.res{j}"
        inner = ad.elu(_bn(pv, f"{name}.fc1", _linear(pv, f"{name}.fc1", x), bn, train, new_stats))
        x = x + _linear(pv, f"{name}.fc2", inner)
    return x


def embed(pv: Mapping[str, Value], frames, config: NetworkConfig, bn: Mapping[str, np.ndarray],
          train: bool, new_stats: dict | None = None) -> Value:
    """Graph-building forward pass of E; returns the ``fc3`` output."""
    frames = ad.as_value(frames)
    if frames.ndim != 3:
        raise ad.ShapeError("encode", frames.shape, detail="expected [batch, time, frame_dim]")
    if frames.shape[2] != config.frame_dim:
        raise ad.ShapeError("encode", frames.shape, (config.frame_dim,), detail="frame_dim mismatch")
    if frames.shape[1] == 0:
        raise ad.ShapeError("encode", frames.shape, detail="time must be >= 1")
    h = frame_encoder(pv, frames, config, bn, train, new_stats)
    x = attentive_stats_pool(h, pv)
    for name in ("E.fc1", "E.fc2"):
        x = ad.elu(_bn(pv, name, _linear(pv, name, x), bn, train, new_stats))
    return _linear(pv, "E.fc3", x)


def encode(batch: SpeakerBatch | np.ndarray, model: ModelState, mode: str = "eval") -> np.ndarray:
    """Embeddings ``[batch, embedding_dim]`` as a plain array (not L2-normalized)."""
    frames = batch.frames if isinstance(batch, SpeakerBatch) else np.asarray(batch, dtype=np.float64)
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    pv = model.values()
    return embed(pv, frames, model.config, model.bn, train=(mode == "train")).data


def cosine_logits(emb, weight) -> Value:
    """Cosine between each embedding row and each class column of ``weight``."""
    emb, weight = ad.as_value(emb), ad.as_value(weight)
    if emb.ndim != 2 or weight.ndim != 2 or emb.shape[1] != weight.shape[0]:
        raise ad.ShapeError("classify", emb.shape, weight.shape)
    return ad.matmul(ad.l2_normalize(emb, axis=1), ad.l2_normalize(weight, axis=0))


def classify(embeddings, model_or_weight) -> np.ndarray:
    weight = model_or_weight.params["C.W"] if isinstance(model_or_weight, ModelState) else model_or_weight
    return cosine_logits(embeddings, weight).data


def discriminator(pv, emb, config: NetworkConfig, bn, train: bool,
                  new_stats: dict | None = None) -> tuple[Value, Value | None]:
    """Raw (pre-activation) domain score ``[batch]`` and optional aux speaker logits.

    Embeddings are L2-normalized first: scoring only sees directions, and an
    unnormalized input lets the generator win by inflating the norm.
    """
    x = ad.as_value(emb)
    if x.ndim != 2 or x.shape[1] != config.embedding_dim:
        raise ad.ShapeError("discriminate", x.shape, (config.embedding_dim,))
    x = ad.l2_normalize(x, axis=1)
    for i in range(len(config.disc_widths)):
        name = f"D.fc{i}"
        x = ad.elu(_bn(pv, name, _linear(pv, name, x), bn, train, new_stats))
    raw = ad.reshape(_linear(pv, "D.out", x), (x.shape[0],))
    aux = _linear(pv, "D.aux", x) if config.aux_head else None
    return raw, aux


def discriminate(embeddings, model: ModelState, mode: str = "eval") -> dict:
    raw, aux = discriminator(model.values(), embeddings, model.config, model.bn, train=(mode == "train"))
    return {"raw_score": raw.data, "aux_logits": None if aux is None else aux.data}


# checkpoint file -----------------------------------------------------------

def _named_arrays(model: ModelState) -> dict[str, np.ndarray]:
    out = dict(model.params)
    out.update({f"bn.{k}": v for k, v in model.bn.items()})
    return out


def checkpoint_bytes(model: ModelState) -> bytes:
    arrays = _named_arrays(model)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg)) + cfg)
    return b"".join(chunks)


def save_checkpoint(model: ModelState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def _read(buf: bytes, offset: int, fmt: str):
    size = struct.calcsize(fmt)
    if offset + size > len(buf):
        raise CheckpointError(f"truncated checkpoint at byte {offset}")
    return struct.unpack_from(fmt, buf, offset), offset + size


def checkpoint_from_bytes(buf: bytes) -> ModelState:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic at byte 0")
    (version, count), off = _read(buf, 4, "<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(count):
        (n,), off = _read(buf, off, "<I")
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,), off = _read(buf, off, "<I")
        shape, off = _read(buf, off, f"<{rank}I")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off
                                     ).reshape(shape).astype(np.float64)
        off += nbytes
    (n,), off = _read(buf, off, "<I")
    if off + n != len(buf):
        raise CheckpointError(f"malformed config block at byte {off}")
    config = NetworkConfig.from_dict(json.loads(buf[off:off + n].decode("utf-8")))
    params = {k: v for k, v in arrays.items() if not k.startswith("bn.")}
    bn = {k[3:]: v for k, v in arrays.items() if k.startswith("bn.")}
    return ModelState(config, params, bn)


def load_checkpoint(path) -> ModelState:
    return checkpoint_from_bytes(Path(path).read_bytes())
