"""Task, adversarial and auxiliary objectives.

All adversarial losses take *raw* discriminator scores; each variant applies
its own output nonlinearity (sigmoid for the cross-entropy forms, identity
for least squares).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value

SGAN = "sgan"
LSGAN = "lsgan"
RELGAN = "relgan"
GRADREV = "gradrev"
KINDS = (SGAN, LSGAN, RELGAN, GRADREV)


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class AmSoftmaxConfig:
    s: float = 30.0
    m: float = 0.6

    def __post_init__(self):
        if self.s <= 0:
            raise LossError("scale s must be positive")
        if not 0.0 <= self.m < 1.0:
            raise LossError("margin m must lie in [0, 1)")


@dataclass(frozen=True)
class GanVariant:
    kind: str = SGAN
    aux: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LossError(f"unknown GAN variant {self.kind!r}; expected one of {KINDS}")

    @property
    def name(self) -> str:
        return self.kind + ("+aux" if self.aux else "")


def _one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise LossError("labels must be one-dimensional")
    if np.any(labels < 0) or np.any(labels >= k):
        raise LossError(f"label out of range [0, {k})")
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(logits, labels) -> Value:
    """Mean softmax cross-entropy of ``logits [n, K]`` against integer labels."""
    logits = ad.as_value(logits)
    if logits.ndim != 2:
        raise LossError(f"logits must be [n, K], got {logits.shape}")
    onehot = _one_hot(labels, logits.shape[1])
    picked = ad.vsum(logits * onehot, axis=1)
    return ad.mean(ad.logsumexp(logits, axis=1) - picked)


def am_softmax_loss(cosines, labels, cfg: AmSoftmaxConfig = AmSoftmaxConfig()) -> Value:
    """Additive-margin softmax over cosine logits.

    The margin is subtracted from the true-class cosine only, then every
    logit is scaled by ``s``.
    """
    cosines = ad.as_value(cosines)
    if cosines.ndim != 2:
        raise LossError(f"cosines must be [n, K], got {cosines.shape}")
    if cosines.shape[1] < 2:
        raise LossError("am_softmax_loss needs K >= 2 classes")
    onehot = _one_hot(labels, cosines.shape[1])
    logits = ad.scale(cosines - cfg.m * onehot, cfg.s)
    picked = ad.vsum(logits * onehot, axis=1)
    return ad.mean(ad.logsumexp(logits, axis=1) - picked)


def _check_pair(raw_s: Value, raw_t: Value, variant: GanVariant) -> None:
    if raw_s.data.size == 0 or raw_t.data.size == 0:
        raise LossError("adversarial losses need non-empty source and target batches")
    if variant.kind == RELGAN and raw_s.shape != raw_t.shape:
        raise LossError(f"relativistic pairing needs equal batch sizes, got {raw_s.shape} and {raw_t.shape}")


def discriminator_loss(raw_s, raw_t, variant: GanVariant) -> Value:
    """Loss minimized by D: source is the "real" (label 1) domain, target label 0."""
    raw_s, raw_t = ad.as_value(raw_s), ad.as_value(raw_t)
    _check_pair(raw_s, raw_t, variant)
    if variant.kind in (SGAN, GRADREV):
        # log(1 - sigmoid(x)) == log_sigmoid(-x)
        return -ad.mean(ad.log_sigmoid(raw_s)) - ad.mean(ad.log_sigmoid(-raw_t))
    if variant.kind == LSGAN:
        return 0.5 * ad.mean(ad.square(raw_s - 1.0)) + 0.5 * ad.mean(ad.square(raw_t))
    return -ad.mean(ad.log_sigmoid(raw_s - raw_t))


def generator_loss(raw_t, raw_s, variant: GanVariant) -> Value:
    """Loss minimized by E: push target embeddings toward the source label."""
    raw_s, raw_t = ad.as_value(raw_s), ad.as_value(raw_t)
    _check_pair(raw_s, raw_t, variant)
    if variant.kind == SGAN:
        return -ad.mean(ad.log_sigmoid(raw_t))
    if variant.kind == LSGAN:
        return 0.5 * ad.mean(ad.square(raw_t - 1.0))
    if variant.kind == RELGAN:
        return -ad.mean(ad.log_sigmoid(raw_t - raw_s))
    return -discriminator_loss(raw_s, raw_t, GanVariant(SGAN))


def aux_classifier_loss(aux_logits, labels) -> Value:
    if aux_logits is None:
        raise LossError("auxiliary loss requested but the discriminator has no aux head")
    return cross_entropy(aux_logits, labels)
