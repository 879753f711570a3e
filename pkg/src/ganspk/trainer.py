"""Pretraining and the three-stage adversarial update.

Per mini-batch the adversarial phase runs, in order:

1. task update of E and C on the source batch (AM-Softmax);
2. discriminator update of D on fresh source/target embeddings;
3. generator update of E against the frozen D.

Source and target chunks of one step share a chunk length and are pushed
through E (and D) as one concatenated batch in every stage, so train-mode
batch-norm statistics always cover both domains, matching the running
statistics used at extraction time. The task loss still only reads the
source rows.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .evaluation import compute_eer, extract, score_trials
from .losses import (AmSoftmaxConfig, GanVariant, am_softmax_loss, aux_classifier_loss,
                     discriminator_loss, generator_loss)
from .network import ModelState, cosine_logits, discriminator, embed
from .optim import OptimizerState, optimizer_step, rmsprop, sgd
from .synthdata import Corpus

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised on a non-finite loss; carries the stage and the last good model."""

    def __init__(self, message: str, stage: str, last_good: ModelState | None = None):
        self.stage = stage
        self.last_good = last_good
        super().__init__(f"{stage}: {message}")


@dataclass
class TrainerConfig:
    pretrain_lr: float = 0.001
    classifier_lr: float = 0.003
    embed_lr: float = 0.001
    adv_lr: float = 0.001
    disc_lr: float | None = None  # None: share adv_lr
    rms_rho: float = 0.9
    rms_eps: float = 1e-8
    batch_size: int = 64
    chunk_frames_min: int = 30
    chunk_frames_max: int = 80
    samples_per_recording: int = 10
    pretrain_epochs: int = 10
    pretrain_margin: float = 0.0
    max_epochs: int = 20
    patience: int = 3
    variant: str = "sgan"
    aux: bool = False
    am_scale: float = 30.0
    am_margin: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.chunk_frames_min <= self.chunk_frames_max:
            raise ValueError("need 1 <= chunk_frames_min <= chunk_frames_max")
        if self.batch_size < 1 or self.samples_per_recording < 1:
            raise ValueError("batch_size and samples_per_recording must be positive")
        if min(self.pretrain_epochs, self.max_epochs, self.patience) < 0:
            raise ValueError("epoch counts must be non-negative")
        GanVariant(self.variant, self.aux)
        AmSoftmaxConfig(self.am_scale, self.am_margin)

    @property
    def gan_variant(self) -> GanVariant:
        return GanVariant(self.variant, self.aux)

    @property
    def am_cfg(self) -> AmSoftmaxConfig:
        return AmSoftmaxConfig(self.am_scale, self.am_margin)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown trainer keys: {', '.join(unknown)}")
        return cls(**d)


# sampling ------------------------------------------------------------------

class Chunk(NamedTuple):
    recording: int
    start: int
    length: int


@dataclass
class EpochPlan:
    batches: list[list[Chunk]]          # source chunks, one list per mini-batch
    target_batches: list[list[Chunk]]   # same length/size per step, drawn with replacement

    @property
    def chunks(self) -> list[Chunk]:
        return [c for b in self.batches for c in b]


def _check_lengths(corpus: Corpus, min_len: int, what: str) -> None:
    short = [r.id for r in corpus if r.frames.shape[0] < min_len]
    if short:
        raise ValueError(f"{what} recordings shorter than chunk_frames_min={min_len}: {', '.join(short)}")


def build_epoch_plan(corpus: Corpus, cfg: TrainerConfig, epoch_index: int,
                     target: Corpus | None = None) -> EpochPlan:
    """Shuffle ``samples_per_recording`` chunks per source recording into mini-batches.

    One chunk length is drawn per mini-batch. When ``target`` is given, each
    mini-batch gets an equally sized target batch sampled with replacement.
    """
    _check_lengths(corpus, cfg.chunk_frames_min, "source")
    if target is not None:
        if len(target) == 0:
            raise ValueError("target corpus is empty")
        _check_lengths(target, cfg.chunk_frames_min, "target")
    rng = np.random.default_rng([cfg.seed, 0 if target is None else 1, epoch_index])
    order = rng.permutation(np.repeat(np.arange(len(corpus)), cfg.samples_per_recording))
    lengths = np.array([r.frames.shape[0] for r in corpus])
    tlengths = None if target is None else np.array([r.frames.shape[0] for r in target])
    batches, target_batches = [], []
    for b0 in range(0, len(order), cfg.batch_size):
        idx = order[b0:b0 + cfg.batch_size]
        upper = min(cfg.chunk_frames_max, int(lengths[idx].min()))
        tidx = None
        if target is not None:
            tidx = rng.integers(0, len(target), size=len(idx))
            upper = min(upper, int(tlengths[tidx].min()))
        length = int(rng.integers(cfg.chunk_frames_min, upper + 1))
        starts = rng.integers(0, lengths[idx] - length + 1)
        batches.append([Chunk(int(i), int(s), length) for i, s in zip(idx, starts)])
        if tidx is not None:
            tstarts = rng.integers(0, tlengths[tidx] - length + 1)
            target_batches.append([Chunk(int(i), int(s), length) for i, s in zip(tidx, tstarts)])
    return EpochPlan(batches, target_batches)


def load_chunks(corpus: Corpus, chunks: list[Chunk]) -> tuple[np.ndarray, np.ndarray]:
    frames = np.stack([corpus[c.recording].frames[c.start:c.start + c.length] for c in chunks])
    labels = np.array([corpus[c.recording].speaker for c in chunks], dtype=np.int64)
    return frames, labels


# history -------------------------------------------------------------------

LOSS_KEYS = ("task", "disc", "gen", "aux")


@dataclass
class TrainHistory:
    steps: list[dict] = field(default_factory=list)
    epochs: list[tuple[int, float]] = field(default_factory=list)
    best_epoch: int | None = None

    def record_step(self, losses: Mapping[str, float]) -> None:
        for k, v in losses.items():
            if not np.isfinite(v):
                raise TrainingError(f"non-finite {k} loss", k)
        self.steps.append({k: float(losses[k]) for k in LOSS_KEYS if k in losses})

    def to_text(self) -> str:
        lines = []
        for i, rec in enumerate(self.steps):
            lines.append(" ".join([f"step {i}"] + [f"{k} {rec[k]!r}" for k in LOSS_KEYS if k in rec]))
        lines += [f"epoch {e} val_eer {v!r}" for e, v in self.epochs]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str) -> "TrainHistory":
        h = cls()
        for line in text.splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "step":
                h.steps.append({parts[i]: float(parts[i + 1]) for i in range(2, len(parts), 2)})
            elif parts[0] == "epoch":
                h.epochs.append((int(parts[1]), float(parts[3])))
        return h


# pretraining ---------------------------------------------------------------

def _apply(model: ModelState, opt: OptimizerState, prefix: str, grads: Mapping[str, np.ndarray]) -> None:
    names = [k for k in model.params if k.startswith(prefix + ".")]
    new = optimizer_step(opt, {k: model.params[k] for k in names}, {k: grads[k] for k in names})
    model.params.update(new)


def pretrain(model: ModelState, corpus: Corpus, cfg: TrainerConfig) -> tuple[ModelState, TrainHistory]:
    """Cosine cross-entropy training of E and C with RMSprop; D is never touched."""
    history = TrainHistory()
    am = AmSoftmaxConfig(cfg.am_scale, cfg.pretrain_margin)
    opt_e = rmsprop(cfg.pretrain_lr, cfg.rms_rho, cfg.rms_eps)
    opt_c = rmsprop(cfg.pretrain_lr, cfg.rms_rho, cfg.rms_eps)
    for epoch in range(cfg.pretrain_epochs):
        plan = build_epoch_plan(corpus, cfg, epoch)
        for chunks in plan.batches:
            frames, labels = load_chunks(corpus, chunks)
            last_good = model.copy()
            pv = model.values(("E", "C"))
            stats: dict[str, np.ndarray] = {}
            try:
                emb = embed(pv, frames, model.config, model.bn, train=True, new_stats=stats)
                loss = am_softmax_loss(cosine_logits(emb, pv["C.W"]), labels, am)
                loss.backward()
                grads = {k: v.grad for k, v in pv.items()}
                _apply(model, opt_e, "E", grads)
                _apply(model, opt_c, "C", grads)
            except (FloatingPointError, ValueError) as exc:
                raise TrainingError(str(exc), "pretrain", last_good) from exc
            model.bn.update(stats)
            history.record_step({"task": loss.item()})
        log.info("pretrain epoch %d task %.4f", epoch, history.steps[-1]["task"] if history.steps else float("nan"))
    return model, history


# adversarial phase ---------------------------------------------------------

def make_optimizers(cfg: TrainerConfig) -> dict[str, OptimizerState]:
    return {
        "C": rmsprop(cfg.classifier_lr, cfg.rms_rho, cfg.rms_eps),
        "E_task": sgd(cfg.embed_lr),
        "E_adv": sgd(cfg.adv_lr),
        "D": sgd(cfg.adv_lr if cfg.disc_lr is None else cfg.disc_lr),
    }


def stage_gradients(model: ModelState, stage: int, src_frames: np.ndarray, src_labels: np.ndarray,
                    tgt_frames: np.ndarray, cfg: TrainerConfig):
    """Loss values, parameter gradients and new batch-norm statistics for one stage."""
    variant = cfg.gan_variant
    config = model.config
    stats: dict[str, np.ndarray] = {}
    losses: dict[str, float] = {}
    n_src = src_frames.shape[0]
    both = np.concatenate([src_frames, tgt_frames], axis=0)
    if stage == 1:
        pv = model.values(("E", "C"))
        emb = embed(pv, both, config, model.bn, train=True, new_stats=stats)
        total = am_softmax_loss(cosine_logits(emb[:n_src], pv["C.W"]), src_labels, cfg.am_cfg)
        losses["task"] = total.item()
    else:
        trainable = ("D",) if stage == 2 else ("E",)
        pv = model.values(trainable)
        e_stats = stats if stage == 3 else None
        d_stats = stats if stage == 2 else None
        emb = embed(pv, both, config, model.bn, train=True, new_stats=e_stats)
        raw, aux_logits = discriminator(pv, emb, config, model.bn, train=True, new_stats=d_stats)
        raw_s, raw_t = raw[:n_src], raw[n_src:]
        if stage == 2:
            total = discriminator_loss(raw_s, raw_t, variant)
            losses["disc"] = total.item()
        else:
            total = generator_loss(raw_t, raw_s, variant)
            losses["gen"] = total.item()
        if variant.aux:
            aux = aux_classifier_loss(aux_logits[:n_src], src_labels)
            total = total + aux
            if stage == 2:
                losses["aux"] = aux.item()
    total.backward()
    grads = {k: v.grad for k, v in pv.items() if v.requires_grad}
    return losses, grads, stats


_STAGE_NAMES = {1: "task", 2: "discriminator", 3: "generator"}


def adversarial_step(model: ModelState, source_batch, target_batch, cfg: TrainerConfig,
                     opt_states: Mapping[str, OptimizerState], stages=(1, 2, 3)) -> tuple[ModelState, dict]:
    """Run the three sequential updates in place; returns ``(model, losses)``.

    ``source_batch`` is ``(frames, labels)``; ``target_batch`` is frames only
    (target labels are never read).
    """
    src_frames, src_labels = source_batch
    tgt_frames = target_batch[0] if isinstance(target_batch, tuple) else target_batch
    metrics: dict[str, float] = {}
    for stage in stages:
        try:
            losses, grads, stats = stage_gradients(model, stage, src_frames, src_labels, tgt_frames, cfg)
            for k, v in losses.items():
                if not np.isfinite(v):
                    raise FloatingPointError(f"non-finite {k} loss")
            if stage == 1:
                _apply(model, opt_states["C"], "C", grads)
                _apply(model, opt_states["E_task"], "E", grads)
            elif stage == 2:
                _apply(model, opt_states["D"], "D", grads)
            else:
                _apply(model, opt_states["E_adv"], "E", grads)
        except (FloatingPointError, ValueError) as exc:
            raise TrainingError(str(exc), _STAGE_NAMES[stage]) from exc
        model.bn.update(stats)
        metrics.update(losses)
    return model, metrics


def validation_eer(model: ModelState, validation: tuple[Corpus, list]) -> float:
    corpus, trials = validation
    return compute_eer(score_trials(trials, extract(corpus, model)), trials)


def train(model: ModelState, source: Corpus, target: Corpus, validation: tuple[Corpus, list],
          cfg: TrainerConfig) -> tuple[ModelState, TrainHistory]:
    """Adversarial training with best-validation-EER checkpoint selection.

    Stops once ``patience`` consecutive epochs pass without a strictly lower
    validation EER, or after ``max_epochs``.
    """
    if len(target) == 0:
        raise ValueError("target corpus is empty; the adversarial phase is undefined")
    history = TrainHistory()
    opts = make_optimizers(cfg)
    best, best_eer, since_best = model.copy(), np.inf, 0
    for epoch in range(1, cfg.max_epochs + 1):
        plan = build_epoch_plan(source, cfg, epoch, target=target)
        for chunks, tchunks in zip(plan.batches, plan.target_batches):
            src = load_chunks(source, chunks)
            tgt_frames, _ = load_chunks(target, tchunks)
            last_good = model.copy()
            try:
                _, metrics = adversarial_step(model, src, tgt_frames, cfg, opts)
            except TrainingError as exc:
                exc.last_good = best if np.isfinite(best_eer) else last_good
                raise
            history.record_step(metrics)
        eer = validation_eer(model, validation)
        history.epochs.append((epoch, eer))
        log.info("%s epoch %d val_eer %.4f", cfg.gan_variant.name, epoch, eer)
        if eer < best_eer:
            best, best_eer, since_best = model.copy(), eer, 0
            history.best_epoch = epoch
        else:
            since_best += 1
        if since_best >= cfg.patience:
            break
    return best, history
