"""Verification back end: extraction, cosine scoring, EER, score fusion, domain probe."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .network import ModelState, SOURCE, TARGET, embed
from .optim import optimizer_step, rmsprop
from .synthdata import Corpus


class EvalError(ValueError):
    pass


class Trial(NamedTuple):
    enroll: str
    test: str
    target: bool


class Score(NamedTuple):
    enroll: str
    test: str
    score: float


TrialList = list  # list[Trial]
ScoreSet = list   # list[Score]


class EmbeddingTable:
    """Recording id -> unit-norm embedding (normalized on insertion)."""

    def __init__(self, items: Mapping[str, np.ndarray] | None = None):
        self._vecs: dict[str, np.ndarray] = {}
        for k, v in (items or {}).items():
            self[k] = v

    def __setitem__(self, key: str, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64).ravel()
        norm = np.linalg.norm(vec)
        if not np.isfinite(norm) or norm == 0.0:
            raise EvalError(f"embedding for {key!r} has zero or non-finite norm")
        self._vecs[key] = vec / norm

    def __getitem__(self, key: str) -> np.ndarray:
        return self._vecs[key]

    def __contains__(self, key) -> bool:
        return key in self._vecs

    def __len__(self) -> int:
        return len(self._vecs)

    def keys(self):
        return self._vecs.keys()

    def items(self):
        return self._vecs.items()

    def matrix(self, ids: Sequence[str]) -> np.ndarray:
        return np.stack([self._vecs[i] for i in ids])


def extract(corpus: Corpus, model: ModelState) -> EmbeddingTable:
    """Embed every full recording with E in inference mode."""
    pv = model.values()
    table = EmbeddingTable()
    for rec in corpus:
        if rec.frames.shape[0] == 0:
            raise EvalError(f"recording {rec.id} has zero frames")
        emb = embed(pv, rec.frames[None], model.config, model.bn, train=False)
        table[rec.id] = emb.data[0]
    return table


def make_trials(corpus: Corpus, max_nontarget: int | None = None, seed: int = 0) -> TrialList:
    """All unordered recording pairs of ``corpus``; optionally subsample nontargets."""
    recs = list(corpus)
    pairs = [Trial(a.id, b.id, a.speaker == b.speaker) for a, b in itertools.combinations(recs, 2)]
    if max_nontarget is not None:
        tgt = [t for t in pairs if t.target]
        non = [t for t in pairs if not t.target]
        if len(non) > max_nontarget:
            keep = np.sort(np.random.default_rng(seed).choice(len(non), max_nontarget, replace=False))
            non = [non[i] for i in keep]
        keep_set = set(tgt) | set(non)
        pairs = [t for t in pairs if t in keep_set]
    return pairs


def score_trials(trials: TrialList, table: EmbeddingTable) -> ScoreSet:
    """Cosine similarity of unit embeddings; higher means same speaker."""
    missing = sorted({i for t in trials for i in (t.enroll, t.test) if i not in table})
    if missing:
        raise EvalError(f"embeddings missing for ids: {', '.join(missing)}")
    return [Score(t.enroll, t.test, float(np.dot(table[t.enroll], table[t.test]))) for t in trials]


def _split_scores(scores: ScoreSet, trials: TrialList) -> tuple[np.ndarray, np.ndarray]:
    if len(scores) != len(trials):
        raise EvalError(f"{len(scores)} scores for {len(trials)} trials")
    tgt, non = [], []
    for s, t in zip(scores, trials):
        if (s.enroll, s.test) != (t.enroll, t.test):
            raise EvalError(f"score ({s.enroll}, {s.test}) not aligned with trial ({t.enroll}, {t.test})")
        (tgt if t.target else non).append(s.score)
    return np.asarray(tgt, dtype=np.float64), np.asarray(non, dtype=np.float64)


def eer_from_arrays(target_scores, nontarget_scores) -> float:
    """Equal error rate; a trial is accepted iff score >= threshold.

    The ROC is traced over the sorted unique scores (plus +inf) and the
    FAR/FRR crossing is linearly interpolated between adjacent points.
    """
    tgt = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if tgt.size == 0 or non.size == 0:
        raise EvalError("EER needs at least one target and one nontarget trial")
    thr = np.unique(np.concatenate([tgt, non]))
    frr = np.append(np.searchsorted(tgt, thr, side="left") / tgt.size, 1.0)
    far = np.append((non.size - np.searchsorted(non, thr, side="left")) / non.size, 0.0)
    diff = frr - far
    i = int(np.argmax(diff >= 0.0))
    if diff[i] == 0.0:
        return float(far[i])
    alpha = -diff[i - 1] / (diff[i] - diff[i - 1])
    return float(far[i - 1] + alpha * (far[i] - far[i - 1]))


def compute_eer(scores: ScoreSet, trials: TrialList) -> float:
    tgt, non = _split_scores(scores, trials)
    return eer_from_arrays(tgt, non)


def fuse(score_sets: Sequence[ScoreSet]) -> ScoreSet:
    """Unweighted per-trial mean; exact for identical inputs and order-independent."""
    if not score_sets:
        raise EvalError("fuse needs at least one score set")
    first = score_sets[0]
    for other in score_sets[1:]:
        if len(other) != len(first) or any((a.enroll, a.test) != (b.enroll, b.test)
                                           for a, b in zip(first, other)):
            raise EvalError("score sets are not aligned to the same trial list")
    out = []
    for i, s in enumerate(first):
        vals = [ss[i].score for ss in score_sets]
        base = min(vals)
        out.append(Score(s.enroll, s.test, base + math.fsum(v - base for v in vals) / len(vals)))
    return out


# domain probe --------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 32
    steps: int = 300
    lr: float = 0.01
    train_fraction: float = 0.7
    seed: int = 0


def domain_probe(source_embeddings, target_embeddings, probe_cfg: ProbeConfig = ProbeConfig()) -> float:
    """Held-out accuracy of a fresh small classifier predicting the domain.

    Domains are balanced by subsampling the larger one, then split
    per-domain into train/test parts.
    """
    xs = np.asarray(source_embeddings, dtype=np.float64)
    xt = np.asarray(target_embeddings, dtype=np.float64)
    ns, nt = len(xs), len(xt)
    if min(ns, nt) < 20:
        raise EvalError("domain probe needs >= 20 embeddings per domain")
    if max(ns, nt) > 10 * min(ns, nt):
        raise EvalError(f"domain imbalance {ns}:{nt} exceeds 10:1")
    rng = np.random.default_rng(probe_cfg.seed)
    n = min(ns, nt)
    xs = xs[np.sort(rng.permutation(ns)[:n])]
    xt = xt[np.sort(rng.permutation(nt)[:n])]
    n_train = int(round(probe_cfg.train_fraction * n))
    # one split permutation for both domains keeps the probe symmetric in its arguments
    perm = rng.permutation(n)
    x_train = np.concatenate([xs[perm[:n_train]], xt[perm[:n_train]]])
    y_train = np.concatenate([np.ones(n_train), np.zeros(n_train)])
    x_test = np.concatenate([xs[perm[n_train:]], xt[perm[n_train:]]])
    y_test = np.concatenate([np.ones(n - n_train), np.zeros(n - n_train)])

    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0) + 1e-8
    x_train = (x_train - mu) / sd
    x_test = (x_test - mu) / sd

    d = x_train.shape[1]
    params = {
        "W1": rng.normal(0.0, np.sqrt(1.0 / d), size=(d, probe_cfg.hidden)),
        "b1": np.zeros(probe_cfg.hidden),
        "W2": rng.normal(0.0, np.sqrt(1.0 / probe_cfg.hidden), size=(probe_cfg.hidden, 1)),
        "b2": np.zeros(1),
    }
    sign = 2.0 * y_train - 1.0

    def logits(pv, x):
        h = ad.elu(ad.matmul(x, pv["W1"]) + pv["b1"])
        return ad.reshape(ad.matmul(h, pv["W2"]) + pv["b2"], (x.shape[0],))

    opt = rmsprop(probe_cfg.lr)
    for _ in range(probe_cfg.steps):
        pv = {k: ad.Value(v, requires_grad=True) for k, v in params.items()}
        loss = -ad.mean(ad.log_sigmoid(logits(pv, x_train) * sign))
        loss.backward()
        params = optimizer_step(opt, params, {k: pv[k].grad for k in params})
    pv = {k: ad.Value(v) for k, v in params.items()}
    pred = (logits(pv, x_test).data > 0).astype(np.float64)
    return float(np.mean(pred == y_test))


def probe_table(table: EmbeddingTable, corpus: Corpus, probe_cfg: ProbeConfig = ProbeConfig()) -> float:
    src = [table[r.id] for r in corpus if r.domain == SOURCE]
    tgt = [table[r.id] for r in corpus if r.domain == TARGET]
    return domain_probe(np.array(src), np.array(tgt), probe_cfg)


# text formats --------------------------------------------------------------

def _f32_repr(x: float) -> str:
    return np.format_float_positional(np.float32(x), unique=True, trim="-")


def write_trials(trials: TrialList, path) -> None:
    lines = [f"{t.enroll}\t{t.test}\t{'target' if t.target else 'nontarget'}\n" for t in trials]
    Path(path).write_text("".join(lines))


def read_trials(path) -> TrialList:
    out, seen = [], set()
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
            raise EvalError(f"{path}:{n}: malformed trial line")
        key = (parts[0], parts[1])
        if key in seen:
            raise EvalError(f"{path}:{n}: duplicate trial {key}")
        seen.add(key)
        out.append(Trial(parts[0], parts[1], parts[2] == "target"))
    return out


def write_scores(scores: ScoreSet, path) -> None:
    lines = ["# polarity=similarity\n"] + [f"{s.enroll}\t{s.test}\t{s.score!r}\n" for s in scores]
    Path(path).write_text("".join(lines))


def read_scores(path) -> ScoreSet:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "# polarity=similarity":
        raise EvalError(f"{path}: missing '# polarity=similarity' header")
    out = []
    for n, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            score = float(parts[2])
        except (IndexError, ValueError):
            raise EvalError(f"{path}:{n}: malformed score line") from None
        if len(parts) != 3 or not math.isfinite(score):
            raise EvalError(f"{path}:{n}: malformed score line")
        out.append(Score(parts[0], parts[1], score))
    return out


def write_embeddings(table: EmbeddingTable, path) -> None:
    lines = [f"{k}\t{','.join(_f32_repr(x) for x in v)}\n" for k, v in table.items()]
    Path(path).write_text("".join(lines))


def read_embeddings(path) -> EmbeddingTable:
    table = EmbeddingTable()
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            key, vals = line.split("\t")
            vec = np.array([np.float32(v) for v in vals.split(",")], dtype=np.float64)
        except ValueError:
            raise EvalError(f"{path}:{n}: malformed embedding line") from None
        table[key] = vec
    return table


def trial_conditions(trials: TrialList, corpus: Corpus) -> dict[str, TrialList]:
    """Split trials into source / target / pooled by the domains of both sides."""
    dom = {r.id: r.domain for r in corpus}
    out: dict[str, TrialList] = {"source": [], "target": [], "pooled": list(trials)}
    for t in trials:
        if dom.get(t.enroll) == dom.get(t.test) == SOURCE:
            out["source"].append(t)
        elif dom.get(t.enroll) == dom.get(t.test) == TARGET:
            out["target"].append(t)
    return out


def subset_scores(scores: ScoreSet, trials: Iterable[Trial]) -> ScoreSet:
    keys = {(t.enroll, t.test) for t in trials}
    return [s for s in scores if (s.enroll, s.test) in keys]
