"""Command-line pipeline: ``ganspk <command> --run DIR ...``.

Every command reads and writes inside one run directory and echoes the
effective configuration to ``DIR/config.json``. Exit codes: 0 success,
1 usage error, 2 data or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .evaluation import (EvalError, ProbeConfig, compute_eer, domain_probe, extract, fuse, make_trials, read_embeddings,
                         read_scores, read_trials, score_trials, subset_scores, trial_conditions,
                         write_embeddings, write_scores, write_trials)
from .experiment import TEST_OFFSET, VAL_OFFSET
from .losses import KINDS, GanVariant
from .network import (SOURCE, TARGET, NetworkConfig, init_model, load_checkpoint, save_checkpoint,
                      with_aux_head)
from .synthdata import SynthSpec, generate, read_corpus, write_corpus
from .trainer import TrainerConfig, TrainingError, pretrain, train

log = logging.getLogger("ganspk")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SECTIONS = ("synth", "network", "trainer")


class CliError(Exception):
    def __init__(self, stage: str, message: str, code: int = EXIT_DATA):
        self.stage, self.code = stage, code
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# run configuration ---------------------------------------------------------

@dataclass
class RunConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    network: dict = field(default_factory=dict)  # NetworkConfig overrides
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def network_config(self) -> NetworkConfig:
        base = {"frame_dim": self.synth.frame_dim, "num_speakers": self.synth.num_source_speakers}
        return NetworkConfig.from_dict({**base, **self.network})

    def to_dict(self) -> dict:
        return {"synth": self.synth.to_dict(), "network": self.network_config().to_dict(),
                "trainer": self.trainer.to_dict()}

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        return RunConfig(dataclasses.replace(self.synth, seed=seed), dict(self.network),
                         dataclasses.replace(self.trainer, seed=seed))


def config_text(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def parse_config(text: str) -> RunConfig:
    """Parse a JSON run config; every key is optional, unknown keys are errors."""
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise CliError("config", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise CliError("config", "top level must be an object")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise CliError("config", f"unknown config sections: {', '.join(unknown)}")
    try:
        cfg = RunConfig(SynthSpec.from_dict(raw.get("synth", {})), dict(raw.get("network", {})),
                        TrainerConfig.from_dict(raw.get("trainer", {})))
        cfg.network_config()
    except (TypeError, ValueError) as exc:
        raise CliError("config", str(exc)) from None
    return cfg


def load_run_config(args) -> RunConfig:
    run = Path(args.run)
    if args.config:
        path = Path(args.config)
    elif (run / "config.json").exists():
        path = run / "config.json"
    else:
        path = None
    if path is not None and not path.exists():
        raise CliError("config", f"config file not found: {path}")
    cfg = parse_config(path.read_text()) if path is not None else RunConfig()
    return cfg.with_seed(args.seed)


def _echo(run: Path, cfg: RunConfig) -> None:
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(config_text(cfg))


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise CliError(stage, f"missing input file {path}")
    return path


def _variant_file(variant: GanVariant) -> str:
    return variant.name.replace("+", "_")


# commands ------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> None:
    run = Path(args.run)
    parts = {
        "": generate(cfg.synth),
        "validation": generate(dataclasses.replace(cfg.synth, seed=cfg.synth.seed + VAL_OFFSET), "val-"),
        "test": generate(dataclasses.replace(cfg.synth, seed=cfg.synth.seed + TEST_OFFSET), "test-"),
    }
    _echo(run, cfg)
    src, tgt = parts[""]
    write_corpus(src, run / "source.asec")
    write_corpus(tgt, run / "target.asec")
    for name in ("validation", "test"):
        corpus = parts[name][0] + parts[name][1]
        write_corpus(corpus, run / f"{name}.asec")
        write_trials(make_trials(corpus), run / f"{name}.trials")
    print(f"wrote {len(src)} source, {len(tgt)} target recordings to {run}")


def cmd_pretrain(args, cfg: RunConfig) -> None:
    run = Path(args.run)
    source = read_corpus(_need(run / "source.asec", "pretrain"))
    net = cfg.network_config()
    if max(source.speakers) >= net.num_speakers:
        raise CliError("pretrain", f"source has speaker ids up to {max(source.speakers)} "
                                   f"but num_speakers is {net.num_speakers}")
    _echo(run, cfg)
    model, hist = pretrain(init_model(net, cfg.trainer.seed), source, cfg.trainer)
    save_checkpoint(model, run / "pretrained.asem")
    (run / "pretrained.history").write_text(hist.to_text())
    print(f"pretrained {cfg.trainer.pretrain_epochs} epochs -> {run / 'pretrained.asem'}")


def cmd_train(args, cfg: RunConfig) -> None:
    run = Path(args.run)
    variant = GanVariant(args.variant, args.aux)
    tcfg = dataclasses.replace(cfg.trainer, variant=variant.kind, aux=variant.aux)
    init = Path(args.init) if args.init else run / "pretrained.asem"
    model = load_checkpoint(_need(init, "train"))
    source = read_corpus(_need(run / "source.asec", "train"))
    target = read_corpus(_need(run / "target.asec", "train"))
    validation = (read_corpus(_need(run / "validation.asec", "train")),
                  read_trials(_need(run / "validation.trials", "train")))
    if variant.aux:
        model = with_aux_head(model, tcfg.seed)
    cfg = RunConfig(cfg.synth, cfg.network, tcfg)
    _echo(run, cfg)
    name = _variant_file(variant)
    try:
        best, hist = train(model, source, target, validation, tcfg)
    except TrainingError as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, run / f"{name}.last_good.asem")
        raise
    save_checkpoint(best, run / f"{name}.asem")
    (run / f"{name}.history").write_text(hist.to_text())
    best_eer = min(e for _, e in hist.epochs)
    print(f"{variant.name}: best epoch {hist.best_epoch} val_eer {best_eer:.4f} -> {run / name}.asem")


def cmd_extract(args, cfg: RunConfig) -> None:
    run = Path(args.run)
    model = load_checkpoint(_need(Path(args.model), "extract"))
    corpus = read_corpus(_need(Path(args.corpus) if args.corpus else run / "test.asec", "extract"))
    out = Path(args.out) if args.out else run / (Path(args.model).stem + ".emb")
    table = extract(corpus, model)
    write_embeddings(table, out)
    print(f"{len(table)} embeddings -> {out}")


def cmd_score(args, cfg: RunConfig) -> None:
    run = Path(args.run)
    table = read_embeddings(_need(Path(args.embeddings), "score"))
    trials = read_trials(_need(Path(args.trials) if args.trials else run / "test.trials", "score"))
    out = Path(args.out) if args.out else run / (Path(args.embeddings).stem + ".scores")
    write_scores(score_trials(trials, table), out)
    print(f"{len(trials)} scores -> {out}")


def _condition_scores(scores, trials, corpus_path, condition):
    if condition == "pooled":
        return subset_scores(scores, trials), trials
    corpus = read_corpus(_need(corpus_path, "eer"))
    picked = trial_conditions(trials, corpus)[condition]
    return subset_scores(scores, picked), picked


def cmd_eer(args, cfg: RunConfig) -> None:
    run = Path(args.run)
    scores = read_scores(_need(Path(args.scores), "eer"))
    trials = read_trials(_need(Path(args.trials) if args.trials else run / "test.trials", "eer"))
    corpus = Path(args.corpus) if args.corpus else run / "test.asec"
    scores, trials = _condition_scores(scores, trials, corpus, args.condition)
    print(f"{compute_eer(scores, trials):.4f}")


def cmd_fuse(args, cfg: RunConfig) -> None:
    sets = [read_scores(_need(Path(p), "fuse")) for p in args.scores]
    out = Path(args.out) if args.out else Path(args.run) / "fused.scores"
    write_scores(fuse(sets), out)
    print(f"fused {len(sets)} score sets -> {out}")


def _probe(emb_path: Path, corpus_path: Path, seed: int) -> float:
    table = read_embeddings(emb_path)
    corpus = read_corpus(corpus_path)
    missing = [r.id for r in corpus if r.id not in table]
    if missing:
        raise EvalError(f"{len(missing)} corpus recordings have no embedding, e.g. {missing[0]}")
    src = [table[r.id] for r in corpus if r.domain == SOURCE]
    tgt = [table[r.id] for r in corpus if r.domain == TARGET]
    return domain_probe(src, tgt, ProbeConfig(seed=seed))


def cmd_probe(args, cfg: RunConfig) -> None:
    corpus = Path(args.corpus) if args.corpus else Path(args.run) / "test.asec"
    acc = _probe(_need(Path(args.embeddings), "probe"), _need(corpus, "probe"), cfg.trainer.seed)
    print(f"{acc:.4f}")


def report_rows(run: Path, seed: int = 0) -> list[dict]:
    trials = read_trials(_need(run / "test.trials", "report"))
    corpus = read_corpus(_need(run / "test.asec", "report"))
    cond = trial_conditions(trials, corpus)
    rows = []
    for path in sorted(run.glob("*.scores")):
        scores = read_scores(path)
        row = {"model": path.stem, "classifier": "COSINE"}
        for c in ("source", "target", "pooled"):
            row[f"eer_{c}"] = compute_eer(subset_scores(scores, cond[c]), cond[c]) if cond[c] else float("nan")
        emb = run / f"{path.stem}.emb"
        row["probe"] = float("nan")
        if emb.exists():
            try:
                row["probe"] = _probe(emb, run / "test.asec", seed)
            except EvalError as exc:
                log.warning("no probe for %s: %s", path.stem, exc)
        rows.append(row)
    return rows


REPORT_FIELDS = ("model", "classifier", "eer_source", "eer_target", "eer_pooled", "probe")


def _fmt(v) -> str:
    return v if isinstance(v, str) else ("-" if v != v else f"{v:.4f}")


def cmd_report(args, cfg: RunConfig) -> None:
    run = Path(args.run)
    rows = report_rows(run, cfg.trainer.seed)
    if not rows:
        raise CliError("report", f"no *.scores files in {run}")
    widths = [max(len(f), *(len(_fmt(r[f])) for r in rows)) for f in REPORT_FIELDS]
    lines = ["  ".join(f.ljust(w) for f, w in zip(REPORT_FIELDS, widths))]
    lines += ["  ".join(_fmt(r[f]).ljust(w) for f, w in zip(REPORT_FIELDS, widths)) for r in rows]
    text = "\n".join(line.rstrip() for line in lines) + "\n"
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    (run / "report.txt").write_text(text)
    (run / "report.csv").write_text(buf.getvalue())
    sys.stdout.write(text)


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train, "extract": cmd_extract,
    "score": cmd_score, "eer": cmd_eer, "fuse": cmd_fuse, "probe": cmd_probe, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run", default="run", help="run directory (default: %(default)s)")
    common.add_argument("--config", help="JSON run config with synth/network/trainer sections "
                                         "(default: RUN/config.json if present, else built-in defaults)")
    common.add_argument("--seed", type=int, help="overrides synth.seed and trainer.seed")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="ganspk", description="Adversarial domain-invariant speaker embeddings on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate train/validation/test corpora and trial lists")
    sub.add_parser("pretrain", parents=[common], help="pretrain E and C on RUN/source.asec")
    t = sub.add_parser("train", parents=[common], help="adversarial training of one GAN variant")
    t.add_argument("--variant", required=True, choices=KINDS)
    t.add_argument("--aux", action="store_true", help="add the auxiliary speaker head to D")
    t.add_argument("--init", help="starting checkpoint (default: RUN/pretrained.asem)")
    e = sub.add_parser("extract", parents=[common], help="embed every recording of a corpus")
    e.add_argument("--model", required=True)
    e.add_argument("--corpus", help="default: RUN/test.asec")
    e.add_argument("--out", help="default: RUN/<model stem>.emb")
    s = sub.add_parser("score", parents=[common], help="cosine-score a trial list")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--trials", help="default: RUN/test.trials")
    s.add_argument("--out", help="default: RUN/<embeddings stem>.scores")
    q = sub.add_parser("eer", parents=[common], help="print the EER of a score file")
    q.add_argument("--scores", required=True)
    q.add_argument("--trials", help="default: RUN/test.trials")
    q.add_argument("--condition", choices=("pooled", "source", "target"), default="pooled")
    q.add_argument("--corpus", help="domain labels for --condition (default: RUN/test.asec)")
    f = sub.add_parser("fuse", parents=[common], help="average aligned score files")
    f.add_argument("scores", nargs="+")
    f.add_argument("--out", help="default: RUN/fused.scores")
    pr = sub.add_parser("probe", parents=[common], help="domain-probe accuracy of an embedding file")
    pr.add_argument("--embeddings", required=True)
    pr.add_argument("--corpus", help="default: RUN/test.asec")
    sub.add_parser("report", parents=[common], help="EER and probe table for every RUN/*.scores")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    stage = args.command
    try:
        cfg = load_run_config(args)
        COMMANDS[stage](args, cfg)
    except CliError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return exc.code
    except TrainingError as exc:
        print(f"error [{stage}/{exc.stage}]: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"error [{stage}]: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
