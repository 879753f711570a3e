import json

import pytest

from ganspk.cli import CliError, RunConfig, config_text, main, parse_config
from ganspk.evaluation import Score, Trial, compute_eer, read_scores, read_trials, write_scores, write_trials

SMALL = {
    "synth": {"num_source_speakers": 3, "num_target_speakers": 3, "recordings_per_speaker": 7,
              "frames_per_recording": [40, 50]},
    "network": {"encoder_hidden": [6], "residual_blocks": 0, "attention_hidden": 4,
                "post_pool_widths": [8, 8], "embedding_dim": 4, "disc_widths": [4]},
    "trainer": {"batch_size": 6, "pretrain_epochs": 1, "max_epochs": 1, "samples_per_recording": 2,
                "chunk_frames_min": 20, "chunk_frames_max": 30},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    r = root / "run"
    assert main(["gen-data", "--run", str(r), "--config", str(cfg), "--seed", "2"]) == 0
    assert main(["pretrain", "--run", str(r)]) == 0
    return r


def test_config_round_trip():
    cfg = parse_config(json.dumps(SMALL))
    assert config_text(parse_config(config_text(cfg))) == config_text(cfg)
    assert parse_config("") == RunConfig()


@pytest.mark.parametrize("text", ['{"extra": {}}', '{"synth": {"nope": 1}}', '{"network": {"nope": 1}}',
                                  '{"trainer": {"nope": 1}}', "[1]", "{bad json"])
def test_config_errors(text):
    with pytest.raises(CliError):
        parse_config(text)


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--variant", "wgan"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1


def test_data_error_exit_code(tmp_path, capsys):
    assert main(["pretrain", "--run", str(tmp_path / "empty")]) == 2
    assert "pretrain" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text('{"synth": {"bogus": 3}}')
    assert main(["gen-data", "--run", str(tmp_path / "x"), "--config", str(bad)]) == 2
    assert not (tmp_path / "x").exists()


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_numerical_error_exit_code(run, tmp_path, capsys):
    cfg = json.loads((run / "config.json").read_text())
    cfg["trainer"]["adv_lr"] = 1e200
    cfg["trainer"]["variant"] = "lsgan"
    path = tmp_path / "huge.json"
    path.write_text(json.dumps(cfg))
    assert main(["train", "--run", str(run), "--config", str(path), "--variant", "lsgan"]) == 3
    assert "numerical" in capsys.readouterr().err
    # restore the run's echoed config
    (run / "config.json").write_text(config_text(parse_config(json.dumps(SMALL)).with_seed(2)))


def test_eer_perfect_fixture(tmp_path, capsys):
    write_trials([Trial("a", "b", True), Trial("c", "d", True), Trial("a", "c", False),
                  Trial("b", "d", False)], tmp_path / "t")
    write_scores([Score("a", "b", 0.9), Score("c", "d", 0.8), Score("a", "c", 0.1), Score("b", "d", 0.2)],
                 tmp_path / "s")
    assert main(["eer", "--run", str(tmp_path), "--scores", str(tmp_path / "s"),
                 "--trials", str(tmp_path / "t")]) == 0
    assert capsys.readouterr().out.strip() == "0.0000"


def test_two_variants_distinct_outputs(run):
    assert main(["train", "--run", str(run), "--variant", "gradrev"]) == 0
    assert main(["train", "--run", str(run), "--variant", "sgan"]) == 0
    assert (run / "gradrev.asem").read_bytes() != (run / "sgan.asem").read_bytes()
    assert (run / "gradrev.history").read_text() != (run / "sgan.history").read_text()


def test_extract_score_fuse_report(run, capsys):
    assert main(["train", "--run", str(run), "--variant", "lsgan", "--aux"]) == 0
    for m in ("lsgan_aux", "pretrained"):
        assert main(["extract", "--run", str(run), "--model", str(run / f"{m}.asem")]) == 0
        assert main(["score", "--run", str(run), "--embeddings", str(run / f"{m}.emb")]) == 0
    s = run / "lsgan_aux.scores"
    assert main(["fuse", "--run", str(run), str(s), str(s), str(s), "--out", str(run / "same.scores")]) == 0
    assert (run / "same.scores").read_bytes() == s.read_bytes()
    capsys.readouterr()

    assert main(["report", "--run", str(run)]) == 0
    txt = (run / "report.txt").read_text()
    assert txt.splitlines()[0].split() == ["model", "classifier", "eer_source", "eer_target", "eer_pooled", "probe"]
    rows = {line.split(",")[0]: line.split(",") for line in (run / "report.csv").read_text().splitlines()[1:]}
    trials = read_trials(run / "test.trials")
    for name in ("lsgan_aux", "pretrained", "same"):
        capsys.readouterr()
        main(["eer", "--run", str(run), "--scores", str(run / f"{name}.scores")])
        printed = capsys.readouterr().out.strip()
        assert f"{float(rows[name][4]):.4f}" == printed
        assert float(rows[name][4]) == compute_eer(read_scores(run / f"{name}.scores"), trials)
        assert rows[name][1] == "COSINE"
    assert 0.0 <= float(rows["pretrained"][5]) <= 1.0


def test_commands_idempotent(run):
    before = (run / "pretrained.asem").read_bytes()
    assert main(["pretrain", "--run", str(run)]) == 0
    assert (run / "pretrained.asem").read_bytes() == before


def test_help_lists_every_command(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("gen-data", "pretrain", "train", "extract", "score", "eer", "fuse", "probe", "report"):
        assert cmd in out
