import csv
import json
import subprocess
import sys

import pytest

from clvd import __version__
from clvd.cli import build_config, build_parser, run
from clvd.schedules import NoiseSchedule, sigma_at

TINY = {
    "model": {"d_model": 16, "n_heads": 2, "n_layers": 1, "vocab_size": 24, "max_src_len": 8, "max_tgt_len": 12,
              "feat_dim": 8},
    "synth": {"n_actions": 4, "n_objects": 4, "events_per_video": 2, "frames_per_event": 2, "feat_dim": 8,
              "n_train": 16, "n_val": 8},
    "epochs": 2, "warmup_epochs": 1, "batch_size": 8,
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_no_command_is_usage_error(capsys):
    assert run([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert run(["schedule", "--kind", "noise", "--frobnicate"]) == 1
    assert "unrecognized" in capsys.readouterr().err
    assert run(["schedule"]) == 1


def test_version(capsys):
    assert run(["--version"]) == 0
    out = capsys.readouterr().out
    assert __version__ in out and "checkpoint format 1" in out


def test_help_documents_precedence(capsys):
    assert run(["train", "--help"]) == 0
    assert "flags > --config JSON file > built-in defaults" in capsys.readouterr().out.replace("\n", " ").replace(
        "  ", " ")


def test_schedule_csv_matches_formula(tmp_path):
    out = tmp_path / "sched.csv"
    assert run(["schedule", "--kind", "noise", "--sigma-max", "0.3", "--e-max", "25", "--epochs", "30",
                "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 31
    for r in rows:
        assert float(r["value"]) == sigma_at(NoiseSchedule(0.3, 25), int(r["epoch"]))


def test_schedule_bad_values_exit_2(tmp_path):
    assert run(["schedule", "--kind", "dropout", "--delta-max", "1.5", "--out", str(tmp_path / "x.csv")]) == 2


def test_eval_captions_identity(tmp_path):
    pred = tmp_path / "p.json"
    pred.write_text(json.dumps({
        "v1": {"candidate": "a person opens the door .", "references": ["a person opens the door ."]},
        "v2": {"candidate": "a man cuts a box", "references": ["a man cuts a box", "someone cuts it"]},
    }))
    out = tmp_path / "report.csv"
    assert run(["eval-captions", "--pred", str(pred), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["video_id"] for r in rows] == ["v1", "v2", "corpus"]
    assert all(float(r["bleu4"]) == 1.0 and float(r["rouge_l"]) == 1.0 for r in rows)


def test_eval_captions_input_errors(tmp_path):
    assert run(["eval-captions", "--pred", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["eval-captions", "--pred", str(bad)]) == 2


def test_config_precedence(tiny_config):
    parser = build_parser()
    args = parser.parse_args(["train", "--config", str(tiny_config), "--epochs", "4", "--seed", "7", "--sigma", "0.2"])
    cfg = build_config(args)
    assert cfg.epochs == 4  # flag beats file
    assert cfg.batch_size == 8  # file beats default
    assert cfg.beta2 == 0.99  # default
    assert cfg.seed == 7 and cfg.synth.seed == 7
    assert cfg.noise == 0.2
    args = parser.parse_args(["train", "--config", str(tiny_config), "--noise", "off", "--e-max", "10"])
    cfg = build_config(args)
    assert cfg.noise is None and cfg.dropout.e_max == 10


def test_bad_config_file_exit_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": "many"}))
    assert run(["train", "--config", str(cfg), "--runs-dir", str(tmp_path)]) == 2
    cfg.write_text(json.dumps({"unknown_key": 1}))
    assert run(["train", "--config", str(cfg), "--runs-dir", str(tmp_path)]) == 2
    assert run(["train", "--config", str(tmp_path / "nope.json")]) == 2


def test_train_eval_roundtrip_and_determinism(tmp_path, tiny_config, capsys):
    runs = tmp_path / "runs"
    for name in ("a", "b"):
        assert run(["train", "--config", str(tiny_config), "--name", name, "--runs-dir", str(runs)]) == 0
    for f in ("log.csv", "model.ckpt", "report.json"):
        assert (runs / "a" / f).read_bytes() == (runs / "b" / f).read_bytes()
    cfg_a, cfg_b = (json.loads((runs / n / "config.json").read_text()) for n in "ab")
    assert cfg_a.pop("name") == "a" and cfg_b.pop("name") == "b" and cfg_a == cfg_b
    out = tmp_path / "r.json"
    assert run(["eval", "--run", str(runs / "a"), "--out", str(out)]) == 0
    evaluated = json.loads(out.read_text())
    stored = json.loads((runs / "a" / "report.json").read_text())
    assert evaluated["videos"] == stored["videos"]
    assert run(["eval", "--checkpoint", str(runs / "a" / "model.ckpt"), "--split", "train", "--ground-truth"]) == 0
    assert "bleu4=1.0000" in capsys.readouterr().out
    assert run(["eval", "--run", str(tmp_path)]) == 2


def test_synth_writes_jsonl(tmp_path, tiny_config):
    out = tmp_path / "data"
    assert run(["synth", "--config", str(tiny_config), "--out", str(out)]) == 0
    assert len((out / "train.jsonl").read_text().splitlines()) == 16
    assert len((out / "val.jsonl").read_text().splitlines()) == 8
    runs = tmp_path / "runs"
    assert run(["train", "--config", str(tiny_config), "--name", "t", "--runs-dir", str(runs), "--epochs", "1"]) == 0
    assert run(["eval", "--run", str(runs / "t"), "--data", str(out / "val.jsonl")]) == 0


def test_ablations_write_tables(tmp_path, tiny_config):
    noise_csv = tmp_path / "noise.csv"
    assert run(["ablate-noise", "--config", str(tiny_config), "--epochs", "1", "--sigmas", "0.1,0.5",
                "--seeds", "1,2", "--out", str(noise_csv)]) == 0
    rows = list(csv.reader(noise_csv.open()))
    assert rows[0][:2] == ["approach", "sigma"] and len(rows) == 4
    grid_csv = tmp_path / "grid.csv"
    assert run(["ablate-grid", "--config", str(tiny_config), "--epochs", "1", "--out", str(grid_csv),
                "--keep-runs", "--runs-dir", str(tmp_path / "runs")]) == 0
    assert len(grid_csv.read_text().splitlines()) == 9
    assert (tmp_path / "runs" / "run" / "grid-111-seed2019" / "log.csv").exists()
    assert run(["ablate-noise", "--config", str(tiny_config), "--sigmas", "x"]) == 2
    assert run(["ablate-grid", "--jobs", "0"]) == 1


def test_io_failure_exit_3(tmp_path, tiny_config):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert run(["train", "--config", str(tiny_config), "--epochs", "0", "--runs-dir", str(blocker)]) == 3


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "clvd.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and __version__ in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "clvd.cli"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr
