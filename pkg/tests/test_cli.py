import csv
import json
import subprocess
import sys

import pytest

from mrmp.cli import config_hash, main, parse_rates
from mrmp.training import DEFAULT_RATES

TINY = [
    "--synth-sequences", "30", "--synth-joints", "5", "--synth-frames", "10",
    "--epochs", "3", "--batch", "10", "--filters", "4", "--hidden", "5",
]


def run(capsys, *argv):
    try:
        code = main(list(argv))
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--rates", "0.5,0.8", "--out", str(out), *TINY]) == 0
    return out


def test_rate_grammar():
    assert parse_rates("0.5:0.98:0.05,0.98") == DEFAULT_RATES
    assert parse_rates("0.5:0.99:0.01")[-1] == 0.99 and len(parse_rates("0.5:0.99:0.01")) == 50
    assert parse_rates("0.3") == (0.3,)
    assert parse_rates("0.5,0.5,0.6") == (0.5, 0.6)


def test_config_hash_is_git_blob():
    assert config_hash({}) == "9e26dfeeb6e641a33dae4961196235bdb965b21b"


def test_unknown_prior_lists_choices(capsys):
    code, _, err = run(capsys, "train", "--prior", "cauchy")
    assert code == 2 and "uniform" in err and "laplace" in err


def test_unsorted_rates_rejected(capsys):
    code, _, err = run(capsys, "train", "--rates", "0.8,0.5")
    assert code == 2 and "increasing" in err
    code, _, _ = run(capsys, "train", "--rates", "0.5,1.0")
    assert code == 2


def test_single_rate_modes(capsys):
    code, _, err = run(capsys, "train", "--mode", "srmp", "--rates", "0.5,0.8")
    assert code == 2 and "single rate" in err


def test_bad_precision(capsys, monkeypatch):
    monkeypatch.setenv("MRMP_PRECISION", "f16")
    code, _, err = run(capsys, "gradcheck")
    assert code == 2 and "MRMP_PRECISION" in err


def test_train_outputs(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"model.mrmp", "model.mrmp.json", "history.csv", "summary.csv", "manifest.json"} <= names
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["config_hash"] == config_hash(manifest["config"])
    assert manifest["config"]["rates"] == [0.5, 0.8]


def test_train_is_reproducible(trained, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--rates", "0.5,0.8", "--out", str(tmp_path), *TINY)
    assert code == 0 and out.count("rate=") == 2
    for name in ("model.mrmp", "history.csv", "summary.csv"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


@pytest.mark.parametrize("mode", ["srmp", "mp", "l1", "dense"])
def test_other_modes(mode, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--mode", mode, "--finetune-epochs", "1", "--out", str(tmp_path), *TINY)
    assert code == 0 and out.count("rate=") == 1


def test_extrapolate_extremes(trained, capsys):
    code, out, err = run(capsys, "extrapolate", "--checkpoint", str(trained), "--rate", "0")
    row = json.loads(out)
    assert code == 0 and "outside the trained range" in err
    assert row["active_params"] == row["prunable_params"] and row["observed_rate"] <= 0.01
    code, out, err = run(capsys, "extrapolate", "--checkpoint", str(trained), "--rate", "0.999", "--data", "train")
    row = json.loads(out)
    assert code == 0 and "warning" in err
    assert 0 <= row["accuracy"] <= 1


def test_extrapolate_csv(trained, tmp_path, capsys):
    path = tmp_path / "x.csv"
    code, _, _ = run(capsys, "extrapolate", "--checkpoint", str(trained), "--rate", "0.6", "--out", str(path))
    rows = list(csv.reader(open(path)))
    assert code == 0 and rows[0][:2] == ["rate", "threshold"] and len(rows) == 2
    code, _, err = run(capsys, "extrapolate", "--checkpoint", str(trained), "--rate", "0.65")
    assert code == 0 and err == ""


def test_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "extrapolate", "--checkpoint", str(tmp_path / "none"), "--rate", "0.5")
    assert code == 1 and err.startswith("error:")


def test_sweep(trained, tmp_path, capsys):
    path = tmp_path / "s.csv"
    code, _, _ = run(capsys, "sweep", "--checkpoint", str(trained), "--grid", "0.5:0.8:0.05", "--out", str(path))
    assert code == 0
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 7
    observed = [float(r["observed_rate"]) for r in rows]
    assert observed == sorted(observed)
    summary = {float(r["rate"]): float(r["accuracy"]) for r in csv.DictReader(open(trained / "summary.csv"))}
    seen = [r for r in rows if r["seen"] == "1"]
    assert [float(r["rate"]) for r in seen] == [0.5, 0.8]
    for r in seen:
        assert abs(float(r["accuracy"]) - summary[float(r["rate"])]) <= 1e-6


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", "3")
    assert code == 0 and "31/31 passed" in out
    code, _, err = run(capsys, "gradcheck", "--inject", "relu")
    assert code == 1 and "failing operators: relu" in err


def test_float32_train(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("MRMP_PRECISION", "f32")
    code, _, _ = run(capsys, "train", "--rates", "0.5", "--out", str(tmp_path), *TINY)
    assert code == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["config"]["precision"] == "float32"


def test_synth_then_train_on_file(tmp_path, capsys):
    data = tmp_path / "d.jsonl"
    code, out, _ = run(capsys, "synth", "--out", str(data), "--synth-sequences", "12", "--synth-joints", "5", "--synth-frames", "8")
    assert code == 0 and "12 sequences" in out
    assert len(data.read_text().splitlines()) == 12
    code, _, _ = run(capsys, "train", "--data", str(data), "--rates", "0.5", "--epochs", "1", "--batch", "4",
                     "--filters", "3", "--hidden", "0", "--out", str(tmp_path / "r"))
    assert code == 0


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mrmp", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "extrapolate" in proc.stdout
