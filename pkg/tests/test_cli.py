import json
import subprocess
import sys

import pytest

from sahp import cli
from sahp.hawkes import NumericalError
from sahp.simulation import save_spec, synthetic_spec

SMALL_TRAIN = ["--model-dim", "8", "--num-layers", "1", "--max-epochs", "1", "--learning-rate", "3e-3",
               "--warmup-steps", "5"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    save_spec(synthetic_spec(), d / "spec.json")
    assert cli.main(["simulate", "--spec", str(d / "spec.json"), "--horizon", "30", "--n", "30",
                     "--seed", "1", "--split", "0.6,0.2,0.2", "--out", str(d / "data.jsonl")]) == 0
    assert cli.main(["fit-hp", "--data", str(d / "data.jsonl"), "--out", str(d / "hp.json")]) == 0
    assert cli.main(["train", "--data", str(d / "data.jsonl"), "--out", str(d / "m.npz"), *SMALL_TRAIN]) == 0
    return d


def test_simulate_deterministic(tmp_path):
    save_spec(synthetic_spec(), tmp_path / "spec.json")
    outs = []
    for name in ("a.jsonl", "b.jsonl"):
        args = ["simulate", "--spec", str(tmp_path / "spec.json"), "--horizon", "100", "--n", "40",
                "--seed", "1", "--out", str(tmp_path / name)]
        assert cli.main(args) == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    cfg = json.loads((tmp_path / "a.jsonl.config.json").read_text())
    assert cfg["command"] == "simulate" and cfg["seed"] == 1 and cfg["horizon"] == 100.0


def test_unknown_subcommand_usage(capsys):
    assert cli.main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_console_script_exit_codes(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sahp.cli", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "sahp.cli", "evaluate", "--model", "ckpt",
                           "--data", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "r.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 3


def test_missing_data_exit_3(workspace, tmp_path):
    args = ["evaluate", "--model", str(workspace / "m.npz"), "--data", str(tmp_path / "missing.jsonl"),
            "--out", str(tmp_path / "r.json")]
    assert cli.main(args) == 3


def test_missing_required_option_exit_2():
    assert cli.main(["fit-hp"]) == 2


def test_malformed_data_exit_3(tmp_path):
    (tmp_path / "bad.jsonl").write_text('{"num_types": 1}\n{"events": [{"type": 0, "time": -1}]}\n')
    assert cli.main(["fit-hp", "--data", str(tmp_path / "bad.jsonl"), "--out", str(tmp_path / "p.json")]) == 3


def test_numeric_failure_exit_4(monkeypatch, tmp_path):
    def boom(cfg):
        raise NumericalError("non-finite loss")

    monkeypatch.setitem(cli.COMMANDS, "fit-hp", boom)
    assert cli.main(["fit-hp", "--data", "x", "--out", str(tmp_path / "p.json")]) == 4


def test_evaluate_predict_qq_attn(workspace):
    d = workspace
    data = str(d / "data.jsonl")
    for model in ("hp.json", "m.npz"):
        out = d / f"report_{model}.json"
        assert cli.main(["evaluate", "--model", str(d / model), "--data", data, "--spec",
                         str(d / "spec.json"), "--attention", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["nll_per_event"] > 0 and len(report["qq_pairs"]) == 2
        assert (report["attention_map"] is None) == (model == "hp.json")
        assert cli.main(["predict", "--model", str(d / model), "--data", data,
                         "--out", str(d / f"pred_{model}.csv")]) == 0
        assert cli.main(["qq", "--model", str(d / model), "--data", data, "--spec", str(d / "spec.json"),
                         "--out", str(d / f"qq_{model}.csv")]) == 0
    assert cli.main(["attn", "--model", str(d / "m.npz"), "--data", data, "--out", str(d / "attn.csv")]) == 0
    assert cli.main(["attn", "--model", str(d / "hp.json"), "--data", data, "--out", str(d / "x.csv")]) == 2
    assert (d / "hp.json.history.csv").read_text().startswith("iteration,nll_per_event")
    assert (d / "m.npz.history.csv").exists()


def test_config_file_and_flag_override(workspace, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 5, "horizon": 20.0, "seed": 3}))
    out = tmp_path / "d.jsonl"
    assert cli.main(["simulate", "--config", str(cfg), "--n", "7", "--out", str(out)]) == 0
    resolved = json.loads((tmp_path / "d.jsonl.config.json").read_text())
    assert resolved["n"] == 7 and resolved["horizon"] == 20.0 and resolved["seed"] == 3
    assert len(out.read_text().splitlines()) == 8
    # re-running from the resolved config reproduces the output
    out2 = tmp_path / "d2.jsonl"
    assert cli.main(["simulate", "--config", str(tmp_path / "d.jsonl.config.json"), "--out", str(out2)]) == 0
    assert out.read_bytes() == out2.read_bytes()
    cfg.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(out)]) == 2


def test_reproduce_rejects_zero_scale(tmp_path):
    with pytest.raises(ValueError):
        cli.reproduce_synthetic(0, 0.0, tmp_path)
    assert cli.main(["reproduce", "--scale", "0", "--out", str(tmp_path / "r")]) == 2


def test_reproduce_small_run_artifacts(tmp_path):
    paths = cli.reproduce_synthetic(seed=2, scale=0.04, out_dir=tmp_path / "r", horizon=40.0,
                                    model_dim=8, num_layers=1, max_epochs=1)
    for key in ("dataset", "hp", "sahp", "report", "qq", "config"):
        assert (tmp_path / "r").joinpath(paths[key].split("/")[-1]).exists()
    report = json.loads(open(paths["report"]).read())
    assert set(report["nll_per_event"]) == {"sahp", "hp", "true", "hp_minus_sahp"}


def test_workers_flag(tmp_path):
    assert cli.main(["simulate", "--workers", "0", "--out", str(tmp_path / "x.jsonl")]) == 2
