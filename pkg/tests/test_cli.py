import json
import subprocess
import sys

import pytest

from vfldp import cli

FAST = ["--epochs", "2", "--batch-size", "20", "--lr", "0.05", "--clip-window", "5"]


def test_calibrate(capsys):
    assert cli.main(["calibrate", "--epsilon", "1"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(26.28262, abs=1e-4)


def test_calibrate_bad_delta(capsys):
    assert cli.main(["calibrate", "--epsilon", "1", "--delta", "2"]) == 2
    assert "delta" in capsys.readouterr().err


def test_dp_without_epsilon_exits_2(tmp_path, capsys):
    assert cli.main(["run", "--mode", "vfl_dp", "--out", str(tmp_path)]) == 2
    assert "epsilon" in capsys.readouterr().err
    assert not list(tmp_path.iterdir())


def test_run_writes_results(tmp_path, capsys):
    code = cli.main(["run", "--dataset", "boston", "--mode", "vfl_nodp", "--out", str(tmp_path)] + FAST)
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["status"] == "completed"
    assert (tmp_path / "boston_n3_vfl_nodp.jsonl").exists()


def test_config_file_with_flag_override(tmp_path, capsys):
    conf = tmp_path / "exp.cfg"
    conf.write_text("dataset = energy\nmode = vfl_dp\nepsilon = 100\nepochs = 5\n")
    code = cli.main(["run", "--config", str(conf), "--epsilon", "50", "--out", str(tmp_path)] + FAST)
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["cell"] == "energy_n3_vfl_dp_eps50"
    assert summary["epochs_planned"] == 2


def test_budget_exhaustion_exits_4(tmp_path):
    code = cli.main(["run", "--epsilon", "1", "--dp-iterations", "3", "--out", str(tmp_path)] + FAST)
    assert code == 4
    lines = (tmp_path / "adult_n3_vfl_dp_eps1.jsonl").read_text().splitlines()
    summary = json.loads(lines[-1])
    assert summary["status"] == "budget_exhausted"
    assert summary["noised_updates"] == 3 * 3


def test_missing_full_dataset_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv("VFLDP_DATA_DIR", str(tmp_path))
    assert cli.main(["run", "--mode", "vfl_nodp", "--data-source", "full", "--out", str(tmp_path)]) == 2


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--dataset", "energy"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["max_rel_error"] < 1e-4


def test_gradcheck_impossible_tolerance_exits_3():
    assert cli.main(["gradcheck", "--dataset", "boston", "--rows", "4", "--tolerance", "1e-15"]) == 3


def test_sweep_cli(tmp_path, capsys):
    args = ["sweep", "--datasets", "boston", "--owners", "3", "--epsilons", "5", "--out", str(tmp_path)] + FAST
    assert cli.main(args) == 0
    first = json.loads(capsys.readouterr().out)
    assert (first["cells"], first["executed"], first["skipped"]) == (3, 3, 0)
    assert cli.main(args) == 0
    second = json.loads(capsys.readouterr().out)
    assert (second["executed"], second["skipped"]) == (0, 3)


def test_sweep_bad_list(tmp_path):
    assert cli.main(["sweep", "--owners", "three", "--out", str(tmp_path)]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "vfldp", "calibrate", "--epsilon", "100"],
                         capture_output=True, text=True, check=True)
    assert float(out.stdout) == pytest.approx(0.2628261, abs=1e-6)
