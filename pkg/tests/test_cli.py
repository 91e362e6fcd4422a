import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from ivmix.cli import main
from ivmix.evaluation import parse_comparison_csv
from ivmix.pipeline import MODELS, parse_results_csv
from ivmix.sim import ScenarioSpec, dump_scenario, read_stream, split_truth

URBAN = Path(__file__).parent.parent / "demos" / "scenarios" / "urban.ini"


def test_unknown_model_exits_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", "x.txt", "--model", "bogus", "-o", str(tmp_path / "o.csv")])
    assert exc.value.code == 2
    assert "invalid choice" in capsys.readouterr().err
    assert main(["sweep", "x.txt", "--models", "ivm,bogus"]) == 2


def test_unknown_flag_exits_2_as_a_process():
    proc = subprocess.run([sys.executable, "-m", "ivmix.cli", "run", "--frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr


def test_simulate_run_evaluate_120s_under_60s(tmp_path, capsys):
    stream, est, trace, series = (tmp_path / n for n in ("s.txt", "est.csv", "trace.txt", "ate.csv"))
    start = time.perf_counter()
    assert main(["simulate", str(URBAN), "-o", str(stream)]) == 0
    assert main(["run", str(stream), "--model", "ivm", "-o", str(est), "--trace", str(trace)]) == 0
    assert main(["evaluate", str(est), str(stream), "--series", str(series)]) == 0
    wall = time.perf_counter() - start
    assert wall < 60.0
    out = capsys.readouterr().out
    assert "121 epochs" in out and "mean ATE" in out
    arr = parse_results_csv(est.read_text())
    assert arr.shape == (121, 9) and np.all((arr[:, 7] >= 1) & (arr[:, 7] <= 8))
    assert trace.read_text().count("epoch ") == 121
    assert len(series.read_text().splitlines()) == 122
    _, gt = split_truth(read_stream(stream.read_text()))
    assert len(gt) == 121


def test_seed_overrides_scenario_seed(tmp_path):
    a, b, c = (tmp_path / n for n in ("a.txt", "b.txt", "c.txt"))
    spec = tmp_path / "spec.ini"
    spec.write_text(dump_scenario(ScenarioSpec(duration=5)))
    assert main(["simulate", str(spec), "-o", str(a), "--seed", "4"]) == 0
    assert main(["simulate", str(spec), "-o", str(b), "--seed", "4"]) == 0
    assert main(["simulate", str(spec), "-o", str(c), "--seed", "5"]) == 0
    assert a.read_text() == b.read_text() != c.read_text()


def test_sweep_one_row_per_model(tmp_path, capsys):
    spec, stream, table = tmp_path / "spec.ini", tmp_path / "s.txt", tmp_path / "t.csv"
    spec.write_text(dump_scenario(ScenarioSpec(duration=15)))
    assert main(["simulate", str(spec), "-o", str(stream)]) == 0
    assert main(["sweep", str(stream), "--jobs", "2", "-o", str(table)]) == 0
    comp = parse_comparison_csv(table.read_text())
    assert comp.models == list(MODELS) and comp.datasets == ["s"]
    text = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in text[2:]] == list(MODELS)


def test_run_with_config_file(tmp_path):
    spec, stream, cfg, est = (tmp_path / n for n in ("spec.ini", "s.txt", "cfg.ini", "e.csv"))
    spec.write_text(dump_scenario(ScenarioSpec(duration=10)))
    cfg.write_text("[pipeline]\nk_fixed = 2\n")
    main(["simulate", str(spec), "-o", str(stream)])
    assert main(["run", str(stream), "--model", "sm_em", "--config", str(cfg), "-o", str(est)]) == 0
    assert set(parse_results_csv(est.read_text())[:, 7]) == {2.0}


def test_error_paths_exit_1_with_one_line(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.txt"), "-o", str(tmp_path / "o.csv")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and err.count("\n") == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("[scenario]\nn_sats = 2\n")
    assert main(["simulate", str(bad), "-o", str(tmp_path / "s.txt")]) == 1
    # a stream without ground truth cannot be evaluated
    est = tmp_path / "e.csv"
    est.write_text("time,x,y,z,phi,delta,delta_dot,K,runtime_s\n")
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert main(["evaluate", str(est), str(empty)]) == 1
