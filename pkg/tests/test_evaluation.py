from pathlib import Path

import numpy as np
import pytest

from ivmix.evaluation import AteReport, Comparison, ate, ate_of_results, compare, parse_comparison_csv, read_truth
from ivmix.pipeline import PipelineConfig, run
from ivmix.sim import ScenarioSpec, generate, merge_stream, split_truth

PUBLISHED = Path(__file__).parent / "data" / "published_comparison.csv"


def test_identical_trajectories_zero_ate():
    t = np.arange(5.0)
    xy = np.random.default_rng(0).normal(0, 10, (5, 2))
    rep = ate(t, xy, t, xy)
    assert rep.mean == 0.0 and rep.median == 0.0
    np.testing.assert_array_equal(rep.series, 0.0)


def test_three_four_five_offset_ignores_z():
    t = np.arange(4.0)
    truth = np.column_stack([t, -t, np.zeros(4)])
    est = truth + [3.0, 4.0, 0.0]
    est[:, 2] = [7.0, -100.0, 3.0, 1e6]
    rep = ate(t, est, t, truth)
    np.testing.assert_allclose(rep.series, 5.0)
    assert rep.mean == pytest.approx(5.0) and rep.median == pytest.approx(5.0)


def test_translation_invariance():
    rng = np.random.default_rng(1)
    t = np.arange(20.0)
    truth = rng.normal(0, 50, (20, 2))
    est = truth + rng.normal(0, 3, (20, 2))
    a = ate(t, est, t, truth)
    shift = np.array([1234.5, -987.0])
    b = ate(t, est + shift, t, truth + shift)
    np.testing.assert_allclose(b.series, a.series, rtol=1e-12, atol=1e-9)


def test_estimates_may_be_a_subset_of_truth():
    t = np.arange(10.0)
    truth = np.column_stack([t, t])
    rep = ate(t[::3], truth[::3] + [0.0, 1.0], t, truth)
    assert len(rep.series) == 4 and rep.mean == pytest.approx(1.0)


def test_missing_truth_epoch_names_timestamp():
    with pytest.raises(KeyError, match="2.5"):
        ate([0.0, 2.5], np.zeros((2, 2)), [0.0, 1.0, 2.0], np.zeros((3, 2)))
    with pytest.raises(KeyError):
        ate([0.0], np.zeros((1, 2)), [], np.zeros((0, 2)))


def test_empty_estimate():
    rep = ate([], np.zeros((0, 2)), [0.0], np.zeros((1, 2)), runtime=1.5)
    assert rep.mean == 0.0 and len(rep.series) == 0 and rep.runtime == 1.5


def test_ate_of_pipeline_results_uses_stream_truth():
    records, truth = generate(ScenarioSpec(duration=10, seed=2))
    meas, gt = split_truth(merge_stream(records, truth))
    results = run(meas, PipelineConfig(model="gaussian"))
    t, xy = read_truth(gt)
    rep = ate_of_results(results, t, xy)
    direct = np.hypot(*(np.array([[r.pose.x, r.pose.y] for r in results]) - truth.poses[:, :2]).T)
    np.testing.assert_allclose(rep.series, direct)
    assert rep.runtime == pytest.approx(sum(r.runtime for r in results))


def _report(mean, median=None, runtime=1.0):
    return AteReport(mean, mean if median is None else median, np.array([mean]), runtime)


def test_compare_rows_best_and_csv_round_trip():
    runs = {
        "gaussian": {"A": _report(10.0, 9.0, 2.0), "B": _report(4.0, runtime=3.0)},
        "ivm": {"A": _report(2.0, 1.5, 5.0), "B": _report(4.0, runtime=6.0)},
    }
    table = compare(runs)
    assert table.models == ["gaussian", "ivm"] and table.datasets == ["A", "B"]
    assert table.best("A") == "ivm"
    # ties go to the first model
    assert table.best("B") == "gaussian"
    back = parse_comparison_csv(table.to_csv())
    assert back == table
    assert back.to_csv() == table.to_csv()
    with pytest.raises(ValueError):
        parse_comparison_csv("a,b\n")


def test_identical_runs_give_identical_rows():
    rep = _report(3.25, 3.0, 7.0)
    rows = [line.split(",") for line in compare({"dcs": {"X": rep}, "cdce": {"X": rep}}).to_csv().splitlines()[1:]]
    # same dataset and numbers; only the model name and the best flag (first on ties) differ
    assert rows[0][1:5] == rows[1][1:5]
    assert (rows[0][5], rows[1][5]) == ("1", "0")


def test_published_table_rendering():
    table = parse_comparison_csv(PUBLISHED.read_text())
    assert len(table.models) == 7
    assert table.datasets == ["Chemnitz", "Berlin PP", "Berlin GM", "Frankfurt MT", "Frankfurt WT"]
    assert table.cells[("gaussian", "Chemnitz")][0] == 30.0
    assert table.cells[("ivm", "Chemnitz")][0] == 2.48
    assert np.isnan(table.cells[("ivm", "Chemnitz")][1])
    # best flags of the published table
    expected = {"Chemnitz": "sm_em", "Berlin PP": "ivm", "Berlin GM": "ivm", "Frankfurt MT": "ivm", "Frankfurt WT": "sm_vbi"}
    assert {d: table.best(d) for d in table.datasets} == expected
    rows = [line.split(",") for line in PUBLISHED.read_text().splitlines()[1:]]
    assert {(m, d) for m, d, *_, b in rows if b == "1"} == {(m, d) for d, m in expected.items()}
    text = table.to_text().splitlines()
    # two columns (ATE, Time) per dataset
    assert text[1].split() == ["Model"] + ["ATE", "[m]", "Time", "[s]"] * 5
    gauss = text[2].split()
    assert gauss[0] == "gaussian" and gauss[1:3] == ["30.000", "58.6"]
    ivm = text[-1].split()
    assert ivm[0] == "ivm" and ivm[1] == "2.480" and ivm[3] == "11.560*"
    assert "2.378*" in text[5]


def test_table_marks_missing_cells():
    table = Comparison(["a", "b"], ["X"], {("a", "X"): (1.0, 1.0, 2.0)})
    assert table.to_text().splitlines()[-1].split() == ["b", "-", "-"]
