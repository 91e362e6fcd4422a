import math

import numpy as np
import pytest

from ivmix.core import OdometryMeasurement, PseudorangeMeasurement
from ivmix.factors import odometry_error_batch, pseudorange_error_batch
from ivmix.mixture import GaussianMixture
from ivmix.sim import (
    ELEVATION_MASK,
    NlosInterval,
    ScenarioSpec,
    Segment,
    TruthRecord,
    _truncated_offsets,
    dump_scenario,
    empirical_error_distribution,
    generate,
    load_scenario,
    merge_stream,
    offset_mixture,
    read_stream,
    satellite_constellation,
    split_truth,
    write_stream,
)

NLOS30 = GaussianMixture([1.0], [30.0], [0.1])


def noise_free(**kw):
    return ScenarioSpec(duration=30, sigma_pr=0.0, odo_sigma=(0, 0, 0, 0), clock_drift_walk=0.0, **kw)


def test_noise_free_pseudoranges_are_exact():
    records, truth = generate(noise_free())
    prs = [r for r in records if isinstance(r, PseudorangeMeasurement)]
    idx = np.searchsorted(truth.times, [r.time for r in prs])
    e, _ = pseudorange_error_batch(truth.poses[idx, :3], truth.clocks[idx, 0],
                                   np.array([r.sat_pos for r in prs]), np.array([r.range for r in prs]))
    assert np.max(np.abs(e)) < 1e-6
    # zero up to the rounding of ~2e7 m ranges
    np.testing.assert_allclose(empirical_error_distribution(truth, records), 0.0, atol=1e-6)


def test_noise_free_odometry_is_exact():
    records, truth = generate(noise_free())
    odo = [r for r in records if isinstance(r, OdometryMeasurement)]
    assert len(odo) == len(truth.times) - 1
    e, _, _ = odometry_error_batch(truth.poses[:-1], truth.poses[1:], np.array([o.as_array() for o in odo]))
    assert np.max(np.abs(e)) < 1e-9


def test_constellation_geometry():
    sats = satellite_constellation(8, 3)
    np.testing.assert_allclose(np.linalg.norm(sats, axis=1), 2.02e7)
    el = np.arcsin(sats[:, 2] / 2.02e7)
    assert np.all(el >= ELEVATION_MASK - 1e-12)


def test_trajectory_follows_script():
    spec = ScenarioSpec(duration=20, segments=(Segment(10, 5.0, 0.0), Segment(10, 5.0, 0.1)), start_yaw=0.5)
    _, truth = generate(spec)
    step = np.linalg.norm(np.diff(truth.poses[:, :2], axis=0), axis=1)
    np.testing.assert_allclose(step, 5.0, rtol=1e-3)
    assert truth.poses[10, 3] == pytest.approx(0.5)
    assert truth.poses[20, 3] == pytest.approx(1.5)


def test_determinism():
    spec = ScenarioSpec(duration=40, nlos=(NlosInterval(5, 30, 0.25, NLOS30),), seed=9)
    a = write_stream(merge_stream(*generate(spec)))
    b = write_stream(merge_stream(*generate(spec)))
    assert a == b
    c = write_stream(merge_stream(*generate(ScenarioSpec(duration=40, seed=10))))
    assert a != c


def test_truncated_normal_offset_mean():
    """Monte-Carlo oracle: truncating N(30, 10^2) at 0 barely moves its mean."""
    rng = np.random.default_rng(0)
    g = GaussianMixture([1.0], [30.0], [0.1])
    x = _truncated_offsets(g, 10000, rng)
    assert np.all(x >= 0)
    alpha = -30.0 / 10.0
    pdf, cdf = math.exp(-alpha ** 2 / 2) / math.sqrt(2 * math.pi), 0.5 * math.erfc(-alpha / math.sqrt(2))
    exact = 30.0 + 10.0 * pdf / (1 - cdf)
    assert abs(x.mean() - exact) < 1.0 and abs(x.mean() - 30.0) < 1.0


def test_nlos_schedule_fraction_and_interval():
    spec = ScenarioSpec(duration=100, nlos=(NlosInterval(20, 60, 0.25, NLOS30),), seed=1)
    records, truth = generate(spec)
    off = truth.nlos_offsets.reshape(len(truth.times), spec.n_sats)
    inside = (truth.times >= 20) & (truth.times < 60)
    assert np.all(off[~inside] == 0)
    np.testing.assert_array_equal((off[inside] > 0).sum(axis=1), 2)
    assert np.all(off >= 0)


def test_error_distribution_no_nlos_variance():
    records, truth = generate(ScenarioSpec(duration=200, sigma_pr=3.0, seed=4))
    e = empirical_error_distribution(truth, records)
    assert len(e) >= 1000
    assert e.var() == pytest.approx(9.0, rel=0.1)
    np.testing.assert_allclose(e, truth.noise, atol=1e-6)


def test_error_distribution_bimodal():
    spec = ScenarioSpec(duration=300, sigma_pr=2.0, nlos=(NlosInterval(0, 301, 0.4, NLOS30),), seed=2)
    records, truth = generate(spec)
    e = empirical_error_distribution(truth, records)
    near = lambda c: np.sum(np.abs(e - c) < 3.0)
    # two modes, at zero and at the offset mean, with a valley between them
    assert near(0.0) > 5 * near(15.0) and near(30.0) > 2 * near(15.0)
    assert near(0.0) > near(-8.0) and near(30.0) > near(45.0)


def test_error_distribution_misaligned():
    records, truth = generate(ScenarioSpec(duration=5))
    bad = PseudorangeMeasurement(2.5, 1, (2e7, 0, 0), 2e7, 3.0)
    with pytest.raises(ValueError):
        empirical_error_distribution(truth, [bad])


def test_invalid_spec_lists_fields():
    with pytest.raises(ValueError, match="duration.*n_sats"):
        generate(ScenarioSpec(duration=-1, n_sats=3))
    with pytest.raises(ValueError, match=r"nlos\[0\]"):
        generate(ScenarioSpec(nlos=(NlosInterval(0, 10, 1.5, NLOS30),)))


def test_stream_round_trip_bit_exact():
    spec = ScenarioSpec(duration=20, nlos=(NlosInterval(0, 21, 0.5, NLOS30),), seed=3)
    records, truth = generate(spec)
    text = write_stream(merge_stream(records, truth))
    back = read_stream(text)
    assert write_stream(back) == text
    meas, gt = split_truth(back)
    assert meas == records
    assert len(gt) == len(truth.times) and isinstance(gt[0], TruthRecord)
    # ground truth precedes the measurements of its epoch
    assert isinstance(back[0], TruthRecord)


def test_stream_parse_errors_and_comments():
    assert read_stream("# header\n\n") == []
    with pytest.raises(ValueError, match="unrecognized"):
        read_stream("bogus 1 2 3\n")
    with pytest.raises(ValueError):
        read_stream("pseudorange3 0 1 x 0 0 1 1\n")


def test_scenario_file_round_trip():
    spec = ScenarioSpec(duration=50, seed=7, geometry_seed=2, sigma_pr=2.5,
                        segments=(Segment(20, 8.0, 0.0), Segment(30, 6.0, 0.02)),
                        nlos=(NlosInterval(10, 40, 0.25, offset_mixture("0.7 30 10; 0.3 80 20"), 2.0),))
    back = load_scenario(dump_scenario(spec))
    assert dump_scenario(back) == dump_scenario(spec)
    assert write_stream(generate(back)[0]) == write_stream(generate(spec)[0])


def test_scenario_file_defaults_and_validation():
    spec = load_scenario("[scenario]\nduration = 10\n")
    assert spec.duration == 10 and spec.n_sats == 8
    with pytest.raises(ValueError):
        load_scenario("[scenario]\nn_sats = 2\n")
    with pytest.raises(ValueError):
        offset_mixture("1.0 30")
