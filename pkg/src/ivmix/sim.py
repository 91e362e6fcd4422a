"""Synthetic urban GNSS scenarios with NLOS corruption and recorded ground truth.

The vehicle drives a scripted 2-D trajectory in a flat local frame (z up),
satellites sit at fixed positions 20,200 km away above a 15 degree elevation
mask, and pseudoranges are the true geometric range plus receiver clock
offset plus Gaussian noise plus a non-negative NLOS offset for the satellites
scheduled as blocked.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .core import OdometryMeasurement, PseudorangeMeasurement, normalize_angle
from .mixture import GaussianMixture

SAT_RADIUS = 2.02e7
ELEVATION_MASK = math.radians(15.0)


@dataclass(frozen=True)
class Segment:
    duration: float
    speed: float
    yaw_rate: float = 0.0


@dataclass(frozen=True)
class NlosInterval:
    """Between ``start`` and ``end`` a ``fraction`` of satellites is NLOS.

    The blocked set is redrawn every ``dwell`` seconds; offsets are drawn per
    measurement from ``offsets`` and truncated at zero.
    """

    start: float
    end: float
    fraction: float
    offsets: GaussianMixture
    dwell: float = 1.0


@dataclass(frozen=True)
class ScenarioSpec:
    duration: float = 120.0
    rate_hz: float = 1.0
    n_sats: int = 8
    geometry_seed: int = 0
    segments: Tuple[Segment, ...] = (Segment(60.0, 10.0, 0.0), Segment(30.0, 8.0, 0.05), Segment(30.0, 10.0, -0.03))
    sigma_pr: float = 3.0
    odo_sigma: Tuple[float, float, float, float] = (0.1, 0.1, 0.05, 0.005)
    nlos: Tuple[NlosInterval, ...] = ()
    seed: int = 0
    start_yaw: float = 0.0
    clock_offset: float = 100.0
    clock_drift: float = 0.5
    clock_drift_walk: float = 0.01

    def validate(self) -> None:
        bad = []
        if not self.duration > 0:
            bad.append("duration")
        if not self.rate_hz > 0:
            bad.append("rate_hz")
        if self.n_sats < 4:
            bad.append("n_sats")
        if self.sigma_pr < 0:
            bad.append("sigma_pr")
        if len(self.odo_sigma) != 4 or any(s < 0 for s in self.odo_sigma):
            bad.append("odo_sigma")
        if not self.segments or any(s.duration <= 0 or s.speed < 0 for s in self.segments):
            bad.append("segments")
        for i, iv in enumerate(self.nlos):
            if not (0.0 <= iv.fraction <= 1.0) or iv.end < iv.start or iv.dwell <= 0:
                bad.append(f"nlos[{i}]")
        if bad:
            raise ValueError("invalid scenario spec: " + ", ".join(bad))


@dataclass
class GroundTruth:
    times: np.ndarray
    poses: np.ndarray
    clocks: np.ndarray
    # aligned with the pseudoranges of the stream, in stream order
    nlos_offsets: np.ndarray = field(default_factory=lambda: np.zeros(0))
    noise: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def pose_at(self, t: float) -> np.ndarray:
        i = np.searchsorted(self.times, t)
        if i >= len(self.times) or self.times[i] != t:
            raise KeyError(f"no ground truth at t={t}")
        return self.poses[i]


@dataclass(frozen=True)
class TruthRecord:
    time: float
    x: float
    y: float
    z: float
    phi: float


def satellite_constellation(n: int, seed: int) -> np.ndarray:
    """Static satellite positions above the elevation mask, azimuths spread evenly."""
    rng = np.random.default_rng(seed)
    az = (np.arange(n) + rng.uniform(-0.3, 0.3, n)) * (2 * math.pi / n)
    el = rng.uniform(ELEVATION_MASK, math.radians(85.0), n)
    return SAT_RADIUS * np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def _trajectory(spec: ScenarioSpec, times: np.ndarray) -> np.ndarray:
    """Integrate the speed/yaw-rate script; the last segment repeats if the script is short."""
    poses = np.zeros((len(times), 4))
    poses[0, 3] = spec.start_yaw
    bounds = np.cumsum([s.duration for s in spec.segments])
    for k in range(1, len(times)):
        t0, dt = times[k - 1], times[k] - times[k - 1]
        seg = spec.segments[min(int(np.searchsorted(bounds, t0, side="right")), len(spec.segments) - 1)]
        x, y, z, phi = poses[k - 1]
        mid = phi + 0.5 * seg.yaw_rate * dt
        poses[k] = (x + seg.speed * dt * math.cos(mid), y + seg.speed * dt * math.sin(mid), z,
                    normalize_angle(phi + seg.yaw_rate * dt))
    return poses


def _truncated_offsets(gmm: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty(0)
    while out.size < n:
        draw = gmm.sample(max(2 * (n - out.size), 8), rng)[:, 0]
        out = np.concatenate([out, draw[draw >= 0.0]])
    return out[:n]


def generate(spec: ScenarioSpec):
    """Return ``(measurements, truth)`` for the scenario, deterministic in ``spec.seed``.

    Measurements are time ordered: at every epoch the pseudoranges of that
    epoch, then the odometry record spanning to the next epoch.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_ep = int(math.floor(spec.duration * spec.rate_hz + 1e-9)) + 1
    times = np.arange(n_ep) / spec.rate_hz
    poses = _trajectory(spec, times)
    sats = satellite_constellation(spec.n_sats, spec.geometry_seed)

    clocks = np.zeros((n_ep, 2))
    clocks[0] = spec.clock_offset, spec.clock_drift
    for k in range(1, n_ep):
        dt = times[k] - times[k - 1]
        drift = clocks[k - 1, 1] + spec.clock_drift_walk * math.sqrt(dt) * rng.standard_normal()
        clocks[k] = clocks[k - 1, 0] + clocks[k - 1, 1] * dt, drift

    odo_sigma = np.asarray(spec.odo_sigma, dtype=float)
    odo_info = np.diag(1.0 / np.maximum(odo_sigma, 1e-6) ** 2)
    blocked_until = [-np.inf] * len(spec.nlos)
    blocked = [np.zeros(spec.n_sats, bool) for _ in spec.nlos]

    records, offsets_all, noise_all = [], [], []
    for k, t in enumerate(times):
        geo = np.linalg.norm(sats - poses[k, :3], axis=1)
        noise = spec.sigma_pr * rng.standard_normal(spec.n_sats)
        offset = np.zeros(spec.n_sats)
        for j, iv in enumerate(spec.nlos):
            if not (iv.start <= t < iv.end):
                continue
            if t >= blocked_until[j]:
                count = int(round(iv.fraction * spec.n_sats))
                blocked[j] = np.zeros(spec.n_sats, bool)
                blocked[j][rng.choice(spec.n_sats, size=count, replace=False)] = True
                blocked_until[j] = t + iv.dwell - 1e-9
            sel = blocked[j] & (offset == 0)
            offset[sel] = _truncated_offsets(iv.offsets, int(sel.sum()), rng)
        rng_meas = geo + clocks[k, 0] + noise + offset
        for i in range(spec.n_sats):
            records.append(PseudorangeMeasurement(float(t), i + 1, tuple(sats[i]), float(rng_meas[i]),
                                                  float(max(spec.sigma_pr, 1e-3))))
        offsets_all.append(offset)
        noise_all.append(noise)
        if k + 1 < n_ep:
            dt = times[k + 1] - t
            d = poses[k + 1, :3] - poses[k, :3]
            c, s = math.cos(poses[k, 3]), math.sin(poses[k, 3])
            inc = np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2],
                            normalize_angle(poses[k + 1, 3] - poses[k, 3])])
            inc = inc + odo_sigma * rng.standard_normal(4)
            records.append(OdometryMeasurement(float(t), float(dt), *map(float, inc), info=odo_info))
    truth = GroundTruth(times, poses, clocks, np.concatenate(offsets_all), np.concatenate(noise_all))
    return records, truth


def empirical_error_distribution(truth: GroundTruth, measurements: Sequence) -> np.ndarray:
    """Per-pseudorange true error range - (geometric range + clock), i.e. noise plus NLOS offset."""
    prs = [m for m in measurements if isinstance(m, PseudorangeMeasurement)]
    out = np.empty(len(prs))
    index = {float(t): i for i, t in enumerate(truth.times)}
    for n, m in enumerate(prs):
        if m.time not in index:
            raise ValueError(f"measurement at t={m.time} has no ground truth epoch")
        k = index[m.time]
        out[n] = m.range - (np.linalg.norm(np.asarray(m.sat_pos) - truth.poses[k, :3]) + truth.clocks[k, 0])
    return out


# ---------------------------------------------------------------------------
# Stream files
# ---------------------------------------------------------------------------


def _f(v: float) -> str:
    return repr(float(v))


def truth_records(truth: GroundTruth) -> List[TruthRecord]:
    return [TruthRecord(float(t), *map(float, p)) for t, p in zip(truth.times, truth.poses)]


def merge_stream(measurements: Sequence, truth: GroundTruth = None) -> list:
    """Interleave ground-truth records ahead of the measurements of each epoch."""
    if truth is None:
        return list(measurements)
    gt = truth_records(truth)
    out, j = [], 0
    for m in measurements:
        while j < len(gt) and gt[j].time <= m.time:
            out.append(gt[j])
            j += 1
        out.append(m)
    out.extend(gt[j:])
    return out


def format_record(rec) -> str:
    if isinstance(rec, PseudorangeMeasurement):
        return " ".join(["pseudorange3", _f(rec.time), str(rec.sat_id), *map(_f, rec.sat_pos), _f(rec.range), _f(rec.nominal_std)])
    if isinstance(rec, OdometryMeasurement):
        return " ".join(["odometry", _f(rec.time), _f(rec.dt), _f(rec.forward), _f(rec.lateral), _f(rec.vertical),
                         _f(rec.dyaw), *map(_f, np.diag(rec.info))])
    if isinstance(rec, TruthRecord):
        return " ".join(["gt", _f(rec.time), _f(rec.x), _f(rec.y), _f(rec.z), _f(rec.phi)])
    raise TypeError(f"cannot format {type(rec).__name__}")


def parse_record(line: str):
    parts = line.split()
    kind, vals = parts[0], parts[1:]
    try:
        if kind == "pseudorange3" and len(vals) == 7:
            return PseudorangeMeasurement(float(vals[0]), int(vals[1]), tuple(map(float, vals[2:5])),
                                          float(vals[5]), float(vals[6]))
        if kind == "odometry" and len(vals) == 10:
            v = list(map(float, vals))
            return OdometryMeasurement(v[0], v[1], v[2], v[3], v[4], v[5], info=np.diag(v[6:10]))
        if kind == "gt" and len(vals) == 5:
            return TruthRecord(*map(float, vals))
    except ValueError as exc:
        raise ValueError(f"malformed {kind} record: {line!r} ({exc})") from None
    raise ValueError(f"unrecognized record: {line!r}")


def write_stream(records: Sequence) -> str:
    return "".join(format_record(r) + "\n" for r in records)


def read_stream(text: str) -> list:
    """Parse stream text; blank lines and ``#`` comments are skipped."""
    out = []
    for line in io.StringIO(text):
        s = line.strip()
        if s and not s.startswith("#"):
            out.append(parse_record(s))
    return out


def split_truth(records: Sequence):
    """Separate a parsed stream into (measurements, truth records)."""
    meas = [r for r in records if not isinstance(r, TruthRecord)]
    gt = [r for r in records if isinstance(r, TruthRecord)]
    return meas, gt


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------


def _mixture_text(gmm: GaussianMixture) -> str:
    std = 1.0 / gmm.sqrt_info[:, 0, 0]
    return "; ".join(f"{float(w)!r} {float(m)!r} {float(s)!r}" for w, m, s in zip(gmm.weights, gmm.means[:, 0], std))


def offset_mixture(text: str) -> GaussianMixture:
    """Parse ``"w mean std; w mean std; ..."`` into a 1-D mixture (weights renormalized)."""
    comps = [list(map(float, c.split())) for c in text.split(";") if c.strip()]
    if not comps or any(len(c) != 3 or c[2] <= 0 or c[0] < 0 for c in comps):
        raise ValueError(f"bad offset mixture {text!r}")
    w = np.array([c[0] for c in comps])
    return GaussianMixture.from_info(w / w.sum(), np.array([c[1] for c in comps]),
                                     np.array([1.0 / c[2] ** 2 for c in comps]))


def load_scenario(text: str) -> ScenarioSpec:
    """Read an INI scenario: ``[scenario]`` keys, ``[segment.N]`` and ``[nlos.N]`` sections."""
    cp = configparser.ConfigParser()
    cp.read_string(text)
    base = ScenarioSpec()
    sc = cp["scenario"] if cp.has_section("scenario") else {}
    get = lambda key, conv, default: conv(sc[key]) if key in sc else default  # noqa: E731
    segs = tuple(
        Segment(float(cp[s]["duration"]), float(cp[s]["speed"]), float(cp[s].get("yaw_rate", "0")))
        for s in sorted((s for s in cp.sections() if s.startswith("segment.")), key=lambda s: int(s.split(".")[1]))
    )
    nlos = tuple(
        NlosInterval(float(cp[s]["start"]), float(cp[s]["end"]), float(cp[s]["fraction"]),
                     offset_mixture(cp[s]["offsets"]), float(cp[s].get("dwell", "1")))
        for s in sorted((s for s in cp.sections() if s.startswith("nlos.")), key=lambda s: int(s.split(".")[1]))
    )
    spec = ScenarioSpec(
        duration=get("duration", float, base.duration),
        rate_hz=get("rate_hz", float, base.rate_hz),
        n_sats=get("n_sats", int, base.n_sats),
        geometry_seed=get("geometry_seed", int, base.geometry_seed),
        segments=segs or base.segments,
        sigma_pr=get("sigma_pr", float, base.sigma_pr),
        odo_sigma=get("odo_sigma", lambda v: tuple(float(x) for x in v.split(",")), base.odo_sigma),
        nlos=nlos,
        seed=get("seed", int, base.seed),
        start_yaw=get("start_yaw", float, base.start_yaw),
        clock_offset=get("clock_offset", float, base.clock_offset),
        clock_drift=get("clock_drift", float, base.clock_drift),
        clock_drift_walk=get("clock_drift_walk", float, base.clock_drift_walk),
    )
    spec.validate()
    return spec


def dump_scenario(spec: ScenarioSpec) -> str:
    cp = configparser.ConfigParser()
    cp["scenario"] = {
        "duration": repr(float(spec.duration)), "rate_hz": repr(float(spec.rate_hz)), "n_sats": str(spec.n_sats),
        "geometry_seed": str(spec.geometry_seed), "sigma_pr": repr(float(spec.sigma_pr)),
        "odo_sigma": ", ".join(repr(float(v)) for v in spec.odo_sigma), "seed": str(spec.seed),
        "start_yaw": repr(float(spec.start_yaw)), "clock_offset": repr(float(spec.clock_offset)),
        "clock_drift": repr(float(spec.clock_drift)), "clock_drift_walk": repr(float(spec.clock_drift_walk)),
    }
    for i, s in enumerate(spec.segments):
        cp[f"segment.{i}"] = {"duration": repr(float(s.duration)), "speed": repr(float(s.speed)), "yaw_rate": repr(float(s.yaw_rate))}
    for i, iv in enumerate(spec.nlos):
        cp[f"nlos.{i}"] = {"start": repr(float(iv.start)), "end": repr(float(iv.end)), "fraction": repr(float(iv.fraction)),
                           "dwell": repr(float(iv.dwell)), "offsets": _mixture_text(iv.offsets)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
