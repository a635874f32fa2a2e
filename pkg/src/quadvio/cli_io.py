"""Log formats, run configuration, metrics and the ``quadvio`` command line.

Config files are flat ``key = value`` text with ``#`` comments.  Keys are
grouped by prefix:

* ``sim.<field>``       simulator settings (:class:`~quadvio.sim.SimConfig`)
* ``noise.<field>``     estimator noise model (:class:`~quadvio.ekf.NoiseParams`)
* ``init.<field>``      initial covariance (:class:`~quadvio.ekf.InitialCovariance`)
* ``keyframe.<field>``  key-frame selection (:class:`~quadvio.keyframe.KeyframeConfig`)
* plain keys            trajectory, mode flags, gating and the output directory

``noise.gyro_var`` and ``noise.accel_var`` default to the simulator values
when they are not set explicitly.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .ekf import EstimatorFault, EstimatorParams, InitialCovariance, NoiseParams
from .geometry import GimbalLockError, wrap_angle
from .keyframe import KeyframeConfig
from .pipeline import ESTIMATE_COLUMNS, EstimatorConfig, replay_deterministic
from .sim import (FeatureObservation, ImuLog, SimConfig, TrajectoryError,
                  parse_segments, preset, run_simulation)

logger = logging.getLogger("quadvio")

LOG_LEVEL_ENV = "QUADVIO_LOG_LEVEL"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_FAULT = 4

IMU_FILE = "imu.csv"
FEATURES_FILE = "features.jsonl"
GROUNDTRUTH_FILE = "groundtruth.csv"
CONFIG_COPY = "config.resolved"
ESTIMATES_FILE = "estimates.csv"
TIMING_FILE = "timing.json"

IMU_COLUMNS = ["t_s", "ax", "ay", "az", "gx", "gy", "gz"]
STATE_NAMES = ["px", "py", "pz", "roll", "pitch", "yaw", "vx", "vy", "vz",
               "bax", "bay", "baz", "bgx", "bgy", "bgz"]
GT_COLUMNS = ["t"] + STATE_NAMES  # biases are constant columns
ANGLE_STATES = ("roll", "pitch", "yaw")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration

@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    noise: NoiseParams = field(default_factory=NoiseParams)
    init: InitialCovariance = field(default_factory=InitialCovariance)
    keyframe: KeyframeConfig = field(default_factory=KeyframeConfig)
    trajectory: str = "default"
    duration: Optional[float] = None
    vision: bool = True
    keyframes: bool = True
    fej: bool = False
    residual_model: str = "sampson"
    gate_sigma: float = 2.0
    gate_mode: str = "normalized"
    output_dir: Optional[str] = None

    def segments(self):
        text = self.trajectory.strip()
        try:
            return parse_segments(text) if ":" in text else preset(text)
        except (TrajectoryError, ValueError, IndexError) as exc:
            raise ConfigError(f"trajectory: {exc}") from exc

    def estimator_params(self) -> EstimatorParams:
        return EstimatorParams(
            drag_k1=self.sim.drag_k1, gravity=self.sim.gravity, noise=self.noise,
            camera=self.sim.intrinsics, gate_sigma=self.gate_sigma, gate_mode=self.gate_mode,
            use_fej=self.fej, residual_model=self.residual_model)

    def estimator_config(self) -> EstimatorConfig:
        kf = dataclasses.replace(self.keyframe, enabled=self.keyframes)
        return EstimatorConfig(params=self.estimator_params(), keyframes=kf,
                               use_vision=self.vision, imu_rate=self.sim.imu_rate)


_GROUPS = {"sim": SimConfig, "noise": NoiseParams, "init": InitialCovariance,
           "keyframe": KeyframeConfig}
_TOP = {f.name: f for f in dataclasses.fields(RunConfig) if f.name not in _GROUPS}
# derived from mode flags, never set directly
_HIDDEN = {"keyframe.enabled"}


def _parse_bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _convert(annotation: str, raw: str):
    s = raw.strip()
    optional = annotation.startswith("Optional[")
    if optional:
        if s.lower() in ("none", ""):
            return None
        annotation = annotation[len("Optional["):-1]
    if annotation == "bool":
        return _parse_bool(s)
    if annotation == "int":
        return int(s)
    if annotation == "float":
        return float(s)
    if annotation == "tuple":
        return tuple(float(x) for x in s.split(","))
    return s


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Strict parse: every key must be known, every value must convert."""
    groups: dict[str, dict] = {g: {} for g in _GROUPS}
    top: dict = {}
    fields_of = {g: {f.name: f for f in dataclasses.fields(cls)} for g, cls in _GROUPS.items()}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in body.split("=", 1))
        group, _, name = key.partition(".")
        if name and group in _GROUPS and name in fields_of[group] and key not in _HIDDEN:
            f, target = fields_of[group][name], groups[group]
        elif not name and key in _TOP:
            f, target = _TOP[key], top
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        if f.name in target:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        try:
            target[f.name] = _convert(str(f.type), raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for '{key}': {exc}") from exc

    try:
        sim = SimConfig(**groups["sim"])
        nz = dict(groups["noise"])
        nz.setdefault("gyro_var", sim.gyro_noise_var)
        nz.setdefault("accel_var", sim.accel_noise_var)
        cfg = RunConfig(sim=sim, noise=NoiseParams(**nz), init=InitialCovariance(**groups["init"]),
                        keyframe=KeyframeConfig(**groups["keyframe"]), **top)
        cfg.estimator_params()  # validates enum-like settings
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    for name in ("accel_bias", "gyro_bias"):
        v = getattr(cfg.sim, name)
        if v is not None and len(v) != 3:
            raise ConfigError(f"{source}: 'sim.{name}' needs 3 components")
    cfg.segments()
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return parse_config_text("")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def config_to_text(cfg: RunConfig) -> str:
    lines = ["# resolved run configuration"]
    for g in _GROUPS:
        obj = getattr(cfg, g)
        for f in dataclasses.fields(obj):
            key = f"{g}.{f.name}"
            if key not in _HIDDEN:
                lines.append(f"{key} = {_format(getattr(obj, f.name))}")
    for name in _TOP:
        lines.append(f"{name} = {_format(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# log formats

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_table(path, header: Sequence[str], rows: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _read_table(path, expected: Optional[Sequence[str]] = None) -> tuple[list, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file {path}")
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if expected is not None and header[:len(expected)] != list(expected):
        raise DataError(f"{path}: header {header} does not start with {list(expected)}")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    data = data.reshape(-1, len(header))
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: non-finite values")
    if len(data) > 1 and not np.all(np.diff(data[:, 0]) > 0):
        raise DataError(f"{path}: timestamps must increase strictly")
    return header, data


def write_imu(path, imu: ImuLog) -> None:
    _write_table(path, IMU_COLUMNS, np.column_stack([imu.t, imu.accel, imu.gyro]))


def read_imu(path) -> ImuLog:
    _, d = _read_table(path, IMU_COLUMNS)
    if d.shape[1] != len(IMU_COLUMNS):
        raise DataError(f"{path}: expected {len(IMU_COLUMNS)} columns")
    return ImuLog(d[:, 0].copy(), d[:, 1:4].copy(), d[:, 4:7].copy())


def write_features(path, frames: Sequence[FeatureObservation]) -> None:
    with open(path, "w") as fh:
        for fr in frames:
            obs = [[int(i), float(u), float(v)] for i, (u, v) in zip(fr.ids, fr.pixels)]
            fh.write(json.dumps({"t": float(fr.t), "obs": obs}) + "\n")


def read_features(path) -> list[FeatureObservation]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file {path}")
    frames = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                obs = rec["obs"]
                ids = np.array([int(o[0]) for o in obs], dtype=int)
                px = np.array([[float(o[1]), float(o[2])] for o in obs], dtype=float).reshape(-1, 2)
                t = float(rec["t"])
            except (ValueError, KeyError, TypeError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: malformed frame ({exc})") from exc
            if frames and not t > frames[-1].t:
                raise DataError(f"{path}:{lineno}: frame timestamps must increase")
            if len(set(ids.tolist())) != len(ids):
                raise DataError(f"{path}:{lineno}: duplicate feature ids")
            frames.append(FeatureObservation(t, ids, px))
    return frames


def write_groundtruth(path, log) -> None:
    _write_table(path, *truth_table(log))


def read_groundtruth(path) -> tuple[list, np.ndarray]:
    header, d = _read_table(path, GT_COLUMNS[:10])
    return header, d


def write_estimates(path, est: np.ndarray) -> None:
    _write_table(path, ESTIMATE_COLUMNS, est)


def read_estimates(path) -> np.ndarray:
    _, d = _read_table(path, ESTIMATE_COLUMNS)
    if d.shape[1] != len(ESTIMATE_COLUMNS):
        raise DataError(f"{path}: expected {len(ESTIMATE_COLUMNS)} columns")
    return d


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricsReport:
    rmse: dict
    coverage: dict
    nees_velocity: np.ndarray
    mean_nees_velocity: float
    keyframes: int
    gate_rejection_rate: float
    timing: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"rmse": self.rmse, "coverage_2sigma": self.coverage,
                "mean_nees_velocity": self.mean_nees_velocity, "keyframes": self.keyframes,
                "gate_rejection_rate": self.gate_rejection_rate, "timing": self.timing}

    def table(self) -> str:
        lines = [f"{'state':>6} {'rmse':>12} {'cov2s':>7}"]
        for name in self.rmse:
            lines.append(f"{name:>6} {self.rmse[name]:12.5g} {self.coverage[name]:7.3f}")
        lines.append(f"mean velocity NEES {self.mean_nees_velocity:.3f} (dof 3)")
        lines.append(f"key-frames {self.keyframes}, gate rejection {self.gate_rejection_rate:.3%}")
        for k, v in self.timing.items():
            lines.append(f"{k} {v:.4g}")
        return "\n".join(lines)


def state_errors(est: np.ndarray, gt: np.ndarray, gt_header: Sequence[str]):
    """Errors and 1-sigma per state for the states present in ground truth."""
    if len(est) != len(gt) or not np.allclose(est[:, 0], gt[:, 0], rtol=0, atol=1e-6):
        raise DataError(f"timestamps not aligned: {len(est)} estimate rows vs {len(gt)} truth rows")
    names, err, sig = [], [], []
    for j, name in enumerate(STATE_NAMES):
        if name not in gt_header:
            continue
        e = est[:, 1 + j] - gt[:, gt_header.index(name)]
        if name in ANGLE_STATES:
            e = wrap_angle(e)
        names.append(name)
        err.append(e)
        sig.append(est[:, 16 + j])
    return names, np.column_stack(err), np.column_stack(sig)


def velocity_nees(est: np.ndarray, gt: np.ndarray, gt_header: Sequence[str]) -> np.ndarray:
    e = est[:, 7:10] - gt[:, [gt_header.index(n) for n in ("vx", "vy", "vz")]]
    s = est[:, 22:25]
    c = {n: est[:, ESTIMATE_COLUMNS.index(n)] for n in ("cov_vxvy", "cov_vxvz", "cov_vyvz")}
    P = np.empty((len(est), 3, 3))
    P[:, 0, 0], P[:, 1, 1], P[:, 2, 2] = s[:, 0] ** 2, s[:, 1] ** 2, s[:, 2] ** 2
    P[:, 0, 1] = P[:, 1, 0] = c["cov_vxvy"]
    P[:, 0, 2] = P[:, 2, 0] = c["cov_vxvz"]
    P[:, 1, 2] = P[:, 2, 1] = c["cov_vyvz"]
    # pinv: a zero covariance with zero error (estimates copied from truth) gives 0
    sol = np.einsum("nij,nj->ni", np.linalg.pinv(P, hermitian=True), e)
    return np.einsum("ij,ij->i", e, sol)


def evaluate(est: np.ndarray, gt: np.ndarray, gt_header: Sequence[str],
             timing: Optional[dict] = None) -> tuple[MetricsReport, list, np.ndarray]:
    """Metrics plus the plot-ready table (t, error and 2-sigma per state)."""
    names, err, sig = state_errors(est, gt, gt_header)
    rmse = {n: float(np.sqrt(np.mean(err[:, j] ** 2))) for j, n in enumerate(names)}
    cover = {n: float(np.mean(np.abs(err[:, j]) <= 2.0 * sig[:, j])) for j, n in enumerate(names)}
    nees = velocity_nees(est, gt, gt_header)
    rejected = est[-1, ESTIMATE_COLUMNS.index("gate_rejected")]
    accepted = est[-1, ESTIMATE_COLUMNS.index("visual_accepted")]
    total = rejected + accepted
    report = MetricsReport(rmse, cover, nees, float(np.mean(nees)),
                           int(est[-1, ESTIMATE_COLUMNS.index("keyframes")]),
                           float(rejected / total) if total else 0.0, dict(timing or {}))
    header = ["t"] + [f"err_{n}" for n in names] + [f"sigma2_{n}" for n in names] + ["nees_v"]
    table = np.column_stack([est[:, 0], err, 2.0 * sig, nees])
    return report, header, table


# ---------------------------------------------------------------------------
# commands

def initial_state_from_truth(gt_header: Sequence[str], gt: np.ndarray) -> np.ndarray:
    """First ground-truth row as the starting state, biases zero."""
    row = gt[0]
    return np.r_[[row[gt_header.index(n)] for n in STATE_NAMES[:9]], np.zeros(6)]


def simulate_and_estimate(cfg: RunConfig, log=None):
    """In-memory simulate + estimate with the same initialization as the CLI."""
    if log is None:
        log = run_simulation(cfg.sim, cfg.segments(), cfg.duration)
    tr = log.truth
    x0 = np.r_[tr.position[0], tr.theta[0], tr.velocity[0], np.zeros(6)]
    est = replay_deterministic(log.imu.samples(), log.frames, x0, cfg.init.matrix(),
                               cfg.estimator_config())
    return log, est


def truth_table(log) -> tuple[list, np.ndarray]:
    """Ground truth in the ``groundtruth.csv`` layout, without a file round-trip."""
    tr, n = log.truth, len(log.truth.t)
    rows = np.column_stack([tr.t, tr.position, tr.theta, tr.velocity,
                            np.tile(log.accel_bias, (n, 1)), np.tile(log.gyro_bias, (n, 1))])
    return list(GT_COLUMNS), rows


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    log = run_simulation(cfg.sim, cfg.segments(), cfg.duration)
    write_imu(out / IMU_FILE, log.imu)
    write_features(out / FEATURES_FILE, log.frames)
    write_groundtruth(out / GROUNDTRUTH_FILE, log)
    (out / CONFIG_COPY).write_text(config_to_text(cfg))
    logger.info("simulate: %d imu rows, %d frames in %.2f s", len(log.imu), len(log.frames),
                time.perf_counter() - t0)
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    flags = {}
    if args.no_vision:
        flags["vision"] = False
    if args.no_keyframes:
        flags["keyframes"] = False
    if args.no_fej:
        flags["fej"] = False
    if args.fej:
        flags["fej"] = True
    cfg = dataclasses.replace(cfg, **flags)
    logdir = Path(args.log)
    imu = read_imu(logdir / IMU_FILE)
    frames = read_features(logdir / FEATURES_FILE)
    if len(imu) < 2:
        raise DataError("imu log needs at least two samples")
    gt_path = logdir / GROUNDTRUTH_FILE
    if gt_path.is_file():
        x0 = initial_state_from_truth(*read_groundtruth(gt_path))
    else:
        x0 = np.zeros(15)
        logger.warning("no ground truth in %s; starting at rest at the origin", logdir)
    out = Path(args.out or cfg.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    est = replay_deterministic(imu.samples(), frames, x0, cfg.init.matrix(), cfg.estimator_config())
    elapsed = time.perf_counter() - t0
    write_estimates(out / ESTIMATES_FILE, est)
    (out / CONFIG_COPY).write_text(config_to_text(cfg))
    timing = {"wall_s": elapsed, "log_duration_s": float(imu.t[-1] - imu.t[0]),
              "ms_per_imu_sample": 1e3 * elapsed / len(imu)}
    (out / TIMING_FILE).write_text(json.dumps(timing, indent=2) + "\n")
    logger.info("estimate: %d rows in %.2f s", len(est), elapsed)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    est = read_estimates(args.est)
    header, gt = read_groundtruth(args.gt)
    timing_path = Path(args.est).with_name(TIMING_FILE)
    timing = json.loads(timing_path.read_text()) if timing_path.is_file() else {}
    report, cols, table = evaluate(est, gt, header, timing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
    _write_table(out / "errors.csv", cols, table)
    print(report.table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quadvio", description="Quadrotor visual-inertial velocity estimation")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a flight and write sensor logs")
    s.add_argument("--config", help="run configuration file")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="run the estimator on a log directory")
    e.add_argument("--log", required=True, help="directory with imu.csv and features.jsonl")
    e.add_argument("--config", help="run configuration file")
    e.add_argument("--no-vision", action="store_true", help="inertial-only run")
    e.add_argument("--no-keyframes", action="store_true", help="new key-frame on every image")
    fej = e.add_mutually_exclusive_group()
    fej.add_argument("--no-fej", action="store_true", help="linearize the key-frame pose at its current estimate")
    fej.add_argument("--fej", action="store_true", help="linearize the key-frame pose at its first estimate")
    e.add_argument("--out", help="output directory")
    e.set_defaults(func=cmd_estimate)

    v = sub.add_parser("evaluate", help="compare estimates with ground truth")
    v.add_argument("--est", required=True, help="estimates.csv")
    v.add_argument("--gt", required=True, help="groundtruth.csv")
    v.add_argument("--out", required=True, help="output directory")
    v.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimatorFault, GimbalLockError, np.linalg.LinAlgError) as exc:
        print(f"estimator fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
