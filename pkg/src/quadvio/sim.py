"""Quadrotor flight simulator: trajectories, IMU synthesis and feature tracks.

Trajectories are built from velocity segments blended with a septic
smoothstep, which keeps position C4 and attitude C2.  Attitude follows from
differential flatness of the drag model: the body z axis is anti-parallel to
``a_world - g e3 + k1 v_world`` and yaw is commanded per segment.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    GIMBAL_EPS,
    R_BODY_CAMERA,
    CameraIntrinsics,
    euler_to_rotation,
    wrap_angle,
    xi_inverse,
)

logger = logging.getLogger(__name__)


class TrajectoryError(ValueError):
    """Segment list is malformed or not flyable under the gimbal guard."""


@dataclass(frozen=True)
class SimConfig:
    mass: float = 1.3
    drag_k1: float = 0.35
    gravity: float = 9.81
    accel_noise_var: float = 0.25
    gyro_noise_var: float = 0.005
    accel_bias: Optional[tuple] = None
    gyro_bias: Optional[tuple] = None
    accel_bias_std: float = 0.1
    gyro_bias_std: float = 0.005
    imu_rate: float = 200.0
    camera_rate: float = 10.0
    world_size: tuple = (200.0, 200.0, 50.0)
    world_center: tuple = (0.0, 0.0, -15.0)
    feature_count: int = 2000
    min_tracked_features: int = 30
    max_tracked_features: int = 50
    min_depth: float = 0.5
    pixel_sigma: float = 1.0
    image_width: int = 640
    image_height: int = 480
    fx: float = 450.0
    fy: float = 450.0
    cx: Optional[float] = None
    cy: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.imu_rate <= 0 or self.camera_rate <= 0:
            raise ValueError("rates must be positive")
        ratio = self.imu_rate / self.camera_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("imu_rate must be an integer multiple of camera_rate")
        for name in ("accel_noise_var", "gyro_noise_var", "accel_bias_std",
                     "gyro_bias_std", "pixel_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.min_tracked_features > self.max_tracked_features:
            raise ValueError("min_tracked_features exceeds max_tracked_features")

    @property
    def imu_per_frame(self) -> int:
        return int(round(self.imu_rate / self.camera_rate))

    @property
    def intrinsics(self) -> CameraIntrinsics:
        cx = self.image_width / 2.0 if self.cx is None else self.cx
        cy = self.image_height / 2.0 if self.cy is None else self.cy
        return CameraIntrinsics(self.fx, self.fy, cx, cy)


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class Segment:
    """One piece of a trajectory.

    ``kind`` is one of ``hover``, ``climb`` (``speed`` m/s upwards), ``line``
    (constant world ``velocity``) or ``circle`` (``radius``, horizontal
    ``speed``, ``heading`` of the initial direction, ``turn`` = +1 clockwise
    seen from above in z-down axes, optional vertical rate ``vz`` for a helix).  ``yaw`` is ``"hold"``, ``"tangent"`` (plus
    ``yaw_offset``) or a fixed angle in radians.  The first ``ramp`` seconds
    blend from the previous segment's velocity law.
    """

    kind: str
    duration: float
    velocity: tuple = (0.0, 0.0, 0.0)
    speed: float = 0.0
    radius: float = 1.0
    heading: float = 0.0
    turn: int = 1
    vz: float = 0.0
    yaw: object = "hold"
    yaw_offset: float = 0.0
    ramp: float = 2.0


def _smoothstep(x):
    """Septic smoothstep and its derivative; first three derivatives vanish at 0 and 1."""
    x = np.clip(x, 0.0, 1.0)
    s = x ** 4 * (35.0 - 84.0 * x + 70.0 * x ** 2 - 20.0 * x ** 3)
    ds = 140.0 * x ** 3 * (1.0 - x) ** 3
    return s, ds


class _Law:
    """Velocity/acceleration/yaw law of a single segment in local time."""

    def __init__(self, seg: Segment, start_yaw: float):
        self.seg = seg
        k = seg.kind
        if k == "hover":
            self.v0 = np.zeros(3)
        elif k == "climb":
            self.v0 = np.array([0.0, 0.0, -seg.speed])
        elif k == "line":
            self.v0 = np.asarray(seg.velocity, dtype=float)
        elif k == "circle":
            if seg.radius <= 0:
                raise TrajectoryError("circle radius must be positive")
            self.omega = seg.turn * seg.speed / seg.radius
        else:
            raise TrajectoryError(f"unknown segment kind {k!r}")
        self.start_yaw = start_yaw

    def vel_acc(self, tau):
        tau = np.asarray(tau, dtype=float)
        if self.seg.kind == "circle":
            ang = self.seg.heading + self.omega * tau
            s = self.seg.speed
            v = np.stack([s * np.cos(ang), s * np.sin(ang), np.full_like(ang, self.seg.vz)], axis=-1)
            a = np.stack([-s * self.omega * np.sin(ang), s * self.omega * np.cos(ang),
                          np.zeros_like(ang)], axis=-1)
            return v, a
        v = np.broadcast_to(self.v0, tau.shape + (3,)).copy()
        return v, np.zeros_like(v)

    def yaw(self, tau):
        tau = np.asarray(tau, dtype=float)
        y = self.seg.yaw
        if isinstance(y, (int, float)):
            return np.full(tau.shape, float(y))
        if y == "tangent":
            if self.seg.kind == "circle":
                return self.seg.heading + self.omega * tau + self.seg.yaw_offset
            if np.hypot(self.v0[0], self.v0[1]) > 1e-9:
                return np.full(tau.shape, math.atan2(self.v0[1], self.v0[0]) + self.seg.yaw_offset)
        return np.full(tau.shape, self.start_yaw)


class Trajectory:
    """Smooth multi-segment flight plan evaluated on arbitrary time grids."""

    def __init__(self, segments: Sequence[Segment], drag_k1: float = 0.35,
                 gravity: float = 9.81, gimbal_eps: float = GIMBAL_EPS):
        if not segments:
            raise TrajectoryError("empty segment list")
        self.segments = list(segments)
        self.k1 = drag_k1
        self.g = gravity
        self.eps = gimbal_eps
        self.starts = np.zeros(len(segments))
        self.laws = []
        t = 0.0
        yaw = 0.0
        for i, seg in enumerate(self.segments):
            if seg.duration <= 0:
                raise TrajectoryError(f"segment {i} has non-positive duration")
            if not 0 < seg.ramp <= seg.duration:
                raise TrajectoryError(f"segment {i} ramp must lie in (0, duration]")
            self.starts[i] = t
            law = _Law(seg, yaw)
            self.laws.append(law)
            # yaw at the end of the segment, unwrapped, seeds the next 'hold'
            yaw = float(self._yaw_local(i, np.array([seg.duration]))[0])
            t += seg.duration
        self.duration = t

    # -- raw kinematics -----------------------------------------------------
    def _yaw_local(self, i, tau):
        law = self.laws[i]
        target = law.yaw(tau)
        if i == 0:
            prev = np.zeros_like(target)
        else:
            prev = self._yaw_local(i - 1, tau + self.segments[i - 1].duration)
        s, _ = _smoothstep(tau / self.segments[i].ramp)
        return prev + s * wrap_angle(target - prev)

    def _segment_index(self, t):
        idx = np.searchsorted(self.starts, t, side="right") - 1
        return np.clip(idx, 0, len(self.segments) - 1)

    def kinematics(self, t):
        """World velocity, world acceleration and yaw at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        v = np.zeros(t.shape + (3,))
        a = np.zeros(t.shape + (3,))
        yaw = np.zeros(t.shape)
        idx = self._segment_index(t)
        for i in np.unique(idx):
            m = idx == i
            tau = t[m] - self.starts[i]
            seg = self.segments[i]
            vi, ai = self.laws[i].vel_acc(tau)
            if i == 0:
                vp, ap = np.zeros_like(vi), np.zeros_like(ai)
            else:
                vp, ap = self.laws[i - 1].vel_acc(tau + self.segments[i - 1].duration)
            s, ds = _smoothstep(tau / seg.ramp)
            s = s[:, None]
            ds = ds[:, None] / seg.ramp
            v[m] = vp + s * (vi - vp)
            a[m] = ap + s * (ai - ap) + ds * (vi - vp)
            yaw[m] = self._yaw_local(i, tau)
        return v, a, yaw

    def attitude(self, t):
        """Euler angles, world velocity, world acceleration and thrust/m."""
        v, a, yaw = self.kinematics(t)
        w = a - self.g * np.array([0.0, 0.0, 1.0]) + self.k1 * v
        nw = np.linalg.norm(w, axis=-1)
        if np.any(nw < 1e-6):
            raise TrajectoryError("free fall: thrust direction undefined")
        b3 = -w / nw[:, None]
        cpsi, spsi = np.cos(yaw), np.sin(yaw)
        # b3 rotated into the yaw-aligned frame: [s(th)c(phi), -s(phi), c(th)c(phi)]
        bx = cpsi * b3[:, 0] + spsi * b3[:, 1]
        by = -spsi * b3[:, 0] + cpsi * b3[:, 1]
        bz = b3[:, 2]
        phi = np.arctan2(-by, np.hypot(bx, bz))
        th = np.arctan2(bx, bz)
        theta = np.stack([phi, th, yaw], axis=-1)
        return theta, v, a, nw

    def evaluate(self, t) -> "TruthLog":
        """Sample ground truth at the (sorted) times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        theta, v_w, _, nw = self.attitude(t)
        if np.any(np.abs(theta[:, 1]) >= math.pi / 2 - self.eps) or np.any(
                np.abs(theta[:, 0]) >= math.pi / 2):
            raise TrajectoryError("trajectory violates the gimbal guard")
        h = 1e-5
        th_p, *_ = self.attitude(t + h)
        th_m, *_ = self.attitude(t - h)
        dtheta = (th_p - th_m) / (2 * h)
        n = len(t)
        v_b = np.empty((n, 3))
        omega = np.empty((n, 3))
        for k in range(n):
            R = euler_to_rotation(theta[k], self.eps)
            v_b[k] = R.T @ v_w[k]
            omega[k] = xi_inverse(theta[k]) @ dtheta[k]
        thrust = nw + self.k1 * v_b[:, 2]
        pos = self.positions(t)
        theta = theta.copy()
        theta[:, 2] = wrap_angle(theta[:, 2])
        return TruthLog(t=t, position=pos, theta=theta, velocity=v_b, omega=omega,
                        thrust=thrust)

    def positions(self, t):
        """Integrate world velocity from 0 with 8-point Gauss-Legendre per interval."""
        t = np.asarray(t, dtype=float)
        grid = np.concatenate([[0.0], t]) if t[0] != 0.0 else t
        nodes, weights = np.polynomial.legendre.leggauss(8)
        a, b = grid[:-1], grid[1:]
        half = 0.5 * (b - a)
        mid = 0.5 * (b + a)
        tq = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
        vq, _, _ = self.kinematics(tq)
        vq = vq.reshape(len(a), len(nodes), 3)
        inc = np.einsum("k,ikj->ij", weights, vq) * half[:, None]
        pos = np.vstack([np.zeros(3), np.cumsum(inc, axis=0)])
        return pos[-len(t):]


@dataclass(frozen=True)
class TrueState:
    t: float
    position: np.ndarray
    theta: np.ndarray
    velocity: np.ndarray
    omega: np.ndarray
    thrust: float  # thrust-specific force f_T/m, positive upwards


@dataclass
class TruthLog:
    """Ground truth sampled on a time grid (structure of arrays)."""

    t: np.ndarray
    position: np.ndarray
    theta: np.ndarray
    velocity: np.ndarray
    omega: np.ndarray
    thrust: np.ndarray

    def __len__(self):
        return len(self.t)

    def __getitem__(self, k) -> TrueState:
        return TrueState(float(self.t[k]), self.position[k], self.theta[k],
                         self.velocity[k], self.omega[k], float(self.thrust[k]))


def generate_trajectory(segments: Sequence[Segment], rate: float = 200.0,
                        drag_k1: float = 0.35, gravity: float = 9.81) -> TruthLog:
    """Ground truth sampled at ``rate`` Hz over the full segment list."""
    traj = Trajectory(segments, drag_k1, gravity)
    n = int(round(traj.duration * rate))
    return traj.evaluate(np.arange(n) / rate)


# Flight plans.  ``default`` takes off along a helix, keeps turning through
# the translation phase and ends in a 30 s hover; ``vertical_start`` begins
# with 10 s of pure vertical climb; ``diagonal`` is a gentler straight-line
# variant with long constant-velocity legs.
PRESETS = ("default", "diagonal", "vertical_start", "hover_test", "hover")


def preset(name: str) -> list[Segment]:
    middle = [
        Segment("line", 20.0, velocity=(0.0, 1.2, -0.1), yaw=0.0),
        Segment("circle", 30.0, radius=8.0, speed=1.2, heading=math.pi / 2, turn=1,
                yaw="tangent", yaw_offset=-math.pi / 2, ramp=3.0),
        Segment("line", 20.0, velocity=(-0.8, -0.5, 0.25), yaw="hold", ramp=3.0),
    ]
    if name == "default":
        return [
            Segment("circle", 10.0, radius=4.0, speed=0.8, vz=-0.6, heading=0.0, turn=1,
                    yaw="tangent", yaw_offset=-math.pi / 2),
            Segment("circle", 25.0, radius=8.0, speed=1.2, heading=math.pi / 2, turn=-1,
                    yaw="tangent", yaw_offset=-math.pi / 2, ramp=3.0),
            Segment("line", 15.0, velocity=(0.5, -0.8, 0.2), yaw="hold", ramp=3.0),
            Segment("circle", 20.0, radius=6.0, speed=1.0, heading=-math.pi / 2, turn=1,
                    yaw="tangent", yaw_offset=-math.pi / 2, ramp=3.0),
            Segment("hover", 30.0, ramp=3.0),
        ]
    if name == "diagonal":
        return [Segment("line", 10.0, velocity=(0.2, 0.4, -0.8), yaw=0.0)] + middle + [
            Segment("hover", 20.0, ramp=3.0)]
    if name == "vertical_start":
        return [Segment("climb", 10.0, speed=0.8, yaw=0.0)] + middle + [
            Segment("hover", 20.0, ramp=3.0)]
    if name == "hover_test":
        return [
            Segment("line", 10.0, velocity=(0.2, 0.4, -0.8), yaw=0.0),
            Segment("line", 10.0, velocity=(0.0, 1.2, 0.0), yaw=0.0),
            Segment("hover", 40.0, ramp=3.0),
        ]
    if name == "hover":
        return [Segment("hover", 30.0, ramp=1.0)]
    raise TrajectoryError(f"unknown trajectory preset {name!r}")


def parse_segments(text: str) -> list[Segment]:
    """Parse ``kind:duration[:args]`` items separated by ``;``.

    ``hover:D``, ``climb:D:speed``, ``line:D:vx,vy,vz``,
    ``circle:D:radius:speed[:heading_deg[:vz]]``.  Yaw is held on lines and hover,
    follows the tangent on circles.
    """
    segs = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        parts = item.split(":")
        kind, dur = parts[0].strip(), float(parts[1])
        if kind == "hover":
            segs.append(Segment("hover", dur, ramp=min(2.0, dur)))
        elif kind == "climb":
            segs.append(Segment("climb", dur, speed=float(parts[2]), ramp=min(2.0, dur)))
        elif kind == "line":
            vel = tuple(float(x) for x in parts[2].split(","))
            if len(vel) != 3:
                raise TrajectoryError(f"line velocity needs 3 components: {item!r}")
            segs.append(Segment("line", dur, velocity=vel, ramp=min(2.0, dur)))
        elif kind == "circle":
            heading = math.radians(float(parts[4])) if len(parts) > 4 else 0.0
            vz = float(parts[5]) if len(parts) > 5 else 0.0
            segs.append(Segment("circle", dur, radius=float(parts[2]), speed=float(parts[3]),
                                heading=heading, vz=vz, yaw="tangent", ramp=min(2.0, dur)))
        else:
            raise TrajectoryError(f"unknown segment kind {kind!r}")
    return segs


def scale_speed(segments: Sequence[Segment], factor: float) -> list[Segment]:
    """Same timing, velocities multiplied by ``factor``."""
    out = []
    for s in segments:
        out.append(replace(s, velocity=tuple(factor * np.asarray(s.velocity)),
                           speed=factor * s.speed,
                           radius=s.radius * factor if s.kind == "circle" else s.radius))
    return out


# ---------------------------------------------------------------------------
# sensors


@dataclass(frozen=True)
class ImuSample:
    t: float
    accel: np.ndarray
    gyro: np.ndarray


@dataclass
class ImuLog:
    t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray

    def __len__(self):
        return len(self.t)

    def __getitem__(self, k) -> ImuSample:
        return ImuSample(float(self.t[k]), self.accel[k], self.gyro[k])

    def samples(self) -> list[ImuSample]:
        return [ImuSample(float(t), a, g) for t, a, g in zip(self.t, self.accel, self.gyro)]


def specific_force(velocity_body, thrust, k1):
    """Body specific force of the drag model: ``-k1 v_xy`` and ``-f_T/m`` on z."""
    v = np.asarray(velocity_body, dtype=float)
    f = np.empty(v.shape)
    f[..., 0] = -k1 * v[..., 0]
    f[..., 1] = -k1 * v[..., 1]
    f[..., 2] = -np.asarray(thrust)
    return f


def synthesize_imu(truth: TruthLog, cfg: SimConfig, accel_bias, gyro_bias,
                   rng: Optional[np.random.Generator] = None) -> ImuLog:
    """Accelerometer and gyro samples for every ground-truth row."""
    n = len(truth)
    accel = specific_force(truth.velocity, truth.thrust, cfg.drag_k1) + np.asarray(accel_bias)
    gyro = truth.omega + np.asarray(gyro_bias)
    if rng is not None:
        accel = accel + rng.normal(0.0, math.sqrt(cfg.accel_noise_var), (n, 3))
        gyro = gyro + rng.normal(0.0, math.sqrt(cfg.gyro_noise_var), (n, 3))
    return ImuLog(truth.t.copy(), accel, gyro)


@dataclass
class FeatureWorld:
    points: np.ndarray
    ids: np.ndarray

    @classmethod
    def uniform(cls, cfg: SimConfig, rng: np.random.Generator) -> "FeatureWorld":
        size = np.asarray(cfg.world_size, dtype=float)
        center = np.asarray(cfg.world_center, dtype=float)
        pts = center + (rng.random((cfg.feature_count, 3)) - 0.5) * size
        return cls(pts, np.arange(cfg.feature_count))


@dataclass
class FeatureObservation:
    """Pixel observations of tracked features in one image."""

    t: float
    ids: np.ndarray
    pixels: np.ndarray  # (n, 2)

    def as_dict(self) -> dict:
        return {int(i): self.pixels[k] for k, i in enumerate(self.ids)}


class FeatureTracker:
    """Synthetic stand-in for a detector/tracker front-end.

    Tracks keep their id while the world point stays in view; when fewer
    than ``min_tracked_features`` remain, the nearest untracked visible
    points are activated under fresh ids until ``max_tracked_features``.
    """

    def __init__(self, world: FeatureWorld, cfg: SimConfig):
        self.world = world
        self.cfg = cfg
        self.K = cfg.intrinsics
        self.active: dict[int, int] = {}  # track id -> world index
        self.next_id = 0

    def _visible(self, state: TrueState):
        R_wc = euler_to_rotation(state.theta) @ R_BODY_CAMERA
        pc = (self.world.points - state.position) @ R_wc
        depth = pc[:, 2]
        ok = depth > self.cfg.min_depth
        uv = np.full((len(pc), 2), np.nan)
        uv[ok] = self.K.project(pc[ok])
        inside = ok & (uv[:, 0] >= 0) & (uv[:, 0] < self.cfg.image_width) & \
            (uv[:, 1] >= 0) & (uv[:, 1] < self.cfg.image_height)
        return uv, inside, np.linalg.norm(pc, axis=1)

    def observe(self, state: TrueState, rng: Optional[np.random.Generator]) -> FeatureObservation:
        uv, inside, dist = self._visible(state)
        self.active = {tid: wi for tid, wi in self.active.items() if inside[wi]}
        if len(self.active) < self.cfg.min_tracked_features:
            used = set(self.active.values())
            cand = [i for i in np.flatnonzero(inside)[np.argsort(dist[inside], kind="stable")]
                    if i not in used]
            for wi in cand[: self.cfg.max_tracked_features - len(self.active)]:
                self.active[self.next_id] = int(wi)
                self.next_id += 1
        ids = np.array(sorted(self.active), dtype=int)
        widx = np.array([self.active[i] for i in ids], dtype=int)
        px = uv[widx] if len(widx) else np.zeros((0, 2))
        if rng is not None and self.cfg.pixel_sigma > 0 and len(px):
            px = px + rng.normal(0.0, self.cfg.pixel_sigma, px.shape)
            keep = (px[:, 0] >= 0) & (px[:, 0] < self.cfg.image_width) & \
                (px[:, 1] >= 0) & (px[:, 1] < self.cfg.image_height)
            ids, px = ids[keep], px[keep]
        return FeatureObservation(state.t, ids, px)


def render_features(state: TrueState, world: FeatureWorld, tracker: FeatureTracker,
                    rng: Optional[np.random.Generator] = None) -> FeatureObservation:
    """Observation of ``world`` from ``state``; ``tracker`` carries id persistence."""
    if tracker.world is not world:
        raise ValueError("tracker was built for a different world")
    return tracker.observe(state, rng)


@dataclass
class SimLog:
    imu: ImuLog
    frames: list
    truth: TruthLog
    accel_bias: np.ndarray
    gyro_bias: np.ndarray
    config: SimConfig
    segments: list = field(default_factory=list)


def run_simulation(cfg: SimConfig, segments: Sequence[Segment],
                   duration: Optional[float] = None) -> SimLog:
    """Simulate ground truth, IMU stream and feature stream; deterministic in ``cfg.seed``."""
    ss = np.random.SeedSequence(cfg.seed)
    rng_world, rng_bias, rng_imu, rng_pix = (np.random.default_rng(s) for s in ss.spawn(4))
    traj = Trajectory(segments, cfg.drag_k1, cfg.gravity)
    dur = traj.duration if duration is None else min(duration, traj.duration)
    n = int(round(dur * cfg.imu_rate))
    truth = traj.evaluate(np.arange(n) / cfg.imu_rate)

    ba = (np.asarray(cfg.accel_bias, dtype=float) if cfg.accel_bias is not None
          else rng_bias.normal(0.0, cfg.accel_bias_std, 3))
    bg = (np.asarray(cfg.gyro_bias, dtype=float) if cfg.gyro_bias is not None
          else rng_bias.normal(0.0, cfg.gyro_bias_std, 3))
    noisy = cfg.accel_noise_var > 0 or cfg.gyro_noise_var > 0
    imu = synthesize_imu(truth, cfg, ba, bg, rng_imu if noisy else None)

    world = FeatureWorld.uniform(cfg, rng_world)
    tracker = FeatureTracker(world, cfg)
    frames = []
    for k in range(0, n, cfg.imu_per_frame):
        frames.append(tracker.observe(truth[k], rng_pix if cfg.pixel_sigma > 0 else None))
    logger.info("simulated %.1f s: %d imu samples, %d frames, %d tracks", dur, n,
                len(frames), tracker.next_id)
    return SimLog(imu, frames, truth, ba, bg, cfg, list(segments))
