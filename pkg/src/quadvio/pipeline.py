"""Multi-rate fusion: undelayed IMU path and a delayed, rewinding vision path.

The IMU path owns the live filter and never waits on vision work.  The
vision path rewinds to the snapshot stored at the image capture time,
applies the epipolar updates there, replays the buffered IMU samples and
commits the corrected head with a single guarded swap.
"""
from __future__ import annotations

import logging
import queue
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import ekf
from .ekf import EstimatorParams, FilterState
from .keyframe import KeyframeConfig, match_pairs, mean_disparity, should_create_keyframe
from .sim import FeatureObservation, ImuSample

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimatorConfig:
    params: EstimatorParams = field(default_factory=EstimatorParams)
    keyframes: KeyframeConfig = field(default_factory=KeyframeConfig)
    use_vision: bool = True
    order_pairs: bool = True
    imu_rate: float = 200.0
    horizon: float = 0.5  # s of snapshots kept for rewinding


@dataclass(frozen=True)
class Stats:
    images: int = 0
    keyframes: int = 0
    visual_accepted: int = 0
    visual_rejected: int = 0
    visual_degenerate: int = 0
    visual_skipped: int = 0
    accel_rejected: int = 0
    weak_baseline_images: int = 0


@dataclass(frozen=True)
class Snapshot:
    """Value-semantics filter snapshot after processing IMU sample ``k``."""

    k: int
    t: float
    state: FilterState
    P: np.ndarray
    imu: Optional[ImuSample]
    stats: Stats = Stats()


ESTIMATE_COLUMNS = (
    ["t"]
    + ["px", "py", "pz", "roll", "pitch", "yaw", "vx", "vy", "vz",
       "bax", "bay", "baz", "bgx", "bgy", "bgz"]
    + ["std_" + n for n in ("px", "py", "pz", "roll", "pitch", "yaw", "vx", "vy", "vz",
                            "bax", "bay", "baz", "bgx", "bgy", "bgz")]
    + ["cov_vxvy", "cov_vxvz", "cov_vyvz", "keyframes", "gate_rejected", "visual_accepted"]
)


def estimate_row(s: Snapshot) -> np.ndarray:
    P = s.P
    d = np.sqrt(np.clip(np.diag(P)[:15], 0.0, None))
    return np.concatenate([
        [s.t], s.state.x[:15], d,
        [P[6, 7], P[6, 8], P[7, 8], s.stats.keyframes, s.stats.visual_rejected,
         s.stats.visual_accepted],
    ])


def initial_snapshot(x0, P0) -> Snapshot:
    state, P = ekf.initial_state(x0, P0)
    return Snapshot(-1, float("nan"), state, P, None)


def imu_step(snap: Snapshot, sample: ImuSample, params: EstimatorParams) -> Snapshot:
    """Predict to ``sample.t`` (trapezoid over the held and new sample) and fuse its x/y accel."""
    state, P = snap.state, snap.P
    if snap.imu is not None:
        dt = sample.t - snap.t
        if not dt > 0:
            raise ValueError(f"IMU timestamp regression at t={sample.t}")
        state, P = ekf.predict(state, P, snap.imu, dt, params, imu_next=sample)
    state, P, ok, _ = ekf.update_accel(state, P, sample.accel[:2], params)
    stats = snap.stats if ok else replace(snap.stats, accel_rejected=snap.stats.accel_rejected + 1)
    return Snapshot(snap.k + 1, sample.t, state, P, sample, stats)


def _pair_information(state, P, pairs, params: EstimatorParams, sigma):
    info = np.empty(len(pairs))
    for i, pr in enumerate(pairs):
        _, H, R, deg = ekf.visual_measurement(state, pr, params, sigma)
        info[i] = 0.0 if deg else float(H @ P @ H) / R
    return info


def image_step(snap: Snapshot, obs: FeatureObservation, cfg: EstimatorConfig,
               should_stop: Optional[Callable[[], bool]] = None) -> Snapshot:
    """Visual updates against the current key-frame, then key-frame selection."""
    stats = replace(snap.stats, images=snap.stats.images + 1)
    if not cfg.use_vision:
        return replace(snap, stats=stats)
    state, P = snap.state, snap.P
    params = cfg.params
    if state.anchor is None:
        state, P = ekf.augment_state(state, P, obs.t, obs.as_dict())
        return replace(snap, state=state, P=P, stats=replace(stats, keyframes=stats.keyframes + 1))

    pairs = match_pairs(state.anchor.snapshot, obs.ids, obs.pixels)
    report = mean_disparity(pairs)
    if params.min_baseline_snr and ekf.baseline_snr(state, P) < params.min_baseline_snr:
        stats = replace(stats, visual_degenerate=stats.visual_degenerate + len(pairs),
                        weak_baseline_images=stats.weak_baseline_images + 1)
        pairs = []
    if cfg.order_pairs and len(pairs) > 1:
        info = _pair_information(state, P, pairs, params, params.noise.pixel_sigma)
        pairs = [pairs[i] for i in np.argsort(-info, kind="stable")]
    acc = rej = deg = skipped = 0
    for i, pr in enumerate(pairs):
        if should_stop is not None and should_stop():
            skipped = len(pairs) - i
            break
        state, P, res = ekf.visual_update(state, P, pr, params)
        if res.degenerate:
            deg += 1
        elif res.accepted:
            acc += 1
        else:
            rej += 1
    stats = replace(stats, visual_accepted=stats.visual_accepted + acc,
                    visual_rejected=stats.visual_rejected + rej,
                    visual_degenerate=stats.visual_degenerate + deg,
                    visual_skipped=stats.visual_skipped + skipped)
    if should_create_keyframe(report, cfg.keyframes):
        state, P = ekf.augment_state(state, P, obs.t, obs.as_dict())
        stats = replace(stats, keyframes=stats.keyframes + 1)
    return replace(snap, state=state, P=P, stats=stats)


@dataclass
class TimestampedImageMeasurement:
    capture_time: float
    observation: FeatureObservation
    arrival_time: Optional[float] = None

    def __post_init__(self):
        if self.arrival_time is None:
            self.arrival_time = self.capture_time
        if self.arrival_time < self.capture_time:
            raise ValueError("image cannot arrive before it is captured")


class SnapshotQueue:
    """Bounded FIFO of snapshots with strictly increasing timestamps."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def push(self, snap: Snapshot):
        if self._items and not snap.t > self._items[-1].t:
            raise ValueError("snapshot timestamps must increase")
        self._items.append(snap)

    def find(self, t: float, tol: float) -> Optional[int]:
        for i in range(len(self._items) - 1, -1, -1):
            ti = self._items[i].t
            if abs(ti - t) <= tol:
                return i
            if ti < t - tol:
                return None
        return None

    def __getitem__(self, i) -> Snapshot:
        return self._items[i]

    def after(self, i: int) -> list:
        return [self._items[j] for j in range(i + 1, len(self._items))]

    def replace_from(self, snaps: list):
        """Overwrite stored snapshots that share a timestamp with ``snaps``."""
        if not snaps:
            return
        by_k = {s.k: s for s in snaps}
        for i in range(len(self._items)):
            s = by_k.get(self._items[i].k)
            if s is not None:
                self._items[i] = s

    @property
    def head(self) -> Optional[Snapshot]:
        return self._items[-1] if self._items else None


class FusionPipeline:
    """Single-context pipeline; images may be ingested late (rewind/replay).

    ``ingest_image`` for a capture time not yet reached by the IMU path is
    held until that IMU sample arrives.
    """

    def __init__(self, x0, P0, cfg: EstimatorConfig = EstimatorConfig()):
        self.cfg = cfg
        self.live = initial_snapshot(x0, P0)
        self.snapshots = SnapshotQueue(max(2, int(round(cfg.horizon * cfg.imu_rate))))
        self.trace: list = []
        self.faults = {"imu_regression": 0, "image_too_old": 0}
        self._pending: deque = deque()
        self._half_period = 0.5 / cfg.imu_rate

    # -- IMU path -------------------------------------------------------------
    def _advance(self, sample: ImuSample) -> Optional[np.ndarray]:
        if self.live.imu is not None and not sample.t > self.live.t:
            self.faults["imu_regression"] += 1
            logger.warning("dropping IMU sample with regressing timestamp %.6f", sample.t)
            return None
        self.live = imu_step(self.live, sample, self.cfg.params)
        self.snapshots.push(self.live)
        row = estimate_row(self.live)
        self.trace.append(row)
        return row

    def ingest_imu(self, sample: ImuSample) -> Optional[np.ndarray]:
        row = self._advance(sample)
        while self._pending and self._pending[0].capture_time <= self.live.t + self._half_period:
            self._apply_image(self._pending.popleft())
            row = self.trace[-1]
        return row

    # -- vision path ----------------------------------------------------------
    def ingest_image(self, m: TimestampedImageMeasurement) -> None:
        if self.live.imu is None or m.capture_time > self.live.t + self._half_period:
            self._pending.append(m)
            return
        self._apply_image(m)

    def _apply_image(self, m: TimestampedImageMeasurement) -> None:
        i = self.snapshots.find(m.capture_time, self._half_period)
        if i is None:
            self.faults["image_too_old"] += 1
            logger.warning("image at %.3f is older than the snapshot horizon", m.capture_time)
            return
        snap = image_step(self.snapshots[i], m.observation, self.cfg)
        replayed = [snap]
        for old in self.snapshots.after(i):
            snap = imu_step(snap, old.imu, self.cfg.params)
            replayed.append(snap)
        self._commit(replayed)

    def _commit(self, replayed: list) -> None:
        self.snapshots.replace_from(replayed)
        for s in replayed:
            self.trace[s.k] = estimate_row(s)
        self.live = replayed[-1]

    def estimates(self) -> np.ndarray:
        return np.array(self.trace) if self.trace else np.zeros((0, len(ESTIMATE_COLUMNS)))


class ThreadedPipeline(FusionPipeline):
    """IMU path in the caller's thread, vision path in a worker thread.

    The worker computes on copied snapshots; the lock is taken for the IMU
    step, for copying references out of the snapshot queue, and for the final
    swap, never while visual updates run.
    """

    def __init__(self, x0, P0, cfg: EstimatorConfig = EstimatorConfig(), anytime: bool = True,
                 vision_stall: float = 0.0):
        super().__init__(x0, P0, cfg)
        self.anytime = anytime
        self.vision_stall = vision_stall
        self._lock = threading.Lock()
        self._queue: queue.Queue = queue.Queue()
        self._worker: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self._switch = None
        self.truncated_images = 0

    def start(self) -> "ThreadedPipeline":
        # finer GIL hand-over so the IMU thread is not starved by vision math
        self._switch = sys.getswitchinterval()
        sys.setswitchinterval(5e-4)
        self._worker = threading.Thread(target=self._run, name="vision", daemon=True)
        self._worker.start()
        return self

    def stop(self) -> None:
        self.flush()
        self._stop.set()
        self._queue.put(None)
        if self._worker is not None:
            self._worker.join()
        if self._switch is not None:
            sys.setswitchinterval(self._switch)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def flush(self) -> None:
        self._queue.join()

    def ingest_imu(self, sample: ImuSample) -> Optional[np.ndarray]:
        with self._lock:
            return self._advance(sample)

    def ingest_image(self, m: TimestampedImageMeasurement) -> None:
        self._queue.put(m)

    def _run(self) -> None:
        while not self._stop.is_set():
            m = self._queue.get()
            try:
                if m is None:
                    return
                self._process(m)
            except Exception:  # keep the worker alive; the fault is logged
                logger.exception("vision worker failed on image %.3f", m.capture_time)
            finally:
                self._queue.task_done()

    def _process(self, m: TimestampedImageMeasurement) -> None:
        while True:
            with self._lock:
                ready = self.live.imu is not None and \
                    m.capture_time <= self.live.t + self._half_period
                if ready:
                    i = self.snapshots.find(m.capture_time, self._half_period)
                    base = self.snapshots[i] if i is not None else None
                    tail = self.snapshots.after(i) if i is not None else []
            if ready:
                break
            time.sleep(1e-4)
        if base is None:
            with self._lock:
                self.faults["image_too_old"] += 1
            return
        if self.vision_stall:
            time.sleep(self.vision_stall)
        stop = (lambda: not self._queue.empty()) if self.anytime else None
        snap = image_step(base, m.observation, self.cfg, stop)
        if snap.stats.visual_skipped > base.stats.visual_skipped:
            self.truncated_images += 1
        replayed = [snap]
        for old in tail:
            snap = imu_step(snap, old.imu, self.cfg.params)
            replayed.append(snap)
        while True:
            with self._lock:
                if self.live.k == snap.k:
                    self._commit(replayed)
                    return
                i = self.snapshots.find(snap.t, self._half_period)
                tail = self.snapshots.after(i) if i is not None else []
            for old in tail:
                snap = imu_step(snap, old.imu, self.cfg.params)
                replayed.append(snap)


def replay_deterministic(imu_samples, frames, x0, P0, cfg: EstimatorConfig = EstimatorConfig()):
    """Process every event in timestamp order on one thread; returns the estimate array."""
    pipe = FusionPipeline(x0, P0, cfg)
    frames = list(frames)
    j = 0
    half = 0.5 / cfg.imu_rate
    for s in imu_samples:
        pipe.ingest_imu(s)
        while j < len(frames) and frames[j].t <= s.t + half:
            pipe.ingest_image(TimestampedImageMeasurement(frames[j].t, frames[j]))
            j += 1
    return pipe.estimates()
