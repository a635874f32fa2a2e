import math

import numpy as np
import pytest

from quadvio.ekf import EstimatorParams, NoiseParams, initial_state, predict
from quadvio.geometry import camera_rotation, essential_from_relative_pose, euler_to_rotation
from quadvio.sim import (PRESETS, FeatureTracker, FeatureWorld, Segment, SimConfig, TrajectoryError,
                         TrueState, generate_trajectory, parse_segments, preset, render_features,
                         run_simulation, specific_force, synthesize_imu)

QUIET = dict(accel_noise_var=0.0, gyro_noise_var=0.0, accel_bias=(0.0, 0.0, 0.0),
             gyro_bias=(0.0, 0.0, 0.0), pixel_sigma=0.0)


def world_velocity(truth):
    return np.array([euler_to_rotation(th) @ v for th, v in zip(truth.theta, truth.velocity)])


def test_hover_is_equilibrium():
    tr = generate_trajectory([Segment("hover", 10.0)])
    assert len(tr) == 2000
    assert np.abs(tr.velocity).max() < 1e-12
    assert np.abs(tr.theta).max() < 1e-12
    np.testing.assert_allclose(tr.thrust, 9.81)


def test_vertical_climb_body_velocity():
    tr = generate_trajectory(parse_segments("climb:10:1.0"))
    after = tr.t > 2.5
    np.testing.assert_allclose(tr.velocity[after], np.tile([0, 0, -1.0], (after.sum(), 1)), atol=1e-12)
    # no lateral drag: the specific force has zero x/y
    f = specific_force(tr.velocity[after], tr.thrust[after], 0.35)
    assert np.abs(f[:, :2]).max() < 1e-12


def test_circle_centripetal_acceleration_by_differentiation():
    rate = 200.0
    tr = generate_trajectory(parse_segments("circle:20:5:1.0"), rate=rate)
    vw = world_velocity(tr)
    acc = np.gradient(vw, 1.0 / rate, axis=0)
    steady = (tr.t > 3.0) & (tr.t < 19.0)
    horiz = np.linalg.norm(acc[steady, :2], axis=1)
    np.testing.assert_allclose(horiz, 0.2, rtol=1e-3)
    np.testing.assert_allclose(np.linalg.norm(vw[steady, :2], axis=1), 1.0, atol=1e-9)


def test_helix_vertical_rate():
    tr = generate_trajectory(parse_segments("circle:10:4:0.8:0:-0.5"))
    vw = world_velocity(tr)
    np.testing.assert_allclose(vw[tr.t > 2.5, 2], -0.5, atol=1e-9)


@pytest.mark.parametrize("name", PRESETS)
def test_presets_respect_gimbal_guard_and_yaw_is_smooth(name):
    tr = generate_trajectory(preset(name))
    assert np.abs(tr.theta[:, 1]).max() < math.pi / 2 - 0.1
    # body rates stay small (no wrap glitches at segment boundaries)
    assert np.abs(tr.omega).max() < 2.0


def test_bad_segments():
    with pytest.raises(TrajectoryError):
        preset("nope")
    with pytest.raises(TrajectoryError):
        parse_segments("spin:3")
    with pytest.raises(TrajectoryError):
        parse_segments("line:3:1,2")


def test_imu_hover_static():
    cfg = SimConfig(**QUIET)
    tr = generate_trajectory([Segment("hover", 1.0, ramp=1.0)])
    imu = synthesize_imu(tr, cfg, np.zeros(3), np.zeros(3))
    np.testing.assert_allclose(imu.accel, np.tile([0, 0, -9.81], (len(tr), 1)))
    assert not imu.gyro.any()


def test_drag_formula():
    f = specific_force([2.0, 0.0, 0.0], 9.81, 0.5)
    assert f[0] == -1.0 and f[1] == 0.0


def test_biased_hover_average_recovers_bias():
    cfg = SimConfig(accel_noise_var=0.25, gyro_noise_var=0.005, seed=3)
    tr = generate_trajectory([Segment("hover", 60.0)])
    ba = np.array([0.2, -0.1, 0.05])
    imu = synthesize_imu(tr, cfg, ba, np.zeros(3), np.random.default_rng(1))
    clean = specific_force(tr.velocity, tr.thrust, cfg.drag_k1)
    mean = (imu.accel - clean).mean(axis=0)
    assert np.all(np.abs(mean - ba) < 3 * math.sqrt(0.25 / len(tr)))


def _tracker(points, **kw):
    cfg = SimConfig(**{**QUIET, **kw})
    world = FeatureWorld(np.asarray(points, dtype=float), np.arange(len(points)))
    return world, FeatureTracker(world, cfg), cfg


def _state(p=(0, 0, 0), th=(0, 0, 0)):
    return TrueState(0.0, np.asarray(p, float), np.asarray(th, float), np.zeros(3), np.zeros(3), 9.81)


@pytest.mark.parametrize("depth", [0.8, 5.0, 60.0])
def test_point_on_optical_axis_hits_principal_point(depth):
    world, tr, cfg = _tracker([[depth, 0.0, 0.0], [-depth, 0.0, 0.0]], min_tracked_features=1)
    obs = render_features(_state(), world, tr)
    assert list(obs.ids) == [0]  # the point behind the camera is dropped
    np.testing.assert_allclose(obs.pixels[0], [cfg.intrinsics.cx, cfg.intrinsics.cy], atol=1e-12)


def test_tracker_must_match_world():
    world, tr, _ = _tracker([[5.0, 0, 0]])
    other = FeatureWorld(world.points.copy(), world.ids.copy())
    with pytest.raises(ValueError):
        render_features(_state(), other, tr)


def test_noiseless_stereo_pair_satisfies_epipolar_constraint():
    cfg = SimConfig(**QUIET)
    rng = np.random.default_rng(0)
    world = FeatureWorld.uniform(cfg, rng)
    tracker = FeatureTracker(world, cfg)
    s0 = _state((0, 0, -10), (0.05, -0.1, 0.3))
    s1 = _state((0.7, -0.4, -10.5), (-0.08, 0.02, 0.45))
    o0 = tracker.observe(s0, None)
    o1 = tracker.observe(s1, None)
    K = cfg.intrinsics
    E = essential_from_relative_pose(camera_rotation(s1.theta), camera_rotation(s0.theta),
                                     s0.position - s1.position)
    common = np.intersect1d(o0.ids, o1.ids)
    assert len(common) > 10
    d0, d1 = o0.as_dict(), o1.as_dict()
    for i in common:
        assert abs(K.normalize(d1[i]) @ E @ K.normalize(d0[i])) < 1e-10


def test_run_simulation_deterministic_and_rates():
    cfg = SimConfig(seed=11)
    segs = preset("default")
    a = run_simulation(cfg, segs, duration=6.0)
    b = run_simulation(cfg, segs, duration=6.0)
    assert np.array_equal(a.imu.accel, b.imu.accel) and np.array_equal(a.imu.gyro, b.imu.gyro)
    assert all(np.array_equal(f.pixels, g.pixels) and np.array_equal(f.ids, g.ids)
               for f, g in zip(a.frames, b.frames))
    assert len(a.imu) == 1200 and len(a.frames) == 60
    ti = a.imu.t
    for f0, f1 in zip(a.frames, a.frames[1:]):
        assert np.sum((ti > f0.t) & (ti <= f1.t)) == 20


def test_frames_valid_and_ids_never_recur():
    cfg = SimConfig(seed=2)
    log = run_simulation(cfg, preset("default"), duration=40.0)
    seen_gone = set()
    prev = set()
    for f in log.frames:
        ids = set(f.ids.tolist())
        assert len(ids) == len(f.ids)
        assert np.all((f.pixels >= 0) & (f.pixels < [cfg.image_width, cfg.image_height]))
        assert not (ids & seen_gone)
        seen_gone |= prev - ids
        prev = ids
    assert np.ptp(log.accel_bias) > 0  # drawn, constant per run


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(imu_rate=200.0, camera_rate=30.0)
    with pytest.raises(ValueError):
        SimConfig(pixel_sigma=-1.0)


def test_prediction_alone_reproduces_noiseless_truth():
    cfg = SimConfig(**QUIET)
    log = run_simulation(cfg, preset("default"), duration=10.0)
    tr = log.truth
    params = EstimatorParams(drag_k1=cfg.drag_k1, gravity=cfg.gravity,
                             noise=NoiseParams(accel_bias_rw=0.0))
    state, P = initial_state(np.r_[tr.position[0], tr.theta[0], tr.velocity[0], np.zeros(6)])
    samples = log.imu.samples()
    for k in range(1, len(samples)):
        state, P = predict(state, P, samples[k - 1], samples[k].t - samples[k - 1].t, params,
                           imu_next=samples[k])
    assert np.linalg.norm(state.position - tr.position[-1]) < 1e-3
