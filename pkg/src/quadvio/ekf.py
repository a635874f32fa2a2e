"""Model-aided EKF: drag-model prediction, accelerometer and epipolar updates.

State layout (15 nominal + optional 6 key-frame pose)::

    0:3   position of {B} in {W}           m
    3:6   ZYX Euler angles (roll, pitch, yaw)  rad
    6:9   body-frame velocity                m/s
    9:12  accelerometer bias                 m/s^2
    12:15 gyroscope bias                     rad/s
    15:18 key-frame position                 m
    18:21 key-frame Euler angles             rad
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import (
    GIMBAL_EPS,
    R_BODY_CAMERA,
    CameraIntrinsics,
    check_gimbal,
    euler_to_rotation,
    rotation_derivatives,
    skew,
    wrap_angle,
    xi_matrix,
    xi_rate_jacobian,
)

P, TH, V, BA, BG = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)
AP, ATH = slice(15, 18), slice(18, 21)
N_NOMINAL = 15
N_AUGMENTED = 21
POSE = np.r_[0:6]

VAR_FLOOR = 1e-18
DEGENERATE_BASELINE = 1e-6


class EstimatorFault(RuntimeError):
    """Unrecoverable estimator condition (gimbal breach, covariance failure)."""


@dataclass(frozen=True)
class NoiseParams:
    """Per-sample noise variances at the IMU rate plus pixel noise.

    ``model_var`` is the drag-model error on the velocity derivative; the
    bias random walks are continuous-time intensities (zero keeps the biases
    constant).  ``pixel_sigma`` is what the filter assumes, deliberately
    larger than the simulator's pixel noise: key-frame pixels are shared by
    every update against that key-frame, so their errors are correlated and
    a white-noise model at the true sigma is overconfident.
    """

    model_var: float = 0.25
    gyro_var: float = 0.005
    accel_var: float = 0.25
    pixel_sigma: float = 3.0
    accel_bias_rw: float = 1e-4
    gyro_bias_rw: float = 0.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative")


@dataclass(frozen=True)
class EstimatorParams:
    drag_k1: float = 0.35
    gravity: float = 9.81
    noise: NoiseParams = field(default_factory=NoiseParams)
    camera: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(450.0, 450.0, 320.0, 240.0))
    gate_sigma: float = 2.0
    gate_mode: str = "normalized"
    accel_gate_sigma: float = 5.0
    use_fej: bool = False
    gimbal_eps: float = GIMBAL_EPS
    # "sampson": residual divided by its first-order pixel-noise std over both
    # images; "algebraic": raw residual with current-image noise only.
    residual_model: str = "sampson"
    # images whose estimated key-frame baseline is below this multiple of its
    # own standard deviation are not used (0 disables the check)
    min_baseline_snr: float = 2.0

    def __post_init__(self):
        if self.gate_mode not in ("normalized", "raw", "off"):
            raise ValueError(f"unknown gate mode {self.gate_mode!r}")
        if self.residual_model not in ("sampson", "algebraic"):
            raise ValueError(f"unknown residual model {self.residual_model!r}")


@dataclass(frozen=True)
class KeyframeAnchor:
    """Key-frame bookkeeping; the live pose estimate sits in ``FilterState.x[15:21]``."""

    first_estimate: np.ndarray  # (6,) pose frozen at augmentation
    t: float
    snapshot: dict  # feature id -> (u, v)


@dataclass(frozen=True)
class FilterState:
    x: np.ndarray
    anchor: Optional[KeyframeAnchor] = None

    def __post_init__(self):
        n = N_AUGMENTED if self.anchor is not None else N_NOMINAL
        if self.x.shape != (n,):
            raise ValueError(f"state must have {n} elements, got {self.x.shape}")

    @property
    def dim(self) -> int:
        return self.x.shape[0]

    @property
    def position(self):
        return self.x[P]

    @property
    def theta(self):
        return self.x[TH]

    @property
    def velocity(self):
        return self.x[V]

    @property
    def accel_bias(self):
        return self.x[BA]

    @property
    def gyro_bias(self):
        return self.x[BG]

    @property
    def anchor_pose(self):
        return None if self.anchor is None else self.x[15:21]


@dataclass(frozen=True)
class CorrespondencePair:
    feature_id: int
    prev: np.ndarray  # key-frame pixel (u, v)
    curr: np.ndarray  # current pixel (u, v)


@dataclass(frozen=True)
class InitialCovariance:
    position: float = 1e-4
    roll_pitch: float = 1e-4
    yaw: float = 1e-6
    velocity: float = 1e-2
    accel_bias: float = 0.04
    gyro_bias: float = 1e-4

    def matrix(self) -> np.ndarray:
        d = np.r_[[self.position] * 3, self.roll_pitch, self.roll_pitch, self.yaw,
                  [self.velocity] * 3, [self.accel_bias] * 3, [self.gyro_bias] * 3]
        return np.diag(d)


def symmetrize(P):
    return 0.5 * (P + P.T)


def _normalize_angles(x):
    x[3] = wrap_angle(x[3])
    x[5] = wrap_angle(x[5])
    if x.shape[0] > 15:
        x[18] = wrap_angle(x[18])
        x[20] = wrap_angle(x[20])
    return x


# ---------------------------------------------------------------------------
# process model


def process_derivative(x, gyro, accel_z, k1, g, eps=GIMBAL_EPS):
    """Continuous-time derivative of the 15-element nominal state."""
    theta = x[TH]
    v = x[V]
    w = gyro - x[BG]
    R = euler_to_rotation(theta, eps)
    f = np.zeros(N_NOMINAL)
    f[P] = R @ v
    f[TH] = xi_matrix(theta, eps) @ w
    # R.T @ (g e3) is g times the third row of R
    f[6] = g * R[2, 0] - k1 * v[0] - (w[1] * v[2] - w[2] * v[1])
    f[7] = g * R[2, 1] - k1 * v[1] - (w[2] * v[0] - w[0] * v[2])
    f[8] = g * R[2, 2] + (accel_z - x[11]) - (w[0] * v[1] - w[1] * v[0])
    return f


def process_jacobian(x, gyro, accel_z, k1, g, eps=GIMBAL_EPS):
    """d(process_derivative)/dx and the 15x4 noise map for (gyro, accel_z)."""
    theta = x[TH]
    v = x[V]
    w = gyro - x[BG]
    R = euler_to_rotation(theta, eps)
    dRs = rotation_derivatives(theta)
    Xi = xi_matrix(theta, eps)
    A = np.zeros((N_NOMINAL, N_NOMINAL))
    for i, dR in enumerate(dRs):
        A[0:3, 3 + i] = dR @ v
        A[6:9, 3 + i] = g * dR[2]
    A[0:3, 6:9] = R
    A[3:6, 3:6] = xi_rate_jacobian(theta, w)
    A[3:6, 12:15] = -Xi
    A[6:9, 6:9] = np.array([
        [-k1, w[2], -w[1]],
        [-w[2], -k1, w[0]],
        [w[1], -w[0], 0.0],
    ])
    A[8, 11] = -1.0
    vx = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    A[6:9, 12:15] = -vx
    G = np.zeros((N_NOMINAL, 4))
    G[3:6, 0:3] = Xi
    G[6:9, 0:3] = vx
    G[8, 3] = 1.0
    return A, G


def discrete_step(x, imu, dt, params: EstimatorParams, imu_next=None):
    """Mean propagation over ``dt`` and its exact Jacobian (nominal block).

    With ``imu_next`` the step is Heun's method (trapezoid over both
    samples), otherwise explicit Euler with ``imu`` held.
    """
    k1, g, eps = params.drag_k1, params.gravity, params.gimbal_eps
    x = x[:N_NOMINAL]
    f0 = process_derivative(x, imu.gyro, imu.accel[2], k1, g, eps)
    A0, G = process_jacobian(x, imu.gyro, imu.accel[2], k1, g, eps)
    if imu_next is None:
        return x + dt * f0, np.eye(N_NOMINAL) + dt * A0, G
    x1 = x + dt * f0
    check_gimbal(x1[TH], eps)
    f1 = process_derivative(x1, imu_next.gyro, imu_next.accel[2], k1, g, eps)
    A1, _ = process_jacobian(x1, imu_next.gyro, imu_next.accel[2], k1, g, eps)
    F = np.eye(N_NOMINAL) + 0.5 * dt * (A0 + A1 + dt * (A1 @ A0))
    return x + 0.5 * dt * (f0 + f1), F, G


def predict(state: FilterState, P_, imu, dt: float, params: EstimatorParams, imu_next=None):
    """Propagate state and covariance by ``dt`` seconds using ``imu``.

    The key-frame pose, when present, has zero dynamics.
    """
    if not dt > 0:
        raise ValueError(f"non-positive time step {dt}")
    try:
        check_gimbal(state.theta, params.gimbal_eps)
        xn, F, G = discrete_step(state.x, imu, dt, params, imu_next)
        check_gimbal(xn[TH], params.gimbal_eps)
    except ValueError as exc:
        raise EstimatorFault(str(exc)) from exc
    nz = params.noise
    Qc = G @ np.diag([nz.gyro_var] * 3 + [nz.accel_var]) @ G.T
    Q = (dt * dt) * Qc
    Q[6, 6] += dt * dt * nz.model_var
    Q[7, 7] += dt * dt * nz.model_var
    Q[8, 8] += dt * dt * nz.model_var
    if nz.accel_bias_rw:
        Q[9:12, 9:12] += dt * nz.accel_bias_rw * np.eye(3)
    if nz.gyro_bias_rw:
        Q[12:15, 12:15] += dt * nz.gyro_bias_rw * np.eye(3)

    x = state.x.copy()
    x[:N_NOMINAL] = xn
    _normalize_angles(x)
    n = state.dim
    if n == N_NOMINAL:
        Pn = F @ P_ @ F.T + Q
    else:
        Pn = np.empty_like(P_)
        FP = F @ P_[:15, :]
        Pn[:15, :15] = FP[:, :15] @ F.T + Q
        Pn[:15, 15:] = FP[:, 15:]
        Pn[15:, :15] = FP[:, 15:].T
        Pn[15:, 15:] = P_[15:, 15:]
    return FilterState(x, state.anchor), symmetrize(Pn)


# ---------------------------------------------------------------------------
# accelerometer update


def accel_measurement(state: FilterState, k1: float):
    """Predicted x/y accelerometer reading of the drag model and its Jacobian."""
    v, ba = state.velocity, state.accel_bias
    h = np.array([-k1 * v[0] + ba[0], -k1 * v[1] + ba[1]])
    H = np.zeros((2, state.dim))
    H[0, 6] = -k1
    H[1, 7] = -k1
    H[0, 9] = 1.0
    H[1, 10] = 1.0
    return h, H


def update_accel(state: FilterState, P_, accel_xy, params: EstimatorParams):
    """EKF update with the x/y accelerometer channels.

    Returns ``(state, P, accepted, innovation)``.  Innovations beyond
    ``accel_gate_sigma`` (Mahalanobis) are dropped.
    """
    h, H = accel_measurement(state, params.drag_k1)
    nu = np.asarray(accel_xy, dtype=float) - h
    PHt = P_[:, [6, 7]] * (-params.drag_k1) + P_[:, [9, 10]]
    S = H @ PHt + params.noise.accel_var * np.eye(2)
    Sinv = np.linalg.inv(S)
    if params.accel_gate_sigma and nu @ Sinv @ nu > params.accel_gate_sigma ** 2:
        return state, P_, False, nu
    Kg = PHt @ Sinv
    x = state.x + Kg @ nu
    _normalize_angles(x)
    Pn = symmetrize(P_ - Kg @ PHt.T)
    return FilterState(x, state.anchor), Pn, True, nu


# ---------------------------------------------------------------------------
# epipolar measurement


def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def _body_ray(K: CameraIntrinsics, uv):
    # R_BODY_CAMERA @ [x, y, 1] for normalized camera coordinates (x, y)
    return np.array([1.0, (uv[0] - K.cx) / K.fx, (uv[1] - K.cy) / K.fy])


def _epipolar_terms(K: CameraIntrinsics, pair: CorrespondencePair, pose, anchor_pose):
    b_c = _body_ray(K, pair.curr)
    b_k = _body_ray(K, pair.prev)
    R = euler_to_rotation(pose[3:6])
    c = R @ b_c
    q = euler_to_rotation(anchor_pose[3:6]) @ b_k
    p_d = anchor_pose[0:3] - pose[0:3]
    return b_c, b_k, c, q, p_d


def epipolar_residual(state: FilterState, K: CameraIntrinsics, pair: CorrespondencePair,
                      use_fej: bool = False):
    """Scalar epipolar value and its Jacobian row over the full state.

    The residual is ``p_c^T K^-T E K^-1 p_k`` with E built from the current
    pose and the key-frame pose.  With ``use_fej`` every Jacobian term that
    involves the key-frame pose is evaluated at the anchor's first estimate
    instead of its updated value.  Returns ``(residual, H, degenerate)``.
    """
    if state.anchor is None:
        raise ValueError("epipolar residual needs a key-frame anchor")
    x = state.x
    pose, anchor_pose = x[0:6], x[15:21]
    _, _, c, q, p_d = _epipolar_terms(K, pair, pose, anchor_pose)
    h = float(p_d @ _cross(q, c))
    degenerate = float(np.linalg.norm(p_d)) < DEGENERATE_BASELINE

    lin_anchor = state.anchor.first_estimate if use_fej else anchor_pose
    b_c, b_k, c, q, p_d = _epipolar_terms(K, pair, pose, lin_anchor)
    qxc = _cross(q, c)
    H = np.zeros(state.dim)
    H[P] = -qxc
    H[AP] = qxc
    pdxq = _cross(p_d, q)
    for i, dR in enumerate(rotation_derivatives(pose[3:6])):
        H[3 + i] = pdxq @ (dR @ b_c)
    cxpd = _cross(c, p_d)
    for i, dR in enumerate(rotation_derivatives(lin_anchor[3:6])):
        H[18 + i] = cxpd @ (dR @ b_k)
    return h, H, degenerate


def epipolar_gradient(state: FilterState, K: CameraIntrinsics, pair: CorrespondencePair):
    """``g = K^-T E K^-1 p_k``: the epipolar line of the key-frame pixel in the current image."""
    x = state.x
    R_wc = euler_to_rotation(x[TH]) @ R_BODY_CAMERA
    q = euler_to_rotation(x[ATH]) @ _body_ray(K, pair.prev)
    m = R_wc.T @ _cross(x[AP] - x[P], q)
    return K.K_inv.T @ m


def keyframe_gradient(state: FilterState, K: CameraIntrinsics, pair: CorrespondencePair):
    """Gradient of the residual with respect to the key-frame pixel (homogeneous, 3-vector)."""
    x = state.x
    c = euler_to_rotation(x[TH]) @ _body_ray(K, pair.curr)
    R_wc_k = euler_to_rotation(x[ATH]) @ R_BODY_CAMERA
    return K.K_inv.T @ (R_wc_k.T @ _cross(c, x[AP] - x[P]))


def visual_noise_variance(state: FilterState, K: CameraIntrinsics, pair: CorrespondencePair,
                          pixel_sigma: float) -> float:
    """Residual variance from pixel noise on the current image only."""
    if not pixel_sigma > 0:
        raise ValueError("pixel sigma must be positive")
    g = epipolar_gradient(state, K, pair)
    return max(pixel_sigma ** 2 * (g[0] ** 2 + g[1] ** 2), VAR_FLOOR)


def _pixel_rows(K: CameraIntrinsics) -> np.ndarray:
    # first two rows of K^-T R_CB: body vector -> (d/du, d/dv) of the residual
    return np.array([[0.0, 1.0 / K.fx, 0.0], [0.0, 0.0, 1.0 / K.fy]])


def sampson_scale(state: FilterState, K: CameraIntrinsics, pair: CorrespondencePair):
    """First-order residual std per unit pixel noise, with its state gradient.

    ``n^2 = |dh/dp_curr|^2 + |dh/dp_key|^2`` over the two pixel coordinates
    of each image.  Returns ``(n, dn/dx)``.
    """
    x = state.x
    A = _pixel_rows(K)
    AtA = A.T @ A
    b_c = _body_ray(K, pair.curr)
    b_k = _body_ray(K, pair.prev)
    R = euler_to_rotation(x[TH])
    Ra = euler_to_rotation(x[ATH])
    c = R @ b_c
    q = Ra @ b_k
    p_d = x[AP] - x[P]
    u = R.T @ _cross(p_d, q)
    v = Ra.T @ _cross(c, p_d)
    n = math.sqrt(float(u @ AtA @ u + v @ AtA @ v))
    du, dv = AtA @ u, AtA @ v
    grad = np.zeros(state.dim)
    if n == 0.0:
        return 0.0, grad
    Sq, Sc = skew(q), skew(c)
    grad[P] = du @ (R.T @ Sq) - dv @ (Ra.T @ Sc)
    grad[AP] = -grad[P]
    for i, dR in enumerate(rotation_derivatives(x[TH])):
        grad[3 + i] = du @ (dR.T @ _cross(p_d, q)) + dv @ (Ra.T @ _cross(dR @ b_c, p_d))
    for i, dRa in enumerate(rotation_derivatives(x[ATH])):
        grad[18 + i] = du @ (R.T @ _cross(p_d, dRa @ b_k)) + dv @ (dRa.T @ _cross(c, p_d))
    return n, grad / n


def _sampson_terms(state: FilterState, K: CameraIntrinsics, pair: CorrespondencePair):
    """Single pass over shared terms: ``(h, H, degenerate, n, dn/dx)``."""
    x = state.x
    b_c, b_k = _body_ray(K, pair.curr), _body_ray(K, pair.prev)
    R, Ra = euler_to_rotation(x[TH]), euler_to_rotation(x[ATH])
    dR = np.array(rotation_derivatives(x[TH]))
    dRa = np.array(rotation_derivatives(x[ATH]))
    c, q = R @ b_c, Ra @ b_k
    p_d = x[AP] - x[P]
    qxc, pdxq, cxpd = _cross(q, c), _cross(p_d, q), _cross(c, p_d)
    dRb, dRab = dR @ b_c, dRa @ b_k
    h = float(p_d @ qxc)
    degenerate = float(np.linalg.norm(p_d)) < DEGENERATE_BASELINE
    H = np.zeros(state.dim)
    H[P], H[AP] = -qxc, qxc
    H[TH] = dRb @ pdxq
    H[ATH] = dRab @ cxpd
    w = np.array([0.0, 1.0 / K.fx ** 2, 1.0 / K.fy ** 2])  # diag of A^T A
    u, v = R.T @ pdxq, Ra.T @ cxpd
    du, dv = w * u, w * v
    n = math.sqrt(float(u @ du + v @ dv))
    grad = np.zeros(state.dim)
    if n == 0.0:
        return h, H, degenerate, 0.0, grad
    Rdu, Rdv = R @ du, Ra @ dv
    grad[P] = _cross(Rdu, q) - _cross(Rdv, c)
    grad[AP] = -grad[P]
    grad[TH] = (dR @ du) @ pdxq + dRb @ _cross(p_d, Rdv)
    grad[ATH] = dRab @ _cross(Rdu, p_d) + (dRa @ dv) @ cxpd
    return h, H, degenerate, n, grad / n


def sampson_residual(state: FilterState, K: CameraIntrinsics, pair: CorrespondencePair,
                     use_fej: bool = False):
    """Epipolar residual scaled to unit pixel noise.

    Dividing by ``n`` removes the residual's proportionality to the baseline,
    so noisy pixels no longer pull the translation estimate toward zero.
    Returns ``(r, H, degenerate)``; ``r`` has variance ``sigma^2`` at the
    true state.
    """
    if state.anchor is None:
        raise ValueError("epipolar residual needs a key-frame anchor")
    if use_fej:
        h, H, degenerate = epipolar_residual(state, K, pair, use_fej)
        n, dn = sampson_scale(state, K, pair)
    else:
        h, H, degenerate, n, dn = _sampson_terms(state, K, pair)
    if degenerate or n < 1e-12:
        return h, H, True
    return h / n, H / n - (h / (n * n)) * dn, degenerate


def baseline_snr(state: FilterState, P_) -> float:
    """Estimated key-frame baseline length over its sideways standard deviation.

    The epipolar constraint only fixes the direction of the baseline, and
    that direction is set by the uncertainty perpendicular to it.  When the
    baseline estimate is buried in that uncertainty the direction is
    arbitrary and a linearized update would inject information that does
    not exist.
    """
    if state.anchor is None:
        return 0.0
    p_d = state.x[AP] - state.x[P]
    norm = float(np.linalg.norm(p_d))
    if norm == 0.0:
        return 0.0
    S = P_[AP, AP] + P_[P, P] - P_[AP, P] - P_[P, AP]
    d = p_d / norm
    var = float(np.trace(S) - d @ S @ d)
    return math.inf if var <= 0.0 else norm / math.sqrt(var)


def gate_outlier(residual: float, S: float, sigma: float = 2.0) -> bool:
    """True when the normalized innovation ``|r| / sqrt(S)`` is within ``sigma``."""
    if not S > 0:
        raise ValueError("innovation variance must be positive")
    return abs(residual) <= sigma * math.sqrt(S)


def visual_measurement(state: FilterState, pair: CorrespondencePair, params: EstimatorParams,
                       pixel_sigma: float):
    """Residual, Jacobian row and noise variance under ``params.residual_model``."""
    K = params.camera
    if params.residual_model == "sampson":
        h, H, degenerate = sampson_residual(state, K, pair, params.use_fej)
        return h, H, max(pixel_sigma ** 2, VAR_FLOOR), degenerate
    h, H, degenerate = epipolar_residual(state, K, pair, params.use_fej)
    return h, H, visual_noise_variance(state, K, pair, pixel_sigma), degenerate


@dataclass
class VisualUpdateResult:
    accepted: bool
    residual: float
    S: float
    degenerate: bool = False


def visual_update(state: FilterState, P_, pair: CorrespondencePair, params: EstimatorParams,
                  pixel_sigma: Optional[float] = None):
    """Perfect-measurement update forcing the epipolar residual to zero.

    Returns ``(state, P, result)``; a gated or degenerate pair leaves the
    state untouched.
    """
    sigma = params.noise.pixel_sigma if pixel_sigma is None else pixel_sigma
    h, H, Rvo, degenerate = visual_measurement(state, pair, params, sigma)
    if degenerate:
        return state, P_, VisualUpdateResult(False, h, 0.0, True)
    PHt = P_ @ H
    S = float(H @ PHt) + Rvo
    innovation = -h
    if params.gate_mode == "normalized":
        ok = gate_outlier(innovation, S, params.gate_sigma)
    elif params.gate_mode == "raw":
        # residual in pixel units against the fixed 2-sigma_i threshold, no state term
        ok = abs(h) <= params.gate_sigma * math.sqrt(Rvo)
    else:
        ok = True
    if not ok:
        return state, P_, VisualUpdateResult(False, h, S)
    Kg = PHt / S
    x = state.x + Kg * innovation
    _normalize_angles(x)
    Pn = P_ - np.outer(Kg, PHt)
    return FilterState(x, state.anchor), symmetrize(Pn), VisualUpdateResult(True, h, S)


# ---------------------------------------------------------------------------
# augmentation


def marginalize_anchor(state: FilterState, P_):
    if state.anchor is None:
        return state, P_
    return FilterState(state.x[:N_NOMINAL].copy(), None), P_[:N_NOMINAL, :N_NOMINAL].copy()


def augment_state(state: FilterState, P_, t: float, snapshot: dict):
    """Clone the current pose as the new key-frame, dropping any previous one."""
    state, P_ = marginalize_anchor(state, P_)
    pose = state.x[POSE].copy()
    x = np.concatenate([state.x, pose])
    Pn = np.empty((N_AUGMENTED, N_AUGMENTED))
    Pn[:15, :15] = P_
    Pn[:15, 15:] = P_[:, POSE]
    Pn[15:, :15] = P_[POSE, :]
    Pn[15:, 15:] = P_[np.ix_(POSE, POSE)]
    anchor = KeyframeAnchor(pose.copy(), float(t), dict(snapshot))
    return FilterState(x, anchor), Pn


def initial_state(x0, P0=None, **kw) -> tuple[FilterState, np.ndarray]:
    x = np.asarray(x0, dtype=float).copy()
    if P0 is None:
        P0 = InitialCovariance(**kw).matrix()
    return FilterState(x), np.array(P0, dtype=float)
