"""Rotation parametrization, camera model and small linear-algebra kernels.

Conventions used throughout the package:

* World frame {W} is z-down (NED-like); gravity is ``+g * e3``.
* Body frame {B}: x forward, y right, z down (propeller plane is x-y).
* ``euler_to_rotation(theta)`` returns the body-to-world rotation
  ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``, so ``p_world = R @ p_body``.
* Camera frame {C}: z along the optical axis, x right, y down.  The optical
  axis is aligned with body x and the camera origin coincides with the body
  origin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GIMBAL_EPS = 0.1

# Columns are the camera axes expressed in the body frame: camera x -> body y,
# camera y -> body z, camera z (optical axis) -> body x.
R_BODY_CAMERA = np.array(
    [[0.0, 0.0, 1.0],
     [1.0, 0.0, 0.0],
     [0.0, 1.0, 0.0]]
)


class GimbalLockError(ValueError):
    """Pitch is too close to +-pi/2 for the ZYX Euler parametrization."""


def check_gimbal(theta, eps: float = GIMBAL_EPS) -> None:
    pitch = float(theta[1])
    if not abs(pitch) < math.pi / 2 - eps:
        raise GimbalLockError(f"pitch {pitch:.4f} rad violates gimbal guard (eps={eps})")


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    if isinstance(a, (float, int, np.floating)):
        w = (float(a) + math.pi) % (2.0 * math.pi) - math.pi
        return math.pi if w == -math.pi else w
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_rotation(theta, eps: float = GIMBAL_EPS) -> np.ndarray:
    """Body-to-world rotation for ZYX Euler angles ``(roll, pitch, yaw)``."""
    check_gimbal(theta, eps)
    phi, th, psi = float(theta[0]), float(theta[1]), float(theta[2])
    cf, sf = math.cos(phi), math.sin(phi)
    ct, st = math.cos(th), math.sin(th)
    cp, sp = math.cos(psi), math.sin(psi)
    return np.array([
        [cp * ct, cp * st * sf - sp * cf, cp * st * cf + sp * sf],
        [sp * ct, sp * st * sf + cp * cf, sp * st * cf - cp * sf],
        [-st, ct * sf, ct * cf],
    ])


def rotation_derivatives(theta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partial derivatives of ``euler_to_rotation`` w.r.t. roll, pitch, yaw."""
    phi, th, psi = float(theta[0]), float(theta[1]), float(theta[2])
    cf, sf = math.cos(phi), math.sin(phi)
    ct, st = math.cos(th), math.sin(th)
    cp, sp = math.cos(psi), math.sin(psi)
    d_phi = np.array([
        [0.0, cp * st * cf + sp * sf, -cp * st * sf + sp * cf],
        [0.0, sp * st * cf - cp * sf, -sp * st * sf - cp * cf],
        [0.0, ct * cf, -ct * sf],
    ])
    d_th = np.array([
        [-cp * st, cp * ct * sf, cp * ct * cf],
        [-sp * st, sp * ct * sf, sp * ct * cf],
        [-ct, -st * sf, -st * cf],
    ])
    d_psi = np.array([
        [-sp * ct, -sp * st * sf - cp * cf, -sp * st * cf + cp * sf],
        [cp * ct, cp * st * sf - sp * cf, cp * st * cf + sp * sf],
        [0.0, 0.0, 0.0],
    ])
    return d_phi, d_th, d_psi


def rotation_to_euler(R) -> np.ndarray:
    """Inverse of ``euler_to_rotation`` away from gimbal lock."""
    R = np.asarray(R, dtype=float)
    pitch = math.atan2(-R[2, 0], math.hypot(R[2, 1], R[2, 2]))
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])


def xi_matrix(theta, eps: float = GIMBAL_EPS) -> np.ndarray:
    """Map body angular rate to ZYX Euler-angle rates: ``dtheta = Xi @ omega``."""
    check_gimbal(theta, eps)
    phi, th = float(theta[0]), float(theta[1])
    cf, sf = math.cos(phi), math.sin(phi)
    ct, tt = math.cos(th), math.tan(th)
    return np.array([
        [1.0, sf * tt, cf * tt],
        [0.0, cf, -sf],
        [0.0, sf / ct, cf / ct],
    ])


def xi_inverse(theta) -> np.ndarray:
    """Map ZYX Euler-angle rates to body angular rate."""
    phi, th = float(theta[0]), float(theta[1])
    cf, sf = math.cos(phi), math.sin(phi)
    ct, st = math.cos(th), math.sin(th)
    return np.array([
        [1.0, 0.0, -st],
        [0.0, cf, sf * ct],
        [0.0, -sf, cf * ct],
    ])


def xi_rate_jacobian(theta, omega) -> np.ndarray:
    """d(Xi(theta) @ omega)/d(theta), a 3x3 matrix (yaw column is zero)."""
    phi, th = float(theta[0]), float(theta[1])
    wy, wz = float(omega[1]), float(omega[2])
    cf, sf = math.cos(phi), math.sin(phi)
    ct, st = math.cos(th), math.sin(th)
    tt = st / ct
    a = sf * wy + cf * wz
    b = cf * wy - sf * wz
    return np.array([
        [b * tt, a / (ct * ct), 0.0],
        [-a, 0.0, 0.0],
        [b / ct, a * st / (ct * ct), 0.0],
    ])


def essential_from_relative_pose(R_wc_current, R_wc_prev, p_d) -> np.ndarray:
    """Essential matrix between a current and a previous camera.

    ``R_wc_*`` map camera coordinates to world coordinates and ``p_d`` is the
    previous camera centre minus the current one, in world coordinates.  For
    corresponding normalized rays ``x_c``, ``x_p`` the result satisfies
    ``x_c.T @ E @ x_p == 0``.
    """
    return np.asarray(R_wc_current).T @ skew(p_d) @ np.asarray(R_wc_prev)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Zero-skew pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ])

    def normalize(self, uv) -> np.ndarray:
        """Pixel coordinates (..., 2) to normalized rays (..., 3) with z = 1."""
        uv = np.asarray(uv, dtype=float)
        x = (uv[..., 0] - self.cx) / self.fx
        y = (uv[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def project(self, points_cam) -> np.ndarray:
        """Camera-frame points (..., 3) to pixel coordinates (..., 2)."""
        pc = np.asarray(points_cam, dtype=float)
        u = self.fx * pc[..., 0] / pc[..., 2] + self.cx
        v = self.fy * pc[..., 1] / pc[..., 2] + self.cy
        return np.stack([u, v], axis=-1)


def homogeneous(u: float, v: float, w: float = 1.0) -> np.ndarray:
    """Homogeneous pixel, normalized so that the last element is 1."""
    if w == 0:
        raise ValueError("point at infinity has no pixel location")
    return np.array([u / w, v / w, 1.0])


def camera_rotation(theta) -> np.ndarray:
    """Camera-to-world rotation for body attitude ``theta``."""
    return euler_to_rotation(theta) @ R_BODY_CAMERA
