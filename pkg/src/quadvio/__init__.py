"""Velocity estimation for a quadrotor from an IMU and a monocular camera.

The estimator fuses a drag-aware inertial model with epipolar constraints
between the current image and a disparity-selected key-frame.
"""
from .ekf import EstimatorFault, EstimatorParams, FilterState, InitialCovariance, NoiseParams
from .pipeline import EstimatorConfig, FusionPipeline, ThreadedPipeline, replay_deterministic
from .sim import SimConfig, preset, run_simulation

__all__ = [
    "EstimatorConfig", "EstimatorFault", "EstimatorParams", "FilterState", "FusionPipeline",
    "InitialCovariance", "NoiseParams", "SimConfig", "ThreadedPipeline", "preset",
    "replay_deterministic", "run_simulation",
]
__version__ = "0.1.0"
