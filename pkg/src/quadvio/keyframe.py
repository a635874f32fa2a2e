"""Disparity-driven key-frame selection."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ekf import CorrespondencePair


@dataclass(frozen=True)
class KeyframeConfig:
    disparity_threshold: float = 10.0  # px
    min_pairs: int = 8
    enabled: bool = True  # False: augment on every image


@dataclass(frozen=True)
class DisparityReport:
    mean_disparity: float
    n_pairs: int
    degenerate: bool


def mean_disparity(pairs: Sequence[CorrespondencePair]) -> DisparityReport:
    """Mean Euclidean pixel displacement between key-frame and current pixels."""
    if not pairs:
        return DisparityReport(0.0, 0, True)
    d = np.array([np.subtract(p.curr, p.prev) for p in pairs], dtype=float)
    return DisparityReport(float(np.mean(np.hypot(d[:, 0], d[:, 1]))), len(pairs), False)


def should_create_keyframe(report: DisparityReport, cfg: KeyframeConfig) -> bool:
    if not cfg.enabled:
        return True
    if report.n_pairs < cfg.min_pairs:
        # starved: re-seed the snapshot with the features visible now
        return True
    return report.mean_disparity >= cfg.disparity_threshold


def match_pairs(snapshot: dict, ids, pixels) -> list[CorrespondencePair]:
    """Pairs for features present in both the key-frame snapshot and the current image."""
    out = []
    for i, uv in zip(ids, pixels):
        prev = snapshot.get(int(i))
        if prev is not None:
            out.append(CorrespondencePair(int(i), np.asarray(prev, dtype=float),
                                          np.asarray(uv, dtype=float)))
    return out
