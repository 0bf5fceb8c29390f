"""Clip-and-Laplace perturbation of uploaded item matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PrivacyConfig:
    """Clip threshold ``delta`` and Laplace scale ``scale`` (both > 0)."""

    delta: float
    scale: float

    def __post_init__(self):
        if not (np.isfinite(self.delta) and self.delta > 0):
            raise ValueError(f"delta must be positive and finite, got {self.delta}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")


def budget(cfg: PrivacyConfig) -> float:
    """Per-entry, per-upload privacy budget ``epsilon = 2 * delta / scale``.

    Clipping bounds each entry to ``[-delta, delta]``, so one entry has
    sensitivity ``2 * delta``; Laplace noise of scale ``s`` then gives
    ``2 * delta / s``.  No composition across entries or rounds is applied.
    """
    return 2.0 * cfg.delta / cfg.scale


def clip(mat: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(mat, -delta, delta)


def perturb(
    item_mat: np.ndarray,
    cfg: PrivacyConfig,
    rng: np.random.Generator,
    noise: bool = True,
) -> np.ndarray:
    """Clamp every entry to ``[-delta, delta]`` then add i.i.d. Laplace(0, s) noise.

    ``noise=False`` keeps the clamp and skips the noise draw.
    """
    item_mat = np.asarray(item_mat, dtype=np.float64)
    if not np.all(np.isfinite(item_mat)):
        raise ValueError("cannot perturb a matrix with non-finite entries")
    out = clip(item_mat, cfg.delta)
    if noise:
        out += rng.laplace(0.0, cfg.scale, size=out.shape)
    return out
