"""Gaussian target heatmaps and argmax decoding."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal, NamedTuple

import numpy as np
from PIL import Image

from .rink import (
    RINK_LENGTH,
    RINK_WIDTH,
    DomainError,
    HeatmapPoint,
    RinkPoint,
    ScalingTransform,
    heatmap_to_rink,
    rink_to_heatmap,
)


@dataclass(frozen=True)
class TargetSpec:
    """Ground-truth heatmap recipe.

    With ``unit="cells"`` the Gaussian is isotropic on the heatmap grid. With
    ``unit="feet"`` it is isotropic on the rink, so the per-axis widths in
    cells differ because the rink is not square. ``normalize`` rescales the
    target to sum to one instead of peaking at one.
    """

    sigma: float
    width: int = 64
    height: int = 64
    unit: Literal["cells", "feet"] = "cells"
    normalize: bool = False

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.unit not in ("cells", "feet"):
            raise ValueError(f"unknown sigma unit {self.unit!r}")
        if self.width < 1 or self.height < 1:
            raise ValueError("heatmap dimensions must be positive")

    @property
    def sigma_cells(self) -> tuple[float, float]:
        """Per-axis standard deviation in cells, (columns, rows)."""
        if self.unit == "cells":
            return float(self.sigma), float(self.sigma)
        t = ScalingTransform(self.width, self.height)
        return self.sigma * t.sx, self.sigma * t.sy

    @property
    def transform(self) -> ScalingTransform:
        return ScalingTransform(self.width, self.height)


def render_target(spec: TargetSpec, mean: HeatmapPoint) -> np.ndarray:
    """Evaluate the Gaussian at every cell centre; returns an (H, W) float64 grid."""
    if not (0.0 <= mean.u <= spec.width and 0.0 <= mean.v <= spec.height):
        raise DomainError(f"target mean ({mean.u}, {mean.v}) outside the {spec.width}x{spec.height} grid")
    su, sv = spec.sigma_cells
    cols = np.arange(spec.width, dtype=np.float64) + 0.5
    rows = np.arange(spec.height, dtype=np.float64) + 0.5
    gx = np.exp(-((cols - mean.u) ** 2) / (2.0 * su * su))
    gy = np.exp(-((rows - mean.v) ** 2) / (2.0 * sv * sv))
    h = np.outer(gy, gx)
    if spec.normalize:
        h /= h.sum()
    return h


def render_rink_target(spec: TargetSpec, p: RinkPoint) -> np.ndarray:
    return render_target(spec, rink_to_heatmap(spec.transform, p))


class Decoded(NamedTuple):
    point: HeatmapPoint
    confident: bool


def decode_argmax(h: np.ndarray) -> Decoded:
    """Cell centre of the largest entry.

    Ties go to the lowest row, then the lowest column (row-major first
    occurrence). A heatmap with no distinct peak decodes to the grid centre
    with ``confident=False``.
    """
    h = np.asarray(h)
    if h.ndim != 2 or h.size == 0:
        raise ValueError(f"expected a non-empty 2-D heatmap, got shape {h.shape}")
    rows, cols = h.shape
    hi, lo = h.max(), h.min()
    if not np.isfinite(hi) or hi == lo:
        return Decoded(HeatmapPoint(cols / 2.0, rows / 2.0), False)
    r, c = divmod(int(np.argmax(h)), cols)
    return Decoded(HeatmapPoint(c + 0.5, r + 0.5), True)


def decode_to_rink(h: np.ndarray, t: ScalingTransform) -> RinkPoint:
    h = np.asarray(h)
    if h.shape != (t.height, t.width):
        raise ValueError(f"heatmap shape {h.shape} does not match transform {t.height}x{t.width}")
    return heatmap_to_rink(t, decode_argmax(h).point)


def decode_batch(hs: np.ndarray, t: ScalingTransform) -> tuple[np.ndarray, np.ndarray]:
    """Decode an (N, H, W) stack to rink coordinates.

    Returns an (N, 2) array of (x, y) feet and an (N,) confidence mask.
    """
    hs = np.asarray(hs)
    n = hs.shape[0]
    flat = hs.reshape(n, -1)
    idx = flat.argmax(axis=1)
    r, c = np.divmod(idx, hs.shape[2])
    confident = flat.max(axis=1) > flat.min(axis=1)
    u = np.where(confident, c + 0.5, hs.shape[2] / 2.0)
    v = np.where(confident, r + 0.5, hs.shape[1] / 2.0)
    xy = np.stack([u * RINK_LENGTH / t.width, v * RINK_WIDTH / t.height], axis=1)
    return xy, confident


def save_heatmap_png(h: np.ndarray, path: str | Path) -> None:
    """8-bit greyscale dump: values clipped to [0, 1] and scaled by 255, row 0 at the top."""
    img = np.rint(np.clip(np.asarray(h, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def save_heatmap_text(h: np.ndarray, path: str | Path) -> None:
    np.savetxt(path, np.asarray(h, dtype=np.float64), fmt="%.9f")


def load_heatmap_text(path: str | Path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, dtype=np.float64))
