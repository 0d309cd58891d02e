"""Rink coordinate frame, heatmap frame and the scaling transform between them.

Rink coordinates are feet with the origin at one corner of the ice:
``x`` runs along the 200 ft length, ``y`` across the 85 ft width. ``x = 0``
is the end boards on the defending side, as seen from the broadcast camera.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Sequence

import numpy as np

RINK_LENGTH = 200.0
RINK_WIDTH = 85.0

BLUE_LINES = (75.0, 125.0)
CENTER_LINE = 100.0


class DomainError(ValueError):
    """A coordinate lies outside the frame it claims to belong to."""


@dataclass(frozen=True)
class RinkPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (0.0 <= self.x <= RINK_LENGTH and 0.0 <= self.y <= RINK_WIDTH):
            raise DomainError(f"rink point ({self.x}, {self.y}) is outside the 200x85 ft rink")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass(frozen=True)
class HeatmapPoint:
    """Continuous heatmap position; ``u`` is the column axis, ``v`` the row axis."""

    u: float
    v: float


@dataclass(frozen=True)
class ScalingTransform:
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("heatmap dimensions must be integers")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"heatmap dimensions must be positive, got {self.width}x{self.height}")

    @property
    def sx(self) -> float:
        return self.width / RINK_LENGTH

    @property
    def sy(self) -> float:
        return self.height / RINK_WIDTH

    @property
    def matrix(self) -> np.ndarray:
        """Homogeneous 3x3 form of the transform."""
        return np.diag([self.sx, self.sy, 1.0])

    @property
    def half_cell_ft(self) -> tuple[float, float]:
        """Worst-case argmax quantization error per axis, in feet."""
        return 0.5 * RINK_LENGTH / self.width, 0.5 * RINK_WIDTH / self.height


def make_scaling_transform(width: int, height: int) -> ScalingTransform:
    return ScalingTransform(width, height)


def rink_to_heatmap(t: ScalingTransform, p: RinkPoint) -> HeatmapPoint:
    if not isinstance(p, RinkPoint):
        p = RinkPoint(*p)
    return HeatmapPoint(p.x * t.width / RINK_LENGTH, p.y * t.height / RINK_WIDTH)


def heatmap_to_rink(t: ScalingTransform, q: HeatmapPoint) -> RinkPoint:
    if not (0.0 <= q.u <= t.width and 0.0 <= q.v <= t.height):
        raise DomainError(f"heatmap point ({q.u}, {q.v}) is outside the {t.width}x{t.height} grid")
    # Rounding can push the far edge a few ulps past the boards.
    x = min(q.u * RINK_LENGTH / t.width, RINK_LENGTH)
    y = min(q.v * RINK_WIDTH / t.height, RINK_WIDTH)
    return RinkPoint(x, y)


@dataclass(frozen=True)
class ZonePartition:
    """Split of the rink into zones along its length.

    ``cut_xs`` are the interior boundaries; a point lying exactly on a cut
    belongs to the zone on its higher-x side.
    """

    cut_xs: tuple[float, ...]
    labels: tuple[str, ...]

    def __post_init__(self):
        cuts = tuple(float(c) for c in self.cut_xs)
        labels = tuple(self.labels)
        object.__setattr__(self, "cut_xs", cuts)
        object.__setattr__(self, "labels", labels)
        if any(not 0.0 < c < RINK_LENGTH for c in cuts):
            raise ValueError(f"zone cuts must lie strictly inside (0, {RINK_LENGTH}): {cuts}")
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ValueError(f"zone cuts must be strictly ascending: {cuts}")
        if len(labels) != len(cuts) + 1:
            raise ValueError(f"{len(cuts)} cuts need {len(cuts) + 1} labels, got {len(labels)}")
        if len(set(labels)) != len(labels):
            raise ValueError(f"zone labels must be unique: {labels}")

    @property
    def mirrored(self) -> bool:
        """True when the partition splits offensive/defensive zones into halves."""
        return len(self.labels) > 3

    def index_of(self, x: float) -> int:
        return bisect.bisect_right(self.cut_xs, x)

    def intervals(self) -> list[tuple[float, float]]:
        edges = (0.0, *self.cut_xs, RINK_LENGTH)
        return list(zip(edges[:-1], edges[1:]))


THREE_ZONES = ZonePartition((75.0, 125.0), ("defensive", "neutral", "offensive"))
FIVE_ZONES = ZonePartition(
    (37.5, 75.0, 125.0, 162.5),
    ("defensive-deep", "defensive-high", "neutral", "offensive-high", "offensive-deep"),
)


def zone_partition(n_zones: int) -> ZonePartition:
    if n_zones == 3:
        return THREE_ZONES
    if n_zones == 5:
        return FIVE_ZONES
    raise ValueError(f"no built-in {n_zones}-zone partition; supply cuts and labels")


def zone_of(p: RinkPoint, zp: ZonePartition) -> str:
    return zp.labels[zp.index_of(p.x)]


def zone_indices(xs: Sequence[float] | np.ndarray, zp: ZonePartition) -> np.ndarray:
    """Vectorised ``zone_of`` returning label indices."""
    return np.searchsorted(np.asarray(zp.cut_xs), np.asarray(xs, dtype=np.float64), side="right")
