"""Binary training masks for the occlusion model.

Masks live on reference-frame textures: 1 marks a clean pixel, 0 a corrupted
one.  Two sources are supported: intensity thresholds inside prior regions
(dark sunglasses, intensity-deviating scarves) and pose-stretch detection on
the warp itself.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Tuple

import numpy as np

from . import geometry
from .geometry import ReferenceFrame

SUNGLASSES = "sunglasses"
SCARF = "scarf"
STRETCH = "stretch"

DEFAULT_SUNGLASSES_THRESHOLD = 60.0
DEFAULT_SCARF_THRESHOLD = 50.0


@dataclasses.dataclass(frozen=True)
class PriorRegion:
    """Axis-aligned rectangle in fractional frame coordinates."""

    kind: str
    rect: Tuple[float, float, float, float]   # (x0, y0, x1, y1) in [0, 1]

    def __post_init__(self):
        if self.kind not in (SUNGLASSES, SCARF):
            raise ValueError(f"unknown region kind {self.kind!r}")
        x0, y0, x1, y1 = self.rect
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValueError("region rectangle must lie within [0, 1]^2")

    def pixel_selector(self, frame: ReferenceFrame) -> np.ndarray:
        """Boolean selector over the frame's valid pixels."""
        w, h = frame.resolution
        x0, y0, x1, y1 = self.rect
        xs, ys = np.meshgrid(np.arange(w), np.arange(h))
        inside = ((xs >= x0 * (w - 1)) & (xs <= x1 * (w - 1))
                  & (ys >= y0 * (h - 1)) & (ys <= y1 * (h - 1)))
        return inside[frame.valid_mask]


def default_region(kind: str) -> PriorRegion:
    """Stock prior regions: sunglasses in the upper band, scarf in the
    lower band of the frame."""
    if kind == SUNGLASSES:
        return PriorRegion(SUNGLASSES, (0.0, 0.0, 1.0, 0.40))
    if kind == SCARF:
        return PriorRegion(SCARF, (0.0, 0.65, 1.0, 1.0))
    raise ValueError(f"no default region for kind {kind!r}")


@dataclasses.dataclass(frozen=True)
class TrainingMask:
    mask: np.ndarray        # (n_valid,), values in {0, 1}
    kind: str
    source_id: str = ""

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=float)
        if not np.isin(m, (0.0, 1.0)).all():
            raise ValueError("mask must be binary")
        object.__setattr__(self, "mask", m)


def threshold_mask(texture, frame: ReferenceFrame,
                   region: Optional[PriorRegion] = None,
                   threshold: Optional[float] = None,
                   kind: str = SUNGLASSES,
                   source_id: str = "") -> TrainingMask:
    """Intensity-threshold mask inside a prior region.

    Sunglasses mode marks pixels darker than the threshold; scarf mode marks
    pixels deviating from the median of the texture outside the region by
    more than the threshold.  Pixels outside the region are always clean.
    """
    texture = np.asarray(texture, dtype=float)
    if texture.shape != (frame.n_valid,):
        raise ValueError("texture length does not match frame")
    if region is None:
        region = default_region(kind)
    kind = region.kind
    if threshold is None:
        threshold = (DEFAULT_SUNGLASSES_THRESHOLD if kind == SUNGLASSES
                     else DEFAULT_SCARF_THRESHOLD)
    if not 0.0 <= threshold <= 255.0:
        raise ValueError("threshold must lie in [0, 255]")
    sel = region.pixel_selector(frame)
    if not sel.any():
        raise ValueError("prior region covers no frame pixels")
    if kind == SUNGLASSES:
        corrupted = sel & (texture < threshold)
    else:
        outside = texture[~sel]
        if outside.size == 0:
            raise ValueError("scarf region covers the whole frame")
        skin = np.median(outside)
        corrupted = sel & (np.abs(texture - skin) > threshold)
    return TrainingMask(mask=(~corrupted).astype(float), kind=kind,
                        source_id=source_id)


def stretch_mask(s, frame: ReferenceFrame, threshold: float = 0.9,
                 source_id: str = "") -> TrainingMask:
    """Pose-stretch mask: zero out triangles whose source pixels collapse."""
    if threshold <= 0.0:
        # p is always positive, so nothing can fall below the threshold
        return TrainingMask(mask=np.ones(frame.n_valid), kind=STRETCH,
                            source_id=source_id)
    report = geometry.detect_stretch(s, frame, threshold=threshold)
    return TrainingMask(mask=report.stretch_mask, kind=STRETCH,
                        source_id=source_id)
