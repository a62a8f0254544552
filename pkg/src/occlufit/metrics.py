"""Reconstruction and landmark-error metrics."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .geometry import shape_points

# outer eye corners in the 68-point annotation scheme
EYE_CORNERS_68 = (36, 45)


def masked_rmse(a, ref, eval_mask=None) -> float:
    """Root-mean-square error over the active pixels of an evaluation mask.

    With ``eval_mask=None`` every pixel counts (unmasked RMSE).
    """
    a = np.asarray(a, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if a.shape != ref.shape:
        raise ValueError("texture dimensions differ")
    if eval_mask is None:
        sel = np.ones(a.shape, dtype=bool)
    else:
        eval_mask = np.asarray(eval_mask, dtype=float)
        if eval_mask.shape != a.shape:
            raise ValueError("mask dimensions differ")
        sel = eval_mask > 0.5
    if not sel.any():
        raise ValueError("evaluation mask selects no pixels")
    return float(np.sqrt(np.mean((a[sel] - ref[sel]) ** 2)))


def interocular_distance(truth,
                         eye_indices: Optional[Tuple[int, int]] = None) -> float:
    """Normalisation length of a ground-truth shape.

    Uses the outer eye corners for 68-point shapes; otherwise the largest
    pairwise landmark distance, which is deterministic for any point count.
    """
    pts = shape_points(truth)
    if eye_indices is None:
        if pts.shape[0] == 68:
            eye_indices = EYE_CORNERS_68
        else:
            diff = pts[:, None, :] - pts[None, :, :]
            dist = float(np.sqrt((diff ** 2).sum(axis=2).max()))
            if dist <= 0:
                raise ValueError("ground-truth shape has zero extent")
            return dist
    i, j = eye_indices
    dist = float(np.linalg.norm(pts[i] - pts[j]))
    if dist <= 0:
        raise ValueError("inter-ocular distance is zero")
    return dist


def landmark_mse(estimated, truth,
                 eye_indices: Optional[Tuple[int, int]] = None) -> float:
    """Mean squared landmark distance over the squared inter-ocular length."""
    est = shape_points(estimated)
    tru = shape_points(truth)
    if est.shape != tru.shape:
        raise ValueError("point counts differ")
    d = interocular_distance(truth, eye_indices)
    sq = np.sum((est - tru) ** 2, axis=1)
    return float(np.mean(sq) / d ** 2)
