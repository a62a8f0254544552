"""Landmark point-file parsing and writing (300-W convention).

Files carry a ``version``/``n_points`` header and a brace-delimited list of
``x y`` pairs in 1-based image coordinates; in memory shapes are flat
0-based ``(2n,)`` vectors of interleaved x, y.
"""

from __future__ import annotations

import numpy as np


class LandmarkFormatError(ValueError):
    """Point file does not follow the expected layout."""


def parse_pts(text) -> np.ndarray:
    """Parse a point file into a flat 0-based shape vector."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if len(lines) < 4:
        raise LandmarkFormatError("file too short for a point file")
    if not lines[0].replace(" ", "").startswith("version:"):
        raise LandmarkFormatError("missing 'version:' header")
    if not lines[1].replace(" ", "").startswith("n_points:"):
        raise LandmarkFormatError("missing 'n_points:' header")
    try:
        n_points = int(lines[1].split(":", 1)[1])
    except ValueError:
        raise LandmarkFormatError("n_points is not an integer")
    if lines[2] != "{" or lines[-1] != "}":
        raise LandmarkFormatError("points must be brace-delimited")
    coords = []
    for ln in lines[3:-1]:
        parts = ln.split()
        if len(parts) != 2:
            raise LandmarkFormatError(f"bad point line: {ln!r}")
        try:
            coords.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise LandmarkFormatError(f"non-numeric coordinates: {ln!r}")
    if len(coords) != n_points:
        raise LandmarkFormatError(
            f"header says {n_points} points, file has {len(coords)}")
    return np.array(coords, dtype=float).reshape(-1) - 1.0


def write_pts(shape) -> str:
    """Serialise a flat 0-based shape vector as a 1-based point file."""
    shape = np.asarray(shape, dtype=float)
    if shape.ndim != 1 or shape.size % 2:
        raise ValueError("shape vector must be flat with even length")
    pts = shape.reshape(-1, 2) + 1.0
    lines = ["version: 1", f"n_points: {pts.shape[0]}", "{"]
    # %.17g prints doubles losslessly; only the 1-based offset can round
    lines += [f"{x:.17g} {y:.17g}" for x, y in pts]
    lines.append("}")
    return "\n".join(lines) + "\n"
