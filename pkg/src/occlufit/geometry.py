"""Reference frames, piecewise-affine warps and the pose-stretch detector.

Shapes are flat ``(2n,)`` vectors of interleaved ``x, y`` landmark
coordinates.  A :class:`ReferenceFrame` fixes a mean shape inside a pixel
grid, triangulates it, and precomputes for every interior pixel the triangle
it falls in and its barycentric coordinates; warping an image to the frame is
then a single bilinear gather per pixel.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import Delaunay, QhullError


class DegenerateShapeError(ValueError):
    """Landmark set is collinear or otherwise untriangulatable."""


def shape_points(s) -> np.ndarray:
    """View a flat shape vector as an (n, 2) array of points."""
    s = np.asarray(s, dtype=float)
    if s.ndim != 1 or s.size % 2:
        raise ValueError("shape vector must be flat with even length")
    return s.reshape(-1, 2)


def points_shape(pts) -> np.ndarray:
    return np.asarray(pts, dtype=float).reshape(-1)


def similarity_align(src, dst) -> Tuple[np.ndarray, float, float, np.ndarray]:
    """Least-squares similarity transform mapping ``src`` onto ``dst``.

    Returns (aligned source points, scale, rotation angle, translation).
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape:
        raise ValueError("point sets must have equal shapes")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    # complex-plane regression: (a + ib) cs = cd in least squares
    zs = cs[:, 0] + 1j * cs[:, 1]
    zd = cd[:, 0] + 1j * cd[:, 1]
    denom = np.sum(np.abs(zs) ** 2)
    if denom < 1e-30:
        raise DegenerateShapeError("source shape has zero extent")
    w = np.sum(np.conj(zs) * zd) / denom
    scale = float(np.abs(w))
    theta = float(np.angle(w))
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    aligned = scale * cs @ rot.T + mu_d
    translation = mu_d - scale * mu_s @ rot.T
    return aligned, scale, theta, translation


def procrustes_mean(shapes, iters: int = 10) -> np.ndarray:
    """Generalized Procrustes mean of a set of flat shape vectors.

    The mean is centred at the origin and normalised to unit RMS radius.
    """
    shapes = np.atleast_2d(np.asarray(shapes, dtype=float))
    if shapes.shape[0] < 1:
        raise ValueError("need at least one shape")
    pts = shapes.reshape(shapes.shape[0], -1, 2)

    def normalise(p):
        p = p - p.mean(axis=0)
        norm = np.sqrt(np.mean(np.sum(p ** 2, axis=1)))
        if norm < 1e-30:
            raise DegenerateShapeError("shape has zero extent")
        return p / norm

    mean = normalise(pts[0])
    for _ in range(iters):
        aligned = np.array([similarity_align(p, mean)[0] for p in pts])
        new_mean = normalise(aligned.mean(axis=0))
        if np.abs(new_mean - mean).max() < 1e-10:
            mean = new_mean
            break
        mean = new_mean
    return points_shape(mean)


@dataclasses.dataclass(frozen=True)
class ReferenceFrame:
    """Mean shape embedded in a pixel grid plus precomputed warp tables."""

    mean_shape: np.ndarray        # (2n,) frame coordinates
    triangles: np.ndarray         # (t, 3) vertex indices
    pixel_triangles: np.ndarray   # (h, w) triangle index, -1 outside
    pixel_bary: np.ndarray        # (h, w, 3) barycentric coordinates
    resolution: Tuple[int, int]   # (width, height)

    @property
    def n_points(self) -> int:
        return self.mean_shape.size // 2

    @property
    def valid_mask(self) -> np.ndarray:
        """(h, w) boolean mask of pixels covered by the triangulation."""
        return self.pixel_triangles >= 0

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid_mask))

    def to_image(self, texture) -> np.ndarray:
        """Paint a texture vector into an (h, w) image, zero outside."""
        texture = np.asarray(texture, dtype=float)
        if texture.shape != (self.n_valid,):
            raise ValueError("texture length does not match frame")
        img = np.zeros(self.valid_mask.shape)
        img[self.valid_mask] = texture
        return img

    def from_image(self, img) -> np.ndarray:
        """Gather the valid pixels of an (h, w) image into a texture vector."""
        img = np.asarray(img, dtype=float)
        if img.shape != self.valid_mask.shape:
            raise ValueError("image does not match frame resolution")
        return img[self.valid_mask]


@dataclasses.dataclass(frozen=True)
class WarpMap:
    """Source coordinates in a target image for every valid frame pixel."""

    frame: ReferenceFrame
    target_shape: np.ndarray
    source_coords: np.ndarray   # (n_valid, 2) real (x, y)


@dataclasses.dataclass(frozen=True)
class StretchReport:
    """Per-triangle source-pixel duplication statistics p = n0 / N."""

    p: np.ndarray            # (t,) in (0, 1]
    n0: np.ndarray           # (t,) distinct source pixels hit
    N: np.ndarray            # (t,) pixels in the reference triangle
    stretch_mask: np.ndarray  # (n_valid,) 0 where the triangle stretches


def build_reference_frame(shapes, resolution: Tuple[int, int],
                          margin: float = 0.05) -> ReferenceFrame:
    """Procrustes mean scaled into a pixel grid, triangulated, with per-pixel
    triangle/barycentric lookup tables.

    ``resolution`` is (width, height); the mean shape is fitted inside it
    with a relative ``margin`` on every side, preserving aspect ratio.
    """
    width, height = int(resolution[0]), int(resolution[1])
    if width < 2 or height < 2:
        raise ValueError("resolution must be at least 2x2")
    mean = shape_points(procrustes_mean(shapes))
    lo = mean.min(axis=0)
    hi = mean.max(axis=0)
    extent = hi - lo
    if extent.max() < 1e-30:
        raise DegenerateShapeError("mean shape has zero extent")
    box = np.array([width - 1, height - 1]) * (1.0 - 2.0 * margin)
    scale = np.min(box / np.maximum(extent, 1e-30))
    offset = 0.5 * (np.array([width - 1, height - 1]) - scale * extent) \
        - scale * lo
    frame_pts = scale * mean + offset

    try:
        tri = Delaunay(frame_pts)
    except QhullError as exc:
        raise DegenerateShapeError(f"cannot triangulate landmarks: {exc}")

    xs, ys = np.meshgrid(np.arange(width), np.arange(height))
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    simplex = tri.find_simplex(grid)
    inside = simplex >= 0
    bary = np.zeros((grid.shape[0], 3))
    if inside.any():
        T = tri.transform[simplex[inside], :2]
        r = grid[inside] - tri.transform[simplex[inside], 2]
        b = np.einsum("pij,pj->pi", T, r)
        bary[inside] = np.column_stack([b, 1.0 - b.sum(axis=1)])
    # find_simplex admits tiny negative coordinates at edges; clean them up
    bary = np.clip(bary, 0.0, None)
    sums = bary.sum(axis=1, keepdims=True)
    bary[inside] /= sums[inside]
    return ReferenceFrame(
        mean_shape=points_shape(frame_pts),
        triangles=tri.simplices.copy(),
        pixel_triangles=simplex.reshape(height, width),
        pixel_bary=bary.reshape(height, width, 3),
        resolution=(width, height),
    )


def warp_map(s, frame: ReferenceFrame) -> WarpMap:
    """Piecewise-affine source coordinates of every valid frame pixel."""
    pts = shape_points(s)
    if pts.shape[0] != frame.n_points:
        raise ValueError("shape point count does not match frame")
    valid = frame.valid_mask
    tri_idx = frame.pixel_triangles[valid]
    bary = frame.pixel_bary[valid]
    verts = frame.triangles[tri_idx]           # (m, 3)
    coords = np.einsum("mk,mkd->md", bary, pts[verts])
    if not np.isfinite(coords).all():
        raise ValueError("non-finite source coordinates")
    return WarpMap(frame=frame, target_shape=points_shape(pts),
                   source_coords=coords)


def bilinear_sample(image, coords) -> np.ndarray:
    """Sample an image at real (x, y) positions, clamping to the border."""
    image = np.asarray(image, dtype=float)
    h, w = image.shape
    x = np.clip(coords[:, 0], 0.0, w - 1.0)
    y = np.clip(coords[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2) if w > 1 else \
        np.zeros(x.shape, int)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2) if h > 1 else \
        np.zeros(y.shape, int)
    fx = x - x0
    fy = y - y0
    top = image[y0, x0] * (1 - fx) + image[y0, x0 + 1] * fx
    bot = image[y0 + 1, x0] * (1 - fx) + image[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def warp_texture(image, s, frame: ReferenceFrame) -> np.ndarray:
    """Shape-free texture: bilinear samples of the image at the
    affinely-mapped source position of every valid frame pixel."""
    image = np.asarray(image, dtype=float)
    pts = shape_points(s)
    h, w = image.shape
    inside = (pts[:, 0] > -1) & (pts[:, 0] < w) \
        & (pts[:, 1] > -1) & (pts[:, 1] < h)
    if not inside.any():
        raise ValueError("all landmarks fall outside the image")
    return bilinear_sample(image, warp_map(pts.reshape(-1), frame).source_coords)


def detect_stretch(s, frame: ReferenceFrame,
                   threshold: float = 0.9) -> StretchReport:
    """Flag reference triangles whose source region collapses.

    For each triangle, N counts its reference pixels and n0 the distinct
    integer-rounded source pixels they map to; the triangle (and all its
    pixels) is masked out when p = n0 / N falls below the threshold.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    wm = warp_map(s, frame)
    valid = frame.valid_mask
    tri_idx = frame.pixel_triangles[valid]
    n_tri = frame.triangles.shape[0]
    rounded = np.rint(wm.source_coords).astype(np.int64)
    # one scalar key per rounded source pixel so uniqueness is a set size
    span = rounded[:, 0].max() - rounded[:, 0].min() + 1 if rounded.size else 1
    key = (rounded[:, 1] - rounded[:, 1].min()) * span \
        + (rounded[:, 0] - rounded[:, 0].min())
    N = np.bincount(tri_idx, minlength=n_tri)
    n0 = np.zeros(n_tri, dtype=np.int64)
    order = np.argsort(tri_idx, kind="stable")
    sorted_tri = tri_idx[order]
    sorted_key = key[order]
    for t, start in zip(*np.unique(sorted_tri, return_index=True)):
        end = start + N[t]
        n0[t] = np.unique(sorted_key[start:end]).size
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(N > 0, n0 / np.maximum(N, 1), 1.0)
    keep = p >= threshold
    stretch_mask = keep[tri_idx].astype(float)
    return StretchReport(p=p, n0=n0, N=N, stretch_mask=stretch_mask)


def warp_jacobian(frame: ReferenceFrame) -> np.ndarray:
    """Derivative of each valid pixel's warped position w.r.t. the 2n
    landmark coordinates, evaluated at the reference shape.

    Returns a (n_valid, 2, 2n) array: entry [i, 0] is the gradient of the
    pixel's x position, [i, 1] of its y position.  Both are just the
    barycentric weights of the pixel's triangle, since the warp is affine.
    """
    valid = frame.valid_mask
    tri_idx = frame.pixel_triangles[valid]
    bary = frame.pixel_bary[valid]
    verts = frame.triangles[tri_idx]
    m = tri_idx.size
    jac = np.zeros((m, 2, 2 * frame.n_points))
    rows = np.repeat(np.arange(m), 3)
    jac[rows, 0, (2 * verts).ravel()] = bary.ravel()
    jac[rows, 1, (2 * verts + 1).ravel()] = bary.ravel()
    return jac


def render_texture(texture, s, frame: ReferenceFrame,
                   image_shape: Tuple[int, int],
                   background: float = 0.0) -> np.ndarray:
    """Forward-render a shape-free texture into an image at shape ``s``.

    Every image pixel inside the triangulation of ``s`` samples the
    frame-space texture at its barycentrically-mapped reference position.
    """
    texture = np.asarray(texture, dtype=float)
    pts = shape_points(s)
    if pts.shape[0] != frame.n_points:
        raise ValueError("shape point count does not match frame")
    h, w = image_shape
    tex_img = frame.to_image(texture)
    ref_pts = shape_points(frame.mean_shape)
    out = np.full((h, w), float(background))
    for tri in frame.triangles:
        tgt = pts[tri]
        lo = np.maximum(np.floor(tgt.min(axis=0)).astype(int), 0)
        hi = np.minimum(np.ceil(tgt.max(axis=0)).astype(int) + 1, [w, h])
        if (hi <= lo).any():
            continue
        xs, ys = np.meshgrid(np.arange(lo[0], hi[0]), np.arange(lo[1], hi[1]))
        grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
        mat = np.column_stack([tgt[1] - tgt[0], tgt[2] - tgt[0]])
        det = np.linalg.det(mat)
        if abs(det) < 1e-12:
            continue
        ab = np.linalg.solve(mat, (grid - tgt[0]).T).T
        bary = np.column_stack([1.0 - ab.sum(axis=1), ab])
        inside = (bary >= -1e-9).all(axis=1)
        if not inside.any():
            continue
        src = bary[inside] @ ref_pts[tri]
        vals = bilinear_sample(tex_img, src)
        out[grid[inside, 1].astype(int), grid[inside, 0].astype(int)] = vals
    return out
