"""Synthetic landmarked corpus generation.

Images are smooth two-factor textures rendered through a piecewise-affine
warp at shapes drawn from a small linear deformation model of a landmark
grid.  Occlusions are dark blocks applied in reference-frame space, so every
corrupted image ships with an exact ground-truth mask; test entries also
keep their clean twin for unbiased reconstruction metrics.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib
from typing import Optional, Tuple

import numpy as np
from numpy.random import default_rng
from PIL import Image

from . import geometry, landmarks
from .geometry import ReferenceFrame, shape_points


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    n_train_clean: int = 100
    n_train_occluded: int = 50
    n_test: int = 50
    image_size: Tuple[int, int] = (48, 48)       # (width, height)
    frame_size: Tuple[int, int] = (32, 32)
    grid: Tuple[int, int] = (4, 4)               # landmark grid (nx, ny)
    shape_amplitude: float = 1.2
    texture_amplitude: float = 45.0
    structure_amplitude: float = 45.0
    occlusion_kinds: Tuple[str, ...] = ("sunglasses", "scarf")
    occlusion_area: float = 0.25                 # fraction of valid pixels
    pose_fraction: float = 0.0                   # posed (compressed) images
    pose_compression: float = 4.0
    background: float = 64.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train_clean, 1) < 1 or self.n_test < 0:
            raise ValueError("corpus counts must be positive")
        if not 0.0 <= self.occlusion_area < 1.0:
            raise ValueError("occlusion_area must lie in [0, 1)")


def base_grid_shape(cfg: SynthConfig) -> np.ndarray:
    """Landmark grid centred in the image with a 20% margin."""
    w, h = cfg.image_size
    nx, ny = cfg.grid
    xs = np.linspace(0.2 * (w - 1), 0.8 * (w - 1), nx)
    ys = np.linspace(0.2 * (h - 1), 0.8 * (h - 1), ny)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1).reshape(-1)


def _deformation_basis(cfg: SynthConfig) -> np.ndarray:
    """Three smooth per-landmark displacement fields, shape (3, n, 2)."""
    nx, ny = cfg.grid
    ux, uy = np.meshgrid(np.linspace(0, 1, nx), np.linspace(0, 1, ny))
    ux, uy = ux.ravel(), uy.ravel()
    f1 = np.stack([np.sin(np.pi * uy), np.zeros_like(ux)], axis=1)
    f2 = np.stack([np.zeros_like(ux), np.cos(np.pi * ux)], axis=1)
    f3 = np.stack([uy - 0.5, ux - 0.5], axis=1)
    return np.stack([f1, f2, f3])


def sample_shape(cfg: SynthConfig, rng) -> np.ndarray:
    base = shape_points(base_grid_shape(cfg))
    basis = _deformation_basis(cfg)
    z = rng.uniform(-1.0, 1.0, size=basis.shape[0])
    pts = base + cfg.shape_amplitude * np.einsum("k,knd->nd", z, basis)
    return pts.reshape(-1)


def _structure_pattern(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Fixed smooth blob pattern shared by every identity.

    Plays the role of the stable facial structure (eyes, nose, mouth) that
    anchors alignment; without it the texture family is nearly
    shift-ambiguous and fitting has no well-defined optimum.
    """
    blobs = ((0.30, 0.30, 0.085, -1.0), (0.70, 0.30, 0.085, -1.0),
             (0.50, 0.58, 0.090, 0.55), (0.50, 0.82, 0.130, -0.80))
    out = np.zeros_like(u)
    for cx, cy, width, amp in blobs:
        out += amp * np.exp(-((u - cx) ** 2 + (v - cy) ** 2)
                            / (2.0 * width ** 2))
    return out


def sample_texture(cfg: SynthConfig, frame: ReferenceFrame, rng) -> np.ndarray:
    """Smooth low-frequency texture over the frame's valid pixels."""
    w, h = frame.resolution
    xs, ys = np.meshgrid(np.arange(w) / max(w - 1, 1),
                         np.arange(h) / max(h - 1, 1))
    u = xs[frame.valid_mask]
    v = ys[frame.valid_mask]
    t = rng.uniform(-1.0, 1.0, size=2)
    tex = (128.0
           + cfg.texture_amplitude * (t[0] * np.sin(2.0 * np.pi * u)
                                      + t[1] * np.cos(2.0 * np.pi * v))
           + cfg.structure_amplitude * _structure_pattern(u, v))
    return np.clip(tex, 0.0, 255.0)


def occlusion_region(kind: str, frame: ReferenceFrame,
                     area: float) -> np.ndarray:
    """Boolean block over valid pixels covering ~``area`` of them."""
    w, h = frame.resolution
    xs, ys = np.meshgrid(np.arange(w) / max(w - 1, 1),
                         np.arange(h) / max(h - 1, 1))
    u = xs[frame.valid_mask]
    v = ys[frame.valid_mask]
    if kind == "sunglasses":
        y0, grow_down = 0.05, True
    elif kind == "scarf":
        y0, grow_down = 0.95, False
    else:
        raise ValueError(f"unknown occlusion kind {kind!r}")
    # widen the band until it covers the requested fraction
    for frac in np.linspace(0.02, 0.95, 200):
        if grow_down:
            sel = (v >= y0) & (v <= y0 + frac)
        else:
            sel = (v <= y0) & (v >= y0 - frac)
        sel &= (u >= 0.1) & (u <= 0.9)
        if sel.mean() >= area:
            return sel
    return sel


def occlusion_value(kind: str) -> float:
    return 20.0 if kind == "sunglasses" else 35.0


def _posed_shape(shape: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    pts = shape_points(shape).copy()
    left = pts[:, 0] < np.median(pts[:, 0])
    centre = pts[left].mean(axis=0)
    pts[left] = centre + (pts[left] - centre) / cfg.pose_compression
    return pts.reshape(-1)


def _save_png(path: pathlib.Path, img: np.ndarray) -> None:
    data = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=float)


def generate_synthetic_corpus(cfg: SynthConfig, out_dir) -> dict:
    """Write images, point files, ground-truth masks and a manifest.

    Returns the manifest dict; the same content lands in
    ``out_dir/manifest.json``.  Fixed seeds give bit-identical corpora.
    """
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = default_rng(cfg.seed)
    frame = build_generator_frame(cfg)
    entries = []

    def emit(name, split, annotation, occlude_kind=None, posed=False):
        shape = sample_shape(cfg, rng)
        if posed:
            shape = _posed_shape(shape, cfg)
        # settle through the point-file encoding so the written landmarks
        # re-parse to exactly the shape used for rendering
        shape = landmarks.parse_pts(landmarks.write_pts(shape))
        tex = sample_texture(cfg, frame, rng)
        w, h = cfg.image_size
        entry = {"split": split, "annotation": annotation}
        stem = f"{split}_{name}"
        if occlude_kind is not None:
            region = occlusion_region(occlude_kind, frame, cfg.occlusion_area)
            corrupted = tex.copy()
            corrupted[region] = occlusion_value(occlude_kind)
            mask = (~region).astype(float)
            clean_img = geometry.render_texture(tex, shape, frame, (h, w),
                                                background=cfg.background)
            img = geometry.render_texture(corrupted, shape, frame, (h, w),
                                          background=cfg.background)
            _save_png(out / f"{stem}_clean.png", clean_img)
            _save_png(out / f"{stem}_mask.png",
                      frame.to_image(mask) * 255.0)
            entry["clean_image"] = f"{stem}_clean.png"
            entry["mask"] = f"{stem}_mask.png"
        else:
            img = geometry.render_texture(tex, shape, frame, (h, w),
                                          background=cfg.background)
        _save_png(out / f"{stem}.png", img)
        (out / f"{stem}.pts").write_text(landmarks.write_pts(shape))
        entry["image"] = f"{stem}.png"
        entry["landmarks"] = f"{stem}.pts"
        entries.append(entry)

    n_posed = int(round(cfg.pose_fraction * cfg.n_train_clean))
    for i in range(cfg.n_train_clean):
        emit(f"clean_{i:04d}", "train", "posed" if i < n_posed else "clean",
             posed=i < n_posed)
    kinds = cfg.occlusion_kinds or ("sunglasses",)
    for i in range(cfg.n_train_occluded):
        kind = kinds[i % len(kinds)]
        emit(f"occl_{i:04d}", "train", kind, occlude_kind=kind)
    for i in range(cfg.n_test):
        kind = kinds[i % len(kinds)]
        emit(f"occl_{i:04d}", "test", kind, occlude_kind=kind)

    manifest = {
        "frame_resolution": list(cfg.frame_size),
        "image_size": list(cfg.image_size),
        "seed": cfg.seed,
        "entries": entries,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def build_generator_frame(cfg: SynthConfig) -> ReferenceFrame:
    """The frame the generator renders through: base grid at frame size."""
    return geometry.build_reference_frame([base_grid_shape(cfg)],
                                          cfg.frame_size)
