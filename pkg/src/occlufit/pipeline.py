"""Staged training, fitting and evaluation over a landmarked corpus.

A corpus is a manifest of images with point files, optional occlusion
annotations and ground-truth masks.  Stages communicate through versioned
model files in a models directory: reference frame, texture standardizer,
shape model, robust texture model, joint layer.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import pathlib
import time
from typing import List, Optional, Tuple

import numpy as np
from numpy.random import default_rng

from . import dbm, fitting, geometry, landmarks, masks, metrics, rdbm, \
    serialize, synth
from .fitting import FitConfig, FitModels
from .geometry import ReferenceFrame, shape_points
from .rbm import TrainConfig

FRAME_FILE = "frame.bin"
STANDARDIZER_FILE = "standardizer.bin"
SHAPE_FILE = "shape_dbm.bin"
RDBM_FILE = "rdbm.bin"
JOINT_FILE = "joint.bin"

OCCLUSION_KINDS = ("sunglasses", "scarf")


class PipelineError(RuntimeError):
    """A stage cannot run: missing inputs or inconsistent corpus."""


@dataclasses.dataclass(frozen=True)
class CorpusEntry:
    image: pathlib.Path
    landmarks: pathlib.Path
    annotation: str = "clean"
    mask: Optional[pathlib.Path] = None
    clean_image: Optional[pathlib.Path] = None
    split: str = "train"

    def shape(self) -> np.ndarray:
        return landmarks.parse_pts(self.landmarks.read_text())


@dataclasses.dataclass(frozen=True)
class CorpusManifest:
    base: pathlib.Path
    frame_resolution: Tuple[int, int]
    entries: List[CorpusEntry]

    def split(self, tag: str) -> List[CorpusEntry]:
        return [e for e in self.entries if e.split == tag]

    def train_clean(self) -> List[CorpusEntry]:
        return [e for e in self.split("train")
                if e.annotation not in OCCLUSION_KINDS]

    def train_occluded(self) -> List[CorpusEntry]:
        return [e for e in self.split("train")
                if e.annotation in OCCLUSION_KINDS]


def load_manifest(path) -> CorpusManifest:
    path = pathlib.Path(path)
    if not path.is_file():
        raise PipelineError(f"manifest not found: {path}")
    data = json.loads(path.read_text())
    base = path.parent
    entries = []
    n_points = None
    for raw in data["entries"]:
        entry = CorpusEntry(
            image=base / raw["image"],
            landmarks=base / raw["landmarks"],
            annotation=raw.get("annotation", "clean"),
            mask=base / raw["mask"] if raw.get("mask") else None,
            clean_image=base / raw["clean_image"]
            if raw.get("clean_image") else None,
            split=raw.get("split", "train"),
        )
        shape = entry.shape()
        if n_points is None:
            n_points = shape.size
        elif shape.size != n_points:
            raise PipelineError(
                f"{entry.landmarks} has {shape.size // 2} points, "
                f"expected {n_points // 2}")
        entries.append(entry)
    res = data.get("frame_resolution", [32, 32])
    return CorpusManifest(base=base, frame_resolution=(res[0], res[1]),
                          entries=entries)


def _load_image(path) -> np.ndarray:
    return synth.load_png(path)


def _entry_texture(entry: CorpusEntry, frame: ReferenceFrame,
                   clean: bool = False) -> np.ndarray:
    src = entry.clean_image if clean and entry.clean_image else entry.image
    return geometry.warp_texture(_load_image(src), entry.shape(), frame)


def _entry_mask(entry: CorpusEntry, frame: ReferenceFrame) -> np.ndarray:
    img = _load_image(entry.mask)
    return (frame.from_image(img) > 127).astype(float)


def _aligned_shape(entry_shape: np.ndarray,
                   frame: ReferenceFrame) -> np.ndarray:
    aligned, *_ = geometry.similarity_align(shape_points(entry_shape),
                                            shape_points(frame.mean_shape))
    return aligned.reshape(-1)


# --------------------------------------------------------------------------
# training stages


def ensure_frame(corpus: CorpusManifest, models_dir,
                 cfg) -> ReferenceFrame:
    models_dir = pathlib.Path(models_dir)
    models_dir.mkdir(parents=True, exist_ok=True)
    frame_path = models_dir / FRAME_FILE
    if frame_path.is_file():
        frame, _ = serialize.load_frame(frame_path)
        return frame
    shapes = np.array([e.shape() for e in corpus.split("train")])
    if shapes.size == 0:
        raise PipelineError("no training shapes to build a frame from")
    res = int(cfg["frame"]["resolution"])
    frame = geometry.build_reference_frame(
        shapes, (res, res), margin=float(cfg["frame"]["margin"]))
    serialize.save_frame(frame_path, frame)
    return frame


def _train_config(section, seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=float(section["learning_rate"]),
        epochs=int(section["epochs"]),
        batch_size=int(section["batch_size"]),
        momentum=float(section.get("momentum", "0.0")),
        rng_seed=seed,
    )


def train_shape_stage(corpus: CorpusManifest, models_dir, cfg) -> None:
    models_dir = pathlib.Path(models_dir)
    frame = ensure_frame(corpus, models_dir, cfg)
    aligned = np.array([_aligned_shape(e.shape(), frame)
                        for e in corpus.train_clean()])
    if aligned.size == 0:
        raise PipelineError("no clean training shapes")
    sec = cfg["shape-model"]
    tc = _train_config(sec, int(cfg["run"]["seed"]))
    model = dbm.pretrain_stack(aligned, tc,
                               (int(sec["hidden1"]), int(sec["hidden2"])),
                               cls=dbm.ShapeDbmParams)
    serialize.save_dbm(models_dir / SHAPE_FILE, model, "shape-dbm")


def _training_masks(corpus: CorpusManifest, frame: ReferenceFrame,
                    cfg) -> np.ndarray:
    """Binary mask rows for the mask model: ground-truth masks when the
    corpus has them, threshold extraction otherwise."""
    sec = cfg["masks"]
    rows = []
    for e in corpus.train_occluded():
        if e.mask is not None:
            rows.append(_entry_mask(e, frame))
        else:
            tex = _entry_texture(e, frame)
            thr = (float(sec["sunglasses_threshold"])
                   if e.annotation == "sunglasses"
                   else float(sec["scarf_threshold"]))
            rows.append(masks.threshold_mask(tex, frame, kind=e.annotation,
                                             threshold=thr).mask)
    for e in corpus.split("train"):
        if e.annotation == "posed":
            rows.append(masks.stretch_mask(
                e.shape(), frame,
                threshold=float(sec["stretch_threshold"])).mask)
    if not rows:
        raise PipelineError("no occluded training entries to learn masks from")
    rows = np.array(rows)
    if sec.get("include_clean", "true").lower() in ("1", "true", "yes"):
        rows = np.vstack([rows, np.ones_like(rows)])
    return rows


def train_texture_stage(corpus: CorpusManifest, models_dir, cfg) -> None:
    models_dir = pathlib.Path(models_dir)
    frame = ensure_frame(corpus, models_dir, cfg)
    clean_entries = corpus.train_clean()
    if not clean_entries:
        raise PipelineError("no clean training images")
    clean = np.array([_entry_texture(e, frame) for e in clean_entries])
    mean = clean.mean(axis=0)
    std = np.maximum(clean.std(axis=0), 1.0)
    serialize.save_standardizer(models_dir / STANDARDIZER_FILE, mean, std)
    clean_std = (clean - mean) / std

    occluded = corpus.train_occluded()
    if occluded:
        corrupted = np.array([(_entry_texture(e, frame) - mean) / std
                              for e in occluded])
    else:
        corrupted = clean_std
    mask_rows = _training_masks(corpus, frame, cfg)

    sec = cfg["texture-model"]
    tc = _train_config(sec, int(cfg["run"]["seed"]) + 1)
    model = rdbm.train_rdbm(
        clean_std, corrupted, mask_rows, tc,
        hidden_sizes=(int(sec["hidden1"]), int(sec["hidden2"])),
        mask_hidden=int(sec["mask_hidden"]),
        gamma=float(sec["gamma"]),
        sigma_scale=float(sec["sigma_scale"]),
        joint_epochs=int(sec["joint_epochs"]),
        joint_learning_rate=float(sec["joint_learning_rate"]),
        n_chains=int(sec["n_chains"]),
    )
    serialize.save_rdbm(models_dir / RDBM_FILE, model)


def train_joint_stage(corpus: CorpusManifest, models_dir, cfg) -> None:
    models_dir = pathlib.Path(models_dir)
    frame = ensure_frame(corpus, models_dir, cfg)
    shape_path = models_dir / SHAPE_FILE
    rdbm_path = models_dir / RDBM_FILE
    if not shape_path.is_file() or not rdbm_path.is_file():
        raise PipelineError("train-joint needs the shape and texture models")
    shape_model, _ = serialize.load_dbm(shape_path)
    texture_model, _ = serialize.load_rdbm(rdbm_path)
    mean, std, _ = serialize.load_standardizer(
        models_dir / STANDARDIZER_FILE)
    h2_rows, g2_rows = [], []
    for e in corpus.train_clean():
        aligned = _aligned_shape(e.shape(), frame)
        h2_rows.append(dbm.mean_field_infer(aligned, shape_model).h2)
        tex = (_entry_texture(e, frame) - mean) / std
        g2_rows.append(dbm.mean_field_infer(tex, texture_model.texture_dbm).h2)
    sec = cfg["joint-model"]
    tc = _train_config(sec, int(cfg["run"]["seed"]) + 2)
    joint = dbm.train_joint_layer(np.array(h2_rows), np.array(g2_rows), tc,
                                  n_hidden=int(sec["hidden"]))
    serialize.save_joint(models_dir / JOINT_FILE, joint)


def extract_masks_stage(corpus: CorpusManifest, models_dir, out_dir,
                        cfg) -> List[pathlib.Path]:
    """Write extracted training masks as PNGs plus an index file."""
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = ensure_frame(corpus, models_dir, cfg)
    sec = cfg["masks"]
    written = []
    index = []
    for e in corpus.split("train"):
        if e.annotation in OCCLUSION_KINDS:
            tex = _entry_texture(e, frame)
            thr = (float(sec["sunglasses_threshold"])
                   if e.annotation == "sunglasses"
                   else float(sec["scarf_threshold"]))
            tm = masks.threshold_mask(tex, frame, kind=e.annotation,
                                      threshold=thr,
                                      source_id=e.image.name)
        elif e.annotation == "posed":
            tm = masks.stretch_mask(e.shape(), frame,
                                    threshold=float(sec["stretch_threshold"]),
                                    source_id=e.image.name)
        else:
            continue
        path = out_dir / f"mask_{e.image.stem}.png"
        synth._save_png(path, frame.to_image(tm.mask) * 255.0)
        written.append(path)
        index.append({"mask": path.name, "kind": tm.kind,
                      "source": e.image.name})
    (out_dir / "masks.json").write_text(
        json.dumps({"masks": index}, indent=1, sort_keys=True) + "\n")
    return written


# --------------------------------------------------------------------------
# loading trained models


def load_models(models_dir) -> Tuple[FitModels, ReferenceFrame]:
    models_dir = pathlib.Path(models_dir)
    rdbm_path = models_dir / RDBM_FILE
    if not rdbm_path.is_file():
        raise PipelineError(
            f"missing texture model {rdbm_path}; run train-texture first")
    frame, _ = serialize.load_frame(models_dir / FRAME_FILE)
    texture_model, _ = serialize.load_rdbm(rdbm_path)
    mean, std, _ = serialize.load_standardizer(models_dir / STANDARDIZER_FILE)
    shape_path = models_dir / SHAPE_FILE
    shape_model = None
    if shape_path.is_file():
        shape_model, _ = serialize.load_dbm(shape_path)
    joint = None
    joint_path = models_dir / JOINT_FILE
    if joint_path.is_file():
        joint, _ = serialize.load_joint(joint_path)
    models = FitModels(rdbm=texture_model, texture_mean=mean,
                       texture_std=std, shape_dbm=shape_model, joint=joint)
    return models, frame


def fit_config_from(cfg, seed: Optional[int] = None) -> FitConfig:
    sec = cfg["fit"]
    return FitConfig(
        max_outer_iters=int(sec["max_outer_iters"]),
        max_inner_iters=int(sec["max_inner_iters"]),
        shape_tol=float(sec["shape_tol"]),
        damping=float(sec["damping"]),
        mask_mode=sec["mask_mode"],
        gibbs_sweeps=int(sec["gibbs_sweeps"]),
        chains=int(sec["chains"]),
        shape_blend=float(sec["shape_blend"]),
        patience=int(sec["patience"]),
        n_starts=int(sec["n_starts"]),
        start_jitter=float(sec["start_jitter"]),
        rng_seed=int(cfg["run"]["seed"]) if seed is None else seed,
    )


# --------------------------------------------------------------------------
# fitting / reconstruction / evaluation stages


def fit_stage(corpus: CorpusManifest, models_dir, out_dir, cfg,
              init_perturbation: float = 5.0) -> List[dict]:
    """Fit every test entry from a perturbed ground-truth initialisation.

    Writes fitted point files and a CSV of normalised landmark errors.
    """
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    models, frame = load_models(models_dir)
    seed = int(cfg["run"]["seed"])
    rows = []
    timings = []
    for i, e in enumerate(corpus.split("test")):
        truth = e.shape()
        rng = default_rng(seed * 100003 + i)
        init = truth + rng.uniform(-init_perturbation, init_perturbation,
                                   truth.shape)
        fc = fit_config_from(cfg, seed=seed * 100003 + i + 1)
        t0 = time.perf_counter()
        state = fitting.fit(_load_image(e.image), init, models, frame, fc)
        timings.append(time.perf_counter() - t0)
        (out_dir / f"fit_{e.image.stem}.pts").write_text(
            landmarks.write_pts(state.shape))
        rows.append({
            "image": e.image.name,
            "initial_error": metrics.landmark_mse(init, truth),
            "final_error": metrics.landmark_mse(state.shape, truth),
        })
    _write_csv(out_dir / "fit_metrics.csv",
               ["image", "initial_error", "final_error"], rows)
    _write_timings(out_dir / "fit_timings.txt", timings)
    return rows


def reconstruct_stage(corpus: CorpusManifest, models_dir, out_dir, cfg,
                      baseline: bool = False) -> List[dict]:
    """Reconstruct every test entry at its ground-truth shape.

    Writes the shape-free reconstruction and mask images and a metrics CSV
    (masked/unmasked RMSE against the clean reference texture where the
    corpus provides one).  ``baseline`` forces the all-ones mask.
    """
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    models, frame = load_models(models_dir)
    fc = fit_config_from(cfg)
    rows = []
    timings = []
    force = np.ones(frame.n_valid) if baseline else None
    for e in corpus.split("test"):
        t0 = time.perf_counter()
        a, m_prob, composited = fitting.reconstruct(
            _load_image(e.image), e.shape(), models, frame, fc,
            force_mask=force)
        timings.append(time.perf_counter() - t0)
        stem = e.image.stem
        synth._save_png(out_dir / f"recon_{stem}.png", composited)
        synth._save_png(out_dir / f"reconmask_{stem}.png",
                        frame.to_image((m_prob >= 0.5).astype(float)) * 255.0)
        row = {"image": e.image.name, "mask_mean": float(m_prob.mean())}
        if e.clean_image is not None:
            ref = _entry_texture(e, frame, clean=True)
            eval_mask = _entry_mask(e, frame) if e.mask is not None else None
            row["masked_rmse"] = metrics.masked_rmse(a, ref, eval_mask)
            row["unmasked_rmse"] = metrics.masked_rmse(a, ref)
        if e.mask is not None:
            truth_mask = _entry_mask(e, frame)
            row["mask_accuracy"] = float(
                ((m_prob >= 0.5) == (truth_mask > 0.5)).mean())
        rows.append(row)
    fields = sorted({k for r in rows for k in r},
                    key=lambda k: (k != "image", k))
    _write_csv(out_dir / "reconstruction_metrics.csv", fields, rows)
    _write_timings(out_dir / "reconstruction_timings.txt", timings)
    return rows


def evaluate_stage(corpus: CorpusManifest, models_dir, out_dir, cfg) -> dict:
    """Reconstruction metrics plus a human-readable summary."""
    rows = reconstruct_stage(corpus, models_dir, out_dir, cfg)
    summary = {}
    for key in ("masked_rmse", "unmasked_rmse", "mask_accuracy"):
        vals = [r[key] for r in rows if key in r]
        if vals:
            summary[f"mean_{key}"] = float(np.mean(vals))
    summary["n_images"] = len(rows)
    out_dir = pathlib.Path(out_dir)
    lines = [f"{k}: {v}" for k, v in sorted(summary.items())]
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    return summary


def _write_csv(path, fields, rows) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k, "")) for k in fields})
    pathlib.Path(path).write_text(buf.getvalue())


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return v


def _write_timings(path, timings) -> None:
    total = float(np.sum(timings)) if timings else 0.0
    per = float(np.mean(timings)) if timings else 0.0
    pathlib.Path(path).write_text(
        f"images: {len(timings)}\ntotal_s: {total:.3f}\n"
        f"per_image_s: {per:.3f}\n")
