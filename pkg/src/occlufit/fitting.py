"""Masked inverse-compositional Gauss-Newton fitting.

The template is the model's clean texture estimate; each outer iteration
re-warps the image, re-infers the clean texture and occlusion mask, and
rebuilds the steepest-descent images.  Inner iterations solve the damped
masked normal equations and compose the inverted increment into the shape.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Tuple

import numpy as np
from numpy.random import default_rng
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import dbm, geometry, rdbm
from .geometry import ReferenceFrame, shape_points, warp_jacobian, warp_texture
from .rdbm import RdbmParams


class SingularHessianError(RuntimeError):
    """Masked Hessian is singular; the mask leaves too few pixels."""


MASK_MODES = ("binary", "probability", "all-ones")


@dataclasses.dataclass(frozen=True)
class FitConfig:
    max_outer_iters: int = 12
    max_inner_iters: int = 20
    shape_tol: float = 1e-3
    damping: float = 1.0          # in units of the masked Hessian diagonal
    mask_mode: str = "probability"
    gibbs_sweeps: int = 30
    chains: int = 2
    rng_seed: int = 0
    shape_blend: float = 0.7      # weight of the shape-model projection
    outer_tol: float = 1e-3       # relative score improvement threshold
    patience: int = 2             # outer iterations without improvement
    n_starts: int = 5             # restarts from jittered initialisations
    start_jitter: float = 2.0     # jitter radius in pixels
    damping_floor: float = 1e-3
    damping_cap: float = 1e6

    def __post_init__(self):
        if self.max_outer_iters < 1 or self.max_inner_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.shape_tol <= 0:
            raise ValueError("shape_tol must be positive")
        if self.damping < 0:
            raise ValueError("damping must be nonnegative")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if not 0.0 <= self.shape_blend <= 1.0:
            raise ValueError("shape_blend must lie in [0, 1]")
        if self.patience < 1 or self.n_starts < 1:
            raise ValueError("patience and n_starts must be >= 1")
        if self.start_jitter < 0:
            raise ValueError("start_jitter must be nonnegative")


@dataclasses.dataclass(frozen=True)
class FitModels:
    """Trained models plus the texture standardisation of the corpus."""

    rdbm: RdbmParams
    texture_mean: np.ndarray
    texture_std: np.ndarray
    shape_dbm: Optional[dbm.ShapeDbmParams] = None
    joint: Optional[dbm.JointLayerParams] = None

    def standardize(self, texture: np.ndarray) -> np.ndarray:
        return (texture - self.texture_mean) / self.texture_std

    def unstandardize(self, texture: np.ndarray) -> np.ndarray:
        return texture * self.texture_std + self.texture_mean


@dataclasses.dataclass
class FitState:
    shape: np.ndarray              # (2n,) image coordinates
    clean_texture: np.ndarray      # (n_valid,) standardized units
    mask: np.ndarray               # (n_valid,) per mask_mode
    residual_history: list
    converged: bool


@dataclasses.dataclass(frozen=True)
class IcPrecompute:
    gradient: np.ndarray           # (n_valid, 2) d a / d (x, y)
    jacobian: np.ndarray           # (n_valid, 2, 2n)
    sd: np.ndarray                 # (n_valid, 2n) steepest-descent images
    hessian: np.ndarray            # (2n, 2n) unmasked SD^T SD


def _frame_gradient(texture: np.ndarray, frame: ReferenceFrame) -> np.ndarray:
    """Central-difference gradient of a frame texture, falling back to
    one-sided differences where a neighbour leaves the valid region."""
    img = frame.to_image(texture)
    valid = frame.valid_mask.astype(float)
    h, w = img.shape

    def axis_diff(arr, v, axis):
        fwd = np.zeros_like(arr)
        bwd = np.zeros_like(arr)
        vf = np.zeros_like(arr)
        vb = np.zeros_like(arr)
        sl_lo = [slice(None)] * 2
        sl_hi = [slice(None)] * 2
        sl_lo[axis] = slice(None, -1)
        sl_hi[axis] = slice(1, None)
        fwd[tuple(sl_lo)] = arr[tuple(sl_hi)] - arr[tuple(sl_lo)]
        vf[tuple(sl_lo)] = v[tuple(sl_hi)]
        bwd[tuple(sl_hi)] = arr[tuple(sl_hi)] - arr[tuple(sl_lo)]
        vb[tuple(sl_hi)] = v[tuple(sl_lo)]
        both = (vf > 0) & (vb > 0)
        out = np.where(both, 0.5 * (fwd + bwd),
                       np.where(vf > 0, fwd, np.where(vb > 0, bwd, 0.0)))
        return out

    gx = axis_diff(img, valid, axis=1)
    gy = axis_diff(img, valid, axis=0)
    return np.stack([gx[frame.valid_mask], gy[frame.valid_mask]], axis=1)


def ic_precompute(a: np.ndarray, frame: ReferenceFrame) -> IcPrecompute:
    """Gradient, warp Jacobian, steepest-descent images SD = grad a * dW/ds
    and the unmasked Gauss-Newton Hessian SD^T SD."""
    a = np.asarray(a, dtype=float)
    if a.shape != (frame.n_valid,):
        raise ValueError("texture length does not match frame")
    grad = _frame_gradient(a, frame)
    jac = warp_jacobian(frame)
    sd = grad[:, 0, None] * jac[:, 0, :] + grad[:, 1, None] * jac[:, 1, :]
    return IcPrecompute(gradient=grad, jacobian=jac, sd=sd,
                        hessian=sd.T @ sd)


def masked_ic_step(pre: IcPrecompute, warped: np.ndarray, a: np.ndarray,
                   m: np.ndarray,
                   damping: float = 0.0) -> Tuple[np.ndarray, float]:
    """One masked IC update: solve (H_m + lambda I) ds = (m*SD)^T (m*(I-a)).

    Returns (delta_s, masked residual norm).  Raises SingularHessianError
    when the masked Hessian cannot be factorised and no damping is applied.
    """
    warped = np.asarray(warped, dtype=float)
    a = np.asarray(a, dtype=float)
    m = np.asarray(m, dtype=float)
    if not (warped.shape == a.shape == m.shape == (pre.sd.shape[0],)):
        raise ValueError("texture/mask dimensions do not match precompute")
    if (m < 0).any() or (m > 1).any():
        raise ValueError("mask values must lie in [0, 1]")
    residual = m * (warped - a)
    masked_sd = m[:, None] * pre.sd
    hessian = masked_sd.T @ masked_sd
    if damping > 0:
        hessian = hessian + damping * np.eye(hessian.shape[0])
    rhs = masked_sd.T @ residual
    try:
        delta = cho_solve(cho_factor(hessian), rhs)
    except LinAlgError:
        raise SingularHessianError(
            "masked Hessian is singular; increase damping or reduce the mask")
    return delta, float(np.linalg.norm(residual))


def compose_inverse(shape: np.ndarray, delta_s: np.ndarray) -> np.ndarray:
    """First-order inverse composition of a shape increment.

    The increment is a displacement field on the reference landmarks; its
    piecewise-affine extension evaluated at a landmark's own reference
    position is simply that landmark's displacement, so the composition
    moves every landmark by -delta.
    """
    shape = np.asarray(shape, dtype=float)
    delta_s = np.asarray(delta_s, dtype=float)
    if shape.shape != delta_s.shape:
        raise ValueError("shape and increment sizes differ")
    if not np.isfinite(delta_s).all():
        raise ValueError("increment must be finite")
    return shape - delta_s


def _regularize_shape(shape: np.ndarray, frame: ReferenceFrame,
                      shape_dbm: dbm.ShapeDbmParams,
                      blend: float) -> np.ndarray:
    """Blend the similarity-normalised shape with its model reconstruction."""
    if blend == 0.0:
        return shape
    pts = shape_points(shape)
    mean_pts = shape_points(frame.mean_shape)
    aligned, scale, theta, translation = geometry.similarity_align(
        pts, mean_pts)
    proj = shape_points(dbm.shape_reconstruct(aligned.reshape(-1), shape_dbm))
    blended = (1.0 - blend) * aligned + blend * proj
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    back = (blended - translation) @ rot / scale
    return back.reshape(-1)


def _infer_texture(warped_std: np.ndarray, models: FitModels, cfg: FitConfig,
                   rng) -> Tuple[np.ndarray, np.ndarray]:
    """Clean-texture template and fitting mask for one outer iteration."""
    force = np.ones(warped_std.size) if cfg.mask_mode == "all-ones" else None
    res = rdbm.infer_posterior(warped_std, models.rdbm,
                               sweeps=cfg.gibbs_sweeps, rng=rng,
                               chains=cfg.chains, force_mask=force)
    if cfg.mask_mode == "binary":
        m = res.m
    elif cfg.mask_mode == "probability":
        m = res.m_prob
    else:
        m = np.ones(warped_std.size)
    return res.reconstruction, m


def _fit_single(image, s_init, models: FitModels, frame: ReferenceFrame,
                cfg: FitConfig, seed: int) -> FitState:
    """One fitting run: alternating texture inference and damped masked IC.

    The returned state carries the best shape seen across outer iterations,
    judged by the full (unmasked) model residual — the masked residual is
    blind to misalignment the mask has absorbed.
    """
    shape = np.asarray(s_init, dtype=float).copy()
    rng = default_rng(seed)
    history = []
    converged = False
    best_score = np.inf
    best_shape = shape.copy()
    best_a = np.zeros(frame.n_valid)
    best_m = np.ones(frame.n_valid)
    stalled = 0
    for _ in range(cfg.max_outer_iters):
        try:
            warped = models.standardize(warp_texture(image, shape, frame))
        except ValueError:
            break                          # shape left the image
        a, m = _infer_texture(warped, models, cfg, rng)
        pre = ic_precompute(a, frame)
        # express lambda in units of the masked Hessian's mean diagonal so
        # doubling/halving moves the step length, not just the solve's
        # conditioning
        masked_sd = m[:, None] * pre.sd
        hscale = max(float(np.mean(np.sum(masked_sd ** 2, axis=0))), 1e-12)
        lam = cfg.damping * hscale
        floor = cfg.damping_floor * hscale
        cap = cfg.damping_cap * hscale
        resid_norm = float(np.linalg.norm(m * (warped - a)))
        for _ in range(cfg.max_inner_iters):
            try:
                delta, _ = masked_ic_step(pre, warped, a, m, damping=lam)
            except SingularHessianError:
                lam = max(2.0 * lam, floor)
                if lam > cap:
                    raise
                continue
            candidate = compose_inverse(shape, delta)
            try:
                cand_warped = models.standardize(
                    warp_texture(image, candidate, frame))
                cand_resid = float(np.linalg.norm(m * (cand_warped - a)))
            except ValueError:
                cand_resid = np.inf        # candidate warp left the image
            if cand_resid <= resid_norm:
                shape = candidate
                warped = cand_warped
                resid_norm = cand_resid
                lam = lam / 2.0 if lam > floor else lam
                if np.linalg.norm(delta) < cfg.shape_tol:
                    break
            else:
                lam = max(2.0 * lam, floor)
                if lam > cap:
                    break          # no step length improves: inner stall
        if models.shape_dbm is not None:
            shape = _regularize_shape(shape, frame, models.shape_dbm,
                                      cfg.shape_blend)
            try:
                warped = models.standardize(warp_texture(image, shape, frame))
            except ValueError:
                break
        score = float(np.linalg.norm(warped - a))
        history.append(score)
        if score < best_score * (1.0 - cfg.outer_tol):
            best_score = score
            best_shape = shape.copy()
            best_a, best_m = a, m
            stalled = 0
        else:
            if score < best_score:
                best_score = score
                best_shape = shape.copy()
                best_a, best_m = a, m
            stalled += 1
            if stalled >= cfg.patience:
                converged = True
                break
    return FitState(shape=best_shape, clean_texture=best_a, mask=best_m,
                    residual_history=history, converged=converged)


def fit(image, s_init, models: FitModels, frame: ReferenceFrame,
        cfg: FitConfig = FitConfig()) -> FitState:
    """Fit the model to an image from an initial shape.

    Outer iterations warp the image, re-estimate the clean texture and mask,
    and rebuild the steepest-descent system; inner iterations run damped
    masked IC steps.  Steps that increase the masked residual are rejected
    and the damping doubled (halved again on success).  The run restarts
    from ``n_starts`` jittered copies of the initialisation and keeps the
    result with the lowest model residual.
    """
    image = np.asarray(image, dtype=float)
    s_init = np.asarray(s_init, dtype=float)
    jitter_rng = default_rng(cfg.rng_seed)
    starts = [s_init]
    if models.shape_dbm is not None:
        # the shape model's projection recovers from initialisations whose
        # non-rigid perturbation is outside the model's range
        starts.append(_regularize_shape(s_init, frame, models.shape_dbm, 1.0))
    while len(starts) < cfg.n_starts + 1:
        starts.append(s_init + jitter_rng.uniform(
            -cfg.start_jitter, cfg.start_jitter, s_init.shape))
    best = None
    for k, start in enumerate(starts):
        state = _fit_single(image, start, models, frame, cfg,
                            seed=cfg.rng_seed + k)
        score = min(state.residual_history) if state.residual_history \
            else np.inf
        if best is None or score < best[0]:
            best = (score, state)
    return best[1]


def reconstruct(image, s, models: FitModels, frame: ReferenceFrame,
                cfg: FitConfig = FitConfig(), force_mask=None):
    """Clean texture, mask and composited frame image at a fixed shape.

    Returns (a, m_prob, composited) with a in image intensity units.
    ``force_mask`` clamps the occlusion mask (all-ones gives the non-robust
    baseline).
    """
    image = np.asarray(image, dtype=float)
    warped = models.standardize(warp_texture(image, s, frame))
    rng = default_rng(cfg.rng_seed)
    res = rdbm.infer_posterior(warped, models.rdbm, sweeps=cfg.gibbs_sweeps,
                               rng=rng, chains=cfg.chains,
                               force_mask=force_mask)
    a = models.unstandardize(res.reconstruction)
    composited = frame.to_image(a)
    return a, res.m_prob, composited
