"""Two-layer deep Boltzmann models over shapes and clean textures.

A two-layer model stacks a Gaussian-visible RBM under a binary RBM.  Hidden
biases live on ``layer1.hidden_bias`` (first hidden layer) and
``layer2.hidden_bias`` (second); ``layer2.visible_bias`` is kept at zero so
the first hidden layer is not double-biased in the stacked energy.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.random import Generator, default_rng
from scipy.special import expit, logsumexp

from . import rbm
from .rbm import (
    BinaryRbmParams,
    DimensionError,
    GaussianRbmParams,
    TrainConfig,
    bernoulli,
    train_rbm,
)


@dataclasses.dataclass(frozen=True)
class TwoLayerDbmParams:
    layer1: GaussianRbmParams
    layer2: BinaryRbmParams

    def __post_init__(self):
        if self.layer1.n_hidden != self.layer2.n_visible:
            raise DimensionError(
                f"layer1 hidden size {self.layer1.n_hidden} != "
                f"layer2 visible size {self.layer2.n_visible}"
            )

    @property
    def n_visible(self) -> int:
        return self.layer1.n_visible

    @property
    def n_hidden1(self) -> int:
        return self.layer1.n_hidden

    @property
    def n_hidden2(self) -> int:
        return self.layer2.n_hidden


class ShapeDbmParams(TwoLayerDbmParams):
    """Deep model over similarity-normalised landmark vectors."""


class TextureDbmParams(TwoLayerDbmParams):
    """Deep model over clean shape-free textures."""


@dataclasses.dataclass(frozen=True)
class JointLayerParams:
    """Top layer linking the shape and texture second hidden layers."""

    weights_shape: np.ndarray
    weights_texture: np.ndarray
    hidden_bias: np.ndarray

    def __post_init__(self):
        ws = np.asarray(self.weights_shape, dtype=float)
        wt = np.asarray(self.weights_texture, dtype=float)
        hb = np.asarray(self.hidden_bias, dtype=float)
        if ws.ndim != 2 or wt.ndim != 2 or ws.shape[1] != wt.shape[1] \
                or hb.shape != (ws.shape[1],):
            raise DimensionError("inconsistent joint-layer dimensions")
        if not (np.isfinite(ws).all() and np.isfinite(wt).all()
                and np.isfinite(hb).all()):
            raise ValueError("joint-layer parameters must be finite")
        object.__setattr__(self, "weights_shape", ws)
        object.__setattr__(self, "weights_texture", wt)
        object.__setattr__(self, "hidden_bias", hb)


@dataclasses.dataclass
class MeanFieldState:
    h1: np.ndarray
    h2: np.ndarray
    iterations: int
    delta: float
    converged: bool
    free_energy_trace: Optional[list] = None


def dbm_energy(v, h1, h2, p: TwoLayerDbmParams) -> float:
    """Energy of a full configuration: Gaussian quadratic at the bottom plus
    the two bilinear couplings and the hidden biases."""
    v = np.asarray(v, dtype=float)
    h1 = np.asarray(h1, dtype=float)
    h2 = np.asarray(h2, dtype=float)
    l1, l2 = p.layer1, p.layer2
    if v.shape != (p.n_visible,) or h1.shape != (p.n_hidden1,) \
            or h2.shape != (p.n_hidden2,):
        raise DimensionError("configuration does not match model dimensions")
    quad = 0.5 * np.sum((v - l1.visible_bias) ** 2 / l1.visible_sigma ** 2)
    return float(quad
                 - v @ l1.weights @ h1
                 - h1 @ l2.weights @ h2
                 - l1.hidden_bias @ h1
                 - l2.hidden_bias @ h2)


shape_dbm_energy = dbm_energy


def mean_field_infer(visible, p: TwoLayerDbmParams, tol: float = 1e-4,
                     max_iters: int = 50, damping: float = 0.5,
                     track_free_energy: bool = False) -> MeanFieldState:
    """Damped fixed-point sweeps of the two-layer mean-field equations.

    h1 receives bottom-up input from the clamped visible and top-down input
    from h2.  Non-convergence is reported on the returned state, not raised.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    visible = np.asarray(visible, dtype=float)
    l1, l2 = p.layer1, p.layer2
    bottom_up = visible @ l1.weights + l1.hidden_bias
    q1 = np.full(p.n_hidden1, 0.5)
    q2 = np.full(p.n_hidden2, 0.5)
    trace = [] if track_free_energy else None
    if track_free_energy:
        trace.append(mean_field_free_energy(visible, q1, q2, p))
    delta = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        new_q1 = expit(bottom_up + q2 @ l2.weights.T)
        q1_next = (1 - damping) * q1 + damping * new_q1
        new_q2 = expit(q1_next @ l2.weights + l2.hidden_bias)
        q2_next = (1 - damping) * q2 + damping * new_q2
        delta = max(np.abs(q1_next - q1).max(initial=0.0),
                    np.abs(q2_next - q2).max(initial=0.0))
        q1, q2 = q1_next, q2_next
        if track_free_energy:
            trace.append(mean_field_free_energy(visible, q1, q2, p))
        if delta < tol:
            break
    return MeanFieldState(q1, q2, it, float(delta), bool(delta < tol), trace)


def mean_field_free_energy(visible, q1, q2, p: TwoLayerDbmParams) -> float:
    """Variational free energy of factorial marginals (q1, q2) given v."""
    visible = np.asarray(visible, dtype=float)
    l1, l2 = p.layer1, p.layer2
    quad = 0.5 * np.sum((visible - l1.visible_bias) ** 2 / l1.visible_sigma ** 2)
    energy = (quad
              - visible @ l1.weights @ q1
              - q1 @ l2.weights @ q2
              - l1.hidden_bias @ q1
              - l2.hidden_bias @ q2)

    def entropy(q):
        q = np.clip(q, 1e-12, 1 - 1e-12)
        return -np.sum(q * np.log(q) + (1 - q) * np.log(1 - q))

    return float(energy - entropy(q1) - entropy(q2))


def exact_hidden_marginals(visible, p: TwoLayerDbmParams):
    """Exact (h1, h2) marginals given a clamped visible, by enumeration."""
    if p.n_hidden1 + p.n_hidden2 > 12:
        raise rbm.EnumerationError("too many hidden units to enumerate")
    visible = np.asarray(visible, dtype=float)
    H1 = rbm.enumerate_states(p.n_hidden1)
    H2 = rbm.enumerate_states(p.n_hidden2)
    l1, l2 = p.layer1, p.layer2
    log_w = ((H1 @ (visible @ l1.weights + l1.hidden_bias))[:, None]
             + H1 @ l2.weights @ H2.T
             + (H2 @ l2.hidden_bias)[None, :])
    prob = np.exp(log_w - logsumexp(log_w))
    return prob.sum(axis=1) @ H1, prob.sum(axis=0) @ H2


def pretrain_stack(data, cfg: TrainConfig, hidden_sizes: Tuple[int, int],
                   sigma: Optional[np.ndarray] = None,
                   cls=TwoLayerDbmParams) -> TwoLayerDbmParams:
    """Layer-wise CD pretraining of a two-layer stack.

    Layer 1 is a Gaussian RBM trained on the data; layer 2 a binary RBM
    trained on layer-1 activation probabilities.  With ``cfg.stack_doubling``
    the intermediate activations are computed with doubled bottom-up input,
    the usual correction for the missing top-down term.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.size == 0:
        raise ValueError("training data must be nonempty")
    n_h1, n_h2 = hidden_sizes
    rng = default_rng(cfg.rng_seed)
    if sigma is None:
        sigma = np.maximum(data.std(axis=0), 1e-2)
    else:
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float),
                                (data.shape[1],)).copy()
    l1 = GaussianRbmParams.initialize(
        data.shape[1], n_h1, rng,
        visible_bias=data.mean(axis=0), visible_sigma=sigma)
    l2 = BinaryRbmParams.initialize(n_h1, n_h2, rng)
    if cfg.epochs > 0:
        l1, _ = train_rbm(data, l1, cfg, rng)
        scale = 2.0 if cfg.stack_doubling else 1.0
        acts = expit(scale * (data @ l1.weights) + l1.hidden_bias)
        l2, _ = train_rbm(acts, l2, cfg, rng)
        l2 = BinaryRbmParams(l2.weights, np.zeros(n_h1), l2.hidden_bias)
    return cls(l1, l2)


def train_joint_layer(shape_h2, texture_g2, cfg: TrainConfig,
                      n_hidden: int = 64) -> JointLayerParams:
    """Binary RBM over concatenated top-layer activations of both models.

    The visible bias is frozen at zero; the joint layer only carries the
    coupling weights and its own hidden bias.
    """
    shape_h2 = np.atleast_2d(np.asarray(shape_h2, dtype=float))
    texture_g2 = np.atleast_2d(np.asarray(texture_g2, dtype=float))
    if shape_h2.shape[0] != texture_g2.shape[0]:
        raise DimensionError("row counts of shape and texture activations differ")
    data = np.hstack([shape_h2, texture_g2])
    rng = default_rng(cfg.rng_seed)
    p = BinaryRbmParams.initialize(data.shape[1], n_hidden, rng)
    if cfg.epochs > 0:
        p, _ = train_rbm(data, p, cfg, rng, freeze_visible_bias=True)
    k = shape_h2.shape[1]
    return JointLayerParams(p.weights[:k], p.weights[k:], p.hidden_bias)


def joint_predict_texture(shape_h2, p: JointLayerParams,
                          iters: int = 20) -> np.ndarray:
    """Mean-field prediction of texture activations from shape activations."""
    shape_h2 = np.asarray(shape_h2, dtype=float)
    g2 = np.full(p.weights_texture.shape[0], 0.5)
    for _ in range(iters):
        h3 = expit(shape_h2 @ p.weights_shape + g2 @ p.weights_texture
                   + p.hidden_bias)
        g2 = expit(h3 @ p.weights_texture.T)
    return g2


def joint_predict_shape(texture_g2, p: JointLayerParams,
                        iters: int = 20) -> np.ndarray:
    texture_g2 = np.asarray(texture_g2, dtype=float)
    h2 = np.full(p.weights_shape.shape[0], 0.5)
    for _ in range(iters):
        h3 = expit(h2 @ p.weights_shape + texture_g2 @ p.weights_texture
                   + p.hidden_bias)
        h2 = expit(h3 @ p.weights_shape.T)
    return h2


def top_down_visible_mean(q1, p: TwoLayerDbmParams) -> np.ndarray:
    l1 = p.layer1
    return l1.visible_bias + l1.visible_sigma ** 2 * (l1.weights @ np.asarray(q1))


def shape_reconstruct(s, p: TwoLayerDbmParams, tol: float = 1e-4,
                      max_iters: int = 50) -> np.ndarray:
    """Deterministic reconstruction: mean-field up, top-down Gaussian mean."""
    s = np.asarray(s, dtype=float)
    if s.shape != (p.n_visible,):
        raise DimensionError("input does not match model visible dimension")
    state = mean_field_infer(s, p, tol=tol, max_iters=max_iters)
    return top_down_visible_mean(state.h1, p)
