"""Single-layer energy models: binary and Gaussian restricted Boltzmann machines.

Weight matrices are stored visible x hidden.  Shape vectors and textures are
1-D float arrays; hidden states are {0,1} float arrays.  All sampling goes
through an explicit ``numpy.random.Generator`` so that training and inference
are reproducible bit-for-bit under a fixed seed.

The Gaussian energy couples visibles to hiddens without dividing by sigma,
which places sigma**2 in the visible conditional mean (see
``sample_visible``).
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Union

import numpy as np
from numpy.random import Generator, default_rng
from scipy.special import expit, logsumexp


class DimensionError(ValueError):
    """Raised when operand dimensions do not match the parameter record."""


class EnumerationError(ValueError):
    """Raised when a model is too large for exact enumeration."""


class DivergenceError(FloatingPointError):
    """Raised when a training update produces non-finite parameters."""


def _as_vector(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionError(f"{name} must be a 1-D vector, got shape {x.shape}")
    return x


@dataclasses.dataclass(frozen=True)
class BinaryRbmParams:
    """Parameters of a binary-binary RBM."""

    weights: np.ndarray
    visible_bias: np.ndarray
    hidden_bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        vb = np.asarray(self.visible_bias, dtype=float)
        hb = np.asarray(self.hidden_bias, dtype=float)
        if w.ndim != 2 or vb.shape != (w.shape[0],) or hb.shape != (w.shape[1],):
            raise DimensionError(
                f"inconsistent RBM dimensions: W {w.shape}, b {vb.shape}, c {hb.shape}"
            )
        if not (np.isfinite(w).all() and np.isfinite(vb).all() and np.isfinite(hb).all()):
            raise ValueError("RBM parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "visible_bias", vb)
        object.__setattr__(self, "hidden_bias", hb)

    @property
    def n_visible(self) -> int:
        return self.weights.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def initialize(cls, n_visible: int, n_hidden: int, rng: Generator,
                   weight_scale: float = 0.01) -> "BinaryRbmParams":
        return cls(
            weights=rng.normal(0.0, weight_scale, size=(n_visible, n_hidden)),
            visible_bias=np.zeros(n_visible),
            hidden_bias=np.zeros(n_hidden),
        )


@dataclasses.dataclass(frozen=True)
class GaussianRbmParams:
    """Parameters of a Gaussian-visible / binary-hidden RBM."""

    weights: np.ndarray
    visible_bias: np.ndarray
    visible_sigma: np.ndarray
    hidden_bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        vb = np.asarray(self.visible_bias, dtype=float)
        sg = np.asarray(self.visible_sigma, dtype=float)
        hb = np.asarray(self.hidden_bias, dtype=float)
        if (w.ndim != 2 or vb.shape != (w.shape[0],) or sg.shape != (w.shape[0],)
                or hb.shape != (w.shape[1],)):
            raise DimensionError(
                f"inconsistent GRBM dimensions: W {w.shape}, b {vb.shape}, "
                f"sigma {sg.shape}, c {hb.shape}"
            )
        if not (np.isfinite(w).all() and np.isfinite(vb).all()
                and np.isfinite(sg).all() and np.isfinite(hb).all()):
            raise ValueError("GRBM parameters must be finite")
        if not (sg > 0).all():
            raise ValueError("visible_sigma must be strictly positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "visible_bias", vb)
        object.__setattr__(self, "visible_sigma", sg)
        object.__setattr__(self, "hidden_bias", hb)

    @property
    def n_visible(self) -> int:
        return self.weights.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def initialize(cls, n_visible: int, n_hidden: int, rng: Generator,
                   weight_scale: float = 0.01,
                   visible_bias: Optional[np.ndarray] = None,
                   visible_sigma: Optional[np.ndarray] = None) -> "GaussianRbmParams":
        if visible_bias is None:
            visible_bias = np.zeros(n_visible)
        if visible_sigma is None:
            visible_sigma = np.ones(n_visible)
        return cls(
            weights=rng.normal(0.0, weight_scale, size=(n_visible, n_hidden)),
            visible_bias=np.asarray(visible_bias, dtype=float),
            visible_sigma=np.asarray(visible_sigma, dtype=float),
            hidden_bias=np.zeros(n_hidden),
        )


RbmParams = Union[BinaryRbmParams, GaussianRbmParams]


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for contrastive-divergence training."""

    learning_rate: float
    cd_steps: int = 1
    epochs: int = 600
    batch_size: int = 32
    momentum: float = 0.0
    weight_decay: float = 0.0
    rng_seed: int = 0
    learn_sigma: bool = False
    stack_doubling: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.cd_steps < 1 or self.batch_size < 1:
            raise ValueError("cd_steps and batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclasses.dataclass
class GradientRecord:
    weights: np.ndarray
    visible_bias: np.ndarray
    hidden_bias: np.ndarray
    visible_sigma: Optional[np.ndarray] = None

    def flatten(self) -> np.ndarray:
        parts = [self.weights.ravel(), self.visible_bias, self.hidden_bias]
        if self.visible_sigma is not None:
            parts.append(self.visible_sigma)
        return np.concatenate(parts)


@dataclasses.dataclass
class CdDiagnostics:
    """Per-update diagnostics plus the momentum velocity carried between calls."""

    reconstruction_error: float
    velocity: GradientRecord


# --------------------------------------------------------------------------
# energies


def binary_rbm_energy(v, h, p: BinaryRbmParams) -> float:
    v = _as_vector(v, "v")
    h = _as_vector(h, "h")
    if v.shape[0] != p.n_visible or h.shape[0] != p.n_hidden:
        raise DimensionError("state dimensions do not match parameters")
    return float(-v @ p.weights @ h - p.visible_bias @ v - p.hidden_bias @ h)


def gaussian_rbm_energy(v, h, p: GaussianRbmParams) -> float:
    v = _as_vector(v, "v")
    h = _as_vector(h, "h")
    if v.shape[0] != p.n_visible or h.shape[0] != p.n_hidden:
        raise DimensionError("state dimensions do not match parameters")
    quad = 0.5 * np.sum((v - p.visible_bias) ** 2 / p.visible_sigma ** 2)
    return float(quad - v @ p.weights @ h - p.hidden_bias @ h)


def rbm_energy(v, h, p: RbmParams) -> float:
    if isinstance(p, GaussianRbmParams):
        return gaussian_rbm_energy(v, h, p)
    return binary_rbm_energy(v, h, p)


# --------------------------------------------------------------------------
# conditionals and sampling


def hidden_probabilities(v, p: RbmParams) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != p.n_visible:
        raise DimensionError("visible dimension does not match parameters")
    return expit(v @ p.weights + p.hidden_bias)


def visible_means(h, p: RbmParams) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.shape[-1] != p.n_hidden:
        raise DimensionError("hidden dimension does not match parameters")
    if isinstance(p, GaussianRbmParams):
        return p.visible_bias + p.visible_sigma ** 2 * (h @ p.weights.T)
    return expit(h @ p.weights.T + p.visible_bias)


def bernoulli(probs: np.ndarray, rng: Generator) -> np.ndarray:
    # Strict less-than so p=0 never fires and p=1 always does.
    return (rng.random(probs.shape) < probs).astype(float)


def sample_hidden(v, p: RbmParams, rng: Generator):
    """Return (probabilities, binary sample) of the hidden layer given v."""
    probs = hidden_probabilities(v, p)
    return probs, bernoulli(probs, rng)


def sample_visible(h, p: RbmParams, rng: Generator):
    """Return (mean, sample) of the visible layer given h.

    Binary models sample Bernoulli around the logistic mean; Gaussian models
    sample Normal(b + sigma**2 * (W h), sigma**2).
    """
    mean = visible_means(h, p)
    if isinstance(p, GaussianRbmParams):
        sample = rng.normal(mean, p.visible_sigma)
    else:
        sample = bernoulli(mean, rng)
    return mean, sample


# --------------------------------------------------------------------------
# contrastive divergence


def _zero_grad(p: RbmParams) -> GradientRecord:
    sigma = None
    if isinstance(p, GaussianRbmParams):
        sigma = np.zeros_like(p.visible_sigma)
    return GradientRecord(
        weights=np.zeros_like(p.weights),
        visible_bias=np.zeros_like(p.visible_bias),
        hidden_bias=np.zeros_like(p.hidden_bias),
        visible_sigma=sigma,
    )


def _phase_stats(v: np.ndarray, h: np.ndarray, p: RbmParams) -> GradientRecord:
    n = v.shape[0]
    gw = v.T @ h / n
    gh = h.mean(axis=0)
    if isinstance(p, GaussianRbmParams):
        gv = ((v - p.visible_bias) / p.visible_sigma ** 2).mean(axis=0)
        gs = ((v - p.visible_bias) ** 2 / p.visible_sigma ** 3).mean(axis=0)
        return GradientRecord(gw, gv, gh, gs)
    return GradientRecord(gw, v.mean(axis=0), gh, None)


def cd_update(batch, p: RbmParams, cfg: TrainConfig, rng: Generator,
              velocity: Optional[GradientRecord] = None):
    """One CD-k gradient step on a batch.

    Returns (updated params, CdDiagnostics).  Pass the returned velocity back
    in to carry momentum across calls.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.size == 0:
        raise ValueError("batch must be nonempty")
    if not np.isfinite(batch).all():
        raise ValueError("batch must be finite")
    if batch.shape[1] != p.n_visible:
        raise DimensionError("batch dimension does not match parameters")

    pos_h = hidden_probabilities(batch, p)
    v_neg = batch
    h_probs = pos_h
    recon = None
    for _ in range(cfg.cd_steps):
        h_samp = bernoulli(h_probs, rng)
        mean, v_neg = sample_visible(h_samp, p, rng)
        if recon is None:
            recon = mean
        h_probs = hidden_probabilities(v_neg, p)
    neg_h = h_probs

    pos = _phase_stats(batch, pos_h, p)
    neg = _phase_stats(v_neg, neg_h, p)

    if velocity is None:
        velocity = _zero_grad(p)

    lr, mom, wd = cfg.learning_rate, cfg.momentum, cfg.weight_decay
    vel_w = mom * velocity.weights + lr * (pos.weights - neg.weights - wd * p.weights)
    vel_vb = mom * velocity.visible_bias + lr * (pos.visible_bias - neg.visible_bias)
    vel_hb = mom * velocity.hidden_bias + lr * (pos.hidden_bias - neg.hidden_bias)

    new_w = p.weights + vel_w
    new_vb = p.visible_bias + vel_vb
    new_hb = p.hidden_bias + vel_hb
    if not (np.isfinite(new_w).all() and np.isfinite(new_vb).all()
            and np.isfinite(new_hb).all()):
        raise DivergenceError("non-finite parameter update; lower the learning rate")

    vel_sig = None
    if isinstance(p, GaussianRbmParams):
        sigma = p.visible_sigma
        vel_sig = np.zeros_like(sigma)
        if cfg.learn_sigma:
            vel_sig = mom * velocity.visible_sigma + lr * (
                pos.visible_sigma - neg.visible_sigma)
            sigma = np.maximum(sigma + vel_sig, 1e-3)
            if not np.isfinite(sigma).all():
                raise DivergenceError("non-finite sigma update")
        new_p: RbmParams = GaussianRbmParams(new_w, new_vb, sigma, new_hb)
    else:
        new_p = BinaryRbmParams(new_w, new_vb, new_hb)

    err = float(np.mean((batch - recon) ** 2))
    return new_p, CdDiagnostics(err, GradientRecord(vel_w, vel_vb, vel_hb, vel_sig))


def train_rbm(data, p: RbmParams, cfg: TrainConfig, rng: Optional[Generator] = None,
              freeze_visible_bias: bool = False):
    """Epoch/minibatch CD training loop.

    Returns (params, per-epoch mean reconstruction error list).
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if rng is None:
        rng = default_rng(cfg.rng_seed)
    velocity = None
    history = []
    n = data.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        errs = []
        for start in range(0, n, cfg.batch_size):
            batch = data[order[start:start + cfg.batch_size]]
            p, diag = cd_update(batch, p, cfg, rng, velocity)
            if freeze_visible_bias:
                if isinstance(p, GaussianRbmParams):
                    p = dataclasses.replace(p, visible_bias=np.zeros(p.n_visible))
                else:
                    p = BinaryRbmParams(p.weights, np.zeros(p.n_visible), p.hidden_bias)
            velocity = diag.velocity
            errs.append(diag.reconstruction_error)
        history.append(float(np.mean(errs)))
    return p, history


# --------------------------------------------------------------------------
# exact small-model oracles

_MAX_ENUM_UNITS = 20


def enumerate_states(n: int) -> np.ndarray:
    """All 2**n binary states as a (2**n, n) float array, lexicographic."""
    if n > _MAX_ENUM_UNITS:
        raise EnumerationError(f"cannot enumerate {n} binary units")
    grid = np.indices((2,) * n).reshape(n, -1).T if n else np.zeros((1, 0))
    return grid.astype(float)


def _binary_log_joint(p: BinaryRbmParams):
    """Unnormalised log P(v, h) over the enumerated grid, plus the state grids."""
    if p.n_visible + p.n_hidden > _MAX_ENUM_UNITS:
        raise EnumerationError("model too large to enumerate")
    V = enumerate_states(p.n_visible)
    H = enumerate_states(p.n_hidden)
    log_joint = (V @ p.weights @ H.T
                 + (V @ p.visible_bias)[:, None]
                 + (H @ p.hidden_bias)[None, :])
    return log_joint, V, H


def _gaussian_hidden_log_weight(p: GaussianRbmParams):
    """log of the h-marginal weight after integrating the Gaussian visibles."""
    if p.n_hidden > _MAX_ENUM_UNITS:
        raise EnumerationError("model too large to enumerate")
    H = enumerate_states(p.n_hidden)
    wh = H @ p.weights.T                       # (states, n_visible)
    log_w = (H @ p.hidden_bias
             + wh @ p.visible_bias
             + 0.5 * np.sum(p.visible_sigma ** 2 * wh ** 2, axis=1))
    return log_w, H, wh


def exact_log_partition(p: RbmParams) -> float:
    if isinstance(p, GaussianRbmParams):
        log_w, _, _ = _gaussian_hidden_log_weight(p)
        const = np.sum(np.log(p.visible_sigma * np.sqrt(2 * np.pi)))
        return float(logsumexp(log_w) + const)
    log_joint, _, _ = _binary_log_joint(p)
    return float(logsumexp(log_joint))


def exact_loglik(batch, p: RbmParams) -> float:
    """Mean exact log-likelihood of the batch under the enumerable model."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    log_z = exact_log_partition(p)
    if isinstance(p, GaussianRbmParams):
        quad = 0.5 * np.sum((batch - p.visible_bias) ** 2 / p.visible_sigma ** 2,
                            axis=1)
        H = enumerate_states(p.n_hidden)
        coupling = batch @ p.weights @ H.T + (H @ p.hidden_bias)[None, :]
        free = -quad + logsumexp(coupling, axis=1)
    else:
        H = enumerate_states(p.n_hidden)
        coupling = (batch @ p.weights @ H.T
                    + (batch @ p.visible_bias)[:, None]
                    + (H @ p.hidden_bias)[None, :])
        free = logsumexp(coupling, axis=1)
    return float(np.mean(free) - log_z)


def exact_model_stats(p: RbmParams) -> GradientRecord:
    """Exact model-distribution expectations of the energy gradients."""
    if isinstance(p, GaussianRbmParams):
        log_w, H, wh = _gaussian_hidden_log_weight(p)
        prob = np.exp(log_w - logsumexp(log_w))
        mean_v = p.visible_bias + p.visible_sigma ** 2 * wh    # E[v | h]
        gw = np.einsum("s,si,sj->ij", prob, mean_v, H)
        gv = prob @ wh                                         # E[(v-b)/sigma^2]
        gh = prob @ H
        # E[(v-b)^2] | h = sigma^2 + (sigma^2 W h)^2
        sq = p.visible_sigma ** 2 + (p.visible_sigma ** 2 * wh) ** 2
        gs = (prob @ sq) / p.visible_sigma ** 3
        return GradientRecord(gw, gv, gh, gs)
    log_joint, V, H = _binary_log_joint(p)
    prob = np.exp(log_joint - logsumexp(log_joint))
    gw = np.einsum("vh,vi,hj->ij", prob, V, H)
    gv = prob.sum(axis=1) @ V
    gh = prob.sum(axis=0) @ H
    return GradientRecord(gw, gv, gh, None)


def exact_visible_marginals(p: BinaryRbmParams) -> np.ndarray:
    """Exact per-unit P(v_i = 1) for an enumerable binary RBM."""
    log_joint, V, _ = _binary_log_joint(p)
    prob = np.exp(log_joint - logsumexp(log_joint))
    return prob.sum(axis=1) @ V


def exact_joint_distribution(p: BinaryRbmParams) -> np.ndarray:
    """Exact joint P(v, h) over the enumerated (visible, hidden) state grid."""
    log_joint, _, _ = _binary_log_joint(p)
    return np.exp(log_joint - logsumexp(log_joint))


def exact_loglik_grad(batch, p: RbmParams) -> GradientRecord:
    """Exact d logP(batch)/d theta via full partition-function enumeration."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    pos_h = hidden_probabilities(batch, p)
    pos = _phase_stats(batch, pos_h, p)
    neg = exact_model_stats(p)
    sigma = None
    if isinstance(p, GaussianRbmParams):
        sigma = pos.visible_sigma - neg.visible_sigma
    return GradientRecord(
        weights=pos.weights - neg.weights,
        visible_bias=pos.visible_bias - neg.visible_bias,
        hidden_bias=pos.hidden_bias - neg.hidden_bias,
        visible_sigma=sigma,
    )
