"""Robust gated texture model.

The visible layer couples an observed texture ``a_tilde``, a clean texture
``a`` and a per-pixel binary mask ``m`` (1 = clean).  ``a`` is modelled by a
two-layer Gaussian DBM, ``m`` by a binary RBM, and the gating quadratic ties
``a`` to ``a_tilde`` wherever the mask says the observation is trustworthy.

Conditionals are factorial: the mask is sampled given the current clean
texture, then the clean texture given the new mask; the hidden groups factor
as (mask hiddens | m), (g1 | a, g2), (g2 | g1).
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.random import Generator, default_rng
from scipy.special import expit

from . import dbm as dbm_mod
from .dbm import TextureDbmParams, pretrain_stack
from .rbm import (
    BinaryRbmParams,
    DimensionError,
    DivergenceError,
    GaussianRbmParams,
    TrainConfig,
    bernoulli,
    train_rbm,
)


@dataclasses.dataclass(frozen=True)
class RdbmParams:
    texture_dbm: TextureDbmParams
    mask_rbm: BinaryRbmParams
    gating_gamma: np.ndarray
    observed_bias: np.ndarray
    observed_sigma: np.ndarray

    def __post_init__(self):
        gamma = np.asarray(self.gating_gamma, dtype=float)
        ob = np.asarray(self.observed_bias, dtype=float)
        osig = np.asarray(self.observed_sigma, dtype=float)
        n = self.texture_dbm.n_visible
        if gamma.shape != (n,) or ob.shape != (n,) or osig.shape != (n,) \
                or self.mask_rbm.n_visible != n:
            raise DimensionError("pixel-indexed fields disagree on pixel count")
        if not ((gamma > 0).all() and (osig > 0).all()):
            raise ValueError("gamma and observed_sigma must be strictly positive")
        object.__setattr__(self, "gating_gamma", gamma)
        object.__setattr__(self, "observed_bias", ob)
        object.__setattr__(self, "observed_sigma", osig)

    @property
    def n_pixels(self) -> int:
        return self.texture_dbm.n_visible


@dataclasses.dataclass
class RdbmState:
    a: np.ndarray
    m: np.ndarray
    g_m: np.ndarray
    g1: np.ndarray
    g2: np.ndarray

    @classmethod
    def initial(cls, a_tilde: np.ndarray, p: RdbmParams) -> "RdbmState":
        # innocent until proven corrupted: mask starts at all ones
        a_tilde = np.asarray(a_tilde, dtype=float)
        return cls(
            a=a_tilde.copy(),
            m=np.ones(p.n_pixels),
            g_m=np.zeros(p.mask_rbm.n_hidden),
            g1=np.zeros(p.texture_dbm.n_hidden1),
            g2=np.zeros(p.texture_dbm.n_hidden2),
        )


def rdbm_energy(state: RdbmState, a_tilde, p: RdbmParams) -> float:
    """Full-configuration energy: gating and clean quadratics, the two DBM
    couplings, the mask coupling, the observed quadratic, plus bias terms."""
    a_tilde = np.asarray(a_tilde, dtype=float)
    a, m = np.asarray(state.a, float), np.asarray(state.m, float)
    if a.shape != (p.n_pixels,) or m.shape != (p.n_pixels,) \
            or a_tilde.shape != (p.n_pixels,):
        raise DimensionError("state does not match model pixel count")
    tex = p.texture_dbm
    l1, l2 = tex.layer1, tex.layer2
    mask = p.mask_rbm
    gating = 0.5 * np.sum(p.gating_gamma ** 2 * m * (a - a_tilde) ** 2
                          / l1.visible_sigma ** 2)
    clean = 0.5 * np.sum((a - l1.visible_bias) ** 2 / l1.visible_sigma ** 2)
    observed = 0.5 * np.sum((a_tilde - p.observed_bias) ** 2
                            / p.observed_sigma ** 2)
    return float(
        gating + clean + observed
        - a @ l1.weights @ state.g1
        - state.g1 @ l2.weights @ state.g2
        - m @ mask.weights @ state.g_m
        - l1.hidden_bias @ state.g1
        - l2.hidden_bias @ state.g2
        - mask.visible_bias @ m
        - mask.hidden_bias @ state.g_m
    )


def mask_logits(a, g_m, a_tilde, p: RdbmParams) -> np.ndarray:
    """Log-odds of each mask unit being clean given the current clean texture."""
    tex = p.texture_dbm.layer1
    penalty = (p.gating_gamma ** 2 * (np.asarray(a) - np.asarray(a_tilde)) ** 2
               / (2.0 * tex.visible_sigma ** 2))
    return p.mask_rbm.weights @ np.asarray(g_m) + p.mask_rbm.visible_bias - penalty


def clean_texture_posterior(m, g1, a_tilde, p: RdbmParams):
    """Mean and variance of the clean texture given mask and first hiddens."""
    tex = p.texture_dbm.layer1
    m = np.asarray(m, dtype=float)
    gsq = p.gating_gamma ** 2 * m
    mean = (gsq * np.asarray(a_tilde) + tex.visible_bias
            + tex.visible_sigma ** 2 * (tex.weights @ np.asarray(g1))) / (gsq + 1.0)
    var = tex.visible_sigma ** 2 / (gsq + 1.0)
    return mean, var


def sample_visibles(state: RdbmState, a_tilde, p: RdbmParams, rng: Generator):
    """Sample (m, a) factorially: m given the current a, then a given m.

    Returns (a, m, m_prob).
    """
    a_tilde = np.asarray(a_tilde, dtype=float)
    if a_tilde.shape != (p.n_pixels,):
        raise DimensionError("a_tilde does not match model pixel count")
    m_prob = expit(mask_logits(state.a, state.g_m, a_tilde, p))
    m = bernoulli(m_prob, rng)
    mean, var = clean_texture_posterior(m, state.g1, a_tilde, p)
    a = rng.normal(mean, np.sqrt(var))
    return a, m, m_prob


def sample_hiddens(state: RdbmState, p: RdbmParams, rng: Generator):
    """Sample (g_m, g1, g2) from their factorial conditionals.

    g_m depends only on the mask; g1 on the clean texture and the current g2;
    g2 on the freshly sampled g1.  Draw order is fixed (g_m, g1, g2) so the
    uniform stream consumed by each factor is independent of the others'
    inputs.
    """
    tex = p.texture_dbm
    l1, l2 = tex.layer1, tex.layer2
    gm_prob = expit(state.m @ p.mask_rbm.weights + p.mask_rbm.hidden_bias)
    g_m = bernoulli(gm_prob, rng)
    g1_prob = expit(state.a @ l1.weights + state.g2 @ l2.weights.T
                    + l1.hidden_bias)
    g1 = bernoulli(g1_prob, rng)
    g2_prob = expit(g1 @ l2.weights + l2.hidden_bias)
    g2 = bernoulli(g2_prob, rng)
    return g_m, g1, g2


def gibbs_sweep(state: RdbmState, a_tilde, p: RdbmParams, rng: Generator,
                force_mask: Optional[np.ndarray] = None):
    """One alternating sweep; returns (new state, mask probabilities).

    ``force_mask`` clamps the mask (used by the non-robust baseline).
    """
    g_m, g1, g2 = sample_hiddens(state, p, rng)
    mid = RdbmState(state.a, state.m, g_m, g1, g2)
    a, m, m_prob = sample_visibles(mid, a_tilde, p, rng)
    if force_mask is not None:
        m = np.asarray(force_mask, dtype=float)
        mean, var = clean_texture_posterior(m, g1, a_tilde, p)
        a = rng.normal(mean, np.sqrt(var))
        m_prob = m.copy()
    return RdbmState(a, m, g_m, g1, g2), m_prob


def _bernoulli_entropy(q: np.ndarray) -> float:
    q = np.clip(q, 1e-12, 1.0 - 1e-12)
    return float(-np.sum(q * np.log(q) + (1.0 - q) * np.log(1.0 - q)))


@dataclasses.dataclass
class InferResult:
    """Posterior summaries from the Gibbs chain on a clamped observation."""

    a: np.ndarray            # posterior-mean clean texture (gated estimate)
    reconstruction: np.ndarray   # top-down model reconstruction from g1
    m: np.ndarray            # thresholded mask
    m_prob: np.ndarray
    g1_mean: np.ndarray
    g2_mean: np.ndarray


def infer_posterior(a_tilde, p: RdbmParams, sweeps: int, rng: Generator,
                    chains: int = 1,
                    force_mask: Optional[np.ndarray] = None) -> InferResult:
    """Run alternating Gibbs sweeps clamped on the observation and average
    each chain over its last ceil(sweeps/2) sweeps.

    The first chain starts innocently (a = a_tilde, m = 1); additional chains
    start from random masks so at least one escapes local modes where the
    clean model explains the occluder itself.  The chain with the lowest
    variational free energy (average energy minus the entropy of its
    averaged factorial marginals) wins; the entropy term matters because a
    masked pixel trades a lower energy for a broader conditional on the
    clean value.  Besides the gated posterior mean of the clean
    texture this also averages the pure top-down reconstruction
    b + sigma^2 (V1 g1), which never reads the observation directly and is
    what reconstruction metrics compare.
    """
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    a_tilde = np.asarray(a_tilde, dtype=float)
    tex = p.texture_dbm.layer1
    keep = (sweeps + 1) // 2
    best = None
    best_energy = np.inf
    for chain_idx in range(chains):
        state = RdbmState.initial(a_tilde, p)
        if chain_idx > 0 and force_mask is None:
            state = dataclasses.replace(
                state, m=bernoulli(np.full(p.n_pixels, 0.5), rng))
        a_acc = np.zeros(p.n_pixels)
        m_acc = np.zeros(p.n_pixels)
        r_acc = np.zeros(p.n_pixels)
        gm_acc = np.zeros(p.mask_rbm.n_hidden)
        g1_acc = np.zeros(p.texture_dbm.n_hidden1)
        g2_acc = np.zeros(p.texture_dbm.n_hidden2)
        e_acc = 0.0
        for sweep in range(sweeps):
            state, m_prob = gibbs_sweep(state, a_tilde, p, rng,
                                        force_mask=force_mask)
            if sweep >= sweeps - keep:
                a_acc += state.a
                m_acc += m_prob
                r_acc += tex.visible_bias + tex.visible_sigma ** 2 \
                    * (tex.weights @ state.g1)
                gm_acc += state.g_m
                g1_acc += state.g1
                g2_acc += state.g2
                e_acc += rdbm_energy(state, a_tilde, p)
        m_prob = m_acc / keep
        gauss_var = tex.visible_sigma ** 2 \
            / (p.gating_gamma ** 2 * m_prob + 1.0)
        entropy = (0.5 * np.sum(np.log(2.0 * np.pi * np.e * gauss_var))
                   + _bernoulli_entropy(m_prob)
                   + _bernoulli_entropy(gm_acc / keep)
                   + _bernoulli_entropy(g1_acc / keep)
                   + _bernoulli_entropy(g2_acc / keep))
        free_energy = e_acc / keep - entropy
        if free_energy < best_energy:
            best_energy = free_energy
            best = InferResult(
                a=a_acc / keep,
                reconstruction=r_acc / keep,
                m=(m_prob >= 0.5).astype(float),
                m_prob=m_prob,
                g1_mean=g1_acc / keep,
                g2_mean=g2_acc / keep,
            )
    return best


def infer_clean(a_tilde, p: RdbmParams, sweeps: int, rng: Generator,
                chains: int = 1, force_mask: Optional[np.ndarray] = None):
    """Estimate the clean texture and occlusion mask behind an observation.

    Returns (a, m, m_prob) with m = (m_prob >= 0.5).
    """
    res = infer_posterior(a_tilde, p, sweeps, rng, chains=chains,
                          force_mask=force_mask)
    return res.a, res.m, res.m_prob


# --------------------------------------------------------------------------
# training


@dataclasses.dataclass
class _RdbmStats:
    v1: np.ndarray
    v2: np.ndarray
    u: np.ndarray
    b_g: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    b_m: np.ndarray
    c_m: np.ndarray


def _stats(a, m, g_m, g1, g2, p: RdbmParams) -> _RdbmStats:
    n = a.shape[0]
    tex = p.texture_dbm.layer1
    return _RdbmStats(
        v1=a.T @ g1 / n,
        v2=g1.T @ g2 / n,
        u=m.T @ g_m / n,
        b_g=((a - tex.visible_bias) / tex.visible_sigma ** 2).mean(axis=0),
        c1=g1.mean(axis=0),
        c2=g2.mean(axis=0),
        b_m=m.mean(axis=0),
        c_m=g_m.mean(axis=0),
    )


def _mean_field_posterior(a_tilde: np.ndarray, p: RdbmParams,
                          iters: int = 10):
    """Factorial posterior means of all latents given clamped observations."""
    tex = p.texture_dbm
    l1, l2 = tex.layer1, tex.layer2
    mask = p.mask_rbm
    n = a_tilde.shape[0]
    a = a_tilde.copy()
    m = np.ones((n, p.n_pixels))
    g2 = np.full((n, tex.n_hidden2), 0.5)
    for _ in range(iters):
        g_m = expit(m @ mask.weights + mask.hidden_bias)
        g1 = expit(a @ l1.weights + g2 @ l2.weights.T + l1.hidden_bias)
        g2 = expit(g1 @ l2.weights + l2.hidden_bias)
        penalty = (p.gating_gamma ** 2 * (a - a_tilde) ** 2
                   / (2.0 * l1.visible_sigma ** 2))
        m = expit(g_m @ mask.weights.T + mask.visible_bias - penalty)
        gsq = p.gating_gamma ** 2 * m
        a = (gsq * a_tilde + l1.visible_bias
             + l1.visible_sigma ** 2 * (g1 @ l1.weights.T)) / (gsq + 1.0)
    return a, m, g_m, g1, g2


def _sample_observed(a, m, p: RdbmParams, rng: Generator) -> np.ndarray:
    """Sample a_tilde given (a, m) in the negative-phase chains."""
    tex = p.texture_dbm.layer1
    gsq = p.gating_gamma ** 2 * m
    prec = gsq / tex.visible_sigma ** 2 + 1.0 / p.observed_sigma ** 2
    mean = (gsq * a / tex.visible_sigma ** 2
            + p.observed_bias / p.observed_sigma ** 2) / prec
    return rng.normal(mean, np.sqrt(1.0 / prec))


def _residual_sigma(tex: TextureDbmParams, data: np.ndarray,
                    scale_factor: float = 1.0,
                    floor: float = 1e-2) -> np.ndarray:
    """Per-pixel reconstruction-residual noise scale of a trained stack.

    The raw data std overstates the noise (the hiddens explain most of the
    variance), which would make the gating penalty too weak to flip the mask
    on corrupted pixels.  ``scale_factor`` loosens (>1) or tightens (<1) the
    residual estimate.
    """
    from . import rbm as rbm_mod
    l1 = tex.layer1
    acts = rbm_mod.hidden_probabilities(data, l1)
    recon = rbm_mod.visible_means(acts, l1)
    resid = np.sqrt(np.mean((data - recon) ** 2, axis=0))
    return np.maximum(scale_factor * resid, floor)


def train_mask_rbm(masks, cfg: TrainConfig, n_hidden: int,
                   rng: Optional[Generator] = None) -> BinaryRbmParams:
    masks = np.atleast_2d(np.asarray(masks, dtype=float))
    if rng is None:
        rng = default_rng(cfg.rng_seed)
    p = BinaryRbmParams.initialize(masks.shape[1], n_hidden, rng)
    if cfg.epochs > 0:
        p, _ = train_rbm(masks, p, cfg, rng)
    return p


def train_rdbm(clean_data, corrupted_data, masks, cfg: TrainConfig,
               hidden_sizes: Tuple[int, int] = (64, 32),
               mask_hidden: int = 16,
               gamma: float = 1.0,
               joint_epochs: Optional[int] = None,
               joint_learning_rate: Optional[float] = None,
               n_chains: int = 20,
               persistent: bool = True,
               mean_field_iters: int = 10,
               sigma_scale: float = 1.0) -> RdbmParams:
    """Three-stage training.

    1. Pretrain the clean-texture DBM on clean data.
    2. Pretrain the mask RBM on training masks.
    3. Jointly refine on corrupted observations: positive phase by mean-field
       over latents given the clamped observation, negative phase by MCMC
       chains over the full configuration (persistent by default, restarted
       from the data each update otherwise).
    """
    clean_data = np.atleast_2d(np.asarray(clean_data, dtype=float))
    if clean_data.size == 0:
        raise ValueError("clean_data must be nonempty")
    corrupted_data = np.atleast_2d(np.asarray(corrupted_data, dtype=float))
    masks = np.atleast_2d(np.asarray(masks, dtype=float))
    n_pix = clean_data.shape[1]

    # First pass fixes the noise scale at the data std; the reconstruction
    # residual of that stack is a much better noise estimate, so retrain the
    # whole stack at the tighter scale (the energy stays calibrated this way,
    # unlike rescaling sigma on the finished model).
    tex = pretrain_stack(clean_data, cfg, hidden_sizes, cls=TextureDbmParams)
    sigma = _residual_sigma(tex, clean_data, scale_factor=sigma_scale)
    tex = pretrain_stack(clean_data, cfg, hidden_sizes, sigma=sigma,
                         cls=TextureDbmParams)
    rng = default_rng(cfg.rng_seed + 1)
    mask_rbm = train_mask_rbm(masks, cfg, mask_hidden, rng)

    p = RdbmParams(
        texture_dbm=tex,
        mask_rbm=mask_rbm,
        gating_gamma=np.full(n_pix, gamma),
        observed_bias=corrupted_data.mean(axis=0) if corrupted_data.size
        else clean_data.mean(axis=0),
        observed_sigma=np.maximum(
            corrupted_data.std(axis=0) if corrupted_data.size
            else clean_data.std(axis=0), 1e-2),
    )

    epochs = cfg.epochs if joint_epochs is None else joint_epochs
    if epochs == 0 or corrupted_data.size == 0:
        return p
    lr = cfg.learning_rate if joint_learning_rate is None else joint_learning_rate
    joint_cfg = cfg.replace(epochs=epochs, learning_rate=lr)
    return _joint_train(corrupted_data, p, joint_cfg, n_chains, persistent,
                        mean_field_iters, default_rng(cfg.rng_seed + 2))


def _joint_train(data: np.ndarray, p: RdbmParams, cfg: TrainConfig,
                 n_chains: int, persistent: bool, mf_iters: int,
                 rng: Generator) -> RdbmParams:
    n = data.shape[0]
    chain_idx = rng.integers(0, n, size=n_chains)
    chain_tilde = data[chain_idx].copy()
    chain = [RdbmState.initial(chain_tilde[i], p) for i in range(n_chains)]

    vel = None
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = data[order[start:start + cfg.batch_size]]
            a, m, g_m, g1, g2 = _mean_field_posterior(batch, p, mf_iters)
            pos = _stats(a, m, g_m, g1, g2, p)

            if not persistent:
                chain_tilde = batch.copy()
                chain = [RdbmState.initial(b, p) for b in batch]
            for i in range(len(chain)):
                chain[i], _ = gibbs_sweep(chain[i], chain_tilde[i], p, rng)
                chain_tilde[i] = _sample_observed(chain[i].a, chain[i].m, p, rng)
            neg = _stats(
                np.array([s.a for s in chain]),
                np.array([s.m for s in chain]),
                np.array([s.g_m for s in chain]),
                np.array([s.g1 for s in chain]),
                np.array([s.g2 for s in chain]),
                p,
            )

            p, vel = _apply_update(p, pos, neg, cfg, vel)
    return p


def _apply_update(p: RdbmParams, pos: _RdbmStats, neg: _RdbmStats,
                  cfg: TrainConfig, vel: Optional[_RdbmStats]):
    lr, mom, wd = cfg.learning_rate, cfg.momentum, cfg.weight_decay
    if vel is None:
        vel = _RdbmStats(*[np.zeros_like(getattr(pos, f.name))
                           for f in dataclasses.fields(_RdbmStats)])

    def step(v, g, decay=None):
        return mom * v + lr * (g if decay is None else g - wd * decay)

    tex = p.texture_dbm
    l1, l2 = tex.layer1, tex.layer2
    mask = p.mask_rbm
    new_vel = _RdbmStats(
        v1=step(vel.v1, pos.v1 - neg.v1, l1.weights),
        v2=step(vel.v2, pos.v2 - neg.v2, l2.weights),
        u=step(vel.u, pos.u - neg.u, mask.weights),
        b_g=step(vel.b_g, pos.b_g - neg.b_g),
        c1=step(vel.c1, pos.c1 - neg.c1),
        c2=step(vel.c2, pos.c2 - neg.c2),
        b_m=step(vel.b_m, pos.b_m - neg.b_m),
        c_m=step(vel.c_m, pos.c_m - neg.c_m),
    )
    new_l1 = GaussianRbmParams(l1.weights + new_vel.v1,
                               l1.visible_bias + new_vel.b_g,
                               l1.visible_sigma,
                               l1.hidden_bias + new_vel.c1)
    new_l2 = BinaryRbmParams(l2.weights + new_vel.v2,
                             l2.visible_bias,
                             l2.hidden_bias + new_vel.c2)
    new_mask = BinaryRbmParams(mask.weights + new_vel.u,
                               mask.visible_bias + new_vel.b_m,
                               mask.hidden_bias + new_vel.c_m)
    for arr in (new_l1.weights, new_l2.weights, new_mask.weights,
                new_l1.visible_bias):
        if not np.isfinite(arr).all():
            raise DivergenceError("non-finite joint-training update")
    newp = RdbmParams(TextureDbmParams(new_l1, new_l2), new_mask,
                      p.gating_gamma, p.observed_bias, p.observed_sigma)
    return newp, new_vel
