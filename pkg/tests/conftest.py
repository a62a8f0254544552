import numpy as np
import pytest
from numpy.random import default_rng


def texture_basis(n_pixels):
    base = np.linspace(0.0, 2.0 * np.pi, n_pixels)
    return np.stack([np.sin(base), np.cos(2.0 * base)])


def make_texture_world(n_pixels=24, n_train=60, n_test=20, block_len=8,
                       block_value=-3.0, seed=0):
    """1-D stand-in for shape-free textures: a 2-factor clean model plus
    block occlusions at one of two known positions.

    Returns a dict with clean/corrupted arrays and ground-truth masks
    (1 = clean pixel).
    """
    rng = default_rng(seed)
    basis = texture_basis(n_pixels)

    def gen(n):
        # bounded factors: binary-hidden models quantise amplitude, so keep
        # the clean manifold inside what they can represent
        z = rng.uniform(-1.5, 1.5, size=(n, 2))
        return 0.8 * z @ basis

    clean_train = gen(n_train)
    clean_test = gen(n_test)
    starts = rng.choice([2, n_pixels - block_len - 2], size=n_test)
    corrupted = clean_test.copy()
    masks = np.ones_like(corrupted)
    for i, s in enumerate(starts):
        corrupted[i, s:s + block_len] = block_value
        masks[i, s:s + block_len] = 0.0

    train_starts = rng.choice([2, n_pixels - block_len - 2], size=n_train)
    corrupted_train = clean_train.copy()
    train_masks = np.ones_like(corrupted_train)
    for i, s in enumerate(train_starts):
        corrupted_train[i, s:s + block_len] = block_value
        train_masks[i, s:s + block_len] = 0.0

    return {
        "clean_train": clean_train,
        "corrupted_train": corrupted_train,
        "train_masks": train_masks,
        "clean_test": clean_test,
        "corrupted_test": corrupted,
        "test_masks": masks,
        "basis": basis,
    }
