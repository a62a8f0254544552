"""Declarative pipeline configuration (INI key-value sections).

Every stage hyperparameter has a default here; a config file only needs to
list the values it overrides.
"""

from __future__ import annotations

import configparser
import pathlib
from typing import Optional

DEFAULTS = {
    "frame": {
        "resolution": "32",
        "margin": "0.05",
    },
    "shape-model": {
        "hidden1": "24",
        "hidden2": "12",
        "learning_rate": "0.02",
        "epochs": "300",
        "batch_size": "10",
        "momentum": "0.5",
    },
    "texture-model": {
        "hidden1": "48",
        "hidden2": "16",
        "mask_hidden": "16",
        "learning_rate": "0.02",
        "epochs": "600",
        "batch_size": "10",
        "momentum": "0.5",
        "gamma": "1.0",
        "sigma_scale": "1.5",
        "joint_epochs": "0",
        "joint_learning_rate": "0.001",
        "n_chains": "20",
    },
    "joint-model": {
        "hidden": "32",
        "learning_rate": "0.05",
        "epochs": "200",
        "batch_size": "10",
    },
    "masks": {
        "sunglasses_threshold": "60",
        "scarf_threshold": "50",
        "stretch_threshold": "0.9",
        "include_clean": "true",
    },
    "fit": {
        "max_outer_iters": "12",
        "max_inner_iters": "20",
        "shape_tol": "0.001",
        "damping": "1.0",
        "mask_mode": "probability",
        "gibbs_sweeps": "30",
        "chains": "2",
        "shape_blend": "0.7",
        "patience": "2",
        "n_starts": "5",
        "start_jitter": "2.0",
    },
    "run": {
        "seed": "0",
        "threads": "1",
    },
}


def default_config() -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    return cp


def load_config(path: Optional[str] = None) -> configparser.ConfigParser:
    """Defaults overlaid with the file's sections, if a path is given."""
    cp = default_config()
    if path is not None:
        p = pathlib.Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cp.read(p)
    return cp


def write_default_config(path) -> None:
    with open(path, "w") as fh:
        default_config().write(fh)
