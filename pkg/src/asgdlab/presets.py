"""Named experiment configurations.

Each preset is stored as plain data (the same shape as a YAML config file) and
validated through ``config_from_dict``.
"""

from __future__ import annotations

import copy

from .experiments import DEFAULT_GRID, ExperimentConfig, config_from_dict

# Two-worker quadratics with F1 = (x - 4)^2 and F2 = 2 (x + 3)^2.
APPENDIX_F1 = {
    "name": "appendix-f1",
    "methods": ["vanilla", "rescaled"],
    "problem": {
        "kind": "quadratic",
        "locals": [{"curvature": 2.0, "center": 4.0}, {"curvature": 4.0, "center": -3.0}],
        "sigma_sq": 0.0,
        "x0": 0.0,
    },
    "taus": [1.0, 2.0],
    "alpha": 0.01,
    "horizon": 4000.0,
    "seeds": [0],
}

# One fast and one very slow worker with F1 = (x - 1)^2 and F2 = (x + 1)^2.
APPENDIX_F2 = {
    "name": "appendix-f2",
    "methods": ["delay_adaptive", "rescaled"],
    "problem": {
        "kind": "quadratic",
        "locals": [{"curvature": 2.0, "center": 1.0}, {"curvature": 2.0, "center": -1.0}],
        "sigma_sq": 0.0,
        "x0": 0.0,
    },
    "taus": [1.0, 100.0],
    "gamma": {"delay_adaptive": 0.01, "rescaled": 0.005},
    "horizon": 10000.0,
    "seeds": [0],
    "sample_every": 100.0,
}

DESK_TAUS = [1.0, 1.0, 2.0, 2.0, 4.0, 4.0, 8.0, 8.0, 16.0, 16.0]

MNIST_STYLE_FIXED = {
    "name": "mnist-style-fixed",
    "methods": ["rescaled", "vanilla", "delay_adaptive", "naive_minibatch", "malenia", "ringleader"],
    "problem": {
        "kind": "mlp",
        "classes": 10,
        "dim": 20,
        "per_class": 200,
        "separation": 3.0,
        "data_seed": 0,
        "hidden": 32,
        "batch_size": 64,
    },
    "taus": DESK_TAUS,
    "timing": "fixed",
    "gamma_grid": list(DEFAULT_GRID),
    "horizon": 3000.0,
    "seeds": [0, 1, 2],
    "sample_every": 16.0,
}

MNIST_STYLE_FLUCTUATING = dict(MNIST_STYLE_FIXED, name="mnist-style-fluctuating", timing="exponential")

# Five workers, Gaussian noise, exact local gradients available.
DECOMPOSE = {
    "name": "decompose",
    "methods": ["rescaled"],
    "problem": {
        "kind": "quadratic",
        "locals": [
            {"curvature": 1.0, "center": [1.0, 0.0, -1.0]},
            {"curvature": 1.5, "center": [0.0, 2.0, 0.5]},
            {"curvature": 0.5, "center": [-2.0, 1.0, 0.0]},
            {"curvature": 2.0, "center": [0.5, -1.0, 1.0]},
            {"curvature": 1.0, "center": [0.0, 0.0, 3.0]},
        ],
        "sigma_sq": 1.0,
        "x0": 0.0,
    },
    "taus": [1.0, 2.0, 2.0, 4.0, 8.0],
    "gamma": 0.01,
    "horizon": 400.0,
    "seeds": [0],
}

COUNTEREXAMPLE = {"x0": 0.5, "gamma": 0.1, "c": 10.0}

PRESETS = {
    "appendix-f1": APPENDIX_F1,
    "appendix-f2": APPENDIX_F2,
    "mnist-style-fixed": MNIST_STYLE_FIXED,
    "mnist-style-fluctuating": MNIST_STYLE_FLUCTUATING,
    "decompose": DECOMPOSE,
}


def preset_dict(name: str) -> dict:
    if name == "counterexample":
        return dict(COUNTEREXAMPLE)
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS) + ['counterexample'])}")
    return copy.deepcopy(PRESETS[name])


def preset(name: str, **overrides) -> ExperimentConfig:
    raw = preset_dict(name)
    raw.update(overrides)
    return config_from_dict(raw)
