"""Closed-form comparison predictors."""
from __future__ import annotations

import numpy as np

from .errors import ShapeError


def zero_vel(obs: np.ndarray, F: int) -> np.ndarray:
    """Repeat the last observed pose ``F`` times."""
    obs = np.asarray(obs)
    if obs.shape[0] < 1:
        raise ShapeError("zero_vel needs at least one observed frame")
    return np.repeat(obs[-1:], F, axis=0)


def constant_vel(obs: np.ndarray, F: int) -> np.ndarray:
    """Extrapolate the last one-step velocity: ``obs[-1] + (k+1) * (obs[-1] - obs[-2])``."""
    obs = np.asarray(obs)
    if obs.shape[0] < 2:
        raise ShapeError("constant_vel needs at least two observed frames")
    v = obs[-1] - obs[-2]
    steps = np.arange(1, F + 1, dtype=obs.dtype).reshape((F,) + (1,) * (obs.ndim - 1))
    return obs[-1] + steps * v


BASELINES = {"zero-vel": zero_vel, "constant-vel": constant_vel}


def predict_windows(name: str, windows) -> dict[str, np.ndarray]:
    """Run a named baseline on every window: ``{agent: [N, F, J, 3]}``."""
    fn = BASELINES[name]
    return {a: np.stack([fn(w.obs(a), w.fut_len) for w in windows]) for a in ("cg", "cr")}
