from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ConfigError

DEFAULT_T = 50
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule. Arrays are indexed by step ``t = 1..T``; index 0
    is the clean state (beta 0, alpha_bar 1)."""

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        return make_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))

    def posterior_std(self, t: int) -> float:
        """Std of the ancestral step ``x_t -> x_{t-1}`` (zero at ``t = 1``)."""
        if t <= 1:
            return 0.0
        var = (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta[t]
        return float(np.sqrt(var))


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> DiffusionSchedule:
    if T < 1 or not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need T >= 1 and 0 < beta_start <= beta_end < 1, got T={T}, "
                          f"beta_start={beta_start}, beta_end={beta_end}")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return DiffusionSchedule(T, beta_start, beta_end, beta, alpha, alpha_bar)


def _per_sample(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t)
    v = torch.as_tensor(values, dtype=torch.float64)[t].to(like.dtype)
    return v.reshape(v.shape + (1,) * (like.dim() - v.dim()))


def _check_t(t, T):
    t = torch.as_tensor(t)
    if bool((t < 1).any()) or bool((t > T).any()):
        raise ConfigError(f"diffusion step must be in 1..{T}, got {t.tolist()}")


def noising(y: torch.Tensor, t, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """``sqrt(alpha_bar_t) * y + sqrt(1 - alpha_bar_t) * eps``; ``t`` scalar or one per batch row."""
    if y.shape != eps.shape:
        raise ConfigError(f"target {tuple(y.shape)} and noise {tuple(eps.shape)} differ in shape")
    _check_t(t, schedule.T)
    ab = _per_sample(schedule.alpha_bar, t, y)
    return torch.sqrt(ab) * y + torch.sqrt(1.0 - ab) * eps


def clean_estimate(x_t: torch.Tensor, t, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """Invert :func:`noising` given the noise."""
    _check_t(t, schedule.T)
    ab = _per_sample(schedule.alpha_bar, t, x_t)
    return (x_t - torch.sqrt(1.0 - ab) * eps) / torch.sqrt(ab)
