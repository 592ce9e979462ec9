from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables, stored 0-based: ``beta[l - 1]`` is the value at step l."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    nu: np.ndarray

    @property
    def L(self) -> int:
        return len(self.beta)

    def at(self, l: int):
        if not 1 <= l <= self.L:
            raise IndexError(f"timestep {l} outside [1, {self.L}]")
        i = l - 1
        return self.alpha[i], self.alpha_bar[i], self.nu[i]


def build_schedule(L: int = 20, beta_min: float = 1e-4, beta_max: float = 0.06) -> NoiseSchedule:
    """Linear beta from beta_min (l=1) to beta_max (l=L); nu_l = sqrt(beta_l)."""
    if L < 1:
        raise ConfigError("L must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError("need 0 < beta_min <= beta_max < 1")
    beta = np.linspace(beta_min, beta_max, L) if L > 1 else np.array([beta_min], dtype=float)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    nu = np.sqrt(beta)
    nu.setflags(write=False)
    return NoiseSchedule(beta, alpha, alpha_bar, nu)
