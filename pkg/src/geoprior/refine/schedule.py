"""Variance-preserving diffusion schedule and parameterization conversions."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class Parameterization(str, enum.Enum):
    EPSILON = "EPSILON"
    V = "V"


@dataclass
class DiffusionSchedule:
    """Discrete schedule defined by cumulative signal fractions ``abar_t``.

    alpha_t = sqrt(abar_t), sigma_t = sqrt(1 - abar_t), so alpha^2 + sigma^2
    is 1 up to rounding.  Weighting defaults to w(t) = sigma_t^2.
    """

    alphas_cumprod: np.ndarray
    parameterization: Parameterization = Parameterization.EPSILON
    t_range: tuple[float, float] = (0.02, 0.98)
    weighting: str = "sigma2"

    def __post_init__(self):
        ac = np.asarray(self.alphas_cumprod, dtype=np.float64)
        if ac.ndim != 1 or ac.size < 1:
            raise ValueError("alphas_cumprod must be a non-empty 1-D array")
        if np.any(ac <= 0) or np.any(ac > 1):
            raise ValueError("alphas_cumprod must lie in (0, 1]")
        if np.any(np.diff(ac) > 0):
            raise ValueError("alpha must be non-increasing in t")
        self.alphas_cumprod = ac
        self.parameterization = Parameterization(self.parameterization)
        if self.weighting not in ("sigma2", "uniform"):
            raise ValueError(f"unknown weighting {self.weighting!r}")

    @classmethod
    def scaled_linear(cls, steps: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012, **kw):
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), steps) ** 2
        return cls(np.cumprod(1.0 - betas), **kw)

    @property
    def steps(self) -> int:
        return self.alphas_cumprod.size

    def alpha(self, t: int) -> float:
        return math.sqrt(self.alphas_cumprod[t])

    def sigma(self, t: int) -> float:
        return math.sqrt(1.0 - self.alphas_cumprod[t])

    def weight(self, t: int) -> float:
        return 1.0 - self.alphas_cumprod[t] if self.weighting == "sigma2" else 1.0

    def t_bounds(self) -> tuple[int, int]:
        lo = int(math.ceil(self.t_range[0] * self.steps))
        hi = int(math.floor(self.t_range[1] * self.steps))
        lo = min(max(lo, 0), self.steps - 1)
        return lo, min(max(hi, lo), self.steps - 1)

    def sample_t(self, rng: np.random.Generator) -> int:
        lo, hi = self.t_bounds()
        return int(rng.integers(lo, hi + 1))

    def check_t(self, t: int) -> None:
        lo, hi = self.t_bounds()
        if not lo <= t <= hi:
            raise ValueError(f"timestep {t} outside sampled range [{lo}, {hi}]")


def add_noise(x, t: int, eps, schedule: DiffusionSchedule):
    """x_t = alpha_t x + sigma_t eps (numpy arrays or torch tensors)."""
    if tuple(np.shape(x)) != tuple(np.shape(eps)):
        raise ValueError(f"shape mismatch: {np.shape(x)} vs {np.shape(eps)}")
    return schedule.alpha(t) * x + schedule.sigma(t) * eps


def v_from_epsilon(eps, x0, t: int, schedule: DiffusionSchedule):
    return schedule.alpha(t) * eps - schedule.sigma(t) * x0


def epsilon_from_v(v, x_t, t: int, schedule: DiffusionSchedule):
    # x_t = a x0 + s eps and v = a eps - s x0  =>  eps = s x_t + a v
    return schedule.sigma(t) * x_t + schedule.alpha(t) * v
