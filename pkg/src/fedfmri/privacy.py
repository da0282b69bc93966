"""Noise mechanisms for shared tensors and nominal privacy budgets.

Noise is scaled by the population standard deviation of each tensor, so the
level ``alpha`` is relative: Gaussian noise has std ``alpha * sigma`` and
Laplace noise has scale ``alpha * sigma / sqrt(2)`` (same std). Sensitivity
is taken as 1 throughout; the budgets are nominal, not certified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MECHANISMS = ("none", "gaussian", "laplace")


@dataclass(frozen=True)
class NoiseSpec:
    mechanism: str = "none"
    alpha: float = 0.0
    seed: int = 0

    def __post_init__(self):
        mech = self.mechanism.lower()
        if mech not in MECHANISMS:
            raise ValueError(f"unknown noise mechanism {self.mechanism!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        object.__setattr__(self, "mechanism", mech)

    @property
    def active(self) -> bool:
        return self.mechanism != "none" and self.alpha > 0


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float
    sensitivity: float = 1.0
    in_regime: bool = True


def laplace_inverse_cdf(u, b: float):
    """Laplace(0, b) quantile function; ``u`` in (0, 1)."""
    u = np.asarray(u, dtype=np.float64)
    c = u - 0.5
    return -b * np.sign(c) * np.log1p(-2.0 * np.abs(c))


def sample_laplace(rng: np.random.Generator, b: float, size=None):
    if b <= 0:
        raise ValueError("Laplace scale must be positive")
    u = rng.random(size)
    # rng.random is in [0, 1); u = 0 would map to -inf
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    out = laplace_inverse_cdf(u, b)
    return float(out) if size is None else out


def perturb_tensor(tensor: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """``tensor`` plus mechanism noise scaled by the tensor's own std."""
    t = np.asarray(tensor, dtype=np.float64)
    if not spec.active:
        return t.copy()
    sigma = float(t.std())
    if sigma == 0.0:
        return t.copy()
    scale = spec.alpha * sigma
    if spec.mechanism == "gaussian":
        noise = rng.normal(0.0, scale, size=t.shape)
    else:
        noise = sample_laplace(rng, scale / math.sqrt(2.0), size=t.shape)
    return t + noise


def gaussian_budget(sigma_noise: float, delta: float, sensitivity: float = 1.0) -> PrivacyBudget:
    """Epsilon solving sigma' = sqrt(2 ln(1.25 / delta)) / epsilon.

    The underlying guarantee only holds for epsilon < 1; larger values are
    returned with ``in_regime=False``.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    if sigma_noise <= 0:
        raise ValueError("sigma_noise must be positive")
    s = sigma_noise / sensitivity
    eps = math.sqrt(2.0 * math.log(5.0 / (4.0 * delta))) / s
    return PrivacyBudget(eps, delta, sensitivity, in_regime=eps < 1.0)


def laplace_budget(scale_b: float, sensitivity: float = 1.0) -> PrivacyBudget:
    if scale_b <= 0:
        raise ValueError("scale_b must be positive")
    return PrivacyBudget(sensitivity / scale_b, 0.0, sensitivity, in_regime=True)


def budget_row(spec: NoiseSpec, sigma: float = 1.0, delta: float = 1e-5) -> dict:
    """One budget-report row for a noise spec applied to weights of std ``sigma``.

    ``sigma'`` is the absolute noise std (``alpha * sigma``) over unit
    sensitivity.
    """
    row = {"mechanism": spec.mechanism, "alpha": spec.alpha, "sigma_prime": spec.alpha * sigma,
           "epsilon": math.inf, "delta": 0.0, "regime_flag": "no-noise"}
    if not spec.active:
        return row
    noise_std = spec.alpha * sigma
    if spec.mechanism == "gaussian":
        b = gaussian_budget(noise_std, delta)
    else:
        b = laplace_budget(noise_std / math.sqrt(2.0))
    row.update(epsilon=b.epsilon, delta=b.delta, regime_flag="ok" if b.in_regime else "out-of-regime")
    return row
