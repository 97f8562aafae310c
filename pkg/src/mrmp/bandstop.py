"""Band-stop reparametrization of latent weights and its sharpness schedule.

The gate ``psi(w) = 1 / (1 + exp(sigma * (a**2 - w**2)))`` is an even, smooth
relaxation of the hard mask ``|w| > a``: it is exactly 1/2 on ``|w| = a`` and
tends to the indicator as ``sigma`` grows. Effective weights are
``latent * psi(latent)``, so gradients reach the latents through both factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .autodiff import Tensor, _make, expand, hadamard
from .errors import DomainError


@dataclass(frozen=True)
class SigmaSchedule:
    """Geometric growth ``sigma0 * growth**epoch`` saturating at ``sigma_max``."""

    sigma0: float = 1.0
    sigma_max: float = 1e6
    epochs: int = 2700

    def __post_init__(self):
        if self.sigma0 <= 0 or self.sigma_max < self.sigma0:
            raise DomainError(f"need 0 < sigma0 <= sigma_max, got {self.sigma0}, {self.sigma_max}")
        if self.epochs < 1:
            raise DomainError("schedule needs at least one epoch")

    @property
    def growth(self) -> float:
        return (self.sigma_max / self.sigma0) ** (1.0 / self.epochs)


@dataclass(frozen=True)
class BandStopConfig:
    a: float = 0.0
    sigma: float = 1.0
    schedule: SigmaSchedule = SigmaSchedule()

    def __post_init__(self):
        if not a_valid(self.a):
            raise DomainError(f"threshold a must be finite and >= 0, got {self.a}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise DomainError(f"sigma must be finite and > 0, got {self.sigma}")


def a_valid(a: float) -> bool:
    return math.isfinite(a) and a >= 0


def _gate(w: np.ndarray, a, sigma: float) -> np.ndarray:
    # expit(sigma*(w^2 - a^2)) == 1 / (1 + exp(sigma*(a^2 - w^2))), overflow-free
    return expit(sigma * (w * w - np.square(a)))


def band_stop(w: float, cfg: BandStopConfig) -> float:
    if not math.isfinite(w):
        raise DomainError(f"band_stop needs a finite weight, got {w}")
    return float(_gate(np.float64(w), cfg.a, cfg.sigma))


def sigma_at(epoch: int, schedule: SigmaSchedule) -> float:
    if epoch < 0:
        raise DomainError(f"epoch must be >= 0, got {epoch}")
    if epoch >= schedule.epochs:
        return schedule.sigma_max
    return min(schedule.sigma0 * schedule.growth**epoch, schedule.sigma_max)


def gate(latent: Tensor, thresholds: Sequence[float], sigma: float) -> Tensor:
    """Soft masks for several thresholds at once, stacked on a new leading axis.

    Output shape is ``(len(thresholds),) + latent.shape``. The backward pass sums
    the per-threshold derivative ``2*sigma*w*psi*(1-psi)`` over that axis.
    """
    a = np.asarray(thresholds, dtype=latent.dtype).reshape((-1,) + (1,) * latent.data.ndim)
    psi = _gate(latent.data[None], a, sigma).astype(latent.dtype)
    w = latent.data

    def back(g):
        return ((g * (2 * sigma) * w * psi * (1 - psi)).sum(axis=0),)

    return _make(psi, (latent,), back, "band_stop")


def reparametrize_multi(latent: Tensor, thresholds: Sequence[float], sigma: float) -> Tensor:
    """``latent * psi_{a_r}(latent)`` for every threshold, shape ``(R,) + latent.shape``."""
    return hadamard(expand(latent, len(thresholds)), gate(latent, thresholds, sigma))


def reparametrize(latent: Tensor, cfg: BandStopConfig) -> Tensor:
    """Effective weights ``latent * psi_{a,sigma}(latent)`` (same shape as ``latent``)."""
    psi = gate(latent, [cfg.a], cfg.sigma)
    flat = _make(psi.data[0], (psi,), lambda g: (g[None],), "squeeze")
    return hadamard(latent, flat)


def extract_mask(latent, a: float) -> np.ndarray:
    """Hard mask of surviving entries: 1 where ``|w| > a``, 0 otherwise (ties removed)."""
    if not a >= 0:
        raise DomainError(f"threshold must be >= 0, got {a}")
    data = latent.data if isinstance(latent, Tensor) else np.asarray(latent)
    return (np.abs(data) > a).astype(data.dtype)
