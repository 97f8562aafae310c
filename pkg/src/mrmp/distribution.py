"""Target priors, the differentiable weight histogram and the budget quantile.

A pruning rate ``r`` is turned into a band-stop threshold through the
magnitude quantile of the prior: ``a(r)`` is the value with
``P(|W| <= a) = r``. Training keeps the latent weights close to the prior with
a discrete KL divergence between the discretized prior and a soft histogram of
all prunable latents, so the same threshold removes a fraction ``r`` of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, DomainError

PRIOR_KINDS = ("uniform", "gaussian", "laplace")

KLD_EPS = 1e-8


@dataclass(frozen=True)
class TargetPrior:
    """A closed-form weight prior.

    ``uniform`` takes ``(lo, hi)``, ``gaussian`` takes ``(mean, std)`` and
    ``laplace`` takes ``(mean, scale)``.
    """

    kind: str
    params: tuple[float, float]

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise DomainError(f"unknown prior {self.kind!r}; expected one of {{{','.join(PRIOR_KINDS)}}}")
        p0, p1 = (float(v) for v in self.params)
        object.__setattr__(self, "params", (p0, p1))
        if not (math.isfinite(p0) and math.isfinite(p1)):
            raise DomainError("prior parameters must be finite")
        if self.kind == "uniform" and not p1 > p0:
            raise DomainError(f"uniform prior needs hi > lo, got ({p0}, {p1})")
        if self.kind != "uniform" and not p1 > 0:
            raise DomainError(f"{self.kind} prior needs a positive spread, got {p1}")

    @classmethod
    def default(cls, kind: str) -> "TargetPrior":
        return cls(kind, DEFAULT_PARAMS.get(kind, (0.0, 1.0)))

    def cdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        p0, p1 = self.params
        if self.kind == "uniform":
            return np.clip((x - p0) / (p1 - p0), 0.0, 1.0)
        if self.kind == "gaussian":
            return ndtr((x - p0) / p1)
        z = (x - p0) / p1
        return np.where(z < 0, 0.5 * np.exp(np.minimum(z, 0)), 1 - 0.5 * np.exp(-np.maximum(z, 0)))

    def pdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        p0, p1 = self.params
        if self.kind == "uniform":
            return np.where((x >= p0) & (x <= p1), 1.0 / (p1 - p0), 0.0)
        if self.kind == "gaussian":
            return np.exp(-0.5 * ((x - p0) / p1) ** 2) / (p1 * math.sqrt(2 * math.pi))
        return np.exp(-np.abs(x - p0) / p1) / (2 * p1)

    def magnitude_cdf(self, a):
        """``P(|W| <= a)`` for ``a >= 0``."""
        a = np.asarray(a, dtype=np.float64)
        return np.clip(self.cdf(a) - self.cdf(-a), 0.0, 1.0)

    def support(self) -> tuple[float, float]:
        p0, p1 = self.params
        if self.kind == "uniform":
            return p0, p1
        width = 4 * p1 if self.kind == "gaussian" else 8 * p1
        return p0 - width, p0 + width

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        p0, p1 = self.params
        if self.kind == "uniform":
            return rng.uniform(p0, p1, size)
        if self.kind == "gaussian":
            return rng.normal(p0, p1, size)
        return rng.laplace(p0, p1, size)


DEFAULT_PARAMS = {
    "uniform": (-1.0, 1.0),
    "gaussian": (0.0, 0.5),
    "laplace": (0.0, 0.35),
}


@dataclass(frozen=True)
class BinGrid:
    centers: np.ndarray
    widths: np.ndarray

    @property
    def K(self) -> int:
        return self.centers.size

    def edges(self) -> np.ndarray:
        """Cell boundaries: midpoints between centers, outer cells as wide as their neighbours."""
        q = self.centers
        mid = 0.5 * (q[1:] + q[:-1])
        return np.concatenate([[q[0] - (q[1] - q[0]) / 2], mid, [q[-1] + (q[-1] - q[-2]) / 2]])


def make_grid(prior: TargetPrior, K: int = 100, width_factor: float = 0.5) -> BinGrid:
    """Uniform ``K``-point grid over the prior's support.

    Kernel widths are ``width_factor * (q[k+1] - q[k])``; the last width repeats
    the previous one.
    """
    if K < 2:
        raise DomainError(f"need at least 2 bins, got {K}")
    lo, hi = prior.support()
    q = np.linspace(lo, hi, K)
    beta = width_factor * np.diff(q)
    beta = np.append(beta, beta[-1])
    return BinGrid(q, beta)


@dataclass
class SoftHistogram:
    grid: BinGrid
    probs: Tensor
    raw: Tensor
    count: int

    @property
    def partition(self) -> float:
        """Unnormalized kernel mass per weight."""
        return float(self.raw.data.sum()) / self.count


def _flat_entries(latents: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate([t.data.ravel() for t in latents]) if latents else np.empty(0)


def _raw_histogram(latents: Sequence[Tensor], grid: BinGrid) -> Tensor:
    latents = list(latents)
    w = _flat_entries(latents)
    dtype = latents[0].dtype
    q = grid.centers.astype(dtype)
    inv_b2 = (1.0 / grid.widths**2).astype(dtype)
    diff = w[:, None] - q[None, :]
    kern = np.exp(-(diff * diff) * inv_b2)
    raw = kern.sum(axis=0)
    sizes = [t.size for t in latents]

    def back(g):
        dw = -2 * ((kern * diff) @ (g * inv_b2))
        out, start = [], 0
        for t, n in zip(latents, sizes):
            out.append(dw[start : start + n].reshape(t.shape))
            start += n
        return tuple(out)

    return ad._make(raw, tuple(latents), back, "soft_histogram")


def soft_histogram(latents: Sequence[Tensor], grid: BinGrid) -> SoftHistogram:
    """Differentiable histogram of every entry of every tensor in ``latents``.

    Each weight spreads ``exp(-(w - q_k)**2 / beta_k**2)`` over the bins; the
    result is normalized by its total mass so the probabilities sum to one.
    """
    latents = list(latents)
    count = sum(t.size for t in latents)
    if count == 0:
        raise DomainError("empty parameter set")
    raw = _raw_histogram(latents, grid)
    total = ad.reduce_sum(raw)
    probs = ad.hadamard(raw, ad.reciprocal(total))
    return SoftHistogram(grid, probs, raw, count)


def discretize_prior(prior: TargetPrior, grid: BinGrid) -> np.ndarray:
    """Prior mass of each grid cell (CDF differences), renormalized to sum to one."""
    mass = np.diff(prior.cdf(grid.edges()))
    return mass / mass.sum()


def kld(P, Q: SoftHistogram | Tensor, eps: float = KLD_EPS) -> Tensor:
    """``sum_k P_k * ln((P_k + eps) / (Q_k + eps))`` as a differentiable scalar.

    Smoothing the numerator too makes ``kld(P, P)`` exactly zero; it only
    shifts the value by a constant, so gradients are those of the
    ``ln(P_k / (Q_k + eps))`` form.
    """
    q = Q.probs if isinstance(Q, SoftHistogram) else ad.as_tensor(Q)
    P = np.asarray(P, dtype=q.dtype)
    if P.shape != q.shape:
        raise DimensionError(f"kld: P has {P.shape[0]} bins, Q has {q.shape[0]}")
    entropy_term = float(np.sum(P * np.log(P + eps)))
    cross = ad.reduce_sum(ad.hadamard(Tensor(P), ad.log(ad.add_scalar(q, eps))))
    return ad.add_scalar(ad.neg(cross), entropy_term)


def quantile_threshold(prior: TargetPrior, r: float, tol: float = 1e-13) -> float:
    """Magnitude quantile ``a`` with ``P(|W| <= a) = r``, found by bisection."""
    if not (0.0 <= r < 1.0):
        raise DomainError(f"pruning rate must lie in [0, 1), got {r}")
    if r == 0.0 or prior.magnitude_cdf(0.0) >= r:
        return 0.0
    lo, hi = 0.0, max(abs(v) for v in prior.params) + 1.0
    while prior.magnitude_cdf(hi) < r:
        hi *= 2
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if prior.magnitude_cdf(mid) < r:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def observed_rate(latents: Iterable, a: float) -> float:
    """Fraction of prunable entries with ``|w| <= a``."""
    if a < 0:
        raise DomainError(f"threshold must be >= 0, got {a}")
    total = removed = 0
    for t in latents:
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        total += data.size
        removed += int(np.count_nonzero(np.abs(data) <= a))
    if total == 0:
        raise DomainError("empty parameter set")
    return removed / total
