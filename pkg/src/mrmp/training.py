"""Optimization loops: single- and multi-rate magnitude pruning and baselines.

Multi-rate training evaluates the network at every requested pruning rate in
one vectorized pass over a single shared set of latents; the cross-entropies
are summed and the distribution-matching term is computed once per step.
"""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bandstop import BandStopConfig, SigmaSchedule, extract_mask, sigma_at
from .distribution import (
    TargetPrior,
    discretize_prior,
    kld,
    make_grid,
    observed_rate,
    quantile_threshold,
    soft_histogram,
)
from .errors import DomainError, TrainingError
from .gcn import GcnModel, forward_weights, masked_weights, soft_weights, hard_weights

DEFAULT_RATES = (0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95, 0.98)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 10.0
    rates: tuple[float, ...] = DEFAULT_RATES
    prior: TargetPrior = field(default_factory=lambda: TargetPrior.default("gaussian"))
    epochs: int = 2700
    batch_size: int = 200
    lr0: float = 1e-2
    seed: int = 0
    bins: int = 100
    width_factor: float = 1.0
    sigma0: float = 1.0
    sigma_max: float = 1e6
    histogram_includes_classifier: bool = True

    def __post_init__(self):
        rates = tuple(float(r) for r in self.rates)
        object.__setattr__(self, "rates", rates)
        if not rates:
            raise DomainError("at least one pruning rate is required")
        if any(not (0.0 <= r < 1.0) for r in rates):
            raise DomainError(f"pruning rates must lie in [0, 1), got {rates}")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise DomainError(f"pruning rates must be strictly increasing, got {rates}")
        if self.lam < 0:
            raise DomainError("lambda must be >= 0")
        if self.epochs < 0:
            raise DomainError("epochs must be >= 0")
        if self.batch_size < 1 or self.lr0 <= 0:
            raise DomainError("batch_size and lr0 must be positive")

    @property
    def schedule(self) -> SigmaSchedule:
        return SigmaSchedule(self.sigma0, self.sigma_max, max(self.epochs - 1, 1))

    def thresholds(self) -> list[float]:
        return [quantile_threshold(self.prior, r) for r in self.rates]


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ce: list[float]
    kld: float
    observed: list[float]
    lr: float
    sigma: float
    seconds: float = 0.0


@dataclass
class TrainReport:
    mode: str
    rates: list[float]
    thresholds: list[float]
    history: list[EpochRecord] = field(default_factory=list)
    accuracy: dict[float, float] = field(default_factory=dict)
    params_active: dict[float, int] = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def initial(self) -> EpochRecord:
        return self.history[0]

    @property
    def final(self) -> EpochRecord:
        return self.history[-1]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "rate", "ce_loss", "kld", "observed_rate", "lr", "sigma"])
            for rec in self.history:
                for i, r in enumerate(self.rates):
                    w.writerow([rec.epoch, fmt(r), fmt(rec.ce[i]), fmt(rec.kld), fmt(rec.observed[i]), fmt(rec.lr), fmt(rec.sigma)])

    def write_summary(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rate", "accuracy", "params_active"])
            for r in self.rates:
                w.writerow([fmt(r), fmt(self.accuracy.get(r, float("nan"))), self.params_active.get(r, "")])


def fmt(x: float) -> str:
    return f"{x:.9g}"


class Adam:
    """Adam over a fixed list of tensors; the learning rate is passed per step."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1 - self.beta1**self.t
        bc2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def adaptive_lr(prev_lr: float, loss_history: Sequence[float], lr0: float) -> float:
    """Shrink the rate by 0.99 when the loss speeds up, grow it by 1/0.99 when it slows down.

    Speed is ``|L[t-1] - L[t-2]|`` compared with the speed one epoch earlier.
    Result is clamped to ``[lr0/100, lr0*100]``.
    """
    if len(loss_history) < 2:
        return lr0
    if len(loss_history) < 3:
        return prev_lr
    speed = abs(loss_history[-1] - loss_history[-2])
    before = abs(loss_history[-2] - loss_history[-3])
    if speed > before:
        lr = prev_lr * 0.99
    elif speed < before:
        lr = prev_lr / 0.99
    else:
        lr = prev_lr
    return min(max(lr, lr0 / 100), lr0 * 100)


def macro_accuracy(y_true, y_pred) -> float:
    """Per-class accuracy averaged over the classes present in ``y_true``."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise DomainError("cannot evaluate on empty data")
    return float(np.mean([np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]))


def _predict_weights(model: GcnModel, X: np.ndarray, weight_fn, batch: int = 1024) -> np.ndarray:
    out = []
    with ad.no_grad():
        for s in range(0, len(X), batch):
            out.append(forward_weights(model, X[s : s + batch], weight_fn()).data.argmax(axis=-1))
    return np.concatenate(out, axis=-1)


def accuracy_at(model: GcnModel, X, y, thresholds: Sequence[float]) -> list[float]:
    """Macro accuracy under the hard mask at each threshold (one batched pass)."""
    preds = _predict_weights(model, np.asarray(X), lambda: hard_weights(model, thresholds))
    return [macro_accuracy(y, p) for p in preds]


def evaluate(model: GcnModel, X, y, r: float, prior: TargetPrior) -> float:
    """Macro accuracy of the network pruned at rate ``r`` (threshold from ``prior``)."""
    if len(y) == 0:
        raise DomainError("cannot evaluate on empty data")
    return accuracy_at(model, X, y, [quantile_threshold(prior, r)])[0]


def active_params(model: GcnModel, a: float) -> int:
    return int(sum(np.count_nonzero(extract_mask(t, a)) for t in model.prunable()))


def _histogram_tensors(model: GcnModel, cfg: TrainConfig) -> list[Tensor]:
    names = model.prunable_names
    if not cfg.histogram_includes_classifier:
        names = [k for k in names if k != "out"]
    return [model.params[k] for k in names]


class _Objective:
    """Shared pieces of the training objective for one run."""

    def __init__(self, model: GcnModel, cfg: TrainConfig, regularizer: str | None, l1: float = 0.0):
        self.model = model
        self.cfg = cfg
        self.regularizer = regularizer
        self.l1 = l1
        if regularizer == "kld":
            self.grid = make_grid(cfg.prior, cfg.bins, cfg.width_factor)
            self.P = discretize_prior(cfg.prior, self.grid)

    def regularization(self) -> Tensor | None:
        if self.regularizer == "kld" and self.cfg.lam > 0:
            hist = soft_histogram(_histogram_tensors(self.model, self.cfg), self.grid)
            return kld(self.P, hist)
        if self.regularizer == "l1" and self.l1 > 0:
            terms = [ad.reduce_sum(ad.abs_(t)) for t in self.model.prunable()]
            total = terms[0]
            for t in terms[1:]:
                total = ad.add(total, t)
            return total
        return None

    def weight(self) -> float:
        return self.cfg.lam if self.regularizer == "kld" else self.l1

    def kld_value(self) -> float:
        if self.regularizer != "kld":
            return 0.0
        with ad.no_grad():
            hist = soft_histogram(_histogram_tensors(self.model, self.cfg), self.grid)
            return kld(self.P, hist).item()


def _step_loss(model, Xb, yb, weights, objective: _Objective):
    logits = forward_weights(model, Xb, weights)
    R, B, C = logits.shape
    ce = ad.softmax_cross_entropy(ad.reshape(logits, (R * B, C)), np.tile(yb, R))
    if R != 1:
        ce = ad.scale(ce, R)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    per_rate = (lse - np.take_along_axis(z, np.broadcast_to(yb, (R, B))[..., None], -1)[..., 0]).mean(axis=1)
    loss = ce
    reg = objective.regularization()
    if reg is not None:
        loss = ad.add(ce, ad.scale(reg, objective.weight()))
    return loss, per_rate, (reg.item() if reg is not None and objective.regularizer == "kld" else None)


def _fit(
    model: GcnModel,
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    mode: str,
    thresholds: list[float],
    objective: _Objective,
    masks: dict[str, np.ndarray] | None = None,
    eval_data: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainReport:
    start = time.perf_counter()
    X = np.asarray(X, dtype=model.dtype)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise DomainError("cannot train on empty data")
    schedule = cfg.schedule
    rng = np.random.default_rng(cfg.seed)
    adam = Adam(model.parameters())
    report = TrainReport(mode, list(cfg.rates), list(thresholds))

    def weights_at(sigma):
        if masks is not None:
            return masked_weights(model, masks)
        return soft_weights(model, thresholds, sigma)

    def observed():
        if masks is not None:
            total = sum(m.size for m in masks.values())
            kept = sum(int(m.sum()) for m in masks.values())
            return [(total - kept) / total] * len(thresholds)
        return [observed_rate(model.prunable(), a) for a in thresholds]

    with ad.no_grad():
        sigma = sigma_at(0, schedule)
        loss, per_rate, _ = _step_loss(model, X, y, weights_at(sigma), objective)
    report.history.append(
        EpochRecord(0, loss.item(), per_rate.tolist(), objective.kld_value(), observed(), cfg.lr0, sigma)
    )

    lr = cfg.lr0
    losses: list[float] = []
    n = len(y)
    bs = n if n <= cfg.batch_size else cfg.batch_size
    for epoch in range(cfg.epochs):
        sigma = sigma_at(epoch, schedule)
        model.bandstop = BandStopConfig(thresholds[0] if thresholds else 0.0, sigma, schedule)
        tick = time.perf_counter()
        order = rng.permutation(n) if bs < n else np.arange(n)
        tot, ce_sum, kl_sum, steps = 0.0, np.zeros(len(thresholds)), 0.0, 0
        for s in range(0, n, bs):
            idx = order[s : s + bs]
            model.zero_grad()
            loss, per_rate, kl = _step_loss(model, X[idx], y[idx], weights_at(sigma), objective)
            if not math.isfinite(loss.item()):
                raise TrainingError(epoch + 1)
            ad.backward(loss)
            adam.step(lr)
            tot += loss.item()
            ce_sum += per_rate
            kl_sum += kl or 0.0
            steps += 1
        losses.append(tot / steps)
        elapsed = time.perf_counter() - tick
        report.history.append(
            EpochRecord(epoch + 1, tot / steps, (ce_sum / steps).tolist(), kl_sum / steps, observed(), lr, sigma, elapsed)
        )
        lr = adaptive_lr(lr, losses, cfg.lr0)

    for p in model.parameters():
        if not np.all(np.isfinite(p.data)):
            raise TrainingError(cfg.epochs, f"non-finite weights in {p.name}")
    Xe, ye = eval_data if eval_data is not None else (X, y)
    if masks is not None:
        preds = _predict_weights(model, np.asarray(Xe, dtype=model.dtype), lambda: masked_weights(model, masks))
        acc = [macro_accuracy(ye, preds[0])]
        kept = [int(sum(m.sum() for m in masks.values()))]
    else:
        acc = accuracy_at(model, np.asarray(Xe, dtype=model.dtype), ye, thresholds)
        kept = [active_params(model, a) for a in thresholds]
    report.accuracy = dict(zip(cfg.rates, acc))
    report.params_active = dict(zip(cfg.rates, kept))
    report.wall_time = time.perf_counter() - start
    return report


def srmp_train(model: GcnModel, X, y, cfg: TrainConfig, eval_data=None) -> TrainReport:
    """Single-rate pruning: cross-entropy at ``a(r)`` plus ``lam * KL(P || Q)``."""
    if len(cfg.rates) != 1:
        raise DomainError(f"srmp_train takes exactly one rate, got {len(cfg.rates)}")
    return _fit(model, X, y, cfg, "srmp", cfg.thresholds(), _Objective(model, cfg, "kld"), eval_data=eval_data)


def mrmp_train(model: GcnModel, X, y, cfg: TrainConfig, eval_data=None) -> TrainReport:
    """Multi-rate pruning: summed cross-entropies at every ``a(r)`` over shared latents."""
    return _fit(model, X, y, cfg, "mrmp", cfg.thresholds(), _Objective(model, cfg, "kld"), eval_data=eval_data)


def dense_train(model: GcnModel, X, y, cfg: TrainConfig, eval_data=None) -> TrainReport:
    """Unpruned baseline: threshold 0 and no distribution term."""
    cfg = replace(cfg, rates=(0.0,), lam=0.0)
    return _fit(model, X, y, cfg, "dense", [0.0], _Objective(model, cfg, None), eval_data=eval_data)


def l1_train(model: GcnModel, X, y, cfg: TrainConfig, r_target: float, l1: float, eval_data=None) -> TrainReport:
    """Band-stop training at ``a(r_target)`` with ``l1 * sum|w|`` in place of the KL term.

    Nothing ties the final sparsity to ``r_target``; the observed rate in the
    report is whatever the penalty produced and usually needs a search over
    ``l1`` to land near the target.
    """
    cfg = replace(cfg, rates=(r_target,))
    return _fit(model, X, y, cfg, "l1", cfg.thresholds(), _Objective(model, cfg, "l1", l1), eval_data=eval_data)


def magnitude_masks(model: GcnModel, r: float) -> dict[str, np.ndarray]:
    """Global magnitude pruning: drop the ``round(r * N)`` smallest latents."""
    if not (0.0 <= r < 1.0):
        raise DomainError(f"pruning rate must lie in [0, 1), got {r}")
    names = model.prunable_names
    flat = np.concatenate([np.abs(model.params[k].data).ravel() for k in names])
    drop = int(round(r * flat.size))
    keep = np.ones(flat.size)
    keep[np.argsort(flat, kind="stable")[:drop]] = 0.0
    masks, start = {}, 0
    for k in names:
        shape = model.params[k].shape
        size = model.params[k].size
        masks[k] = keep[start : start + size].reshape(shape)
        start += size
    return masks


def mp_baseline(model: GcnModel, X, y, r: float, finetune_epochs: int, cfg: TrainConfig, eval_data=None) -> TrainReport:
    """Prune-then-finetune: global magnitude masks on a trained dense model, then retrain survivors."""
    masks = magnitude_masks(model, r)
    cfg = replace(cfg, rates=(r,), lam=0.0, epochs=finetune_epochs)
    report = _fit(model, X, y, cfg, "mp", [0.0], _Objective(model, cfg, None), masks=masks, eval_data=eval_data)
    report.thresholds = [float("nan")]
    return report


@dataclass
class PrunedModel:
    """A network carved out of shared latents at one pruning rate."""

    model: GcnModel
    rate: float
    a: float
    masks: dict[str, np.ndarray]

    @property
    def active_params(self) -> int:
        return int(sum(m.sum() for m in self.masks.values()))

    @property
    def observed_rate(self) -> float:
        total = sum(m.size for m in self.masks.values())
        return (total - self.active_params) / total

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=self.model.dtype)
        return _predict_weights(self.model, X, lambda: masked_weights(self.model, self.masks))[0]

    def evaluate(self, X, y) -> float:
        return macro_accuracy(y, self.predict(X))


def extrapolate(model: GcnModel, prior: TargetPrior, r: float, trained_rates: Sequence[float] = ()) -> PrunedModel:
    """Binary-mask the latents at ``a(r)``; no gradient steps are taken."""
    if trained_rates and not (min(trained_rates) <= r <= max(trained_rates)):
        warnings.warn(
            f"rate {r} lies outside the trained range [{min(trained_rates)}, {max(trained_rates)}]",
            stacklevel=2,
        )
    a = quantile_threshold(prior, r)
    masks = {k: extract_mask(model.params[k], a) for k in model.prunable_names}
    return PrunedModel(model, r, a, masks)
