"""Central finite-difference checks for every differentiable operation.

Each suite builds a small graph from random 64-bit inputs, reduces its output
to a scalar through a fixed random projection (so every output entry is
tested, not just their sum) and compares the analytic gradient of every input
with central differences. The error reported for an input is

    max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-8)

i.e. the worst entry relative to the scale of the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bandstop import BandStopConfig, gate, reparametrize, reparametrize_multi
from .distribution import TargetPrior, discretize_prior, kld, make_grid, soft_histogram
from .gcn import GcnConfig, build_model, forward_weights, soft_weights

DEFAULT_TOL = 1e-4
DEFAULT_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(
    name: str,
    fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    seed: int = 0,
    tol: float = DEFAULT_TOL,
    h: float = DEFAULT_STEP,
    fault: float = 0.0,
) -> CheckResult:
    """Compare analytic and numeric gradients of ``fn`` for every input array.

    ``fault`` perturbs the analytic gradient by that relative amount; it exists
    so the harness itself can be tested against a known-bad gradient.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(x, requires_grad=True) for x in arrays]
    out = fn(tensors)
    proj = np.random.default_rng(seed + 7919).uniform(0.5, 1.5, out.shape)
    ad.backward(ad.reduce_sum(ad.hadamard(out, Tensor(proj))))

    def scalar() -> float:
        with ad.no_grad():
            return float(np.sum(fn([Tensor(x) for x in arrays]).data * proj))

    worst = 0.0
    for x, t in zip(arrays, tensors):
        analytic = np.zeros_like(x) if t.grad is None else t.grad
        if fault:
            analytic = analytic * (1 + fault) + fault
        worst = max(worst, relative_error(analytic, numeric_gradient(scalar, x, h)))
    return CheckResult(name, worst, bool(worst < tol))


def _uniform(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, shape)


def _away_from_zero(rng, shape, lo=0.2, hi=2.0):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def suites(seed: int = 0) -> list[tuple[str, Callable, list[np.ndarray]]]:
    """Every (name, graph builder, inputs) triple the harness runs."""
    rng = np.random.default_rng(seed)
    m = lambda: _uniform(rng, (3, 4))  # noqa: E731
    labels = rng.integers(0, 4, 3)
    out: list[tuple[str, Callable, list[np.ndarray]]] = [
        ("matmul", lambda t: ad.matmul(t[0], t[1]), [m(), _uniform(rng, (4, 3))]),
        ("matmul_batched", lambda t: ad.matmul(t[0], t[1]), [_uniform(rng, (2, 3, 4)), _uniform(rng, (2, 4, 2))]),
        ("hadamard", lambda t: ad.hadamard(t[0], t[1]), [m(), m()]),
        ("hadamard_scalar", lambda t: ad.hadamard(t[0], t[1]), [m(), rng.uniform(-2, 2, ())]),
        ("add", lambda t: ad.add(t[0], t[1]), [m(), m()]),
        ("add_bias", lambda t: ad.add_bias(t[0], t[1]), [m(), _uniform(rng, (4,))]),
        ("scale", lambda t: ad.scale(t[0], -1.7), [m()]),
        ("add_scalar", lambda t: ad.add_scalar(t[0], 0.3), [m()]),
        ("neg", lambda t: ad.neg(t[0]), [m()]),
        ("exp", lambda t: ad.exp(t[0]), [m()]),
        ("log", lambda t: ad.log(t[0]), [_uniform(rng, (3, 4), 0.2, 2.0)]),
        ("square", lambda t: ad.square(t[0]), [m()]),
        ("reciprocal", lambda t: ad.reciprocal(t[0]), [_away_from_zero(rng, (3, 4), 0.5)]),
        ("relu", lambda t: ad.relu(t[0]), [_away_from_zero(rng, (3, 4), 0.05)]),
        ("abs", lambda t: ad.abs_(t[0]), [_away_from_zero(rng, (3, 4), 0.05)]),
        ("sum", lambda t: ad.reduce_sum(t[0]), [m()]),
        ("sum_axis", lambda t: ad.reduce_sum(t[0], axis=1), [m()]),
        ("reshape", lambda t: ad.reshape(t[0], (2, 6)), [m()]),
        ("transpose", lambda t: ad.transpose(t[0], (1, 0)), [m()]),
        ("expand", lambda t: ad.expand(t[0], 3, axis=1), [m()]),
        ("softmax_cross_entropy", lambda t: ad.softmax_cross_entropy(t[0], labels), [m()]),
    ]

    thresholds = [0.4, 0.9, 1.3]
    # The two factors of w * psi(w), each with the other held fixed.
    w_fixed = m()
    psi_fixed = gate(Tensor(m()), [0.9], 2.0).data[0]
    out += [
        ("band_stop_gate", lambda t: gate(t[0], thresholds, 2.0), [m()]),
        ("band_stop_latent_factor", lambda t: ad.hadamard(t[0], Tensor(psi_fixed)), [m()]),
        ("band_stop_psi_factor", lambda t: ad.hadamard(Tensor(w_fixed[None]), gate(t[0], [0.9], 2.0)), [m()]),
        ("band_stop_reparametrize", lambda t: reparametrize(t[0], BandStopConfig(0.9, 2.0)), [m()]),
        ("band_stop_multi_rate", lambda t: reparametrize_multi(t[0], thresholds, 2.0), [m()]),
    ]

    grid = make_grid(TargetPrior("uniform", (-2.0, 2.0)), 10)
    P = discretize_prior(TargetPrior("gaussian", (0.0, 0.8)), grid)
    out += [
        ("soft_histogram", lambda t: soft_histogram(t, grid).probs, [m(), _uniform(rng, (5,))]),
        ("soft_histogram_raw", lambda t: soft_histogram(t, grid).raw, [m()]),
        ("kld", lambda t: kld(P, soft_histogram(t, grid)), [m(), _uniform(rng, (2, 2))]),
        ("kld_probs", lambda t: kld(P, t[0]), [rng.uniform(0.05, 0.2, grid.K)]),
    ]
    out.append(_gcn_suite(seed))
    return out


def _gcn_suite(seed: int):
    """Forward pass of a 4-node, 2-class toy network w.r.t. every parameter."""
    cfg = GcnConfig(nodes=4, in_channels=3, heads=2, filters=3, classes=2, hidden=3, proj_channels=2)
    model = build_model(cfg, seed)
    names = list(model.params)
    rng = np.random.default_rng(seed + 1)
    signals = rng.uniform(-1, 1, (2, 4, 3))
    # Spread latents so some sit on either side of each threshold.
    arrays = [
        _uniform(rng, model.params[k].shape, -1.5, 1.5) if not k.endswith("_bias") else _uniform(rng, model.params[k].shape, -0.5, 0.5)
        for k in names
    ]

    def fn(tensors):
        model.params = dict(zip(names, tensors))
        weights = soft_weights(model, [0.3, 0.8], 2.0)
        return forward_weights(model, signals, weights)

    return "gcn_forward", fn, arrays


def run_all(
    seed: int = 0,
    tol: float = DEFAULT_TOL,
    h: float = DEFAULT_STEP,
    inject: str | None = None,
    only: Sequence[str] | None = None,
) -> list[CheckResult]:
    """Run every suite; ``inject`` names a suite whose analytic gradient is corrupted."""
    results = []
    for name, fn, inputs in suites(seed):
        if only and name not in only:
            continue
        results.append(check_gradients(name, fn, inputs, seed, tol, h, fault=0.01 if name == inject else 0.0))
    return results


def suite_names() -> list[str]:
    return [name for name, _, _ in suites(0)]
