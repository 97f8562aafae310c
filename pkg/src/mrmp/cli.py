"""Command-line entry points: synth, train, extrapolate, sweep and gradcheck.

Every command that produces files writes CSV with a header row and numbers
printed to 9 significant digits. ``train`` also writes a manifest holding the
fully resolved configuration and its content hash; re-running with the same
configuration in 64-bit mode reproduces every output file bit for bit.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import SynthSpec, load_jsonl, stratified_split, synth_dataset, to_arrays, write_jsonl
from .distribution import DEFAULT_PARAMS, PRIOR_KINDS, TargetPrior
from .errors import DomainError, ParseError, TrainingError, ValidationError
from .gcn import GcnConfig, build_model, load_model, save_model
from .gradcheck import run_all, suite_names
from .training import (
    DEFAULT_RATES,
    TrainConfig,
    dense_train,
    extrapolate,
    fmt,
    l1_train,
    magnitude_masks,
    mp_baseline,
    mrmp_train,
    srmp_train,
)

log = logging.getLogger("mrmp")

MODES = ("srmp", "mrmp", "mp", "l1", "dense")
DEFAULT_SWEEP = "0.50:0.99:0.01"
CHECKPOINT_NAME = "model.mrmp"


# -- flag parsing -----------------------------------------------------------


def parse_rates(text: str) -> tuple[float, ...]:
    """Expand ``start:stop:step,extra,...`` into a sorted tuple of rates.

    Ranges include ``stop`` when it falls on the grid. Items must already be in
    increasing order; exact repeats are dropped.
    """
    rates: list[float] = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            if ":" in item:
                start, stop, step = (float(v) for v in item.split(":"))
                if step <= 0:
                    raise argparse.ArgumentTypeError(f"rate step must be positive in {item!r}")
                count = int(np.floor((stop - start) / step + 1e-9)) + 1
                rates.extend(round(start + i * step, 10) for i in range(max(count, 0)))
            else:
                rates.append(round(float(item), 10))
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad rate list {text!r}: {exc}") from exc
    if not rates:
        raise argparse.ArgumentTypeError("empty rate list")
    if any(b < a for a, b in zip(rates, rates[1:])):
        raise argparse.ArgumentTypeError(f"rates must be in increasing order, got {text!r}")
    if any(not (0.0 <= r < 1.0) for r in rates):
        raise argparse.ArgumentTypeError(f"rates must lie in [0, 1), got {text!r}")
    return tuple(dict.fromkeys(rates))


def parse_pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}") from exc
    return a, b


def precision() -> np.dtype:
    value = os.environ.get("MRMP_PRECISION", "f64").lower()
    if value not in ("f32", "f64"):
        raise DomainError(f"MRMP_PRECISION must be f32 or f64, got {value!r}")
    return np.dtype(np.float32 if value == "f32" else np.float64)


# -- manifests --------------------------------------------------------------


@dataclass
class RunManifest:
    config: dict
    config_hash: str
    seed: int
    out: str

    @classmethod
    def build(cls, config: dict, seed: int, out) -> "RunManifest":
        return cls(config, config_hash(config), seed, str(out))

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def config_hash(config: dict) -> str:
    """Git blob hash (SHA-1 over ``blob <len>\\0<content>``) of the canonical JSON config."""
    body = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


# -- data -------------------------------------------------------------------


def _synth_sizes(total: int, classes: int) -> list[int]:
    base, extra = divmod(total, classes)
    return [base + (1 if c < extra else 0) for c in range(classes)]


def data_spec(args) -> dict:
    spec = {"source": args.data, "test_fraction": args.test_fraction, "split_seed": args.seed, "chunks": args.chunks}
    if args.data == "synth":
        spec["synth"] = {
            "seed": args.seed,
            "classes": args.synth_classes,
            "sequences": args.synth_sequences,
            "joints": args.synth_joints,
            "frames": args.synth_frames,
            "noise": args.synth_noise,
        }
    return spec


def load_data(spec: dict):
    """Descriptor arrays and the (train, test) split described by ``spec``."""
    if spec["source"] == "synth":
        s = spec["synth"]
        seqs = synth_dataset(
            s["seed"], s["classes"], _synth_sizes(s["sequences"], s["classes"]), s["joints"], s["frames"],
            SynthSpec(noise=s["noise"]),
        )
    else:
        seqs = load_jsonl(spec["source"])
    if not seqs:
        raise DomainError(f"no sequences in {spec['source']}")
    X, y = to_arrays(seqs, spec["chunks"])
    if spec["test_fraction"] > 0:
        train, test = stratified_split(y, spec["test_fraction"], spec["split_seed"])
    else:
        train = test = np.arange(len(y))
    return X, y, train, test


def _eval_split(meta: dict, source: str | None):
    """Evaluation data for a checkpoint: the held-out split when ``source`` is the training data."""
    recorded = meta.get("data")
    if source in (None, "train"):
        if recorded is None:
            raise DomainError("checkpoint does not record its training data; pass --data")
        spec = recorded
    elif recorded is not None and source == recorded["source"]:
        spec = recorded
    else:
        spec = {"source": source, "test_fraction": 0.0, "split_seed": 0, "chunks": (recorded or {}).get("chunks", 4)}
        if source == "synth":
            raise DomainError("--data synth needs a checkpoint trained on synthetic data")
    X, y, _, test = load_data(spec)
    return X[test], y[test]


# -- commands ---------------------------------------------------------------


def _resolved_config(args) -> dict:
    rates = args.rates
    if rates is None:
        rates = {"mrmp": DEFAULT_RATES, "dense": (0.0,)}.get(args.mode, (0.98,))
    params = args.prior_params or DEFAULT_PARAMS[args.prior]
    return {
        "mode": args.mode,
        "rates": list(rates),
        "prior": {"kind": args.prior, "params": list(params)},
        "lambda": args.lam,
        "epochs": args.epochs,
        "finetune_epochs": args.finetune_epochs,
        "l1": args.l1,
        "batch_size": args.batch,
        "lr0": args.lr0,
        "bins": args.bins,
        "sigma0": args.sigma0,
        "sigma_max": args.sigma_max,
        "seed": args.seed,
        "precision": str(precision()),
        "model": {"heads": args.heads, "filters": args.filters, "hidden": args.hidden},
        "data": data_spec(args),
    }


def cmd_train(args) -> int:
    config = _resolved_config(args)
    if args.mode != "mrmp" and len(config["rates"]) != 1:
        raise DomainError(f"--mode {args.mode} trains one rate; got {len(config['rates'])}")
    prior = TargetPrior(args.prior, tuple(config["prior"]["params"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    X, y, train, test = load_data(config["data"])
    model_cfg = GcnConfig(
        nodes=X.shape[1], in_channels=X.shape[2], heads=args.heads, filters=args.filters,
        classes=int(y.max()) + 1, hidden=args.hidden,
    )
    model = build_model(model_cfg, args.seed, precision())
    cfg = TrainConfig(
        lam=args.lam, rates=tuple(config["rates"]), prior=prior, epochs=args.epochs, batch_size=args.batch,
        lr0=args.lr0, seed=args.seed, bins=args.bins, sigma0=args.sigma0, sigma_max=args.sigma_max,
    )
    log.info("training %s on %d sequences (%d prunable weights)", args.mode, len(train), model.param_count(True))
    Xtr, ytr, ev = X[train], y[train], (X[test], y[test])
    if args.mode == "mrmp":
        report = mrmp_train(model, Xtr, ytr, cfg, eval_data=ev)
    elif args.mode == "srmp":
        report = srmp_train(model, Xtr, ytr, cfg, eval_data=ev)
    elif args.mode == "l1":
        report = l1_train(model, Xtr, ytr, cfg, cfg.rates[0], args.l1, eval_data=ev)
    elif args.mode == "dense":
        report = dense_train(model, Xtr, ytr, cfg, eval_data=ev)
    else:
        dense_train(model, Xtr, ytr, cfg)
        masks = magnitude_masks(model, cfg.rates[0])
        report = mp_baseline(model, Xtr, ytr, cfg.rates[0], args.finetune_epochs, cfg, eval_data=ev)
        # Zero the pruned latents so the checkpoint carries the mask.
        for k, mask in masks.items():
            model.params[k].data = model.params[k].data * mask

    manifest = RunManifest.build(config, args.seed, out)
    meta = {
        "mode": args.mode,
        "rates": list(report.rates),
        "prior": config["prior"],
        "data": config["data"],
        "config_hash": manifest.config_hash,
        "accuracy": {fmt(r): a for r, a in report.accuracy.items()},
    }
    save_model(out / CHECKPOINT_NAME, model, meta)
    report.write_csv(out / "history.csv")
    report.write_summary(out / "summary.csv")
    manifest.write(out / "manifest.json")
    for r in report.rates:
        print(f"rate={fmt(r)} accuracy={fmt(report.accuracy[r])} params_active={report.params_active[r]}")
    print(f"wrote {out}")
    return 0


def _checkpoint(args):
    path = Path(args.checkpoint)
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, meta = load_model(path)
    prior = TargetPrior(meta["prior"]["kind"], tuple(meta["prior"]["params"]))
    return model, meta, prior


def cmd_extrapolate(args) -> int:
    model, meta, prior = _checkpoint(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pruned = extrapolate(model, prior, args.rate, meta.get("rates", ()))
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    row = {
        "rate": args.rate,
        "threshold": pruned.a,
        "observed_rate": pruned.observed_rate,
        "active_params": pruned.active_params,
        "prunable_params": model.param_count(True),
    }
    if args.data is not None:
        Xe, ye = _eval_split(meta, args.data)
        row["accuracy"] = pruned.evaluate(Xe, ye)
    print(json.dumps(row))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(row))
            w.writerow([v if isinstance(v, int) else fmt(v) for v in row.values()])
    return 0


def cmd_sweep(args) -> int:
    model, meta, prior = _checkpoint(args)
    Xe, ye = _eval_split(meta, args.data)
    seen = {round(r, 10) for r in meta.get("rates", ())}
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for r in args.grid:
            pruned = extrapolate(model, prior, r)
            rows.append((r, pruned.observed_rate, pruned.evaluate(Xe, ye), int(round(r, 10) in seen)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rate", "observed_rate", "accuracy", "seen"])
        for r, obs, acc, s in rows:
            w.writerow([fmt(r), fmt(obs), fmt(acc), s])
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_all(seed=args.seed, tol=args.tol, inject=args.inject)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<26} max_rel_err={r.max_rel_err:.3e}")
    worst = max(r.max_rel_err for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} passed, max relative error {worst:.3e}")
    if failed:
        print("failing operators: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return 1
    return 0


def cmd_synth(args) -> int:
    seqs = synth_dataset(
        args.seed, args.synth_classes, _synth_sizes(args.synth_sequences, args.synth_classes),
        args.synth_joints, args.synth_frames, SynthSpec(noise=args.synth_noise),
    )
    write_jsonl(args.out, seqs)
    print(f"wrote {len(seqs)} sequences to {args.out}")
    return 0


# -- parser -----------------------------------------------------------------


def _add_data_flags(p: argparse.ArgumentParser, with_split: bool = True) -> None:
    g = p.add_argument_group("synthetic data")
    g.add_argument("--synth-classes", type=int, default=3)
    g.add_argument("--synth-sequences", type=int, default=500, help="total sequences across classes")
    g.add_argument("--synth-joints", type=int, default=10)
    g.add_argument("--synth-frames", type=int, default=40)
    g.add_argument("--synth-noise", type=float, default=0.02)
    if with_split:
        p.add_argument("--test-fraction", type=float, default=0.4)
        p.add_argument("--chunks", type=int, default=4, help="temporal chunks per trajectory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrmp", description="Multi-rate magnitude pruning of skeleton GCNs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a pruned (or dense) network")
    p.add_argument("--mode", choices=MODES, default="mrmp")
    p.add_argument("--data", default="synth", help="'synth' or a JSON-lines dataset path")
    p.add_argument("--prior", choices=PRIOR_KINDS, default="gaussian")
    p.add_argument("--prior-params", type=parse_pair, default=None, metavar="P0,P1")
    p.add_argument("--rates", type=parse_rates, default=None, help="start:stop:step,extra,... (default: 11 rates 0.50..0.98 for mrmp, 0.98 otherwise)")
    p.add_argument("--lambda", dest="lam", type=float, default=10.0)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--finetune-epochs", type=int, default=100, help="mp mode: epochs after pruning")
    p.add_argument("--l1", type=float, default=1e-4, help="l1 mode: penalty weight")
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--lr0", type=float, default=1e-2)
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--sigma0", type=float, default=1.0)
    p.add_argument("--sigma-max", type=float, default=1e6)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--filters", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/latest")
    _add_data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extrapolate", help="prune a trained checkpoint at any rate without retraining")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--data", default=None, help="evaluate on 'train' (recorded held-out split), 'synth' or a path")
    p.add_argument("--out", default=None, help="optional CSV summary")
    p.set_defaults(func=cmd_extrapolate)

    p = sub.add_parser("sweep", help="evaluate a checkpoint over a grid of rates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", type=parse_rates, default=parse_rates(DEFAULT_SWEEP))
    p.add_argument("--data", default=None, help="defaults to the checkpoint's held-out split")
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--inject", choices=suite_names(), default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic JSON-lines dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_data_flags(p, with_split=False)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        precision()
        if getattr(args, "prior_params", None) is not None:
            TargetPrior(args.prior, args.prior_params)
        if args.command == "train" and args.mode != "mrmp" and args.rates is not None and len(args.rates) != 1:
            parser.error(f"--mode {args.mode} takes a single rate")
    except DomainError as exc:
        parser.error(str(exc))
    try:
        return args.func(args)
    except (TrainingError, DomainError, ParseError, ValidationError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
