"""Command-line front end.

Subcommands: train, robust-train, attack, eval, sweep, single-pixel,
verify-ro. Every artifact gets a sidecar <artifact>.runconfig.json with
the full resolved configuration so runs can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attacks, data, nn, ro_equivalence, training
from .perturb import UncertaintySpec

PRESETS = {
    "desk-mnist": nn.desk_mnist_arch,
    "paper-mnist": nn.paper_mnist_arch,
}


@dataclass
class RunConfig:
    subcommand: str
    flags: dict

    def save_beside(self, artifact_path) -> None:
        path = Path(str(artifact_path) + ".runconfig.json")
        path.write_text(json.dumps({"subcommand": self.subcommand, "flags": self.flags},
                                   indent=2, sort_keys=True, default=str) + "\n")


def _runconfig(args: argparse.Namespace) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "subcommand")}
    return RunConfig(args.subcommand, flags)


def parse_eps_range(text: str) -> list:
    """start:stop:step, stop inclusive when it lands exactly on a step."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"epsilon range must be start:stop:step, got {text!r}")
    start, stop, step = (float(p) for p in parts)
    if step <= 0 or stop < start:
        raise ValueError(f"bad epsilon range {text!r}")
    count = int((stop - start) / step + 1e-9) + 1
    eps = [round(start + i * step, 12) for i in range(count)]
    if not eps:
        raise ValueError(f"empty epsilon range {text!r}")
    return eps


def _load_datasets(args, num_train=None, num_test=None):
    data_dir = data.resolve_data_dir(args.data_dir)
    train, test = data.load_train_test(data_dir)
    if num_train:
        train = train.head(num_train)
    if num_test:
        test = test.head(num_test)
    return train, test


def _load_models(spec: str):
    nets = []
    for path in spec.split(","):
        ckpt = data.load_checkpoint(path)
        nets.append((Path(path).stem, ckpt.net))
    return nets


def _train_config_from(args, mode: str, uncertainty=None) -> training.TrainConfig:
    return training.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        momentum=args.momentum, seed=args.seed, mode=mode,
        uncertainty=uncertainty, alpha=getattr(args, "alpha", None) or 0.5,
        checkpoint_every=args.checkpoint_every,
    ).validate()


def _run_training(args, mode: str, uncertainty=None) -> int:
    specs, input_shape = PRESETS[args.preset]()
    train_ds, test_ds = _load_datasets(args, args.train_limit, args.test_limit)
    cfg = _train_config_from(args, mode, uncertainty)
    init = data.load_checkpoint(args.init).net if args.init else None

    def checkpoint_hook(epoch, net):
        data.save_checkpoint(
            data.Checkpoint(net, seed=args.seed, config_fingerprint=_fingerprint_config(cfg)),
            f"{args.out}.epoch{epoch}",
        )

    net, trace = training.train(specs, input_shape, train_ds, test_ds, cfg,
                                init=init, checkpoint_hook=checkpoint_hook)
    data.save_checkpoint(
        data.Checkpoint(net, seed=args.seed, config_fingerprint=_fingerprint_config(cfg)),
        args.out,
    )
    trace_path = args.trace or f"{args.out}.trace.csv"
    trace.to_csv(trace_path)
    _runconfig(args).save_beside(args.out)
    last = trace.records[-1]
    print(f"{args.out}: {cfg.epochs} epochs, final loss {last.mean_loss:.4f}, "
          f"test accuracy {last.test_accuracy:.4f}")
    return 0


def _fingerprint_config(cfg: training.TrainConfig) -> str:
    d = dict(cfg.__dict__)
    u = d.pop("uncertainty")
    if u is not None:
        d["uncertainty"] = u.__dict__
    return json.dumps(d, sort_keys=True, default=str)


def cmd_train(args) -> int:
    return _run_training(args, "standard")


def cmd_robust_train(args) -> int:
    if args.norm == "tangent":
        raise ValueError("tangent training needs a caller-supplied basis; use the library API")
    if args.radius <= 0:
        raise ValueError(f"radius must be > 0, got {args.radius}")
    spec = UncertaintySpec(args.norm, args.radius)
    mode = "blended" if args.alpha is not None else "robust"
    return _run_training(args, mode, spec)


def cmd_attack(args) -> int:
    ckpt = data.load_checkpoint(args.model)
    _, test_ds = _load_datasets(args, None, args.test_limit)
    families = args.families.split(",")
    radii = dict(attacks.DEFAULT_RADII)
    for fam in ("linf", "l2", "l1"):
        override = getattr(args, f"radius_{fam}")
        if override is not None:
            radii[fam] = override
    adv = attacks.build_adversarial_set(
        ckpt.net, test_ds, families, radii, pool_size=args.pool, seed=args.seed,
        source_id=data.fingerprint(ckpt.net), workers=args.workers,
    )
    violations = attacks.validate_adversarial_set(adv, ckpt.net, test_ds)
    attacks.save_adversarial_set(adv, args.out)
    _runconfig(args).save_beside(args.out)
    print(f"{args.out}: {len(adv)} adversarial examples "
          f"({', '.join(families)}) from {args.pool} candidates")
    if violations:
        print(f"error: {len(violations)} invariant violations", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    nets = _load_models(args.models)
    adv = attacks.load_adversarial_set(args.advset)
    _, test_ds = _load_datasets(args, None, args.test_limit)
    rows = attacks.cross_evaluate(nets, adv, test_ds, workers=args.workers)
    attacks.write_cross_eval_csv(rows, args.out)
    _runconfig(args).save_beside(args.out)
    for r in rows:
        print(f"{r.net}: clean {r.clean_acc:.4f}, adversarial {r.adv_acc:.4f}")
    return 0


def cmd_sweep(args) -> int:
    nets = _load_models(args.models)
    eps = parse_eps_range(args.eps)
    if any(e <= 0 for e in eps):
        raise ValueError("sweep epsilons must be positive")
    _, test_ds = _load_datasets(args, None, args.test_limit)
    subset = test_ds.subset(attacks.candidate_pool(len(test_ds), args.n, args.seed))
    report = attacks.epsilon_sweep(nets, subset, eps, workers=args.workers)
    report.to_csv(args.out)
    _runconfig(args).save_beside(args.out)
    print(f"{args.out}: {len(report.rows)} rows ({len(nets)} nets x {len(eps)} epsilons)")
    return 0


def cmd_single_pixel(args) -> int:
    ckpt = data.load_checkpoint(args.model)
    _, test_ds = _load_datasets(args, None, args.test_limit)
    hits = attacks.single_pixel_report(ckpt.net, test_ds, args.radius,
                                       pool_size=args.pool, seed=args.seed,
                                       workers=args.workers)
    attacks.write_single_pixel_csv(hits, args.out)
    _runconfig(args).save_beside(args.out)
    print(f"{args.out}: {len(hits)} single-pixel misclassifications")
    return 0


def cmd_verify_ro(args) -> int:
    report = ro_equivalence.verify_equivalences(args.trials, args.seed)
    if args.out:
        report.to_csv(args.out)
        _runconfig(args).save_beside(args.out)
    else:
        report.to_csv(sys.stdout)
    status = "ok" if report.passed else "FAILED"
    print(f"verify-ro: {args.trials} trials, {status}", file=sys.stderr)
    return 0 if report.passed else 1


def _add_common(p: argparse.ArgumentParser, needs_data: bool = True) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1,
                   help="evaluation/perturbation fan-out; 1 is bitwise deterministic")
    if needs_data:
        p.add_argument("--data-dir", default=None,
                       help=f"IDX data directory (default ${data.DATA_DIR_ENV})")


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk-mnist")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--train-limit", type=int, default=10000)
    p.add_argument("--test-limit", type=int, default=2000)
    p.add_argument("--init", default=None, help="checkpoint to fine-tune from")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--trace", default=None, help="trace CSV path (default OUT.trace.csv)")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustnet")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("train", help="standard training")
    _add_common(p)
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("robust-train", help="worst-case (min-max) training")
    _add_common(p)
    _add_training_flags(p)
    p.add_argument("--norm", choices=["l1", "l2", "linf", "tangent"], required=True)
    p.add_argument("--radius", type=float, required=True)
    p.add_argument("--alpha", type=float, default=None,
                   help="blend weight of the clean gradient; presence selects blended mode")
    p.set_defaults(func=cmd_robust_train)

    p = sub.add_parser("attack", help="build an adversarial set from a checkpoint")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--families", default="l1,l2,linf")
    p.add_argument("--radius-linf", type=float, default=None)
    p.add_argument("--radius-l2", type=float, default=None)
    p.add_argument("--radius-l1", type=float, default=None)
    p.add_argument("--pool", type=int, default=1000)
    p.add_argument("--test-limit", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="cross-evaluate checkpoints on clean + adversarial data")
    _add_common(p)
    p.add_argument("--models", required=True, help="comma-separated checkpoints")
    p.add_argument("--advset", required=True)
    p.add_argument("--test-limit", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="self-attack accuracy over an epsilon range")
    _add_common(p)
    p.add_argument("--models", required=True)
    p.add_argument("--eps", required=True, help="start:stop:step, stop inclusive on-step")
    p.add_argument("--n", type=int, default=500, help="seeded test-subset size")
    p.add_argument("--test-limit", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("single-pixel", help="report one-pixel misclassifications")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--pool", type=int, default=1000)
    p.add_argument("--test-limit", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_single_pixel)

    p = sub.add_parser("verify-ro", help="check the worst-case least-squares identities")
    _add_common(p, needs_data=False)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify_ro)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
