"""Command line front end.

Exit codes: 0 success, 1 validation error (bad flags, files, shapes),
2 numerical failure (divergence, non-finite values, failed verification).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from .config import RunConfig
from .data import (IMAGE_KINDS, canonical_2d_modes, gen_2d_mixture,
                   gen_synthetic_images, load_dataset, save_dataset,
                   shuffle_positions)
from .errors import (CheckpointError, ConfigError, DatasetError, DomainError,
                     NonFiniteError, ShapeError)
from . import experiments
from .flow import FlowStack
from .train import evaluate_nll, load_model, train

VALIDATION_ERRORS = (ConfigError, ShapeError, DomainError, DatasetError,
                     CheckpointError, FileNotFoundError, IsADirectoryError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; bad flags are validation
        raise ConfigError(message)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    ds = load_dataset(args.data)
    res = train(cfg, ds, resume=args.resume, stop_after=args.stop_after)
    rows = np.genfromtxt(res.metrics_path, delimiter=",", names=True)
    if rows.size:
        rows = np.atleast_1d(rows)
        from .figures import fig_training_curve
        fig_training_curve(rows["step"], rows["nll_nats_per_dim"], rows["lr"],
                           res.metrics_path.replace("metrics.csv", "training.png"))
        last = rows[-1]
        print(f"step {int(last['step'])}: {last['nll_nats_per_dim']:.4f} nats/dim "
              f"({last['bits_per_dim']:.4f} bits/dim)")
    print(f"checkpoint: {res.ckpt_path}")
    print(f"metrics: {res.metrics_path}")
    if res.diverged:
        print("training diverged; last good checkpoint retained", file=sys.stderr)
        return 2
    return 0


def cmd_sample(args) -> int:
    stack, enc, dec, cfg = load_model(args.ckpt)
    out = experiments.run_sample(stack, args.out, n=args.n, class_id=args.class_id,
                                 omega=args.omega, mode=args.mode, seed=args.seed or 0,
                                 dec=dec, image_size=cfg.image_size)
    print(f"samples: {out['samples']}")
    if "pgms" in out:
        print(f"pgm images: {len(out['pgms'])} files in {args.out}")
    if "figure" in out:
        print(f"figure: {out['figure']}")
    return 0


def cmd_nll(args) -> int:
    stack, enc, dec, cfg = load_model(args.ckpt)
    ds = load_dataset(args.data)
    rep = experiments.run_nll_report(stack, ds, args.out, seed=args.seed or 0,
                                     enc=enc, sigma_l=cfg.sigma_l if enc else 0.0,
                                     image_size=cfg.image_size)
    print(f"nll: {rep['nll_nats_per_dim']:.6f} nats/dim "
          f"({rep['bits_per_dim']:.6f} bits/dim), non-finite {rep['non_finite']}")
    if args.with_control:
        control = shuffle_positions(ds, (args.seed or 0) + 1)
        c_nll, c_bad = evaluate_nll(stack, control, seed=args.seed or 0, enc=enc,
                                    sigma_l=cfg.sigma_l if enc else 0.0,
                                    image_size=cfg.image_size)
        print(f"shuffled-position control: {c_nll:.6f} nats/dim, non-finite {c_bad}")
    print(f"report: {rep['report']}")
    return 0


def cmd_inpaint(args) -> int:
    stack, enc, dec, cfg = load_model(args.ckpt)
    ds = load_dataset(args.data)
    out = experiments.run_inpaint(stack, ds, args.mask, args.out, chains=args.chains,
                                  seed=args.seed or 0, index=args.index,
                                  iters=args.iters, sigma_init=args.sigma_init,
                                  tau=args.tau, enc=enc, dec=dec,
                                  image_size=cfg.image_size)
    print(f"accept rate: {out['accept_rate']:.3f}")
    print(f"trace: {out['trace']}")
    return 0


def cmd_verify_cfg(args) -> int:
    s = experiments.run_verify_cfg(args.out, trials=args.trials,
                                   grid_points=args.grid_points, seed=args.seed or 0)
    print(f"{s['trials']} cases: max pointwise rel err {s['max_pointwise_rel_err']:.3e}, "
          f"max precision identity err {s['max_precision_abs_err']:.3e}")
    print(f"report: {s['report']}")
    if not s["passed"]:
        print("verification FAILED", file=sys.stderr)
        return 2
    print("verification passed")
    return 0


def cmd_universality(args) -> int:
    s = experiments.run_universality(args.out, seed=args.seed or 0, steps=args.steps,
                                     train_n=args.train_n, eval_n=args.eval_n)
    for r in s["rows"]:
        status = "diverged" if r["diverged"] else ("pass" if r["passed"] else "FAIL")
        print(f"T={r['t']} ({r['arch']}, {r['params']} params): "
              f"gap {r.get('gap', float('nan')):.4f} nats/dim, "
              f"needs {r['op']} {r['threshold']} -> {status}")
    print(f"report: {s['report']}")
    if not s["passed"]:
        print("hierarchy assertion FAILED", file=sys.stderr)
        return 2
    return 0


def cmd_bench(args) -> int:
    if args.default_pair:
        cfg_ds, cfg_eq = experiments.bench_pair_configs()
        stack_ds = FlowStack(cfg_ds.flow_config(), seed=args.seed or 0)
        stack_eq = FlowStack(cfg_eq.flow_config(), seed=(args.seed or 0) + 1)
    else:
        if not args.ckpt_deep or not args.ckpt_equal:
            raise ConfigError("bench needs --ckpt-deep and --ckpt-equal (or --default-pair)")
        stack_ds = load_model(args.ckpt_deep)[0]
        stack_eq = load_model(args.ckpt_equal)[0]
    s = experiments.run_bench(stack_ds, stack_eq, args.out, batch=args.batch,
                              seed=args.seed or 0, reps=args.reps)
    print(f"deep-shallow {s['total_deep_shallow_s']:.3f}s vs equal {s['total_equal_s']:.3f}s "
          f"-> ratio {s['ratio']:.3f}")
    print(f"report: {s['report']}")
    return 0


def cmd_gen_data(args) -> int:
    if args.kind == "canonical-2d":
        ds = gen_2d_mixture(canonical_2d_modes(), args.n, args.seed or 0,
                            labeled=args.labeled)
    elif args.kind == "single-gaussian":
        ds = gen_2d_mixture([(1.0, [0.0, 0.0], np.eye(2))], args.n, args.seed or 0)
    elif args.kind in IMAGE_KINDS:
        ds = gen_synthetic_images(args.kind, args.n, args.seed or 0, size=args.size,
                                  classes=args.classes, noise_sigma=args.noise)
    else:
        raise ConfigError(f"unknown data kind '{args.kind}'")
    save_dataset(ds, args.out)
    print(f"wrote {ds.n} samples [{ds.positions},{ds.channels}] to {args.out}")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="arflow", description="Autoregressive-flow lab CLI")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, seed=True, out=True):
        if seed:
            sp.add_argument("--seed", type=int, default=None)
        if out:
            sp.add_argument("--out", required=out == "required")

    t = sub.add_parser("train", help="train a flow from a config and an AFDS dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--resume", default=None, help="AFCK checkpoint to continue from")
    t.add_argument("--stop-after", type=int, default=None,
                   help="run at most this many steps this invocation")
    common(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--class", dest="class_id", type=int, default=None)
    s.add_argument("--omega", type=float, default=0.0)
    s.add_argument("--mode", choices=("none", "proposed", "legacy"), default="none")
    common(s, out="required")
    s.set_defaults(func=cmd_sample)

    n = sub.add_parser("nll", help="dataset NLL report")
    n.add_argument("--ckpt", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--with-control", action="store_true",
                   help="also score a shuffled-position control set")
    common(n, out="required")
    n.set_defaults(func=cmd_nll)

    i = sub.add_parser("inpaint", help="MH inpainting of masked coordinates")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--mask", required=True,
                   help="none | right-half | bottom-half | random:K | pos:i,j,...")
    i.add_argument("--chains", type=int, default=64)
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--iters", type=int, default=20)
    i.add_argument("--sigma-init", type=float, default=1.0)
    i.add_argument("--tau", type=float, default=1.0)
    common(i, out="required")
    i.set_defaults(func=cmd_inpaint)

    v = sub.add_parser("verify-cfg", help="closed-form guidance vs grid oracle")
    v.add_argument("--trials", type=int, default=1000)
    v.add_argument("--grid-points", type=int, default=4001)
    common(v, out="required")
    v.set_defaults(func=cmd_verify_cfg)

    u = sub.add_parser("universality", help="depth hierarchy on the canonical 2D target")
    u.add_argument("--steps", type=int, default=3000)
    u.add_argument("--train-n", type=int, default=50_000)
    u.add_argument("--eval-n", type=int, default=20_000)
    common(u, out="required")
    u.set_defaults(func=cmd_universality)

    b = sub.add_parser("bench", help="deep-shallow vs equal-sized sampling time")
    b.add_argument("--ckpt-deep", default=None)
    b.add_argument("--ckpt-equal", default=None)
    b.add_argument("--default-pair", action="store_true",
                   help="benchmark fresh random-init stacks of the standard pair")
    b.add_argument("--batch", type=int, default=16)
    b.add_argument("--reps", type=int, default=3)
    common(b, out="required")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gen-data", help="write a synthetic AFDS dataset")
    g.add_argument("--kind", required=True,
                   choices=("canonical-2d", "single-gaussian") + IMAGE_KINDS)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--size", type=int, default=8)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--labeled", action="store_true")
    common(g, out="required")
    g.set_defaults(func=cmd_gen_data)

    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args) or 0
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NonFiniteError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
