"""Command-line entry point: ``dsmpnn {gen-data,train,eval,verify,ablate,bench}``.

Exit codes: 0 success, 2 invalid arguments or inputs, 3 solver failure,
4 training divergence, 5 communication timeout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .comm import CommTimeout
from .config import ConfigError, TrainConfig, load_config, save_config
from .darcy import DatasetFormatError, Normalizer, SolverError, discrete_residual, gen_dataset, load_dataset, split_dataset
from .model import load_checkpoint, params_from_arrays, save_checkpoint
from .train import DivergenceError, build_params, evaluate, to_pointsets, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SOLVER = 3
EXIT_DIVERGED = 4
EXIT_TIMEOUT = 5

log = logging.getLogger("dsmpnn")

# CLI flag -> config key
TRAIN_FLAGS = {
    "model": ("--model", dict(choices=["mpnn", "gcn"])),
    "n_proc": ("--nproc", dict(type=int)),
    "s": ("--s", dict(type=int)),
    "r": ("--r", dict(type=float)),
    "n_e": ("--ne", dict(type=int)),
    "h": ("--h", dict(type=int)),
    "l": ("--l", dict(type=float)),
    "epochs": ("--epochs", dict(type=int)),
    "lr_max": ("--lr", dict(type=float)),
    "scheduler": ("--scheduler", dict(choices=["onecycle", "plateau"])),
    "precision": ("--precision", dict(choices=["f32", "f64"])),
    "mode": ("--mode", dict(choices=["full", "scatter"])),
    "max_train": ("--max-train", dict(type=int)),
    "max_test": ("--max-test", dict(type=int)),
    "eval_repeats": ("--repeats", dict(type=int)),
    "seed_data": ("--seed-data", dict(type=int)),
    "seed_sampling": ("--seed-sampling", dict(type=int)),
    "seed_init": ("--seed-init", dict(type=int)),
    "transport": ("--transport", dict(choices=["queue", "socket"])),
    "launcher": ("--launcher", dict(choices=["thread", "process"])),
    "timeout": ("--timeout", dict(type=float)),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for key, (flag, kw) in TRAIN_FLAGS.items():
        p.add_argument(flag, dest=f"cfg_{key}", default=None, **kw)
    p.add_argument("--no-comm", dest="cfg_no_comm", action="store_true", default=None,
                   help="skip halo exchange (halo rows keep stale values)")
    p.add_argument("--config", help="key = value config file; flags override it")


def _resolve_config(args) -> TrainConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(getattr(args, "config", None), overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(path, cfg: TrainConfig):
    samples, header = load_dataset(path)
    return split_dataset(samples, header)


def _normalizer_path(ckpt: Path) -> Path:
    return ckpt.with_suffix(".norm.json")


# commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.n < 8:
        raise UsageError("--n must be ≥ 8")
    if args.train < 1 or args.test < 0:
        raise UsageError("--train must be ≥ 1 and --test ≥ 0")
    samples = gen_dataset(args.train + args.test, args.n, args.seed, path=args.out, n_test=args.test)
    worst = max(discrete_residual(s.a, s.f, s.u) for s in samples)
    print(f"wrote {args.out}: count={len(samples)} (train {args.train}, test {args.test}) "
          f"n={args.n} seed={args.seed} max residual={worst:.2e}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    save_config(cfg, out / "config.txt")
    train_s, _ = _load_split(args.data, cfg)
    ckpt = out / "model.ckpt"
    try:
        res = train(cfg, train_s, metrics_path=out / "metrics.jsonl", ckpt_path=ckpt)
    except DivergenceError as exc:
        if exc.last_good:
            save_checkpoint(out / "last_good.ckpt", exc.last_good)
        raise
    save_checkpoint(ckpt, res.params)
    _normalizer_path(ckpt).write_text(json.dumps(res.normalizer.to_dict()))
    m = res.metrics
    print(f"trained {cfg.model} on {cfg.n_proc} worker(s): loss {m[0]['train_loss']:.4e} -> "
          f"{m[-1]['train_loss']:.4e}, {np.mean([r['s_per_epoch'] for r in m]):.2f} s/epoch; "
          f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    save_config(cfg, out / "eval_config.txt")
    train_s, test_s = _load_split(args.data, cfg)
    if not test_s:
        raise UsageError(f"{args.data} has no test split")
    ckpt = Path(args.ckpt)
    arrays = load_checkpoint(ckpt)
    npath = _normalizer_path(ckpt)
    norm = Normalizer(**json.loads(npath.read_text())) if npath.exists() else Normalizer.fit(train_s)
    ps0 = to_pointsets(test_s[:1], cfg, norm, 1)[0]
    spec = build_params(cfg, d_in=ps0.node_inputs().shape[1], d_e=ps0.edge_dim, d_out=ps0.d_out).spec
    params = params_from_arrays(spec, {k: v.astype(cfg.dtype) for k, v in arrays.items()})
    ev = evaluate(cfg, params, test_s, norm)
    report = {"rmse": ev.rmse, "mean_rmse": ev.mean_rmse, "coverage": ev.coverage, "seconds": ev.seconds,
              "repeats": cfg.eval_repeats, "config_hash": cfg.config_hash()}
    (out / "eval.json").write_text(json.dumps(report, indent=2))
    np.save(out / "fields.npy", np.stack(ev.fields))
    print(f"test RMSE {ev.mean_rmse:.4e} over {len(ev.rmse)} samples "
          f"(coverage {np.mean(ev.coverage):.1%}, {ev.seconds:.2f}s)")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .harness import verify_equivalence
    cfg = _resolve_config(args).replace(precision="f64")
    out = _out_dir(args)
    save_config(cfg, out / "verify_config.txt")
    samples, header = load_dataset(args.data)
    train_s, _ = split_dataset(samples, header)
    norm = Normalizer.fit(train_s)
    hops = tuple(int(h) for h in args.hops.split(","))
    nprocs = tuple(int(p) for p in args.nprocs.split(","))
    worst = None
    reports = []
    for k in range(min(args.samples, len(samples))):
        rep = verify_equivalence(samples[k], cfg, nprocs, hops, norm=norm, seed=k)
        reports.append({"sample": k, "forward_max_abs": rep.forward_max_abs,
                        "grad_rel_err": rep.grad_rel_err, "complete": rep.complete, "legs": rep.legs})
        print(f"sample {k}: {rep.summary()}")
        if worst is None:
            worst = rep
        else:
            worst.forward_max_abs = max(worst.forward_max_abs, rep.forward_max_abs)
            worst.grad_rel_err = max(worst.grad_rel_err, rep.grad_rel_err)
            worst.complete &= rep.complete
    (out / "verify.json").write_text(json.dumps(reports, indent=2))
    print(f"worst: {worst.summary()}")
    return EXIT_OK


def _parse_grid(items: list[str]) -> dict[str, list]:
    from .config import parse_value
    grid = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"grid entry {item!r} must look like key=v1,v2")
        key, raw = item.split("=", 1)
        try:
            grid[key] = [parse_value(key, v) for v in raw.split(",")]
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
    return grid


def cmd_ablate(args) -> int:
    from .harness import ablate
    cfg = _resolve_config(args)
    out = _out_dir(args)
    save_config(cfg, out / "config.txt")
    grid = _parse_grid(args.grid)
    train_s, test_s = _load_split(args.data, cfg)
    rows = ablate(cfg, grid, train_s, test_s, mode=args.grid_mode, out_csv=out / "ablation.csv")
    print(f"wrote {out / 'ablation.csv'} ({len(rows)} rows)")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .harness import BENCH_FIELDS, bench, write_csv
    cfg = _resolve_config(args)
    out = _out_dir(args)
    save_config(cfg, out / "config.txt")
    train_s, test_s = _load_split(args.data, cfg)
    n_procs = [int(p) for p in args.nprocs_grid.split(",")]
    s_grid = [int(s) for s in args.s_grid.split(",")]
    rows = bench(cfg, train_s, test_s, n_procs, s_grid)
    write_csv(out / "bench.csv", rows, BENCH_FIELDS)
    print(f"wrote {out / 'bench.csv'} ({len(rows)} rows)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log per-epoch progress")
    parser = _Parser(prog="dsmpnn", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate a Darcy dataset")
    p.add_argument("--n", type=int, default=64, help="grid points per side (≥ 8)")
    p.add_argument("--train", type=int, default=64)
    p.add_argument("--test", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="run")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="repeated-sampling evaluation of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default="run")
    _add_train_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", parents=[common], help="DS-vs-S equivalence report (64-bit)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="verify")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--hops", default="1,2,4")
    p.add_argument("--nprocs", default="2,4")
    _add_train_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate", parents=[common], help="train over a parameter grid, write a CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="ablation")
    p.add_argument("--grid", nargs="+", required=True, metavar="KEY=V1,V2")
    p.add_argument("--grid-mode", choices=["oat", "full"], default="oat",
                   help="one-at-a-time around the base config, or the full product")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", parents=[common], help="timing and traffic over n_proc × s")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="bench")
    p.add_argument("--nprocs-grid", default="1,2,4")
    p.add_argument("--s-grid", default="256,1024")
    _add_train_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"dsmpnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetFormatError, OSError, ValueError) as exc:
        print(f"dsmpnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverError as exc:
        print(f"dsmpnn: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DivergenceError as exc:
        print(f"dsmpnn: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CommTimeout as exc:
        print(f"dsmpnn: communication timeout: {exc}", file=sys.stderr)
        return EXIT_TIMEOUT


if __name__ == "__main__":
    sys.exit(main())
