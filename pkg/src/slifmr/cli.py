"""Command-line entry points: train, sweep, eval, noise, synth."""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys

from slifmr import datasets as D
from slifmr import training as T
from slifmr.config import parse_assignment, resolve, write_config
from slifmr.errors import ConfigError, SlifError


def _print(obj):
    print(json.dumps(obj, sort_keys=True))


def _resolve(args, extra_overrides=()):
    flags = [a for a in args.extra if a.startswith("--") and "=" in a]
    unknown = [a for a in args.extra if a not in flags]
    if unknown:
        raise ConfigError(f"unrecognised arguments: {' '.join(unknown)}")
    return resolve(args.config, list(args.override) + flags + list(extra_overrides))


def _run_dir(cfg, args, name):
    return args.run_dir or os.path.join(cfg.output_dir, name)


def cmd_train(args):
    cfg = _resolve(args)
    run_dir = _run_dir(cfg, args, f"train-seed{cfg.seed}")
    os.makedirs(run_dir, exist_ok=True)
    write_config(os.path.join(run_dir, "config.txt"), cfg)
    log = (lambda rec: print(f"epoch {rec['epoch']} loss {rec['loss']:.5f}", file=sys.stderr)) if args.verbose else None
    res = T.train(cfg, run_dir=run_dir, log=log)
    _print({"run_dir": run_dir, "best_epoch": res.best_epoch, "valid": res.best_valid, "test": res.test})
    return 0


def parse_grid(items):
    grid = {}
    for item in items:
        key, _, values = item.partition("=")
        vals = [v for v in values.split(",") if v.strip()]
        if not key or not vals:
            raise ConfigError(f"grid entry {item!r} needs key=v1,v2,...")
        grid[key.strip()] = [parse_assignment(f"{key}={v}")[1] for v in vals]
    if not grid:
        raise ConfigError("empty grid")
    return grid


def cmd_sweep(args):
    grid = parse_grid(args.grid)
    base = _resolve(args)
    bundle = T.load_bundle(base)
    rows = []
    keys = list(grid)
    for values in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, values))
        cfg = base.replace(**point)
        if any(getattr(cfg, k) != getattr(base, k) for k in T.DATA_KEYS):
            bundle_here = T.load_bundle(cfg)
        else:
            bundle_here = bundle
        name = ",".join(f"{k}={v}" for k, v in point.items())
        run_dir = os.path.join(_run_dir(base, args, "sweep"), name)
        res = T.train(cfg, bundle_here, run_dir=run_dir)
        rows.append({"point": point, "best_epoch": res.best_epoch, "valid": res.best_valid,
                     "test": res.test, "run_dir": run_dir})
        _print(rows[-1])
    summary = os.path.join(_run_dir(base, args, "sweep"), "summary.jsonl")
    with open(summary, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return 0


def cmd_eval(args):
    model, _ = T.load_run(args.run_dir)
    k_list = tuple(int(k) for k in args.k.split(",")) if args.k else model.cfg.K_list
    _print({"split": args.split, "metrics": T.evaluate(model, args.split, k_list)})
    return 0


def cmd_noise(args):
    cfg = _resolve(args)
    base = T.load_bundle(cfg)
    ratios = [float(r) for r in args.ratios.split(",")]
    rows = []
    for ratio in ratios:
        bundle = T.add_noise(base, args.kind, ratio, T.derive_seed(cfg.seed, "noise"))
        run_dir = os.path.join(_run_dir(cfg, args, "noise"), f"{args.kind}-{ratio:g}")
        res = T.train(cfg, bundle, run_dir=run_dir)
        rows.append({"kind": args.kind, "ratio": ratio, "test": res.test, "valid": res.best_valid})
        _print(rows[-1])
    return 0


def cmd_synth(args):
    spec = D.SyntheticSpec(num_users=args.users, num_items=args.items, num_clusters=args.clusters,
                           num_interactions=args.interactions)
    ds, kg, vis, txt = D.gen_synthetic(spec, args.seed)
    os.makedirs(args.out, exist_ok=True)
    D.write_interactions(os.path.join(args.out, "interactions.txt"), ds.train)
    D.write_kg(os.path.join(args.out, "kg.txt"), kg)
    for f in (vis, txt):
        D.write_features(os.path.join(args.out, f"{f.modality}.txt"), f)
    _print({"out": args.out, "users": ds.num_users, "items": ds.num_items,
            "interactions": int(len(ds.train)), "triples": int(len(kg.triples))})
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="slifmr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--run-dir", help="output directory (default under output_dir)")

    sp = sub.add_parser("train", help="train one model")
    with_config(sp)
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="grid of training runs")
    with_config(sp)
    sp.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("eval", help="evaluate a saved run")
    sp.add_argument("run_dir")
    sp.add_argument("--split", default="test", choices=("valid", "test"))
    sp.add_argument("--k", help="comma-separated K list")
    sp.set_defaults(func=cmd_eval, extra=[])

    sp = sub.add_parser("noise", help="robustness study")
    with_config(sp)
    sp.add_argument("--kind", required=True, choices=D.NOISE_KINDS)
    sp.add_argument("--ratios", default="0,0.1,0.2")
    sp.set_defaults(func=cmd_noise)

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--users", type=int, default=1000)
    sp.add_argument("--items", type=int, default=1000)
    sp.add_argument("--clusters", type=int, default=5)
    sp.add_argument("--interactions", type=int, default=20000)
    sp.add_argument("--seed", type=int, default=int(os.environ.get("SLIF_SEED", 0) or 0))
    sp.set_defaults(func=cmd_synth, extra=[])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and args.command in ("eval", "synth"):
        parser.error(f"unrecognised arguments: {' '.join(extra)}")
    args.extra = extra
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SlifError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
