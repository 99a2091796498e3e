"""Command line entry point: ``voxcomm {run,repro,ref,lna}``."""
from __future__ import annotations

import argparse
import os
import sys

from .harness import PRESETS, build_references, repro_figure, run_scenario
from .lna import z_moments_and_ber
from .reference import time_grid
from .scenario import ConfigError, ScenarioConfig


def _load(args) -> ScenarioConfig:
    cfg = ScenarioConfig.from_yaml(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.scale != 1.0:
        changes["n_runs_ber"] = max(1, round(cfg.n_runs_ber * args.scale))
        changes["n_runs_ref"] = max(1, round(cfg.n_runs_ref * args.scale))
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    res = run_scenario(cfg, out_dir=args.out, workers=args.workers, cache_dir=args.cache)
    t = res.times[-1]
    for k in res.table.symbols:
        ber, lo, hi = res.at(int(k), t)
        print(f"symbol {k}: BER(t={t:g}) = {ber:.4f}  [{lo:.4f}, {hi:.4f}]  n={res.table.n[res.table.row(k)]}")
    print(f"wrote {os.path.join(args.out, cfg.name + '_ber.csv')}")
    return 0


def cmd_repro(args) -> int:
    rep = repro_figure(args.name, scale=args.scale, out_dir=args.out, workers=args.workers,
                       seed=args.seed if args.seed is not None else 1, cache_dir=args.cache)
    for text, ok in rep.claims:
        print(f"[{'PASS' if ok else 'FAIL'}] {text}")
    print(f"report: {os.path.join(args.out, args.name + '_report.json')}")
    return 0 if rep.passed else 1


def cmd_ref(args) -> int:
    cfg = _load(args)
    if cfg.references != "ssa":
        raise ConfigError("reference caching applies to Monte Carlo references only")
    refs = build_references(cfg, cache_dir=args.out)
    print(f"{refs.kind} references for {refs.K} symbols x {refs.P} voxels cached in {args.out}")
    return 0


def cmd_lna(args) -> int:
    cfg = _load(args)
    model = cfg.build_model()
    grid = time_grid(cfg.t_end, cfg.dt_ref)
    os.makedirs(args.out, exist_ok=True)
    labels = [model.slot_label(s) for s in range(model.n_slots)]
    for k in range(model.K):
        mom = z_moments_and_ber(model, k, grid, kind=cfg.reference_kind)
        path = os.path.join(args.out, f"{cfg.name}_lna_symbol{k}.csv")
        mom.to_csv(path, labels)
        if mom.ber is not None:
            print(f"symbol {k}: analytic BER(t={grid[-1]:g}) = {mom.ber[-1]:.4g}")
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxcomm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("config", help="scenario YAML file")
        sp.add_argument("--seed", type=int, default=None, help="override the base seed")
        sp.add_argument("--scale", type=float, default=1.0, help="multiply run counts")
        sp.add_argument("--out", default="voxcomm-out", help="output directory")
        sp.add_argument("--workers", type=int, default=1, help="worker processes")

    sp = sub.add_parser("run", help="empirical BER for one scenario")
    common(sp)
    sp.add_argument("--cache", default=None, help="reference-signal cache directory")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("repro", help="run a figure preset and check its claims")
    sp.add_argument("name", choices=sorted(PRESETS))
    common(sp, config=False)
    sp.add_argument("--cache", default=None, help="reference-signal cache directory")
    sp.set_defaults(func=cmd_repro)

    sp = sub.add_parser("ref", help="build the reference-signal cache for a scenario")
    common(sp)
    sp.set_defaults(func=cmd_ref)

    sp = sub.add_parser("lna", help="analytic (LNA) BER for a scenario")
    common(sp)
    sp.set_defaults(func=cmd_lna)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, KeyError, FileNotFoundError) as exc:
        print(f"voxcomm: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
