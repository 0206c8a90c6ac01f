"""Command line entry point: ``vortexmf run|sweep|ito-check|verify``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .io import write_json


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.from_json(args.config) if args.config else harness.ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.realizations is not None:
        cfg.R = args.realizations
    if args.out is not None:
        cfg.out = args.out
    cfg.validate()
    return cfg


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def cmd_run(args) -> int:
    cfg = _config(args)
    rec = harness.run_coupled(cfg)
    for row in rec.stats:
        if "reg_F_mean" in row:
            _say(args, f"t={row['t']:.3f}  E<F>={row['reg_F_mean']:.4e} +- {row['reg_F_se']:.1e}  "
                       f"E|F|={row['abs_F_mean']:.4e}")
        else:
            _say(args, f"t={row['t']:.3f}  L2={row['L2_mean']:.6f}  Linf={row['Linf_mean']:.6f}")
    _say(args, f"excluded {rec.excluded}/{cfg.R} realizations; hash {rec.config_hash}")
    return 1 if rec.flagged_failed else 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    res = harness.sweep(cfg)
    for row in res.rows:
        N, t, reg, se, _, hs, env, adm = row
        env_s = "inadmissible" if not adm else f"{env:.3e}"
        _say(args, f"N={N:5d} t={t:.3f}  E<F>={reg:.4e} +- {se:.1e}  hs={hs:.3e}  envelope={env_s}")
    return 1 if any(r.flagged_failed for r in res.records) else 0


def cmd_ito(args) -> int:
    cfg = harness.ExperimentConfig.from_json(args.config) if args.config else None
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    R = args.realizations if args.realizations is not None else 2000
    kw = {}
    if cfg is not None:
        kw = {"noise": cfg.noise_model(), "initial": cfg.initial, "N": min(cfg.N[0], 64)}
    rep = harness.ito_residual_check(R=R, seed=seed, progress=None if args.quiet else print, **kw)
    for d, a, r, s in zip(rep.deltas, rep.raw_residuals, rep.rate_residuals, rep.stderr):
        _say(args, f"delta={d:.1e}  residual={a:.3e}  rate residual={r:.3e}  (se {s:.1e})")
    _say(args, f"observed order {rep.order:.2f} (rate residual order {rep.rate_order:.2f})")
    if args.out:
        write_json(Path(args.out) / "ito.json", rep.to_dict())
    return 0 if rep.order >= 0.5 else 1


def cmd_verify(args) -> int:
    if args.suite not in harness.SUITES:
        print(f"unknown suite {args.suite!r}; choose from {', '.join(harness.SUITES)}", file=sys.stderr)
        return 2
    rep = harness.verify(args.suite, printer=None if args.quiet else print)
    for line in rep.lines():
        if not args.quiet or line.startswith("FAIL"):
            print(line)
            if line.startswith("FAIL") and args.quiet:
                break
    return 0 if rep.passed else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--realizations", type=int, help="ensemble size R")
    common.add_argument("--quiet", action="store_true")
    p = argparse.ArgumentParser(prog="vortexmf", description="Stochastic point-vortex mean-field lab")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="coupled particle/PDE ensemble").set_defaults(func=cmd_run)
    sub.add_parser("sweep", parents=[common], help="run for every N in the config").set_defaults(func=cmd_sweep)
    sub.add_parser("ito-check", parents=[common], help="weak residual of the energy Ito equation"
                   ).set_defaults(func=cmd_ito)
    v = sub.add_parser("verify", parents=[common], help="run an invariant suite")
    v.add_argument("suite", help=", ".join(harness.SUITES))
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return args.func(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
