"""Command line interface.

Exit codes: 0 on success, 1 if any trajectory failed, 2 on configuration errors.
"""

import argparse
import logging
import os
import sys

from .config import ConfigError, ExperimentConfig, load_document
from .recipes import available_recipes, recipe_runs
from .runner import run_experiment

log = logging.getLogger("qmonitor")

# subcommand -> configuration it implies before the config file and flags apply
_MODES = {
    "simulate": {"estimator": {"kind": "none"}, "controller": {"kind": "constant"}},
    "filter": {"estimator": {"kind": "ekf"}, "controller": {"kind": "constant"}},
    "mmae": {"estimator": {"kind": "mmae-ekf"}, "controller": {"kind": "constant"}},
    "control": {"estimator": {"kind": "ekf"}, "controller": {"kind": "lyapunov-estimated"}},
}


def _common(parser):
    parser.add_argument("--config", help="JSON experiment configuration")
    parser.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    parser.add_argument("--realizations", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--no-trajectories", action="store_true", help="only write ensemble statistics")
    g = parser.add_argument_group("model overrides")
    g.add_argument("--gamma", type=float)
    g.add_argument("--m", type=float, dest="m_strength", metavar="M")
    g.add_argument("--eta", type=float)
    g.add_argument("--sigma-z2", type=float)
    g.add_argument("--omega-r", type=float)
    g.add_argument("--dt", type=float)
    g.add_argument("--T", type=float, dest="horizon", metavar="T")
    g = parser.add_argument_group("estimator overrides")
    g.add_argument("--estimator", choices=["none", "qf", "ekf", "mmae-qf", "mmae-ekf"])
    g.add_argument("--paper-literal-qw", action="store_true", default=None)
    g.add_argument("--paper-literal-G", action="store_true", default=None, dest="paper_literal_G")
    g.add_argument("--multipliers", type=float, nargs="+")
    g.add_argument("--cadence", type=int)
    g.add_argument("--floor", type=float)
    g = parser.add_argument_group("controller overrides")
    g.add_argument("--controller", choices=["off", "constant", "lyapunov-true-state", "lyapunov-estimated"])
    g.add_argument("--omega", type=float, help="constant drive (default 3 gamma)")
    g.add_argument("--alpha", type=float)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--omega-max", type=float)
    g.add_argument("--target", help="ground, excited or mixed:<x3>")


def build_parser():
    parser = argparse.ArgumentParser(prog="qmonitor", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "open-loop stochastic trajectories",
        "filter": "trajectories plus a single observer (QF or EKF)",
        "mmae": "trajectories plus a multiple-model estimator bank",
        "control": "closed-loop switching Lyapunov control",
    }
    for name, text in helps.items():
        _common(sub.add_parser(name, help=text))
    rp = sub.add_parser("recipe", help="run a built-in experiment")
    rp.add_argument("name", nargs="?", help="recipe name; omit to list")
    _common(rp)
    return parser


def _overrides(args):
    o = {"model": {}, "noise": {}, "estimator": {}, "controller": {}}
    pairs = [
        ("model", "gamma", args.gamma), ("model", "m", args.m_strength), ("model", "eta", args.eta),
        ("model", "sigma_z2", args.sigma_z2), ("model", "omega_r", args.omega_r),
        ("noise", "seed", args.seed), ("noise", "dt", args.dt), ("noise", "T", args.horizon),
        ("estimator", "kind", args.estimator), ("estimator", "paper_literal_qw", args.paper_literal_qw),
        ("estimator", "paper_literal_G", args.paper_literal_G), ("estimator", "multipliers", args.multipliers),
        ("estimator", "cadence", args.cadence), ("estimator", "floor", args.floor),
        ("controller", "kind", args.controller), ("controller", "omega", args.omega),
        ("controller", "alpha", args.alpha), ("controller", "epsilon", args.epsilon),
        ("controller", "omega_max", args.omega_max), ("controller", "target", args.target),
    ]
    for section, key, value in pairs:
        if value is not None:
            o[section][key] = value
    for key, value in (("realizations", args.realizations), ("workers", args.workers), ("output", args.out)):
        if value is not None:
            o[key] = value
    if args.no_trajectories:
        o["write_trajectories"] = False
    return {k: v for k, v in o.items() if v != {}}


def _configs(args):
    """Resolve ``[(output_dir, config)]``: mode/recipe defaults, then file, then flags."""
    if args.command == "recipe":
        runs = recipe_runs(args.name)
    else:
        runs = [("", ExperimentConfig().merged(_MODES[args.command]))]
    file_data = None
    if args.config:
        file_data = load_document(args.config)
    flags = _overrides(args)
    out = []
    for label, cfg in runs:
        if file_data is not None:
            cfg = cfg.merged(file_data)
        cfg = cfg.merged(flags)
        if args.out is None and args.command == "recipe":
            cfg = cfg.merged({"output": os.path.join("runs", args.name)})
        out.append((os.path.join(cfg.output, label) if label else cfg.output, cfg))
    return out


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "recipe" and not args.name:
        print("\n".join(available_recipes()))
        return 0
    try:
        runs = _configs(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    code = 0
    for out_dir, cfg in runs:
        try:
            result = run_experiment(cfg, out_dir=out_dir)
        except OSError as exc:
            print(f"cannot write output: {exc}", file=sys.stderr)
            return 2
        failed = int(result.failed.sum())
        print(f"{out_dir}: {cfg.realizations - failed}/{cfg.realizations} trajectories ok")
        code = max(code, result.exit_code)
    return code


if __name__ == "__main__":
    sys.exit(main())
