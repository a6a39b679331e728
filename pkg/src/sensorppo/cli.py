"""Command line entry point: train, eval, mask-sim and verify-bound."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sensorppo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [("train", "train one agent per seed"),
                            ("eval", "evaluate saved checkpoints with the mean action"),
                            ("mask-sim", "simulate the sensor failure process"),
                            ("verify-bound", "check the degradation bound on the tabular chain")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="run only this seed (replaces the seeds list)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="set a config key; repeatable")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seeds=[{args.seed}]")
    if args.out is not None:
        overrides.append(f"out={args.out}")
    return cfg.with_overrides(overrides)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    from . import experiment

    try:
        cfg = load_config(args)
        seed = cfg.seeds[0]
        if args.command == "train":
            results, _ = experiment.cmd_train(cfg)
            failed = {s: r for s, r in results.items() if isinstance(r, Exception)}
            for s, exc in failed.items():
                logging.error("seed %d failed: %s", s, exc)
            return EXIT_ERROR if failed else EXIT_OK
        if args.command == "eval":
            summary, results = experiment.cmd_eval(cfg)
            failed = {s: r for s, r in results.items() if isinstance(r, Exception)}
            for s, exc in failed.items():
                logging.error("seed %d failed: %s", s, exc)
            if summary is not None:
                print(f"median {summary.median:.4f}  IQR {summary.iqr:.4f}  "
                      f"95% CI [{summary.ci_low:.4f}, {summary.ci_high:.4f}]  n={summary.n}")
            return EXIT_ERROR if failed or summary is None else EXIT_OK
        if args.command == "mask-sim":
            rep = experiment.cmd_mask_sim(cfg, seed)
            print(f"pi_x {rep['pi_x']:.6f}  empirical mean {sum(rep['empirical_pi_x']) / len(rep['empirical_pi_x']):.6f}  "
                  f"p_fail_eff {rep['p_fail_eff']:.6g}  p_recover_eff {rep['p_recover_eff']:.6g}")
            return EXIT_OK
        rep = experiment.cmd_verify_bound(cfg, seed)
        print(f"{rep.verdict}: mean S {rep.mean_S:.6g} vs bound {rep.mu_S_bound:.6g}; "
              f"exceed fraction {rep.exceed_fraction:.4f} vs {rep.exceed_threshold:.4f}; final bound {rep.final_bound:.6g}")
        return EXIT_OK if rep.verdict == "PASS" else EXIT_FAIL
    except (ConfigError, FileNotFoundError, ValueError, ArithmeticError) as exc:
        logging.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
