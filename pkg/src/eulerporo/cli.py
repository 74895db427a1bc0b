"""Command line: ``eulerporo simulate`` and ``eulerporo verify``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import scenario as sc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eulerporo", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario and write its artifacts")
    sim.add_argument("--config", required=True, help="JSON scenario file, or preset:<name>")
    sim.add_argument("--out", help="output directory (beats $%s)" % sc.OUTPUT_ENV)
    sim.add_argument("--tau", type=float, help="override the time step")
    sim.add_argument("--cells", type=int, help="override the cell count on every axis")
    sim.add_argument("--seed", type=int, help="override the noise seed")

    ver = sub.add_parser("verify", help="run a self-contained verification")
    ver.add_argument("kind", choices=sorted(sc.VERIFY_KINDS))
    ver.add_argument("--config", help="scenario for the energy check")
    ver.add_argument("--samples", type=int)
    ver.add_argument("--levels", type=int)
    ver.add_argument("--seed", type=int)
    return ap


def _load(spec: str) -> sc.ScenarioConfig:
    if spec.startswith("preset:"):
        return sc.parse_config(json.dumps(sc.preset_config(spec.split(":", 1)[1])))
    return sc.parse_config(Path(spec).read_text())


def _simulate(args) -> int:
    try:
        cfg = _load(args.config)
        changes = {}
        if args.tau is not None:
            changes.update(tau=args.tau, tau_min=min(cfg.tau_min, args.tau))
        if args.cells is not None:
            changes["n"] = (args.cells,) * cfg.d
        if args.seed is not None:
            changes["seed"] = args.seed
        if changes:
            cfg = replace(cfg, **changes)
            errs = sc.check_hypotheses(cfg)
            if errs or min(cfg.n) < 4 or not cfg.tau > 0.0:
                raise sc.ConfigError(errs or [("config", "overrides", "invalid override")])
    except sc.ConfigError as exc:
        print(exc, file=sys.stderr)
        return sc.EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return sc.EXIT_CONFIG
    res = sc.run_scenario(cfg, out_dir=args.out)
    print(json.dumps(res.summary, indent=2, default=float))
    return res.status


def _verify(args) -> int:
    opts = {"samples": args.samples, "seed": args.seed}
    if args.kind == "lemma":
        opts = {"levels": args.levels}
    elif args.kind == "energy":
        opts = {"seed": args.seed}
        if args.config:
            try:
                opts["config"] = _load(args.config)
            except (sc.ConfigError, OSError) as exc:
                print(exc, file=sys.stderr)
                return sc.EXIT_CONFIG
    elif args.kind == "hypotheses":
        opts = {"seed": args.seed, "samples": args.samples}
    report, status = sc.verify_suite(args.kind, **opts)
    print(json.dumps(report, indent=2, default=float))
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "simulate":
        return _simulate(args)
    return _verify(args)


if __name__ == "__main__":
    sys.exit(main())
