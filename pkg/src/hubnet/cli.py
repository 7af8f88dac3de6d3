"""Command line: ``hubnet run|toy|oracle|compare``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .oracle import grid_oracle
from .scenarios import (
    ScenarioConfig,
    compare_scenarios,
    load_configs,
    load_report,
    resolve_network,
    run_batch,
    toy_config,
    with_overrides,
)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--network", help="network file replacing the configured source")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="seed for synthetic networks")
    p.add_argument("--jobs", type=int, help="parallel scenarios (default HUBNET_JOBS or cores)")
    p.add_argument("--gap", type=float, help="optimality gap target")
    p.add_argument("--time-limit", type=float, help="seconds per penalized solve")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hubnet", description="Mobility hub platform pricing")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the scenario(s) of a config file")
    run.add_argument("--config", required=True)
    _common(run)

    toy = sub.add_parser("toy", help="run a built-in toy scenario")
    toy.add_argument("--scenario", choices=("benchmark", "base", "alt"), default="base")
    _common(toy)

    orc = sub.add_parser("oracle", help="grid search the upper level of a small scenario")
    orc.add_argument("--config", required=True)
    orc.add_argument("--step", type=float, default=0.1)
    orc.add_argument("--rounds", type=int, default=3)
    _common(orc)

    cmp_ = sub.add_parser("compare", help="difference of two scenario reports")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.add_argument("--out", help="write comparison.csv and comparison.json here")
    return parser


def _overrides(args) -> dict:
    return dict(network=args.network, seed=args.seed, gap=args.gap, time_limit=args.time_limit)


def _print_report(rep) -> None:
    line = (f"{rep.id}: objective {rep.objective:.1f} revenue {rep.revenue:.1f} "
            f"share {rep.share_pct:.2f}% ({rep.platform_passengers:.1f} pax)")
    if rep.variant != "lower_only":
        line += f" gap {rep.gap:.3g} sum_lambda {rep.sum_lambda:.3g} {rep.status}"
    print(line)


def _run(configs: list[ScenarioConfig], args) -> int:
    out = args.out
    if out is not None and len(configs) == 1:
        configs = [with_overrides(configs[0], out=out)]
        out = None
    reports = run_batch(configs, out, args.jobs)
    for rep in reports:
        _print_report(rep)
    ok = all(rep.ok(c.hyper.tau) for rep, c in zip(reports, configs))
    return 0 if ok else 1


def _oracle(args) -> int:
    config = with_overrides(load_configs(args.config)[0], **_overrides(args))
    if config.variant == "lower_only":
        print("oracle needs an optimizing variant", file=sys.stderr)
        return 2
    net = resolve_network(config)
    kw = {}
    if config.variant == "flow_max":
        base = config.base_price
        kw = {"base_price": np.where(net.priceable, float(base), 0.0) if np.isscalar(base) else base,
              "budget": float(config.budget)}
    res = grid_oracle(net, config.variant, scheme=config.scheme, step=args.step, rounds=args.rounds, **kw)
    print(f"{config.id}: best {np.array2string(res.best, precision=4)} objective {res.objective:.4f} "
          f"({res.evaluations} evaluations)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle.csv").write_text(res.to_csv())
        (out / "oracle.json").write_text(json.dumps(
            {"best": res.best.tolist(), "objective": res.objective, "evaluations": res.evaluations},
            indent=2) + "\n")
    return 0


def _compare(args) -> int:
    cmp_ = compare_scenarios(load_report(args.a), load_report(args.b))
    s = cmp_.summary()
    print(f"revenue delta {s['revenue_delta']:+.1f}  share delta {s['share_delta_pp']:+.2f} pp")
    for h, v in s["hub_delta"].items():
        pct = s["hub_delta_pct"][h]
        print(f"  hub {h}: {v:+.1f} pax" + ("" if pct is None else f" ({pct:+.2f}%)"))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(cmp_.to_csv())
        (out / "comparison.json").write_text(json.dumps(s, indent=2, sort_keys=True) + "\n")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "compare":
        return _compare(args)
    if args.command == "oracle":
        return _oracle(args)
    if args.command == "toy":
        configs = [toy_config(args.scenario)]
    else:
        configs = load_configs(args.config)
    configs = [with_overrides(c, **_overrides(args)) for c in configs]
    return _run(configs, args)


if __name__ == "__main__":
    sys.exit(main())
