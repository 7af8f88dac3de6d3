"""Configuration-driven scenario runs, reports and comparisons.

A scenario names a network source, an objective variant and solver
settings. Running it writes a report plus CSV, JSON and SVG artifacts into
its own output directory. Runtimes go to a separate ``timing.json`` so the
other artifacts are bit-identical across reruns.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .bilevel import SCHEMES, BilevelSolution, HyperParams, SubsidyScheme, solve_bilevel, value_of_hub
from .lower import LowerSolution, flows_csv, lower_solve, platform_metrics, price_vector, summary_json
from .network import (
    Network,
    build_network,
    generate_lirr_synthetic,
    generate_toy,
    load,
    remove_hub,
)
from .penalty import trace_json
from .svg import emit_svg_map

SCENARIO_VARIANTS = ("lower_only", "revenue", "flow_max")
NETWORK_KEYS = ("nodes", "links", "demand")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    """One scenario.

    ``source`` is ``builtin:toy``, ``synthetic`` or ``synthetic:<seed>``, or
    a network file path. ``inline`` holds a network mapping instead. For
    ``lower_only`` runs ``prices`` fixes the priceable links (default: caps).
    ``base_price`` and ``budget`` parametrize ``flow_max``; a scalar
    ``base_price`` applies to every priceable link.
    """

    id: str = "scenario"
    source: str | None = None
    inline: Mapping[str, Any] | None = field(default=None, repr=False)
    seed: int = 0
    variant: str = "revenue"
    prices: Any = None
    base_price: Any = None
    budget: float | None = None
    price_cap: float | None = None
    scheme: str = "per_link"
    hyper: HyperParams = field(default_factory=HyperParams)
    out: str | None = None
    remove_hub: str | None = None
    value_of_hub: str | None = None

    def __post_init__(self):
        if (self.source is None) == (self.inline is None):
            raise ScenarioError("exactly one network source is required")
        if self.variant not in SCENARIO_VARIANTS:
            raise ScenarioError(f"unknown variant {self.variant!r}")
        if self.scheme not in SCHEMES:
            raise ScenarioError(f"unknown subsidy scheme {self.scheme!r}")
        if self.variant == "flow_max" and (self.base_price is None or self.budget is None):
            raise ScenarioError("flow_max needs base_price and budget")
        if self.value_of_hub is not None and self.variant == "lower_only":
            raise ScenarioError("value_of_hub needs an optimizing variant")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], inline: Mapping[str, Any] | None = None) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known - set(NETWORK_KEYS) - {"alpha", "name"}
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {', '.join(sorted(unknown))}")
        kw = {k: v for k, v in data.items() if k in known}
        if "hyper" in kw and not isinstance(kw["hyper"], HyperParams):
            kw["hyper"] = HyperParams(**kw["hyper"])
        if all(k in data for k in NETWORK_KEYS):
            kw["inline"] = {k: data[k] for k in (*NETWORK_KEYS, "alpha", "name") if k in data}
        elif "source" not in kw and inline is not None:
            kw["inline"] = inline
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("inline", "hyper")}
        out["hyper"] = asdict(self.hyper)
        out["inline"] = self.inline is not None
        return out


def load_configs(path: str | Path) -> list[ScenarioConfig]:
    """Read one scenario or a batch from a JSON document.

    The document is either a scenario object, or carries a ``scenarios``
    array; network keys at the top level form a shared inline network.
    """
    data = json.loads(Path(path).read_text())
    shared = {k: data[k] for k in (*NETWORK_KEYS, "alpha", "name") if k in data}
    shared = shared if all(k in shared for k in NETWORK_KEYS) else None
    if "scenarios" in data:
        return [ScenarioConfig.from_dict(s, shared) for s in data["scenarios"]]
    body = {k: v for k, v in data.items() if k not in (*NETWORK_KEYS, "alpha", "name")}
    return [ScenarioConfig.from_dict(body, shared)]


TOY_SCENARIOS = {
    "benchmark": dict(variant="lower_only", prices=3.0),
    "base": dict(variant="revenue", price_cap=3.0),
    "alt": dict(variant="revenue", price_cap=2.0),
}


def toy_config(name: str, **overrides) -> ScenarioConfig:
    if name not in TOY_SCENARIOS:
        raise ScenarioError(f"unknown toy scenario {name!r}")
    fields = {"id": f"toy-{name}", "source": "builtin:toy", **TOY_SCENARIOS[name], **overrides}
    return ScenarioConfig(**fields)


def resolve_network(config: ScenarioConfig) -> Network:
    if config.inline is not None:
        net = build_network(config.inline)
    elif config.source == "builtin:toy":
        net = generate_toy()
    elif config.source == "synthetic" or config.source.startswith("synthetic:"):
        seed = int(config.source.split(":", 1)[1]) if ":" in config.source else config.seed
        net = generate_lirr_synthetic(seed=seed)
    else:
        net = load(config.source)
    if config.price_cap is not None:
        net = net.with_price_cap(float(config.price_cap))
    if config.remove_hub is not None:
        net = remove_hub(net, config.remove_hub)
    return net


def _per_link(net: Network, value) -> np.ndarray | None:
    if value is None:
        return None
    if np.isscalar(value):
        return np.where(net.priceable, float(value), 0.0)
    return price_vector(net, value)


def _round(x: float, nd: int) -> float:
    return float(round(float(x), nd)) + 0.0


@dataclass(frozen=True)
class LinkRow:
    id: str
    tail: str
    head: str
    price: float
    flow: float


@dataclass(frozen=True)
class ScenarioReport:
    """Metrics of one scenario, all taken from the closing lower solve.

    Currency is rounded to one decimal and percentages to two.
    """

    id: str
    variant: str
    scheme: str
    objective: float
    revenue: float
    subsidy: float
    share_pct: float
    platform_passengers: float
    total_demand: float
    per_hub_passengers: dict[str, float]
    capacity_pct: dict[str, float]
    runtime: float
    gap: float | None
    sum_lambda: float | None
    converged: bool
    status: str
    links: tuple[LinkRow, ...] = field(repr=False)
    hub_value: dict[str, float] | None = None

    def ok(self, tau: float) -> bool:
        """Converged within ``tau`` (lower-only runs always pass)."""
        if self.variant == "lower_only":
            return True
        return self.converged and self.gap is not None and self.gap <= tau

    def to_dict(self, with_runtime: bool = False) -> dict[str, Any]:
        d = asdict(self)
        d["links"] = [asdict(r) for r in self.links]
        if not with_runtime:
            d.pop("runtime")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScenarioReport":
        d = dict(d)
        d.setdefault("runtime", 0.0)
        d["links"] = tuple(LinkRow(**r) for r in d["links"])
        return cls(**d)


def make_report(config: ScenarioConfig, net: Network, prices, sol: LowerSolution, *, subsidies=None,
                objective=None, runtime=0.0, gap=None, sum_lambda=None, converged=True, status="optimal",
                hub_value=None) -> ScenarioReport:
    p = price_vector(net, prices)
    m = platform_metrics(net, p, sol, subsidies)
    total = net.demand.total
    pax = sol.flows(net).sum(axis=1)
    links = tuple(LinkRow(l.id, l.tail, l.head, _round(p[k], 4), _round(pax[k], 2))
                  for k, l in enumerate(net.links))
    obj = m.revenue if objective is None else objective
    return ScenarioReport(
        id=config.id,
        variant=config.variant,
        scheme=config.scheme,
        objective=_round(obj, 1),
        revenue=_round(m.revenue, 1),
        subsidy=_round(m.total_subsidy, 1),
        share_pct=_round(100.0 * m.platform_passengers / total if total > 0 else 0.0, 2),
        platform_passengers=_round(m.platform_passengers, 1),
        total_demand=_round(total, 1),
        per_hub_passengers={k: _round(v, 1) for k, v in sorted(m.per_hub_passengers.items())},
        capacity_pct={k: _round(100.0 * v, 2) for k, v in sorted(m.capacity_fraction.items())},
        runtime=float(runtime),
        gap=None if gap is None else float(gap),
        sum_lambda=None if sum_lambda is None else float(sum_lambda),
        converged=bool(converged),
        status=status,
        links=links,
        hub_value=hub_value,
    )


@dataclass(frozen=True)
class ScenarioResult:
    config: ScenarioConfig
    report: ScenarioReport
    network: Network = field(repr=False)
    prices: np.ndarray = field(repr=False)
    lower: LowerSolution = field(repr=False)
    solution: BilevelSolution | None = field(default=None, repr=False)


def _solve(config: ScenarioConfig, net: Network) -> ScenarioResult:
    t0 = time.monotonic()
    if config.variant == "lower_only":
        p = price_vector(net, None) if config.prices is None else _per_link(net, config.prices)
        sol = lower_solve(net, p)
        rep = make_report(config, net, p, sol, runtime=time.monotonic() - t0, status=sol.status)
        return ScenarioResult(config, rep, net, p, sol)
    scheme = SubsidyScheme(config.scheme)
    kw = {}
    if config.variant == "flow_max":
        kw = {"base_price": _per_link(net, config.base_price), "budget": float(config.budget)}
    hub_value = None
    if config.value_of_hub is not None:
        hv = value_of_hub(net, config.value_of_hub, config.variant, config.hyper, scheme, **kw)
        bs = hv.with_solution
        hub_value = {"with_hub": _round(hv.with_hub, 1), "without_hub": _round(hv.without_hub, 1),
                     "difference": _round(hv.difference, 1)}
    else:
        bs = solve_bilevel(net, config.variant, scheme, config.hyper, **kw)
    rep = make_report(config, net, bs.prices, bs.lower, subsidies=bs.subsidies, objective=bs.objective,
                      runtime=time.monotonic() - t0, gap=bs.gap, sum_lambda=bs.sum_lambda,
                      converged=bs.converged, status=bs.status, hub_value=hub_value)
    return ScenarioResult(config, rep, net, bs.prices, bs.lower, bs)


def write_artifacts(result: ScenarioResult, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    net, p, sol = result.network, result.prices, result.lower
    subs = None if result.solution is None else result.solution.subsidies
    (out / "report.json").write_text(result.report.to_json())
    (out / "flows.csv").write_text(flows_csv(net, p, sol))
    (out / "summary.json").write_text(summary_json(net, p, sol, subs))
    (out / "map.svg").write_text(emit_svg_map(net, p, sol.flows(net).sum(axis=1)))
    timing: dict[str, Any] = {"runtime": result.report.runtime}
    if result.solution is not None:
        timing["wall_ms"] = [r.wall_ms for r in result.solution.trace]
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    if result.solution is not None:
        (out / "prices.csv").write_text(result.solution.prices_csv())
        (out / "trace.csv").write_text(_trace_without_time(result.solution))
        (out / "inner_trace.json").write_text(trace_json(result.solution.inner_trace))
    return out


def _trace_without_time(sol: BilevelSolution) -> str:
    """Iteration trace without the wall-time column, which goes to ``timing.json``."""
    lines = sol.trace_csv().splitlines()
    return "\n".join(",".join(line.split(",")[:-1]) for line in lines) + "\n"


def run_scenario(config: ScenarioConfig, out: str | Path | None = None) -> ScenarioResult:
    """Solve ``config`` and, when an output directory is known, write its artifacts."""
    net = resolve_network(config)
    result = _solve(config, net)
    target = out if out is not None else config.out
    if target is not None:
        write_artifacts(result, target)
    return result


def _run_one(args) -> ScenarioReport:
    config, out = args
    return run_scenario(config, out).report


def default_jobs() -> int:
    env = os.environ.get("HUBNET_JOBS")
    return max(1, int(env)) if env else max(1, os.cpu_count() or 1)


def run_batch(configs: list[ScenarioConfig], out: str | Path | None = None,
              jobs: int | None = None) -> list[ScenarioReport]:
    """Run scenarios in parallel; each writes to ``out/<id>`` (or its own ``out``)."""
    ids = [c.id for c in configs]
    if len(set(ids)) != len(ids):
        raise ScenarioError("scenario ids in a batch must be unique")
    tasks = []
    for c in configs:
        target = c.out if out is None else Path(out) / c.id
        tasks.append((c, target))
    jobs = jobs or default_jobs()
    if jobs == 1 or len(tasks) == 1:
        return [_run_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as ex:
        return list(ex.map(_run_one, tasks))


def load_report(path: str | Path) -> ScenarioReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return ScenarioReport.from_dict(json.loads(path.read_text()))


@dataclass(frozen=True)
class LinkDelta:
    id: str
    price_a: float | None
    price_b: float | None
    flow_a: float | None
    flow_b: float | None

    @property
    def price_delta(self) -> float:
        return (self.price_b or 0.0) - (self.price_a or 0.0)

    @property
    def flow_delta(self) -> float:
        return (self.flow_b or 0.0) - (self.flow_a or 0.0)


@dataclass(frozen=True)
class Comparison:
    a: str
    b: str
    revenue_delta: float
    share_delta: float
    objective_delta: float
    hub_delta: dict[str, float]
    hub_delta_pct: dict[str, float | None]
    links: tuple[LinkDelta, ...]

    def to_csv(self) -> str:
        rows = ["link,price_a,price_b,price_delta,flow_a,flow_b,flow_delta"]
        for r in self.links:
            cells = [r.id, r.price_a, r.price_b, r.price_delta, r.flow_a, r.flow_b, r.flow_delta]
            rows.append(",".join("" if c is None else (c if isinstance(c, str) else f"{c:.6g}") for c in cells))
        return "\n".join(rows) + "\n"

    def summary(self) -> dict[str, Any]:
        return {"a": self.a, "b": self.b, "revenue_delta": self.revenue_delta,
                "share_delta_pp": self.share_delta, "objective_delta": self.objective_delta,
                "hub_delta": self.hub_delta, "hub_delta_pct": self.hub_delta_pct}


def compare_scenarios(a: ScenarioReport, b: ScenarioReport) -> Comparison:
    """Per-link and summary deltas ``b - a``.

    Links are matched by id. A shared id with different endpoints, or no
    shared link at all, is a topology mismatch. Links present on one side
    only (e.g. after removing a hub) count as zero price and flow on the
    other; a hub missing from ``b`` shows a -100% passenger change.
    """
    la = {r.id: r for r in a.links}
    lb = {r.id: r for r in b.links}
    common = set(la) & set(lb)
    if not common:
        raise ScenarioError("reports share no links")
    bad = sorted(i for i in common if (la[i].tail, la[i].head) != (lb[i].tail, lb[i].head))
    if bad:
        raise ScenarioError(f"topology mismatch on links: {', '.join(bad[:5])}")
    order = [r.id for r in a.links] + [r.id for r in b.links if r.id not in la]
    rows = []
    for i in order:
        ra, rb = la.get(i), lb.get(i)
        rows.append(LinkDelta(i, ra and ra.price, rb and rb.price, ra and ra.flow, rb and rb.flow))
    hubs = sorted(set(a.per_hub_passengers) | set(b.per_hub_passengers))
    hd, hp = {}, {}
    for h in hubs:
        va, vb = a.per_hub_passengers.get(h, 0.0), b.per_hub_passengers.get(h, 0.0)
        hd[h] = _round(vb - va, 1)
        hp[h] = None if va == 0 else _round(100.0 * (vb - va) / va, 2)
    return Comparison(a.id, b.id, _round(b.revenue - a.revenue, 1), _round(b.share_pct - a.share_pct, 2),
                      _round(b.objective - a.objective, 1), hd, hp, tuple(rows))


def with_overrides(config: ScenarioConfig, *, network: str | None = None, seed: int | None = None,
                   gap: float | None = None, time_limit: float | None = None,
                   out: str | None = None) -> ScenarioConfig:
    """Apply command-line overrides to a config."""
    kw: dict[str, Any] = {}
    if network is not None:
        kw.update(source=network, inline=None)
    if seed is not None:
        kw["seed"] = seed
        src = kw.get("source", config.source)
        if src is not None and src.startswith("synthetic"):
            kw["source"] = f"synthetic:{seed}"
    hyper = config.hyper
    if gap is not None:
        hyper = replace(hyper, tau=gap)
    if time_limit is not None:
        hyper = replace(hyper, time_limit=time_limit)
    kw["hyper"] = hyper
    if out is not None:
        kw["out"] = out
    return replace(config, **kw)


__all__ = [
    "Comparison",
    "LinkDelta",
    "LinkRow",
    "ScenarioConfig",
    "ScenarioError",
    "ScenarioReport",
    "ScenarioResult",
    "TOY_SCENARIOS",
    "compare_scenarios",
    "default_jobs",
    "load_configs",
    "load_report",
    "make_report",
    "resolve_network",
    "run_batch",
    "run_scenario",
    "toy_config",
    "with_overrides",
    "write_artifacts",
]
