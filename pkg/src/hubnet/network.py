"""Layered multimodal network, OD demand table, and node-link incidence."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

NODE_KINDS = ("centroid", "ft_station", "mod_service", "hub", "dummy")
LINK_LAYERS = ("mod_service", "ft_service", "transfer", "out_of_platform", "access")
CAPACITATED_KINDS = ("mod_service", "hub")


class NetworkError(ValueError):
    """Raised by :func:`build_network` when validation fails."""

    def __init__(self, report: "ValidationReport | str"):
        if isinstance(report, str):
            report = ValidationReport((Violation("network", report),))
        self.report = report
        super().__init__("; ".join(v.message for v in report.violations))


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    z: float | None = None
    c: float | None = None
    x: float | None = None
    y: float | None = None

    @property
    def capacitated(self) -> bool:
        return self.z is not None or self.kind == "hub"


@dataclass(frozen=True)
class Link:
    id: str
    tail: str
    head: str
    d: float
    c_t: float = 0.0
    c_o: float = 0.0
    p_hat: float | None = None
    layer: str = "out_of_platform"
    priceable: bool = False


@dataclass(frozen=True)
class OD:
    o: str
    d: str
    q: float

    @property
    def label(self) -> str:
        return f"{self.o}->{self.d}"


@dataclass(frozen=True)
class DemandTable:
    entries: tuple[OD, ...]

    @property
    def q(self) -> np.ndarray:
        return np.array([e.q for e in self.entries], dtype=float)

    @property
    def q_bar(self) -> float:
        return float(self.q.mean()) if self.entries else 0.0

    @property
    def total(self) -> float:
        return float(self.q.sum())

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class Incidence:
    """Node-link incidence and the link sets used by capacity rows.

    ``counted[k]`` lists the link indices whose flow loads capacitated node
    ``capacitated[k]``: every inbound link for a hub, inbound access links
    for a MOD service node.
    """

    matrix: sp.csr_matrix
    inbound: tuple[tuple[int, ...], ...]
    outbound: tuple[tuple[int, ...], ...]
    capacitated: tuple[int, ...]
    counted: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)

    def codes(self) -> list[str]:
        return [v.code for v in self.violations]


@dataclass(frozen=True)
class Network:
    nodes: tuple[Node, ...]
    links: tuple[Link, ...]
    demand: DemandTable
    alpha: float = 0.0
    name: str = field(default="network", compare=False)

    @cached_property
    def node_index(self) -> dict[str, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    @cached_property
    def link_index(self) -> dict[str, int]:
        return {l.id: k for k, l in enumerate(self.links)}

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_od(self) -> int:
        return len(self.demand)

    @cached_property
    def incidence(self) -> Incidence:
        idx = self.node_index
        L = self.n_links
        tails = np.array([idx[l.tail] for l in self.links], dtype=int)
        heads = np.array([idx[l.head] for l in self.links], dtype=int)
        rows = np.concatenate([tails, heads])
        cols = np.concatenate([np.arange(L), np.arange(L)])
        vals = np.concatenate([-np.ones(L), np.ones(L)])
        mat = sp.csr_matrix((vals, (rows, cols)), shape=(self.n_nodes, L))
        inbound = [[] for _ in self.nodes]
        outbound = [[] for _ in self.nodes]
        for k in range(L):
            inbound[heads[k]].append(k)
            outbound[tails[k]].append(k)
        cap = tuple(i for i, n in enumerate(self.nodes) if n.capacitated)
        counted = []
        for i in cap:
            if self.nodes[i].kind == "hub":
                counted.append(tuple(inbound[i]))
            else:
                counted.append(tuple(k for k in inbound[i] if self.links[k].layer == "access"))
        return Incidence(
            matrix=mat,
            inbound=tuple(map(tuple, inbound)),
            outbound=tuple(map(tuple, outbound)),
            capacitated=cap,
            counted=tuple(counted),
        )

    @property
    def priceable(self) -> np.ndarray:
        return np.array([l.priceable for l in self.links], dtype=bool)

    @property
    def mod_links(self) -> np.ndarray:
        return np.array([l.layer == "mod_service" for l in self.links], dtype=bool)

    def link_array(self, attr: str, default: float = 0.0) -> np.ndarray:
        vals = [getattr(l, attr) for l in self.links]
        return np.array([default if v is None else v for v in vals], dtype=float)

    @property
    def p_hat(self) -> np.ndarray:
        return self.link_array("p_hat")

    def hub_of_link(self) -> dict[int, str]:
        """Map each priceable link index to the hub it feeds (head hub or none)."""
        out = {}
        for k, l in enumerate(self.links):
            if l.priceable:
                head = self.nodes[self.node_index[l.head]]
                out[k] = head.id if head.kind == "hub" else l.head
        return out

    def with_price_cap(self, cap: float) -> "Network":
        links = tuple(replace(l, p_hat=cap) if l.priceable else l for l in self.links)
        return replace(self, links=links)

    def with_node(self, node_id: str, **changes: Any) -> "Network":
        nodes = tuple(replace(n, **changes) if n.id == node_id else n for n in self.nodes)
        return replace(self, nodes=nodes)

    def with_demand(self, q: Iterable[float]) -> "Network":
        entries = tuple(replace(e, q=float(v)) for e, v in zip(self.demand.entries, q))
        return replace(self, demand=DemandTable(entries))

    def with_alpha(self, alpha: float) -> "Network":
        return replace(self, alpha=float(alpha))


def _reachable(net: Network, origin: str) -> set[str]:
    adj: dict[str, list[str]] = {}
    for l in net.links:
        adj.setdefault(l.tail, []).append(l.head)
    seen = {origin}
    todo = deque([origin])
    while todo:
        u = todo.popleft()
        for w in adj.get(u, ()):
            if w not in seen:
                seen.add(w)
                todo.append(w)
    return seen


def relevant_pairs(net: Network) -> np.ndarray:
    """Boolean ``[L, S]``: link lies on some origin-destination path of OD ``s``.

    Flows on other links are zero at any optimum with positive costs, so
    they can be fixed without changing the solution set.
    """
    fwd: dict[str, list[str]] = {}
    bwd: dict[str, list[str]] = {}
    for l in net.links:
        fwd.setdefault(l.tail, []).append(l.head)
        bwd.setdefault(l.head, []).append(l.tail)

    def reach(start: str, adj) -> set[str]:
        seen, todo = {start}, deque([start])
        while todo:
            u = todo.popleft()
            for w in adj.get(u, ()):
                if w not in seen:
                    seen.add(w)
                    todo.append(w)
        return seen

    out = np.zeros((net.n_links, net.n_od), dtype=bool)
    for s, e in enumerate(net.demand.entries):
        a, b = reach(e.o, fwd), reach(e.d, bwd)
        out[:, s] = [l.tail in a and l.head in b for l in net.links]
    return out


def validate(net: Network) -> ValidationReport:
    """List every invariant violation of ``net``."""
    out: list[Violation] = []
    ids = [n.id for n in net.nodes]
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            out.append(Violation("duplicate_node", f"duplicate node id {i!r}"))
        seen.add(i)
    lids: set[str] = set()
    for l in net.links:
        if l.id in lids:
            out.append(Violation("duplicate_link", f"duplicate link id {l.id!r}"))
        lids.add(l.id)

    for n in net.nodes:
        if n.kind not in NODE_KINDS:
            out.append(Violation("node_kind", f"node {n.id!r} has unknown kind {n.kind!r}"))
        has_z, has_c = n.z is not None, n.c is not None
        if n.kind == "hub" and not (has_z and has_c):
            out.append(Violation("missing_capacity", f"hub {n.id!r} needs both z and c"))
        elif n.kind in CAPACITATED_KINDS and has_z != has_c:
            out.append(Violation("missing_capacity", f"node {n.id!r} needs both z and c"))
        elif n.kind not in CAPACITATED_KINDS and (has_z or has_c):
            out.append(Violation("capacity_kind", f"node {n.id!r} of kind {n.kind!r} cannot carry capacity"))
        if has_z and not n.z > 0:
            out.append(Violation("nonpositive_capacity", f"node {n.id!r} has z={n.z} (must be > 0)"))
        if has_c and not n.c >= 0:
            out.append(Violation("negative_capacity_cost", f"node {n.id!r} has c={n.c} (must be >= 0)"))

    for l in net.links:
        for end in (l.tail, l.head):
            if end not in seen:
                out.append(Violation("dangling_endpoint", f"link {l.id!r} references undeclared node {end!r}"))
        if l.tail == l.head:
            out.append(Violation("self_loop", f"link {l.id!r} is a self-loop"))
        if not l.d > 0:
            out.append(Violation("nonpositive_length", f"link {l.id!r} has d={l.d}"))
        if l.c_t < 0 or l.c_o < 0:
            out.append(Violation("negative_cost", f"link {l.id!r} has a negative cost"))
        if l.layer not in LINK_LAYERS:
            out.append(Violation("link_layer", f"link {l.id!r} has unknown layer {l.layer!r}"))
        if l.priceable and not (l.p_hat is not None and l.p_hat > 0):
            out.append(Violation("price_cap", f"priceable link {l.id!r} needs p_hat > 0"))

    if not net.alpha >= 0:
        out.append(Violation("alpha", f"alpha={net.alpha} must be >= 0"))
    if len(net.demand) == 0:
        out.append(Violation("empty_demand", "demand table has no entries"))
    kinds = {n.id: n.kind for n in net.nodes}
    dangling = any(v.code == "dangling_endpoint" for v in out)
    for e in net.demand.entries:
        if not e.q >= 0:
            out.append(Violation("negative_demand", f"OD {e.label} has q={e.q}"))
        bad = [x for x in (e.o, e.d) if kinds.get(x) != "centroid"]
        if bad:
            out.append(Violation("od_endpoint", f"OD {e.label} endpoint {bad[0]!r} is not a centroid"))
            continue
        if e.o == e.d:
            out.append(Violation("od_endpoint", f"OD {e.label} has identical endpoints"))
            continue
        if not dangling and e.d not in _reachable(net, e.o):
            out.append(Violation("unreachable_od", f"OD {e.label} has no directed path"))
    return ValidationReport(tuple(out))


def build_network(spec: Mapping[str, Any] | Network) -> Network:
    """Build and validate a network from a mapping (file dialect) or a candidate."""
    net = spec if isinstance(spec, Network) else _from_mapping(spec)
    report = validate(net)
    if not report.ok:
        raise NetworkError(report)
    return net


def _opt_float(v: Any) -> float | None:
    return None if v is None else float(v)


def _from_mapping(spec: Mapping[str, Any]) -> Network:
    nodes = tuple(
        Node(
            id=str(n["id"]),
            kind=str(n.get("kind", "centroid")),
            z=_opt_float(n.get("z")),
            c=_opt_float(n.get("c")),
            x=_opt_float(n.get("x")),
            y=_opt_float(n.get("y")),
        )
        for n in spec["nodes"]
    )
    links = tuple(
        Link(
            id=str(l.get("id", f"{l['tail']}-{l['head']}")),
            tail=str(l["tail"]),
            head=str(l["head"]),
            d=float(l["d"]),
            c_t=float(l.get("c_t", 0.0)),
            c_o=float(l.get("c_o", 0.0)),
            p_hat=_opt_float(l.get("p_hat")),
            layer=str(l.get("layer", "out_of_platform")),
            priceable=bool(l.get("priceable", False)),
        )
        for l in spec["links"]
    )
    demand = DemandTable(tuple(OD(str(e["o"]), str(e["d"]), float(e["q"])) for e in spec["demand"]))
    return Network(nodes, links, demand, float(spec.get("alpha", 0.0)), str(spec.get("name", "network")))


def to_dict(net: Network) -> dict[str, Any]:
    """File-dialect mapping; absent optional fields are omitted."""
    nodes = []
    for n in net.nodes:
        item: dict[str, Any] = {"id": n.id, "kind": n.kind}
        for key in ("z", "c", "x", "y"):
            val = getattr(n, key)
            if val is not None:
                item[key] = float(val)
        nodes.append(item)
    links = []
    for l in net.links:
        item = {"id": l.id, "tail": l.tail, "head": l.head, "d": float(l.d),
                "c_t": float(l.c_t), "c_o": float(l.c_o)}
        if l.p_hat is not None:
            item["p_hat"] = float(l.p_hat)
        item["layer"] = l.layer
        item["priceable"] = l.priceable
        links.append(item)
    demand = [{"o": e.o, "d": e.d, "q": float(e.q)} for e in net.demand.entries]
    return {"name": net.name, "alpha": float(net.alpha), "nodes": nodes, "links": links, "demand": demand}


def dumps(net: Network) -> str:
    return json.dumps(to_dict(net), indent=2) + "\n"


def loads(text: str) -> Network:
    return build_network(json.loads(text))


def save(net: Network, path: str | Path) -> None:
    Path(path).write_text(dumps(net))


def load(path: str | Path) -> Network:
    return loads(Path(path).read_text())


def weak_components(net: Network) -> np.ndarray:
    """Weakly connected component label per node."""
    inc = net.incidence.matrix
    adj = (abs(inc) @ abs(inc).T).tocsr()
    _, labels = connected_components(adj, directed=False)
    return labels


def remove_hub(net: Network, hub_id: str) -> Network:
    """Drop a hub, its incident links, and nodes left without any route use.

    Nodes that can no longer lie on an origin-destination route (no inbound
    or no outbound path after removal) are pruned iteratively together with
    their links; centroids are always kept.
    """
    if hub_id not in net.node_index or net.nodes[net.node_index[hub_id]].kind != "hub":
        raise KeyError(f"{hub_id!r} is not a hub")
    nodes = {n.id: n for n in net.nodes if n.id != hub_id}
    links = [l for l in net.links if hub_id not in (l.tail, l.head)]
    while True:
        indeg = {i: 0 for i in nodes}
        outdeg = {i: 0 for i in nodes}
        for l in links:
            outdeg[l.tail] += 1
            indeg[l.head] += 1
        dead = {i for i, n in nodes.items() if n.kind != "centroid" and (indeg[i] == 0 or outdeg[i] == 0)}
        if not dead:
            break
        for i in dead:
            del nodes[i]
        links = [l for l in links if l.tail not in dead and l.head not in dead]
    keep = tuple(n for n in net.nodes if n.id in nodes)
    return build_network(replace(net, nodes=keep, links=tuple(links), name=f"{net.name}-no-{hub_id}"))


def generate_toy() -> Network:
    """The nine-node illustrative network with three OD pairs to node 0."""
    pos = {"0": (10.0, 2.0), "1": (0.0, 0.0), "2": (0.0, 2.0), "3": (0.0, 4.0),
           "A": (2.0, 0.0), "B": (2.0, 2.0), "C": (2.0, 4.0), "H": (4.5, 2.0), "S": (6.5, 2.0)}
    kinds = {"0": "centroid", "1": "centroid", "2": "centroid", "3": "centroid",
             "A": "mod_service", "B": "mod_service", "C": "mod_service", "H": "hub", "S": "ft_station"}
    nodes = []
    for i in ("0", "1", "2", "3", "A", "B", "C", "H", "S"):
        cap = {"z": 200.0, "c": 1.0} if i == "H" else {}
        nodes.append(Node(i, kinds[i], x=pos[i][0], y=pos[i][1], **cap))

    def link(t, h, d, layer, c_t=0.0, c_o=0.0, p_hat=None):
        return Link(f"{t}-{h}", t, h, float(d), float(c_t), float(c_o), p_hat, layer, p_hat is not None)

    links = [
        link("1", "0", 4, "out_of_platform", c_t=7),
        link("2", "0", 4, "out_of_platform", c_t=7),
        link("3", "0", 4, "out_of_platform", c_t=7),
        link("A", "H", 1, "mod_service", c_t=4, c_o=1, p_hat=3.0),
        link("B", "H", 2, "mod_service", c_t=4, c_o=1, p_hat=3.0),
        link("C", "H", 3, "mod_service", c_t=4, c_o=1, p_hat=3.0),
        link("1", "S", 1, "transfer", c_t=6),
        link("2", "S", 2, "transfer", c_t=6),
        link("3", "S", 3, "transfer", c_t=6),
        link("H", "S", 0.1, "transfer"),
        link("S", "0", 4, "ft_service", c_t=6),
        link("1", "A", 0.1, "access"),
        link("2", "B", 0.1, "access"),
        link("3", "C", 0.1, "access"),
    ]
    demand = DemandTable(tuple(OD(o, "0", 100.0) for o in ("1", "2", "3")))
    return build_network(Network(tuple(nodes), tuple(links), demand, 0.5, "toy"))


@dataclass(frozen=True)
class ModeParams:
    """Per-mode costs and lengths of the synthetic commuter-rail corridor."""

    mod_c_t: float = 1.00
    mod_c_o: float = 0.5
    mod_p_hat: float = 2.0
    mod_d_mean: float = 5.0
    rail_c_t: float = 0.80
    rail_d: float = 50.0
    rail_dummy_c_t: float = 0.90
    drive_c_t: float = 0.95
    drive_d: float = 60.0
    pnr_c_t: float = 1.20
    pnr_d: float = 5.0
    access_d: float = 0.1


@dataclass(frozen=True)
class SyntheticParams:
    """Layout and demand parameters of the seeded corridor generator.

    Tracts are placed around ``hubs`` stations spaced ``spacing`` apart on a
    line. ``exclusive[h]`` tracts lie only within ``radius`` of hub ``h``;
    ``shared[h]`` tracts lie within ``radius`` of both hubs ``h`` and
    ``h + 1``. Each tract links to every hub within ``radius``.
    """

    n_tracts: int = 78
    hubs: int = 3
    radius: float = 5.0
    spacing: float = 6.0
    exclusive: tuple[int, ...] = (16, 15, 12)
    shared: tuple[int, ...] = (18, 17)
    demand_mean: float = 60.0
    demand_sd: float = 20.0
    mode: ModeParams = field(default_factory=ModeParams)
    hub_z: float = 2000.0
    hub_c: float = 1.0
    node_z: float = 150.0
    node_c: float = 1.0
    alpha: float = 0.5


def _sample_tract(rng: np.random.Generator, centers: np.ndarray, want: frozenset[int], radius: float) -> np.ndarray:
    lo = centers[sorted(want)].min(axis=0) - radius
    hi = centers[sorted(want)].max(axis=0) + radius
    for _ in range(100000):
        p = rng.uniform(lo, hi)
        dist = np.hypot(*(centers - p).T)
        inside = frozenset(np.flatnonzero(dist <= radius).tolist())
        if inside == want and dist.min() > 0.5:
            return p
    raise ValueError(f"cannot place a tract covered exactly by hubs {sorted(want)}")


def generate_lirr_synthetic(params: SyntheticParams | None = None, seed: int = 0) -> Network:
    """Seeded commuter corridor: MOD feeders into rail hubs plus outside options.

    Per tract there is a centroid, a MOD service node, and a dummy tract node.
    The platform layer runs centroid, MOD node, hub, station, downtown; the
    outside layer offers park-and-ride to a dummy station and direct drive.
    """
    p = params or SyntheticParams()
    m = p.mode
    if not (p.demand_mean > 0 and p.demand_sd >= 0 and math.isfinite(p.demand_mean + p.demand_sd)):
        raise ValueError("demand_mean must be > 0 and demand_sd >= 0")
    if len(p.exclusive) != p.hubs or len(p.shared) != p.hubs - 1:
        raise ValueError("exclusive needs one count per hub and shared one per adjacent hub pair")
    if sum(p.exclusive) + sum(p.shared) != p.n_tracts:
        raise ValueError("exclusive and shared counts must add up to n_tracts")
    if p.spacing >= 2 * p.radius and any(p.shared):
        raise ValueError("shared coverage needs spacing < 2 * radius")
    rng = np.random.default_rng(seed)
    centers = np.array([[p.spacing * h, 0.0] for h in range(p.hubs)])

    cover: list[frozenset[int]] = []
    for h in range(p.hubs):
        cover += [frozenset({h})] * p.exclusive[h]
        if h < p.hubs - 1:
            cover += [frozenset({h, h + 1})] * p.shared[h]
    pts = np.array([_sample_tract(rng, centers, c, p.radius) for c in cover])
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts, cover = pts[order], [cover[i] for i in order]

    raw = np.array([np.hypot(*(centers[h] - pts[t])) for t in range(p.n_tracts) for h in sorted(cover[t])])
    circuity = m.mod_d_mean / raw.mean()

    down = np.array([p.spacing * (p.hubs - 1) / 2.0, 40.0])
    nodes = [Node("MAN", "centroid", x=float(down[0]), y=float(down[1]))]
    links: list[Link] = []
    for h in range(p.hubs):
        cx, cy = centers[h]
        nodes.append(Node(f"H{h}", "hub", z=p.hub_z, c=p.hub_c, x=float(cx), y=float(cy)))
        nodes.append(Node(f"ST{h}", "ft_station", x=float(cx), y=float(cy) + 1.0))
        nodes.append(Node(f"DS{h}", "ft_station", x=float(cx), y=float(cy) - 1.5))
        links.append(Link(f"H{h}-ST{h}", f"H{h}", f"ST{h}", m.access_d, layer="transfer"))
        links.append(Link(f"ST{h}-MAN", f"ST{h}", "MAN", m.rail_d, m.rail_c_t, layer="ft_service"))
        links.append(Link(f"DS{h}-MAN", f"DS{h}", "MAN", m.rail_d, m.rail_dummy_c_t, layer="out_of_platform"))
    demand = []
    q = np.maximum(np.rint(rng.normal(p.demand_mean, p.demand_sd, p.n_tracts)), 1.0)
    for t in range(p.n_tracts):
        tid = f"T{t:02d}"
        tx, ty = pts[t]
        nodes.append(Node(tid, "centroid", x=float(tx), y=float(ty)))
        nodes.append(Node(f"M{t:02d}", "mod_service", z=p.node_z, c=p.node_c, x=float(tx) + 0.3, y=float(ty) + 0.3))
        nodes.append(Node(f"D{t:02d}", "dummy", x=float(tx) - 0.3, y=float(ty) - 0.3))
        links.append(Link(f"{tid}-M{t:02d}", tid, f"M{t:02d}", m.access_d, layer="access"))
        links.append(Link(f"{tid}-D{t:02d}", tid, f"D{t:02d}", m.access_d, layer="access"))
        for h in sorted(cover[t]):
            d = round(float(np.hypot(*(centers[h] - pts[t]))) * circuity, 3)
            links.append(Link(f"M{t:02d}-H{h}", f"M{t:02d}", f"H{h}", d, m.mod_c_t, m.mod_c_o,
                              m.mod_p_hat, "mod_service", True))
            links.append(Link(f"D{t:02d}-DS{h}", f"D{t:02d}", f"DS{h}", m.pnr_d, m.pnr_c_t, layer="out_of_platform"))
        links.append(Link(f"D{t:02d}-MAN", f"D{t:02d}", "MAN", m.drive_d, m.drive_c_t, layer="out_of_platform"))
        demand.append(OD(tid, "MAN", float(q[t])))
    return build_network(Network(tuple(nodes), tuple(links), DemandTable(tuple(demand)), p.alpha, f"corridor-{seed}"))
