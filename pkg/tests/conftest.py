import numpy as np
import pytest

from hubnet.network import OD, DemandTable, Link, Network, Node, build_network, generate_lirr_synthetic, generate_toy


def random_network(seed: int, n_orig: int | None = None, n_dest: int | None = None, n_hubs: int = 1,
                   mod_nodes: bool | None = None, max_od: int = 4) -> Network:
    """Small layered network: direct, rail and MOD-feeder routes per origin.

    Every OD keeps a direct outside-option link, so all ODs are reachable.
    """
    rng = np.random.default_rng(seed)
    n_orig = n_orig or int(rng.integers(1, 4))
    n_dest = n_dest or int(rng.integers(1, 3))
    mod_nodes = bool(rng.integers(0, 2)) if mod_nodes is None else mod_nodes
    nodes, links = [], []
    origins = [f"O{i}" for i in range(n_orig)]
    dests = [f"D{j}" for j in range(n_dest)]
    for n in origins + dests:
        nodes.append(Node(n, "centroid", x=float(rng.uniform(0, 10)), y=float(rng.uniform(0, 10))))
    for h in range(n_hubs):
        nodes.append(Node(f"H{h}", "hub", z=float(rng.uniform(20, 300)), c=float(rng.uniform(0.2, 2)),
                          x=float(rng.uniform(0, 10)), y=float(rng.uniform(0, 10))))
        nodes.append(Node(f"S{h}", "ft_station", x=float(rng.uniform(0, 10)), y=float(rng.uniform(0, 10))))
        links.append(Link(f"H{h}-S{h}", f"H{h}", f"S{h}", 0.1, layer="transfer"))
        for dst in dests:
            links.append(Link(f"S{h}-{dst}", f"S{h}", dst, float(rng.uniform(2, 5)), float(rng.uniform(3, 7)),
                              layer="ft_service"))
    for o in origins:
        for dst in dests:
            links.append(Link(f"{o}-{dst}", o, dst, float(rng.uniform(3, 6)), float(rng.uniform(5, 8))))
        h = int(rng.integers(0, n_hubs))
        links.append(Link(f"{o}-S{h}", o, f"S{h}", float(rng.uniform(0.5, 3)), float(rng.uniform(4, 7)),
                          layer="transfer"))
        tail = o
        if mod_nodes:
            m = f"M{o}"
            nodes.append(Node(m, "mod_service", z=float(rng.uniform(20, 200)), c=float(rng.uniform(0, 1)),
                              x=float(rng.uniform(0, 10)), y=float(rng.uniform(0, 10))))
            links.append(Link(f"{o}-{m}", o, m, 0.1, layer="access"))
            tail = m
        links.append(Link(f"{tail}-H{h}", tail, f"H{h}", float(rng.uniform(0.5, 3)), float(rng.uniform(1, 4)),
                          float(rng.uniform(0, 1)), float(rng.uniform(1, 3)), "mod_service", True))
    pairs = [(o, dst) for o in origins for dst in dests]
    rng.shuffle(pairs)
    demand = DemandTable(tuple(OD(o, dst, float(rng.integers(10, 150))) for o, dst in pairs[:max_od]))
    return build_network(Network(tuple(nodes), tuple(links), demand, float(rng.uniform(0, 1)), f"rand-{seed}"))


def tiny_network(seed: int) -> Network:
    """One OD over a handful of links with at most one capacitated hub."""
    rng = np.random.default_rng(seed)
    nodes = [Node("O", "centroid", x=0.0, y=0.0), Node("D", "centroid", x=4.0, y=0.0),
             Node("H", "hub", z=float(rng.uniform(5, 80)), c=float(rng.uniform(0.1, 2)), x=2.0, y=1.0),
             Node("S", "ft_station", x=3.0, y=0.0)]
    links = [
        Link("O-D", "O", "D", float(rng.uniform(2, 5)), float(rng.uniform(4, 8))),
        Link("O-H", "O", "H", float(rng.uniform(0.5, 2)), float(rng.uniform(0, 3)), float(rng.uniform(0, 1)),
             float(rng.uniform(0.5, 3)), "mod_service", True),
        Link("H-S", "H", "S", 0.1, layer="transfer"),
        Link("S-D", "S", "D", float(rng.uniform(1, 4)), float(rng.uniform(2, 6)), layer="ft_service"),
    ]
    if rng.random() < 0.5:
        links.append(Link("O-S", "O", "S", float(rng.uniform(0.5, 3)), float(rng.uniform(2, 6)), layer="transfer"))
    demand = DemandTable((OD("O", "D", float(rng.integers(10, 120))),))
    return build_network(Network(tuple(nodes), tuple(links), demand, float(rng.uniform(0, 1)), f"tiny-{seed}"))


@pytest.fixture(scope="session")
def toy():
    return generate_toy()


@pytest.fixture(scope="session")
def corridor():
    return generate_lirr_synthetic(seed=0)


ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    """Store the one-line verdict printed in the terminal summary."""
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[n])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
