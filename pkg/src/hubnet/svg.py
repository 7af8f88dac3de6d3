"""Static SVG network maps: link width by flow, link color by price relative to cap."""

from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .lower import price_vector
from .network import Network, NetworkError


@dataclass(frozen=True)
class Styling:
    width: int = 800
    height: int = 600
    margin: int = 40
    min_stroke: float = 1.0
    max_stroke: float = 8.0
    low_color: tuple[int, int, int] = (33, 102, 172)
    high_color: tuple[int, int, int] = (178, 24, 43)
    plain_color: tuple[int, int, int] = (150, 150, 150)
    hub_size: float = 12.0
    node_radius: float = 3.0


def _mix(a, b, t: float) -> str:
    r, g, bl = (round(a[i] + (b[i] - a[i]) * t) for i in range(3))
    return f"#{r:02x}{g:02x}{bl:02x}"


def emit_svg_map(net: Network, prices=None, link_flows=None, styling: Styling | None = None) -> str:
    """Render ``net`` with per-link ``prices`` and passenger ``link_flows``.

    Priceable links are colored from ``low_color`` (free) to ``high_color``
    (at cap); other links are gray. Output is deterministic.
    """
    st = styling or Styling()
    missing = [n.id for n in net.nodes if n.x is None or n.y is None]
    if missing:
        raise NetworkError(f"nodes without coordinates: {', '.join(missing)}")
    L = net.n_links
    flows = np.zeros(L) if link_flows is None else np.asarray(link_flows, dtype=float)
    p = price_vector(net, prices)
    xs = np.array([n.x for n in net.nodes], dtype=float)
    ys = np.array([n.y for n in net.nodes], dtype=float)
    span_x = max(xs.max() - xs.min(), 1e-9)
    span_y = max(ys.max() - ys.min(), 1e-9)
    k = min((st.width - 2 * st.margin) / span_x, (st.height - 2 * st.margin - 60) / span_y)

    def pos(i):
        return (st.margin + (xs[i] - xs.min()) * k, st.height - st.margin - (ys[i] - ys.min()) * k)

    fmax = float(flows.max(initial=0.0))
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{st.width}" height="{st.height}" '
        f'viewBox="0 0 {st.width} {st.height}">',
        '<rect width="100%" height="100%" fill="#ffffff"/>',
        '<g id="links">',
    ]
    for j, l in enumerate(net.links):
        x1, y1 = pos(net.node_index[l.tail])
        x2, y2 = pos(net.node_index[l.head])
        w = st.min_stroke
        if fmax > 0:
            w += (st.max_stroke - st.min_stroke) * flows[j] / fmax
        if l.priceable and l.p_hat:
            color = _mix(st.low_color, st.high_color, float(np.clip(p[j] / l.p_hat, 0.0, 1.0)))
        else:
            color = _mix(st.plain_color, st.plain_color, 0.0)
        out.append(
            f'<line class="link" data-id="{escape(l.id)}" x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" '
            f'y2="{y2:.2f}" stroke="{color}" stroke-width="{w:.3f}" stroke-linecap="round">'
            f"<title>{escape(l.id)} flow {flows[j]:.2f} price {p[j]:.3f}</title></line>"
        )
    out.append("</g>")
    out.append('<g id="nodes">')
    for i, n in enumerate(net.nodes):
        x, y = pos(i)
        if n.kind == "hub":
            h = st.hub_size
            out.append(f'<rect class="hub" data-id="{escape(n.id)}" x="{x - h / 2:.2f}" y="{y - h / 2:.2f}" '
                       f'width="{h:.2f}" height="{h:.2f}" fill="#222222"/>')
        else:
            out.append(f'<circle class="node" data-id="{escape(n.id)}" cx="{x:.2f}" cy="{y:.2f}" '
                       f'r="{st.node_radius:.2f}" fill="#555555"/>')
    out.append("</g>")
    ly = st.height - 20
    out += [
        '<g id="legend" font-family="sans-serif" font-size="11">',
        f'<line x1="{st.margin}" y1="{ly}" x2="{st.margin + 30}" y2="{ly}" '
        f'stroke="{_mix(st.low_color, st.low_color, 0)}" stroke-width="4"/>',
        f'<text x="{st.margin + 35}" y="{ly + 4}">price 0</text>',
        f'<line x1="{st.margin + 100}" y1="{ly}" x2="{st.margin + 130}" y2="{ly}" '
        f'stroke="{_mix(st.high_color, st.high_color, 0)}" stroke-width="4"/>',
        f'<text x="{st.margin + 135}" y="{ly + 4}">price at cap</text>',
        f'<rect x="{st.margin + 230}" y="{ly - 6}" width="12" height="12" fill="#222222"/>',
        f'<text x="{st.margin + 247}" y="{ly + 4}">hub</text>',
        f'<text x="{st.margin + 290}" y="{ly + 4}">width proportional to flow (max {fmax:.1f})</text>',
        "</g>",
        "</svg>",
    ]
    return "\n".join(out) + "\n"
