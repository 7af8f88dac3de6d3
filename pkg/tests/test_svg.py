import re
from dataclasses import replace

import numpy as np
import pytest

from hubnet.lower import lower_solve
from hubnet.network import NetworkError
from hubnet.svg import Styling, emit_svg_map


def test_toy_glyph_counts(toy):
    sol = lower_solve(toy, [0.8, 0.6, 3.0])
    svg = emit_svg_map(toy, sol.prices, sol.flows(toy).sum(axis=1))
    assert svg.count('class="link"') == 14
    assert svg.count('class="hub"') == 1
    assert 'id="legend"' in svg
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


def test_zero_flow_minimum_width(toy):
    svg = emit_svg_map(toy, None, np.zeros(toy.n_links))
    widths = re.findall(r'class="link"[^>]*stroke-width="([0-9.]+)"', svg)
    assert len(widths) == 14
    assert all(float(w) == Styling().min_stroke for w in widths)


def test_deterministic(toy):
    sol = lower_solve(toy, [0.8, 0.6, 3.0])
    a = emit_svg_map(toy, sol.prices, sol.flows(toy).sum(axis=1))
    b = emit_svg_map(toy, sol.prices, sol.flows(toy).sum(axis=1))
    assert a == b


def test_price_coloring(toy):
    low = emit_svg_map(toy, [0.0, 0.0, 0.0])
    high = emit_svg_map(toy, [3.0, 3.0, 3.0])
    st = Styling()
    assert "#%02x%02x%02x" % st.low_color in low
    assert "#%02x%02x%02x" % st.high_color in high


def test_missing_coordinates(toy):
    nodes = tuple(replace(n, x=None) if n.id == "S" else n for n in toy.nodes)
    with pytest.raises(NetworkError):
        emit_svg_map(replace(toy, nodes=nodes))
