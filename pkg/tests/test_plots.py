import re
import xml.etree.ElementTree as ET

import numpy as np
from hypothesis import given, settings, strategies as st

from sbsrl.plots import bars_svg, curves_svg

NS = "{http://www.w3.org/2000/svg}"
BUDGET = 6.0


def parse(svg):
    return ET.fromstring(svg)


def by_class(root, cls):
    return [el for el in root.iter() if cls in el.get("class", "").split()]


def path_points(el):
    return [tuple(map(float, p.split(","))) for p in re.findall(r"[ML]([-\d.]+,[-\d.]+)", el.get("d"))]


def rows_for(costs):
    return [{"seed": s, "episode": e, "j_r_true": 1.0 + e, "j_c_true": c}
            for s, seq in enumerate(costs) for e, c in enumerate(seq)]


def test_header_only():
    root = parse(curves_svg([], BUDGET))
    assert root.tag == NS + "svg"
    assert by_class(root, "axis")
    assert not by_class(root, "trace") and not by_class(root, "mean")
    assert len(by_class(root, "budget")) == 1


def test_single_row():
    root = parse(curves_svg(rows_for([[2.0]]), BUDGET))
    traces = [el for el in by_class(root, "trace") if el.tag == NS + "path"]
    assert len(traces) == 2
    assert all(len(path_points(el)) == 1 for el in traces)
    assert len(by_class(root, "point")) == 4
    assert float(by_class(root, "budget")[0].get("data-value")) == BUDGET


def test_trace_per_seed_and_mean():
    root = parse(curves_svg(rows_for([[1, 2, 3], [2, 2, 2], [0, 1, 5]]), BUDGET))
    assert len([el for el in by_class(root, "trace") if "cost" in el.get("class")]) == 3
    mean = by_class(root, "mean")
    assert len(mean) == 2
    cost_mean = [el for el in mean if "cost" in el.get("class")][0]
    assert len(path_points(cost_mean)) == 3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(0.0, BUDGET), min_size=1, max_size=12), min_size=1, max_size=5))
def test_safe_costs_lie_under_budget_rule(costs):
    root = parse(curves_svg(rows_for(costs), BUDGET))
    rule = by_class(root, "budget")[0]
    y_rule = float(rule.get("y1"))
    for el in by_class(root, "cost"):
        if el.tag != NS + "path":
            continue
        for _, y in path_points(el):
            # larger pixel y is lower on the page; 0.01 covers coordinate rounding
            assert y >= y_rule - 0.01


def test_violation_rises_above_rule():
    root = parse(curves_svg(rows_for([[1.0, 7.5]]), BUDGET))
    y_rule = float(by_class(root, "budget")[0].get("y1"))
    trace = [el for el in by_class(root, "trace") if "cost" in el.get("class")][0]
    assert min(y for _, y in path_points(trace)) < y_rule


def test_bars_values():
    groups = {"a": rows_for([[1.0, 7.0]]), "b": [dict(r, j_r_true=2 * r["j_r_true"]) for r in rows_for([[1.0, 2.0]])]}
    root = parse(bars_svg(groups, BUDGET))
    reward = {el.get("data-config"): float(el.get("data-value")) for el in by_class(root, "reward")}
    viol = {el.get("data-config"): float(el.get("data-value")) for el in by_class(root, "violation")}
    np.testing.assert_allclose([reward["a"], reward["b"]], [0.5, 1.0])
    np.testing.assert_allclose([viol["a"], viol["b"]], [1.0, 0.0])


def test_bars_empty():
    root = parse(bars_svg({}, BUDGET))
    assert not by_class(root, "bar")
