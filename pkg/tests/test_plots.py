import math
import xml.etree.ElementTree as ET

import numpy as np

from smoothattn import plots

NS = "{http://www.w3.org/2000/svg}"


def parse(text):
    return ET.fromstring(text)


class TestTrajectory:
    def test_one_dot_per_state_and_prediction(self, rng):
        states = rng.normal(size=(6, 3, 2))
        pred = rng.normal(size=(2, 3, 2))
        root = parse(plots.trajectory_svg(states, 4, pred=pred, title="t"))
        circles = root.findall(f"{NS}circle")
        assert len(circles) == 6 * 3 + 2 * 3
        hollow = [c for c in circles if c.get("fill") == "none"]
        assert len(hollow) == 6

    def test_deterministic_file(self, rng, tmp_path):
        states = rng.normal(size=(5, 2, 2))
        a = plots.trajectory_svg(states, 2, tmp_path / "a.svg")
        b = plots.trajectory_svg(states, 2, tmp_path / "b.svg")
        assert a == b == (tmp_path / "a.svg").read_text()

    def test_degenerate_extent(self):
        parse(plots.trajectory_svg(np.zeros((3, 2, 2)), 1))


class TestTimeline:
    def test_window_shading_and_series(self):
        text = plots.attention_timeline_svg({"a": [0.1, 0.5, 1.0], "b & c": [0.3, 0.3, 0.3]}, window=(1, 2))
        root = parse(text)
        shaded = [r for r in root.findall(f"{NS}rect") if r.get("fill") == "#ffd700"]
        assert len(shaded) == 1
        assert len(root.findall(f"{NS}polyline")) == 2
        assert any(t.text == "b & c" for t in root.findall(f"{NS}text"))

    def test_values_map_to_height(self):
        root = parse(plots.attention_timeline_svg({"x": [0.0, 1.0]}, height=300))
        pts = root.find(f"{NS}polyline").get("points").split()
        (x0, y0), (x1, y1) = (tuple(map(float, p.split(","))) for p in pts)
        assert y0 - y1 == 300 - 75


class TestBars:
    def test_bars_and_whiskers(self):
        groups = {"major": {"ours": (1.0, 0.1), "s_attn": (1.2, math.nan)}, "minor": {"ours": (2.0, 0.2)}}
        root = parse(plots.bar_chart_svg(groups))
        assert len(root.findall(f"{NS}rect")) == 1 + 3 + 2  # background, bars, legend
        labels = [t.text for t in root.findall(f"{NS}text")]
        assert "major" in labels and "s_attn" in labels


def test_series_csv(tmp_path):
    path = tmp_path / "s.csv"
    plots.write_series_csv(path, {"a": [0.5, 0.25], "b": [1.0]})
    assert path.read_text().splitlines() == ["step,a,b", "0,0.5,1.0", "1,0.25,"]
