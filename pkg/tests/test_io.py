import math
import os
import xml.etree.ElementTree as ET

import pytest

from memformer import io


def test_curves_csv_round_trip(tmp_path):
    curves = [("a", [1.0, 0.5, 0.1 + 0.2], [0.0, 0.1, 0.2]), ("b c", [2.0, -1.0, -3.5], [0.0, 0.0, 1e-17])]
    p = tmp_path / "x.csv"
    io.write_curves_csv(p, curves)
    text = p.read_text()
    assert text.splitlines()[0] == "layer,curve_name,mean_log_loss,stderr"
    assert len(text.splitlines()) == 1 + 6
    back = io.read_curves_csv(p)
    assert back["a"][2] == (2, 0.1 + 0.2, 0.2)
    assert back["b c"][2][2] == 1e-17


def test_read_rejects_other_header(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        io.read_curves_csv(p)


def test_atomic_write_leaves_no_temp(tmp_path):
    p = tmp_path / "sub" / "f.txt"
    io.atomic_write_text(p, "one")
    io.atomic_write_text(p, "two")
    assert p.read_text() == "two"
    assert os.listdir(p.parent) == ["f.txt"]


def test_svg_is_valid_xml_with_legend():
    svg = io.svg_line_plot([("CGD <ref>", [1.0, 0.0, -1.0], [0.1, 0.1, 0.1]),
                            ("M", [1.0, float("nan"), -2.0], [0.0, 0.0, 0.0])], title="t & u")
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    texts = [t.text for t in root.iter() if t.tag.endswith("text")]
    assert "CGD <ref>" in texts and "t & u" in texts
    assert sum(1 for e in root.iter() if e.tag.endswith("polyline")) == 2


def test_svg_flat_curve():
    ET.fromstring(io.svg_line_plot([("flat", [0.5, 0.5], [0.0, 0.0])]))
    ET.fromstring(io.svg_line_plot([]))


def test_ticks_cover_range():
    t = io._ticks(-2.3, 1.7)
    step = t[1] - t[0]
    assert t[0] <= -2.3 and t[-1] <= 1.7 + 1e-9 and t[-1] + step > 1.7
    assert all(math.isclose(b - a, step) for a, b in zip(t, t[1:]))
