import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collabmoe import formats
from collabmoe.formats import FormatError
from collabmoe.placement import Placement, random_placement
from collabmoe.routing import RoutingOutcome
from collabmoe.traces import generate


def test_trace_round_trip_is_exact():
    r, meta = generate("zipf", 16, 4, 25, seed=3)
    text = formats.dump_trace(r, 16, model="toy", meta=meta)
    back, header = formats.read_trace(io.StringIO(text))
    assert np.array_equal(back.ids, r.ids) and back.weights.tobytes() == r.weights.tobytes()
    assert header["model"] == "toy" and header["num_tokens"] == 25
    assert formats.dump_trace(back, 16, model="toy", meta=meta) == text


def test_empty_trace_round_trip():
    text = formats.dump_trace(RoutingOutcome.empty(2), 8)
    back, _ = formats.read_trace(io.StringIO(text))
    assert back.num_tokens == 0 and back.k == 2


@pytest.mark.parametrize("body,needle", [
    ('{"ids": [0, 1], "weights": [0.5]}', "line 3"),
    ('{"ids": [0, 0], "weights": [0.5, 0.5]}', "line 3"),
    ('{"ids": [0, 9], "weights": [0.5, 0.5]}', "line 3"),
    ("not json", "line 3"),
])
def test_trace_errors_carry_line_numbers(body, needle):
    head = formats.dump_trace(RoutingOutcome(np.array([[0, 1], [2, 3]]), np.full((2, 2), 0.5)), 8)
    lines = head.splitlines()
    lines[2] = body
    with pytest.raises(FormatError, match=needle):
        formats.read_trace(io.StringIO("\n".join(lines)))


def test_trace_header_errors():
    with pytest.raises(FormatError, match="line 1"):
        formats.read_trace(io.StringIO(""))
    with pytest.raises(FormatError, match="line 1"):
        formats.read_trace(io.StringIO('{"format": "other"}\n'))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=3, max_size=3),
                min_size=1, max_size=6))
def test_float_matrix_round_trip(rows):
    m = np.array(rows)
    back = formats.read_matrix(io.StringIO(formats.dump_matrix(m)))
    assert back.tobytes() == m.tobytes()


def test_int_matrix_round_trip_and_errors():
    m = np.arange(6, dtype=np.int64).reshape(2, 3)
    back = formats.read_matrix(io.StringIO(formats.dump_matrix(m)))
    assert back.dtype == np.int64 and np.array_equal(back, m)
    with pytest.raises(FormatError, match="line 3"):
        formats.read_matrix(io.StringIO("# matrix v1 2 2 int\n1 2\n3\n"))
    with pytest.raises(FormatError, match="line 1"):
        formats.read_matrix(io.StringIO("1 2\n"))


def test_placement_round_trip():
    p = random_placement(12, 3, np.random.default_rng(1))
    assert formats.read_placement(io.StringIO(formats.dump_placement(p))) == p
    with pytest.raises(Exception):
        formats.read_placement(io.StringIO("# placement v1 4 2\n0 1\n1 2\n"))


def test_report_round_trip_keeps_section_order():
    sections = {"b": {"x": np.int64(3), "y": [np.float64(0.5)]}, "a": {"devices": Placement(((0,), (1,))).to_lists()}}
    text = formats.dump_report(sections)
    back = formats.read_report(io.StringIO(text))
    assert list(back) == ["b", "a"] and back["b"] == {"x": 3, "y": [0.5]}


def test_points_parsing():
    pts = formats.read_points(io.StringIO("# ct seconds\n1, 2\n3 4  # trailing\n\n"))
    assert pts == [(1.0, 2.0), (3.0, 4.0)]
    with pytest.raises(FormatError, match="line 2"):
        formats.read_points(io.StringIO("1 2\n3\n"))
    assert len(formats.bundled_olmoe_points()) == 5
