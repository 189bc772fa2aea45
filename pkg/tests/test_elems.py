import pytest
from hypothesis import given
from hypothesis import strategies as st

from bear.elems import (
    BgpElem,
    ElemFormatError,
    ElemSource,
    IngestStats,
    RecordType,
    announce,
    format_elem,
    load_elem_files,
    parse_elem,
    read_elems,
    rib,
    withdraw,
    write_elems,
)
from bear.model import AsPath, parse_prefix
from strategies import as_paths, collectors, prefixes

P = parse_prefix


@st.composite
def elems(draw):
    kind = draw(st.sampled_from(list(RecordType)))
    peer = draw(st.integers(1, 2**32 - 1))
    path = None if kind is RecordType.WITHDRAW else draw(as_paths(peer=peer))
    return BgpElem(kind, draw(st.integers(0, 2**33)), draw(collectors), peer, draw(prefixes), path)


def test_line_format():
    e = announce(1685005200, "rrc00", 3356, "8.8.8.0/24", 3356, 15169)
    assert format_elem(e) == "A|1685005200|rrc00|3356|8.8.8.0/24|3356 15169"
    assert format_elem(withdraw(5, "rrc00", 3356, "8.8.8.0/24")) == "W|5|rrc00|3356|8.8.8.0/24|"


@given(elems())
def test_line_round_trip(elem):
    line = format_elem(elem)
    assert parse_elem(line) == elem
    assert format_elem(parse_elem(line)) == line


@given(st.lists(elems(), max_size=20))
def test_file_round_trip_is_byte_stable(tmp_path_factory, items):
    path = tmp_path_factory.mktemp("elems") / "feed.txt"
    write_elems(items, path)
    first = path.read_bytes()
    write_elems(load_elem_files([path]), path)
    assert path.read_bytes() == first


@pytest.mark.parametrize(
    "line",
    [
        "A|1|rrc00|1|10.0.0.0/8",
        "X|1|rrc00|1|10.0.0.0/8|1 2",
        "A|t|rrc00|1|10.0.0.0/8|1 2",
        "A|1|rrc00|1|10.0.0.1/8|1 2",
        "W|1|rrc00|1|10.0.0.0/8|1 2",
        "A|1|rrc00|1|10.0.0.0/8|",
    ],
)
def test_malformed_lines(line):
    with pytest.raises(ElemFormatError):
        parse_elem(line)


def test_skips_and_counts():
    stats = IngestStats()
    lines = [
        "# comment",
        "",
        "A|1|rrc00|1|10.0.0.0/8|1 {2,3}",
        "A|1|rrc00|1|10.0.0.0/8|2 3",
        "A|1|rrc00|1|10.0.0.0/8|1 3",
    ]
    out = list(read_elems(lines, stats))
    assert [e.path for e in out] == [AsPath.of(1, 3)]
    assert stats.rejected == {"as_set": 1, "peer_mismatch": 1}
    assert stats.accepted == 1 and stats.lines == 3


def test_line_number_in_error():
    with pytest.raises(ElemFormatError) as info:
        list(read_elems(["A|1|rrc00|1|10.0.0.0/8|1", "bogus"]))
    assert info.value.line_no == 2


def test_source_windows_are_half_open_and_stable():
    a = announce(10, "rrc00", 1, "10.0.0.0/8", 1, 2)
    b = announce(10, "rrc00", 1, "10.0.0.0/8", 1, 3)
    c = rib(20, "rrc00", 1, "11.0.0.0/8", 1, 4)
    src = ElemSource([c, a, b])
    assert src.window(10, 20) == [a, b]
    assert src.updates(0, 100) == [a, b]
    assert src.ribs(0, 100) == [c]
    assert src.window(0, 100, [P("11.0.0.0/8")]) == [c]
    assert src.time_range() == (10, 20)
    assert src.rib_times() == [20]
    assert src.prefixes() == [P("10.0.0.0/8"), P("11.0.0.0/8")]
