"""Line-delimited BGP elem records and the time-ordered source built from them.

Each line is ``type|timestamp|collector|peer_asn|prefix|as path`` where type is
``A`` (announce), ``W`` (withdraw) or ``R`` (RIB entry) and the path is empty
for withdrawals.
"""

from __future__ import annotations

import bisect
import logging
from collections import Counter
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Union

from bear.model import AsPath, BgpModelError, Prefix, check_asn, parse_prefix, prefix_sort_key

logger = logging.getLogger(__name__)


class RecordType(str, Enum):
    ANNOUNCE = "A"
    WITHDRAW = "W"
    RIB = "R"


class ElemFormatError(ValueError):
    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        super().__init__(message if line_no is None else f"line {line_no}: {message}")


@dataclass(frozen=True)
class BgpElem:
    record_type: RecordType
    timestamp: int
    collector: str
    peer: int
    prefix: Prefix
    path: Optional[AsPath] = None

    def __post_init__(self) -> None:
        if self.timestamp < 0:
            raise ElemFormatError("timestamp must be >= 0")
        check_asn(self.peer)
        if (self.path is None) != (self.record_type is RecordType.WITHDRAW):
            raise ElemFormatError(f"{self.record_type.name} elem path presence is inconsistent")
        if not self.collector or "|" in self.collector:
            raise ElemFormatError(f"bad collector name {self.collector!r}")

    @property
    def key(self) -> tuple[Prefix, str, int]:
        return (self.prefix, self.collector, self.peer)


def announce(ts: int, collector: str, peer: int, prefix: Union[str, Prefix], *hops: int) -> BgpElem:
    if isinstance(prefix, str):
        prefix = parse_prefix(prefix)
    return BgpElem(RecordType.ANNOUNCE, ts, collector, peer, prefix, AsPath(hops or (peer,)))


def withdraw(ts: int, collector: str, peer: int, prefix: Union[str, Prefix]) -> BgpElem:
    if isinstance(prefix, str):
        prefix = parse_prefix(prefix)
    return BgpElem(RecordType.WITHDRAW, ts, collector, peer, prefix)


def rib(ts: int, collector: str, peer: int, prefix: Union[str, Prefix], *hops: int) -> BgpElem:
    if isinstance(prefix, str):
        prefix = parse_prefix(prefix)
    return BgpElem(RecordType.RIB, ts, collector, peer, prefix, AsPath(hops))


def format_elem(elem: BgpElem) -> str:
    path = "" if elem.path is None else str(elem.path)
    return f"{elem.record_type.value}|{elem.timestamp}|{elem.collector}|{elem.peer}|{elem.prefix}|{path}"


def parse_elem(line: str, line_no: Optional[int] = None) -> BgpElem:
    fields = line.rstrip("\r\n").split("|")
    if len(fields) != 6:
        raise ElemFormatError(f"expected 6 fields, got {len(fields)}", line_no)
    kind, ts, collector, peer, prefix, path = fields
    try:
        record_type = RecordType(kind)
    except ValueError:
        raise ElemFormatError(f"unknown record type {kind!r}", line_no) from None
    if not ts.isdigit() or not peer.isdigit():
        raise ElemFormatError("timestamp and peer ASN must be decimal integers", line_no)
    try:
        parsed_prefix = parse_prefix(prefix)
        if record_type is RecordType.WITHDRAW:
            if path.strip():
                raise ElemFormatError("withdrawal carries an AS path", line_no)
            parsed_path = None
        else:
            parsed_path = AsPath.parse(path)
        return BgpElem(record_type, int(ts), collector, int(peer), parsed_prefix, parsed_path)
    except BgpModelError as exc:
        raise ElemFormatError(str(exc), line_no) from None


@dataclass
class IngestStats:
    lines: int = 0
    accepted: int = 0
    rejected: Counter = field(default_factory=Counter)

    @property
    def rejected_total(self) -> int:
        return sum(self.rejected.values())


def read_elems(lines: Iterable[str], stats: Optional[IngestStats] = None) -> Iterator[BgpElem]:
    """Parse elem lines, skipping and counting AS_SET paths and peer/path mismatches.

    Blank lines and ``#`` comments are ignored; other malformed lines raise.
    """
    stats = stats if stats is not None else IngestStats()
    for no, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        stats.lines += 1
        raw_path = line.rstrip("\r\n").rsplit("|", 1)[-1]
        if "{" in raw_path or "(" in raw_path:
            stats.rejected["as_set"] += 1
            logger.warning("line %d: AS_SET/confederation path skipped", no)
            continue
        elem = parse_elem(line, no)
        if elem.path is not None and elem.path.first_hop != elem.peer:
            stats.rejected["peer_mismatch"] += 1
            logger.warning("line %d: path does not start with peer AS%d; skipped", no, elem.peer)
            continue
        stats.accepted += 1
        yield elem


def load_elem_files(paths: Iterable[Union[str, Path]], stats: Optional[IngestStats] = None) -> list[BgpElem]:
    out: list[BgpElem] = []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            out.extend(read_elems(fh, stats))
    return out


def write_elems(elems: Iterable[BgpElem], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for elem in elems:
            fh.write(format_elem(elem) + "\n")


class ElemSource:
    """Timestamp-sorted elem stream with window and prefix filters.

    Sorting is stable, so elems sharing a timestamp keep their input order.
    """

    def __init__(self, elems: Iterable[BgpElem]):
        self._elems = sorted(elems, key=lambda e: e.timestamp)
        self._times = [e.timestamp for e in self._elems]

    @classmethod
    def from_files(cls, paths: Iterable[Union[str, Path]], stats: Optional[IngestStats] = None) -> ElemSource:
        return cls(load_elem_files(paths, stats))

    def __len__(self) -> int:
        return len(self._elems)

    def __iter__(self) -> Iterator[BgpElem]:
        return iter(self._elems)

    def prefixes(self) -> list[Prefix]:
        return sorted({e.prefix for e in self._elems}, key=prefix_sort_key)

    def time_range(self) -> tuple[int, int]:
        if not self._elems:
            raise ValueError("empty elem source")
        return self._times[0], self._times[-1]

    def window(
        self,
        lo: int,
        hi: int,
        prefixes: Optional[Iterable[Prefix]] = None,
        kinds: Optional[Iterable[RecordType]] = None,
    ) -> list[BgpElem]:
        """Elems with ``lo <= timestamp < hi``, optionally filtered by prefix and type."""
        start = bisect.bisect_left(self._times, lo)
        stop = bisect.bisect_left(self._times, hi)
        wanted = set(prefixes) if prefixes is not None else None
        types = set(kinds) if kinds is not None else None
        return [
            e
            for e in self._elems[start:stop]
            if (wanted is None or e.prefix in wanted) and (types is None or e.record_type in types)
        ]

    def updates(self, lo: int, hi: int, prefixes: Optional[Iterable[Prefix]] = None) -> list[BgpElem]:
        return self.window(lo, hi, prefixes, (RecordType.ANNOUNCE, RecordType.WITHDRAW))

    def ribs(self, lo: int, hi: int, prefixes: Optional[Iterable[Prefix]] = None) -> list[BgpElem]:
        return self.window(lo, hi, prefixes, (RecordType.RIB,))

    def rib_times(self) -> list[int]:
        return sorted({e.timestamp for e in self._elems if e.record_type is RecordType.RIB})
