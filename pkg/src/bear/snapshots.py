"""Reconstruct the history / before / after routing snapshots around an event."""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from bear.elems import BgpElem, ElemSource, RecordType
from bear.model import (
    EventSpec,
    Prefix,
    PrefixRelation,
    RouteSnapshot,
    SnapshotBuilder,
    prefix_relation,
    prefix_sort_key,
)

logger = logging.getLogger(__name__)

RIB_INTERVAL = 8 * 3600
UPDATE_MARGIN = 300
# RIB records may trail the dump boundary by a few minutes.
RIB_SPAN = 900


class SnapshotError(ValueError):
    pass


class MissingDumpError(SnapshotError):
    pass


class WindowError(SnapshotError):
    pass


@dataclass
class ReplayStats:
    applied: int = 0
    missing_withdrawals: int = 0
    duplicate_announcements: int = 0


def history_timestamp(t: int) -> int:
    """Timestamp of the latest RIB dump at least eight hours before ``t``."""
    if t < RIB_INTERVAL:
        raise SnapshotError(f"event time {t} is earlier than one RIB interval after the epoch")
    return (t - RIB_INTERVAL) // RIB_INTERVAL * RIB_INTERVAL


def _apply(builder: SnapshotBuilder, elem: BgpElem, stats: ReplayStats) -> None:
    if elem.record_type is RecordType.ANNOUNCE:
        if builder.get(*elem.key) == elem.path:
            stats.duplicate_announcements += 1
        builder.put(*elem.key, elem.path)
    elif elem.record_type is RecordType.WITHDRAW:
        if not builder.remove(*elem.key):
            stats.missing_withdrawals += 1
            logger.debug("withdrawal for absent route %s/%s/%s", *elem.key)
    else:
        raise SnapshotError("RIB records cannot be replayed as updates")
    stats.applied += 1


def apply_elem(
    snapshot: RouteSnapshot, elem: BgpElem, stats: Optional[ReplayStats] = None
) -> RouteSnapshot:
    """Return a new snapshot with one announcement or withdrawal applied."""
    builder = SnapshotBuilder(snapshot.timestamp, snapshot)
    _apply(builder, elem, stats if stats is not None else ReplayStats())
    return builder.freeze()


def replay(
    base: RouteSnapshot,
    elems: Iterable[BgpElem],
    timestamp: int,
    lo: int,
    hi: int,
    stats: Optional[ReplayStats] = None,
) -> RouteSnapshot:
    """Apply updates with ``lo <= ts < hi`` in order; anything outside the window is an error."""
    stats = stats if stats is not None else ReplayStats()
    builder = SnapshotBuilder(timestamp, base)
    last_ts = None
    for elem in elems:
        if elem.record_type is RecordType.RIB:
            continue
        if not lo <= elem.timestamp < hi:
            raise WindowError(f"elem at {elem.timestamp} outside window [{lo}, {hi})")
        if last_ts is not None and elem.timestamp < last_ts:
            raise WindowError("elems must be in non-decreasing timestamp order")
        last_ts = elem.timestamp
        _apply(builder, elem, stats)
    return builder.freeze()


def build_history(
    source: ElemSource, prefixes: Iterable[Prefix], ts: int, rib_span: int = RIB_SPAN
) -> RouteSnapshot:
    wanted = set(prefixes)
    records = source.ribs(ts, ts + rib_span, wanted)
    if not records:
        raise MissingDumpError(f"no RIB records at {ts} for {sorted(map(str, wanted))}")
    builder = SnapshotBuilder(ts)
    for elem in records:
        builder.put(*elem.key, elem.path)
    return builder.freeze()


def before_window(history_ts: int, t: int) -> tuple[int, int]:
    return history_ts, t - UPDATE_MARGIN


def after_window(t: int, end: Optional[int] = None) -> tuple[int, int]:
    """Half-open window; an early event end caps it at ``end - 1`` inclusive."""
    if end is not None and end <= t:
        raise WindowError(f"event end {end} is not after start {t}")
    hi = t + UPDATE_MARGIN
    if end is not None:
        hi = min(hi, end)
    return t - UPDATE_MARGIN, hi


def build_before(
    history: RouteSnapshot,
    elems: Iterable[BgpElem],
    t: int,
    stats: Optional[ReplayStats] = None,
) -> RouteSnapshot:
    lo, hi = before_window(history.timestamp, t)
    return replay(history, elems, hi, lo, hi, stats)


def build_after(
    before: RouteSnapshot,
    elems: Iterable[BgpElem],
    t: int,
    end: Optional[int] = None,
    stats: Optional[ReplayStats] = None,
) -> RouteSnapshot:
    lo, hi = after_window(t, end)
    return replay(before, elems, hi, lo, hi, stats)


def collect_related_prefixes(index: Iterable[Prefix], ip: Prefix) -> set[Prefix]:
    related = {ip}
    for prefix in index:
        rel = prefix_relation(prefix, ip)
        if rel in (PrefixRelation.A_MORE_SPECIFIC, PrefixRelation.A_LESS_SPECIFIC):
            related.add(prefix)
    return related


@dataclass(frozen=True)
class SnapshotTriple:
    history: RouteSnapshot
    before: RouteSnapshot
    after: RouteSnapshot
    spec: EventSpec

    def __post_init__(self) -> None:
        if self.history.timestamp >= self.spec.start:
            raise SnapshotError("history snapshot must predate the event")

    def snapshots(self) -> dict[str, RouteSnapshot]:
        return {"history": self.history, "before": self.before, "after": self.after}

    def collectors(self) -> list[str]:
        return sorted(set(self.history.collectors()) | set(self.before.collectors()) | set(self.after.collectors()))

    def prefixes(self) -> list[Prefix]:
        ps = set(self.history.routes) | set(self.before.routes) | set(self.after.routes)
        return sorted(ps, key=prefix_sort_key)

    def restrict(self, collectors=None, peers=None, history_too: bool = True) -> SnapshotTriple:
        history = self.history.restrict(collectors, peers) if history_too else self.history
        return SnapshotTriple(
            history, self.before.restrict(collectors, peers), self.after.restrict(collectors, peers), self.spec
        )

    def save(self, directory: Union[str, Path]) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for name, snap in self.snapshots().items():
            (out / f"{name}.json").write_text(snap.to_json(), encoding="utf-8")
        (out / "event.json").write_text(json.dumps(self.spec.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: Union[str, Path], spec: Optional[EventSpec] = None) -> SnapshotTriple:
        src = Path(directory)
        snaps = {
            name: RouteSnapshot.from_json((src / f"{name}.json").read_text(encoding="utf-8"))
            for name in ("history", "before", "after")
        }
        if spec is None:
            spec = EventSpec.from_dict(json.loads((src / "event.json").read_text(encoding="utf-8")))
        return cls(snaps["history"], snaps["before"], snaps["after"], spec)


def build_triple(
    source: ElemSource,
    spec: EventSpec,
    stats: Optional[ReplayStats] = None,
    rib_span: int = RIB_SPAN,
) -> SnapshotTriple:
    """Build all three snapshots for ``spec`` from a raw elem source."""
    stats = stats if stats is not None else ReplayStats()
    related = collect_related_prefixes(source.prefixes(), spec.prefix)
    hist_ts = history_timestamp(spec.start)
    history = build_history(source, related, hist_ts, rib_span)
    lo, hi = before_window(hist_ts, spec.start)
    before = build_before(history, source.updates(lo, hi, related), spec.start, stats)
    lo, hi = after_window(spec.start, spec.end)
    after = build_after(before, source.updates(lo, hi, related), spec.start, spec.end, stats)
    return SnapshotTriple(history, before, after, spec)
