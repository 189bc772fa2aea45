"""Hand-built labeled events and scale fixtures.

The four labeled events are written as collector elem lines and go through the
same replay path as real data, so they double as end-to-end regression cases.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Optional

from bear.analysis import EventType
from bear.elems import ElemSource, read_elems
from bear.feed import DEFAULT_START, FeedConfig, generate_feed
from bear.llm import Gateway, ProviderConfig
from bear.model import AsPath, EventSpec, RouteSnapshot, SnapshotBuilder, parse_prefix
from bear.snapshots import RIB_INTERVAL, SnapshotTriple, build_triple
from bear.synth import SyntheticEvent, SyntheticEventDescription, generate_corpus

T0 = DEFAULT_START
EVENT_T = T0 + RIB_INTERVAL + 3600  # history comes from the T0 dump

# Shared vantage points: collector -> peer ASNs.
VANTAGE = {
    "rrc00": (3356, 174, 6939),
    "rrc01": (2914, 3257, 1299),
    "route-views2": (6453, 7018),
}


def _lines(text: str) -> list[str]:
    return [ln.strip() for ln in text.strip().splitlines()]


def _rib(prefix: str, paths: dict[tuple[str, int], str], ts: int = T0) -> list[str]:
    return [f"R|{ts}|{c}|{p}|{prefix}|{path}" for (c, p), path in paths.items()]


_GOOGLE = {
    ("rrc00", 3356): "3356 15169",
    ("rrc00", 174): "174 3356 15169",
    ("rrc00", 6939): "6939 15169",
    ("rrc01", 2914): "2914 15169",
    ("rrc01", 3257): "3257 3356 15169",
    ("rrc01", 1299): "1299 15169",
    ("route-views2", 6453): "6453 3356 15169",
    ("route-views2", 7018): "7018 3356 15169",
}

_CLOUDFLARE = {
    ("rrc00", 3356): "3356 13335",
    ("rrc00", 174): "174 13335",
    ("rrc00", 6939): "6939 13335",
    ("rrc01", 2914): "2914 13335",
    ("rrc01", 3257): "3257 13335",
    ("rrc01", 1299): "1299 3257 13335",
    ("route-views2", 6453): "6453 13335",
    ("route-views2", 7018): "7018 174 13335",
}


def _event(
    name: str,
    target: str,
    lines: list[str],
    truth: SyntheticEventDescription,
    affected: list[tuple[str, str, int]],
    end: Optional[int] = None,
) -> SyntheticEvent:
    source = ElemSource(read_elems(lines))
    spec = EventSpec(parse_prefix(target), EVENT_T, end, name)
    triple = build_triple(source, spec)
    keys = frozenset((parse_prefix(p), c, a) for p, c, a in affected)
    return SyntheticEvent(spec, triple, truth, keys)


def hijack_fixture() -> SyntheticEvent:
    """Origin hijack of 8.8.8.0/24 by AS398465, seen by three of eight peers."""
    t = EVENT_T
    lines = _rib("8.8.8.0/24", _GOOGLE) + _lines(f"""
        A|{t - 3000}|rrc01|2914|8.8.8.0/24|2914 3356 15169
        A|{t + 10}|rrc00|174|8.8.8.0/24|174 398465
        A|{t + 40}|rrc01|3257|8.8.8.0/24|3257 1299 398465
        A|{t + 90}|route-views2|6453|8.8.8.0/24|6453 398465
        W|{t + 120}|route-views2|7018|8.8.8.0/24|
    """)
    truth = SyntheticEventDescription(
        EventType.HIJACK, 398465, (AsPath.of(174, 398465), AsPath.of(3257, 1299, 398465)), 3 / 8
    )
    affected = [("8.8.8.0/24", "rrc00", 174), ("8.8.8.0/24", "rrc01", 3257), ("8.8.8.0/24", "route-views2", 6453)]
    return _event("fixture-hijack", "8.8.8.0/24", lines, truth, affected)


def sub_prefix_hijack_fixture() -> SyntheticEvent:
    """AS398465 announces 8.8.9.0/24 underneath the legitimate 8.8.8.0/23."""
    t = EVENT_T
    lines = _rib("8.8.8.0/23", _GOOGLE) + _lines(f"""
        A|{t + 5}|rrc00|3356|8.8.9.0/24|3356 398465
        A|{t + 20}|rrc01|1299|8.8.9.0/24|1299 398465
        A|{t + 25}|rrc00|6939|8.8.9.0/24|6939 1299 398465
        A|{t + 60}|route-views2|7018|8.8.9.0/24|7018 3356 398465
    """)
    truth = SyntheticEventDescription(
        EventType.SUB_PREFIX_HIJACK, 398465, (AsPath.of(3356, 398465),), 4 / 8, parse_prefix("8.8.9.0/24")
    )
    affected = [
        ("8.8.9.0/24", "rrc00", 3356),
        ("8.8.9.0/24", "rrc01", 1299),
        ("8.8.9.0/24", "rrc00", 6939),
        ("8.8.9.0/24", "route-views2", 7018),
    ]
    return _event("fixture-sub-prefix-hijack", "8.8.8.0/23", lines, truth, affected)


def leak_fixture() -> SyntheticEvent:
    """AS328471 re-exports 1.1.1.0/24 learned from AS3257 to its other providers.

    The event window closes after 200 s; the late revert must not be seen.
    """
    t = EVENT_T
    lines = _rib("1.1.1.0/24", _CLOUDFLARE) + _lines(f"""
        A|{t + 15}|rrc00|3356|1.1.1.0/24|3356 328471 3257 13335
        A|{t + 30}|rrc00|6939|1.1.1.0/24|6939 328471 3257 13335
        A|{t + 45}|rrc01|2914|1.1.1.0/24|2914 328471 3257 13335
        A|{t + 50}|rrc01|2914|1.1.1.0/24|2914 328471 3257 13335
        A|{t + 150}|route-views2|6453|1.1.1.0/24|6453 3356 328471 3257 13335
        A|{t + 250}|rrc00|3356|1.1.1.0/24|3356 13335
    """)
    truth = SyntheticEventDescription(EventType.ROUTE_LEAK, 328471, (AsPath.of(328471, 3257, 13335),), 4 / 8)
    affected = [
        ("1.1.1.0/24", "rrc00", 3356),
        ("1.1.1.0/24", "rrc00", 6939),
        ("1.1.1.0/24", "rrc01", 2914),
        ("1.1.1.0/24", "route-views2", 6453),
    ]
    return _event("fixture-route-leak", "1.1.1.0/24", lines, truth, affected, end=t + 200)


def sub_prefix_leak_fixture() -> SyntheticEvent:
    """A more-specific of 104.16.0.0/13 appears via leaker AS328471; the /13 itself is untouched."""
    t = EVENT_T
    lines = _rib("104.16.0.0/13", _CLOUDFLARE) + _lines(f"""
        A|{t + 12}|rrc01|1299|104.16.0.0/14|1299 328471 3356 13335
        A|{t + 33}|route-views2|7018|104.16.0.0/14|7018 328471 3356 13335
    """)
    truth = SyntheticEventDescription(
        EventType.SUB_PREFIX_ROUTE_LEAK, 328471, (AsPath.of(328471, 3356, 13335),), 2 / 8,
        parse_prefix("104.16.0.0/14"),
    )
    affected = [("104.16.0.0/14", "rrc01", 1299), ("104.16.0.0/14", "route-views2", 7018)]
    return _event("fixture-sub-prefix-route-leak", "104.16.0.0/13", lines, truth, affected)


def labeled_fixtures() -> list[SyntheticEvent]:
    return [hijack_fixture(), sub_prefix_hijack_fixture(), leak_fixture(), sub_prefix_leak_fixture()]


# -- scale fixtures ------------------------------------------------------------


def grid_triple(
    n_collectors: int = 24,
    peers_per_collector: int = 24,
    n_prefixes: int = 2,
    leaker: int = 328471,
    origin: int = 13335,
) -> SnapshotTriple:
    """A route leak seen by every peer on a collectors x peers grid, each peer ASN unique.

    With the defaults this has 576 peer segments and 24 collector segments,
    each collector segment 24 times the size of a peer segment.
    """
    base = 64512 * 10
    prefixes = [parse_prefix(f"10.{i // 256}.{i % 256}.0/24") for i in range(n_prefixes)]
    hist = SnapshotBuilder(T0)
    before = SnapshotBuilder(EVENT_T - 300)
    after = SnapshotBuilder(EVENT_T + 300)
    for c in range(n_collectors):
        collector = f"rrc{c:02d}"
        for j in range(peers_per_collector):
            peer = base + c * peers_per_collector + j
            for prefix in prefixes:
                old = AsPath.of(peer, 3356, origin)
                hist.put(prefix, collector, peer, old)
                before.put(prefix, collector, peer, old)
                after.put(prefix, collector, peer, AsPath.of(peer, leaker, 3356, origin))
    spec = EventSpec(prefixes[0], EVENT_T, None, "grid-leak")
    return SnapshotTriple(hist.freeze(), before.freeze(), after.freeze(), spec)


def oversized_fixture() -> tuple[SnapshotTriple, int]:
    """Grid event plus a token limit that only the per-peer split satisfies."""
    from bear.reasoner import split_triple, triple_tokens

    triple = grid_triple()
    per_collector = max(triple_tokens(t) for t in split_triple(triple, "collector").values())
    per_peer = max(triple_tokens(t) for t in split_triple(triple, "peer").values())
    # Budget after the 20% margin sits between the two segment sizes.
    limit = int((per_peer + per_collector) / 2 / 0.8)
    assert per_peer <= limit * 0.8 < per_collector
    return triple, limit


def both_axes_fixture() -> tuple[SnapshotTriple, int]:
    """Grid event whose limit admits either split; fewer segments (per collector) should win."""
    from bear.reasoner import split_triple, triple_tokens

    triple = grid_triple(n_collectors=6, peers_per_collector=4)
    per_collector = max(triple_tokens(t) for t in split_triple(triple, "collector").values())
    total = triple_tokens(triple)
    limit = int(per_collector / 0.8) + 1
    assert limit < total
    return triple, limit


def background_source(seed: int = 7) -> ElemSource:
    return ElemSource(generate_feed(FeedConfig(seed=seed)))


@lru_cache(maxsize=4)
def synthetic_corpus(count: int = 34, feed_seed: int = 7) -> tuple[SyntheticEvent, ...]:
    """Balanced corpus (alternating hijack and leak families) from a seeded background feed."""
    gateway = Gateway(ProviderConfig(kind="perfect-mock", seed=feed_seed))
    return tuple(generate_corpus(background_source(feed_seed), gateway, range(1, count + 1), balance=True))


def empty_snapshot(ts: int = T0) -> RouteSnapshot:
    return RouteSnapshot(ts, {})
