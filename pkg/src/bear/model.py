"""Core BGP vocabulary: ASNs, prefixes, AS paths, routing snapshots and events.

AS paths are stored peer-first, origin-last.  A :class:`RouteSnapshot` maps
``prefix -> collector -> peer ASN -> AsPath`` and serializes to a canonical
JSON document so that repeated builds are byte-identical.
"""

from __future__ import annotations

import ipaddress
import json
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

Prefix = Union[ipaddress.IPv4Network, ipaddress.IPv6Network]
RouteKey = tuple[Prefix, str, int]

MAX_ASN = 2**32 - 1


class BgpModelError(ValueError):
    """Invalid ASN, prefix, path or snapshot content."""


def check_asn(value: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise BgpModelError(f"ASN must be an integer, got {value!r}")
    if not 0 < value <= MAX_ASN:
        raise BgpModelError(f"ASN out of range: {value}")
    return value


def parse_asn(text: str) -> int:
    text = text.strip()
    if text[:2].upper() == "AS":
        text = text[2:]
    if not text.isdigit():
        raise BgpModelError(f"not an ASN: {text!r}")
    return check_asn(int(text))


def parse_prefix(text: str) -> Prefix:
    """Parse a CIDR string; host bits must already be zero."""
    try:
        return ipaddress.ip_network(text.strip(), strict=True)
    except ValueError as exc:
        raise BgpModelError(f"invalid prefix {text!r}: {exc}") from None


def prefix_sort_key(prefix: Prefix) -> tuple[int, int, int]:
    return (prefix.version, int(prefix.network_address), prefix.prefixlen)


class PrefixRelation(str, Enum):
    EQUAL = "equal"
    A_MORE_SPECIFIC = "a-more-specific"
    A_LESS_SPECIFIC = "a-less-specific"
    DISJOINT = "disjoint"


def prefix_relation(a: Prefix, b: Prefix) -> PrefixRelation:
    if a.version != b.version:
        return PrefixRelation.DISJOINT
    if a == b:
        return PrefixRelation.EQUAL
    if a.subnet_of(b):
        return PrefixRelation.A_MORE_SPECIFIC
    if b.subnet_of(a):
        return PrefixRelation.A_LESS_SPECIFIC
    return PrefixRelation.DISJOINT


def is_more_specific(a: Prefix, b: Prefix) -> bool:
    """True when ``a`` is strictly contained in ``b``."""
    return prefix_relation(a, b) is PrefixRelation.A_MORE_SPECIFIC


@dataclass(frozen=True)
class AsPath:
    """Ordered AS hops, announcing peer first and origin last."""

    hops: tuple[int, ...]

    def __post_init__(self) -> None:
        hops = tuple(self.hops)
        if not hops:
            raise BgpModelError("AS path must not be empty")
        for hop in hops:
            check_asn(hop)
        object.__setattr__(self, "hops", hops)

    @classmethod
    def of(cls, *hops: int) -> AsPath:
        return cls(tuple(hops))

    @classmethod
    def parse(cls, text: str) -> AsPath:
        tokens = text.split()
        for tok in tokens:
            if not tok.isdigit():
                raise BgpModelError(f"unsupported AS path segment {tok!r}")
        return cls(tuple(int(tok) for tok in tokens))

    @property
    def origin(self) -> int:
        return self.hops[-1]

    @property
    def first_hop(self) -> int:
        return self.hops[0]

    def __len__(self) -> int:
        return len(self.hops)

    def __iter__(self) -> Iterator[int]:
        return iter(self.hops)

    def __str__(self) -> str:
        return " ".join(str(h) for h in self.hops)

    def as_list(self) -> list[int]:
        return list(self.hops)


def origin_of(path: AsPath) -> int:
    return path.origin


@dataclass(frozen=True)
class PathDelta:
    changed: bool
    origin_changed: bool
    introduced_asns: frozenset[int]
    withdrawn: bool
    appeared: bool


def path_delta(old: Optional[AsPath], new: Optional[AsPath]) -> PathDelta:
    """Compare the route a peer held before with the one it holds after."""
    if old is None and new is None:
        raise BgpModelError("path_delta needs at least one path to compare")
    if old is None:
        return PathDelta(True, False, frozenset(new.hops), False, True)
    if new is None:
        return PathDelta(True, False, frozenset(), True, False)
    return PathDelta(
        changed=old.hops != new.hops,
        origin_changed=old.origin != new.origin,
        introduced_asns=frozenset(new.hops) - frozenset(old.hops),
        withdrawn=False,
        appeared=False,
    )


Routes = Mapping[Prefix, Mapping[str, Mapping[int, AsPath]]]


@dataclass(frozen=True, eq=False)
class RouteSnapshot:
    """Per-prefix routing table at one instant.

    Treat ``routes`` as read-only; derive modified snapshots through
    :class:`SnapshotBuilder`.
    """

    timestamp: int
    routes: Routes = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.timestamp < 0:
            raise BgpModelError("snapshot timestamp must be >= 0")
        for prefix, collectors in self.routes.items():
            for collector, peers in collectors.items():
                for peer, path in peers.items():
                    if path.first_hop != peer:
                        raise BgpModelError(
                            f"path {path} stored under peer {peer} at {collector} for {prefix}"
                        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RouteSnapshot):
            return NotImplemented
        return self.timestamp == other.timestamp and _strip_empty(self.routes) == _strip_empty(
            other.routes
        )

    def get(self, prefix: Prefix, collector: str, peer: int) -> Optional[AsPath]:
        return self.routes.get(prefix, {}).get(collector, {}).get(peer)

    def prefixes(self) -> list[Prefix]:
        return sorted(self.routes, key=prefix_sort_key)

    def collectors(self) -> list[str]:
        return sorted({c for by_collector in self.routes.values() for c in by_collector})

    def entries(self) -> Iterator[tuple[Prefix, str, int, AsPath]]:
        """Yield ``(prefix, collector, peer, path)`` in canonical order."""
        for prefix in self.prefixes():
            by_collector = self.routes[prefix]
            for collector in sorted(by_collector):
                peers = by_collector[collector]
                for peer in sorted(peers):
                    yield prefix, collector, peer, peers[peer]

    def keys(self) -> set[RouteKey]:
        return {(p, c, a) for p, c, a, _ in self.entries()}

    def path_count(self) -> int:
        return sum(len(peers) for cs in self.routes.values() for peers in cs.values())

    def paths_for(self, prefix: Prefix) -> list[AsPath]:
        return [path for peers in self.routes.get(prefix, {}).values() for path in peers.values()]

    def with_timestamp(self, timestamp: int) -> RouteSnapshot:
        return RouteSnapshot(timestamp, self.routes)

    def restrict(
        self,
        collectors: Optional[Iterable[str]] = None,
        peers: Optional[Iterable[int]] = None,
    ) -> RouteSnapshot:
        keep_c = set(collectors) if collectors is not None else None
        keep_p = set(peers) if peers is not None else None
        builder = SnapshotBuilder(self.timestamp)
        for prefix, collector, peer, path in self.entries():
            if keep_c is not None and collector not in keep_c:
                continue
            if keep_p is not None and peer not in keep_p:
                continue
            builder.put(prefix, collector, peer, path)
        return builder.freeze()

    def relabel(self, asn_map: Mapping[int, int], timestamp: Optional[int] = None) -> RouteSnapshot:
        builder = SnapshotBuilder(self.timestamp if timestamp is None else timestamp)
        for prefix, collector, peer, path in self.entries():
            builder.put(prefix, collector, asn_map[peer], AsPath(tuple(asn_map[h] for h in path)))
        return builder.freeze()

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        # Same content as the canonical JSON, including touched-but-empty maps.
        routes: dict[str, dict[str, dict[str, list[int]]]] = {}
        for prefix in self.prefixes():
            by_collector = self.routes[prefix]
            routes[str(prefix)] = {
                collector: {str(peer): by_collector[collector][peer].as_list() for peer in sorted(by_collector[collector])}
                for collector in sorted(by_collector)
            }
        return {"timestamp": self.timestamp, "routes": routes}

    def to_json(self) -> str:
        return dumps_snapshot(self)

    @classmethod
    def from_dict(cls, doc: Mapping) -> RouteSnapshot:
        try:
            ts = doc["timestamp"]
            raw_routes = doc["routes"]
        except (KeyError, TypeError) as exc:
            raise BgpModelError(f"snapshot document missing field: {exc}") from None
        if not isinstance(ts, int):
            raise BgpModelError("snapshot timestamp must be an integer")
        builder = SnapshotBuilder(ts)
        for prefix_text, by_collector in raw_routes.items():
            prefix = parse_prefix(prefix_text)
            builder.touch(prefix)
            for collector, by_peer in by_collector.items():
                builder.touch(prefix, collector)
                for peer_text, hops in by_peer.items():
                    builder.put(prefix, collector, parse_asn(peer_text), AsPath(tuple(hops)))
        return builder.freeze()

    @classmethod
    def from_json(cls, text: str) -> RouteSnapshot:
        return cls.from_dict(json.loads(text))


def _strip_empty(routes: Routes) -> dict:
    out = {}
    for prefix, by_collector in routes.items():
        cs = {c: dict(peers) for c, peers in by_collector.items() if peers}
        if cs:
            out[prefix] = cs
    return out


def dumps_snapshot(snapshot: RouteSnapshot) -> str:
    """Canonical snapshot JSON: fixed key order, one path per line, trailing newline."""
    lines = ["{", f'  "timestamp": {snapshot.timestamp},']
    prefixes = sorted(snapshot.routes, key=prefix_sort_key)
    if not prefixes:
        lines.append('  "routes": {}')
        lines.append("}")
        return "\n".join(lines) + "\n"
    lines.append('  "routes": {')
    for i, prefix in enumerate(prefixes):
        by_collector = snapshot.routes[prefix]
        tail = "," if i < len(prefixes) - 1 else ""
        collectors = sorted(by_collector)
        if not collectors:
            lines.append(f"    {json.dumps(str(prefix))}: {{}}{tail}")
            continue
        lines.append(f"    {json.dumps(str(prefix))}: {{")
        for j, collector in enumerate(collectors):
            peers = by_collector[collector]
            ctail = "," if j < len(collectors) - 1 else ""
            if not peers:
                lines.append(f"      {json.dumps(collector)}: {{}}{ctail}")
                continue
            lines.append(f"      {json.dumps(collector)}: {{")
            ordered = sorted(peers)
            for k, peer in enumerate(ordered):
                ptail = "," if k < len(ordered) - 1 else ""
                hops = ", ".join(str(h) for h in peers[peer].hops)
                lines.append(f'        "{peer}": [{hops}]{ptail}')
            lines.append(f"      }}{ctail}")
        lines.append(f"    }}{tail}")
    lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


class SnapshotBuilder:
    """Mutable accumulator used while replaying elems; ``freeze`` hands out a snapshot."""

    def __init__(self, timestamp: int, base: Optional[RouteSnapshot] = None):
        self.timestamp = timestamp
        self._routes: dict[Prefix, dict[str, dict[int, AsPath]]] = {}
        if base is not None:
            for prefix, by_collector in base.routes.items():
                self._routes[prefix] = {c: dict(peers) for c, peers in by_collector.items()}

    def touch(self, prefix: Prefix, collector: Optional[str] = None) -> None:
        by_collector = self._routes.setdefault(prefix, {})
        if collector is not None:
            by_collector.setdefault(collector, {})

    def get(self, prefix: Prefix, collector: str, peer: int) -> Optional[AsPath]:
        return self._routes.get(prefix, {}).get(collector, {}).get(peer)

    def put(self, prefix: Prefix, collector: str, peer: int, path: AsPath) -> None:
        if path.first_hop != peer:
            raise BgpModelError(f"path {path} does not start with peer {peer}")
        self._routes.setdefault(prefix, {}).setdefault(collector, {})[peer] = path

    def remove(self, prefix: Prefix, collector: str, peer: int) -> bool:
        peers = self._routes.get(prefix, {}).get(collector)
        if peers is None or peer not in peers:
            return False
        del peers[peer]
        return True

    def freeze(self) -> RouteSnapshot:
        routes = {p: {c: dict(peers) for c, peers in cs.items()} for p, cs in self._routes.items()}
        return RouteSnapshot(self.timestamp, routes)


@dataclass(frozen=True)
class EventSpec:
    """A detected anomaly: target prefix plus start (and optional end) time."""

    prefix: Prefix
    start: int
    end: Optional[int] = None
    name: Optional[str] = None

    def __post_init__(self) -> None:
        if self.start < 0:
            raise BgpModelError("event start must be >= 0")
        if self.end is not None and self.end <= self.start:
            raise BgpModelError(f"event end {self.end} must be after start {self.start}")

    def to_dict(self) -> dict:
        return {"prefix": str(self.prefix), "start": self.start, "end": self.end, "name": self.name}

    @classmethod
    def from_dict(cls, doc: Mapping) -> EventSpec:
        return cls(
            prefix=parse_prefix(doc["prefix"]),
            start=int(doc["start"]),
            end=None if doc.get("end") is None else int(doc["end"]),
            name=doc.get("name"),
        )
