"""Deterministic change analysis over a snapshot triple.

This is the rule-based counterpart of the language-model reasoning: it answers
the per-peer change questions, labels the event and names the offending AS.
Mock providers and the tests use it as ground truth.
"""

from __future__ import annotations

from collections import Counter
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from bear.model import (
    AsPath,
    PathDelta,
    Prefix,
    RouteKey,
    is_more_specific,
    parse_prefix,
    path_delta,
    prefix_sort_key,
)
from bear.snapshots import SnapshotTriple

RULESET_VERSION = "1"


class AnalysisError(ValueError):
    pass


class EventType(str, Enum):
    HIJACK = "hijack"
    SUB_PREFIX_HIJACK = "sub-prefix hijack"
    ROUTE_LEAK = "route leak"
    SUB_PREFIX_ROUTE_LEAK = "sub-prefix route leak"
    NO_ANOMALY = "no anomaly observed"

    @property
    def is_hijack(self) -> bool:
        return self in (EventType.HIJACK, EventType.SUB_PREFIX_HIJACK)

    @property
    def is_leak(self) -> bool:
        return self in (EventType.ROUTE_LEAK, EventType.SUB_PREFIX_ROUTE_LEAK)

    @property
    def is_sub_prefix(self) -> bool:
        return self in (EventType.SUB_PREFIX_HIJACK, EventType.SUB_PREFIX_ROUTE_LEAK)


ANOMALY_TYPES = (
    EventType.HIJACK,
    EventType.SUB_PREFIX_HIJACK,
    EventType.ROUTE_LEAK,
    EventType.SUB_PREFIX_ROUTE_LEAK,
)


@dataclass(frozen=True)
class ChangeFact:
    prefix: Prefix
    collector: str
    peer: int
    delta: PathDelta
    is_sub_prefix: bool
    before_path: Optional[AsPath] = None
    after_path: Optional[AsPath] = None
    # Same peer's route to the target prefix after the event, compared with a sub-prefix route.
    target_path: Optional[AsPath] = None
    target_delta: Optional[PathDelta] = None

    @property
    def key(self) -> RouteKey:
        return (self.prefix, self.collector, self.peer)

    @property
    def peer_key(self) -> tuple[str, int]:
        return (self.collector, self.peer)


@dataclass(frozen=True)
class AnalysisFacts:
    target: Prefix
    facts: tuple[ChangeFact, ...]
    historical_origins: Mapping[Prefix, frozenset[int]]
    historical_asns: Mapping[Prefix, frozenset[int]]
    historical_suffixes: Mapping[Prefix, frozenset[tuple[int, ...]]] = field(repr=False)
    affected_peer_count: int = 0
    total_peer_count: int = 0
    # Peer paths per prefix in before or after, kept when facts are compacted.
    fact_counts: Mapping[Prefix, int] = field(default_factory=dict)
    _refs: dict = field(default_factory=dict, compare=False, repr=False)

    def reference_prefix(self, prefix: Prefix) -> Prefix:
        """Prefix whose history judges ``prefix``: itself, else its closest covering prefix with history."""
        ref = self._refs.get(prefix)
        if ref is None:
            if self.historical_origins.get(prefix):
                ref = prefix
            else:
                covering = [
                    p for p, v in self.historical_origins.items() if v and is_more_specific(prefix, p)
                ]
                ref = max(covering, key=lambda p: p.prefixlen) if covering else self.target
            self._refs[prefix] = ref
        return ref

    def reference_origins(self, prefix: Prefix) -> frozenset[int]:
        return self.historical_origins.get(self.reference_prefix(prefix), frozenset())

    def reference_asns(self, prefix: Prefix) -> frozenset[int]:
        return self.historical_asns.get(self.reference_prefix(prefix), frozenset())

    def changed(self) -> list[ChangeFact]:
        return [f for f in self.facts if f.delta.changed]

    def hijack_facts(self) -> list[ChangeFact]:
        return [f for f in self.facts if _is_hijack_evidence(self, f)]

    def leak_facts(self) -> list[ChangeFact]:
        return [f for f in self.facts if _is_leak_evidence(self, f)]

    def evidence_facts(self) -> list[ChangeFact]:
        found = self._refs.get("__evidence__")
        if found is None:
            found = self._refs["__evidence__"] = [
                f for f in self.facts if _is_hijack_evidence(self, f) or _is_leak_evidence(self, f)
            ]
        return list(found)

    def affected_keys(self) -> set[RouteKey]:
        return {f.key for f in self.evidence_facts()}

    def affected_collectors(self) -> set[str]:
        return {f.collector for f in self.evidence_facts()}


def _is_new_route(fact: ChangeFact) -> bool:
    return fact.delta.changed and fact.after_path is not None


def _is_hijack_evidence(facts: AnalysisFacts, fact: ChangeFact) -> bool:
    if not _is_new_route(fact):
        return False
    origins = facts.reference_origins(fact.prefix)
    return bool(origins) and fact.after_path.origin not in origins


def _novel_hops(facts: AnalysisFacts, fact: ChangeFact) -> list[int]:
    known = facts.reference_asns(fact.prefix)
    return [h for h in fact.after_path.hops if h not in known]


def _is_leak_evidence(facts: AnalysisFacts, fact: ChangeFact) -> bool:
    if not _is_new_route(fact) or _is_hijack_evidence(facts, fact):
        return False
    if fact.after_path.origin not in facts.reference_origins(fact.prefix):
        return False
    return bool(_novel_hops(facts, fact))


def _peer_keys(snapshot, prefix) -> set[tuple[str, int]]:
    return {(c, p) for c, peers in snapshot.routes.get(prefix, {}).items() for p in peers}


def analyze_changes(triple: SnapshotTriple) -> AnalysisFacts:
    target = triple.spec.prefix
    before, after = triple.before, triple.after
    if before.path_count() == 0 and after.path_count() == 0:
        raise AnalysisError("no routes in the before or after snapshot")

    origins: dict[Prefix, set[int]] = {}
    asns: dict[Prefix, set[int]] = {}
    suffixes: dict[Prefix, set[tuple[int, ...]]] = {}
    for snap in (triple.history, before):
        for prefix, _c, _p, path in snap.entries():
            origins.setdefault(prefix, set()).add(path.origin)
            asns.setdefault(prefix, set()).update(path.hops)
            sfx = suffixes.setdefault(prefix, set())
            for i in range(len(path.hops)):
                sfx.add(path.hops[i:])

    facts: list[ChangeFact] = []
    prefixes = sorted(set(before.routes) | set(after.routes), key=prefix_sort_key)
    for prefix in prefixes:
        sub = is_more_specific(prefix, target)
        keys = _peer_keys(before, prefix) | _peer_keys(after, prefix)
        for collector, peer in sorted(keys):
            old = before.get(prefix, collector, peer)
            new = after.get(prefix, collector, peer)
            target_path = target_delta = None
            if sub and new is not None:
                target_path = after.get(target, collector, peer) or before.get(target, collector, peer)
                if target_path is not None:
                    target_delta = path_delta(target_path, new)
            facts.append(
                ChangeFact(prefix, collector, peer, path_delta(old, new), sub, old, new, target_path, target_delta)
            )

    partial = AnalysisFacts(
        target=target,
        facts=tuple(facts),
        historical_origins={p: frozenset(v) for p, v in origins.items()},
        historical_asns={p: frozenset(v) for p, v in asns.items()},
        historical_suffixes={p: frozenset(v) for p, v in suffixes.items()},
    )
    affected = {f.peer_key for f in partial.evidence_facts()}
    total = _peer_keys(before, target) | _peer_keys(after, target) | affected
    return AnalysisFacts(
        target=partial.target,
        facts=partial.facts,
        historical_origins=partial.historical_origins,
        historical_asns=partial.historical_asns,
        historical_suffixes=partial.historical_suffixes,
        affected_peer_count=len(affected),
        total_peer_count=len(total),
        fact_counts=dict(Counter(f.prefix for f in facts)),
    )


def compact_facts(facts: AnalysisFacts) -> AnalysisFacts:
    """Drop unchanged facts and history irrelevant to them.

    Classification, offender identification, detection rate and rendering give
    the same results on the compact form, which keeps prompts small.
    """
    changed = tuple(f for f in facts.facts if f.delta.changed)
    hops: set[int] = set()
    tails: set[tuple[int, ...]] = set()
    for f in changed:
        if f.after_path is not None:
            hops.update(f.after_path.hops)
            tails.update(f.after_path.hops[i:] for i in range(len(f.after_path.hops)))
    return AnalysisFacts(
        target=facts.target,
        facts=changed,
        historical_origins=facts.historical_origins,
        historical_asns={p: v & hops for p, v in facts.historical_asns.items()},
        historical_suffixes={p: v & tails for p, v in facts.historical_suffixes.items()},
        affected_peer_count=facts.affected_peer_count,
        total_peer_count=facts.total_peer_count,
        fact_counts=facts.fact_counts,
    )


def _target_quiet(facts: AnalysisFacts) -> bool:
    return not any(f.prefix == facts.target for f in facts.evidence_facts())


def classify(facts: AnalysisFacts) -> EventType:
    hijacks = facts.hijack_facts()
    if hijacks:
        if all(f.is_sub_prefix for f in hijacks) and _target_quiet(facts):
            return EventType.SUB_PREFIX_HIJACK
        return EventType.HIJACK
    leaks = facts.leak_facts()
    if leaks:
        if all(f.is_sub_prefix for f in leaks) and _target_quiet(facts):
            return EventType.SUB_PREFIX_ROUTE_LEAK
        return EventType.ROUTE_LEAK
    return EventType.NO_ANOMALY


def _plurality(values: Iterable[int]) -> int:
    counts = Counter(values)
    best = max(counts.values())
    return min(v for v, n in counts.items() if n == best)


def leaker_of(facts: AnalysisFacts, fact: ChangeFact) -> Optional[int]:
    """Novel hop closest to the origin whose origin-side remainder was already routed."""
    known = facts.reference_asns(fact.prefix)
    seen = facts.historical_suffixes.get(facts.reference_prefix(fact.prefix), frozenset())
    hops = fact.after_path.hops
    novel = [i for i, h in enumerate(hops) if h not in known]
    if not novel:
        return None
    for i in reversed(novel):
        if hops[i + 1 :] in seen:
            return hops[i]
    return hops[novel[-1]]


def identify_offender(facts: AnalysisFacts, event_type: EventType) -> int:
    if event_type is EventType.NO_ANOMALY:
        raise AnalysisError("no offender for an event without anomaly")
    if event_type.is_hijack:
        relevant = facts.hijack_facts()
        if event_type is EventType.SUB_PREFIX_HIJACK:
            relevant = [f for f in relevant if f.is_sub_prefix]
        if not relevant:
            raise AnalysisError(f"classification {event_type.value} has no supporting facts")
        return _plurality(f.after_path.origin for f in relevant)
    relevant = facts.leak_facts()
    if event_type is EventType.SUB_PREFIX_ROUTE_LEAK:
        relevant = [f for f in relevant if f.is_sub_prefix]
    leakers = [a for a in (leaker_of(facts, f) for f in relevant) if a is not None]
    if not leakers:
        raise AnalysisError(f"classification {event_type.value} has no supporting facts")
    return _plurality(leakers)


def detection_rate(facts: AnalysisFacts) -> float:
    if facts.total_peer_count <= 0:
        raise AnalysisError("no peers observed")
    return facts.affected_peer_count / facts.total_peer_count


def triggering_sub_prefix(facts: AnalysisFacts, event_type: EventType) -> Optional[Prefix]:
    if not event_type.is_sub_prefix:
        return None
    pool = facts.hijack_facts() if event_type.is_hijack else facts.leak_facts()
    subs = Counter(f.prefix for f in pool if f.is_sub_prefix)
    if not subs:
        return None
    best = max(subs.values())
    return min((p for p, n in subs.items() if n == best), key=prefix_sort_key)


# -- text rendering ------------------------------------------------------


def _fmt(path: Optional[AsPath]) -> str:
    return "none" if path is None else "[" + ", ".join(str(h) for h in path.hops) + "]"


def _describe_fact(facts: AnalysisFacts, f: ChangeFact) -> str:
    who = f"Peer AS{f.peer} at {f.collector}"
    if f.delta.withdrawn:
        return f"{who}: route {_fmt(f.before_path)} was withdrawn."
    if f.delta.appeared and f.is_sub_prefix:
        line = f"{who}: new sub-prefix {f.prefix} announced via {_fmt(f.after_path)} with destination AS{f.after_path.origin}."
        if f.target_path is None:
            line += f" The peer has no route to the target prefix {facts.target} to compare with."
        elif not f.target_delta.changed:
            line += f" It is identical to the peer's path to {facts.target}."
        else:
            line += f" Compared with the peer's path {_fmt(f.target_path)} to {facts.target}, it differs"
            if f.target_delta.origin_changed:
                line += f" and the destination changed from AS{f.target_path.origin} to AS{f.after_path.origin}."
            else:
                line += f" but the destination AS{f.after_path.origin} is unchanged."
        return line
    if f.delta.appeared:
        return f"{who}: new route {_fmt(f.after_path)} with destination AS{f.after_path.origin}."
    line = f"{who}: path changed from {_fmt(f.before_path)} to {_fmt(f.after_path)};"
    if f.delta.origin_changed:
        line += f" the destination changed from AS{f.before_path.origin} to AS{f.after_path.origin}."
    else:
        line += f" the destination AS{f.after_path.origin} is unchanged."
    novel = sorted(set(f.after_path.hops) - facts.reference_asns(f.prefix))
    if novel:
        line += " Never seen before on this prefix: " + ", ".join(f"AS{a}" for a in novel) + "."
    return line


def render_facts_text(facts: AnalysisFacts) -> str:
    changed = facts.changed()
    lines = [f"Target prefix: {facts.target}"]
    if not changed:
        lines.append("No AS path changes observed.")
    counts = dict(facts.fact_counts) or dict(Counter(f.prefix for f in facts.facts))
    for prefix in sorted(counts, key=prefix_sort_key):
        if prefix == facts.target:
            role = "target prefix"
        elif is_more_specific(prefix, facts.target):
            role = "sub-prefix of the target"
        else:
            role = "related prefix"
        moved = [f for f in changed if f.prefix == prefix]
        origins = ", ".join(f"AS{a}" for a in sorted(facts.historical_origins.get(prefix, ())))
        lines.append("")
        lines.append(
            f"Prefix {prefix} ({role}); historical destination: {origins or 'none'}; "
            f"{counts[prefix] - len(moved)} of {counts[prefix]} peer paths unchanged."
        )
        for collector in sorted({f.collector for f in moved}):
            lines.append(f"  Collector {collector}:")
            for f in moved:
                if f.collector == collector:
                    lines.append("    " + _describe_fact(facts, f))
    lines.append("")
    lines.append(
        f"Peers with anomalous routes: {facts.affected_peer_count} of {facts.total_peer_count}."
    )
    return "\n".join(lines) + "\n"


# -- JSON ------------------------------------------------------------------


def _path_list(path: Optional[AsPath]) -> Optional[list[int]]:
    return None if path is None else path.as_list()


def _delta_dict(d: Optional[PathDelta]) -> Optional[dict]:
    if d is None:
        return None
    return {
        "changed": d.changed,
        "origin_changed": d.origin_changed,
        "introduced_asns": sorted(d.introduced_asns),
        "withdrawn": d.withdrawn,
        "appeared": d.appeared,
    }


def facts_to_dict(facts: AnalysisFacts) -> dict:
    return {
        "ruleset": RULESET_VERSION,
        "target": str(facts.target),
        "affected_peer_count": facts.affected_peer_count,
        "total_peer_count": facts.total_peer_count,
        "fact_counts": {
            str(p): n for p, n in sorted(facts.fact_counts.items(), key=lambda kv: prefix_sort_key(kv[0]))
        },
        "historical_origins": {
            str(p): sorted(v) for p, v in sorted(facts.historical_origins.items(), key=lambda kv: prefix_sort_key(kv[0]))
        },
        "historical_asns": {
            str(p): sorted(v) for p, v in sorted(facts.historical_asns.items(), key=lambda kv: prefix_sort_key(kv[0]))
        },
        "historical_suffixes": {
            str(p): sorted(list(s) for s in v)
            for p, v in sorted(facts.historical_suffixes.items(), key=lambda kv: prefix_sort_key(kv[0]))
        },
        "facts": [
            {
                "prefix": str(f.prefix),
                "collector": f.collector,
                "peer": f.peer,
                "is_sub_prefix": f.is_sub_prefix,
                "before_path": _path_list(f.before_path),
                "after_path": _path_list(f.after_path),
                "target_path": _path_list(f.target_path),
                "delta": _delta_dict(f.delta),
                "target_delta": _delta_dict(f.target_delta),
            }
            for f in facts.facts
        ],
    }


def _delta_from(d: Optional[dict]) -> Optional[PathDelta]:
    if d is None:
        return None
    return PathDelta(d["changed"], d["origin_changed"], frozenset(d["introduced_asns"]), d["withdrawn"], d["appeared"])


def _path_from(hops: Optional[list[int]]) -> Optional[AsPath]:
    return None if hops is None else AsPath(tuple(hops))


def facts_from_dict(doc: Mapping) -> AnalysisFacts:
    return AnalysisFacts(
        target=parse_prefix(doc["target"]),
        facts=tuple(
            ChangeFact(
                prefix=parse_prefix(f["prefix"]),
                collector=f["collector"],
                peer=f["peer"],
                delta=_delta_from(f["delta"]),
                is_sub_prefix=f["is_sub_prefix"],
                before_path=_path_from(f["before_path"]),
                after_path=_path_from(f["after_path"]),
                target_path=_path_from(f["target_path"]),
                target_delta=_delta_from(f["target_delta"]),
            )
            for f in doc["facts"]
        ),
        historical_origins={parse_prefix(p): frozenset(v) for p, v in doc["historical_origins"].items()},
        historical_asns={parse_prefix(p): frozenset(v) for p, v in doc["historical_asns"].items()},
        historical_suffixes={
            parse_prefix(p): frozenset(tuple(s) for s in v) for p, v in doc["historical_suffixes"].items()
        },
        affected_peer_count=doc["affected_peer_count"],
        total_peer_count=doc["total_peer_count"],
        fact_counts={parse_prefix(p): n for p, n in doc.get("fact_counts", {}).items()},
    )


def empty_facts(target: Prefix) -> AnalysisFacts:
    """Facts for a view that holds no routes at all."""
    return AnalysisFacts(target, (), {}, {}, {}, 0, 0, {})
