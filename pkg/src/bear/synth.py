"""Labeled synthetic anomaly events and anonymization of real ones.

A synthetic event keeps real history/before snapshots from a collector feed and
derives the after snapshot by editing routes according to a generated anomaly
description (hijacker/leaker, sample paths, detection percentage).
"""

from __future__ import annotations

import json
import logging
import random
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from bear.analysis import ANOMALY_TYPES, EventType
from bear.elems import ElemSource
from bear.llm import Gateway, LlmError, build_prompt
from bear.model import (
    MAX_ASN,
    AsPath,
    BgpModelError,
    EventSpec,
    Prefix,
    RouteKey,
    RouteSnapshot,
    SnapshotBuilder,
    is_more_specific,
    parse_prefix,
    prefix_sort_key,
)
from bear.seeding import derive_seed, round_half_up
from bear.snapshots import (
    RIB_INTERVAL,
    RIB_SPAN,
    UPDATE_MARGIN,
    SnapshotError,
    SnapshotTriple,
    build_before,
    build_history,
    collect_related_prefixes,
    history_timestamp,
)

logger = logging.getLogger(__name__)

DEFAULT_CHURN_THRESHOLD = 0.05
DETECTION_CHOICES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class SynthesisError(RuntimeError):
    pass


class DescriptionError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticEventDescription:
    event_type: EventType
    offender: int
    sample_paths: tuple[AsPath, ...]
    detection_pct: float
    sub_prefix: Optional[Prefix] = None

    def validate(
        self,
        target: Optional[Prefix] = None,
        origins: Iterable[int] = (),
        known_asns: Iterable[int] = (),
    ) -> None:
        if self.event_type not in ANOMALY_TYPES:
            raise DescriptionError(f"event type {self.event_type.value!r} is not an anomaly")
        if not 0.0 < self.detection_pct <= 1.0:
            raise DescriptionError(f"detection_pct {self.detection_pct} outside (0, 1]")
        if not self.sample_paths:
            raise DescriptionError("no sample AS paths")
        if self.event_type.is_hijack:
            for p in self.sample_paths:
                if p.origin != self.offender:
                    raise DescriptionError(f"hijack sample path {p} does not end with the hijacker AS{self.offender}")
        else:
            if len(self.sample_paths) != 1:
                raise DescriptionError("a route leak takes exactly one sample path from the leaker to the origin")
            p = self.sample_paths[0]
            if p.first_hop != self.offender:
                raise DescriptionError(f"leak sample path {p} does not start with the leaker AS{self.offender}")
            origins = set(origins)
            if origins and p.origin not in origins:
                raise DescriptionError(f"leak sample path {p} does not end at a legitimate origin {sorted(origins)}")
        if self.event_type.is_sub_prefix:
            if self.sub_prefix is None:
                raise DescriptionError("sub-prefix event without a sub-prefix")
            if target is not None and not is_more_specific(self.sub_prefix, target):
                raise DescriptionError(f"{self.sub_prefix} is not a more specific prefix of {target}")
        elif self.sub_prefix is not None:
            raise DescriptionError("only sub-prefix events carry a sub-prefix")
        if self.offender in set(known_asns):
            raise DescriptionError(f"offender AS{self.offender} already appears in the routing data")

    def to_dict(self) -> dict:
        return {
            "event_type": self.event_type.value,
            "sub_prefix": None if self.sub_prefix is None else str(self.sub_prefix),
            "offender": self.offender,
            "sample_paths": [p.as_list() for p in self.sample_paths],
            "detection_pct": self.detection_pct,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> SyntheticEventDescription:
        try:
            return cls(
                event_type=EventType(str(doc["event_type"]).strip().lower()),
                offender=int(doc["offender"]),
                sample_paths=tuple(AsPath(tuple(int(h) for h in p)) for p in doc["sample_paths"]),
                detection_pct=float(doc["detection_pct"]),
                sub_prefix=None if not doc.get("sub_prefix") else parse_prefix(doc["sub_prefix"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DescriptionError(f"malformed description: {exc}") from None


_JSON_OBJECT = re.compile(r"\{.*\}", re.DOTALL)


def _parse_json_reply(text: str) -> dict:
    match = _JSON_OBJECT.search(text)
    if match is None:
        raise DescriptionError("reply contains no JSON object")
    try:
        return json.loads(match.group(0))
    except json.JSONDecodeError as exc:
        raise DescriptionError(f"reply JSON is invalid: {exc}") from None


@dataclass(frozen=True)
class SyntheticEvent:
    spec: EventSpec
    triple: SnapshotTriple
    truth: SyntheticEventDescription
    affected_keys: frozenset[RouteKey] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if not self.affected_keys:
            raise SynthesisError("a labeled event needs at least one affected route")

    @property
    def name(self) -> str:
        return self.spec.name or f"event-{self.spec.start}"

    @property
    def affected_peers(self) -> set[tuple[str, int]]:
        return {(c, p) for _pfx, c, p in self.affected_keys}

    @property
    def affected_collectors(self) -> set[str]:
        return {c for _pfx, c, _p in self.affected_keys}

    def truth_dict(self) -> dict:
        doc = self.truth.to_dict()
        doc["affected_keys"] = [
            [str(p), c, a] for p, c, a in sorted(self.affected_keys, key=lambda k: (prefix_sort_key(k[0]), k[1], k[2]))
        ]
        return doc

    def save(self, directory: Union[str, Path]) -> None:
        out = Path(directory)
        self.triple.save(out)
        (out / "truth.json").write_text(json.dumps(self.truth_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: Union[str, Path]) -> SyntheticEvent:
        src = Path(directory)
        triple = SnapshotTriple.load(src)
        doc = json.loads((src / "truth.json").read_text(encoding="utf-8"))
        keys = frozenset((parse_prefix(p), c, int(a)) for p, c, a in doc["affected_keys"])
        return cls(triple.spec, triple, SyntheticEventDescription.from_dict(doc), keys)


# -- workflow steps ------------------------------------------------------------


@dataclass
class SeedChoice:
    prefix: Prefix
    timestamp: int
    attempts: int
    rejected: int


def _candidates(source: ElemSource) -> list[dict]:
    """Prefixes with at least one RIB dump old enough to serve as history, and their valid time range."""
    rib_times: dict[Prefix, set[int]] = {}
    for elem in source:
        if elem.record_type.value == "R":
            rib_times.setdefault(elem.prefix, set()).add(elem.timestamp // RIB_INTERVAL * RIB_INTERVAL)
    _first, last = source.time_range()
    out = []
    for prefix in sorted(rib_times, key=prefix_sort_key):
        t_min = min(rib_times[prefix]) + RIB_INTERVAL + UPDATE_MARGIN
        t_max = last - UPDATE_MARGIN
        if t_min <= t_max:
            out.append({"prefix": str(prefix), "t_min": t_min, "t_max": t_max})
    return out


def _buildable(source: ElemSource, prefix: Prefix, t: int) -> bool:
    try:
        hist_ts = history_timestamp(t)
    except SnapshotError:
        return False
    return bool(source.ribs(hist_ts, hist_ts + RIB_SPAN, [prefix]))


def pick_seed(
    source: ElemSource,
    chooser: Union[random.Random, Gateway],
    seed: int = 0,
    max_attempts: int = 20,
) -> SeedChoice:
    """Pick a (prefix, time) pair whose history and before snapshots can be built."""
    candidates = _candidates(source) if len(source) else []
    if not candidates:
        raise SynthesisError("elem source has no prefix with a usable RIB dump")
    index = {c["prefix"]: c for c in candidates}
    rejected = 0
    for attempt in range(1, max_attempts + 1):
        if isinstance(chooser, Gateway):
            request = build_prompt("synth_seed", {"candidates": candidates}, seed=derive_seed(seed, "seed", attempt))
            try:
                doc = _parse_json_reply(chooser.complete(request).text)
                prefix = parse_prefix(str(doc["prefix"]))
                t = int(doc["timestamp"])
            except (DescriptionError, BgpModelError, KeyError, TypeError, ValueError) as exc:
                logger.info("seed attempt %d rejected: %s", attempt, exc)
                rejected += 1
                continue
        else:
            cand = chooser.choice(candidates)
            prefix = parse_prefix(cand["prefix"])
            t = chooser.randint(cand["t_min"], cand["t_max"])
        cand = index.get(str(prefix))
        if cand is None or not cand["t_min"] <= t <= cand["t_max"] or not _buildable(source, prefix, t):
            rejected += 1
            continue
        return SeedChoice(prefix, t, attempt, rejected)
    raise SynthesisError(f"no buildable prefix/time pair after {max_attempts} attempts")


def consistency_check(
    history: RouteSnapshot, before: RouteSnapshot, churn_threshold: float = DEFAULT_CHURN_THRESHOLD
) -> bool:
    """History and before agree on every origin and differ on few enough routes."""
    keys = history.keys() | before.keys()
    if not keys:
        return True
    changed = 0
    for prefix, collector, peer in keys:
        old = history.get(prefix, collector, peer)
        new = before.get(prefix, collector, peer)
        if old is not None and new is not None and old.origin != new.origin:
            return False
        if old != new:
            changed += 1
    return changed / len(keys) <= churn_threshold


def known_asns(*snapshots: RouteSnapshot) -> set[int]:
    return {h for snap in snapshots for _p, _c, _a, path in snap.entries() for h in path.hops}


def generate_description(
    before: RouteSnapshot,
    gateway: Gateway,
    seed: int,
    target: Prefix,
    history: Optional[RouteSnapshot] = None,
    event_type: Optional[EventType] = None,
) -> SyntheticEventDescription:
    paths = before.paths_for(target)
    if not paths:
        raise SynthesisError(f"before snapshot has no routes to {target}")
    known = known_asns(before, *(s for s in (history,) if s is not None))
    origins = {p.origin for p in paths}
    ctx = {"target_prefix": target, "before": before, "known_asns": sorted(known), "event_type": event_type}
    note = None
    for attempt in range(2):
        if note:
            ctx["repair_note"] = note
        request = build_prompt("synth_description", ctx, seed=derive_seed(seed, "description", attempt))
        try:
            desc = SyntheticEventDescription.from_dict(_parse_json_reply(gateway.complete(request).text))
            if event_type is not None and desc.event_type is not event_type:
                raise DescriptionError(f"expected a {event_type.value} event, got {desc.event_type.value}")
            desc.validate(target, origins, known)
            return desc
        except (DescriptionError, BgpModelError) as exc:
            note = str(exc)
            logger.info("description attempt %d rejected: %s", attempt, note)
    raise SynthesisError(f"event description invalid after repair round: {note}")


def duplicate_to_subprefix(before: RouteSnapshot, target: Prefix, sub: Prefix) -> RouteSnapshot:
    if not is_more_specific(sub, target):
        raise SynthesisError(f"{sub} is not more specific than {target}")
    if sub in before.routes:
        raise SynthesisError(f"sub-prefix {sub} already has routes")
    builder = SnapshotBuilder(before.timestamp, before)
    builder.touch(sub)
    for collector, peers in before.routes.get(target, {}).items():
        for peer, path in peers.items():
            builder.put(sub, collector, peer, path)
    return builder.freeze()


def affected_count(pct: float, eligible: int) -> int:
    return max(1, round_half_up(pct * eligible))


def hijack_path(peer: int, sample: AsPath) -> AsPath:
    return AsPath((peer, *sample.hops[1:-1], sample.origin))


def leak_path(old: AsPath, sample: AsPath, retain_hops: int = 1) -> AsPath:
    return AsPath((*old.hops[:retain_hops], *sample.hops))


def mutate_after(
    before: RouteSnapshot,
    desc: SyntheticEventDescription,
    seed: int,
    target: Prefix,
    retain_hops: int = 1,
) -> tuple[RouteSnapshot, frozenset[RouteKey]]:
    if retain_hops < 1:
        raise ValueError("the peer hop must be retained")
    base, prefix = before, target
    if desc.event_type.is_sub_prefix:
        prefix = desc.sub_prefix
        if prefix not in before.routes:
            base = duplicate_to_subprefix(before, target, prefix)
    eligible = sorted((c, p) for c, peers in base.routes.get(prefix, {}).items() for p in peers)
    if not eligible:
        raise SynthesisError(f"no peer holds a route to {prefix}")
    if desc.event_type.is_leak:
        origins = {p.origin for p in before.paths_for(target)}
        if desc.sample_paths[0].origin not in origins:
            raise SynthesisError(
                f"leak sample ends at AS{desc.sample_paths[0].origin}, not a legitimate origin {sorted(origins)}"
            )
    rng = random.Random(seed)
    chosen = rng.sample(eligible, affected_count(desc.detection_pct, len(eligible)))
    builder = SnapshotBuilder(base.timestamp, base)
    keys = set()
    for collector, peer in sorted(chosen):
        old = base.get(prefix, collector, peer)
        if desc.event_type.is_hijack:
            new = hijack_path(peer, rng.choice(desc.sample_paths))
        else:
            new = leak_path(old, desc.sample_paths[0], retain_hops)
        builder.put(prefix, collector, peer, new)
        keys.add((prefix, collector, peer))
    return builder.freeze(), frozenset(keys)


def generate_event(
    source: ElemSource,
    gateway: Gateway,
    seed: int,
    event_type: Optional[EventType] = None,
    max_attempts: int = 10,
    churn_threshold: float = DEFAULT_CHURN_THRESHOLD,
    retain_hops: int = 1,
    seed_mode: str = "rng",
) -> SyntheticEvent:
    """Run the full workflow: seed, snapshots, consistency, description, mutation."""
    rng = random.Random(derive_seed("event", seed))
    index = source.prefixes()
    problems: list[str] = []
    for attempt in range(max_attempts):
        chooser = gateway if seed_mode == "gateway" else rng
        choice = pick_seed(source, chooser, derive_seed(seed, attempt))
        related = collect_related_prefixes(index, choice.prefix)
        hist_ts = history_timestamp(choice.timestamp)
        try:
            history = build_history(source, related, hist_ts)
        except SnapshotError as exc:
            problems.append(str(exc))
            continue
        before = build_before(
            history, source.updates(hist_ts, choice.timestamp - UPDATE_MARGIN, related), choice.timestamp
        )
        if not before.paths_for(choice.prefix):
            problems.append(f"{choice.prefix} has no routes before the event")
            continue
        if not consistency_check(history, before, churn_threshold):
            problems.append(f"{choice.prefix}@{choice.timestamp} failed the consistency check")
            continue
        try:
            desc = generate_description(
                before, gateway, derive_seed(seed, "desc", attempt), choice.prefix, history, event_type
            )
            if desc.event_type.is_sub_prefix:
                # The stored before carries the duplicated sub-prefix so that only sampled keys differ.
                before = duplicate_to_subprefix(before, choice.prefix, desc.sub_prefix)
            after, keys = mutate_after(before, desc, derive_seed(seed, "mutate", attempt), choice.prefix, retain_hops)
        except (SynthesisError, LlmError) as exc:
            problems.append(str(exc))
            continue
        spec = EventSpec(choice.prefix, choice.timestamp, None, f"synthetic-{seed:04d}")
        triple = SnapshotTriple(history, before, after.with_timestamp(choice.timestamp + UPDATE_MARGIN), spec)
        return SyntheticEvent(spec, triple, desc, keys)
    raise SynthesisError(f"event generation failed after {max_attempts} attempts: {problems[-3:]}")


def generate_corpus(
    source: ElemSource,
    gateway: Gateway,
    seeds: Sequence[int],
    balance: bool = True,
) -> list[SyntheticEvent]:
    """One event per seed; with ``balance`` hijack and leak families alternate."""
    events = []
    for i, seed in enumerate(seeds):
        wanted = None
        if balance:
            sub = (i // 2) % 2 == 1
            if i % 2 == 0:
                wanted = EventType.SUB_PREFIX_HIJACK if sub else EventType.HIJACK
            else:
                wanted = EventType.SUB_PREFIX_ROUTE_LEAK if sub else EventType.ROUTE_LEAK
        events.append(generate_event(source, gateway, seed, wanted))
    return events


# -- anonymization ---------------------------------------------------------------

# 2005-01-01 .. 2025-01-01, aligned to RIB dumps.
_ANON_RANGE = (1104537600, 1735689600)


@dataclass(frozen=True)
class Anonymization:
    asn_map: Mapping[int, int]
    time_shift: int


def anonymize_triple(
    triple: SnapshotTriple, seed: int, extra_asns: Iterable[int] = ()
) -> tuple[SnapshotTriple, Anonymization]:
    """Relabel ASNs through one random bijection and shift every timestamp by one 8h-aligned offset."""
    rng = random.Random(derive_seed("anonymize", seed))
    asns = sorted(known_asns(triple.history, triple.before, triple.after) | set(extra_asns))
    values = rng.sample(range(1, MAX_ASN + 1), len(asns))
    asn_map = dict(zip(asns, values))
    lo, hi = (v // RIB_INTERVAL for v in _ANON_RANGE)
    new_hist = rng.randint(lo, hi) * RIB_INTERVAL
    shift = new_hist - triple.history.timestamp
    spec = triple.spec
    new_spec = EventSpec(
        spec.prefix, spec.start + shift, None if spec.end is None else spec.end + shift, spec.name
    )
    out = SnapshotTriple(
        triple.history.relabel(asn_map, triple.history.timestamp + shift),
        triple.before.relabel(asn_map, triple.before.timestamp + shift),
        triple.after.relabel(asn_map, triple.after.timestamp + shift),
        new_spec,
    )
    return out, Anonymization(asn_map, shift)


def anonymize(event: SyntheticEvent, seed: int) -> SyntheticEvent:
    truth = event.truth
    extra = {truth.offender} | {h for p in truth.sample_paths for h in p.hops} | {a for _p, _c, a in event.affected_keys}
    triple, anon = anonymize_triple(event.triple, seed, extra)
    m = anon.asn_map
    new_truth = SyntheticEventDescription(
        event_type=truth.event_type,
        offender=m[truth.offender],
        sample_paths=tuple(AsPath(tuple(m[h] for h in p.hops)) for p in truth.sample_paths),
        detection_pct=truth.detection_pct,
        sub_prefix=truth.sub_prefix,
    )
    name = f"{event.name}-anon"
    spec = EventSpec(triple.spec.prefix, triple.spec.start, triple.spec.end, name)
    triple = SnapshotTriple(triple.history, triple.before, triple.after, spec)
    keys = frozenset((p, c, m[a]) for p, c, a in event.affected_keys)
    return SyntheticEvent(spec, triple, new_truth, keys)
