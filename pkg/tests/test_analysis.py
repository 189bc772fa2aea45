from collections import Counter

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from bear.analysis import (
    AnalysisError,
    EventType,
    analyze_changes,
    classify,
    compact_facts,
    detection_rate,
    empty_facts,
    facts_from_dict,
    facts_to_dict,
    identify_offender,
    render_facts_text,
    triggering_sub_prefix,
)
from bear.model import AsPath, EventSpec, SnapshotBuilder, parse_prefix
from bear.snapshots import SnapshotTriple

P = parse_prefix
TARGET = P("10.0.0.0/8")
T = 1685010000


def table(ts, rows):
    """rows: {prefix: {(collector, peer): hops}}"""
    b = SnapshotBuilder(ts)
    for prefix, entries in rows.items():
        for (collector, peer), hops in entries.items():
            b.put(P(prefix) if isinstance(prefix, str) else prefix, collector, peer, AsPath(tuple(hops)))
    return b.freeze()


def triple(history, before, after, target=TARGET):
    return SnapshotTriple(table(T - 30000, history), table(T - 300, before), table(T + 300, after), EventSpec(target, T))


BASE = {
    "10.0.0.0/8": {
        ("rrc00", 1): [1, 3356, 15169],
        ("rrc00", 2): [2, 15169],
        ("rrc01", 3): [3, 174, 15169],
        ("rrc01", 4): [4, 3356, 15169],
    }
}


def modified(base, prefix, changes):
    out = {p: dict(v) for p, v in base.items()}
    out.setdefault(prefix, {}).update(changes)
    return out


def test_identity_has_no_changes():
    facts = analyze_changes(triple(BASE, BASE, BASE))
    assert not facts.changed()
    assert facts.affected_peer_count == 0
    assert classify(facts) is EventType.NO_ANOMALY
    assert detection_rate(facts) == 0.0


def test_origin_flip():
    after = modified(BASE, "10.0.0.0/8", {("rrc00", 1): [1, 64500]})
    facts = analyze_changes(triple(BASE, BASE, after))
    (fact,) = facts.changed()
    assert fact.delta.origin_changed and fact.peer == 1
    assert facts.affected_peer_count == 1
    assert classify(facts) is EventType.HIJACK
    assert identify_offender(facts, EventType.HIJACK) == 64500


def test_new_sub_prefix_fact():
    after = modified(BASE, "10.0.0.0/9", {("rrc00", 1): [1, 3356, 15169]})
    facts = analyze_changes(triple(BASE, BASE, after))
    (fact,) = facts.changed()
    assert fact.delta.appeared and fact.is_sub_prefix and fact.prefix == P("10.0.0.0/9")
    # Legitimate origin over known hops: a more-specific announcement is not evidence by itself.
    assert classify(facts) is EventType.NO_ANOMALY


def test_sub_prefix_hijack():
    after = modified(BASE, "10.0.0.0/9", {("rrc00", 1): [1, 64500], ("rrc01", 3): [3, 174, 64500]})
    facts = analyze_changes(triple(BASE, BASE, after))
    assert classify(facts) is EventType.SUB_PREFIX_HIJACK
    assert identify_offender(facts, EventType.SUB_PREFIX_HIJACK) == 64500
    assert triggering_sub_prefix(facts, EventType.SUB_PREFIX_HIJACK) == P("10.0.0.0/9")
    assert facts.total_peer_count == 4 and facts.affected_peer_count == 2


def test_route_leak():
    after = modified(BASE, "10.0.0.0/8", {("rrc01", 4): [4, 64501, 3356, 15169]})
    facts = analyze_changes(triple(BASE, BASE, after))
    assert classify(facts) is EventType.ROUTE_LEAK
    assert identify_offender(facts, EventType.ROUTE_LEAK) == 64501


def test_sub_prefix_route_leak():
    after = modified(BASE, "10.128.0.0/9", {("rrc00", 2): [2, 64501, 174, 15169]})
    facts = analyze_changes(triple(BASE, BASE, after))
    assert classify(facts) is EventType.SUB_PREFIX_ROUTE_LEAK
    assert identify_offender(facts, EventType.SUB_PREFIX_ROUTE_LEAK) == 64501


def test_target_evidence_beats_sub_prefix_variant():
    after = modified(BASE, "10.0.0.0/8", {("rrc00", 1): [1, 64500]})
    after = modified(after, "10.0.0.0/9", {("rrc00", 2): [2, 64500]})
    assert classify(analyze_changes(triple(BASE, BASE, after))) is EventType.HIJACK


def test_withdrawal_alone_is_not_an_anomaly():
    after = {"10.0.0.0/8": {k: v for k, v in BASE["10.0.0.0/8"].items() if k != ("rrc00", 1)}}
    facts = analyze_changes(triple(BASE, BASE, after))
    assert len(facts.changed()) == 1
    assert classify(facts) is EventType.NO_ANOMALY


def test_unanimous_hijacker():
    rows = {("rrc00", p): [p, 64500] for p in range(1, 6)}
    before = {"10.0.0.0/8": {("rrc00", p): [p, 15169] for p in range(1, 6)}}
    facts = analyze_changes(triple(before, before, {"10.0.0.0/8": rows}))
    assert identify_offender(facts, EventType.HIJACK) == 64500


def test_plurality_hijacker():
    before = {"10.0.0.0/8": {("rrc00", p): [p, 15169] for p in range(1, 5)}}
    after = {"10.0.0.0/8": {("rrc00", 1): [1, 64500], ("rrc00", 2): [2, 64500], ("rrc00", 3): [3, 64500], ("rrc00", 4): [4, 64510]}}
    facts = analyze_changes(triple(before, before, after))
    assert identify_offender(facts, EventType.HIJACK) == 64500


def test_tie_goes_to_lowest_asn():
    before = {"10.0.0.0/8": {("rrc00", p): [p, 15169] for p in range(1, 3)}}
    after = {"10.0.0.0/8": {("rrc00", 1): [1, 64510], ("rrc00", 2): [2, 64500]}}
    facts = analyze_changes(triple(before, before, after))
    assert identify_offender(facts, EventType.HIJACK) == 64500


def test_leaker_is_adjacent_to_known_suffix():
    after = modified(BASE, "10.0.0.0/8", {("rrc00", 2): [2, 9, 64501, 3356, 15169]})
    facts = analyze_changes(triple(BASE, BASE, after))
    assert identify_offender(facts, EventType.ROUTE_LEAK) == 64501


def test_detection_rate_arithmetic():
    before = {"10.0.0.0/8": {("rrc00", p): [p, 15169] for p in range(1, 11)}}
    after = {"10.0.0.0/8": {("rrc00", p): ([p, 64500] if p <= 5 else [p, 15169]) for p in range(1, 11)}}
    facts = analyze_changes(triple(before, before, after))
    assert detection_rate(facts) == 0.5
    with pytest.raises(AnalysisError):
        detection_rate(empty_facts(TARGET))


def test_no_routes_is_an_error():
    with pytest.raises(AnalysisError):
        analyze_changes(triple(BASE, {}, {}))


def test_offender_requires_anomaly():
    with pytest.raises(AnalysisError):
        identify_offender(analyze_changes(triple(BASE, BASE, BASE)), EventType.NO_ANOMALY)


class TestRendering:
    def test_no_changes_sentence(self):
        assert "No AS path changes observed." in render_facts_text(analyze_changes(triple(BASE, BASE, BASE)))

    def test_origin_change_names_everything(self):
        after = modified(BASE, "10.0.0.0/8", {("rrc01", 3): [3, 174, 64500]})
        text = render_facts_text(analyze_changes(triple(BASE, BASE, after)))
        for part in ("AS15169", "AS64500", "AS3", "rrc01"):
            assert part in text

    def test_sub_prefix_appearance(self):
        after = modified(BASE, "10.0.0.0/9", {("rrc00", 1): [1, 64500]})
        text = render_facts_text(analyze_changes(triple(BASE, BASE, after)))
        assert "10.0.0.0/9" in text and "new sub-prefix" in text


# -- properties over random triples -------------------------------------------

PEERS = [("rrc00", 1), ("rrc00", 2), ("rrc01", 3), ("rrc01", 4), ("rrc02", 5)]
PREFIXES = ["10.0.0.0/8", "10.0.0.0/9", "10.64.0.0/10"]


@st.composite
def random_triples(draw):
    def path(peer):
        return [peer, *draw(st.lists(st.integers(100, 110), max_size=3)), draw(st.sampled_from([15169, 15169, 64500, 64501]))]

    hist, before, after = {}, {}, {}
    for prefix in PREFIXES:
        for key in PEERS:
            if draw(st.booleans()):
                p = path(key[1])
                hist.setdefault(prefix, {})[key] = p
                before.setdefault(prefix, {})[key] = p
            if draw(st.integers(0, 3)) == 0:
                if draw(st.booleans()):
                    after.setdefault(prefix, {})[key] = path(key[1])
            elif key in before.get(prefix, {}):
                after.setdefault(prefix, {})[key] = before[prefix][key]
    assume(any(before.values()) or any(after.values()))
    return triple(hist, before, after)


@given(random_triples(), st.randoms(use_true_random=False))
def test_renumbering_invariance(tr, rnd):
    facts = analyze_changes(tr)
    asns = sorted({h for s in tr.snapshots().values() for *_k, path in s.entries() for h in path.hops})
    sigma = dict(zip(asns, rnd.sample(range(1, 2**32), len(asns))))
    moved = SnapshotTriple(
        tr.history.relabel(sigma), tr.before.relabel(sigma), tr.after.relabel(sigma), tr.spec
    )
    facts2 = analyze_changes(moved)
    label = classify(facts)
    assert classify(facts2) is label
    assert detection_rate(facts2) == detection_rate(facts)
    if label is not EventType.NO_ANOMALY:
        pool = facts.hijack_facts() if label.is_hijack else facts.leak_facts()
        if label.is_sub_prefix:
            pool = [f for f in pool if f.is_sub_prefix]
        if label.is_hijack:
            counts = Counter(f.after_path.origin for f in pool)
        else:
            from bear.analysis import leaker_of

            counts = Counter(leaker_of(facts, f) for f in pool)
        best = max(counts.values())
        # The lowest-ASN tie-break cannot survive an arbitrary relabeling; only a unique plurality commutes.
        if sum(1 for n in counts.values() if n == best) == 1:
            assert identify_offender(facts2, label) == sigma[identify_offender(facts, label)]


@given(random_triples())
def test_pure_and_complete(tr):
    a, b = analyze_changes(tr), analyze_changes(tr)
    assert a == b
    expected = sum(
        len({(c, p) for c, ps in snap.routes.get(prefix, {}).items() for p in ps} | {(c, p) for c, ps in tr.after.routes.get(prefix, {}).items() for p in ps})
        for prefix in set(tr.before.routes) | set(tr.after.routes)
        for snap in (tr.before,)
    )
    assert len(a.facts) == expected


@given(random_triples())
def test_compact_form_agrees(tr):
    facts = analyze_changes(tr)
    small = compact_facts(facts)
    label = classify(facts)
    assert classify(small) is label
    if label is not EventType.NO_ANOMALY:
        assert identify_offender(small, label) == identify_offender(facts, label)
    back = facts_from_dict(facts_to_dict(small))
    assert classify(back) is label
    assert back.total_peer_count == facts.total_peer_count


@given(random_triples())
def test_identical_snapshots_mean_no_anomaly(tr):
    same = SnapshotTriple(tr.history, tr.before, tr.before.with_timestamp(tr.after.timestamp), tr.spec)
    assume(tr.before.path_count())
    assert classify(analyze_changes(same)) is EventType.NO_ANOMALY
