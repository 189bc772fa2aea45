"""Exit criteria, one test each, with wall-clock limits.

Every test records a one-line verdict that the terminal summary prints
(see conftest.py), whether it passes or fails.
"""

import random
import time
from contextlib import contextmanager

import pytest

from bear.analysis import analyze_changes, classify, detection_rate, identify_offender
from bear.elems import ElemSource, announce, load_elem_files, rib, withdraw, write_elems
from bear.fixtures import (
    background_source,
    both_axes_fixture,
    labeled_fixtures,
    oversized_fixture,
    synthetic_corpus,
)
from bear.harness import SWEEP_FRACTIONS, RunConfig, collector_count, run_sweep, summarize_sweep
from bear.llm import Gateway, ProviderConfig
from bear.model import AsPath, EventSpec, RouteSnapshot, SnapshotBuilder, parse_prefix
from bear.reasoner import (
    ExplainConfig,
    SelfConsistencyConfig,
    explain,
    explain_detailed,
    plan_partition,
    summarization_levels,
)
from bear.snapshots import apply_elem, build_triple, history_timestamp
from bear.synth import anonymize, generate_corpus
from oracles import binomial_majority, history_ts_bruteforce, triple_oracle
from strategies import random_elem_sequence

pytestmark = pytest.mark.acceptance

VERDICTS: list[str] = []


@contextmanager
def criterion(number: int, title: str, limit: float):
    start = time.perf_counter()
    detail: dict = {}
    ok = False
    try:
        yield detail
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        timely = elapsed < limit
        extra = detail.get("note", "")
        verdict = "PASS" if ok and timely else "FAIL"
        VERDICTS.append(
            f"[{verdict}] criterion {number}: {title} ({elapsed:.2f}s of {limit:g}s){'; ' + extra if extra else ''}"
        )
    assert timely, f"criterion {number} took {elapsed:.2f}s, limit {limit}s"


def state(snap: RouteSnapshot) -> dict:
    return {(p, c, a): path.hops for p, c, a, path in snap.entries()}


def test_1_history_timestamp():
    with criterion(1, "history timestamp vs brute force on 1000 values", 1.0) as d:
        rng = random.Random(1)
        values = [rng.randint(28800, 2**34) for _ in range(996)] + [28800, 57599, 57600, 1684972800]
        mismatches = [t for t in values if history_timestamp(t) != history_ts_bruteforce(t)]
        d["note"] = f"{len(mismatches)} mismatches"
        assert not mismatches


def test_2_replay_correctness():
    with criterion(2, "replay vs last-write oracle on 100 sequences, plus inversion", 10.0) as d:
        rng = random.Random(2)
        bad = 0
        for _ in range(100):
            t = 1685010000 + rng.randint(0, 10**6)
            elems = random_elem_sequence(rng, t, rng.randint(10, 120), history_ts_bruteforce(t))
            triple = build_triple(ElemSource(elems), EventSpec(parse_prefix("10.0.0.0/8"), t))
            if (state(triple.history), state(triple.before), state(triple.after)) != triple_oracle(elems, t):
                bad += 1
            # Announce then withdraw, then restore: each key returns to its prior state.
            snap = triple.after
            for pfx, c, peer, path in list(snap.entries())[:5]:
                tail = tuple(rng.sample(range(300, 310), 2))
                probe = apply_elem(snap, announce(t, c, peer, pfx, peer, *tail))
                probe = apply_elem(probe, withdraw(t + 1, c, peer, pfx))
                restored = apply_elem(probe, announce(t + 2, c, peer, pfx, *path.hops))
                if probe.get(pfx, c, peer) is not None or restored != snap:
                    bad += 1
        d["note"] = f"{bad} mismatches"
        assert bad == 0


def test_3_synthetic_corpus_fidelity():
    with criterion(3, "34 synthetic events recovered by the analyzer", 30.0) as d:
        source = background_source(7)
        corpus = generate_corpus(source, Gateway(ProviderConfig(seed=7)), range(1, 35), balance=True)
        hijacks = sum(e.truth.event_type.is_hijack for e in corpus)
        recovered = 0
        for event in corpus:
            facts = analyze_changes(event.triple)
            label = classify(facts)
            if (
                label is event.truth.event_type
                and identify_offender(facts, label) == event.truth.offender
                and facts.affected_peer_count == len(event.affected_peers)
            ):
                recovered += 1
        d["note"] = f"{recovered}/{len(corpus)} recovered, {hijacks} hijack / {len(corpus) - hijacks} leak"
        assert len(corpus) == 34 and hijacks == 17 and recovered == 34


def test_4_end_to_end_accuracy():
    with criterion(4, "perfect-mock N=5 explain on 34 synthetic + 4 fixtures", 120.0) as d:
        events = [*synthetic_corpus(), *labeled_fixtures()]
        cfg = ExplainConfig(provider=ProviderConfig(), consistency=SelfConsistencyConfig(5))
        right = 0
        for event in events:
            report = explain(event.spec, event.triple, cfg)
            right += report.conclusive and report.event_type is event.truth.event_type
        d["note"] = f"{right}/{len(events)} correct"
        assert right == len(events) and len(events) >= 38


def test_5_self_consistency_benefit():
    with criterion(5, "noisy-mock(0.2): N=5 voting beats single runs over 200 trials", 120.0) as d:
        events = [*synthetic_corpus(), *labeled_fixtures()]
        provider = ProviderConfig(kind="noisy-mock", error_rate=0.2, seed=5)
        single = voted = 0
        for trial in range(200):
            event = events[trial % len(events)]
            truth = event.truth.event_type
            one = explain_detailed(event.spec, event.triple, ExplainConfig(provider, SelfConsistencyConfig(1), seed=trial))
            five = explain_detailed(event.spec, event.triple, ExplainConfig(provider, SelfConsistencyConfig(5), seed=trial))
            single += one.labels[0] is truth
            voted += five.report.event_type is truth and five.report.conclusive
        bound = binomial_majority(0.8, 5)
        d["note"] = f"single {single / 200:.3f}, voted {voted / 200:.3f} (strict-majority bound {bound:.3f})"
        assert voted > single and voted / 200 >= 0.90


def test_6_hierarchical_arithmetic():
    with criterion(6, "576 segments at x=5 give [116, 24, 5, 1]; axis choice", 1.0) as d:
        levels = summarization_levels(576, 5)
        triple, limit = oversized_fixture()
        plan = plan_partition(triple, limit)
        small, small_limit = both_axes_fixture()
        other = plan_partition(small, small_limit)
        d["note"] = f"levels {levels}, k={len(levels)}, oversized axis {plan.segment_axis} (M={plan.segment_count}), both-feasible axis {other.segment_axis}"
        assert levels == [116, 24, 5, 1] and len(levels) == 4
        assert plan.segment_axis == "peer" and plan.segment_count == 576 and plan.levels == 4
        assert other.segment_axis == "collector"


def test_7_collector_subsetting():
    with criterion(7, "50-seed collector sweep: presence trend and accuracy", 300.0) as d:
        counts = [collector_count(f, 24) for f in (0.04, 0.08, 0.16)]
        corpus = list(synthetic_corpus())
        config = RunConfig(provider=ProviderConfig(), n_runs=5, seeds=tuple(range(50)), fractions=SWEEP_FRACTIONS)
        summary = summarize_sweep(run_sweep(corpus, config))
        presence = [s.presence_ratio for s in summary]
        accuracy = [s.accuracy for s in summary]
        d["note"] = f"presence {[round(p, 4) for p in presence]}, accuracy {accuracy}, counts {counts}"
        assert counts == [1, 2, 4]
        assert summary[-1].fraction == 1.0 and summary[-1].presence_ratio == 1.0
        assert all(a <= b for a, b in zip(presence, presence[1:]))
        assert all(a == 1.0 for a in accuracy)


def test_8_anonymization_invariance():
    with criterion(8, "classification, detection rate and offender survive anonymization", 30.0) as d:
        events = [*synthetic_corpus(), *labeled_fixtures()]
        violations = 0
        for i, event in enumerate(events):
            anon = anonymize(event, 100 + i)
            f0, f1 = analyze_changes(event.triple), analyze_changes(anon.triple)
            label = classify(f0)
            mapped = anon.truth.offender
            if (
                classify(f1) is not label
                or detection_rate(f1) != detection_rate(f0)
                or identify_offender(f1, label) != mapped
                or anon.spec.start - event.spec.start != anon.triple.history.timestamp - event.triple.history.timestamp
            ):
                violations += 1
        d["note"] = f"{violations} violations over {len(events)} events"
        assert violations == 0


def test_9_serialization(tmp_path):
    with criterion(9, "snapshot JSON and elem file round-trips on 100 snapshots", 5.0) as d:
        rng = random.Random(9)
        unstable = 0
        for i in range(100):
            builder = SnapshotBuilder(rng.randint(0, 2**31))
            for _ in range(rng.randint(0, 30)):
                if rng.random() < 0.3:
                    pfx = parse_prefix(f"2001:db8:{rng.randint(0, 0xFFFF):x}::/48")
                else:
                    pfx = parse_prefix(f"{rng.randint(1, 223)}.{rng.randint(0, 255)}.{rng.randint(0, 255)}.0/24")
                peer = rng.randint(1, 2**32 - 1)
                hops = (peer, *(rng.randint(1, 2**32 - 1) for _ in range(rng.randint(0, 5))))
                builder.put(pfx, rng.choice(["rrc00", "rrc21", "route-views2"]), peer, AsPath(hops))
            snap = builder.freeze()
            text = snap.to_json()
            back = RouteSnapshot.from_json(text)
            if back != snap or back.to_json() != text:
                unstable += 1
            path = tmp_path / f"snap{i}.elems"
            write_elems([rib(snap.timestamp, c, a, p, *hp.hops) for p, c, a, hp in snap.entries()], path)
            first = path.read_bytes()
            reloaded = load_elem_files([path])
            write_elems(reloaded, path)
            rebuilt = SnapshotBuilder(snap.timestamp)
            for e in reloaded:
                rebuilt.put(e.prefix, e.collector, e.peer, e.path)
            if path.read_bytes() != first or rebuilt.freeze() != snap:
                unstable += 1
        d["note"] = f"{unstable} unstable round-trips"
        assert unstable == 0
