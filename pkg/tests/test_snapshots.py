import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bear.elems import ElemSource, announce, rib, withdraw
from bear.model import AsPath, EventSpec, RouteSnapshot, SnapshotBuilder, parse_prefix
from bear.snapshots import (
    MissingDumpError,
    ReplayStats,
    SnapshotError,
    SnapshotTriple,
    WindowError,
    after_window,
    apply_elem,
    build_after,
    build_before,
    build_history,
    build_triple,
    collect_related_prefixes,
    history_timestamp,
    replay,
)
from oracles import history_ts_bruteforce, triple_oracle
from strategies import random_elem_sequence

P = parse_prefix
PFX = P("10.0.0.0/8")
T = 1685010000


def snap(ts=0, **entries):
    b = SnapshotBuilder(ts)
    for key, hops in entries.items():
        collector, peer = key.split("_")
        b.put(PFX, collector, int(peer), AsPath(tuple(hops)))
    return b.freeze()


class TestHistoryTimestamp:
    def test_boundary_zero(self):
        assert history_timestamp(28800) == 0

    def test_mid_day(self):
        assert history_timestamp(1685010000) == 1684972800

    def test_exact_boundary(self):
        assert history_timestamp(1684972800) == 1684944000

    def test_too_early(self):
        with pytest.raises(SnapshotError):
            history_timestamp(28799)

    @given(st.integers(28800, 2**40))
    def test_range_and_alignment(self, t):
        h = history_timestamp(t)
        assert h % 28800 == 0
        assert t - 57600 < h <= t - 28800

    @given(st.integers(28800, 2**34))
    def test_matches_bruteforce(self, t):
        assert history_timestamp(t) == history_ts_bruteforce(t)


class TestApplyElem:
    def test_announce_replaces(self):
        s = snap(rrc00_64500=[64500, 2, 3])
        out = apply_elem(s, announce(1, "rrc00", 64500, PFX, 64500, 7, 3))
        assert out.get(PFX, "rrc00", 64500) == AsPath.of(64500, 7, 3)

    def test_withdraw_deletes(self):
        s = snap(rrc00_64500=[64500, 2, 3])
        out = apply_elem(s, withdraw(1, "rrc00", 64500, PFX))
        assert out.get(PFX, "rrc00", 64500) is None
        assert out == RouteSnapshot(0, {})

    def test_missing_withdraw_is_counted(self):
        stats = ReplayStats()
        out = apply_elem(RouteSnapshot(0, {}), withdraw(1, "rrc00", 64500, PFX), stats)
        assert out == RouteSnapshot(0, {})
        assert stats.missing_withdrawals == 1

    def test_duplicate_is_idempotent(self):
        stats = ReplayStats()
        s = snap(rrc00_1=[1, 2])
        out = apply_elem(s, announce(1, "rrc00", 1, PFX, 1, 2), stats)
        assert out == s and stats.duplicate_announcements == 1

    def test_pure(self):
        s = snap(rrc00_1=[1, 2])
        apply_elem(s, withdraw(1, "rrc00", 1, PFX))
        assert s.get(PFX, "rrc00", 1) == AsPath.of(1, 2)

    @given(
        st.dictionaries(st.integers(1, 20), st.lists(st.integers(1, 99), max_size=3), max_size=6),
        st.integers(1, 20),
        st.lists(st.integers(1, 99), max_size=4),
    )
    def test_inversion(self, table, peer, tail):
        b = SnapshotBuilder(0)
        for p, rest in table.items():
            b.put(PFX, "rrc00", p, AsPath((p, *rest)))
        s = b.freeze()
        key = (PFX, "rrc00", peer)
        old = s.get(*key)
        out = apply_elem(apply_elem(s, announce(1, "rrc00", peer, PFX, peer, *tail)), withdraw(2, "rrc00", peer, PFX))
        assert out.get(*key) is None
        if old is not None:
            assert apply_elem(out, announce(3, "rrc00", peer, PFX, *old.hops)) == s
        else:
            assert out == s


class TestBuilders:
    def source(self, *elems):
        return ElemSource(list(elems))

    def test_history_last_record_wins(self):
        src = self.source(rib(0, "rrc00", 1, PFX, 1, 5), rib(60, "rrc00", 1, PFX, 1, 2, 5))
        assert build_history(src, {PFX}, 0).get(PFX, "rrc00", 1) == AsPath.of(1, 2, 5)

    def test_history_three_peers(self):
        src = self.source(*(rib(0, "rrc00", p, PFX, p, 5) for p in (1, 2, 3)))
        assert build_history(src, {PFX}, 0).path_count() == 3

    def test_history_missing(self):
        with pytest.raises(MissingDumpError):
            build_history(self.source(), {PFX}, 0)

    def test_before_identity(self):
        h = snap(0, rrc00_1=[1, 5])
        assert build_before(h, [], T).routes == h.routes

    def test_before_window_is_half_open(self):
        h = snap(history_timestamp(T), rrc00_1=[1, 5])
        src = self.source(announce(T - 301, "rrc00", 1, PFX, 1, 6), announce(T - 299, "rrc00", 1, PFX, 1, 7))
        before = build_before(h, src.updates(h.timestamp, T - 300), T)
        assert before.get(PFX, "rrc00", 1) == AsPath.of(1, 6)
        with pytest.raises(WindowError):
            build_before(h, src.updates(0, T + 1000), T)

    def test_before_announce_then_withdraw(self):
        h = snap(history_timestamp(T))
        elems = [announce(T - 1000, "rrc00", 1, PFX, 1, 5), withdraw(T - 900, "rrc00", 1, PFX)]
        assert build_before(h, elems, T).get(PFX, "rrc00", 1) is None

    def test_after_window_default(self):
        before = snap(T - 300, rrc00_1=[1, 5])
        src = self.source(announce(T + 299, "rrc00", 1, PFX, 1, 6), announce(T + 300, "rrc00", 1, PFX, 1, 7))
        lo, hi = after_window(T)
        after = build_after(before, src.updates(lo, hi), T)
        assert after.get(PFX, "rrc00", 1) == AsPath.of(1, 6)

    def test_after_window_truncated_by_end(self):
        lo, hi = after_window(T, T + 100)
        assert (lo, hi - 1) == (T - 300, T + 99)
        with pytest.raises(WindowError):
            after_window(T, T)

    def test_after_identity(self):
        before = snap(T - 300, rrc00_1=[1, 5])
        assert build_after(before, [], T).routes == before.routes

    def test_related_prefixes(self):
        index = [P("10.0.0.0/9"), P("11.0.0.0/8")]
        assert collect_related_prefixes(index, PFX) == {PFX, P("10.0.0.0/9")}
        assert collect_related_prefixes([PFX], PFX) == {PFX}
        assert P("0.0.0.0/0") in collect_related_prefixes([P("0.0.0.0/0")], PFX)

    def test_replay_rejects_unsorted(self):
        with pytest.raises(WindowError):
            replay(RouteSnapshot(0, {}), [announce(5, "c", 1, PFX, 1), announce(4, "c", 1, PFX, 1)], 10, 0, 10)


def random_elems(rng, t, n):
    return random_elem_sequence(rng, t, n, history_timestamp(t))


def as_state(s: RouteSnapshot) -> dict:
    return {(p, c, a): path.hops for p, c, a, path in s.entries()}


@pytest.mark.parametrize("seed", range(20))
def test_replay_matches_last_write_oracle(seed):
    rng = random.Random(seed)
    t = 1685010000 + rng.randint(0, 10**6)
    elems = random_elems(rng, t, 80)
    triple = build_triple(ElemSource(elems), EventSpec(PFX, t))
    h, b, a = triple_oracle(elems, t)
    assert (as_state(triple.history), as_state(triple.before), as_state(triple.after)) == (h, b, a)

    touched = {e.key for e in elems if e.record_type.value != "R" and t - 300 <= e.timestamp < t + 300}
    for key in triple.before.keys() | triple.after.keys():
        if key not in touched:
            assert triple.before.get(*key) == triple.after.get(*key)


def test_replay_is_deterministic(tmp_path):
    elems = random_elems(random.Random(5), T, 60)
    spec = EventSpec(PFX, T, None, "e")
    build_triple(ElemSource(elems), spec).save(tmp_path / "a")
    build_triple(ElemSource(elems), spec).save(tmp_path / "b")
    for name in ("history", "before", "after", "event"):
        assert (tmp_path / "a" / f"{name}.json").read_bytes() == (tmp_path / "b" / f"{name}.json").read_bytes()
    loaded = SnapshotTriple.load(tmp_path / "a")
    assert loaded.spec == spec and loaded.after == build_triple(ElemSource(elems), spec).after


def test_triple_requires_history_before_event():
    s = RouteSnapshot(T, {})
    with pytest.raises(SnapshotError):
        SnapshotTriple(s, s, s, EventSpec(PFX, T))
