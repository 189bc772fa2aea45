"""Seeded background collector feeds (RIB dumps plus benign update churn).

Stand-in for real collector archives when generating synthetic events offline:
paths keep their origin, most route flaps revert within the hour and one
prefix churns heavily so that the consistency check has something to reject.
"""

from __future__ import annotations

import ipaddress
import random
from dataclasses import dataclass
from typing import Optional

from bear.elems import BgpElem, RecordType
from bear.model import AsPath, Prefix
from bear.snapshots import RIB_INTERVAL

DEFAULT_START = 1684972800  # 2023-05-25T00:00:00Z

TRANSIT_POOL = (
    174, 701, 1239, 1299, 2828, 2914, 3257, 3320, 3356, 3491, 5511, 6453, 6461, 6762, 6830,
    6939, 7018, 7473, 9002, 12956, 1273, 4637, 4826, 7922, 8220, 9304, 12389, 20473, 24482, 31133,
)


@dataclass
class FeedConfig:
    seed: int = 0
    start: int = DEFAULT_START
    hours: int = 48
    n_collectors: int = 24
    peers_per_collector: tuple[int, int] = (2, 6)
    peer_pool: int = 60
    n_prefixes: int = 6
    flap_rate_per_day: float = 0.5
    persistent_rate_per_day: float = 0.01
    noisy_prefixes: int = 1
    noisy_rate_per_day: float = 2.0


def _collector_names(n: int) -> list[str]:
    return [f"rrc{i:02d}" for i in range(n)]


def _prefixes(rng: random.Random, n: int) -> list[Prefix]:
    out: list[Prefix] = []
    used = set()
    while len(out) < max(1, n - 2):
        a, b = rng.randint(11, 223), rng.randint(0, 255)
        length = rng.choice((16, 20, 22, 24))
        net = ipaddress.ip_network(f"{a}.{b}.{rng.randint(0, 255)}.0/{length}", strict=False)
        if net.network_address.packed[0] in (127,) or net in used:
            continue
        if any(net.overlaps(o) for o in out):
            continue
        used.add(net)
        out.append(net)
    if n >= 2:
        # A covering prefix with a customer more-specific beneath it.
        cover = out[0]
        if cover.prefixlen < 24:
            out.append(next(cover.subnets(new_prefix=cover.prefixlen + 2)))
    if n >= 3:
        out.append(ipaddress.ip_network(f"2001:db8:{rng.randint(1, 0xffff):x}::/48"))
    return out[:n]


def generate_feed(config: Optional[FeedConfig] = None) -> list[BgpElem]:
    cfg = config or FeedConfig()
    rng = random.Random(cfg.seed)
    end = cfg.start + cfg.hours * 3600
    collectors = _collector_names(cfg.n_collectors)
    peer_asns = rng.sample(range(2000, 65000), cfg.peer_pool)
    transit = [a for a in TRANSIT_POOL if a not in peer_asns]
    prefixes = _prefixes(rng, cfg.n_prefixes)
    origins = {}
    upstreams = {}
    taken = set(peer_asns) | set(transit)
    for prefix in prefixes:
        origin = rng.randint(10000, 399999)
        while origin in taken:
            origin = rng.randint(10000, 399999)
        taken.add(origin)
        origins[prefix] = origin
        upstreams[prefix] = rng.sample(transit, 2)
    noisy = set(rng.sample(prefixes, min(cfg.noisy_prefixes, len(prefixes))))

    def random_path(peer: int, prefix: Prefix) -> AsPath:
        up = rng.choice(upstreams[prefix])
        middle = [a for a in rng.sample(transit, rng.randint(0, 2)) if a not in (peer, up)]
        hops = [peer, *middle]
        if up != peer:
            hops.append(up)
        hops.append(origins[prefix])
        if rng.random() < 0.1:
            hops.append(origins[prefix])
        return AsPath(tuple(hops))

    sessions = []
    for collector in collectors:
        lo, hi = cfg.peers_per_collector
        for peer in rng.sample(peer_asns, rng.randint(lo, hi)):
            sessions.append((collector, peer))

    # (time, order, collector, peer, prefix, path-or-None)
    events: list[tuple[int, int, str, int, Prefix, Optional[AsPath]]] = []
    state: dict[tuple[Prefix, str, int], AsPath] = {}
    order = 0
    days = cfg.hours / 24
    for collector, peer in sessions:
        for prefix in prefixes:
            base = random_path(peer, prefix)
            state[(prefix, collector, peer)] = base
            current = base
            flaps = _poisson(rng, cfg.flap_rate_per_day * days)
            persistent_rate = cfg.noisy_rate_per_day if prefix in noisy else cfg.persistent_rate_per_day
            changes = _poisson(rng, persistent_rate * days)
            timeline = []
            for _ in range(flaps):
                t = rng.randint(cfg.start + 1, end - 1)
                back = t + rng.randint(60, 3600)
                if rng.random() < 0.3:
                    timeline.append((t, None))
                else:
                    timeline.append((t, random_path(peer, prefix)))
                timeline.append((back, "revert"))
            for _ in range(changes):
                timeline.append((rng.randint(cfg.start + 1, end - 1), "switch"))
            timeline.sort(key=lambda item: item[0])
            for t, action in timeline:
                if t >= end:
                    continue
                if action == "revert":
                    path = current
                elif action == "switch":
                    current = random_path(peer, prefix)
                    path = current
                else:
                    path = action
                events.append((t, order, collector, peer, prefix, path))
                order += 1
    events.sort(key=lambda e: (e[0], e[1]))

    elems: list[BgpElem] = []
    dumps = list(range(cfg.start, end, RIB_INTERVAL))
    live = dict(state)
    i = 0
    for d, dump_ts in enumerate(dumps):
        next_dump = dumps[d + 1] if d + 1 < len(dumps) else end
        for (prefix, collector, peer), path in sorted(
            live.items(), key=lambda kv: (kv[0][1], kv[0][2], str(kv[0][0]))
        ):
            elems.append(BgpElem(RecordType.RIB, dump_ts, collector, peer, prefix, path))
        while i < len(events) and events[i][0] < next_dump:
            t, _o, collector, peer, prefix, path = events[i]
            key = (prefix, collector, peer)
            if path is None:
                elems.append(BgpElem(RecordType.WITHDRAW, t, collector, peer, prefix))
                live.pop(key, None)
            else:
                elems.append(BgpElem(RecordType.ANNOUNCE, t, collector, peer, prefix, path))
                live[key] = path
            i += 1
    elems.sort(key=lambda e: e.timestamp)
    return elems


def _poisson(rng: random.Random, lam: float) -> int:
    # Knuth's method; lam stays small here.
    limit, k, p = pow(2.718281828459045, -lam), 0, 1.0
    while True:
        p *= rng.random()
        if p <= limit:
            return k
        k += 1
