"""Independent reference implementations used to check the package.

Each oracle is written from first principles (brute force, bit arithmetic,
plain dicts) and shares no code with the module it checks.
"""

from __future__ import annotations

import ipaddress


def history_ts_bruteforce(t: int) -> int:
    """Largest multiple of 28800 that is <= t - 28800.

    Searches candidate multiples around a float estimate and checks each one
    by multiplication and comparison only.
    """
    limit = t - 28800
    guess = int(limit / 28800.0)
    best = None
    for k in range(guess - 3, guess + 4):
        m = k * 28800
        if m <= limit and (best is None or m > best):
            best = m
    return best


def naive_replay(base: dict, elems: list[tuple]) -> dict:
    """Last write wins per (prefix, collector, peer); elems are (kind, key, hops)."""
    state = dict(base)
    for kind, key, hops in elems:
        if kind == "A":
            state[key] = tuple(hops)
        elif kind == "W":
            state.pop(key, None)
    return state


def relation_bits(a: str, b: str) -> str:
    """Prefix relation from raw integer masks."""
    na, nb = ipaddress.ip_network(a), ipaddress.ip_network(b)
    if na.version != nb.version:
        return "disjoint"
    bits = na.max_prefixlen
    ia, ib = int(na.network_address), int(nb.network_address)
    la, lb = na.prefixlen, nb.prefixlen
    if la == lb and ia == ib:
        return "equal"

    def contains(outer_addr, outer_len, inner_addr, inner_len):
        if inner_len < outer_len:
            return False
        shift = bits - outer_len
        return (outer_addr >> shift) == (inner_addr >> shift) if shift < bits else True

    if contains(ib, lb, ia, la):
        return "a-more-specific"
    if contains(ia, la, ib, lb):
        return "a-less-specific"
    return "disjoint"


def delta_sets(old, new) -> dict:
    """Expected path-delta fields via plain set arithmetic."""
    if old is None:
        return {"changed": True, "appeared": True, "withdrawn": False}
    if new is None:
        return {"changed": True, "appeared": False, "withdrawn": True, "introduced": set()}
    return {
        "changed": list(old) != list(new),
        "origin_changed": old[-1] != new[-1],
        "introduced": set(new) - set(old),
        "appeared": False,
        "withdrawn": False,
    }


def ceil_levels(m: int, x: int) -> list[int]:
    """Level sizes by repeated integer ceiling division."""
    sizes = []
    while True:
        m = -(-m // x)
        sizes.append(m)
        if m == 1:
            return sizes


def round_rule(fraction: float, total: int) -> int:
    """Collector count: nearest integer with halves rounded up, at least one."""
    scaled = fraction * total
    whole = int(scaled)
    if scaled - whole >= 0.5 - 1e-9:
        whole += 1
    return max(1, whole)


def binomial_majority(p_correct: float, n: int) -> float:
    """Probability that more than half of n independent trials are correct."""
    from math import comb

    return sum(comb(n, k) * p_correct**k * (1 - p_correct) ** (n - k) for k in range(n // 2 + 1, n + 1))


def triple_oracle(elems, t: int) -> tuple[dict, dict, dict]:
    """History/before/after as plain dicts, by sorting and replaying elems per window."""
    hist = history_ts_bruteforce(t)
    ordered = sorted(elems, key=lambda e: e.timestamp)

    def rows(pred):
        return [
            (e.record_type.value, e.key, e.path.hops if e.path else None)
            for e in ordered
            if e.record_type.value != "R" and pred(e.timestamp)
        ]

    base = naive_replay({}, [("A", e.key, e.path.hops) for e in ordered if e.record_type.value == "R"])
    before = naive_replay(base, rows(lambda ts: hist <= ts < t - 300))
    after = naive_replay(before, rows(lambda ts: t - 300 <= ts < t + 300))
    return base, before, after
