"""Collector-subset sweeps, report rendering and corpus statistics."""

from __future__ import annotations

import csv
import io
import json
import logging
import random
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from statistics import mean
from typing import Optional, Union

from bear.analysis import EventType
from bear.llm import Gateway, ProviderConfig, estimate_tokens
from bear.reasoner import AnomalyReport, ExplainConfig, SelfConsistencyConfig, explain_partial, triple_tokens
from bear.seeding import derive_seed, round_half_up
from bear.snapshots import SnapshotTriple
from bear.synth import SyntheticEvent

logger = logging.getLogger(__name__)

SWEEP_FRACTIONS = (0.04, 0.08, 0.16, 0.33, 1.0)
CSV_HEADER = ("fraction", "presence_ratio", "accuracy", "avg_input_tokens", "avg_output_tokens")


class SelectionError(ValueError):
    pass


def collector_count(fraction: float, total: int) -> int:
    if not 0.0 < fraction <= 1.0:
        raise SelectionError(f"collector fraction {fraction} outside (0, 1]")
    if total < 1:
        raise SelectionError("no collectors to select from")
    return min(total, max(1, round_half_up(fraction * total)))


def all_collectors(triple: SnapshotTriple) -> list[str]:
    return triple.collectors()


def select_collectors(collectors: Sequence[str], fraction: float, seed: int) -> list[str]:
    """Seeded choice of collectors.

    The shuffle depends only on the seed, so for one seed a larger fraction
    always selects a superset of a smaller one.
    """
    order = sorted(collectors)
    random.Random(derive_seed("collectors", seed)).shuffle(order)
    return sorted(order[: collector_count(fraction, len(order))])


def subset_collectors(
    triple: SnapshotTriple, selection: Union[float, Iterable[str]], seed: int = 0
) -> SnapshotTriple:
    """Keep only the selected collectors in before/after; history stays whole."""
    universe = all_collectors(triple)
    if isinstance(selection, (int, float)):
        if float(selection) == 1.0:
            return triple
        chosen = select_collectors(universe, float(selection), seed)
    else:
        chosen = sorted(set(selection))
        if not chosen:
            raise SelectionError("empty collector selection")
    return triple.restrict(collectors=chosen, history_too=False)


def presence_flag(event: SyntheticEvent, subset: SnapshotTriple) -> bool:
    return any(subset.after.get(*key) is not None for key in event.affected_keys)


def is_correct(event: SyntheticEvent, report: AnomalyReport, presence: bool) -> bool:
    if presence:
        return report.conclusive and report.event_type is event.truth.event_type
    return not report.conclusive and bool(report.missing_collectors)


@dataclass
class RunConfig:
    provider: ProviderConfig = field(default_factory=lambda: ProviderConfig(kind="perfect-mock"))
    n_runs: int = 5
    tie_policy: str = "extra-round"
    token_limit: Optional[int] = None
    batch_size: int = 5
    seeds: tuple[int, ...] = (0,)
    fractions: tuple[float, ...] = SWEEP_FRACTIONS
    max_workers: int = 1

    def __post_init__(self) -> None:
        self.seeds = tuple(self.seeds)
        self.fractions = tuple(float(f) for f in self.fractions)
        if not self.seeds:
            raise ValueError("at least one seed is required")
        for f in self.fractions:
            if not 0.0 < f <= 1.0:
                raise ValueError(f"fraction {f} outside (0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        doc = dict(doc)
        if "provider" in doc and not isinstance(doc["provider"], ProviderConfig):
            doc["provider"] = ProviderConfig.from_dict(doc["provider"])
        return cls(**doc)

    def explain_config(self, seed: int) -> ExplainConfig:
        return ExplainConfig(
            provider=self.provider,
            consistency=SelfConsistencyConfig(self.n_runs, self.tie_policy),
            seed=seed,
            token_limit=self.token_limit,
            batch_size=self.batch_size,
        )


@dataclass
class EventRow:
    event: str
    seed: int
    presence: bool
    conclusive: bool
    correct: bool
    input_tokens: int
    output_tokens: int
    predicted: Optional[str] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ExperimentResult:
    """Outcome of one (fraction, seed) pass over the corpus."""

    collector_fraction: float
    seed: int
    presence_ratio: float
    accuracy: float
    avg_input_tokens: float
    avg_output_tokens: float
    per_event_rows: list[EventRow]

    @property
    def failures(self) -> int:
        return sum(1 for r in self.per_event_rows if r.error)


def _run_event(event: SyntheticEvent, fraction: float, run_seed: int, config: RunConfig) -> EventRow:
    subset = subset_collectors(event.triple, fraction, run_seed)
    presence = presence_flag(event, subset)
    gateway = Gateway(config.provider)
    try:
        report = explain_partial(
            event.spec, subset.history, subset.before, subset.after,
            config.explain_config(derive_seed(run_seed, event.name)), gateway,
        )
    except Exception as exc:  # recorded, never fatal for the sweep
        logger.warning("event %s failed at fraction %s: %s", event.name, fraction, exc)
        return EventRow(event.name, run_seed, presence, False, False,
                        gateway.usage.input_tokens, gateway.usage.output_tokens, error=f"{type(exc).__name__}: {exc}")
    return EventRow(
        event.name, run_seed, presence, report.conclusive, is_correct(event, report, presence),
        gateway.usage.input_tokens, gateway.usage.output_tokens, report.event_type.value,
    )


def run_fraction(corpus: Sequence[SyntheticEvent], fraction: float, seed: int, config: RunConfig) -> ExperimentResult:
    if not corpus:
        raise ValueError("empty corpus")
    if config.max_workers > 1:
        with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
            rows = list(pool.map(lambda ev: _run_event(ev, fraction, seed, config), corpus))
    else:
        rows = [_run_event(ev, fraction, seed, config) for ev in corpus]
    rows.sort(key=lambda r: r.event)
    n = len(rows)
    return ExperimentResult(
        collector_fraction=fraction,
        seed=seed,
        presence_ratio=sum(r.presence for r in rows) / n,
        accuracy=sum(r.correct for r in rows) / n,
        avg_input_tokens=mean(r.input_tokens for r in rows),
        avg_output_tokens=mean(r.output_tokens for r in rows),
        per_event_rows=rows,
    )


def run_sweep(corpus: Sequence[SyntheticEvent], config: RunConfig) -> list[ExperimentResult]:
    return [run_fraction(corpus, f, s, config) for f in config.fractions for s in config.seeds]


@dataclass(frozen=True)
class SweepSummary:
    fraction: float
    presence_ratio: float
    accuracy: float
    avg_input_tokens: float
    avg_output_tokens: float
    runs: int
    failures: int


def summarize_sweep(results: Sequence[ExperimentResult]) -> list[SweepSummary]:
    """Mean over seeds, one entry per fraction in ascending order."""
    by_fraction: dict[float, list[ExperimentResult]] = {}
    for r in results:
        by_fraction.setdefault(r.collector_fraction, []).append(r)
    out = []
    for f in sorted(by_fraction):
        rs = by_fraction[f]
        out.append(SweepSummary(
            f,
            mean(r.presence_ratio for r in rs),
            mean(r.accuracy for r in rs),
            mean(r.avg_input_tokens for r in rs),
            mean(r.avg_output_tokens for r in rs),
            len(rs),
            sum(r.failures for r in rs),
        ))
    return out


def sweep_csv(results: Sequence[ExperimentResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for s in summarize_sweep(results):
        writer.writerow([
            f"{s.fraction:g}", f"{s.presence_ratio:.6f}", f"{s.accuracy:.6f}",
            f"{s.avg_input_tokens:.1f}", f"{s.avg_output_tokens:.1f}",
        ])
    return buf.getvalue()


def sweep_rows_jsonl(results: Sequence[ExperimentResult]) -> str:
    lines = []
    for r in results:
        for row in r.per_event_rows:
            doc = {"fraction": r.collector_fraction, **row.to_dict()}
            lines.append(json.dumps(doc, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


# -- reports -----------------------------------------------------------------------


def _pct(x: float) -> str:
    return f"{100 * x:.1f}%"


def render_report(report: AnomalyReport) -> str:
    """Markdown rendering with a fixed section order."""
    verdict = report.event_type.value if report.conclusive else "inconclusive"
    out = [f"# BGP event report: {report.target_prefix}", ""]

    out += ["## Summary", ""]
    if report.conclusive and report.event_type is not EventType.NO_ANOMALY:
        who = f" by AS{report.offender}" if report.offender is not None else ""
        out.append(f"A {report.event_type.value}{who} affecting {report.target_prefix}.")
    elif report.conclusive:
        out.append(f"No anomalous routing change was observed for {report.target_prefix}.")
    else:
        out.append(f"The available data is insufficient to explain the event on {report.target_prefix}.")
    out.append("")

    out += ["## Event Type", "", verdict, ""]

    out += ["## Affected Prefixes", "", f"- {report.target_prefix} (target)"]
    if report.sub_prefix is not None:
        out.append(f"- {report.sub_prefix} (more specific)")
    out.append("")

    out += ["## Path Changes", ""]
    out += [report.narrative.strip() or "(none reported)", ""]

    out += ["## Offending AS", ""]
    out += [f"AS{report.offender}" if report.offender is not None else "none identified", ""]

    out += ["## Detection Coverage", ""]
    out += [f"{report.affected_peers} affected peers, detection rate {_pct(report.detection_rate)}", ""]

    out += ["## Recommended Actions", ""]
    out += [f"- {r}" for r in report.recommendations] or ["- none"]
    out.append("")

    out += ["## Data Completeness", ""]
    if report.conclusive:
        out.append("Complete: the selected collectors carry the evidence needed for this report.")
    else:
        out.append("Incomplete. Missing collectors: " + ", ".join(report.missing_collectors))
        recs = [r for r in report.recommendations if "collect" in r.lower()]
        out.append(f"Recommendation: {recs[0]}")
    out.append("")
    return "\n".join(out)


# -- corpus statistics ----------------------------------------------------------------


@dataclass(frozen=True)
class EventStats:
    event: str
    prefixes: int
    as_paths: int
    peers: int
    collectors: int
    tokens: int
    oversized: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def triple_stats(name: str, triple: SnapshotTriple, token_limit: Optional[int] = None, divisor: int = 4) -> EventStats:
    snaps = (triple.history, triple.before, triple.after)
    peers = {(c, p) for s in snaps for _pfx, c, p, _path in s.entries()}
    tokens = triple_tokens(triple, lambda text: estimate_tokens(text, divisor))
    return EventStats(
        event=name,
        prefixes=len(triple.prefixes()),
        as_paths=sum(s.path_count() for s in snaps),
        peers=len(peers),
        collectors=len(triple.collectors()),
        tokens=tokens,
        oversized=token_limit is not None and tokens > token_limit,
    )


def corpus_stats(
    corpus: Iterable[Union[SyntheticEvent, tuple[str, SnapshotTriple]]], token_limit: Optional[int] = None
) -> list[EventStats]:
    out = []
    for item in corpus:
        name, triple = (item.name, item.triple) if isinstance(item, SyntheticEvent) else item
        out.append(triple_stats(name, triple, token_limit))
    return out

