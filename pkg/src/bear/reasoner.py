"""Multi-step explanation pipeline.

describe -> classify (N self-consistency runs) -> vote -> consensus report ->
final report, plus the inconclusive path for partial collector data and the
hierarchical summarization used when the routing data exceeds a token budget.
"""

from __future__ import annotations

import logging
import math
import random
from collections import Counter
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Optional

from bear import analysis
from bear.analysis import AnalysisFacts, EventType, analyze_changes
from bear.llm import (
    CompletionRequest,
    Gateway,
    ProviderConfig,
    build_prompt,
    estimate_tokens,
    parse_label,
)
from bear.model import EventSpec, Prefix, RouteSnapshot, SnapshotBuilder, parse_prefix
from bear.seeding import derive_seed
from bear.snapshots import SnapshotTriple

logger = logging.getLogger(__name__)

TIE_POLICIES = ("extra-round", "inconclusive")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage} stage failed: {cause}")


class ClassificationParseError(ValueError):
    pass


class PartitionError(ValueError):
    pass


class PartitionNotNeeded(PartitionError):
    pass


class SummarizationError(RuntimeError):
    def __init__(self, level: int, batch: int, cause: BaseException):
        self.level = level
        self.batch = batch
        super().__init__(f"summarization failed at level {level}, batch {batch}: {cause}")


@dataclass(frozen=True)
class SelfConsistencyConfig:
    n_runs: int = 5
    tie_policy: str = "extra-round"

    def __post_init__(self) -> None:
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if self.tie_policy not in TIE_POLICIES:
            raise ValueError(f"tie_policy must be one of {TIE_POLICIES}")


@dataclass
class ExplainConfig:
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    consistency: SelfConsistencyConfig = field(default_factory=SelfConsistencyConfig)
    seed: int = 0
    token_limit: Optional[int] = None
    batch_size: int = 5
    token_margin: float = 0.2
    max_workers: int = 1


@dataclass(frozen=True)
class ChangeReportText:
    text: str
    source_run: Any

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("change report is empty")


@dataclass
class AnomalyReport:
    event_type: EventType
    target_prefix: Prefix
    sub_prefix: Optional[Prefix] = None
    offender: Optional[int] = None
    affected_peers: int = 0
    detection_rate: float = 0.0
    narrative: str = ""
    recommendations: list[str] = field(default_factory=list)
    conclusive: bool = True
    missing_collectors: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.conclusive:
            if not self.missing_collectors:
                raise ValueError("an inconclusive report must name the collectors to consult")
            if not any("collect" in r.lower() for r in self.recommendations):
                raise ValueError("an inconclusive report must recommend further collection")

    def to_dict(self) -> dict:
        return {
            "event_type": self.event_type.value,
            "target_prefix": str(self.target_prefix),
            "sub_prefix": None if self.sub_prefix is None else str(self.sub_prefix),
            "offender": self.offender,
            "affected_peers": self.affected_peers,
            "detection_rate": self.detection_rate,
            "narrative": self.narrative,
            "recommendations": list(self.recommendations),
            "conclusive": self.conclusive,
            "missing_collectors": list(self.missing_collectors),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> AnomalyReport:
        return cls(
            event_type=EventType(doc["event_type"]),
            target_prefix=parse_prefix(doc["target_prefix"]),
            sub_prefix=None if doc.get("sub_prefix") is None else parse_prefix(doc["sub_prefix"]),
            offender=doc.get("offender"),
            affected_peers=doc.get("affected_peers", 0),
            detection_rate=doc.get("detection_rate", 0.0),
            narrative=doc.get("narrative", ""),
            recommendations=list(doc.get("recommendations", [])),
            conclusive=doc.get("conclusive", True),
            missing_collectors=list(doc.get("missing_collectors", [])),
        )


@dataclass
class SummarizationPlan:
    segment_axis: Optional[str]
    segment_count: int
    batch_size: int
    level_sizes: list[int]
    segments: list[str] = field(default_factory=list)
    # Per level, the input indices summarized together in each batch.
    assignments: list[list[list[int]]] = field(default_factory=list)

    @property
    def levels(self) -> int:
        return len(self.level_sizes)


@dataclass
class ExplainOutcome:
    report: AnomalyReport
    labels: list[EventType]
    change_reports: list[ChangeReportText]
    consensus: Optional[ChangeReportText]
    plan: Optional[SummarizationPlan] = None


# -- single steps --------------------------------------------------------------


def _snapshot_context(triple: SnapshotTriple, facts: AnalysisFacts) -> dict:
    return {
        "target_prefix": triple.spec.prefix,
        "history": triple.history,
        "before": triple.before,
        "after": triple.after,
        "facts": facts,
    }


def describe_changes(
    triple: SnapshotTriple,
    gateway: Gateway,
    run_seed: int,
    facts: Optional[AnalysisFacts] = None,
    request: Optional[CompletionRequest] = None,
) -> ChangeReportText:
    if request is None:
        facts = facts if facts is not None else analyze_changes(triple)
        request = build_prompt("describe", _snapshot_context(triple, facts))
    result = gateway.complete(request.with_seed(run_seed))
    return ChangeReportText(result.text, run_seed)


def classify_event(
    change_report: ChangeReportText,
    triple: SnapshotTriple,
    gateway: Gateway,
    run_seed: int,
    facts: Optional[AnalysisFacts] = None,
) -> EventType:
    facts = facts if facts is not None else analyze_changes(triple)
    request = build_prompt("classify", {"change_report": change_report.text, "facts": facts}, seed=run_seed)
    text = gateway.complete(request).text
    label = parse_label(text)
    if label is None:
        raise ClassificationParseError(f"no '{'FINAL ANSWER:'}' line with a known label in: {text[-200:]!r}")
    return label


def vote(labels: Sequence[EventType]) -> Optional[EventType]:
    """Plurality label, or None when the top count is shared."""
    if not labels:
        raise ValueError("cannot vote on an empty list")
    counts = Counter(labels)
    best = max(counts.values())
    winners = [label for label, n in counts.items() if n == best]
    return winners[0] if len(winners) == 1 else None


def synthesize_consensus(
    reports: Sequence[ChangeReportText],
    majority: EventType,
    gateway: Gateway,
    facts: Optional[AnalysisFacts] = None,
    seed: Optional[int] = None,
) -> ChangeReportText:
    if not reports:
        raise ValueError("no change reports to merge")
    if len(reports) == 1:
        return ChangeReportText(reports[0].text, "consensus")
    ctx = {"reports": [r.text for r in reports], "majority": majority, "facts": facts}
    if facts is None:
        raise ValueError("consensus needs the analysis facts")
    result = gateway.complete(build_prompt("consensus", ctx, seed=seed))
    return ChangeReportText(result.text, "consensus")


def split_report(text: str) -> tuple[str, list[str]]:
    """Split provider output into narrative and the bullets under ``Recommendations:``."""
    lines = text.splitlines()
    for i, line in enumerate(lines):
        if line.strip().lower().rstrip(":").strip("#* ") == "recommendations":
            recs = []
            for item in lines[i + 1 :]:
                s = item.strip()
                if not s:
                    continue
                if s[:2] in ("- ", "* ", "• "):
                    recs.append(s[2:].strip())
                elif s[:1].isdigit() and s[1:3].lstrip().startswith((".", ")")):
                    recs.append(s.split(maxsplit=1)[1] if " " in s else s)
                else:
                    break
            return "\n".join(lines[:i]).rstrip(), recs
    return text.rstrip(), []


def _cross_fill(facts: AnalysisFacts, label: EventType) -> tuple[Optional[Prefix], Optional[int]]:
    if label is EventType.NO_ANOMALY:
        return None, None
    try:
        offender = analysis.identify_offender(facts, label)
    except analysis.AnalysisError:
        offender = None
    return analysis.triggering_sub_prefix(facts, label), offender


def _rate(facts: AnalysisFacts) -> float:
    return analysis.detection_rate(facts) if facts.total_peer_count else 0.0


def collection_recommendation(missing: Sequence[str]) -> str:
    return "Collect BGP data from additional collectors (" + ", ".join(missing) + ") and re-run the analysis."


def generate_report(
    triple: SnapshotTriple,
    consensus: ChangeReportText,
    label: EventType,
    gateway: Gateway,
    facts: Optional[AnalysisFacts] = None,
    inconclusive: bool = False,
    missing_collectors: Sequence[str] = (),
    seed: Optional[int] = None,
) -> AnomalyReport:
    facts = facts if facts is not None else analyze_changes(triple)
    ctx = _snapshot_context(triple, facts)
    ctx.update(change_report=consensus.text, label=label)
    if inconclusive:
        ctx.update(inconclusive=True, missing_collectors=list(missing_collectors))
    text = gateway.complete(build_prompt("final_report", ctx, seed=seed)).text
    narrative, recs = split_report(text)
    if inconclusive:
        needed = collection_recommendation(missing_collectors)
        if not any("collect" in r.lower() for r in recs):
            recs.append(needed)
        return AnomalyReport(
            event_type=EventType.NO_ANOMALY,
            target_prefix=triple.spec.prefix,
            affected_peers=facts.affected_peer_count,
            detection_rate=_rate(facts),
            narrative=narrative,
            recommendations=recs,
            conclusive=False,
            missing_collectors=list(missing_collectors),
        )
    sub, offender = _cross_fill(facts, label)
    return AnomalyReport(
        event_type=label,
        target_prefix=triple.spec.prefix,
        sub_prefix=sub,
        offender=offender,
        affected_peers=facts.affected_peer_count,
        detection_rate=_rate(facts),
        narrative=narrative,
        recommendations=recs,
    )


# -- full pipeline ---------------------------------------------------------------


def _run_once(triple, gateway, facts, describe_request, seed) -> tuple[ChangeReportText, EventType]:
    try:
        report = describe_changes(triple, gateway, seed, facts, describe_request)
    except Exception as exc:
        raise PipelineError("describe", exc) from exc
    try:
        try:
            label = classify_event(report, triple, gateway, seed, facts)
        except ClassificationParseError:
            logger.info("unparseable classification for run seed %d; retrying once", seed)
            label = classify_event(report, triple, gateway, derive_seed(seed, "retry"), facts)
    except Exception as exc:
        raise PipelineError("classify", exc) from exc
    return report, label


def _self_consistency(triple, gateway, facts, config: ExplainConfig):
    describe_request = build_prompt("describe", _snapshot_context(triple, facts))
    n = config.consistency.n_runs
    seeds = [derive_seed(config.seed, "run", i) for i in range(n)]
    if config.max_workers > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
            runs = list(pool.map(lambda s: _run_once(triple, gateway, facts, describe_request, s), seeds))
    else:
        runs = [_run_once(triple, gateway, facts, describe_request, s) for s in seeds]
    reports = [r for r, _ in runs]
    labels = [lbl for _, lbl in runs]
    winner = vote(labels)
    if winner is None and config.consistency.tie_policy == "extra-round":
        report, label = _run_once(triple, gateway, facts, describe_request, derive_seed(config.seed, "run", n))
        reports.append(report)
        labels.append(label)
        winner = vote(labels)
    return reports, labels, winner


def _explain_direct(spec: EventSpec, triple: SnapshotTriple, config: ExplainConfig, gateway: Gateway) -> ExplainOutcome:
    try:
        facts = analyze_changes(triple)
    except analysis.AnalysisError as exc:
        raise PipelineError("analyze", exc) from exc
    reports, labels, winner = _self_consistency(triple, gateway, facts, config)
    tied = winner is None
    majority = winner if winner is not None else EventType.NO_ANOMALY
    try:
        consensus = synthesize_consensus(reports, majority, gateway, facts, seed=derive_seed(config.seed, "consensus"))
    except Exception as exc:
        raise PipelineError("consensus", exc) from exc
    try:
        if tied:
            present = set(triple.before.collectors()) | set(triple.after.collectors())
            missing = [c for c in triple.history.collectors() if c not in present] or triple.history.collectors()
            missing = missing or sorted(present)
            report = generate_report(
                triple, consensus, majority, gateway, facts, inconclusive=True, missing_collectors=missing,
                seed=derive_seed(config.seed, "report"),
            )
        else:
            report = generate_report(triple, consensus, majority, gateway, facts, seed=derive_seed(config.seed, "report"))
    except Exception as exc:
        raise PipelineError("final_report", exc) from exc
    return ExplainOutcome(report, labels, reports, consensus)


def explain_detailed(
    spec: EventSpec, triple: SnapshotTriple, config: ExplainConfig, gateway: Optional[Gateway] = None
) -> ExplainOutcome:
    gateway = gateway or Gateway(config.provider)
    if config.token_limit is not None and triple_tokens(triple, gateway.estimate) > config.token_limit:
        return _explain_hierarchical(spec, triple, config, gateway)
    return _explain_direct(spec, triple, config, gateway)


def explain(
    spec: EventSpec, triple: SnapshotTriple, config: ExplainConfig, gateway: Optional[Gateway] = None
) -> AnomalyReport:
    return explain_detailed(spec, triple, config, gateway).report


def explain_partial(
    spec: EventSpec,
    full_history: RouteSnapshot,
    subset_before: RouteSnapshot,
    subset_after: RouteSnapshot,
    config: ExplainConfig,
    gateway: Optional[Gateway] = None,
) -> AnomalyReport:
    """Explain from a collector subset, falling back to an inconclusive report.

    Whether the subset holds evidence is decided by the deterministic facts,
    not by the provider.
    """
    gateway = gateway or Gateway(config.provider)
    triple = SnapshotTriple(full_history, subset_before, subset_after, spec)
    try:
        facts = analyze_changes(triple)
    except analysis.AnalysisError:
        facts = analysis.empty_facts(spec.prefix)
    present = set(subset_before.collectors()) | set(subset_after.collectors())
    missing = [c for c in full_history.collectors() if c not in present]
    if facts.evidence_facts() or not missing:
        return explain(spec, triple, config, gateway)
    consensus = ChangeReportText(
        analysis.render_facts_text(facts) if facts.facts else "No routes to the target prefix in the selected collectors.",
        "consensus",
    )
    try:
        return generate_report(
            triple, consensus, EventType.NO_ANOMALY, gateway, facts, inconclusive=True, missing_collectors=missing,
            seed=derive_seed(config.seed, "report"),
        )
    except Exception as exc:
        raise PipelineError("final_report", exc) from exc


# -- oversized events --------------------------------------------------------------


def triple_tokens(triple: SnapshotTriple, estimator: Callable[[str], int] = estimate_tokens) -> int:
    return sum(estimator(s.to_json()) for s in (triple.history, triple.before, triple.after))


def split_triple(triple: SnapshotTriple, axis: str) -> dict[str, SnapshotTriple]:
    """One sub-triple per collector or per peer ASN, built in a single pass."""
    if axis not in ("collector", "peer"):
        raise ValueError(f"unknown partition axis {axis!r}")
    builders: dict[str, list[SnapshotBuilder]] = {}
    snaps = (triple.history, triple.before, triple.after)
    for idx, snap in enumerate(snaps):
        for prefix, collector, peer, path in snap.entries():
            key = collector if axis == "collector" else f"AS{peer}"
            group = builders.get(key)
            if group is None:
                group = builders[key] = [SnapshotBuilder(s.timestamp) for s in snaps]
            group[idx].put(prefix, collector, peer, path)
    order = sorted(builders, key=lambda k: (len(k), k) if axis == "peer" else k)
    return {
        key: SnapshotTriple(*(b.freeze() for b in builders[key]), triple.spec)
        for key in order
    }


def summarization_levels(m: int, x: int) -> list[int]:
    if m < 1 or x < 2:
        raise ValueError("need at least one report and a batch size of at least 2")
    sizes = []
    while True:
        m = math.ceil(m / x)
        sizes.append(m)
        if m == 1:
            return sizes


def plan_partition(
    triple: SnapshotTriple,
    token_limit: int,
    estimator: Callable[[str], int] = estimate_tokens,
    margin: float = 0.2,
    batch_size: int = 5,
) -> SummarizationPlan:
    total = triple_tokens(triple, estimator)
    if total <= token_limit:
        raise PartitionNotNeeded(f"routing data ({total} tokens) already fits the limit of {token_limit}")
    budget = token_limit * (1.0 - margin)
    options = []
    largest: tuple[int, str, str] = (0, "", "")
    for axis in ("collector", "peer"):
        segments = split_triple(triple, axis)
        sizes = {k: triple_tokens(seg, estimator) for k, seg in segments.items()}
        big = max(sizes, key=sizes.get)
        largest = max(largest, (sizes[big], axis, big))
        if sizes[big] <= budget:
            options.append((len(segments), axis, list(segments)))
    if not options:
        size, axis, key = largest
        raise PartitionError(
            f"no partition fits {budget:.0f} tokens; largest segment is {axis} {key} with {size} tokens"
        )
    count, axis, keys = min(options, key=lambda o: o[0])
    return SummarizationPlan(axis, count, batch_size, summarization_levels(count, batch_size), keys)


def hierarchical_summarize(
    segment_reports: Sequence[str], x: int, gateway: Gateway, seed: int
) -> tuple[str, SummarizationPlan]:
    if x < 2:
        raise ValueError("batch size must be at least 2")
    if not segment_reports:
        raise ValueError("nothing to summarize")
    rng = random.Random(seed)
    plan = SummarizationPlan(None, len(segment_reports), x, [])
    current = list(segment_reports)
    level = 0
    while True:
        level += 1
        order = list(range(len(current)))
        rng.shuffle(order)
        batches = [order[i : i + x] for i in range(0, len(order), x)]
        outputs = []
        for b, batch in enumerate(batches):
            request = build_prompt(
                "summarize", {"reports": [current[i] for i in batch]}, seed=derive_seed(seed, level, b)
            )
            try:
                outputs.append(gateway.complete(request).text)
            except Exception as exc:
                raise SummarizationError(level, b, exc) from exc
        plan.assignments.append(batches)
        plan.level_sizes.append(len(outputs))
        current = outputs
        if len(current) == 1:
            return current[0], plan


def _explain_hierarchical(spec, triple, config: ExplainConfig, gateway: Gateway) -> ExplainOutcome:
    plan = plan_partition(triple, config.token_limit, gateway.estimate, config.token_margin, config.batch_size)
    segments = split_triple(triple, plan.segment_axis)
    texts: list[str] = []
    seg_reports: list[AnomalyReport] = []
    for i, key in enumerate(plan.segments):
        seg = segments[key]
        if seg.before.path_count() == 0 and seg.after.path_count() == 0:
            continue
        sub_config = replace(config, seed=derive_seed(config.seed, "segment", key), token_limit=None)
        outcome = _explain_direct(spec, seg, sub_config, gateway)
        seg_reports.append(outcome.report)
        texts.append(outcome.report.narrative)
    if not texts:
        raise PipelineError("partition", PartitionError("no segment carries before/after routes"))
    summary, realized = hierarchical_summarize(texts, config.batch_size, gateway, derive_seed(config.seed, "summary"))
    realized.segment_axis = plan.segment_axis
    realized.segments = plan.segments
    anomalous = [r.event_type for r in seg_reports if r.event_type is not EventType.NO_ANOMALY]
    if anomalous:
        counts = Counter(anomalous)
        best = max(counts.values())
        label = next(t for t in analysis.ANOMALY_TYPES if counts.get(t) == best)
    else:
        label = EventType.NO_ANOMALY
    facts = analyze_changes(triple)
    sub, offender = _cross_fill(facts, label)
    narrative, recs = split_report(summary)
    if not recs:
        recs = next((r.recommendations for r in seg_reports if r.event_type is label), [])
    report = AnomalyReport(
        event_type=label,
        target_prefix=spec.prefix,
        sub_prefix=sub,
        offender=offender,
        affected_peers=facts.affected_peer_count,
        detection_rate=_rate(facts),
        narrative=narrative,
        recommendations=list(recs),
    )
    return ExplainOutcome(report, [r.event_type for r in seg_reports], [], None, realized)
