"""Language-model access: prompt assembly, token estimates and providers.

Every prompt carries fenced, machine-readable blocks (```facts, ```reports,
```context) next to the prose.  The mock providers answer from those blocks,
which keeps the whole pipeline runnable and auditable offline.
"""

from __future__ import annotations

import functools
import hashlib
import ipaddress
import json
import logging
import math
import os
import random
import threading
import time
import urllib.error
import urllib.request
from collections import Counter
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

from bear import analysis
from bear.analysis import AnalysisFacts, EventType, compact_facts, facts_from_dict, facts_to_dict
from bear.model import RouteSnapshot
from bear.seeding import derive_seed

logger = logging.getLogger(__name__)

TEMPLATE_VERSION = "bear-prompts/1"
DEFAULT_TOKEN_DIVISOR = 4
ANSWER_PREFIX = "FINAL ANSWER:"

STAGES = ("describe", "classify", "consensus", "final_report", "synth_seed", "synth_description", "summarize")

STAGE_TEMPERATURE = {
    "describe": 1.0,
    "classify": 1.0,
    "consensus": 0.0,
    "final_report": 0.0,
    "synth_seed": 1.0,
    "synth_description": 1.0,
    "summarize": 0.0,
}


class LlmError(RuntimeError):
    pass


class PromptAssemblyError(LlmError):
    def __init__(self, stage: str, missing: str):
        self.stage = stage
        self.missing = missing
        super().__init__(f"{stage} prompt is missing context field {missing!r}")


class TransportError(LlmError):
    pass


class CassetteMissError(LlmError):
    def __init__(self, digest: str):
        self.digest = digest
        super().__init__(f"no cassette entry for request {digest}")


@dataclass(frozen=True)
class CompletionRequest:
    system_text: str
    user_text: str
    temperature: float = 1.0
    max_output_tokens: int = 2048
    seed: Optional[int] = None
    stage: str = ""

    def __post_init__(self) -> None:
        if not self.user_text:
            raise ValueError("user_text must not be empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @property
    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def with_seed(self, seed: Optional[int]) -> CompletionRequest:
        return replace(self, seed=seed)


@dataclass(frozen=True)
class CompletionResult:
    text: str
    input_tokens: int
    output_tokens: int


@dataclass
class ProviderConfig:
    kind: str = "perfect-mock"
    endpoint: Optional[str] = None
    model: Optional[str] = None
    api_key: Optional[str] = None
    error_rate: float = 0.0
    seed: int = 0
    cassette_path: Optional[str] = None
    cassette_mode: str = "replay"
    inner: Optional[ProviderConfig] = None
    max_retries: int = 4
    backoff_base: float = 0.5
    backoff_cap: float = 8.0
    timeout: float = 120.0
    max_in_flight: int = 4
    token_divisor: int = DEFAULT_TOKEN_DIVISOR

    KINDS = ("remote-http", "perfect-mock", "noisy-mock", "cassette")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if not 0.0 <= self.error_rate <= 1.0:
            raise ValueError("error_rate must lie in [0, 1]")
        if self.kind == "cassette":
            if not self.cassette_path:
                raise ValueError("cassette provider needs cassette_path")
            if self.cassette_mode not in ("replay", "record"):
                raise ValueError("cassette_mode must be 'replay' or 'record'")
            if self.cassette_mode == "record" and self.inner is None:
                raise ValueError("recording a cassette needs an inner provider")

    @classmethod
    def from_env(cls, **overrides: Any) -> ProviderConfig:
        values = {
            "kind": "remote-http",
            "endpoint": os.environ.get("BEAR_LLM_ENDPOINT"),
            "model": os.environ.get("BEAR_LLM_MODEL"),
            "api_key": os.environ.get("BEAR_LLM_KEY"),
        }
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> ProviderConfig:
        doc = dict(doc)
        if doc.get("inner") is not None:
            doc["inner"] = cls.from_dict(doc["inner"])
        if doc.get("kind") == "remote-http":
            env = {
                "endpoint": os.environ.get("BEAR_LLM_ENDPOINT"),
                "model": os.environ.get("BEAR_LLM_MODEL"),
                "api_key": os.environ.get("BEAR_LLM_KEY"),
            }
            for k, v in env.items():
                doc.setdefault(k, v)
        return cls(**doc)


def estimate_tokens(text: str, divisor: int = DEFAULT_TOKEN_DIVISOR) -> int:
    """Byte-length heuristic: ceil(utf-8 bytes / divisor)."""
    if divisor <= 0:
        raise ValueError("divisor must be positive")
    return math.ceil(len(text.encode("utf-8")) / divisor)


# -- prompt templates --------------------------------------------------------

SYSTEM_ANALYST = (
    "You are a network operations analyst specialising in inter-domain routing. "
    "You read BGP routing tables collected from route collectors and explain anomalies precisely. "
    "AS paths are listed from the peer that reported them to the destination (origin) AS: "
    "the first AS is the peer, the last AS is the destination."
)

CHANGE_QUESTIONS = (
    "Does the existing path from each peer to the target IP prefix change?",
    "If it does, does the last AS (destination) change or not?",
    "Is there any new AS path to a new sub-prefix introduced?",
    "If there is, compare it to the existing path with the same peer, is there any difference?",
    "Does the last AS (destination) change or not?",
)

DESTINATION_EXAMPLES = (
    ((3356, 1299, 13335), 13335),
    ((6939, 174, 2914, 16509), 16509),
    ((701, 701, 7018, 7018, 7018), 7018),
    ((64700, 3257, 6453, 4755, 9498), 9498),
)

HIJACK_DEFINITION = (
    "BGP hijack: an AS announces an IP prefix (or a more specific part of it) that it is not "
    "entitled to originate. Routes to the prefix now end at a destination AS that never "
    "originated it before."
)
LEAK_DEFINITION = (
    "BGP route leak: an AS re-announces routes it learned to neighbours that should not receive "
    "them. The destination AS stays the legitimate one, but paths now traverse an AS that did "
    "not carry this prefix before, typically inserted between the peer and the legitimate path."
)
SUBTLETY_NOTE = (
    "The effect of an anomaly may show up in a single AS path or only on a sub-prefix of the "
    "target. Inspect every difference between the before and after tables, however small, "
    "and treat a newly announced more-specific prefix with the same care as the target itself."
)

LABELS_HELP = ", ".join(t.value for t in EventType)


def _fenced(tag: str, payload: Any) -> str:
    body = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return f"```{tag}\n{body}\n```"


def _block_body(text: str, tag: str) -> str:
    opener = f"```{tag}\n"
    start = text.find(opener)
    if start < 0:
        raise LlmError(f"prompt has no {tag} block")
    start += len(opener)
    stop = text.find("\n```", start)
    if stop < 0:
        raise LlmError(f"{tag} block is not closed")
    return text[start:stop]


def extract_block(text: str, tag: str) -> Any:
    return json.loads(_block_body(text, tag))


def render_table(name: str, snapshot: RouteSnapshot) -> str:
    lines = [f"{name} (timestamp {snapshot.timestamp})", "prefix | collector | peer | AS path"]
    for prefix, collector, peer, path in snapshot.entries():
        lines.append(f"{prefix} | {collector} | {peer} | {path}")
    if len(lines) == 2:
        lines.append("(no routes)")
    return "\n".join(lines)


def _tables(ctx: Mapping[str, Any]) -> str:
    return "\n\n".join(
        [
            render_table("HISTORY: RIB dump taken at least eight hours before the event", ctx["history"]),
            render_table("BEFORE: routing state five minutes before the event", ctx["before"]),
            render_table("AFTER: routing state after the event started", ctx["after"]),
        ]
    )


def _facts_block(facts: AnalysisFacts) -> str:
    # Rendered once per facts object; the pipeline embeds it in every prompt.
    block = facts._refs.get("__block__")
    if block is None:
        block = facts._refs["__block__"] = _fenced("facts", facts_to_dict(compact_facts(facts)))
    return block


_REQUIRED = {
    "describe": ("target_prefix", "history", "before", "after", "facts"),
    "classify": ("change_report", "facts"),
    "consensus": ("reports", "majority", "facts"),
    "final_report": ("target_prefix", "change_report", "label", "facts", "history", "before", "after"),
    "synth_seed": ("candidates",),
    "synth_description": ("target_prefix", "before", "known_asns"),
    "summarize": ("reports",),
}


def _describe(ctx) -> str:
    examples = "\n".join(
        f"- AS path [{', '.join(map(str, path))}] -> destination AS{dest}" for path, dest in DESTINATION_EXAMPLES
    )
    questions = "\n".join(f"{i}. {q}" for i, q in enumerate(CHANGE_QUESTIONS, 1))
    return (
        f"Target IP prefix: {ctx['target_prefix']}\n\n"
        "Compare the AFTER table with the BEFORE table, using HISTORY as the long-term reference, "
        "and describe every change in AS paths. Answer these questions for each peer:\n"
        f"{questions}\n\n"
        "The destination of an AS path is always its last AS. Examples:\n"
        f"{examples}\n\n"
        f"{_tables(ctx)}\n\n"
        "Pre-computed per-peer differences (machine-readable, for auditing):\n"
        f"{_facts_block(ctx['facts'])}\n"
    )


def _classify(ctx) -> str:
    return (
        "Decide which kind of anomaly the AS path change report below describes.\n\n"
        f"{HIJACK_DEFINITION}\n{LEAK_DEFINITION}\n{SUBTLETY_NOTE}\n\n"
        "Use the sub-prefix variants when the anomalous routes concern only a more specific prefix "
        "while the target prefix itself is unaffected. If no route shows a suspicious change, "
        "answer 'no anomaly observed'.\n\n"
        f"AS path change report:\n{ctx['change_report']}\n\n"
        f"{_facts_block(ctx['facts'])}\n\n"
        f"Explain briefly, then end with exactly one line '{ANSWER_PREFIX} <label>' where <label> is one of: "
        f"{LABELS_HELP}.\n"
    )


def _consensus(ctx) -> str:
    majority = ctx["majority"]
    label = majority.value if isinstance(majority, EventType) else str(majority)
    numbered = "\n\n".join(f"Report {i}:\n{r}" for i, r in enumerate(ctx["reports"], 1))
    return (
        f"{len(ctx['reports'])} analysts independently described the same routing data. "
        f"The majority classification is: {label}.\n"
        "Write one AS path change report that keeps only statements supported by the majority "
        "of the reports and consistent with that classification. Drop statements that only a "
        "minority makes.\n\n"
        f"{numbered}\n\n"
        f"{_fenced('reports', list(ctx['reports']))}\n"
        f"{_facts_block(ctx['facts'])}\n"
    )


def _final_report(ctx) -> str:
    label = ctx["label"]
    label = label.value if isinstance(label, EventType) else str(label)
    extra = ""
    payload = {"label": label, "target_prefix": str(ctx["target_prefix"])}
    if ctx.get("inconclusive"):
        missing = list(ctx.get("missing_collectors") or [])
        payload.update(inconclusive=True, missing_collectors=missing)
        extra = (
            "The available collectors show no evidence of the reported event. Say that the "
            "analysis is inconclusive and recommend collecting data from these collectors, "
            f"which held routes to the prefix in the historical dump: {', '.join(missing)}.\n\n"
        )
    return (
        f"Write a BGP anomaly event report for target prefix {ctx['target_prefix']}.\n"
        f"Final classification: {label}.\n\n"
        "Cover the event type, the affected prefixes (including any sub-prefix), the offending "
        "AS, the affected ASes and peers, the observed path changes and how widely the event was "
        "seen. Finish with a section starting with the line 'Recommendations:' followed by one "
        "'- ' bullet per remedial action.\n\n"
        f"{extra}"
        f"AS path change report:\n{ctx['change_report']}\n\n"
        f"{_tables(ctx)}\n\n"
        f"{_fenced('context', payload)}\n"
        f"{_facts_block(ctx['facts'])}\n"
    )


def _synth_seed(ctx) -> str:
    return (
        "Choose one IP prefix and one event time for a hypothetical routing anomaly. Pick from "
        "the candidates below; the time must fall inside the candidate's range. Reply with JSON "
        '{"prefix": "<cidr>", "timestamp": <epoch seconds>}.\n\n'
        f"{_fenced('context', {'candidates': list(ctx['candidates'])})}\n"
    )


def _synth_description(ctx) -> str:
    before: RouteSnapshot = ctx["before"]
    target = ctx["target_prefix"]
    rows = [f"{c} | {p} | {path}" for pfx, c, p, path in before.entries() if pfx == target]
    wanted = ctx.get("event_type")
    choice = (
        f"The event type must be: {wanted.value if isinstance(wanted, EventType) else wanted}."
        if wanted
        else "First pick the event type at random among hijack, sub-prefix hijack, route leak and sub-prefix route leak."
    )
    repair = f"\nYour previous answer was rejected: {ctx['repair_note']}\n" if ctx.get("repair_note") else ""
    payload = {
        "target_prefix": str(target),
        "event_type": (wanted.value if isinstance(wanted, EventType) else wanted) if wanted else None,
        "known_asns": sorted(ctx["known_asns"]),
        "origins": sorted({path.origin for path in before.paths_for(target)}),
        "paths": [path.as_list() for path in before.paths_for(target)],
    }
    return (
        f"Here are the current routes to {target} (collector | peer | AS path):\n"
        + "\n".join(rows)
        + "\n\nDescribe the patterns in these paths, then invent a plausible anomaly affecting this prefix. "
        f"{choice}\n"
        "Reply with JSON containing: event_type, sub_prefix (CIDR or null), offender (an ASN that does not "
        "appear in the routes), sample_paths (for hijacks several AS paths ending with the offender; for "
        "leaks exactly one AS path starting with the leaker and ending with the legitimate destination), "
        "detection_pct (fraction of peers that observe the event, in (0, 1]).\n"
        f"{repair}\n"
        f"{_fenced('context', payload)}\n"
    )


def _summarize(ctx) -> str:
    numbered = "\n\n".join(f"Report {i}:\n{r}" for i, r in enumerate(ctx["reports"], 1))
    return (
        f"Summarize the following {len(ctx['reports'])} partial reports about one BGP anomaly into a single "
        "report. Focus on information relevant to the BGP anomaly and keep the same section layout.\n\n"
        f"{numbered}\n\n"
        f"{_fenced('reports', list(ctx['reports']))}\n"
    )


_BUILDERS: dict[str, Callable[[Mapping[str, Any]], str]] = {
    "describe": _describe,
    "classify": _classify,
    "consensus": _consensus,
    "final_report": _final_report,
    "synth_seed": _synth_seed,
    "synth_description": _synth_description,
    "summarize": _summarize,
}


def build_prompt(
    stage: str,
    context: Mapping[str, Any],
    seed: Optional[int] = None,
    temperature: Optional[float] = None,
    max_output_tokens: int = 2048,
) -> CompletionRequest:
    if stage not in _BUILDERS:
        raise ValueError(f"unknown prompt stage {stage!r}")
    for name in _REQUIRED[stage]:
        if context.get(name) is None:
            raise PromptAssemblyError(stage, name)
    system = f"{SYSTEM_ANALYST}\n[{TEMPLATE_VERSION} stage={stage}]"
    return CompletionRequest(
        system_text=system,
        user_text=_BUILDERS[stage](context),
        temperature=STAGE_TEMPERATURE[stage] if temperature is None else temperature,
        max_output_tokens=max_output_tokens,
        seed=seed,
        stage=stage,
    )


def parse_label(text: str) -> Optional[EventType]:
    """Label from the last ``FINAL ANSWER:`` line, or None."""
    for line in reversed(text.strip().splitlines()):
        stripped = line.strip().strip("*").strip()
        if stripped.upper().startswith(ANSWER_PREFIX):
            value = stripped[len(ANSWER_PREFIX) :].strip().strip(".").strip("'\"`").lower()
            value = value.replace("_", " ").replace("subprefix", "sub-prefix").replace("sub prefix", "sub-prefix")
            for t in EventType:
                if value == t.value:
                    return t
            if value in ("no anomaly", "none", "normal"):
                return EventType.NO_ANOMALY
            return None
    return None


# -- providers ---------------------------------------------------------------


class Provider:
    def __init__(self, config: ProviderConfig):
        self.config = config

    def complete(self, request: CompletionRequest) -> CompletionResult:
        raise NotImplementedError

    def _result(self, request: CompletionRequest, text: str) -> CompletionResult:
        div = self.config.token_divisor
        return CompletionResult(
            text=text,
            input_tokens=estimate_tokens(request.system_text, div) + estimate_tokens(request.user_text, div),
            output_tokens=estimate_tokens(text, div),
        )


def _plurality_text(items: list[str]) -> str:
    counts = Counter(items)
    best = max(counts.values())
    return next(r for r in items if counts[r] == best)


@functools.lru_cache(maxsize=64)
def _parse_facts(body: str) -> AnalysisFacts:
    # Self-consistency sends the same block many times; parse it once.
    return facts_from_dict(json.loads(body))


REPORT_KEYS = ("Event type", "Target prefix", "Sub-prefix", "Offending AS")


class PerfectMockProvider(Provider):
    """Answers every stage correctly from the machine-readable blocks."""

    def complete(self, request: CompletionRequest) -> CompletionResult:
        handler = getattr(self, f"_stage_{request.stage}", None)
        if handler is None:
            raise LlmError(f"mock provider cannot answer stage {request.stage!r}")
        return self._result(request, handler(request))

    def _rng(self, request: CompletionRequest) -> random.Random:
        return random.Random(derive_seed("mock", self.config.seed, request.digest))

    @staticmethod
    def _facts(request: CompletionRequest) -> AnalysisFacts:
        return _parse_facts(_block_body(request.user_text, "facts"))

    def _stage_describe(self, request):
        facts = self._facts(request)
        text = facts._refs.get("__text__")
        if text is None:
            text = facts._refs["__text__"] = analysis.render_facts_text(facts)
        return text

    def _label(self, request) -> EventType:
        return analysis.classify(self._facts(request))

    def _stage_classify(self, request):
        facts = self._facts(request)
        label = self._label(request)
        return (
            f"{len(facts.evidence_facts())} of {len(facts.changed())} changed routes carry anomaly evidence.\n"
            f"{ANSWER_PREFIX} {label.value}"
        )

    def _stage_consensus(self, request):
        return _plurality_text(extract_block(request.user_text, "reports"))

    def _stage_final_report(self, request):
        facts = self._facts(request)
        ctx = extract_block(request.user_text, "context")
        label = EventType(ctx["label"])
        lines = [f"Target prefix: {ctx['target_prefix']}", f"Event type: {label.value}"]
        if ctx.get("inconclusive"):
            missing = ", ".join(ctx.get("missing_collectors", []))
            lines.append(
                "Summary: the selected collectors show no evidence of the reported anomaly; "
                "the analysis is inconclusive."
            )
            lines.append("Recommendations:")
            lines.append(f"- Collect BGP data from additional collectors: {missing}.")
            lines.append("- Re-run the analysis once the additional data is available.")
            return "\n".join(lines)
        offender = None
        if label is not EventType.NO_ANOMALY:
            try:
                offender = analysis.identify_offender(facts, label)
            except analysis.AnalysisError:
                offender = None
        sub = analysis.triggering_sub_prefix(facts, label)
        if sub is not None:
            lines.append(f"Sub-prefix: {sub}")
        if offender is not None:
            lines.append(f"Offending AS: AS{offender}")
        rate = facts.affected_peer_count / facts.total_peer_count if facts.total_peer_count else 0.0
        lines.append(
            f"Detection: {facts.affected_peer_count} of {facts.total_peer_count} peers ({rate:.0%}) observed the event."
        )
        if label is EventType.NO_ANOMALY:
            lines.append("Summary: no anomaly evidence was found in the routing data.")
            lines.append("Recommendations:")
            lines.append("- Keep monitoring the prefix; no remedial action is needed.")
            return "\n".join(lines)
        verb = "originated routes for" if label.is_hijack else "leaked routes for"
        where = f"sub-prefix {sub} of {ctx['target_prefix']}" if sub else ctx["target_prefix"]
        who = f"AS{offender}" if offender is not None else "an unidentified AS"
        lines.append(f"Summary: {who} {verb} {where}.")
        lines.append("Recommendations:")
        if label.is_hijack:
            lines.append(f"- Contact {who} and its upstream providers to withdraw the announcements.")
            lines.append(f"- Announce {sub or ctx['target_prefix']} (or more specific prefixes) to regain traffic.")
            lines.append("- Publish or verify ROAs so that validating networks reject the bogus origin.")
        else:
            lines.append(f"- Contact {who} to stop re-announcing the leaked routes.")
            lines.append(f"- Ask {who}'s upstream providers to filter routes from {who}.")
            lines.append("- Review prefix and AS-path filters on sessions with customers and peers.")
        return "\n".join(lines)

    def _stage_synth_seed(self, request):
        ctx = extract_block(request.user_text, "context")
        rng = self._rng(request)
        cand = rng.choice(ctx["candidates"])
        return json.dumps({"prefix": cand["prefix"], "timestamp": rng.randint(cand["t_min"], cand["t_max"])})

    def _stage_synth_description(self, request):
        ctx = extract_block(request.user_text, "context")
        rng = self._rng(request)
        return json.dumps(mock_description(ctx, rng))

    def _stage_summarize(self, request):
        return summarize_structured(extract_block(request.user_text, "reports"))


def mock_description(ctx: Mapping[str, Any], rng: random.Random) -> dict:
    """Draw a random but valid anomaly description for the synthetic generator."""
    anomalies = [t.value for t in analysis.ANOMALY_TYPES]
    event_type = ctx.get("event_type") or rng.choice(anomalies)
    known = set(ctx["known_asns"])
    offender = rng.randint(10000, 399999)
    while offender in known:
        offender = rng.randint(10000, 399999)
    paths = [p for p in ctx["paths"] if len(p) >= 2] or ctx["paths"]
    if event_type in ("hijack", "sub-prefix hijack"):
        samples = []
        for _ in range(3):
            base = rng.choice(paths)
            cut = rng.randint(1, max(1, len(base) - 1))
            samples.append(list(base[:cut]) + [offender])
    else:
        base = rng.choice(paths)
        cut = rng.randint(1, len(base) - 1) if len(base) > 1 else 0
        samples = [[offender] + list(base[cut:])]
    sub = None
    if event_type.startswith("sub-prefix"):
        net = ipaddress.ip_network(ctx["target_prefix"])
        sub = str(next(net.subnets(prefixlen_diff=1)))
    return {
        "event_type": event_type,
        "sub_prefix": sub,
        "offender": offender,
        "sample_paths": samples,
        "detection_pct": rng.choice([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]),
    }


def _report_fields(text: str) -> dict[str, str]:
    fields = {}
    for line in text.splitlines():
        key, sep, value = line.partition(":")
        if sep and key.strip() in REPORT_KEYS + ("Segments",):
            fields.setdefault(key.strip(), value.strip())
    return fields


def summarize_structured(reports: list[str]) -> str:
    """Merge structured reports, keeping the plurality value per field among anomalous ones."""
    weighted: list[tuple[dict[str, str], int]] = []
    for text in reports:
        fields = _report_fields(text)
        weight = int(fields.get("Segments", "1") or 1)
        weighted.append((fields, weight))
    anomalous = [(f, w) for f, w in weighted if f.get("Event type", EventType.NO_ANOMALY.value) != EventType.NO_ANOMALY.value]
    pool = anomalous or weighted
    total = sum(w for _f, w in pool)
    lines = []
    for key in REPORT_KEYS:
        votes: Counter = Counter()
        for fields, w in pool:
            if key in fields:
                votes[fields[key]] += w
        if votes:
            best = max(votes.values())
            lines.append(f"{key}: {min(v for v, n in votes.items() if n == best)}")
    if not lines:
        lines.append(f"Event type: {EventType.NO_ANOMALY.value}")
    lines.append(f"Segments: {total}")
    if anomalous:
        lines.append(f"Summary: {total} data segments show evidence of this anomaly.")
    else:
        lines.append("Summary: none of the data segments shows anomaly evidence.")
    return "\n".join(lines)


class NoisyMockProvider(PerfectMockProvider):
    """Perfect mock whose classification answers are wrong with probability ``error_rate``."""

    def _label(self, request) -> EventType:
        truth = super()._label(request)
        rng = random.Random(derive_seed("noise", self.config.seed, request.digest))
        if rng.random() < self.config.error_rate:
            return rng.choice([t for t in EventType if t is not truth])
        return truth


class CassetteProvider(Provider):
    """Append-only record/replay store keyed by request digest."""

    def __init__(self, config: ProviderConfig):
        super().__init__(config)
        self.path = Path(config.cassette_path)
        self._lock = threading.Lock()
        self._entries: dict[str, CompletionResult] = {}
        self.inner = make_provider(config.inner) if config.inner is not None else None
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._entries.setdefault(rec["digest"], CompletionResult(**rec["response"]))

    def complete(self, request: CompletionRequest) -> CompletionResult:
        digest = request.digest
        hit = self._entries.get(digest)
        if hit is not None:
            return hit
        if self.config.cassette_mode != "record":
            raise CassetteMissError(digest)
        result = self.inner.complete(request)
        record = {"digest": digest, "request": asdict(request), "response": asdict(result)}
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._entries[digest] = result
        return result


class RemoteHttpProvider(Provider):
    """Generic chat-completion endpoint with exponential-backoff retries."""

    RETRY_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}

    def __init__(self, config: ProviderConfig, sleep: Callable[[float], None] = time.sleep):
        super().__init__(config)
        if not config.endpoint or not config.model:
            raise ValueError("remote provider needs BEAR_LLM_ENDPOINT and BEAR_LLM_MODEL")
        if not config.api_key:
            raise ValueError("remote provider needs BEAR_LLM_KEY")
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max(1, config.max_in_flight))
        self.calls = 0

    def _body(self, request: CompletionRequest) -> bytes:
        body = {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        return json.dumps(body).encode("utf-8")

    def _post(self, request: CompletionRequest) -> dict:
        req = urllib.request.Request(
            self.config.endpoint,
            data=self._body(request),
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {self.config.api_key}"},
            method="POST",
        )
        with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def complete(self, request: CompletionRequest) -> CompletionResult:
        last: Optional[Exception] = None
        with self._slots:
            for attempt in range(self.config.max_retries + 1):
                if attempt:
                    self._sleep(min(self.config.backoff_cap, self.config.backoff_base * 2 ** (attempt - 1)))
                self.calls += 1
                try:
                    doc = self._post(request)
                except urllib.error.HTTPError as exc:
                    if exc.code not in self.RETRY_STATUS:
                        raise TransportError(f"provider returned HTTP {exc.code}") from exc
                    last = exc
                    continue
                except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                    last = exc
                    continue
                try:
                    text = doc["choices"][0]["message"]["content"]
                except (KeyError, IndexError, TypeError) as exc:
                    raise TransportError(f"malformed provider response: {exc}") from exc
                usage = doc.get("usage") or {}
                est = self._result(request, text)
                return CompletionResult(
                    text=text,
                    input_tokens=int(usage.get("prompt_tokens", est.input_tokens)),
                    output_tokens=int(usage.get("completion_tokens", est.output_tokens)),
                )
        raise TransportError(f"provider unreachable after {self.config.max_retries + 1} attempts: {last}")


def make_provider(config: ProviderConfig) -> Provider:
    if config.kind == "perfect-mock":
        return PerfectMockProvider(config)
    if config.kind == "noisy-mock":
        return NoisyMockProvider(config)
    if config.kind == "cassette":
        return CassetteProvider(config)
    return RemoteHttpProvider(config)


def complete(request: CompletionRequest, config: ProviderConfig) -> CompletionResult:
    return make_provider(config).complete(request)


@dataclass
class TokenUsage:
    calls: int = 0
    input_tokens: int = 0
    output_tokens: int = 0
    by_stage: dict[str, list[int]] = field(default_factory=dict)


class Gateway:
    """Shared provider handle that tallies token usage across calls."""

    def __init__(self, config: Optional[ProviderConfig] = None, provider: Optional[Provider] = None):
        self.config = config or (provider.config if provider else ProviderConfig())
        self.provider = provider or make_provider(self.config)
        self.usage = TokenUsage()
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> CompletionResult:
        result = self.provider.complete(request)
        with self._lock:
            self.usage.calls += 1
            self.usage.input_tokens += result.input_tokens
            self.usage.output_tokens += result.output_tokens
            tally = self.usage.by_stage.setdefault(request.stage, [0, 0, 0])
            tally[0] += 1
            tally[1] += result.input_tokens
            tally[2] += result.output_tokens
        return result

    def estimate(self, text: str) -> int:
        return estimate_tokens(text, self.config.token_divisor)
