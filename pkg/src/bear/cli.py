"""`bear` command-line interface."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional

from bear import __version__
from bear.analysis import (
    analyze_changes,
    classify,
    detection_rate,
    facts_to_dict,
    identify_offender,
    render_facts_text,
)
from bear.elems import ElemSource, IngestStats, load_elem_files, write_elems
from bear.llm import Gateway, ProviderConfig
from bear.model import EventSpec
from bear.reasoner import ExplainConfig, SelfConsistencyConfig, explain, explain_partial
from bear.snapshots import ReplayStats, SnapshotTriple, build_triple

logger = logging.getLogger("bear")


def _load_config(path: Optional[str]) -> dict[str, Any]:
    if not path:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise SystemExit(f"config {path} must hold a JSON object")
    return doc


def _provider(args: argparse.Namespace, config: dict) -> ProviderConfig:
    doc = dict(config.get("provider", {}))
    if getattr(args, "provider", None):
        doc["kind"] = args.provider
    if getattr(args, "error_rate", None) is not None:
        doc["error_rate"] = args.error_rate
    doc.setdefault("kind", "perfect-mock")
    return ProviderConfig.from_dict(doc)


def _write_json(path: Path, doc: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _event_dirs(root: Path) -> list[Path]:
    if (root / "truth.json").exists():
        return [root]
    return sorted(p for p in root.iterdir() if (p / "truth.json").exists())


# -- subcommands ---------------------------------------------------------------


def cmd_build(args, config) -> int:
    spec = EventSpec.from_dict(json.loads(Path(args.event).read_text(encoding="utf-8")))
    ingest = IngestStats()
    source = ElemSource(load_elem_files(args.elems, ingest))
    stats = ReplayStats()
    triple = build_triple(source, spec, stats)
    triple.save(args.out)
    print(
        f"wrote {args.out}: {triple.history.path_count()} history, {triple.before.path_count()} before, "
        f"{triple.after.path_count()} after paths; {ingest.accepted} elems accepted, "
        f"{ingest.rejected_total} rejected"
    )
    return 0


def cmd_analyze(args, config) -> int:
    triple = SnapshotTriple.load(args.snapshots)
    facts = analyze_changes(triple)
    label = classify(facts)
    doc = facts_to_dict(facts)
    summary = {"event_type": label.value}
    if label.value != "no anomaly observed":
        summary["offender"] = identify_offender(facts, label)
    if facts.total_peer_count:
        summary["detection_rate"] = detection_rate(facts)
    doc["classification"] = summary
    if args.out:
        _write_json(Path(args.out), doc)
    else:
        print(json.dumps(doc, indent=2, sort_keys=True))
    if args.text:
        print(render_facts_text(facts))
    return 0


def _explain_config(args, config) -> ExplainConfig:
    return ExplainConfig(
        provider=_provider(args, config),
        consistency=SelfConsistencyConfig(
            args.n if args.n is not None else config.get("n_runs", 5), config.get("tie_policy", "extra-round")
        ),
        seed=args.seed if args.seed is not None else config.get("seed", 0),
        token_limit=args.token_limit if args.token_limit is not None else config.get("token_limit"),
        batch_size=config.get("batch_size", 5),
        max_workers=config.get("max_workers", 1),
    )


def cmd_explain(args, config) -> int:
    from bear.harness import render_report, subset_collectors

    triple = SnapshotTriple.load(args.snapshots)
    cfg = _explain_config(args, config)
    gateway = Gateway(cfg.provider)
    if args.collectors:
        subset = subset_collectors(triple, [c.strip() for c in args.collectors.split(",") if c.strip()])
        report = explain_partial(triple.spec, triple.history, subset.before, subset.after, cfg, gateway)
    else:
        report = explain(triple.spec, triple, cfg, gateway)
    out = Path(args.out)
    _write_json(out, report.to_dict())
    out.with_suffix(".md").write_text(render_report(report), encoding="utf-8")
    usage = gateway.usage
    print(
        f"{report.event_type.value}{'' if report.conclusive else ' (inconclusive)'}; "
        f"{usage.calls} calls, {usage.input_tokens} input / {usage.output_tokens} output tokens"
    )
    return 0


def cmd_synth(args, config) -> int:
    from bear.synth import generate_corpus

    source = ElemSource(load_elem_files(args.elems))
    gateway = Gateway(_provider(args, config))
    events = generate_corpus(source, gateway, range(args.seed, args.seed + args.count), balance=args.balance)
    out = Path(args.out)
    for event in events:
        event.save(out / event.name)
    print(f"wrote {len(events)} events to {out}")
    return 0


def cmd_anonymize(args, config) -> int:
    from bear.synth import SyntheticEvent, anonymize, anonymize_triple

    src = Path(args.event)
    if (src / "truth.json").exists():
        anon = anonymize(SyntheticEvent.load(src), args.seed)
        anon.save(args.out)
    else:
        triple, _ = anonymize_triple(SnapshotTriple.load(src), args.seed)
        triple.save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_sweep(args, config) -> int:
    from bear.fixtures import synthetic_corpus
    from bear.harness import RunConfig, run_sweep, summarize_sweep, sweep_csv, sweep_rows_jsonl
    from bear.synth import SyntheticEvent

    if args.corpus:
        corpus = [SyntheticEvent.load(p) for p in _event_dirs(Path(args.corpus))]
    else:
        corpus = list(synthetic_corpus(args.synthetic))
    if not corpus:
        raise SystemExit("empty corpus")
    doc = {k: v for k, v in config.items() if k in ("n_runs", "tie_policy", "token_limit", "batch_size", "max_workers")}
    if args.n is not None:
        doc["n_runs"] = args.n
    if args.fractions:
        doc["fractions"] = tuple(float(f) for f in args.fractions.split(","))
    elif "fractions" in config:
        doc["fractions"] = tuple(config["fractions"])
    run = RunConfig(provider=_provider(args, config), seeds=tuple(range(args.seeds)), **doc)
    results = run_sweep(corpus, run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(sweep_csv(results), encoding="utf-8")
    (out / "rows.jsonl").write_text(sweep_rows_jsonl(results), encoding="utf-8")
    for s in summarize_sweep(results):
        print(
            f"fraction {s.fraction:g}: presence {s.presence_ratio:.3f} accuracy {s.accuracy:.3f} "
            f"({s.runs} runs, {s.failures} failures)"
        )
    return 0


def cmd_stats(args, config) -> int:
    from bear.harness import corpus_stats
    from bear.synth import SyntheticEvent

    root = Path(args.corpus)
    dirs = [root] if (root / "history.json").exists() else sorted(q for q in root.iterdir() if (q / "history.json").exists())
    items = []
    for p in dirs:
        if (p / "truth.json").exists():
            items.append(SyntheticEvent.load(p))
        else:
            items.append((p.name, SnapshotTriple.load(p)))
    limit = args.token_limit if args.token_limit is not None else config.get("token_limit")
    rows = [s.to_dict() for s in corpus_stats(items, limit)]
    print(json.dumps(rows, indent=2))
    return 0


def cmd_feed(args, config) -> int:
    from bear.feed import FeedConfig, generate_feed

    elems = generate_feed(FeedConfig(seed=args.seed, hours=args.hours, n_collectors=args.collectors))
    write_elems(elems, args.out)
    print(f"wrote {len(elems)} elems to {args.out}")
    return 0


def cmd_fixtures(args, config) -> int:
    from bear.fixtures import labeled_fixtures

    out = Path(args.out)
    for event in labeled_fixtures():
        event.save(out / event.name)
    print(f"wrote 4 labeled events to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bear", description="BGP event analysis and reporting")
    parser.add_argument("--version", action="version", version=f"bear {__version__}")
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def provider_opts(p):
        p.add_argument("--provider", choices=ProviderConfig.KINDS)
        p.add_argument("--error-rate", type=float, help="label flip probability for noisy-mock")

    p = sub.add_parser("build", help="replay elem files into history/before/after snapshots")
    p.add_argument("--event", required=True, help="event spec JSON (prefix, start, optional end)")
    p.add_argument("--elems", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("analyze", help="deterministic change analysis of a snapshot directory")
    p.add_argument("--snapshots", required=True)
    p.add_argument("--out")
    p.add_argument("--text", action="store_true", help="also print the rendered description")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("explain", help="run the reasoning pipeline and write a report")
    p.add_argument("--snapshots", required=True)
    p.add_argument("--collectors", help="comma-separated collectors to keep in before/after")
    p.add_argument("--n", type=int, help="self-consistency runs")
    p.add_argument("--token-limit", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="report JSON path; report.md is written alongside")
    provider_opts(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("synth", help="generate labeled synthetic events from elem files")
    p.add_argument("--count", type=int, default=34)
    p.add_argument("--balance", action="store_true")
    p.add_argument("--elems", nargs="+", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    provider_opts(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("anonymize", help="relabel ASNs and shift timestamps of an event")
    p.add_argument("--event", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_anonymize)

    p = sub.add_parser("sweep", help="collector-subset sweep over a labeled corpus")
    p.add_argument("--corpus", help="directory of event directories with truth.json")
    p.add_argument("--synthetic", type=int, default=34, help="built-in corpus size when --corpus is absent")
    p.add_argument("--seeds", type=int, default=50, help="number of subset seeds per fraction")
    p.add_argument("--fractions", help="comma-separated collector fractions")
    p.add_argument("--n", type=int, help="self-consistency runs")
    p.add_argument("--out", required=True)
    provider_opts(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", help="per-event prefix, path and peer counts")
    p.add_argument("--corpus", required=True)
    p.add_argument("--token-limit", type=int)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("feed", help="write a seeded background elem feed")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--hours", type=int, default=48)
    p.add_argument("--collectors", type=int, default=24)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_feed)

    p = sub.add_parser("fixtures", help="write the hand-built labeled events")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fixtures)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    config = _load_config(args.config)
    try:
        return args.func(args, config)
    except (OSError, ValueError) as exc:
        print(f"bear {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
