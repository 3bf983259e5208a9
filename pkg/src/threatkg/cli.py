"""Command-line pipeline: build, train, eval-closed, eval-open, predict, diff.

Every command validates its configuration before touching outputs, and
reports are written to a temporary file and atomically renamed.  Exit
codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import datetime as dt
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import evaluation, ingest
from .config import PipelineConfig, load_config, resolve_output_dir
from .errors import (
    IncompatibleGraphsError,
    InputFormatError,
    ThreatKgError,
    TrainingDiverged,
    UnknownEntityError,
)
from .graph import (
    MATCHING_CVE,
    MATCHING_CWE,
    EntityClass,
    KnowledgeGraph,
    build_graph,
    load_graph,
    save_graph,
)
from .models import load_model, save_model
from .prediction import batch_predict
from .training import TrainConfig, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the contract reserves 2 for data
    # errors, so remap.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit2(message)


class SystemExit2(Exception):
    pass


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _timestamp(args) -> str | None:
    if args.no_timestamps:
        return None
    return dt.datetime.now().isoformat(timespec="seconds")


def _tsv(rows: list[list[str]]) -> str:
    return "\n".join("\t".join(row) for row in rows) + "\n"


def _load_records(config: PipelineConfig):
    cpes = []
    for path in config.inputs.cpe:
        cpes.extend(ingest.parse_cpe_dictionary(path))
    cves = []
    for path in config.inputs.cve:
        cves.extend(ingest.parse_cve_feed(path))
    cwes = []
    for path in config.inputs.cwe:
        cwes.extend(ingest.parse_cwe_catalog(path))
    capecs = []
    for path in config.inputs.capec:
        capecs.extend(ingest.parse_capec_catalog(path))
    return cpes, cves, cwes, capecs


def cmd_build(args, config: PipelineConfig) -> int:
    out = resolve_output_dir(args.out, config, os.environ)
    for path in (config.inputs.cpe + config.inputs.cve
                 + config.inputs.cwe + config.inputs.capec):
        if not Path(path).exists():
            raise InputFormatError(f"input path does not exist: {path}")
    cpes, cves, cwes, capecs = _load_records(config)
    graph = build_graph(
        cpes, cves, cwes, config.build, capecs=capecs, snapshot=config.snapshot
    )
    out.mkdir(parents=True, exist_ok=True)
    graph_path = out / "graph.tsv"
    save_graph(graph, graph_path, timestamp=_timestamp(args))

    stats = graph.stats
    rows = [["metric", "value"]]
    rows.append(["triples", str(len(graph))])
    rows.append(["entities", str(len(graph.entities))])
    for cls, count in sorted(graph.class_counts().items()):
        rows.append([f"entities[{cls}]", str(count)])
    for rel, count in sorted(graph.relation_counts().items()):
        rows.append([f"triples[{rel}]", str(count)])
    if stats is not None:
        rows.append(["cpe_records_in", str(stats.cpe_records_in)])
        rows.append(["cpe_records_after_merge", str(stats.cpe_records_after_merge)])
        rows.append(["triples_before_removal", str(stats.triples_before_removal)])
        rows.append(["entities_before_removal", str(stats.entities_before_removal)])
        rows.append(["removed_triples", str(stats.triples_before_removal - len(graph))])
        rows.append(["removed_entities",
                     str(stats.entities_before_removal - len(graph.entities))])
        rows.append(["cwe_stubs", str(stats.cwe_stubs)])
        rows.append(["dropped_placeholder_cwes", str(stats.dropped_placeholder_cwes)])
        rows.append(["skipped_cpe_names", str(stats.skipped_cpe_names)])
        rows.append(["skipped_capec_links", str(stats.skipped_capec_links)])
    _atomic_write(out / "build_report.tsv", _tsv(rows))
    width = max(len(r[0]) for r in rows)
    pretty = "\n".join(f"{key.ljust(width)}  {value}" for key, value in rows) + "\n"
    _atomic_write(out / "build_report.txt", pretty)
    print(f"graph written to {graph_path} ({len(graph)} triples, "
          f"{len(graph.entities)} entities)")
    return EXIT_OK


def _train_config(args, config: PipelineConfig) -> TrainConfig:
    train_config = config.train
    if args.seed is not None:
        train_config = replace(train_config, seed=args.seed)
    if getattr(args, "model_kind", None):
        train_config = replace(train_config, kind=args.model_kind)
    return train_config


def cmd_train(args, config: PipelineConfig) -> int:
    out = resolve_output_dir(args.out, config, os.environ)
    graph_path = Path(args.graph) if args.graph else out / "graph.tsv"
    graph = load_graph(graph_path)
    train_config = _train_config(args, config)
    result = train(graph, train_config)
    out.mkdir(parents=True, exist_ok=True)
    save_model(result.model, out / "model.tsv")
    rows = [["epoch", "loss"]]
    rows += [[str(i), repr(loss)] for i, loss in enumerate(result.epoch_losses)]
    _atomic_write(out / "loss_trace.tsv", _tsv(rows))
    print(f"model written to {out / 'model.tsv'} "
          f"(final epoch loss {result.epoch_losses[-1]:.6f})")
    return EXIT_OK


def cmd_eval_closed(args, config: PipelineConfig) -> int:
    out = resolve_output_dir(args.out, config, os.environ)
    graph_path = Path(args.graph) if args.graph else out / "graph.tsv"
    graph = load_graph(graph_path)
    eval_config = config.eval
    train_config = _train_config(args, config)
    train_graph, test = evaluation.closed_world_split(
        graph, eval_config.n_test, eval_config.seed
    )
    composition = evaluation.relation_composition(test)
    model = train(train_graph, train_config).model
    filter_triples = frozenset(graph.triples)
    rows = []
    notes = []
    for target in eval_config.targets:
        if target == "all":
            ranks = evaluation.rank_all_sides(
                model, test, filter_triples=filter_triples, threads=args.threads
            )
            label = "All"
        else:
            ranks = evaluation.rank_targets(
                model, test, target, filter_triples=filter_triples,
                threads=args.threads,
            )
            label = {"cve-cpe": "CVE->CPE", "cve-cwe": "CVE->CWE"}[target]
        if not ranks:
            notes.append(f"# no test triples of type {label}; row omitted")
            continue
        metrics = evaluation.compute_metrics(ranks)
        rows.append(evaluation.metrics_row(label, model.kind, metrics))
    table = [list(evaluation.METRICS_HEADER)] + rows
    machine = _tsv(table)
    stamp = _timestamp(args)
    header_lines = ["# test composition: " + ", ".join(
        f"{rel}={count}" for rel, count in composition.items())]
    if stamp:
        header_lines.insert(0, f"# generated {stamp}")
    header_lines += notes
    _atomic_write(out / "metrics_closed.tsv",
                  "\n".join(header_lines) + "\n" + machine)
    _atomic_write(out / "metrics_closed.txt",
                  "\n".join(header_lines) + "\n" + evaluation.format_metrics_table(rows))
    print(evaluation.format_metrics_table(rows), end="")
    return EXIT_OK


def cmd_eval_open(args, config: PipelineConfig) -> int:
    out = resolve_output_dir(args.out, config, os.environ)
    older_path = args.older or config.open_world.older_graph
    newer_path = args.newer or config.open_world.newer_graph
    if not older_path or not newer_path:
        raise SystemExit2("eval-open requires --older and --newer graph files "
                          "(or the [open] config section)")
    older = load_graph(older_path)
    newer = load_graph(newer_path)
    train_config = _train_config(args, config)
    if args.model:
        model = load_model(args.model)
    else:
        model = train(older, train_config).model
    eval_config = config.eval
    provenance = f"{older.snapshot or older_path}->{newer.snapshot or newer_path}"
    stamp = _timestamp(args)
    rows = []
    wrote_any = False
    for target in [t for t in eval_config.targets if t != "all"]:
        positives = evaluation.open_world_testset(older, newer, target)
        label = {"cve-cpe": "CVE->CPE", "cve-cwe": "CVE->CWE"}[target]
        if not positives:
            continue
        wrote_any = True
        # Rank metrics: filter against the older snapshot plus the other
        # new positives of the same query entity.
        filter_triples = frozenset(older.triples) | frozenset(positives)
        ranks = evaluation.rank_targets(
            model, positives, target, filter_triples=filter_triples,
            threads=args.threads,
        )
        metrics = evaluation.compute_metrics(ranks)
        rows.append(evaluation.metrics_row(label, model.kind, metrics))
        testset = evaluation.build_pr_testset(
            positives, older, eval_config.per_cve_negatives, eval_config.seed,
            provenance=provenance,
        )
        scored = []
        for triple, y in testset.labeled:
            score = model.score(*triple)
            scored.append((evaluation.score_to_probability(score), y))
        curve = evaluation.pr_curve(scored)
        curve_rows = [["alpha", "precision", "recall", "f1"]]
        curve_rows += [
            [f"{p.alpha:.9f}", f"{p.precision:.6f}", f"{p.recall:.6f}", f"{p.f1:.6f}"]
            for p in curve.points
        ]
        curve_header = [f"# provenance {provenance}",
                        f"# positives {len(testset.positives)} "
                        f"negatives {len(testset.negatives)}",
                        f"# best_f1 {curve.best.f1:.6f} at alpha {curve.best.alpha:.9f}"]
        if stamp:
            curve_header.insert(0, f"# generated {stamp}")
        _atomic_write(out / f"pr_curve_{target}.tsv",
                      "\n".join(curve_header) + "\n" + _tsv(curve_rows))
    if not wrote_any:
        print("no new positives between the two snapshots; nothing to evaluate")
        return EXIT_OK
    header_lines = [f"# provenance {provenance}",
                    "# filter: older snapshot positives + new positives"]
    if stamp:
        header_lines.insert(0, f"# generated {stamp}")
    table = [list(evaluation.METRICS_HEADER)] + rows
    _atomic_write(out / "metrics_open.tsv", "\n".join(header_lines) + "\n" + _tsv(table))
    _atomic_write(out / "metrics_open.txt",
                  "\n".join(header_lines) + "\n" + evaluation.format_metrics_table(rows))
    print(evaluation.format_metrics_table(rows), end="")
    return EXIT_OK


def cmd_predict(args, config: PipelineConfig) -> int:
    out = resolve_output_dir(args.out, config, os.environ)
    graph_path = Path(args.graph) if args.graph else out / "graph.tsv"
    model_path = Path(args.model) if args.model else out / "model.tsv"
    graph = load_graph(graph_path)
    model = load_model(model_path)
    alpha = args.alpha if args.alpha is not None else config.predict.alpha
    top_k = args.top_k if args.top_k is not None else config.predict.top_k
    target_name = args.target or config.predict.target
    try:
        target = EntityClass(target_name)
    except ValueError:
        raise SystemExit2(f"unknown target class {target_name!r}; "
                          f"expected one of CPE, CVE, CWE")
    items = batch_predict(model, graph, args.query, target, alpha, top_k)
    rows = [["query", "candidate", "score", "probability", "above_threshold"]]
    errors = []
    for item in items:
        if item.error is not None:
            errors.append(f"{item.query}: {item.error}")
            continue
        for p in item.result.predictions:
            candidate = p.triple.head if p.triple.tail == item.query else p.triple.tail
            rows.append([
                item.query, candidate, f"{p.score:.6f}",
                f"{p.probability:.6f}", "1" if p.above_threshold else "0",
            ])
    stamp = _timestamp(args)
    header = [f"# alpha {alpha}"]
    if stamp:
        header.insert(0, f"# generated {stamp}")
    header += [f"# error {e}" for e in errors]
    _atomic_write(out / "predictions.tsv", "\n".join(header) + "\n" + _tsv(rows))
    print(f"{sum(1 for r in rows[1:] if r[4] == '1')} predictions above "
          f"alpha={alpha} written to {out / 'predictions.tsv'}")
    if errors and not any(item.error is None for item in items):
        raise UnknownEntityError("; ".join(errors))
    return EXIT_OK


def cmd_diff(args, config: PipelineConfig) -> int:
    from .graph import diff_snapshots

    out = resolve_output_dir(args.out, config, os.environ)
    older = load_graph(args.older)
    newer = load_graph(args.newer)
    relation = args.relation
    fresh = diff_snapshots(older, newer, relation)
    rows = [["head", "relation", "tail"]]
    rows += [[t.head, t.relation, t.tail] for t in fresh]
    _atomic_write(out / "diff.tsv", _tsv(rows))
    print(f"{len(fresh)} new {relation} triples between pre-existing entities "
          f"written to {out / 'diff.tsv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="threatkg",
                     description="Threat knowledge graph pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="pipeline config file (INI)")
        p.add_argument("--out", help="output directory (overrides env and config)")
        p.add_argument("--no-timestamps", action="store_true",
                       help="suppress timestamps for byte-identical reports")
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap for ranking queries")
        p.add_argument("--seed", type=int, help="override the training seed")

    p_build = sub.add_parser("build", help="parse sources and build the graph")
    common(p_build)

    p_train = sub.add_parser("train", help="train an embedding model")
    common(p_train)
    p_train.add_argument("--graph", help="graph file (default <out>/graph.tsv)")
    p_train.add_argument("--model-kind", choices=["TransE", "DistMult", "ComplEx"],
                         help="override the configured model kind")

    p_ec = sub.add_parser("eval-closed", help="closed-world rank evaluation")
    common(p_ec)
    p_ec.add_argument("--graph", help="graph file (default <out>/graph.tsv)")
    p_ec.add_argument("--model-kind", choices=["TransE", "DistMult", "ComplEx"])

    p_eo = sub.add_parser("eval-open", help="open-world snapshot evaluation")
    common(p_eo)
    p_eo.add_argument("--older", help="older snapshot graph file")
    p_eo.add_argument("--newer", help="newer snapshot graph file")
    p_eo.add_argument("--model", help="pre-trained model file (else trains on older)")
    p_eo.add_argument("--model-kind", choices=["TransE", "DistMult", "ComplEx"])

    p_pr = sub.add_parser("predict", help="rank candidate associations for queries")
    common(p_pr)
    p_pr.add_argument("--graph", help="graph file (default <out>/graph.tsv)")
    p_pr.add_argument("--model", help="model file (default <out>/model.tsv)")
    p_pr.add_argument("--query", action="append", default=[], required=True,
                      help="query entity name (repeatable)")
    p_pr.add_argument("--target", help="target class: CPE, CVE, or CWE")
    p_pr.add_argument("--alpha", type=float, help="prediction threshold")
    p_pr.add_argument("--top-k", type=int, help="truncate output per query")

    p_diff = sub.add_parser("diff", help="new triples between two snapshots")
    common(p_diff)
    p_diff.add_argument("--older", required=True)
    p_diff.add_argument("--newer", required=True)
    p_diff.add_argument("--relation", default=MATCHING_CVE,
                        help=f"relation to diff (default {MATCHING_CVE})")
    return parser


_COMMANDS = {
    "build": cmd_build,
    "train": cmd_train,
    "eval-closed": cmd_eval_closed,
    "eval-open": cmd_eval_open,
    "predict": cmd_predict,
    "diff": cmd_diff,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit2 as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.config:
            config = load_config(args.config)
        else:
            config = PipelineConfig()
    except InputFormatError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args, config)
    except SystemExit2 as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputFormatError, IncompatibleGraphsError, UnknownEntityError,
            ThreatKgError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
