"""Rank-based and threshold-based evaluation of embedded graphs.

Closed-world evaluation holds triples out of the graph itself;
open-world evaluation takes the triples added between two snapshots
whose endpoints already existed in the older one.  Rank metrics follow
the standard definitions over a set of test triples:

    MR     = mean(rank_i)
    MRR    = mean(1 / rank_i)
    Hits@N = mean(1[rank_i <= N])

Ranks use the filtered protocol: candidate corruptions that form a
known positive are excluded.  Ties in score count as ranked below the
positive (optimistic tie-break): rank = 1 + #{candidates scoring
strictly higher}.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .graph import (
    MATCHING_CVE,
    MATCHING_CWE,
    EntityClass,
    KnowledgeGraph,
    Triple,
    classify_entity,
    diff_snapshots,
)
from .models import EmbeddingModel

logger = logging.getLogger(__name__)

HITS_NS = (1, 3, 10, 20)

# Target triple types: relation, which side gets substituted, and the
# entity class the candidates are drawn from.
TARGET_CVE_CPE = "cve-cpe"
TARGET_CVE_CWE = "cve-cwe"
TARGETS = {
    TARGET_CVE_CPE: (MATCHING_CVE, "head", EntityClass.CPE),
    TARGET_CVE_CWE: (MATCHING_CWE, "tail", EntityClass.CWE),
}


@dataclass(frozen=True)
class RankMetrics:
    mr: float
    mrr: float
    hits: dict[int, float]
    count: int


@dataclass(frozen=True)
class PrPoint:
    alpha: float
    precision: float
    recall: float
    f1: float


def closed_world_split(graph: KnowledgeGraph, n_test: int, seed: int):
    """Uniformly sample a test set out of the graph's triples.

    Returns (train_graph, test_triples).  The training graph keeps the
    full entity universe so every test endpoint stays embeddable.
    """
    triples = graph.triples_sorted()
    if n_test >= len(triples):
        raise ValueError(f"n_test={n_test} must be smaller than |triples|={len(triples)}")
    if n_test < 0:
        raise ValueError("n_test must be >= 0")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(triples), size=n_test, replace=False)
    test = [triples[i] for i in sorted(chosen)]
    train = KnowledgeGraph(
        set(graph.triples) - set(test),
        graph.options,
        graph.snapshot,
        entities=graph.entities,
    )
    return train, test


def relation_composition(triples) -> dict[str, int]:
    """Per-relation counts of a triple collection (test-set reporting)."""
    counts: dict[str, int] = {}
    for t in triples:
        counts[t.relation] = counts.get(t.relation, 0) + 1
    return dict(sorted(counts.items()))


def _candidate_ids(model: EmbeddingModel, candidates) -> np.ndarray:
    if isinstance(candidates, str) and candidates == "all":
        return np.arange(len(model.entity_index))
    if isinstance(candidates, EntityClass):
        ids = [
            i for name, i in model.entity_index.items()
            if classify_entity(name) == candidates
        ]
        return np.array(sorted(ids), dtype=np.int64)
    ids = [model.entity_id(name) for name in candidates]
    return np.array(ids, dtype=np.int64)


def rank_triple(
    model: EmbeddingModel,
    positive: Triple,
    corrupted_side: str,
    candidates="all",
    filter_triples: frozenset[Triple] = frozenset(),
) -> int:
    """Filtered rank of a positive among its candidate corruptions.

    ``candidates`` is "all", an EntityClass, or an explicit name list.
    Candidates that reproduce a triple in ``filter_triples`` are
    excluded, as is the positive's own entity.
    """
    return _rank_ids(
        model, positive, corrupted_side, _candidate_ids(model, candidates),
        filter_triples,
    )


def _rank_ids(model, positive, corrupted_side, cand_ids, filter_triples):
    if corrupted_side not in ("head", "tail"):
        raise ValueError("corrupted_side must be 'head' or 'tail'")
    h = model.entity_id(positive.head)
    r = model.relation_id(positive.relation)
    t = model.entity_id(positive.tail)
    names = model.entity_names()
    own = h if corrupted_side == "head" else t
    keep = []
    for c in cand_ids:
        if c == own:
            continue
        if corrupted_side == "head":
            corrupted = Triple(names[c], positive.relation, positive.tail)
        else:
            corrupted = Triple(positive.head, positive.relation, names[c])
        if corrupted in filter_triples:
            continue
        keep.append(c)
    if not keep:
        return 1
    cand = np.array(keep, dtype=np.int64)
    rel = np.full(len(cand), r, dtype=np.int64)
    if corrupted_side == "head":
        scores = model.score_ids(cand, rel, np.full(len(cand), t, dtype=np.int64))
    else:
        scores = model.score_ids(np.full(len(cand), h, dtype=np.int64), rel, cand)
    positive_score = model.score_ids(
        np.array([h]), np.array([r]), np.array([t])
    )[0]
    return 1 + int((scores > positive_score).sum())


def rank_all_sides(
    model: EmbeddingModel,
    triples: list[Triple],
    filter_triples: frozenset[Triple] = frozenset(),
    candidates="all",
    threads: int = 1,
) -> list[int]:
    """Head and tail query ranks for every triple, pooled in that order."""
    cand_ids = _candidate_ids(model, candidates)
    queries = [(t, side) for t in triples for side in ("head", "tail")]

    def one(query):
        triple, side = query
        return _rank_ids(model, triple, side, cand_ids, filter_triples)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, queries))
    return [one(q) for q in queries]


def rank_targets(
    model: EmbeddingModel,
    triples: list[Triple],
    target: str,
    filter_triples: frozenset[Triple] = frozenset(),
    threads: int = 1,
) -> list[int]:
    """Class-restricted ranks for one target triple type (cve-cpe / cve-cwe)."""
    relation, side, cls = TARGETS[target]
    eligible = [t for t in triples if t.relation == relation]
    cand_ids = _candidate_ids(model, cls)

    def one(triple):
        return _rank_ids(model, triple, side, cand_ids, filter_triples)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, eligible))
    return [one(t) for t in eligible]


def compute_metrics(ranks: list[int], hits_at=HITS_NS) -> RankMetrics:
    """MR, MRR, and Hits@N over a non-empty list of ranks."""
    if not ranks:
        raise ValueError("cannot compute metrics over an empty rank list")
    n = len(ranks)
    mr = sum(ranks) / n
    mrr = sum(1.0 / r for r in ranks) / n
    hits = {N: sum(1 for r in ranks if r <= N) / n for N in hits_at}
    return RankMetrics(mr=mr, mrr=mrr, hits=hits, count=n)


def open_world_testset(
    older: KnowledgeGraph, newer: KnowledgeGraph, target: str
) -> list[Triple]:
    """Positive test triples for open-world evaluation of one target type."""
    relation, _side, _cls = TARGETS[target]
    return diff_snapshots(older, newer, relation)


@dataclass
class PrTestSet:
    """Labeled triples for precision/recall evaluation, with provenance."""

    labeled: list[tuple[Triple, int]]
    provenance: str = ""

    @property
    def positives(self) -> list[Triple]:
        return [t for t, label in self.labeled if label == 1]

    @property
    def negatives(self) -> list[Triple]:
        return [t for t, label in self.labeled if label == 0]


def build_pr_testset(
    positives: list[Triple],
    graph: KnowledgeGraph,
    per_cve_negatives: int,
    seed: int,
    provenance: str = "",
) -> PrTestSet:
    """Pair open-world positives with sampled same-class negatives.

    For each unique CVE among the positives, draws ``per_cve_negatives``
    corruptions of the non-CVE side uniformly from that entity class,
    excluding graph triples and the positives themselves.  When the
    candidate pool is smaller than requested, all of it is emitted with
    a warning.
    """
    labeled: list[tuple[Triple, int]] = [(t, 1) for t in positives]
    if not positives or per_cve_negatives <= 0:
        return PrTestSet(labeled, provenance)
    relation = positives[0].relation
    if relation == MATCHING_CVE:
        side, cls = "head", EntityClass.CPE
        cve_of = lambda t: t.tail
    elif relation == MATCHING_CWE:
        side, cls = "tail", EntityClass.CWE
        cve_of = lambda t: t.head
    else:
        raise ValueError(f"positives must be {MATCHING_CVE} or {MATCHING_CWE} triples")
    if any(t.relation != relation for t in positives):
        raise ValueError("positives mix relations")

    pool = graph.entities_of_class(cls)
    positive_set = frozenset(positives)
    rng = np.random.default_rng(seed)
    unique_cves = list(dict.fromkeys(cve_of(t) for t in positives))
    for cve in unique_cves:
        candidates = []
        for name in pool:
            corrupted = (
                Triple(name, relation, cve) if side == "head"
                else Triple(cve, relation, name)
            )
            if corrupted in graph.triples or corrupted in positive_set:
                continue
            candidates.append(corrupted)
        if len(candidates) < per_cve_negatives:
            logger.warning(
                "only %d negative candidates available for %s (wanted %d)",
                len(candidates), cve, per_cve_negatives,
            )
            chosen = candidates
        else:
            idx = rng.choice(len(candidates), size=per_cve_negatives, replace=False)
            chosen = [candidates[i] for i in sorted(idx)]
        labeled.extend((t, 0) for t in chosen)
    return PrTestSet(labeled, provenance)


def score_to_probability(score: float) -> float:
    """Logistic normalization of a score into an estimated probability."""
    if score >= 0:
        return 1.0 / (1.0 + math.exp(-score))
    e = math.exp(score)
    return e / (1.0 + e)


@dataclass
class PrCurve:
    points: list[PrPoint]
    best: PrPoint


def pr_curve(prob_label_pairs: list[tuple[float, int]]) -> PrCurve:
    """Precision/recall/F1 sweep over the distinct observed probabilities.

    A pair is predicted positive when its probability strictly exceeds
    the threshold alpha.  The sweep visits every distinct probability
    plus alpha = 0; the returned best point maximizes F1, ties going to
    the larger alpha.  Raises if there are no positive labels (recall
    would be undefined).
    """
    total_pos = sum(label for _p, label in prob_label_pairs)
    if total_pos == 0:
        raise ValueError("test set contains no positive labels")
    ordered = sorted(prob_label_pairs, key=lambda x: -x[0])
    # Group by distinct probability, descending.
    groups: list[tuple[float, int, int]] = []  # (prob, positives, size)
    for prob, label in ordered:
        if groups and groups[-1][0] == prob:
            p, pos, size = groups[-1]
            groups[-1] = (p, pos + label, size + 1)
        else:
            groups.append((prob, label, 1))

    points = []
    tp = 0
    predicted = 0
    # Threshold at each distinct probability predicts everything strictly
    # above it, i.e. all earlier groups.
    for prob, pos, size in groups:
        points.append(_pr_point(prob, tp, predicted, total_pos))
        tp += pos
        predicted += size
    points.append(_pr_point(0.0, tp, predicted, total_pos))
    best = max(points, key=lambda p: (p.f1, p.alpha))
    return PrCurve(points, best)


def _pr_point(alpha: float, tp: int, predicted: int, total_pos: int) -> PrPoint:
    precision = tp / predicted if predicted else 1.0
    recall = tp / total_pos
    f1 = (2 * precision * recall / (precision + recall)) if (precision + recall) else 0.0
    return PrPoint(alpha=alpha, precision=precision, recall=recall, f1=f1)


METRICS_HEADER = ("triple_type", "model", "mrr", "mr",
                  "hits@20", "hits@10", "hits@3", "hits@1", "count")


def metrics_row(triple_type: str, model_kind: str, metrics: RankMetrics) -> list[str]:
    return [
        triple_type,
        model_kind,
        f"{metrics.mrr:.6f}",
        f"{metrics.mr:.3f}",
        f"{metrics.hits[20]:.6f}",
        f"{metrics.hits[10]:.6f}",
        f"{metrics.hits[3]:.6f}",
        f"{metrics.hits[1]:.6f}",
        str(metrics.count),
    ]


def format_metrics_table(rows: list[list[str]]) -> str:
    """Human-readable fixed-width rendering of a metrics table."""
    table = [list(METRICS_HEADER)] + [list(r) for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(METRICS_HEADER))]
    lines = []
    for row in table:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"
