"""Rank candidate associations for a query entity and apply a threshold.

The stored relation directions are CPE -> MatchingCVE -> CVE and
CVE -> MatchingCWE -> CWE, so a CVE-to-CPE query substitutes the HEAD
of MatchingCVE triples while a CVE-to-CWE query substitutes the TAIL
of MatchingCWE triples.  Candidates already associated with the query
in the graph are excluded from predictions and reported separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UnknownEntityError
from .evaluation import score_to_probability
from .graph import (
    MATCHING_CVE,
    MATCHING_CWE,
    EntityClass,
    KnowledgeGraph,
    Triple,
    classify_entity,
)
from .models import EmbeddingModel

# (query class, target class) -> (relation, side of the triple the
# candidate occupies)
_DIRECTIONS = {
    (EntityClass.CVE, EntityClass.CPE): (MATCHING_CVE, "head"),
    (EntityClass.CVE, EntityClass.CWE): (MATCHING_CWE, "tail"),
    (EntityClass.CPE, EntityClass.CVE): (MATCHING_CVE, "tail"),
    (EntityClass.CWE, EntityClass.CVE): (MATCHING_CWE, "head"),
}


@dataclass(frozen=True)
class Prediction:
    triple: Triple
    score: float
    probability: float
    above_threshold: bool


@dataclass
class PredictionResult:
    query: str
    target_class: EntityClass
    alpha: float
    predictions: list[Prediction]
    known: list[Triple] = field(default_factory=list)


@dataclass
class BatchItem:
    query: str
    result: PredictionResult | None = None
    error: str | None = None


def predict_associations(
    model: EmbeddingModel,
    graph: KnowledgeGraph,
    query: str,
    target_class: EntityClass,
    alpha: float = 0.5,
    top_k: int | None = None,
) -> PredictionResult:
    """Score all unconnected target-class candidates for one query.

    Predictions come back sorted by probability descending (ties broken
    by candidate name), marked against the threshold alpha, and
    truncated to top_k when given.  Existing associations are returned
    in ``known``.  A query entity missing from the model raises
    UnknownEntityError: associations of entities added after the
    snapshot date cannot be predicted.
    """
    if query not in model.entity_index:
        raise UnknownEntityError(f"entity absent from snapshot: {query!r}")
    query_class = classify_entity(query)
    direction = _DIRECTIONS.get((query_class, target_class))
    if direction is None:
        raise ValueError(
            f"no association direction from {query_class.value} to {target_class.value}"
        )
    relation, candidate_side = direction
    if candidate_side == "head":
        known = sorted(graph.heads(relation, query))
        make = lambda c: Triple(c, relation, query)
    else:
        known = sorted(graph.tails(query, relation))
        make = lambda c: Triple(query, relation, c)
    known_set = set(known)
    candidates = [
        name
        for name in graph.entities_of_class(target_class)
        if name != query and name not in known_set and name in model.entity_index
    ]
    if candidates:
        cand_ids = np.array([model.entity_index[c] for c in candidates], dtype=np.int64)
        rel = np.full(len(cand_ids), model.relation_id(relation), dtype=np.int64)
        qid = np.full(len(cand_ids), model.entity_index[query], dtype=np.int64)
        if candidate_side == "head":
            scores = model.score_ids(cand_ids, rel, qid)
        else:
            scores = model.score_ids(qid, rel, cand_ids)
    else:
        scores = np.zeros(0)
    predictions = []
    for name, score in zip(candidates, scores):
        probability = score_to_probability(float(score))
        predictions.append(
            Prediction(make(name), float(score), probability, probability > alpha)
        )
    predictions.sort(key=lambda p: (-p.probability, _candidate_of(p.triple, candidate_side)))
    if top_k is not None:
        predictions = predictions[:top_k]
    known_triples = [make(name) for name in known]
    return PredictionResult(query, target_class, alpha, predictions, known_triples)


def _candidate_of(triple: Triple, candidate_side: str) -> str:
    return triple.head if candidate_side == "head" else triple.tail


def batch_predict(
    model: EmbeddingModel,
    graph: KnowledgeGraph,
    queries: list[str],
    target_class: EntityClass,
    alpha: float = 0.5,
    top_k: int | None = None,
) -> list[BatchItem]:
    """predict_associations over many queries; per-query errors are
    collected instead of aborting the batch."""
    items = []
    for query in queries:
        try:
            result = predict_associations(model, graph, query, target_class, alpha, top_k)
            items.append(BatchItem(query, result=result))
        except (UnknownEntityError, ValueError) as exc:
            items.append(BatchItem(query, error=str(exc)))
    return items
