"""Training embeddings: negative sampling, losses, SGD, grid search.

Negative triples are produced by corrupting the head or tail of a
positive with a uniformly random entity; corruptions that land on a
known triple are discarded and resampled (filtering).  Three losses are
available:

* ``pairwise_margin``: sum over (positive, negative) pairs of
  max(0, margin - f(pos) + f(neg)).
* ``nll``: sum of softplus(-y * f) with y = +1 for positives and
  -1 for negatives.
* ``max_margin``: independent hinge per triple, max(0, margin - y * f).

Training is plain minibatch SGD with analytic gradients and is fully
deterministic under a fixed seed.  ComplEx parameters are stored as
complex arrays; their gradients are packed as d/d(real) + i*d/d(imag),
so the usual update ``v -= lr * g`` moves both components correctly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import TrainingDiverged
from .graph import KnowledgeGraph, Triple
from .models import COMPLEX, DISTMULT, MODEL_KINDS, TRANSE, EmbeddingModel, score_arrays

logger = logging.getLogger(__name__)

LOSS_KINDS = ("pairwise_margin", "nll", "max_margin")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run."""

    kind: str = TRANSE
    k: int = 32
    eta: int = 2
    loss: str = "pairwise_margin"
    margin: float = 1.0
    epochs: int = 100
    batch_size: int = 512
    learning_rate: float = 0.05
    seed: int = 0
    regularization_weight: float = 0.0
    norm_order: int = 2
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind: {self.kind}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss: {self.loss}")
        if self.k < 1 or self.eta < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("k, eta, epochs, and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class TrainResult:
    model: EmbeddingModel
    epoch_losses: list[float] = field(default_factory=list)


_MAX_SAMPLING_TRIES = 200


def _sample_negative_ids(
    positive: tuple[int, int, int],
    triple_ids: frozenset[tuple[int, int, int]],
    n_entities: int,
    eta: int,
    rng: np.random.Generator,
) -> list[tuple[int, int, int]]:
    """Draw up to eta distinct filtered corruptions of one positive."""
    h, r, t = positive
    found: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int, int]] = set()
    tries = 0
    budget = _MAX_SAMPLING_TRIES * eta
    while len(found) < eta and tries < budget:
        tries += 1
        side = int(rng.integers(2))
        replacement = int(rng.integers(n_entities))
        candidate = (replacement, r, t) if side == 0 else (h, r, replacement)
        if candidate == positive or candidate in triple_ids or candidate in seen:
            continue
        seen.add(candidate)
        found.append(candidate)
    if len(found) < eta:
        logger.warning(
            "could only sample %d of %d negatives for %s (graph too small)",
            len(found), eta, positive,
        )
    return found


def sample_negatives(
    graph: KnowledgeGraph, positive: Triple, eta: int, rng: np.random.Generator
) -> list[Triple]:
    """Corrupt the head or tail of a known positive with random entities.

    Returned triples are distinct, absent from the graph, and never
    equal to the positive.  If the graph is too small to provide eta
    such triples, fewer are returned with a warning.
    """
    if positive not in graph.triples:
        raise ValueError(f"positive triple not in graph: {positive}")
    if eta < 1:
        raise ValueError("eta must be >= 1")
    entities = sorted(graph.entities)
    index = {name: i for i, name in enumerate(entities)}
    relations = sorted(graph.relations)
    rel_index = {name: i for i, name in enumerate(relations)}
    triple_ids = frozenset(
        (index[h], rel_index[r], index[t]) for h, r, t in graph.triples
    )
    pos = (index[positive.head], rel_index[positive.relation], index[positive.tail])
    sampled = _sample_negative_ids(pos, triple_ids, len(entities), eta, rng)
    return [
        Triple(entities[h], relations[r], entities[t]) for h, r, t in sampled
    ]


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) without overflow for large |x|
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _score_gradients(kind: str, norm_order: int, h: np.ndarray, r: np.ndarray,
                     t: np.ndarray):
    """Per-triple gradients of the score wrt h, r, t (batched rows)."""
    if kind == TRANSE:
        d = h + r - t
        if norm_order == 1:
            g = -np.sign(d)
        else:
            norms = np.sqrt((d * d).sum(axis=-1, keepdims=True))
            norms[norms == 0.0] = 1.0
            g = -d / norms
        return g, g, -g
    if kind == DISTMULT:
        return r * t, h * t, h * r
    if kind == COMPLEX:
        return np.conj(r) * t, np.conj(h) * t, h * r
    raise ValueError(f"unknown model kind: {kind}")


def _check_pairing(positives, negatives):
    if len(negatives) != len(positives):
        raise ValueError(
            "negatives must be grouped per positive "
            f"({len(positives)} positives, {len(negatives)} negative groups)"
        )


def _loss_from_scores(loss: str, margin: float, pos_scores: np.ndarray,
                      neg_scores: list[np.ndarray]):
    """Loss value plus d(loss)/d(score) terms for every triple."""
    pos_grad = np.zeros_like(pos_scores)
    neg_grads = [np.zeros_like(s) for s in neg_scores]
    total = 0.0
    if loss == "pairwise_margin":
        for i, negs in enumerate(neg_scores):
            violation = margin - pos_scores[i] + negs
            active = violation > 0
            total += float(violation[active].sum())
            pos_grad[i] = -float(active.sum())
            neg_grads[i][active] = 1.0
    elif loss == "nll":
        total += float(_softplus(-pos_scores).sum())
        pos_grad -= _sigmoid(-pos_scores)
        for i, negs in enumerate(neg_scores):
            total += float(_softplus(negs).sum())
            neg_grads[i] += _sigmoid(negs)
    elif loss == "max_margin":
        violation = margin - pos_scores
        active = violation > 0
        total += float(violation[active].sum())
        pos_grad[active] = -1.0
        for i, negs in enumerate(neg_scores):
            v = margin + negs
            a = v > 0
            total += float(v[a].sum())
            neg_grads[i][a] = 1.0
    else:
        raise ValueError(f"unknown loss: {loss}")
    return total, pos_grad, neg_grads


def loss(model: EmbeddingModel, positives: list[Triple],
         negatives: list[list[Triple]], config: TrainConfig) -> float:
    """Evaluate the configured loss over positives and grouped negatives."""
    value, _ = loss_gradients(model, positives, negatives, config)
    return value


def loss_gradients(model: EmbeddingModel, positives: list[Triple],
                   negatives: list[list[Triple]], config: TrainConfig):
    """Loss plus analytic gradients wrt every involved vector.

    Returns ``(value, grads)`` where grads maps ("entity"|"relation",
    index) to the gradient array.  When ``regularization_weight`` is
    nonzero an L2 penalty over each involved vector is included.
    """
    _check_pairing(positives, negatives)
    pos_ids = [
        (model.entity_id(p.head), model.relation_id(p.relation), model.entity_id(p.tail))
        for p in positives
    ]
    neg_ids = [
        [(model.entity_id(n.head), model.relation_id(n.relation), model.entity_id(n.tail))
         for n in group]
        for group in negatives
    ]
    return _loss_gradients_ids(
        model.kind, model.norm_order, model.entity_vecs, model.relation_vecs,
        pos_ids, neg_ids, config,
    )


def _loss_gradients_ids(kind, norm_order, entity_vecs, relation_vecs,
                        pos_ids, neg_ids, config):
    flat_neg = [n for group in neg_ids for n in group]
    group_sizes = [len(group) for group in neg_ids]

    def rows(ids):
        idx = np.array(ids, dtype=np.int64).reshape(-1, 3)
        return entity_vecs[idx[:, 0]], relation_vecs[idx[:, 1]], entity_vecs[idx[:, 2]]

    ph, pr, pt = rows(pos_ids)
    pos_scores = score_arrays(kind, norm_order, ph, pr, pt)
    if flat_neg:
        nh, nr, nt = rows(flat_neg)
        flat_scores = score_arrays(kind, norm_order, nh, nr, nt)
    else:
        flat_scores = np.zeros(0)
    neg_scores = []
    offset = 0
    for size in group_sizes:
        neg_scores.append(flat_scores[offset:offset + size])
        offset += size

    value, pos_grad, neg_grads = _loss_from_scores(
        config.loss, config.margin, pos_scores, neg_scores
    )

    grads: dict[tuple[str, int], np.ndarray] = {}

    def accumulate(ids, coeffs, h, r, t):
        if not len(ids):
            return
        gh, gr, gt = _score_gradients(kind, norm_order, h, r, t)
        c = coeffs[:, None]
        gh, gr, gt = gh * c, gr * c, gt * c
        for row, (hi, ri, ti) in enumerate(ids):
            for key, g in ((("entity", hi), gh[row]),
                           (("relation", ri), gr[row]),
                           (("entity", ti), gt[row])):
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g.copy()

    accumulate(pos_ids, pos_grad, ph, pr, pt)
    if flat_neg:
        flat_coeffs = np.concatenate([g for g in neg_grads]) if neg_grads else np.zeros(0)
        accumulate(flat_neg, flat_coeffs, nh, nr, nt)

    reg = config.regularization_weight
    if reg:
        involved: set[tuple[str, int]] = set()
        for hi, ri, ti in pos_ids + flat_neg:
            involved.add(("entity", hi))
            involved.add(("relation", ri))
            involved.add(("entity", ti))
        for key in involved:
            vec = entity_vecs[key[1]] if key[0] == "entity" else relation_vecs[key[1]]
            value += reg * float((vec * np.conj(vec)).sum().real)
            g = 2.0 * reg * vec
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g.copy()
    return value, grads


def _init_vectors(rng: np.random.Generator, n: int, k: int, kind: str) -> np.ndarray:
    bound = 1.0 / math.sqrt(k)
    real = rng.uniform(-bound, bound, size=(n, k))
    if kind == COMPLEX:
        imag = rng.uniform(-bound, bound, size=(n, k))
        return real + 1j * imag
    return real


def train(graph: KnowledgeGraph, config: TrainConfig) -> TrainResult:
    """Minibatch SGD over the graph's triples.

    All graph triples are positives; each draws eta filtered negatives
    per epoch.  TransE entity vectors are renormalized to unit L2 after
    every epoch.  Raises TrainingDiverged when the epoch loss becomes
    non-finite.  Identical graph + config yield bitwise-identical models.
    """
    if not graph.triples:
        raise ValueError("cannot train on an empty graph")
    entities = sorted(graph.entities)
    relations = sorted(graph.relations)
    e_index = {name: i for i, name in enumerate(entities)}
    r_index = {name: i for i, name in enumerate(relations)}
    positives = [
        (e_index[h], r_index[r], e_index[t]) for h, r, t in graph.triples_sorted()
    ]
    triple_ids = frozenset(positives)
    rng = np.random.default_rng(config.seed)
    entity_vecs = _init_vectors(rng, len(entities), config.k, config.kind)
    relation_vecs = _init_vectors(rng, len(relations), config.k, config.kind)

    n = len(positives)
    epoch_losses: list[float] = []
    last_finite = math.nan
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = [positives[i] for i in order[start:start + config.batch_size]]
            neg_ids = [
                _sample_negative_ids(p, triple_ids, len(entities), config.eta, rng)
                for p in batch
            ]
            batch_loss, grads = _loss_gradients_ids(
                config.kind, config.norm_order, entity_vecs, relation_vecs,
                batch, neg_ids, config,
            )
            epoch_loss += batch_loss
            for (kind, idx), g in grads.items():
                if config.max_grad_norm is not None:
                    norm = float(np.sqrt((g * np.conj(g)).sum().real))
                    if norm > config.max_grad_norm:
                        g = g * (config.max_grad_norm / norm)
                if kind == "entity":
                    entity_vecs[idx] -= config.learning_rate * g
                else:
                    relation_vecs[idx] -= config.learning_rate * g
        if not math.isfinite(epoch_loss):
            raise TrainingDiverged(epoch, last_finite)
        last_finite = epoch_loss
        epoch_losses.append(epoch_loss)
        if config.kind == TRANSE:
            norms = np.sqrt((entity_vecs * entity_vecs).sum(axis=1, keepdims=True))
            norms[norms == 0.0] = 1.0
            entity_vecs /= norms

    model = EmbeddingModel(
        kind=config.kind,
        k=config.k,
        entity_index=e_index,
        relation_index=r_index,
        entity_vecs=entity_vecs,
        relation_vecs=relation_vecs,
        norm_order=config.norm_order,
        seed=config.seed,
    )
    return TrainResult(model, epoch_losses)


@dataclass
class GridPoint:
    config: TrainConfig
    mrr: float
    mr: float


def grid_search(train_graph: KnowledgeGraph, val_triples: list[Triple],
                configs: list[TrainConfig]):
    """Train one model per config and pick the best validation MRR.

    Ties break on lower MR, then on grid order.  Returns the winning
    config and the full table of grid points.
    """
    from .evaluation import compute_metrics, rank_all_sides

    if not configs:
        raise ValueError("empty config grid")
    filter_triples = frozenset(train_graph.triples) | frozenset(val_triples)
    rows: list[GridPoint] = []
    for config in configs:
        model = train(train_graph, config).model
        ranks = rank_all_sides(model, val_triples, filter_triples=filter_triples)
        metrics = compute_metrics(ranks)
        rows.append(GridPoint(config, metrics.mrr, metrics.mr))
    best = rows[0]
    for row in rows[1:]:
        if (row.mrr, -row.mr) > (best.mrr, -best.mr):
            best = row
    return best.config, rows
