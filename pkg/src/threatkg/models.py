"""Embedding models and their scoring functions.

Three model families are supported.  TransE scores by negated
translational distance -||h + r - t|| (L1 or L2 norm); DistMult by the
trilinear dot product sum_i h_i r_i t_i; ComplEx by the real part of
the Hermitian product Re(sum_i h_i r_i conj(t_i)).  Higher scores mean
more plausible triples.
"""

from __future__ import annotations

from dataclasses import dataclass
from os import PathLike

import numpy as np

from .errors import InputFormatError, UnknownEntityError

TRANSE = "TransE"
DISTMULT = "DistMult"
COMPLEX = "ComplEx"
MODEL_KINDS = (TRANSE, DISTMULT, COMPLEX)


def score_arrays(kind: str, norm_order: int,
                 h: np.ndarray, r: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Score stacked vector batches; the last axis is the embedding axis."""
    if kind == TRANSE:
        d = h + r - t
        if norm_order == 1:
            return -np.abs(d).sum(axis=-1)
        return -np.sqrt((d * d).sum(axis=-1))
    if kind == DISTMULT:
        return (h * r * t).sum(axis=-1)
    if kind == COMPLEX:
        return (h * r * np.conj(t)).sum(axis=-1).real
    raise ValueError(f"unknown model kind: {kind}")


@dataclass
class EmbeddingModel:
    """Dense entity/relation vectors plus a model kind and scoring function.

    ``entity_index`` fixes a stable entity ordering (sorted names) used
    for serialization and reproducibility.  Vectors are float64 for
    TransE/DistMult and complex128 for ComplEx.
    """

    kind: str
    k: int
    entity_index: dict[str, int]
    relation_index: dict[str, int]
    entity_vecs: np.ndarray
    relation_vecs: np.ndarray
    norm_order: int = 2
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind: {self.kind}")
        if self.norm_order not in (1, 2):
            raise ValueError("norm_order must be 1 or 2")

    @property
    def entities(self) -> list[str]:
        return list(self.entity_index)

    def entity_names(self) -> list[str]:
        """Entity names by row index; cached, since ranking hits this a lot."""
        cached = self.__dict__.get("_names")
        if cached is None or len(cached) != len(self.entity_index):
            cached = [None] * len(self.entity_index)
            for name, idx in self.entity_index.items():
                cached[idx] = name
            self.__dict__["_names"] = cached
        return cached

    def entity_id(self, name: str) -> int:
        try:
            return self.entity_index[name]
        except KeyError:
            raise UnknownEntityError(f"entity absent from snapshot: {name!r}") from None

    def relation_id(self, name: str) -> int:
        try:
            return self.relation_index[name]
        except KeyError:
            raise UnknownEntityError(f"relation absent from snapshot: {name!r}") from None

    def score(self, head: str, relation: str, tail: str) -> float:
        h = self.entity_vecs[self.entity_id(head)]
        r = self.relation_vecs[self.relation_id(relation)]
        t = self.entity_vecs[self.entity_id(tail)]
        return float(score_arrays(self.kind, self.norm_order, h, r, t))

    def score_ids(self, heads: np.ndarray, relations: np.ndarray,
                  tails: np.ndarray) -> np.ndarray:
        return score_arrays(
            self.kind, self.norm_order,
            self.entity_vecs[heads], self.relation_vecs[relations],
            self.entity_vecs[tails],
        )


def _vector_fields(vec: np.ndarray) -> list[str]:
    if np.iscomplexobj(vec):
        out = []
        for z in vec:
            out.append(repr(float(z.real)))
            out.append(repr(float(z.imag)))
        return out
    return [repr(float(x)) for x in vec]


def _vector_from_fields(fields: list[str], k: int, is_complex: bool) -> np.ndarray:
    values = [float(f) for f in fields]
    if is_complex:
        if len(values) != 2 * k:
            raise InputFormatError("complex vector has wrong length")
        arr = np.array(values, dtype=np.float64).reshape(k, 2)
        return arr[:, 0] + 1j * arr[:, 1]
    if len(values) != k:
        raise InputFormatError("vector has wrong length")
    return np.array(values, dtype=np.float64)


def save_model(model: EmbeddingModel, sink) -> None:
    """Persist a model as TSV; floats are written with repr so that
    ``load_model(save_model(m))`` reproduces scores bitwise."""
    lines = [
        "# threat-kg-model v1",
        f"# kind\t{model.kind}",
        f"# k\t{model.k}",
        f"# norm_order\t{model.norm_order}",
        f"# seed\t{model.seed if model.seed is not None else '-'}",
        f"# entities\t{len(model.entity_index)}",
        f"# relations\t{len(model.relation_index)}",
    ]
    for name, idx in model.entity_index.items():
        lines.append("E\t" + name + "\t" + "\t".join(_vector_fields(model.entity_vecs[idx])))
    for name, idx in model.relation_index.items():
        lines.append("R\t" + name + "\t" + "\t".join(_vector_fields(model.relation_vecs[idx])))
    text = "\n".join(lines) + "\n"
    if isinstance(sink, (str, PathLike)):
        with open(sink, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sink.write(text)


def load_model(source) -> EmbeddingModel:
    if isinstance(source, (str, PathLike)):
        with open(source, "r", encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = source.read()
    lines = text.splitlines()
    if not lines or lines[0] != "# threat-kg-model v1":
        raise InputFormatError("not a model file (bad magic line)")
    header: dict[str, str] = {}
    body = []
    for line in lines[1:]:
        if line.startswith("# "):
            key, _, value = line[2:].partition("\t")
            header[key] = value
        elif line.strip():
            body.append(line)
    try:
        kind = header["kind"]
        k = int(header["k"])
        norm_order = int(header["norm_order"])
        seed = None if header["seed"] == "-" else int(header["seed"])
    except KeyError as exc:
        raise InputFormatError(f"model file header missing {exc}") from exc
    is_complex = kind == COMPLEX
    dtype = np.complex128 if is_complex else np.float64
    entity_index: dict[str, int] = {}
    relation_index: dict[str, int] = {}
    entity_rows = []
    relation_rows = []
    for line in body:
        tag, name, *fields = line.split("\t")
        vec = _vector_from_fields(fields, k, is_complex)
        if tag == "E":
            entity_index[name] = len(entity_rows)
            entity_rows.append(vec)
        elif tag == "R":
            relation_index[name] = len(relation_rows)
            relation_rows.append(vec)
        else:
            raise InputFormatError(f"unknown row tag {tag!r} in model file")
    return EmbeddingModel(
        kind=kind,
        k=k,
        entity_index=entity_index,
        relation_index=relation_index,
        entity_vecs=np.array(entity_rows, dtype=dtype),
        relation_vecs=np.array(relation_rows, dtype=dtype),
        norm_order=norm_order,
        seed=seed,
    )
