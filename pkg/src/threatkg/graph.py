"""The threat knowledge graph: construction, optimization, and persistence.

Entities are plain strings named after the database entries they stand
for (``cpe:a:vim:vim:5.6:*:*``, ``CVE-2021-29529``, ``CWE-1004``,
``View-1128``) or after attribute values, which carry a role suffix
where needed (``vim(vendor)``, ``AV:N``).  A triple is an ordered
(head, relation, tail) edge.  Graphs are immutable once built; every
transformation returns a new graph.
"""

from __future__ import annotations

import datetime as dt
import logging
import re
from dataclasses import dataclass, replace
from enum import Enum
from os import PathLike
from typing import Iterable, NamedTuple

from .errors import IncompatibleGraphsError, InputFormatError
from .records import CapecRecord, CpeRecord, CveRecord, CweRecord, split_cpe_fields

logger = logging.getLogger(__name__)


class EntityClass(str, Enum):
    CPE = "CPE"
    CVE = "CVE"
    CWE = "CWE"
    CWE_VIEW = "CweView"
    CWE_CATEGORY = "CweCategory"
    CAPEC = "CAPEC"
    ATTRIBUTE = "AttributeValue"


_CVE_NAME_RE = re.compile(r"^CVE-\d{4}-\d{4,}$")
_CWE_NAME_RE = re.compile(r"^CWE-\d+$")
_VIEW_NAME_RE = re.compile(r"^View-\d+$")
_CATEGORY_NAME_RE = re.compile(r"^Category-\d+$")
_CAPEC_NAME_RE = re.compile(r"^CAPEC-\d+$")


def classify_entity(name: str) -> EntityClass:
    """Derive the entity class from an entity name."""
    if name.startswith("cpe:"):
        return EntityClass.CPE
    if _CVE_NAME_RE.match(name):
        return EntityClass.CVE
    if _CWE_NAME_RE.match(name):
        return EntityClass.CWE
    if _VIEW_NAME_RE.match(name):
        return EntityClass.CWE_VIEW
    if _CATEGORY_NAME_RE.match(name):
        return EntityClass.CWE_CATEGORY
    if _CAPEC_NAME_RE.match(name):
        return EntityClass.CAPEC
    return EntityClass.ATTRIBUTE


# Relation vocabulary.  CWE-to-CWE relation names come verbatim from the
# catalog and stay open-ended; everything else is fixed here.
HAS_PART = "HasPart"
HAS_VENDOR = "HasVendor"
HAS_PRODUCT = "HasProduct"
HAS_TARGET_SW = "HasTargetSoftware"
HAS_TARGET_HW = "HasTargetHardware"
MATCHING_CVE = "MatchingCVE"
MATCHING_CWE = "MatchingCWE"
HAS_LANGUAGE = "HasLanguage"
HAS_TECHNOLOGY = "HasTechnology"
LIKELIHOOD_OF_EXPLOIT = "LikelihoodOfExploit"
HAS_CONSEQUENCE = "HasConsequence"
MEMBER_OF_VIEW = "MemberOfView"
MEMBER_OF_CATEGORY = "MemberOfCategory"
RELATED_ATTACK_PATTERN = "RelatedAttackPattern"

CVSS_RELATIONS = {
    "AV": "HasAttackVector",
    "AC": "HasAttackComplexity",
    "PR": "HasPrivilegesRequired",
    "UI": "HasUserInteraction",
    "S": "HasScope",
    "C": "HasConfidentialityImpact",
    "I": "HasIntegrityImpact",
    "A": "HasAvailabilityImpact",
}

CPE_ATTRIBUTE_RELATIONS = (HAS_PART, HAS_VENDOR, HAS_PRODUCT, HAS_TARGET_SW, HAS_TARGET_HW)
CPE_ATTRIBUTE_SUFFIXES = ("part", "vendor", "product", "target_sw", "target_hw")

# Head/tail class legality for the fixed vocabulary (Fig. 2-style schema).
_RELATION_SCHEMA: dict[str, tuple[tuple[EntityClass, ...], tuple[EntityClass, ...]]] = {
    HAS_PART: ((EntityClass.CPE,), (EntityClass.ATTRIBUTE,)),
    HAS_VENDOR: ((EntityClass.CPE,), (EntityClass.ATTRIBUTE,)),
    HAS_PRODUCT: ((EntityClass.CPE,), (EntityClass.ATTRIBUTE,)),
    HAS_TARGET_SW: ((EntityClass.CPE,), (EntityClass.ATTRIBUTE,)),
    HAS_TARGET_HW: ((EntityClass.CPE,), (EntityClass.ATTRIBUTE,)),
    MATCHING_CVE: ((EntityClass.CPE,), (EntityClass.CVE,)),
    MATCHING_CWE: ((EntityClass.CVE,), (EntityClass.CWE,)),
    HAS_LANGUAGE: ((EntityClass.CWE,), (EntityClass.ATTRIBUTE,)),
    HAS_TECHNOLOGY: ((EntityClass.CWE,), (EntityClass.ATTRIBUTE,)),
    LIKELIHOOD_OF_EXPLOIT: ((EntityClass.CWE,), (EntityClass.ATTRIBUTE,)),
    HAS_CONSEQUENCE: ((EntityClass.CWE,), (EntityClass.ATTRIBUTE,)),
    MEMBER_OF_VIEW: ((EntityClass.CWE, EntityClass.CWE_CATEGORY), (EntityClass.CWE_VIEW,)),
    MEMBER_OF_CATEGORY: ((EntityClass.CWE,), (EntityClass.CWE_CATEGORY,)),
    RELATED_ATTACK_PATTERN: ((EntityClass.CWE,), (EntityClass.CAPEC,)),
}
for _rel in CVSS_RELATIONS.values():
    _RELATION_SCHEMA[_rel] = ((EntityClass.CVE,), (EntityClass.ATTRIBUTE,))


class Triple(NamedTuple):
    head: str
    relation: str
    tail: str


@dataclass(frozen=True)
class BuildOptions:
    """Options controlling graph construction; part of graph identity."""

    merge_versions: bool = True
    remove_unconnected: bool = True
    date_cutoff: dt.date | None = None
    with_capec: bool = False
    with_cvss: bool = False


@dataclass
class BuildStats:
    """Bookkeeping counters collected while building a graph."""

    cwe_stubs: int = 0
    dropped_placeholder_cwes: int = 0
    skipped_cpe_names: int = 0
    skipped_capec_links: int = 0
    cpe_records_in: int = 0
    cpe_records_after_merge: int = 0
    triples_before_removal: int = 0
    entities_before_removal: int = 0


class KnowledgeGraph:
    """An immutable set of triples with entity/relation indexes."""

    def __init__(
        self,
        triples: Iterable[Triple],
        options: BuildOptions | None = None,
        snapshot: str = "",
        entities: Iterable[str] | None = None,
        stats: BuildStats | None = None,
    ):
        self.triples: frozenset[Triple] = frozenset(
            Triple(*t) for t in triples
        )
        self.options = options if options is not None else BuildOptions()
        self.snapshot = snapshot
        self.stats = stats
        support = frozenset(e for t in self.triples for e in (t.head, t.tail))
        if entities is None:
            self.entities = support
        else:
            self.entities = frozenset(entities)
            if not support <= self.entities:
                raise ValueError("explicit entity set must cover all triple endpoints")
        self.relations: frozenset[str] = frozenset(t.relation for t in self.triples)
        by_head_rel: dict[tuple[str, str], set[str]] = {}
        by_rel_tail: dict[tuple[str, str], set[str]] = {}
        for head, rel, tail in self.triples:
            by_head_rel.setdefault((head, rel), set()).add(tail)
            by_rel_tail.setdefault((rel, tail), set()).add(head)
        self._by_head_rel = by_head_rel
        self._by_rel_tail = by_rel_tail

    def __len__(self) -> int:
        return len(self.triples)

    def __contains__(self, triple) -> bool:
        return Triple(*triple) in self.triples

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            self.triples == other.triples
            and self.entities == other.entities
            and self.options == other.options
            and self.snapshot == other.snapshot
        )

    def __hash__(self):
        return hash((self.triples, self.options, self.snapshot))

    def tails(self, head: str, relation: str) -> frozenset[str]:
        return frozenset(self._by_head_rel.get((head, relation), ()))

    def heads(self, relation: str, tail: str) -> frozenset[str]:
        return frozenset(self._by_rel_tail.get((relation, tail), ()))

    def entities_of_class(self, cls: EntityClass) -> list[str]:
        return sorted(e for e in self.entities if classify_entity(e) == cls)

    def triples_sorted(self) -> list[Triple]:
        """Canonical triple order, used wherever determinism matters."""
        return sorted(self.triples)

    def relation_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for t in self.triples:
            counts[t.relation] = counts.get(t.relation, 0) + 1
        return counts

    def class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.entities:
            key = classify_entity(e).value
            counts[key] = counts.get(key, 0) + 1
        return counts

    def schema_violations(self) -> list[Triple]:
        """Triples whose endpoint classes are illegal for their relation.

        Relations outside the fixed vocabulary are legal only as
        CWE-to-CWE links or CAPEC attribute links.
        """
        bad = []
        for t in self.triples:
            hc, tc = classify_entity(t.head), classify_entity(t.tail)
            schema = _RELATION_SCHEMA.get(t.relation)
            if schema is not None:
                if hc not in schema[0] or tc not in schema[1]:
                    bad.append(t)
            elif not (
                (hc == EntityClass.CWE and tc == EntityClass.CWE)
                or (hc == EntityClass.CAPEC and tc == EntityClass.ATTRIBUTE)
            ):
                bad.append(t)
        return bad


def simplified_cpe_name(record: CpeRecord, merged: bool) -> str:
    """Entity name for a CPE record.

    Merged entries drop the version slot entirely, giving the five-slot
    form ``cpe:part:vendor:product:target_sw:target_hw``; unmerged
    entries keep the version between product and target software.
    """
    slots = [record.part, record.vendor, record.product]
    if not merged:
        slots.append(record.version)
    slots += [record.target_sw, record.target_hw]
    return "cpe:" + ":".join(slots)


def cpe_attribute_triples(name: str, record: CpeRecord) -> list[Triple]:
    """Attribute triples for one CPE entity; absent (*/-) slots are skipped."""
    values = (record.part, record.vendor, record.product, record.target_sw, record.target_hw)
    triples = []
    for relation, suffix, value in zip(CPE_ATTRIBUTE_RELATIONS, CPE_ATTRIBUTE_SUFFIXES, values):
        if value in ("*", "-", ""):
            continue
        triples.append(Triple(name, relation, f"{value}({suffix})"))
    return triples


def merge_cpe_versions(subject):
    """Collapse CPE entries identical up to their version numbers.

    Accepts either a list of CpeRecord (the default path, applied before
    entity creation) or an already-built KnowledgeGraph whose CPE entity
    names still carry versions.  Idempotent in both forms.
    """
    if isinstance(subject, KnowledgeGraph):
        return _merge_graph_cpes(subject)
    merged: dict[tuple, CpeRecord] = {}
    for record in subject:
        key = record.merge_key()
        if key not in merged:
            raw = ":".join(
                ["cpe", "2.3", record.part, record.vendor, record.product,
                 "*", "*", "*", "*", "*", record.target_sw, record.target_hw, "*"]
            )
            merged[key] = replace(record, raw_name=raw, version="*")
    return list(merged.values())


def _merge_graph_cpes(graph: KnowledgeGraph) -> KnowledgeGraph:
    renames: dict[str, str] = {}
    for entity in graph.entities:
        if classify_entity(entity) is not EntityClass.CPE:
            continue
        fields = split_cpe_fields(entity)
        if len(fields) == 7:  # cpe + part/vendor/product/version/tsw/thw
            renames[entity] = "cpe:" + ":".join(fields[1:4] + fields[5:])
    if not renames:
        return KnowledgeGraph(
            graph.triples, replace(graph.options, merge_versions=True), graph.snapshot
        )
    triples = {
        Triple(renames.get(h, h), r, renames.get(t, t)) for h, r, t in graph.triples
    }
    return KnowledgeGraph(
        triples, replace(graph.options, merge_versions=True), graph.snapshot
    )


def filter_by_date(records: list[CveRecord], cutoff: dt.date) -> list[CveRecord]:
    """Keep only CVE records published on or after the cutoff date."""
    for record in records:
        if record.published_date is None:
            raise ValueError(f"{record.cve_id} has no published date")
    return [r for r in records if r.published_date >= cutoff]


def build_graph(
    cpes: list[CpeRecord],
    cves: list[CveRecord],
    cwes: list[CweRecord],
    options: BuildOptions | None = None,
    capecs: list[CapecRecord] | None = None,
    snapshot: str = "",
) -> KnowledgeGraph:
    """Assemble the threat knowledge graph from parsed records.

    Produces CPE attribute triples, CPE-CVE and CVE-CWE association
    triples, CWE attribute and CWE-to-CWE triples, and membership
    triples for views and categories.  Optimizations and extensions are
    applied according to ``options``.  A CVE mapping to a CWE id missing
    from the catalog still yields a triple (the catalog may lag NVD);
    such stubs are counted in the returned graph's stats.
    """
    options = options or BuildOptions()
    stats = BuildStats(cpe_records_in=len(cpes))
    if options.date_cutoff is not None:
        cves = filter_by_date(cves, options.date_cutoff)
    if options.merge_versions:
        cpes = merge_cpe_versions(cpes)
    stats.cpe_records_after_merge = len(cpes)

    triples: set[Triple] = set()

    # CPE entities come both from the dictionary and from CVE references;
    # either way the attributes are derived from the name's components.
    cpe_components: dict[str, CpeRecord] = {}
    for record in cpes:
        name = simplified_cpe_name(record, merged=options.merge_versions)
        cpe_components.setdefault(name, record)

    catalog_ids = {c.cwe_id for c in cwes}
    kind_by_id = {c.cwe_id: c.kind for c in cwes}

    for cve in cves:
        for raw in cve.matched_cpes:
            try:
                record = CpeRecord.from_name(raw)
            except InputFormatError as exc:
                stats.skipped_cpe_names += 1
                logger.warning("skipping CPE reference on %s: %s", cve.cve_id, exc)
                continue
            if options.merge_versions:
                record = merge_cpe_versions([record])[0]
            name = simplified_cpe_name(record, merged=options.merge_versions)
            cpe_components.setdefault(name, record)
            triples.add(Triple(name, MATCHING_CVE, cve.cve_id))
        for cwe_id in cve.matched_cwes:
            if not _CWE_NAME_RE.match(cwe_id):
                stats.dropped_placeholder_cwes += 1
                continue
            if cwe_id not in catalog_ids:
                stats.cwe_stubs += 1
            triples.add(Triple(cve.cve_id, MATCHING_CWE, cwe_id))

    for name, record in cpe_components.items():
        triples.update(cpe_attribute_triples(name, record))

    for cwe in cwes:
        triples.update(_cwe_triples(cwe, kind_by_id))

    if options.with_capec and capecs:
        _add_capec_triples(triples, capecs, stats)

    if options.with_cvss:
        _add_cvss_triples(triples, cves)

    stats.triples_before_removal = len(triples)
    stats.entities_before_removal = len({e for t in triples for e in (t.head, t.tail)})

    graph = KnowledgeGraph(triples, options, snapshot, stats=stats)
    if options.remove_unconnected:
        graph = remove_unconnected(graph)
        graph.stats = stats
    if stats.cwe_stubs:
        logger.info("created %d CWE stub entities for ids missing from the catalog",
                    stats.cwe_stubs)
    return graph


def _cwe_entity_name(cwe_id: str, kind: str) -> str:
    number = cwe_id.split("-", 1)[1]
    if kind == "view":
        return f"View-{number}"
    if kind == "category":
        return f"Category-{number}"
    return cwe_id


def _cwe_triples(cwe: CweRecord, kind_by_id: dict[str, str]) -> list[Triple]:
    name = _cwe_entity_name(cwe.cwe_id, cwe.kind)
    triples = []
    if cwe.kind == "weakness":
        for relation, target in cwe.related:
            triples.append(Triple(name, relation, target))
        for value in cwe.languages:
            triples.append(Triple(name, HAS_LANGUAGE, value))
        for value in cwe.technologies:
            triples.append(Triple(name, HAS_TECHNOLOGY, value))
        if cwe.likelihood:
            triples.append(Triple(name, LIKELIHOOD_OF_EXPLOIT, cwe.likelihood))
        for value in cwe.consequences:
            triples.append(Triple(name, HAS_CONSEQUENCE, value))
        return triples
    relation = MEMBER_OF_VIEW if cwe.kind == "view" else MEMBER_OF_CATEGORY
    for member in cwe.members:
        member_name = _cwe_entity_name(member, kind_by_id.get(member, "weakness"))
        triples.append(Triple(member_name, relation, name))
    return triples


def _add_capec_triples(triples: set[Triple], capecs: list[CapecRecord], stats: BuildStats):
    cwe_entities = {t.head for t in triples if classify_entity(t.head) is EntityClass.CWE}
    cwe_entities |= {t.tail for t in triples if classify_entity(t.tail) is EntityClass.CWE}
    for capec in capecs:
        new: list[Triple] = []
        for cwe_id in capec.related_cwes:
            if cwe_id not in cwe_entities:
                stats.skipped_capec_links += 1
                continue
            new.append(Triple(cwe_id, RELATED_ATTACK_PATTERN, capec.capec_id))
        for attr_name, value in capec.attributes:
            relation = "".join(word.capitalize() for word in attr_name.split("_"))
            new.append(Triple(capec.capec_id, relation, f"{value}({attr_name})"))
        triples.update(new)
    if stats.skipped_capec_links:
        logger.warning("skipped %d CAPEC links to CWEs absent from the graph",
                       stats.skipped_capec_links)


def _add_cvss_triples(triples: set[Triple], cves: list[CveRecord]):
    present = {t.tail for t in triples if t.relation == MATCHING_CVE}
    present |= {t.head for t in triples if t.relation == MATCHING_CWE}
    for cve in cves:
        if cve.cvss is None or cve.cve_id not in present:
            continue
        for code, value in cve.cvss.metrics:
            relation = CVSS_RELATIONS.get(code)
            if relation is None:
                continue
            triples.add(Triple(cve.cve_id, relation, f"{code}:{value}"))


def extend_with_capec(graph: KnowledgeGraph, capecs: list[CapecRecord]) -> KnowledgeGraph:
    """Add CAPEC entities, CWE->CAPEC links, and CAPEC attribute triples."""
    triples = set(graph.triples)
    stats = graph.stats or BuildStats()
    _add_capec_triples(triples, capecs, stats)
    return KnowledgeGraph(
        triples, replace(graph.options, with_capec=True), graph.snapshot, stats=stats
    )


def extend_with_cvss(graph: KnowledgeGraph, cves: list[CveRecord]) -> KnowledgeGraph:
    """Add one triple per CVSS metric for each graph CVE with a vector.

    Metric value entities (e.g. ``AV:N``) are shared across CVEs.
    """
    triples = set(graph.triples)
    _add_cvss_triples(triples, cves)
    return KnowledgeGraph(
        triples, replace(graph.options, with_cvss=True), graph.snapshot, stats=graph.stats
    )


def remove_unconnected(graph: KnowledgeGraph) -> KnowledgeGraph:
    """Drop CPE and CVE entities that carry no cross-database association.

    A CPE is unconnected without a MatchingCVE triple; a CVE is
    unconnected without a MatchingCVE or MatchingCWE triple.  Their
    attribute triples go with them, which also removes attribute values
    left with degree zero.  CWE-side entities are never removed.
    """
    connected_cpes = {t.head for t in graph.triples if t.relation == MATCHING_CVE}
    connected_cves = {t.tail for t in graph.triples if t.relation == MATCHING_CVE}
    connected_cves |= {t.head for t in graph.triples if t.relation == MATCHING_CWE}

    def keep(entity: str) -> bool:
        cls = classify_entity(entity)
        if cls is EntityClass.CPE:
            return entity in connected_cpes
        if cls is EntityClass.CVE:
            return entity in connected_cves
        return True

    triples = {t for t in graph.triples if keep(t.head) and keep(t.tail)}
    return KnowledgeGraph(
        triples,
        replace(graph.options, remove_unconnected=True),
        graph.snapshot,
        stats=graph.stats,
    )


def diff_snapshots(
    older: KnowledgeGraph, newer: KnowledgeGraph, relation: str
) -> list[Triple]:
    """New triples of one relation whose endpoints already existed.

    Returns triples of ``relation`` present in ``newer`` but not in
    ``older`` and whose head AND tail entities both exist in ``older`` --
    the open-world positive set.  Graphs built with different options are
    rejected as incomparable.
    """
    if older.options != newer.options:
        raise IncompatibleGraphsError(
            f"snapshots built with different options: {older.options} vs {newer.options}"
        )
    fresh = [
        t for t in newer.triples_sorted()
        if t.relation == relation
        and t not in older.triples
        and t.head in older.entities
        and t.tail in older.entities
    ]
    return fresh


_FILE_MAGIC = "# threat-knowledge-graph v1"


def _header_lines(graph: KnowledgeGraph) -> list[str]:
    options = graph.options
    cutoff = options.date_cutoff.isoformat() if options.date_cutoff else "-"
    return [
        f"# snapshot\t{graph.snapshot}",
        f"# merge_versions\t{str(options.merge_versions).lower()}",
        f"# remove_unconnected\t{str(options.remove_unconnected).lower()}",
        f"# date_cutoff\t{cutoff}",
        f"# with_capec\t{str(options.with_capec).lower()}",
        f"# with_cvss\t{str(options.with_cvss).lower()}",
    ]


def save_graph(graph: KnowledgeGraph, sink, timestamp: str | None = None) -> None:
    """Write a graph as a tab-separated triple file with a header block.

    The header carries the snapshot label and build options; triples
    follow one per line as head/relation/tail.  ``load_graph`` restores
    an equal graph.
    """
    lines = [_FILE_MAGIC]
    lines += _header_lines(graph)
    if timestamp:
        lines.append(f"# created\t{timestamp}")
    for head, rel, tail in graph.triples_sorted():
        for part in (head, rel, tail):
            if "\t" in part or "\n" in part:
                raise ValueError(f"name not representable in triple file: {part!r}")
        lines.append(f"{head}\t{rel}\t{tail}")
    text = "\n".join(lines) + "\n"
    if isinstance(sink, (str, PathLike)):
        with open(sink, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sink.write(text)


def load_graph(source) -> KnowledgeGraph:
    """Read a graph written by ``save_graph``; duplicates collapse with a warning."""
    if isinstance(source, (str, PathLike)):
        with open(source, "r", encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = source.read()
    lines = text.splitlines()
    if not lines or lines[0] != _FILE_MAGIC:
        raise InputFormatError("not a threat knowledge graph file (bad magic line)")
    header: dict[str, str] = {}
    body_start = 1
    for line in lines[1:]:
        if not line.startswith("# "):
            break
        body_start += 1
        key, _, value = line[2:].partition("\t")
        header[key] = value
    required = {"snapshot", "merge_versions", "remove_unconnected",
                "date_cutoff", "with_capec", "with_cvss"}
    missing = required - header.keys()
    if missing:
        raise InputFormatError(f"graph file header missing keys: {sorted(missing)}")
    options = BuildOptions(
        merge_versions=header["merge_versions"] == "true",
        remove_unconnected=header["remove_unconnected"] == "true",
        date_cutoff=(None if header["date_cutoff"] == "-"
                     else dt.date.fromisoformat(header["date_cutoff"])),
        with_capec=header["with_capec"] == "true",
        with_cvss=header["with_cvss"] == "true",
    )
    triples = []
    for i, line in enumerate(lines[body_start:], start=body_start + 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise InputFormatError(f"line {i}: expected 3 tab-separated fields")
        triples.append(Triple(*parts))
    duplicates = len(triples) - len(set(triples))
    if duplicates:
        logger.warning("graph file contains %d duplicate triple lines", duplicates)
    return KnowledgeGraph(triples, options, header["snapshot"])
