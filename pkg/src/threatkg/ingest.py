"""Parsers for the public threat databases.

Each parser is a pure function from an input source to a list of typed
records.  Sources may be paths, raw bytes, or binary file objects; gzip
content is detected from its magic bytes.  Malformed individual entries
are skipped with a warning, while an unreadable or structurally wrong
source raises InputFormatError.

The NVD CVE parser reads the JSON feed schema 1.1 (the ``CVE_Items``
feed files); the 2.0 API layout is not supported.
"""

from __future__ import annotations

import datetime as dt
import gzip
import io
import json
import logging
import re
import xml.etree.ElementTree as ET
from os import PathLike
from typing import BinaryIO

from .errors import InputFormatError
from .records import CapecRecord, CpeRecord, CveRecord, CvssVector, CweRecord

logger = logging.getLogger(__name__)

# Problem-type values worth keeping: real CWE ids plus NVD's placeholder
# ids (NVD-CWE-noinfo, NVD-CWE-Other), which the graph layer drops.
_CWE_VALUE_RE = re.compile(r"^(CWE-\d+|NVD-CWE-.+)$")

_REJECTED_PREFIXES = ("** REJECT **", "** RESERVED **")


def _open_binary(source) -> BinaryIO:
    """Normalize a path / bytes / binary file-like into a readable stream."""
    if isinstance(source, (str, PathLike)):
        stream: BinaryIO = open(source, "rb")
    elif isinstance(source, (bytes, bytearray)):
        stream = io.BytesIO(source)
    else:
        stream = source
    head = stream.read(2)
    stream = _Replay(head, stream)
    if head == b"\x1f\x8b":
        return gzip.GzipFile(fileobj=stream)  # type: ignore[return-value]
    return stream


class _Replay(io.RawIOBase):
    """Stream wrapper that replays already-peeked bytes."""

    def __init__(self, head: bytes, rest: BinaryIO):
        self._head = head
        self._rest = rest

    def readable(self) -> bool:
        return True

    def readinto(self, b) -> int:
        if self._head:
            n = min(len(b), len(self._head))
            b[:n] = self._head[:n]
            self._head = self._head[n:]
            return n
        data = self._rest.read(len(b))
        b[: len(data)] = data
        return len(data)


def _local_name(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def parse_cpe_dictionary(source) -> list[CpeRecord]:
    """Parse a CPE dictionary into records.

    Accepts the official XML dictionary (reading the 2.3 item names) or a
    plain text file with one CPE 2.3 name per line.  Malformed names are
    skipped; the skip count is reported through the module logger.
    """
    stream = _open_binary(source)
    head = stream.read(1)
    while head.isspace():
        head = stream.read(1)
    body = head + stream.read()
    if not body.strip():
        return []
    if head == b"<":
        names = _cpe_names_from_xml(body)
    else:
        names = [line.strip() for line in body.decode("utf-8").splitlines()]
        names = [n for n in names if n and not n.startswith("#")]
    records = []
    skipped = 0
    for name in names:
        try:
            records.append(CpeRecord.from_name(name))
        except InputFormatError as exc:
            skipped += 1
            logger.warning("skipping malformed CPE name: %s", exc)
    if skipped:
        logger.warning("skipped %d malformed CPE names", skipped)
    return records


def _cpe_names_from_xml(body: bytes) -> list[str]:
    names = []
    try:
        for _event, elem in ET.iterparse(io.BytesIO(body)):
            if _local_name(elem.tag) == "cpe23-item":
                name = elem.get("name")
                if name:
                    names.append(name)
                elem.clear()
    except ET.ParseError as exc:
        raise InputFormatError(f"malformed CPE dictionary XML: {exc}") from exc
    return names


def parse_cve_feed(source) -> list[CveRecord]:
    """Parse an NVD JSON 1.1 vulnerability feed into CVE records.

    CPE applicability statements are flattened to the referenced CPE 2.3
    names of vulnerable matches; version-range endpoints are discarded.
    Rejected/reserved placeholder entries without content are skipped.
    """
    stream = _open_binary(source)
    try:
        feed = json.load(stream)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise InputFormatError(f"not a JSON document: {exc}") from exc
    items = feed.get("CVE_Items")
    if items is None:
        raise InputFormatError("schema mismatch at $.CVE_Items: key missing")
    records = []
    skipped = 0
    for i, item in enumerate(items):
        path = f"$.CVE_Items[{i}]"
        try:
            cve_id = item["cve"]["CVE_data_meta"]["ID"]
        except (KeyError, TypeError) as exc:
            raise InputFormatError(
                f"schema mismatch at {path}.cve.CVE_data_meta.ID: {exc}"
            ) from exc
        description = _first_description(item)
        if description.startswith(_REJECTED_PREFIXES):
            skipped += 1
            continue
        published = _parse_feed_date(item.get("publishedDate"), path)
        cpes = _flatten_configurations(item.get("configurations") or {})
        cwes = _problemtype_values(item)
        cvss = _base_cvss_v3(item)
        records.append(
            CveRecord(cve_id, published, tuple(cpes), tuple(cwes), cvss)
        )
    if skipped:
        logger.info("skipped %d rejected/reserved CVE entries", skipped)
    return records


def _first_description(item: dict) -> str:
    data = item.get("cve", {}).get("description", {}).get("description_data", [])
    for entry in data:
        value = entry.get("value")
        if value:
            return value
    return ""


def _parse_feed_date(text, path: str) -> dt.date | None:
    if not text:
        return None
    try:
        return dt.datetime.strptime(text[:10], "%Y-%m-%d").date()
    except ValueError as exc:
        raise InputFormatError(f"schema mismatch at {path}.publishedDate: {exc}") from exc


def _flatten_configurations(configurations: dict) -> list[str]:
    names: list[str] = []
    seen = set()

    def walk(node: dict):
        for match in node.get("cpe_match", []) or []:
            if not match.get("vulnerable", True):
                continue
            name = match.get("cpe23Uri")
            if name and name not in seen:
                seen.add(name)
                names.append(name)
        for child in node.get("children", []) or []:
            walk(child)

    for node in configurations.get("nodes", []) or []:
        walk(node)
    return names


def _problemtype_values(item: dict) -> list[str]:
    values: list[str] = []
    seen = set()
    data = item.get("cve", {}).get("problemtype", {}).get("problemtype_data", [])
    for group in data:
        for desc in group.get("description", []) or []:
            value = (desc.get("value") or "").strip()
            if value and _CWE_VALUE_RE.match(value) and value not in seen:
                seen.add(value)
                values.append(value)
    return values


def _base_cvss_v3(item: dict) -> CvssVector | None:
    vector = (
        item.get("impact", {})
        .get("baseMetricV3", {})
        .get("cvssV3", {})
        .get("vectorString")
    )
    if not vector:
        return None
    try:
        return CvssVector.parse(vector)
    except InputFormatError as exc:
        logger.warning("ignoring unparseable CVSS vector: %s", exc)
        return None


def parse_cwe_catalog(source) -> list[CweRecord]:
    """Parse the official CWE XML catalog.

    Weaknesses, categories, and views are all emitted, with member lists
    for the latter two.  Relation names on Related_Weakness elements are
    preserved verbatim, including names absent from the official list.
    """
    root = _parse_xml_root(source, "CWE catalog")
    records = []
    for section, kind in (("Weaknesses", "weakness"),
                          ("Categories", "category"),
                          ("Views", "view")):
        for container in _children_named(root, section):
            for elem in list(container):
                record = _cwe_entry(elem, kind)
                if record is not None:
                    records.append(record)
    return records


def _parse_xml_root(source, label: str) -> ET.Element:
    stream = _open_binary(source)
    try:
        return ET.parse(stream).getroot()
    except ET.ParseError as exc:
        raise InputFormatError(f"malformed {label} XML: {exc}") from exc


def _children_named(root: ET.Element, name: str):
    for child in root:
        if _local_name(child.tag) == name:
            yield child


def _cwe_entry(elem: ET.Element, kind: str) -> CweRecord | None:
    raw_id = elem.get("ID")
    if raw_id is None:
        return None
    cwe_id = f"CWE-{raw_id}"
    if kind == "weakness":
        related = []
        languages = []
        technologies = []
        likelihood = None
        consequences = []
        for child in elem.iter():
            name = _local_name(child.tag)
            if name == "Related_Weakness":
                target = child.get("CWE_ID")
                nature = child.get("Nature")
                if target and nature:
                    pair = (nature, f"CWE-{target}")
                    if pair not in related:
                        related.append(pair)
            elif name == "Language":
                value = child.get("Name") or child.get("Class")
                if value and value not in languages:
                    languages.append(value)
            elif name == "Technology":
                value = child.get("Name") or child.get("Class")
                if value and value not in technologies:
                    technologies.append(value)
            elif name == "Likelihood_Of_Exploit":
                likelihood = (child.text or "").strip() or None
            elif name == "Scope":
                value = (child.text or "").strip()
                if value and value not in consequences:
                    consequences.append(value)
        return CweRecord(
            cwe_id,
            kind,
            related=tuple(related),
            languages=tuple(languages),
            technologies=tuple(technologies),
            likelihood=likelihood,
            consequences=tuple(consequences),
        )
    members = []
    for child in elem.iter():
        if _local_name(child.tag) == "Has_Member":
            target = child.get("CWE_ID")
            if target:
                member = f"CWE-{target}"
                if member not in members:
                    members.append(member)
    return CweRecord(cwe_id, kind, members=tuple(members))


#: CAPEC scalar attributes lifted into records, as (element tag, attribute name).
CAPEC_ATTRIBUTE_TAGS = (
    ("Likelihood_Of_Attack", "likelihood_of_attack"),
    ("Typical_Severity", "typical_severity"),
)


def parse_capec_catalog(source, attribute_tags=CAPEC_ATTRIBUTE_TAGS) -> list[CapecRecord]:
    """Parse the official CAPEC XML catalog into attack-pattern records."""
    root = _parse_xml_root(source, "CAPEC catalog")
    tag_map = dict(attribute_tags)
    records = []
    for container in _children_named(root, "Attack_Patterns"):
        for elem in list(container):
            if _local_name(elem.tag) != "Attack_Pattern":
                continue
            raw_id = elem.get("ID")
            if raw_id is None:
                continue
            related = []
            attributes = []
            for child in elem.iter():
                name = _local_name(child.tag)
                if name == "Related_Weakness":
                    target = child.get("CWE_ID")
                    if target and f"CWE-{target}" not in related:
                        related.append(f"CWE-{target}")
                elif name in tag_map:
                    value = (child.text or "").strip()
                    if value:
                        attributes.append((tag_map[name], value))
            records.append(
                CapecRecord(f"CAPEC-{raw_id}", tuple(related), tuple(attributes))
            )
    return records
