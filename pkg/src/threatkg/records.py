"""Typed records for entries of the CPE, CVE, CWE, and CAPEC databases.

Records are the parsed, pre-graph representation of database entries.
They carry exactly the fields later turned into graph triples.
"""

from __future__ import annotations

import datetime as dt
import re
from dataclasses import dataclass, field

from .errors import InputFormatError

CPE_PARTS = ("a", "h", "o")

CVE_ID_RE = re.compile(r"^CVE-\d{4}-\d{4,}$")

# CVSS v3.x base metrics and their legal values, in canonical vector order.
CVSS_METRIC_VALUES = {
    "AV": ("N", "A", "L", "P"),
    "AC": ("L", "H"),
    "PR": ("N", "L", "H"),
    "UI": ("N", "R"),
    "S": ("U", "C"),
    "C": ("N", "L", "H"),
    "I": ("N", "L", "H"),
    "A": ("N", "L", "H"),
}


def split_cpe_fields(name: str) -> list[str]:
    """Split a CPE 2.3 formatted string on unescaped colons.

    Backslash escapes are kept verbatim in the returned tokens.  Raises
    InputFormatError for a dangling escape at the end of the string.
    """
    fields: list[str] = []
    current: list[str] = []
    escaped = False
    for ch in name:
        if escaped:
            current.append(ch)
            escaped = False
        elif ch == "\\":
            current.append(ch)
            escaped = True
        elif ch == ":":
            fields.append("".join(current))
            current = []
        else:
            current.append(ch)
    if escaped:
        raise InputFormatError(f"dangling escape in CPE name: {name!r}")
    fields.append("".join(current))
    return fields


@dataclass(frozen=True)
class CpeRecord:
    """One CPE dictionary entry, reduced to the five graph-relevant slots."""

    raw_name: str
    part: str
    vendor: str
    product: str
    version: str
    target_sw: str
    target_hw: str

    @classmethod
    def from_name(cls, name: str) -> "CpeRecord":
        fields = split_cpe_fields(name.strip())
        if len(fields) != 13 or fields[0] != "cpe" or fields[1] != "2.3":
            raise InputFormatError(f"not a CPE 2.3 formatted string: {name!r}")
        part, vendor, product, version = fields[2], fields[3], fields[4], fields[5]
        target_sw, target_hw = fields[10], fields[11]
        if part not in CPE_PARTS:
            raise InputFormatError(f"CPE part must be one of {CPE_PARTS}: {name!r}")
        if not vendor or not product:
            raise InputFormatError(f"CPE vendor/product must be non-empty: {name!r}")
        return cls(name.strip(), part, vendor, product, version, target_sw, target_hw)

    def merge_key(self) -> tuple[str, str, str, str, str]:
        """Grouping key for version merging: everything except the version."""
        return (self.part, self.vendor, self.product, self.target_sw, self.target_hw)


@dataclass(frozen=True)
class CvssVector:
    """A CVSS base vector as an ordered metric-code -> value mapping."""

    metrics: tuple[tuple[str, str], ...]
    version: str | None = None

    def __post_init__(self):
        for code, value in self.metrics:
            legal = CVSS_METRIC_VALUES.get(code)
            if legal is None:
                raise InputFormatError(f"unknown CVSS metric code: {code}")
            if value not in legal:
                raise InputFormatError(f"illegal value {value!r} for CVSS metric {code}")

    @classmethod
    def parse(cls, text: str) -> "CvssVector":
        parts = text.strip().split("/")
        version = None
        if parts and parts[0].startswith("CVSS:"):
            version = parts[0][len("CVSS:"):]
            parts = parts[1:]
        metrics = []
        for part in parts:
            code, sep, value = part.partition(":")
            if not sep:
                raise InputFormatError(f"malformed CVSS metric {part!r} in {text!r}")
            metrics.append((code, value))
        if not metrics:
            raise InputFormatError(f"empty CVSS vector: {text!r}")
        return cls(tuple(metrics), version)

    def __str__(self) -> str:
        body = "/".join(f"{code}:{value}" for code, value in self.metrics)
        return f"CVSS:{self.version}/{body}" if self.version else body


@dataclass(frozen=True)
class CveRecord:
    """One CVE entry with its NVD-curated CPE and CWE associations."""

    cve_id: str
    published_date: dt.date | None
    matched_cpes: tuple[str, ...] = ()
    matched_cwes: tuple[str, ...] = ()
    cvss: CvssVector | None = None

    def __post_init__(self):
        if not CVE_ID_RE.match(self.cve_id):
            raise InputFormatError(f"not a CVE identifier: {self.cve_id!r}")
        if len(set(self.matched_cpes)) != len(self.matched_cpes):
            raise InputFormatError(f"{self.cve_id}: duplicate matched CPE names")
        if len(set(self.matched_cwes)) != len(self.matched_cwes):
            raise InputFormatError(f"{self.cve_id}: duplicate matched CWE ids")


CWE_KINDS = ("weakness", "category", "view")


@dataclass(frozen=True)
class CweRecord:
    """One CWE catalog entry: a weakness, a category, or a view."""

    cwe_id: str
    kind: str
    related: tuple[tuple[str, str], ...] = ()
    languages: tuple[str, ...] = ()
    technologies: tuple[str, ...] = ()
    likelihood: str | None = None
    consequences: tuple[str, ...] = ()
    members: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in CWE_KINDS:
            raise InputFormatError(f"unknown CWE entry kind: {self.kind!r}")
        if self.kind == "weakness" and self.members:
            raise InputFormatError(f"{self.cwe_id}: weaknesses do not have members")
        if self.kind != "weakness" and (
            self.related or self.languages or self.technologies
            or self.likelihood or self.consequences
        ):
            raise InputFormatError(
                f"{self.cwe_id}: views/categories carry only member lists"
            )


@dataclass(frozen=True)
class CapecRecord:
    """One CAPEC attack pattern with its CWE links and scalar attributes."""

    capec_id: str
    related_cwes: tuple[str, ...] = ()
    attributes: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if len(set(self.related_cwes)) != len(self.related_cwes):
            raise InputFormatError(f"{self.capec_id}: duplicate related CWE ids")
