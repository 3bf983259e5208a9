"""Synthetic graphs with planted structure for trainer sanity checks.

The planted graph contains disjoint vendor clusters.  Inside a cluster,
CPEs and CVEs fall into aligned subgroups (one per cluster CWE): a CVE
links to the CPEs of its subgroup plus a cluster-wide hub CPE, and to
the single CWE its subgroup corresponds to.  The cluster's CWEs form a
ChildOf chain.  Links never cross clusters, so held-out associations
are recoverable from subgroup and cluster membership, which a working
embedding must pick up.
"""

from __future__ import annotations

from .graph import (
    HAS_PART,
    HAS_PRODUCT,
    HAS_TECHNOLOGY,
    HAS_VENDOR,
    MATCHING_CVE,
    MATCHING_CWE,
    BuildOptions,
    KnowledgeGraph,
    Triple,
)


def planted_cluster_graph(
    n_clusters: int = 2,
    cpes_per_cluster: int = 10,
    cves_per_cluster: int = 20,
    cwes_per_cluster: int = 3,
    hub_cpe: bool = True,
) -> KnowledgeGraph:
    """Two-cluster (by default) graph of merged CPEs, CVEs, and CWEs."""
    triples: set[Triple] = set()
    for c in range(n_clusters):
        vendor = f"vendor{c}"
        cpes = [
            f"cpe:a:{vendor}:prod{c}_{i}:*:*" for i in range(cpes_per_cluster)
        ]
        cves = [
            f"CVE-20{10 + c}-{1000 + j}" for j in range(cves_per_cluster)
        ]
        cwes = [
            f"CWE-{100 * (c + 1) + m}" for m in range(cwes_per_cluster)
        ]
        for i, cpe in enumerate(cpes):
            triples.add(Triple(cpe, HAS_PART, "a(part)"))
            triples.add(Triple(cpe, HAS_VENDOR, f"{vendor}(vendor)"))
            triples.add(Triple(cpe, HAS_PRODUCT, f"prod{c}_{i}(product)"))
        hub = cpes_per_cluster - 1 if hub_cpe else None
        for i, cpe in enumerate(cpes):
            for j, cve in enumerate(cves):
                if i % cwes_per_cluster == j % cwes_per_cluster or i == hub:
                    triples.add(Triple(cpe, MATCHING_CVE, cve))
        for j, cve in enumerate(cves):
            triples.add(Triple(cve, MATCHING_CWE, cwes[j % cwes_per_cluster]))
        for m in range(1, cwes_per_cluster):
            triples.add(Triple(cwes[m], "ChildOf", cwes[m - 1]))
        for cwe in cwes:
            triples.add(Triple(cwe, HAS_TECHNOLOGY, f"tech{c}"))
    return KnowledgeGraph(
        triples,
        BuildOptions(merge_versions=True, remove_unconnected=True),
        snapshot=f"planted-{n_clusters}x{cpes_per_cluster}",
    )
