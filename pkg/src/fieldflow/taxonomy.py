"""Three-tier label scheme: subject codes, clustered areas, broad areas.

The area tier can be reproduced methodologically (tf-idf subject vectors,
single-link agglomerative clustering over cosine similarity, then a cut
plus curated overrides) or loaded directly from a taxonomy file. One
distinguished background label sits outside all tiers and is attached to
every document when labels are applied.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Document, Vocabulary

logger = logging.getLogger(__name__)

BACKGROUND_LABEL = "_background"

SUBJECT_TIER = 0
AREA_TIER = 1


class TaxonomyError(ValueError):
    pass


@dataclass
class LabelTaxonomy:
    """Total maps subject -> area -> broad area, plus the background label."""

    subject_to_area: dict[str, str]
    area_to_broad: dict[str, str]
    background: str = BACKGROUND_LABEL

    def __post_init__(self):
        missing = sorted(set(self.subject_to_area.values()) - set(self.area_to_broad))
        if missing:
            raise TaxonomyError(f"areas without a broad area: {missing}")
        unused = sorted(set(self.area_to_broad) - set(self.subject_to_area.values()))
        if unused:
            raise TaxonomyError(f"areas with no subjects: {unused}")
        reserved = [self.background]
        offenders = sorted(set(reserved) & (set(self.subject_to_area)
                                            | set(self.area_to_broad)
                                            | set(self.area_to_broad.values())))
        if offenders:
            raise TaxonomyError(f"reserved background label used in taxonomy: {offenders}")

    @property
    def subjects(self) -> tuple[str, ...]:
        return tuple(sorted(self.subject_to_area))

    @property
    def areas(self) -> tuple[str, ...]:
        return tuple(sorted(self.area_to_broad))

    @property
    def broad_areas(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.area_to_broad.values())))

    def area_of(self, subject: str) -> str:
        return self.subject_to_area[subject]

    def broad_of(self, area: str) -> str:
        return self.area_to_broad[area]

    def labels(self, tier: int) -> tuple[str, ...]:
        """All model labels at a tier: the tier's codes plus the background."""
        if tier == SUBJECT_TIER:
            return self.subjects + (self.background,)
        if tier == AREA_TIER:
            return self.areas + (self.background,)
        raise TaxonomyError(f"unknown tier {tier}; expected 0 (subject) or 1 (area)")


@dataclass
class SubjectVector:
    """Unit-normalized sparse tf-idf vector for one subject code."""

    subject: str
    term_ids: np.ndarray
    weights: np.ndarray

    def cosine(self, other: "SubjectVector") -> float:
        mine = {int(t): float(w) for t, w in zip(self.term_ids, self.weights)}
        return float(sum(mine.get(int(t), 0.0) * float(w)
                         for t, w in zip(other.term_ids, other.weights)))


@dataclass
class Dendrogram:
    """Ordered single-link merge list over subject codes.

    Each merge is (left, right, similarity) where left/right name the
    lexicographically smallest member of each cluster being merged and
    left < right; the merged cluster is afterwards named by ``left``.
    """

    leaves: tuple[str, ...]
    merges: list[tuple[str, str, float]]


def subject_vectors(docs: Sequence[Document], vocab: Vocabulary,
                    subjects: Sequence[str] | None = None) -> list[SubjectVector]:
    """Build tf-idf vectors per subject: tf(term in subject docs) * ln(N/df).

    Vectors are unit Euclidean normalized. Subjects with no documents are
    omitted with a diagnostic.
    """
    n_docs = len(docs)
    idf = np.log(n_docs / vocab.doc_freq.astype(np.float64))
    by_subject: dict[str, dict[int, int]] = {}
    for doc in docs:
        for subject in doc.labels:
            tf = by_subject.setdefault(subject, {})
            for t in doc.tokens.tolist():
                tf[t] = tf.get(t, 0) + 1
    wanted = sorted(by_subject) if subjects is None else list(subjects)
    out = []
    for subject in wanted:
        tf = by_subject.get(subject)
        if not tf:
            logger.warning("subject %r has no documents; omitted from clustering", subject)
            continue
        term_ids = np.array(sorted(tf), dtype=np.int32)
        weights = np.array([tf[t] for t in term_ids], dtype=np.float64) * idf[term_ids]
        norm = math.sqrt(float(weights @ weights))
        if norm > 0.0:
            weights = weights / norm
        else:
            logger.warning("subject %r has an all-zero tf-idf vector", subject)
        out.append(SubjectVector(subject=subject, term_ids=term_ids, weights=weights))
    return out


def _cosine_matrix(vectors: Sequence[SubjectVector], dim: int) -> np.ndarray:
    dense = np.zeros((len(vectors), dim), dtype=np.float64)
    for i, vec in enumerate(vectors):
        dense[i, vec.term_ids] = vec.weights
    return dense @ dense.T


def single_link_hac(vectors: Sequence[SubjectVector],
                    dim: int | None = None) -> Dendrogram:
    """Single-link agglomerative clustering under cosine similarity.

    At each step the pair of clusters with the maximum cross-pair cosine
    merges; ties break on the lexicographically lowest (left, right) name
    pair, so the merge order is deterministic.
    """
    if len(vectors) < 2:
        raise TaxonomyError("nothing to cluster: need at least 2 subject vectors")
    names = [v.subject for v in vectors]
    if len(set(names)) != len(names):
        raise TaxonomyError("duplicate subject codes in clustering input")
    if dim is None:
        dim = 1 + max((int(v.term_ids.max()) for v in vectors if len(v.term_ids)), default=0)
    sim = _cosine_matrix(vectors, dim)

    active = list(range(len(vectors)))
    rep = list(names)
    merges: list[tuple[str, str, float]] = []
    while len(active) > 1:
        best: tuple[float, str, str, int, int] | None = None
        for ai in range(len(active)):
            for bi in range(ai + 1, len(active)):
                i, j = active[ai], active[bi]
                left, right = sorted((rep[i], rep[j]))
                s = sim[i, j]
                if (best is None or s > best[0]
                        or (s == best[0] and (left, right) < (best[1], best[2]))):
                    best = (s, left, right, i, j)
        s, left, right, i, j = best
        merges.append((left, right, float(s)))
        # Single link: the merged cluster's similarity to any other cluster
        # is the max of its parts' similarities.
        np.maximum(sim[i], sim[j], out=sim[i])
        sim[:, i] = sim[i]
        rep[i] = left
        active.remove(j)
    return Dendrogram(leaves=tuple(names), merges=merges)


def cut_dendrogram(dendrogram: Dendrogram, target: int) -> dict[str, str]:
    """Stop merging when exactly ``target`` clusters remain.

    Returns subject -> cluster-name (the lexicographically smallest member
    of each cluster).
    """
    n = len(dendrogram.leaves)
    if not 1 <= target <= n:
        raise TaxonomyError(f"target cluster count {target} not in 1..{n}")
    parent = {name: name for name in dendrogram.leaves}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for left, right, _ in dendrogram.merges[: n - target]:
        a, b = find(left), find(right)
        keep, drop = sorted((a, b))
        parent[drop] = keep
    return {name: find(name) for name in dendrogram.leaves}


def cut_to_areas(dendrogram: Dendrogram, target: int,
                 curation: Sequence[tuple[str, str, str]] = ()) -> LabelTaxonomy:
    """Cut the subject tree into areas and apply curation overrides.

    Curation rows are (subject, area, broad_area) triples:

    * ``("-", area, broad)`` declares an area (created if absent) and pins
      its broad area;
    * ``(subject, area, broad-or-"")`` moves the subject into an existing
      or declared area, optionally pinning that area's broad area.

    Rows referencing unknown subjects or undeclared areas raise one error
    listing every offender. Areas left without subjects are dropped;
    areas without a curated broad area default to themselves.
    """
    assignment = cut_dendrogram(dendrogram, target)
    areas = set(assignment.values())
    broad: dict[str, str] = {}
    offenders: list[str] = []

    for subject, area, broad_area in curation:
        if subject == "-":
            areas.add(area)
            if broad_area:
                broad[area] = broad_area
    for subject, area, broad_area in curation:
        if subject == "-":
            continue
        if subject not in assignment:
            offenders.append(f"unknown subject {subject!r}")
            continue
        if area not in areas:
            offenders.append(f"undeclared area {area!r} (for subject {subject!r})")
            continue
        assignment[subject] = area
        if broad_area:
            broad[area] = broad_area
    if offenders:
        raise TaxonomyError("curation errors: " + "; ".join(offenders))

    used = set(assignment.values())
    area_to_broad = {a: broad.get(a, a) for a in sorted(used)}
    return LabelTaxonomy(subject_to_area=assignment, area_to_broad=area_to_broad)


def relabel_documents(docs: Sequence[Document], taxonomy: LabelTaxonomy,
                      tier: int) -> list[Document]:
    """Map each document's labels through the taxonomy tier and attach the
    background label. Idempotent at a fixed tier; unmapped labels raise.
    """
    if tier not in (SUBJECT_TIER, AREA_TIER):
        raise TaxonomyError(f"unknown tier {tier}")
    areas = set(taxonomy.area_to_broad)
    offenders: set[str] = set()
    out = []
    for doc in docs:
        mapped: set[str] = set()
        for label in doc.labels:
            if label == taxonomy.background:
                continue
            if label in taxonomy.subject_to_area:
                mapped.add(taxonomy.subject_to_area[label] if tier == AREA_TIER else label)
            elif tier == AREA_TIER and label in areas:
                mapped.add(label)
            else:
                offenders.add(label)
        out.append(Document(id=doc.id, year=doc.year, tokens=doc.tokens,
                            labels=tuple(sorted(mapped)) + (taxonomy.background,)))
    if offenders:
        raise TaxonomyError(f"labels not covered by the taxonomy: {sorted(offenders)}")
    return out


def load_taxonomy(path: str | Path) -> LabelTaxonomy:
    """Load a full taxonomy from a tab-separated file.

    Columns: subject_code, area, broad_area. ``#`` starts a comment. Rows
    with subject ``-`` only pin an area's broad area.
    """
    rows = read_curation(path)
    subject_to_area: dict[str, str] = {}
    area_to_broad: dict[str, str] = {}
    for subject, area, broad_area in rows:
        if subject != "-":
            if subject in subject_to_area and subject_to_area[subject] != area:
                raise TaxonomyError(f"subject {subject!r} mapped to multiple areas")
            subject_to_area[subject] = area
        if broad_area:
            prev = area_to_broad.get(area)
            if prev is not None and prev != broad_area:
                raise TaxonomyError(f"area {area!r} mapped to multiple broad areas")
            area_to_broad[area] = broad_area
    for area in set(subject_to_area.values()):
        area_to_broad.setdefault(area, area)
    return LabelTaxonomy(subject_to_area=subject_to_area, area_to_broad=area_to_broad)


def read_curation(path: str | Path) -> list[tuple[str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cells = line.split("\t")
            if len(cells) == 2:
                cells.append("")
            if len(cells) != 3 or not cells[0] or not cells[1]:
                raise TaxonomyError(f"{path}:{lineno}: expected subject<TAB>area[<TAB>broad]")
            rows.append((cells[0], cells[1], cells[2]))
    return rows


def write_taxonomy(path: str | Path, taxonomy: LabelTaxonomy,
                   header_lines: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(line + "\n")
        for subject in taxonomy.subjects:
            area = taxonomy.subject_to_area[subject]
            fh.write(f"{subject}\t{area}\t{taxonomy.area_to_broad[area]}\n")


def write_dendrogram(path: str | Path, dendrogram: Dendrogram,
                     header_lines: Sequence[str] = ()) -> None:
    """Export the merge list as tab-separated (step, left, right, similarity)."""
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(line + "\n")
        fh.write("step\tleft\tright\tsimilarity\n")
        for step, (left, right, sim) in enumerate(dendrogram.merges):
            fh.write(f"{step}\t{left}\t{right}\t{sim!r}\n")
