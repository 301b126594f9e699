"""Aggregate token attributions into incorporation matrices and series.

A document belongs to every area its *observed* label set carries (using
inferred attribution for membership would be circular). The matrix cell
M[i][j] is the token-weighted mean attribution to source label i over the
documents belonging to area j in a time bucket, so each defined column,
background row included, sums to one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Document
from .plda import AttributionResult
from .taxonomy import LabelTaxonomy

logger = logging.getLogger(__name__)


class FlowError(ValueError):
    pass


@dataclass(frozen=True)
class TimeBucket:
    """Inclusive year range with a display label."""

    label: str
    start: int
    end: int

    def contains(self, year: int) -> bool:
        return self.start <= year <= self.end


def make_buckets(scheme: str, year_range: tuple[int, int]) -> list[TimeBucket]:
    """Build non-overlapping buckets covering the configured year range.

    Schemes: ``all``, ``annual``, ``5y``, ``decade``, or a custom
    comma-separated list of ``start:end`` ranges.
    """
    lo, hi = year_range
    if lo > hi:
        raise FlowError(f"bad year range {year_range}")
    if scheme == "all":
        return [TimeBucket(label=f"{lo}-{hi}", start=lo, end=hi)]
    if scheme == "annual":
        return [TimeBucket(label=str(y), start=y, end=y) for y in range(lo, hi + 1)]
    if scheme == "5y":
        starts = range(lo, hi + 1, 5)
        return [TimeBucket(label=f"{s}-{min(s + 4, hi)}", start=s, end=min(s + 4, hi))
                for s in starts]
    if scheme == "decade":
        first = lo - lo % 10
        buckets = []
        for s in range(first, hi + 1, 10):
            start, end = max(s, lo), min(s + 9, hi)
            buckets.append(TimeBucket(label=f"{s}s", start=start, end=end))
        return buckets
    try:
        parts = [p.split(":") for p in scheme.split(",") if p]
        buckets = [TimeBucket(label=f"{int(a)}-{int(b)}", start=int(a), end=int(b))
                   for a, b in parts]
    except (ValueError, TypeError) as exc:
        raise FlowError(f"cannot parse bucket scheme {scheme!r}") from exc
    buckets.sort(key=lambda b: b.start)
    for prev, cur in zip(buckets, buckets[1:]):
        if cur.start <= prev.end:
            raise FlowError(f"buckets {prev.label} and {cur.label} overlap")
    span = [(b.start, b.end) for b in buckets]
    if span[0][0] > lo or span[-1][1] < hi or any(
            b.start != a.end + 1 for a, b in zip(buckets, buckets[1:])):
        raise FlowError("custom buckets must tile the configured year range")
    return buckets


def membership(docs: Sequence[Document], area: str, known_labels: Sequence[str],
               bucket: TimeBucket | None = None) -> list[int]:
    """Indices of documents whose observed label set contains ``area``
    (restricted to a bucket when given)."""
    if area not in set(known_labels):
        raise FlowError(f"unknown area {area!r}")
    out = []
    for idx, doc in enumerate(docs):
        if area in doc.labels and (bucket is None or bucket.contains(doc.year)):
            out.append(idx)
    return out


@dataclass
class IncorporationMatrix:
    """Token-weighted attribution of each target area's words to sources.

    ``values[i, j]`` is the fraction of tokens in documents belonging to
    ``areas[j]`` attributed to ``row_labels[i]`` (areas plus the
    background row). Columns with no member documents are NaN.
    """

    bucket: TimeBucket
    areas: tuple[str, ...]
    row_labels: tuple[str, ...]
    values: np.ndarray
    column_tokens: np.ndarray
    column_docs: np.ndarray
    interval_low: np.ndarray | None = None
    interval_high: np.ndarray | None = None

    def cell(self, source: str, target: str) -> float:
        return float(self.values[self.row_labels.index(source), self.areas.index(target)])

    def column_defined(self, target: str) -> bool:
        return bool(self.column_docs[self.areas.index(target)] > 0)


def _align_docs(attribution: AttributionResult, docs: Sequence[Document]) -> list[Document]:
    by_id = {d.id: d for d in docs}
    missing = [did for did in attribution.doc_ids if did not in by_id]
    if missing:
        raise FlowError(f"attribution covers documents absent from the corpus: {missing[:5]}")
    return [by_id[did] for did in attribution.doc_ids]


def incorporation_matrix(attribution: AttributionResult, docs: Sequence[Document],
                         bucket: TimeBucket, background_label: str | None = None,
                         resamples: int = 0, seed: int = 0) -> IncorporationMatrix:
    """Token-weighted incorporation matrix for one time bucket.

    Pass ``resamples > 0`` to attach per-cell percentile-bootstrap
    intervals (two-sided 5% level) from document-level resampling.
    """
    aligned = _align_docs(attribution, docs)
    labels = attribution.labels
    areas = tuple(l for l in labels if l != background_label)
    row_labels = areas + ((background_label,) if background_label in labels else ())
    row_order = [labels.index(l) for l in row_labels]
    psi = attribution.psi[:, row_order]
    lengths = attribution.doc_lengths.astype(np.float64)

    values = np.full((len(row_labels), len(areas)), np.nan)
    lo = np.full_like(values, np.nan) if resamples else None
    hi = np.full_like(values, np.nan) if resamples else None
    col_tokens = np.zeros(len(areas), dtype=np.int64)
    col_docs = np.zeros(len(areas), dtype=np.int64)
    for j, area in enumerate(areas):
        member = np.array(membership(aligned, area, labels, bucket), dtype=np.int64)
        col_docs[j] = member.size
        if member.size == 0:
            logger.info("bucket %s: area %r has no member documents", bucket.label, area)
            continue
        wts = lengths[member]
        col_tokens[j] = int(wts.sum())
        values[:, j] = (wts @ psi[member]) / wts.sum()
        if resamples and member.size >= 2:
            rng = np.random.Generator(np.random.PCG64(seed + j))
            draws = rng.integers(0, member.size, size=(resamples, member.size))
            w = wts[draws]
            stats = np.einsum("bn,bnr->br", w, psi[member][draws]) / w.sum(axis=1)[:, None]
            lo[:, j] = np.quantile(stats, 0.025, axis=0)
            hi[:, j] = np.quantile(stats, 0.975, axis=0)
    return IncorporationMatrix(bucket=bucket, areas=areas, row_labels=row_labels,
                               values=values, column_tokens=col_tokens,
                               column_docs=col_docs, interval_low=lo, interval_high=hi)


@dataclass
class FlowSeries:
    """One source->target incorporation statistic across time buckets."""

    source: str
    target: str
    buckets: list[TimeBucket]
    values: np.ndarray
    q_low: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    q_high: np.ndarray


def flow_series(attribution: AttributionResult, docs: Sequence[Document],
                source: str, target: str, buckets: Sequence[TimeBucket],
                resamples: int = 500, seed: int = 0,
                background_label: str | None = None) -> FlowSeries:
    """Per-bucket source->target incorporation with bootstrap bands.

    The center is the plain token-weighted statistic on the member sample;
    resampling only perturbs the interval. Buckets with fewer than two
    member documents get a point value and no interval.
    """
    from .stats import bootstrap_stat

    aligned = _align_docs(attribution, docs)
    labels = attribution.labels
    if source not in labels:
        raise FlowError(f"unknown source {source!r}")
    src_col = attribution.psi[:, labels.index(source)]
    lengths = attribution.doc_lengths.astype(np.float64)

    n = len(buckets)
    values = np.full(n, np.nan)
    q_low, q25, q75, q_high = (np.full(n, np.nan) for _ in range(4))
    for b, bucket in enumerate(buckets):
        member = np.array(membership(aligned, target, labels, bucket), dtype=np.int64)
        if member.size == 0:
            continue
        wts = lengths[member]
        values[b] = float(wts @ src_col[member] / wts.sum())
        if member.size >= 2:
            summary = bootstrap_stat(wts, src_col[member], resamples=resamples,
                                     seed=seed + b)
            q_low[b], q25[b] = summary.low, summary.q25
            q75[b], q_high[b] = summary.q75, summary.high
    return FlowSeries(source=source, target=target, buckets=list(buckets),
                      values=values, q_low=q_low, q25=q25, q75=q75, q_high=q_high)


@dataclass
class ChordEdge:
    """Plot-ready undirected edge: total borrowed language between a pair."""

    source: str
    target: str
    weight: float
    dominant: str
    broad_source: str
    broad_target: str


def chord_export(matrix: IncorporationMatrix, taxonomy: LabelTaxonomy | None = None,
                 floor: float = 0.0) -> list[ChordEdge]:
    """Token-scale pair weights: M[a][b] * tokens(b) + M[b][a] * tokens(a).

    ``dominant`` names the area that sends more language (``tie`` when
    equal); edges at or below ``floor`` are omitted. Pairs are grouped by
    broad area when a taxonomy is supplied.
    """
    edges = []
    areas = matrix.areas
    for ai in range(len(areas)):
        for bi in range(ai + 1, len(areas)):
            a, b = areas[ai], areas[bi]
            sent_by_a = matrix.values[matrix.row_labels.index(a), bi]
            sent_by_b = matrix.values[matrix.row_labels.index(b), ai]
            sent_by_a = 0.0 if np.isnan(sent_by_a) else sent_by_a * matrix.column_tokens[bi]
            sent_by_b = 0.0 if np.isnan(sent_by_b) else sent_by_b * matrix.column_tokens[ai]
            weight = sent_by_a + sent_by_b
            if weight <= floor:
                continue
            if sent_by_a > sent_by_b:
                dominant = a
            elif sent_by_b > sent_by_a:
                dominant = b
            else:
                dominant = "tie"
            edges.append(ChordEdge(
                source=a, target=b, weight=float(weight), dominant=dominant,
                broad_source=taxonomy.broad_of(a) if taxonomy else "",
                broad_target=taxonomy.broad_of(b) if taxonomy else ""))
    return edges


def borrowing_vector(matrices: Sequence[IncorporationMatrix],
                     include_diagonal: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Flatten all-pairs-all-buckets incorporation into one fixed-order
    vector (bucket, then source area, then target area; background row and
    the diagonal excluded by default). Returns (values, defined-mask)."""
    vals, mask = [], []
    for matrix in matrices:
        for i, src in enumerate(matrix.areas):
            for j in range(len(matrix.areas)):
                if not include_diagonal and i == j:
                    continue
                v = matrix.values[matrix.row_labels.index(src), j]
                vals.append(0.0 if np.isnan(v) else float(v))
                mask.append(not np.isnan(v))
    return np.array(vals), np.array(mask, dtype=bool)


def _fmt(x: float) -> str:
    return "NA" if np.isnan(x) else repr(float(x))


def write_matrix(path: str | Path, matrix: IncorporationMatrix,
                 header_lines: Sequence[str] = ()) -> None:
    """Tab-separated matrix: header row of target areas, one row per source."""
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(line + "\n")
        fh.write("source\t" + "\t".join(matrix.areas) + "\n")
        for i, row_label in enumerate(matrix.row_labels):
            cells = "\t".join(_fmt(matrix.values[i, j]) for j in range(len(matrix.areas)))
            fh.write(f"{row_label}\t{cells}\n")


def write_series(path: str | Path, series: FlowSeries,
                 header_lines: Sequence[str] = ()) -> None:
    """Tab-separated series: bucket, value, q05, q25, q75, q95.

    The q05/q95 columns carry the two-sided 5%-level band (the 2.5th and
    97.5th bootstrap percentiles).
    """
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(line + "\n")
        fh.write("bucket\tvalue\tq05\tq25\tq75\tq95\n")
        for b, bucket in enumerate(series.buckets):
            fh.write("\t".join([bucket.label, _fmt(series.values[b]),
                                _fmt(series.q_low[b]), _fmt(series.q25[b]),
                                _fmt(series.q75[b]), _fmt(series.q_high[b])]) + "\n")


def write_chords(path: str | Path, edges: Sequence[ChordEdge], prov: dict | None = None) -> None:
    """Line-delimited JSON edge list for external chord renderers."""
    from .provenance import dumps_canonical

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_canonical({"_provenance": prov or {}}) + "\n")
        for e in edges:
            fh.write(dumps_canonical({
                "source": e.source, "target": e.target, "weight": e.weight,
                "dominant": e.dominant,
                "broad": [e.broad_source, e.broad_target]}) + "\n")
