"""Bootstrap significance machinery and cross-model consistency checks.

Direction calls between two areas compare percentile-bootstrap intervals
of the token-weighted mean incorporation in each direction; an area
exports to a partner only when its incoming interval clears the partner's
entirely (two-sided 5% level via non-overlapping 95% intervals, a
conservative reading). Net source scores sum those calls.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Document
from .flow import TimeBucket, membership
from .plda import AttributionResult, derive_seed
from .taxonomy import LabelTaxonomy

logger = logging.getLogger(__name__)

A_EXPORTS = "a_exports"
B_EXPORTS = "b_exports"
INDISTINGUISHABLE = "indistinguishable"


class StatsError(ValueError):
    pass


@dataclass
class BootstrapSummary:
    """Percentile-bootstrap summary of one token-weighted mean statistic.

    ``center`` is the statistic on the original sample; low/high are the
    empirical 2.5%/97.5% bounds, with quartiles in between.
    """

    center: float
    low: float
    q25: float
    q75: float
    high: float
    n_docs: int
    resamples: int


def bootstrap_stat(weights: np.ndarray, values: np.ndarray, resamples: int = 500,
                   seed: int = 0) -> BootstrapSummary:
    """Bootstrap the token-weighted mean of per-document attributions.

    Documents (weight, value) pairs are resampled with replacement
    ``resamples`` times; quantiles are read off the recomputed statistics.
    Fewer than two documents leave the interval undefined.
    """
    weights = np.asarray(weights, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n = weights.shape[0]
    if n < 2:
        raise StatsError(f"bootstrap undefined for {n} document(s)")
    center = float(weights @ values / weights.sum())
    rng = np.random.Generator(np.random.PCG64(seed))
    draws = rng.integers(0, n, size=(resamples, n))
    w = weights[draws]
    stats = (w * values[draws]).sum(axis=1) / w.sum(axis=1)
    q_low, q25, q75, q_high = np.quantile(stats, [0.025, 0.25, 0.75, 0.975])
    return BootstrapSummary(center=center, low=float(q_low), q25=float(q25),
                            q75=float(q75), high=float(q_high),
                            n_docs=n, resamples=resamples)


@dataclass
class PairVerdict:
    """Directional comparison of language incorporation between two areas."""

    a: str
    b: str
    bucket: str
    direction: str
    into_b: BootstrapSummary | None
    into_a: BootstrapSummary | None

    def flipped(self) -> "PairVerdict":
        direction = {A_EXPORTS: B_EXPORTS, B_EXPORTS: A_EXPORTS}.get(
            self.direction, self.direction)
        return PairVerdict(a=self.b, b=self.a, bucket=self.bucket,
                           direction=direction, into_b=self.into_a, into_a=self.into_b)


def _member_stat_inputs(attribution: AttributionResult, docs: Sequence[Document],
                        source: str, target: str, bucket: TimeBucket):
    labels = attribution.labels
    member = membership(docs, target, labels, bucket)
    wts = attribution.doc_lengths[member].astype(np.float64)
    vals = attribution.psi[member, labels.index(source)]
    return wts, vals


def pair_verdict(attribution: AttributionResult, docs: Sequence[Document],
                 a: str, b: str, bucket: TimeBucket, resamples: int = 500,
                 seed: int = 0) -> PairVerdict:
    """Compare a->b incorporation (in b's documents) with b->a (in a's).

    Direction is decided only when the two 95% intervals do not overlap;
    an undefined side (fewer than two member documents) yields
    ``indistinguishable`` with a diagnostic. Swapping the arguments flips
    the verdict and nothing else (seeds derive from the unordered pair).
    """
    if a == b:
        raise StatsError("pair verdict needs two distinct areas")
    x, y = sorted((a, b))
    docs = list(docs)
    aligned = _check_alignment(attribution, docs)

    def side(source: str, target: str, tag: int) -> BootstrapSummary | None:
        wts, vals = _member_stat_inputs(attribution, aligned, source, target, bucket)
        if wts.shape[0] < 2:
            logger.info("bucket %s: %s->%s undefined (%d member docs)",
                        bucket.label, source, target, wts.shape[0])
            return None
        return bootstrap_stat(wts, vals, resamples=resamples,
                              seed=derive_seed(seed, "pair", x, y, bucket.label, tag))

    into_y = side(x, y, 0)
    into_x = side(y, x, 1)
    if into_y is None or into_x is None:
        direction = INDISTINGUISHABLE
    elif into_y.low > into_x.high:
        direction = A_EXPORTS
    elif into_x.low > into_y.high:
        direction = B_EXPORTS
    else:
        direction = INDISTINGUISHABLE
    verdict = PairVerdict(a=x, b=y, bucket=bucket.label, direction=direction,
                          into_b=into_y, into_a=into_x)
    return verdict if (a, b) == (x, y) else verdict.flipped()


def _check_alignment(attribution: AttributionResult, docs: Sequence[Document]):
    if len(docs) != attribution.n_docs or any(
            d.id != did for d, did in zip(docs, attribution.doc_ids)):
        by_id = {d.id: d for d in docs}
        missing = [did for did in attribution.doc_ids if did not in by_id]
        if missing:
            raise StatsError(f"documents missing for attribution ids: {missing[:5]}")
        return [by_id[did] for did in attribution.doc_ids]
    return list(docs)


def all_pair_verdicts(attribution: AttributionResult, docs: Sequence[Document],
                      areas: Sequence[str], bucket: TimeBucket, resamples: int = 500,
                      seed: int = 0) -> list[PairVerdict]:
    areas = sorted(areas)
    return [pair_verdict(attribution, docs, a, b, bucket, resamples=resamples, seed=seed)
            for i, a in enumerate(areas) for b in areas[i + 1:]]


@dataclass
class NetSourceScore:
    """Exports minus imports over an area's decided partner verdicts."""

    area: str
    bucket: str
    score: int
    exports: int
    imports: int
    ties: int


def net_source_scores(verdicts: Sequence[PairVerdict]) -> list[NetSourceScore]:
    """Fold pair verdicts into per-area net source scores.

    Over a closed verdict set the scores sum to zero; |S| is bounded by
    the number of partner areas.
    """
    areas: dict[str, dict[str, int]] = {}
    buckets = {v.bucket for v in verdicts}
    if len(buckets) > 1:
        raise StatsError(f"verdicts span multiple buckets: {sorted(buckets)}")
    bucket = buckets.pop() if buckets else ""
    for v in verdicts:
        for name in (v.a, v.b):
            areas.setdefault(name, {"exports": 0, "imports": 0, "ties": 0})
        if v.direction == A_EXPORTS:
            areas[v.a]["exports"] += 1
            areas[v.b]["imports"] += 1
        elif v.direction == B_EXPORTS:
            areas[v.b]["exports"] += 1
            areas[v.a]["imports"] += 1
        else:
            areas[v.a]["ties"] += 1
            areas[v.b]["ties"] += 1
    return [NetSourceScore(area=name, bucket=bucket,
                           score=c["exports"] - c["imports"],
                           exports=c["exports"], imports=c["imports"], ties=c["ties"])
            for name, c in sorted(areas.items())]


def collapse_to_areas(attribution: AttributionResult,
                      taxonomy: LabelTaxonomy) -> AttributionResult:
    """Sum subject-tier attribution columns by area (background intact),
    putting subject-tier models on the same scale as area-tier models."""
    target_labels = tuple(sorted(taxonomy.areas)) + (taxonomy.background,)
    index = {l: i for i, l in enumerate(target_labels)}
    psi = np.zeros((attribution.n_docs, len(target_labels)))
    for j, label in enumerate(attribution.labels):
        if label == taxonomy.background:
            col = index[taxonomy.background]
        elif label in taxonomy.subject_to_area:
            col = index[taxonomy.subject_to_area[label]]
        elif label in taxonomy.area_to_broad:
            col = index[label]
        else:
            raise StatsError(f"attribution label {label!r} not in taxonomy")
        psi[:, col] += attribution.psi[:, j]
    return AttributionResult(labels=target_labels, doc_ids=list(attribution.doc_ids),
                             years=attribution.years, doc_lengths=attribution.doc_lengths,
                             psi=psi, skipped_ids=list(attribution.skipped_ids))


@dataclass
class ConsistencyReport:
    """Pairwise Pearson correlations of inter-area borrowing vectors."""

    model_names: tuple[str, ...]
    correlations: np.ndarray
    vector_length: int

    def min_off_diagonal(self) -> float:
        n = len(self.model_names)
        if n < 2:
            return float("nan")
        mask = ~np.eye(n, dtype=bool)
        return float(self.correlations[mask].min())


def consistency_report(named_vectors: Sequence[tuple[str, np.ndarray, np.ndarray]]
                       ) -> ConsistencyReport:
    """Correlate borrowing vectors across models.

    Each entry is (model name, vector, defined-mask) as produced by
    :func:`fieldflow.flow.borrowing_vector`; vectors must share one fixed
    ordering, undefined cells are dropped pairwise-consistently.
    """
    if len(named_vectors) < 2:
        raise StatsError("need at least two models to compare")
    lengths = {vec.shape[0] for _, vec, _ in named_vectors}
    if len(lengths) != 1:
        raise StatsError("borrowing vectors have mismatched area/bucket sets")
    mask = np.logical_and.reduce([m for _, _, m in named_vectors])
    if mask.sum() < 2:
        raise StatsError("fewer than two jointly defined borrowing cells")
    data = np.vstack([vec[mask] for _, vec, _ in named_vectors])
    corr = np.corrcoef(data)
    return ConsistencyReport(model_names=tuple(name for name, _, _ in named_vectors),
                             correlations=corr, vector_length=int(mask.sum()))


def write_scores(path: str | Path, scores: Sequence[NetSourceScore],
                 header_lines: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(line + "\n")
        fh.write("area\tbucket\tS\texports\timports\tties\n")
        for s in scores:
            fh.write(f"{s.area}\t{s.bucket}\t{s.score}\t{s.exports}\t{s.imports}\t{s.ties}\n")


def write_verdicts(path: str | Path, verdicts: Sequence[PairVerdict],
                   header_lines: Sequence[str] = ()) -> None:
    def fmt(summary: BootstrapSummary | None, attr: str) -> str:
        return "NA" if summary is None else repr(getattr(summary, attr))

    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(line + "\n")
        fh.write("a\tb\tbucket\tdirection\ta_to_b_low\ta_to_b_high\tb_to_a_low\tb_to_a_high\n")
        for v in verdicts:
            fh.write("\t".join([
                v.a, v.b, v.bucket, v.direction,
                fmt(v.into_b, "low"), fmt(v.into_b, "high"),
                fmt(v.into_a, "low"), fmt(v.into_a, "high")]) + "\n")


def write_consistency(path: str | Path, report: ConsistencyReport,
                      header_lines: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(line + "\n")
        fh.write("model\t" + "\t".join(report.model_names) + "\n")
        for i, name in enumerate(report.model_names):
            row = "\t".join(repr(float(x)) for x in report.correlations[i])
            fh.write(f"{name}\t{row}\n")
