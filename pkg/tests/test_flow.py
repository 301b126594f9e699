"""Time buckets, incorporation matrices, flow series and chord exports."""

import numpy as np
import pytest

from fieldflow.corpus import Document
from fieldflow.flow import (FlowError, IncorporationMatrix, TimeBucket, borrowing_vector,
                            chord_export, flow_series, incorporation_matrix, make_buckets,
                            membership, write_matrix, write_series)
from fieldflow.plda import AttributionResult
from fieldflow.taxonomy import LabelTaxonomy

BG = "_background"


def doc(rid, year, labels, length=10):
    return Document(id=rid, year=year, tokens=np.zeros(length, dtype=np.int32),
                    labels=tuple(labels))


def attribution(docs, psi_rows, labels):
    psi = np.array(psi_rows, dtype=np.float64)
    return AttributionResult(
        labels=tuple(labels), doc_ids=[d.id for d in docs],
        years=np.array([d.year for d in docs], dtype=np.int32),
        doc_lengths=np.array([len(d) for d in docs], dtype=np.int64), psi=psi)


class TestBuckets:
    def test_schemes(self):
        assert [b.label for b in make_buckets("all", (1980, 2010))] == ["1980-2010"]
        annual = make_buckets("annual", (1980, 1983))
        assert [b.label for b in annual] == ["1980", "1981", "1982", "1983"]
        five = make_buckets("5y", (1980, 1991))
        assert [(b.start, b.end) for b in five] == [(1980, 1984), (1985, 1989), (1990, 1991)]
        decades = make_buckets("decade", (1985, 2004))
        assert [b.label for b in decades] == ["1980s", "1990s", "2000s"]
        assert decades[0].start == 1985

    def test_buckets_tile_range(self):
        for scheme in ("all", "annual", "5y", "decade"):
            buckets = make_buckets(scheme, (1980, 2010))
            covered = sorted(y for b in buckets for y in range(b.start, b.end + 1))
            assert covered == list(range(1980, 2011))

    def test_custom_scheme(self):
        buckets = make_buckets("1980:1984,1985:2010", (1980, 2010))
        assert [b.label for b in buckets] == ["1980-1984", "1985-2010"]
        with pytest.raises(FlowError, match="overlap"):
            make_buckets("1980:1990,1985:2010", (1980, 2010))
        with pytest.raises(FlowError, match="tile"):
            make_buckets("1980:1984,1990:2010", (1980, 2010))
        with pytest.raises(FlowError, match="parse"):
            make_buckets("1980to1984", (1980, 2010))


class TestMembership:
    def test_multi_label_document_belongs_to_all_its_areas(self):
        docs = [doc("d0", 1990, ("A", "B", BG)), doc("d1", 1990, ("B", BG))]
        assert membership(docs, "A", ["A", "B", BG]) == [0]
        assert membership(docs, "B", ["A", "B", BG]) == [0, 1]

    def test_bucket_restriction(self):
        docs = [doc("d0", 1985, ("A",)), doc("d1", 1995, ("A",))]
        bucket = TimeBucket("1980s", 1980, 1989)
        assert membership(docs, "A", ["A"], bucket) == [0]

    def test_unknown_area_rejected(self):
        with pytest.raises(FlowError, match="unknown area"):
            membership([doc("d0", 1990, ("A",))], "Z", ["A"])

    def test_empty_subset_allowed(self):
        assert membership([doc("d0", 1990, ("A",))], "B", ["A", "B"]) == []


class TestIncorporationMatrix:
    def two_area_setup(self):
        labels = ("A", "B", BG)
        docs = [doc("a0", 1990, ("A", BG), length=10),
                doc("a1", 1990, ("A", BG), length=30),
                doc("b0", 1990, ("B", BG), length=20)]
        psi = [[0.8, 0.1, 0.1],
               [0.6, 0.3, 0.1],
               [0.3, 0.5, 0.2]]
        return docs, attribution(docs, psi, labels), labels

    def test_token_weighted_columns(self):
        docs, att, labels = self.two_area_setup()
        m = incorporation_matrix(att, docs, TimeBucket("all", 1980, 2010),
                                 background_label=BG)
        # Column A: docs a0 (10 tokens) and a1 (30): (10*0.8 + 30*0.6)/40.
        assert m.cell("A", "A") == pytest.approx((10 * 0.8 + 30 * 0.6) / 40)
        assert m.cell("B", "A") == pytest.approx((10 * 0.1 + 30 * 0.3) / 40)
        assert m.cell(BG, "B") == pytest.approx(0.2)
        assert m.column_tokens.tolist() == [40, 20]

    def test_columns_sum_to_one_with_background(self):
        docs, att, labels = self.two_area_setup()
        m = incorporation_matrix(att, docs, TimeBucket("all", 1980, 2010),
                                 background_label=BG)
        assert np.abs(np.nansum(m.values, axis=0) - 1).max() <= 1e-6

    def test_empty_column_is_missing_but_emitted(self, tmp_path):
        labels = ("A", "B", BG)
        docs = [doc("a0", 1990, ("A", BG))]
        att = attribution(docs, [[0.9, 0.0, 0.1]], labels)
        m = incorporation_matrix(att, docs, TimeBucket("all", 1980, 2010),
                                 background_label=BG)
        assert np.isnan(m.values[:, 1]).all()
        path = tmp_path / "m.tsv"
        write_matrix(path, m, ["# fieldflow=test"])
        body = [l for l in path.read_text().splitlines() if not l.startswith("#")]
        assert body[0] == "source\tA\tB"
        assert body[1].split("\t")[2] == "NA"

    def test_directions_are_independent_quantities(self):
        docs, att, labels = self.two_area_setup()
        m = incorporation_matrix(att, docs, TimeBucket("all", 1980, 2010),
                                 background_label=BG)
        assert m.cell("A", "B") != m.cell("B", "A")

    def test_bootstrap_intervals_bracket_center(self):
        rng = np.random.default_rng(0)
        labels = ("A", "B", BG)
        docs, psi = [], []
        for i in range(40):
            docs.append(doc(f"a{i}", 1990, ("A", BG), length=int(rng.integers(5, 50))))
            a = rng.uniform(0.5, 0.9)
            psi.append([a, (1 - a) * 0.5, (1 - a) * 0.5])
        att = attribution(docs, psi, labels)
        m = incorporation_matrix(att, docs, TimeBucket("all", 1980, 2010),
                                 background_label=BG, resamples=300, seed=4)
        j = m.areas.index("A")
        i = m.row_labels.index("A")
        assert m.interval_low[i, j] <= m.values[i, j] <= m.interval_high[i, j]

    def test_attribution_must_cover_documents(self):
        docs, att, labels = self.two_area_setup()
        with pytest.raises(FlowError, match="absent"):
            incorporation_matrix(att, docs[:-1], TimeBucket("all", 1980, 2010),
                                 background_label=BG)


class TestFlowSeries:
    def build(self, seed=0, trend=None):
        rng = np.random.default_rng(seed)
        labels = ("A", "B", BG)
        docs, psi = [], []
        for i in range(240):
            year = 1980 + i % 12
            share = 0.2 if trend is None else trend(year)
            noise = rng.normal(0, 0.02)
            a = float(np.clip(share + noise, 0, 1))
            docs.append(doc(f"b{i}", year, ("B", BG), length=int(rng.integers(20, 60))))
            psi.append([a, 0.9 - a, 0.1])
        return docs, attribution(docs, psi, labels)

    def test_self_attribution_series_in_unit_interval(self):
        docs, att = self.build()
        buckets = make_buckets("annual", (1980, 1991))
        series = flow_series(att, docs, "B", "B", buckets, resamples=100, seed=1,
                             background_label=BG)
        assert ((series.values >= 0) & (series.values <= 1)).all()

    def test_stationary_series_is_flat_within_bands(self):
        docs, att = self.build(seed=7)
        buckets = make_buckets("1980:1983,1984:1987,1988:1991", (1980, 1991))
        series = flow_series(att, docs, "A", "B", buckets, resamples=300, seed=2,
                             background_label=BG)
        for b in range(3):
            assert (series.q_low <= series.values[b]).all()
            assert (series.q_high >= series.values[b]).all()

    def test_planted_trend_recovered_monotone(self):
        docs, att = self.build(seed=4, trend=lambda y: 0.4 * (y - 1980) / 11)
        buckets = make_buckets("1980:1983,1984:1987,1988:1991", (1980, 1991))
        series = flow_series(att, docs, "A", "B", buckets, resamples=200, seed=2,
                             background_label=BG)
        assert series.values[0] < series.values[1] < series.values[2]

    def test_single_member_bucket_point_only(self):
        labels = ("A", "B", BG)
        docs = [doc("b0", 1980, ("B", BG)), doc("b1", 1990, ("B", BG)),
                doc("b2", 1990, ("B", BG))]
        att = attribution(docs, [[0.2, 0.7, 0.1]] * 3, labels)
        buckets = make_buckets("1980:1984,1985:1990", (1980, 1990))
        series = flow_series(att, docs, "A", "B", buckets, resamples=100,
                             background_label=BG)
        assert not np.isnan(series.values[0])
        assert np.isnan(series.q_low[0])
        assert not np.isnan(series.q_low[1])

    def test_series_file_format(self, tmp_path):
        docs, att = self.build()
        buckets = make_buckets("1980:1991", (1980, 1991))
        series = flow_series(att, docs, "A", "B", buckets, resamples=50,
                             background_label=BG)
        path = tmp_path / "s.tsv"
        write_series(path, series, ["# fieldflow=test"])
        body = [l for l in path.read_text().splitlines() if not l.startswith("#")]
        assert body[0] == "bucket\tvalue\tq05\tq25\tq75\tq95"
        cells = body[1].split("\t")
        assert cells[0] == "1980-1991"
        q05, q25, q75, q95 = map(float, cells[2:])
        assert q05 <= q25 <= q75 <= q95


def matrix_from(values, areas=("A", "B"), tokens=(1000, 1000)):
    values = np.array(values, dtype=np.float64)
    return IncorporationMatrix(
        bucket=TimeBucket("all", 1980, 2010), areas=tuple(areas),
        row_labels=tuple(areas) + (BG,), values=values,
        column_tokens=np.array(tokens, dtype=np.int64),
        column_docs=np.array([10] * len(areas), dtype=np.int64))


class TestChordExport:
    def taxonomy(self):
        return LabelTaxonomy(subject_to_area={"sa": "A", "sb": "B"},
                             area_to_broad={"A": "broadA", "B": "broadB"})

    def test_weight_arithmetic_and_dominance(self):
        # M[A][B]=0.2 at 1000 tokens, M[B][A]=0.05 at 1000 -> weight 250,
        # dominant A.
        m = matrix_from([[0.9, 0.2], [0.05, 0.7], [0.05, 0.1]])
        edges = chord_export(m, self.taxonomy())
        assert len(edges) == 1
        e = edges[0]
        assert e.weight == pytest.approx(250.0)
        assert e.dominant == "A"
        assert (e.broad_source, e.broad_target) == ("broadA", "broadB")

    def test_symmetric_flows_flagged_tie(self):
        m = matrix_from([[0.8, 0.1], [0.1, 0.8], [0.1, 0.1]])
        edges = chord_export(m, self.taxonomy())
        assert edges[0].dominant == "tie"

    def test_zero_flow_edge_omitted_at_floor(self):
        m = matrix_from([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        assert chord_export(m, self.taxonomy()) == []
        m2 = matrix_from([[0.99, 0.001], [0.001, 0.99], [0.009, 0.009]])
        assert len(chord_export(m2, self.taxonomy())) == 1
        assert chord_export(m2, self.taxonomy(), floor=10.0) == []

    def test_pair_weight_symmetric_by_construction(self):
        m = matrix_from([[0.9, 0.3], [0.02, 0.6], [0.08, 0.1]], tokens=(500, 2000))
        (edge,) = chord_export(m, self.taxonomy())
        expected = 0.3 * 2000 + 0.02 * 500
        assert edge.weight == pytest.approx(expected)


class TestBorrowingVector:
    def test_fixed_order_excludes_diagonal_and_background(self):
        m = matrix_from([[0.7, 0.2], [0.2, 0.7], [0.1, 0.1]])
        vec, mask = borrowing_vector([m])
        assert vec.tolist() == [0.2, 0.2]
        assert mask.all()

    def test_nan_cells_masked(self):
        m = matrix_from([[0.7, np.nan], [0.2, np.nan], [0.1, np.nan]])
        vec, mask = borrowing_vector([m])
        assert mask.tolist() == [False, True]
