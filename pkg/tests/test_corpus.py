"""Tokenization, preprocessing and corpus-bundle round trips."""

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fieldflow.corpus import (Document, RawRecord, TextPreprocessor, iter_records,
                              load_stopwords, preprocess, read_bundle, tokenize,
                              write_bundle)


def rec(rid, abstract, title="", subjects=("s1",), year=1995):
    return RawRecord(id=rid, year=year, title=title, abstract=abstract,
                     subjects=tuple(subjects))


class TestTokenize:
    def test_empty(self):
        assert tokenize("") == []

    def test_hyphens_and_punctuation_split(self):
        assert tokenize("Genome-wide analysis.") == ["genome", "wide", "analysis"]

    def test_digits_split_tokens(self):
        assert tokenize("3D models of RNA") == ["d", "models", "of", "rna"]

    def test_order_preserved(self):
        assert tokenize("b a c a") == ["b", "a", "c", "a"]

    @given(st.text(max_size=200))
    def test_tokens_always_lowercase_alpha(self, text):
        for tok in tokenize(text):
            assert tok == tok.lower()
            assert tok.isalpha()


class TestStopwords:
    def test_file_format(self, tmp_path):
        path = tmp_path / "stop.txt"
        path.write_text("# common words\nthe\nabout\n\nAnd\n")
        assert load_stopwords(path) == frozenset({"the", "about", "and"})


class TestPreprocess:
    def test_stopword_annihilation(self):
        records = [rec(f"r{i}", "the the the") for i in range(3)]
        docs, vocab = preprocess(records, stopwords=frozenset({"the"}), min_df=1)
        assert docs == []
        assert len(vocab) == 0

    def test_min_df_threshold_edge(self):
        records = [rec("r0", "gene cell"), rec("r1", "gene")]
        docs, vocab = preprocess(records, min_df=2)
        assert vocab.terms == ["gene"]
        assert [d.id for d in docs] == ["r0", "r1"]

    def test_hand_counted_ten_doc_corpus(self):
        # Terms by document frequency: "gene" in 10 docs, "cell" in 5,
        # "enzyme" in 2 (pruned at min_df=3). Stemming maps enzymes->enzym
        # and genes->gene; "the" is stopworded before stemming.
        records = []
        for i in range(10):
            text = "the gene" + (" cell" if i < 5 else "") + (" enzymes" if i < 2 else "")
            records.append(rec(f"r{i}", text, subjects=("s1", "s2")))
        docs, vocab = preprocess(records, stopwords=frozenset({"the"}), min_df=3)
        assert vocab.terms == ["cell", "gene"]
        assert vocab.doc_freq.tolist() == [5, 10]
        gene, cell = vocab.index["gene"], vocab.index["cell"]
        assert docs[0].tokens.tolist() == [gene, cell]
        assert docs[7].tokens.tolist() == [gene]
        assert docs[0].labels == ("s1", "s2")

    def test_title_concatenated_before_abstract(self):
        records = [rec("r0", "beta", title="Alpha") for _ in range(1)]
        docs, vocab = preprocess(records, min_df=1)
        assert [vocab.terms[t] for t in docs[0].tokens] == ["alpha", "beta"]
        docs2, _ = preprocess(records, min_df=1, include_title=False)
        assert len(docs2[0]) == 1

    def test_df_counted_before_pruning_on_stemmed_terms(self):
        # "running" and "runs" stem to "run": one df per document.
        records = [rec("r0", "running runs"), rec("r1", "run")]
        _, vocab = preprocess(records, min_df=2)
        assert vocab.terms == ["run"]
        assert vocab.doc_freq.tolist() == [2]

    def test_rerun_identical(self):
        records = [rec(f"r{i}", f"alpha beta term{chr(97 + i)}") for i in range(6)]
        out1 = preprocess(records, min_df=2)
        out2 = preprocess(records, min_df=2)
        assert out1[1].terms == out2[1].terms
        assert all(np.array_equal(a.tokens, b.tokens) for a, b in zip(out1[0], out2[0]))

    def test_token_indices_within_vocabulary(self):
        records = [rec(f"r{i}", "alpha beta gamma delta " * 3) for i in range(4)]
        docs, vocab = preprocess(records, min_df=1)
        for doc in docs:
            assert doc.tokens.max() < len(vocab)

    def test_doc_freq_matches_recount_and_min_df(self):
        rng = np.random.default_rng(1)
        pool = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"]
        records = [rec(f"r{i}", " ".join(rng.choice(pool, size=8))) for i in range(20)]
        docs, vocab = preprocess(records, min_df=3)
        recount = np.zeros(len(vocab), dtype=int)
        for doc in docs:
            for t in set(doc.tokens.tolist()):
                recount[t] += 1
        assert recount.tolist() == vocab.doc_freq.tolist()
        assert (vocab.doc_freq >= 3).all()

    def test_worker_count_does_not_change_output(self):
        records = [rec(f"r{i}", f"shared word{chr(97 + i % 7)} tail") for i in range(30)]
        docs1, vocab1 = preprocess(records, min_df=2, workers=1)
        docs2, vocab2 = preprocess(records, min_df=2, workers=2)
        assert vocab1.terms == vocab2.terms
        assert [d.tokens.tolist() for d in docs1] == [d.tokens.tolist() for d in docs2]

    def test_transform_against_fitted_vocabulary(self):
        pre = TextPreprocessor(min_df=1)
        pre.fit([rec("r0", "alpha beta")])
        docs = pre.transform([rec("x", "alpha unknown"), rec("y", "unknown")])
        assert [d.id for d in docs] == ["x"]
        assert [pre.vocabulary_.terms[t] for t in docs[0].tokens] == ["alpha"]

    def test_unfitted_transform_raises(self):
        with pytest.raises(ValueError, match="not fitted"):
            TextPreprocessor().transform([rec("r0", "alpha")])

    def test_min_df_validation(self):
        with pytest.raises(ValueError, match="min_df"):
            preprocess([rec("r0", "alpha")], min_df=0)


class TestRecordReader:
    def write(self, tmp_path, lines):
        path = tmp_path / "records.jsonl"
        path.write_text("\n".join(lines) + "\n")
        return path

    def good(self, rid="r0", year=1995):
        return json.dumps({"id": rid, "year": year, "title": "t", "abstract": "a b",
                           "subjects": ["s1"]})

    def test_malformed_lines_skipped_not_fatal(self, tmp_path):
        path = self.write(tmp_path, [
            self.good("r0"),
            "{not json",
            json.dumps({"id": "r1", "year": 1995, "abstract": "x"}),  # no subjects
            json.dumps({"id": "r2", "year": 1995, "abstract": "x", "subjects": []}),
            self.good("r3"),
        ])
        ids = [r.id for r in iter_records(path)]
        assert ids == ["r0", "r3"]

    def test_year_range_enforced(self, tmp_path):
        path = self.write(tmp_path, [self.good("r0", 1979), self.good("r1", 1980),
                                     self.good("r2", 2010), self.good("r3", 2011)])
        assert [r.id for r in iter_records(path)] == ["r1", "r2"]

    def test_duplicate_ids_skipped(self, tmp_path):
        path = self.write(tmp_path, [self.good("r0"), self.good("r0"), self.good("r1")])
        assert [r.id for r in iter_records(path)] == ["r0", "r1"]

    def test_extra_fields_accepted_unused(self, tmp_path):
        line = json.dumps({"id": "r0", "year": 1995, "title": "t", "abstract": "a",
                           "subjects": ["s"], "author": "x", "advisor": "y",
                           "keywords": ["k"]})
        path = self.write(tmp_path, [line])
        assert [r.id for r in iter_records(path)] == ["r0"]


class TestBundle:
    def test_round_trip(self, tmp_path):
        records = [rec(f"r{i}", "alpha beta gamma", subjects=("s1", "s2"), year=1990 + i)
                   for i in range(5)]
        docs, vocab = preprocess(records, min_df=1)
        write_bundle(tmp_path / "bundle", docs, vocab, ["# fieldflow=test"])
        docs2, vocab2 = read_bundle(tmp_path / "bundle")
        assert vocab2.terms == vocab.terms
        assert vocab2.doc_freq.tolist() == vocab.doc_freq.tolist()
        assert [d.id for d in docs2] == [d.id for d in docs]
        assert [d.year for d in docs2] == [d.year for d in docs]
        assert [d.labels for d in docs2] == [d.labels for d in docs]
        assert all(np.array_equal(a.tokens, b.tokens) for a, b in zip(docs, docs2))

    def test_rejects_out_of_vocabulary_tokens(self, tmp_path):
        docs = [Document(id="d0", year=1990, tokens=np.array([5], dtype=np.int32),
                         labels=("s1",))]
        vocab_docs, vocab = preprocess([rec("r0", "alpha")], min_df=1)
        write_bundle(tmp_path / "b", docs, vocab)
        with pytest.raises(ValueError, match="outside the vocabulary"):
            read_bundle(tmp_path / "b")
