"""Corpus ingestion: tokenize, stem, prune and encode abstract records.

The pipeline is: concatenate title and abstract, split into lowercase
alphabetic tokens, drop stopwords (matched before stemming), Porter-stem
the survivors, then prune terms whose document frequency falls below a
corpus-wide threshold. Documents left with no tokens are dropped and
logged, never fatal: the reader and the preprocessor are built to survive
arbitrarily dirty record streams.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from itertools import groupby
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .porter import stem

logger = logging.getLogger(__name__)

DEFAULT_YEAR_RANGE = (1980, 2010)
DEFAULT_MIN_DF = 5

_WORDISH_RE = re.compile(r"[^\W\d_]+")

VOCABULARY_FILE = "vocabulary.tsv"
DOCUMENTS_FILE = "documents.tsv"


@dataclass(frozen=True)
class RawRecord:
    """One dissertation abstract as it arrives from the source database."""

    id: str
    year: int
    title: str
    abstract: str
    subjects: tuple[str, ...]
    school: str | None = None


@dataclass
class Vocabulary:
    """Dense term <-> index bijection with per-term document frequency."""

    terms: list[str]
    doc_freq: np.ndarray
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.terms)}
        if len(self.index) != len(self.terms):
            raise ValueError("vocabulary terms are not unique")

    def __len__(self) -> int:
        return len(self.terms)

    def __contains__(self, term: str) -> bool:
        return term in self.index


@dataclass
class Document:
    """An encoded document: ordered token indices plus its label set."""

    id: str
    year: int
    tokens: np.ndarray
    labels: tuple[str, ...]

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


def tokenize(text: str) -> list[str]:
    """Split text into maximal runs of alphabetic characters, lowercased.

    Digits, punctuation and whitespace all act as separators; the input
    order of tokens is preserved.
    """
    out = []
    for run in _WORDISH_RE.findall(text.lower()):
        if run.isalpha():
            out.append(run)
        else:
            # \w admits a few non-alphabetic numerics (superscripts and
            # the like); those separate tokens just as digits do.
            out.extend("".join(g) for alpha, g in groupby(run, key=str.isalpha) if alpha)
    return out


def load_stopwords(path: str | Path) -> frozenset[str]:
    """Read a stopword file: one term per line, ``#`` starts a comment."""
    words = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                words.add(line.lower())
    return frozenset(words)


def iter_records(path: str | Path,
                 year_range: tuple[int, int] = DEFAULT_YEAR_RANGE) -> Iterator[RawRecord]:
    """Yield well-formed records from a line-delimited JSON file.

    Malformed lines (bad JSON, missing fields, out-of-range year, empty
    subject list, duplicate id) are skipped with a logged diagnostic; the
    stream is never aborted.
    """
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                logger.warning("%s:%d: skipping unparseable record (%s)", path, lineno, exc)
                continue
            record = _validate_record(obj, year_range)
            if record is None:
                logger.warning("%s:%d: skipping malformed record", path, lineno)
                continue
            if record.id in seen:
                logger.warning("%s:%d: skipping duplicate id %r", path, lineno, record.id)
                continue
            seen.add(record.id)
            yield record


def _validate_record(obj, year_range: tuple[int, int]) -> RawRecord | None:
    if not isinstance(obj, dict):
        return None
    try:
        rid = str(obj["id"])
        year = int(obj["year"])
        title = str(obj.get("title", ""))
        abstract = str(obj["abstract"])
        subjects = tuple(str(s) for s in obj["subjects"])
    except (KeyError, TypeError, ValueError):
        return None
    if not rid or not subjects:
        return None
    if not year_range[0] <= year <= year_range[1]:
        return None
    return RawRecord(id=rid, year=year, title=title, abstract=abstract,
                     subjects=subjects, school=obj.get("school"))


def _stem_tokens(tokens: list[str], stopwords: frozenset[str],
                 cache: dict[str, str]) -> list[str]:
    out = []
    for tok in tokens:
        if tok in stopwords:
            continue
        stemmed = cache.get(tok)
        if stemmed is None:
            stemmed = cache[tok] = stem(tok)
        out.append(stemmed)
    return out


def _tokenize_record(record: RawRecord, stopwords: frozenset[str], include_title: bool,
                     cache: dict[str, str]) -> list[str]:
    text = (record.title + " " + record.abstract) if include_title else record.abstract
    return _stem_tokens(tokenize(text), stopwords, cache)


def _tokenize_chunk(args) -> list[list[str]]:
    records, stopwords, include_title = args
    cache: dict[str, str] = {}
    return [_tokenize_record(r, stopwords, include_title, cache) for r in records]


def _tokenize_all(records: Sequence[RawRecord], stopwords: frozenset[str],
                  include_title: bool, workers: int) -> list[list[str]]:
    if workers <= 1 or len(records) < 2 * workers:
        cache: dict[str, str] = {}
        return [_tokenize_record(r, stopwords, include_title, cache) for r in records]
    # Order-preserving chunked map keeps the output identical to the
    # single-worker path regardless of worker count.
    chunks = np.array_split(np.arange(len(records)), workers * 4)
    jobs = [([records[i] for i in idx], stopwords, include_title)
            for idx in chunks if len(idx)]
    out: list[list[str]] = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(_tokenize_chunk, jobs):
            out.extend(part)
    return out


class TextPreprocessor(BaseEstimator):
    """Learn a pruned stemmed vocabulary and encode documents against it.

    ``fit`` computes document frequencies over the stemmed, stopword
    filtered corpus and keeps terms occurring in at least ``min_df``
    documents (indices are assigned in sorted term order, so the mapping
    is a pure function of the input corpus and configuration).
    ``transform`` encodes records against the learned vocabulary,
    dropping unknown terms, and drops (with a logged diagnostic) any
    document left without tokens.
    """

    def __init__(self, stopwords: frozenset[str] = frozenset(), min_df: int = DEFAULT_MIN_DF,
                 include_title: bool = True, workers: int = 1):
        self.stopwords = stopwords
        self.min_df = min_df
        self.include_title = include_title
        self.workers = workers

    def _check_params(self):
        if self.min_df < 1:
            raise ValueError(f"min_df must be >= 1, got {self.min_df}")

    def fit(self, records: Iterable[RawRecord], y=None):
        self._fit(list(records))
        return self

    def _fit(self, records: list[RawRecord]) -> list[list[str]]:
        self._check_params()
        token_lists = _tokenize_all(records, frozenset(self.stopwords),
                                    self.include_title, self.workers)
        df: dict[str, int] = {}
        for toks in token_lists:
            for term in set(toks):
                df[term] = df.get(term, 0) + 1
        kept = sorted(t for t, n in df.items() if n >= self.min_df)
        self.vocabulary_ = Vocabulary(terms=kept,
                                      doc_freq=np.array([df[t] for t in kept], dtype=np.int64))
        return token_lists

    def _encode(self, records: Sequence[RawRecord],
                token_lists: list[list[str]]) -> list[Document]:
        index = self.vocabulary_.index
        docs = []
        for record, toks in zip(records, token_lists):
            ids = [index[t] for t in toks if t in index]
            if not ids:
                logger.info("dropping document %r: no tokens survive preprocessing", record.id)
                continue
            docs.append(Document(id=record.id, year=record.year,
                                 tokens=np.array(ids, dtype=np.int32),
                                 labels=tuple(sorted(set(record.subjects)))))
        return docs

    def transform(self, records: Iterable[RawRecord]) -> list[Document]:
        if not hasattr(self, "vocabulary_"):
            raise ValueError("TextPreprocessor is not fitted yet; call fit first")
        records = list(records)
        token_lists = _tokenize_all(records, frozenset(self.stopwords),
                                    self.include_title, self.workers)
        return self._encode(records, token_lists)

    def fit_transform(self, records: Iterable[RawRecord], y=None) -> list[Document]:
        records = list(records)
        token_lists = self._fit(records)
        return self._encode(records, token_lists)


def preprocess(records: Iterable[RawRecord], stopwords: frozenset[str] = frozenset(),
               min_df: int = DEFAULT_MIN_DF, include_title: bool = True,
               workers: int = 1) -> tuple[list[Document], Vocabulary]:
    """One-shot corpus build: returns encoded documents and the vocabulary."""
    pre = TextPreprocessor(stopwords=stopwords, min_df=min_df,
                           include_title=include_title, workers=workers)
    docs = pre.fit_transform(records)
    return docs, pre.vocabulary_


def write_bundle(directory: str | Path, docs: Sequence[Document], vocab: Vocabulary,
                 header_lines: Sequence[str] = ()) -> None:
    """Write a corpus bundle: vocabulary table plus encoded documents.

    ``vocabulary.tsv`` columns: term, index, doc_freq.
    ``documents.tsv`` columns: id, year, comma-joined labels, space-joined
    token indices.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = "".join(line + "\n" for line in header_lines)
    with open(directory / VOCABULARY_FILE, "w", encoding="utf-8") as fh:
        fh.write(header)
        fh.write("term\tindex\tdoc_freq\n")
        for i, term in enumerate(vocab.terms):
            fh.write(f"{term}\t{i}\t{vocab.doc_freq[i]}\n")
    with open(directory / DOCUMENTS_FILE, "w", encoding="utf-8") as fh:
        fh.write(header)
        fh.write("id\tyear\tlabels\ttokens\n")
        for doc in docs:
            toks = " ".join(map(str, doc.tokens.tolist()))
            fh.write(f"{doc.id}\t{doc.year}\t{','.join(doc.labels)}\t{toks}\n")


def read_bundle(directory: str | Path) -> tuple[list[Document], Vocabulary]:
    """Read a corpus bundle written by :func:`write_bundle`."""
    directory = Path(directory)
    terms: list[str] = []
    freqs: list[int] = []
    for row in _iter_tsv(directory / VOCABULARY_FILE, ("term", "index", "doc_freq")):
        term, idx, freq = row
        if int(idx) != len(terms):
            raise ValueError(f"vocabulary indices not dense at term {term!r}")
        terms.append(term)
        freqs.append(int(freq))
    vocab = Vocabulary(terms=terms, doc_freq=np.array(freqs, dtype=np.int64))
    docs = []
    for row in _iter_tsv(directory / DOCUMENTS_FILE, ("id", "year", "labels", "tokens")):
        rid, year, labels, tokens = row
        ids = np.array([int(t) for t in tokens.split()] if tokens else [], dtype=np.int32)
        if ids.size and ids.max() >= len(vocab):
            raise ValueError(f"document {rid!r} references tokens outside the vocabulary")
        docs.append(Document(id=rid, year=int(year), tokens=ids,
                             labels=tuple(labels.split(",")) if labels else ()))
    return docs, vocab


def _iter_tsv(path: Path, expected_columns: tuple[str, ...]) -> Iterator[list[str]]:
    with open(path, encoding="utf-8") as fh:
        header_seen = False
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            cells = line.split("\t")
            if not header_seen:
                if tuple(cells) != expected_columns:
                    raise ValueError(f"{path}: expected columns {expected_columns}, got {cells}")
                header_seen = True
                continue
            if len(cells) != len(expected_columns):
                raise ValueError(f"{path}: malformed row {line!r}")
            yield cells
