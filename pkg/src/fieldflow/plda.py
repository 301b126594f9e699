"""Partially labeled topic model: collapsed Gibbs training and fold-in
inference.

Each label owns a family of latent topics (one topic for the background
label by default). During training a token may only be assigned to the
topics of its document's observed labels; the conditional for token
``(d, i)`` with term ``t``, label ``j`` and topic ``k`` (counts excluding
the token itself) is proportional to::

    I[j in labels(d), k in 1..K_j]
      * (n_term[j][k][t] + eta) / (n_topic[j][k] + V * eta)
      * (n_doc[d][j][k] + alpha)

Inference re-samples each document against the full label set with the
trained topic-term counts frozen, yielding per-document attribution
fractions psi (per label) and theta (per topic).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
from sklearn.base import BaseEstimator

from . import _sampler, provenance
from .corpus import Document, Vocabulary

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"fieldflow-model-v1\n"

PSI_EXPORT_FLOOR = 1e-4


def derive_seed(*parts) -> int:
    """Stable 64-bit sub-seed from a master seed plus a derivation path."""
    digest = hashlib.sha256(repr(tuple(parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class PldaConfig:
    """Hyperparameters and sampling schedule for training and inference."""

    topics_per_label: int = 12
    background_topics: int = 1
    alpha: float = 0.1
    eta: float = 0.01
    sweeps: int = 1000
    burn_in: int = 500
    lag: int = 10
    infer_sweeps: int = 200
    infer_burn_in: int = 100
    seed: int = 0
    workers: int = 1
    topic_overrides: dict = field(default_factory=dict)

    def validate(self) -> "PldaConfig":
        if self.alpha <= 0 or self.eta <= 0:
            raise ValueError("alpha and eta must be > 0")
        if not self.sweeps > self.burn_in >= 0:
            raise ValueError("need sweeps > burn_in >= 0")
        if self.sweeps < self.burn_in + self.lag:
            raise ValueError("need sweeps >= burn_in + lag (at least one snapshot)")
        if not self.infer_sweeps > self.infer_burn_in >= 0:
            raise ValueError("need infer_sweeps > infer_burn_in >= 0")
        if self.lag < 1:
            raise ValueError("lag must be >= 1")
        if self.topics_per_label < 1 or self.background_topics < 1:
            raise ValueError("topic counts must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        ok = all(int(k) >= 1 for k in self.topic_overrides.values())
        if not ok:
            raise ValueError("topic_overrides must be >= 1")
        return self


def topics_for_labels(labels: Sequence[str], background_label: str,
                      config: PldaConfig) -> dict[str, int]:
    """Resolve the per-label topic counts K_l."""
    out = {}
    for label in labels:
        if label == background_label:
            out[label] = config.background_topics
        else:
            out[label] = int(config.topic_overrides.get(label, config.topics_per_label))
    return out


class ModelState:
    """Per-token assignments plus the count tensors the conditional reads.

    Topics are flattened to global ids; ``topic_label[g]`` / ``topic_k[g]``
    recover the (label index, within-label topic) pair of global topic g.
    """

    def __init__(self, docs: Sequence[Document], labels: Sequence[str],
                 k_per_label: dict[str, int], n_vocab: int):
        self.labels = tuple(labels)
        self.n_vocab = int(n_vocab)
        label_index = {l: i for i, l in enumerate(self.labels)}
        ks = [k_per_label[l] for l in self.labels]
        self.topic_offset = np.concatenate([[0], np.cumsum(ks)]).astype(np.int64)
        self.n_topics = int(self.topic_offset[-1])
        self.topic_label = np.repeat(np.arange(len(self.labels), dtype=np.int32), ks)
        self.topic_k = np.concatenate([np.arange(k, dtype=np.int32) for k in ks])

        self.doc_ids = [d.id for d in docs]
        self.years = np.array([d.year for d in docs], dtype=np.int32)
        lengths = np.array([len(d) for d in docs], dtype=np.int64)
        self.doc_ptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        self.tokens = (np.concatenate([d.tokens for d in docs]).astype(np.int32)
                       if docs else np.empty(0, dtype=np.int32))
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= n_vocab):
            raise ValueError("document token ids fall outside the vocabulary")

        allowed: list[np.ndarray] = []
        for d in docs:
            if not d.labels:
                raise ValueError(f"document {d.id!r} has an empty label set")
            topics = []
            for lab in d.labels:
                if lab not in label_index:
                    raise ValueError(f"document {d.id!r} carries unknown label {lab!r}")
                li = label_index[lab]
                topics.append(np.arange(self.topic_offset[li], self.topic_offset[li + 1],
                                        dtype=np.int32))
            allowed.append(np.concatenate(topics))
        widths = np.array([a.shape[0] for a in allowed], dtype=np.int64)
        self.allowed_ptr = np.concatenate([[0], np.cumsum(widths)]).astype(np.int64)
        self.allowed_topics = (np.concatenate(allowed).astype(np.int32)
                               if allowed else np.empty(0, dtype=np.int32))

        try:
            self.assign_slot = np.zeros(self.tokens.shape[0], dtype=np.int32)
            self.n_term = np.zeros((self.n_topics, n_vocab), dtype=np.int64)
            self.n_topic = np.zeros(self.n_topics, dtype=np.int64)
            self.ndoc = np.zeros(self.allowed_topics.shape[0], dtype=np.int64)
        except MemoryError:
            raise MemoryError(
                f"cannot allocate model state: topic-term tensor {self.n_topics} topics x "
                f"{n_vocab} terms plus {self.allowed_topics.shape[0]} document-topic slots "
                f"over {self.tokens.shape[0]} tokens")

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    def assignment(self, d: int, i: int) -> tuple[str, int]:
        """The (label, within-label topic) currently assigned to token i of doc d."""
        slot = self.assign_slot[self.doc_ptr[d] + i]
        g = self.allowed_topics[self.allowed_ptr[d] + slot]
        return self.labels[self.topic_label[g]], int(self.topic_k[g])

    def refresh_counts(self) -> None:
        self.n_term, self.n_topic, self.ndoc = _sampler.recount(
            self.tokens, self.doc_ptr, self.allowed_topics, self.allowed_ptr,
            self.assign_slot, self.n_topics, self.n_vocab)

    def counts_consistent(self) -> bool:
        n_term, n_topic, ndoc = _sampler.recount(
            self.tokens, self.doc_ptr, self.allowed_topics, self.allowed_ptr,
            self.assign_slot, self.n_topics, self.n_vocab)
        return (np.array_equal(n_term, self.n_term)
                and np.array_equal(n_topic, self.n_topic)
                and np.array_equal(ndoc, self.ndoc))


def init_state(docs: Sequence[Document], vocabulary_size: int, labels: Sequence[str],
               k_per_label: dict[str, int], seed: int) -> ModelState:
    """Seeded uniform initialization over each document's allowed pairs."""
    state = ModelState(docs, labels, k_per_label, vocabulary_size)
    _sampler.init_assignments(state.doc_ptr, state.allowed_ptr,
                              np.uint64(derive_seed(seed, "init")), state.assign_slot)
    state.refresh_counts()
    return state


def conditional(state: ModelState, d: int, i: int, alpha: float,
                eta: float) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized Gibbs conditional for token i of document d.

    Counts must already exclude the token's own assignment (decrement
    before calling). Returns (allowed global topic ids, weights); weight
    is zero implicitly for any (label, topic) outside the document's
    label set, which the allowed list never contains.
    """
    out = np.empty(state.allowed_ptr[d + 1] - state.allowed_ptr[d], dtype=np.float64)
    n = _sampler.conditional_weights(
        state.tokens, state.doc_ptr, state.allowed_topics, state.allowed_ptr,
        state.n_term, state.n_topic, state.ndoc,
        float(alpha), float(eta), state.n_vocab, d, i, out)
    base = state.allowed_ptr[d]
    return state.allowed_topics[base:base + n].copy(), out


def gibbs_sweep(state: ModelState, alpha: float, eta: float, seed: int,
                n_sweeps: int = 1) -> None:
    """Run full training sweeps in place (doc order fixed, no snapshots)."""
    acc_term = np.zeros_like(state.n_term)
    acc_topic = np.zeros_like(state.n_topic)
    _sampler.run_training(
        state.tokens, state.doc_ptr, state.allowed_topics, state.allowed_ptr,
        state.assign_slot, state.n_term, state.n_topic, state.ndoc,
        float(alpha), float(eta), state.n_vocab,
        1, n_sweeps, n_sweeps, 1, np.uint64(seed), acc_term, acc_topic)


@dataclass
class AttributionResult:
    """Per-document expected token fractions over labels (and topics)."""

    labels: tuple[str, ...]
    doc_ids: list[str]
    years: np.ndarray
    doc_lengths: np.ndarray
    psi: np.ndarray
    theta: np.ndarray | None = None
    topic_label: np.ndarray | None = None
    token_marginals: np.ndarray | None = None
    token_ptr: np.ndarray | None = None
    skipped_ids: list[str] = field(default_factory=list)

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    def label_column(self, label: str) -> np.ndarray:
        return self.psi[:, self.labels.index(label)]


class PartiallyLabeledLDA(BaseEstimator):
    """Label-constrained topic model with collapsed Gibbs learning.

    ``fit`` learns one topic family per label from documents whose tokens
    are restricted to their observed labels. ``transform`` re-infers
    documents against the full label set with the learned topic-term
    counts frozen, returning per-document attribution fractions.

    The topic-term estimator averages count snapshots taken every ``lag``
    sweeps after burn-in; the averaged counts define::

        beta[l, k](t) = (n_term[l][k][t] + eta) / (n_topic[l][k] + V * eta)

    With ``workers=1`` training is bit-reproducible for a fixed seed;
    with more workers it runs the approximate document-sharded sampler.
    Inference is deterministic for a fixed seed at any worker count.
    """

    def __init__(self, topics_per_label: int = 12, background_topics: int = 1,
                 alpha: float = 0.1, eta: float = 0.01, sweeps: int = 1000,
                 burn_in: int = 500, lag: int = 10, infer_sweeps: int = 200,
                 infer_burn_in: int = 100, seed: int = 0, workers: int = 1,
                 topic_overrides: dict | None = None):
        self.topics_per_label = topics_per_label
        self.background_topics = background_topics
        self.alpha = alpha
        self.eta = eta
        self.sweeps = sweeps
        self.burn_in = burn_in
        self.lag = lag
        self.infer_sweeps = infer_sweeps
        self.infer_burn_in = infer_burn_in
        self.seed = seed
        self.workers = workers
        self.topic_overrides = topic_overrides

    @classmethod
    def from_config(cls, config: PldaConfig) -> "PartiallyLabeledLDA":
        return cls(**asdict(config))

    def _config(self) -> PldaConfig:
        params = {k: v for k, v in self.get_params().items()}
        params["topic_overrides"] = dict(params["topic_overrides"] or {})
        return PldaConfig(**params).validate()

    def fit(self, docs: Sequence[Document], vocabulary: Vocabulary | int,
            labels: Sequence[str] | None = None, background_label: str | None = None):
        """Train on encoded documents.

        ``labels`` fixes the model's label universe (defaults to the union
        of document labels); labels without documents keep their smoothed
        uniform topic-term distribution. ``background_label`` marks which
        label uses ``background_topics`` topics.
        """
        config = self._config()
        n_vocab = vocabulary if isinstance(vocabulary, int) else len(vocabulary)
        if n_vocab < 1:
            raise ValueError("empty vocabulary")
        if labels is None:
            labels = sorted({lab for d in docs for lab in d.labels})
        else:
            labels = sorted(labels)
        if not labels:
            raise ValueError("no labels to model")
        k_per_label = topics_for_labels(labels, background_label or "", config)

        state = init_state(docs, n_vocab, labels, k_per_label, config.seed)
        acc_term = np.zeros_like(state.n_term)
        acc_topic = np.zeros_like(state.n_topic)
        train_seed = np.uint64(derive_seed(config.seed, "train"))
        if config.workers <= 1:
            snapshots = _sampler.run_training(
                state.tokens, state.doc_ptr, state.allowed_topics, state.allowed_ptr,
                state.assign_slot, state.n_term, state.n_topic, state.ndoc,
                config.alpha, config.eta, n_vocab,
                1, config.sweeps, config.burn_in, config.lag, train_seed,
                acc_term, acc_topic)
        else:
            with _numba_threads(config.workers):
                snapshots = _sampler.run_training_parallel(
                    state.tokens, state.doc_ptr, state.allowed_topics, state.allowed_ptr,
                    state.assign_slot, state.n_term, state.n_topic, state.ndoc,
                    config.alpha, config.eta, n_vocab,
                    1, config.sweeps, config.burn_in, config.lag, train_seed,
                    acc_term, acc_topic, config.workers)

        self.config_ = config
        self.labels_ = tuple(labels)
        self.background_label_ = background_label
        self.k_per_label_ = k_per_label
        self.n_vocab_ = n_vocab
        self.vocabulary_ = vocabulary if isinstance(vocabulary, Vocabulary) else None
        self.topic_label_ = state.topic_label
        self.topic_k_ = state.topic_k
        self.n_term_sum_ = acc_term
        self.n_topic_sum_ = acc_topic
        self.n_snapshots_ = int(snapshots)
        self.state_ = state
        self._finalize_beta()
        return self

    def _finalize_beta(self) -> None:
        s = float(self.n_snapshots_)
        eta = self.config_.eta
        num = self.n_term_sum_ + s * eta
        den = self.n_topic_sum_ + s * (self.n_vocab_ * eta)
        self.beta_ = num / den[:, None]
        self._beta_t = np.ascontiguousarray(self.beta_.T)

    def transform(self, docs: Sequence[Document],
                  want_token_marginals: bool = False) -> AttributionResult:
        """Unconstrained fold-in inference over the full label set."""
        if not hasattr(self, "beta_"):
            raise ValueError("model is not fitted")
        config = self.config_
        kept = [d for d in docs if len(d) > 0]
        skipped = [d.id for d in docs if len(d) == 0]
        for did in skipped:
            logger.warning("document %r has no known tokens; attribution undefined", did)

        lengths = np.array([len(d) for d in kept], dtype=np.int64)
        doc_ptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        tokens = (np.concatenate([d.tokens for d in kept]).astype(np.int32)
                  if kept else np.empty(0, dtype=np.int32))
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.n_vocab_):
            raise ValueError("documents are not encoded against the model vocabulary")

        n_labels = len(self.labels_)
        psi = np.zeros((len(kept), n_labels), dtype=np.float64)
        theta = np.zeros((len(kept), int(self.topic_label_.shape[0])), dtype=np.float64)
        token_marg = (np.zeros((tokens.shape[0], n_labels), dtype=np.float64)
                      if want_token_marginals else np.zeros((1, 1), dtype=np.float64))
        with _numba_threads(config.workers):
            _sampler.run_inference(
                tokens, doc_ptr, self._beta_t, config.alpha, self.topic_label_,
                n_labels, config.infer_sweeps, config.infer_burn_in,
                np.uint64(derive_seed(config.seed, "infer")),
                want_token_marginals, psi, theta, token_marg)
        return AttributionResult(
            labels=self.labels_, doc_ids=[d.id for d in kept],
            years=np.array([d.year for d in kept], dtype=np.int32),
            doc_lengths=lengths, psi=psi, theta=theta, topic_label=self.topic_label_,
            token_marginals=token_marg if want_token_marginals else None,
            token_ptr=doc_ptr if want_token_marginals else None,
            skipped_ids=skipped)

    def top_terms(self, label: str, n: int, per_topic: bool = False):
        """Strongest terms for a label, overall or per latent sub-topic.

        Overall ranks by total averaged count mass across the label's
        topics; per-topic ranks by beta. Ties break on term index.
        """
        li = self.labels_.index(label)
        topic_ids = np.flatnonzero(self.topic_label_ == li)
        n = max(0, min(int(n), self.n_vocab_))

        def ranked(values: np.ndarray) -> list[int]:
            order = np.argsort(-values, kind="stable")
            return order[:n].tolist()

        if per_topic:
            return [ranked(self.beta_[g]) for g in topic_ids]
        mass = self.n_term_sum_[topic_ids].sum(axis=0)
        return ranked(mass)

    def save(self, path: str | Path, prov: dict | None = None) -> None:
        """Write the self-describing model bundle (layout in the README)."""
        header = {
            "format": 1,
            "provenance": prov or {},
            "config": asdict(self.config_),
            "labels": list(self.labels_),
            "background_label": self.background_label_,
            "k_per_label": self.k_per_label_,
            "n_vocab": self.n_vocab_,
            "n_snapshots": self.n_snapshots_,
            "vocabulary": ({"terms": self.vocabulary_.terms,
                            "doc_freq": self.vocabulary_.doc_freq.tolist()}
                           if self.vocabulary_ is not None else None),
            "arrays": [
                {"name": "n_term_sum", "dtype": "<i8",
                 "shape": list(self.n_term_sum_.shape)},
                {"name": "n_topic_sum", "dtype": "<i8",
                 "shape": list(self.n_topic_sum_.shape)},
            ],
        }
        blob = provenance.dumps_canonical(header).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(f"{len(blob)}\n".encode("ascii"))
            fh.write(blob)
            fh.write(b"\n")
            fh.write(self.n_term_sum_.astype("<i8").tobytes(order="C"))
            fh.write(self.n_topic_sum_.astype("<i8").tobytes(order="C"))

    @classmethod
    def from_counts(cls, labels: Sequence[str], k_per_label: dict[str, int],
                    n_term: np.ndarray, config: PldaConfig,
                    background_label: str | None = None) -> "PartiallyLabeledLDA":
        """Build a model directly from topic-term count tensors (one
        snapshot); useful for fixtures and for folding in external models."""
        labels = tuple(sorted(labels))
        model = cls.from_config(config)
        model.config_ = config.validate()
        model.labels_ = labels
        model.background_label_ = background_label
        model.k_per_label_ = dict(k_per_label)
        model.n_vocab_ = int(n_term.shape[1])
        model.vocabulary_ = None
        ks = [model.k_per_label_[l] for l in labels]
        if sum(ks) != n_term.shape[0]:
            raise ValueError("n_term rows do not match the topic layout")
        model.topic_label_ = np.repeat(np.arange(len(labels), dtype=np.int32), ks)
        model.topic_k_ = np.concatenate([np.arange(k, dtype=np.int32) for k in ks])
        model.n_term_sum_ = np.asarray(n_term, dtype=np.int64)
        model.n_topic_sum_ = model.n_term_sum_.sum(axis=1)
        model.n_snapshots_ = 1
        model._finalize_beta()
        return model

    @classmethod
    def load(cls, path: str | Path) -> "PartiallyLabeledLDA":
        with open(path, "rb") as fh:
            magic = fh.readline()
            if magic != MODEL_MAGIC:
                raise ValueError(f"{path}: not a fieldflow model file")
            length = int(fh.readline().strip())
            header = json.loads(fh.read(length).decode("utf-8"))
            fh.read(1)
            arrays = {}
            for spec in header["arrays"]:
                shape = tuple(spec["shape"])
                count = int(np.prod(shape)) if shape else 1
                data = np.frombuffer(fh.read(count * 8), dtype=spec["dtype"]).reshape(shape)
                arrays[spec["name"]] = data.astype(np.int64)

        config = PldaConfig(**header["config"]).validate()
        model = cls.from_config(config)
        model.config_ = config
        model.labels_ = tuple(header["labels"])
        model.background_label_ = header.get("background_label")
        model.k_per_label_ = dict(header["k_per_label"])
        model.n_vocab_ = int(header["n_vocab"])
        model.n_snapshots_ = int(header["n_snapshots"])
        vocab = header.get("vocabulary")
        model.vocabulary_ = (Vocabulary(terms=list(vocab["terms"]),
                                        doc_freq=np.array(vocab["doc_freq"], dtype=np.int64))
                             if vocab else None)
        ks = [model.k_per_label_[l] for l in model.labels_]
        model.topic_label_ = np.repeat(np.arange(len(model.labels_), dtype=np.int32), ks)
        model.topic_k_ = np.concatenate([np.arange(k, dtype=np.int32) for k in ks])
        model.n_term_sum_ = arrays["n_term_sum"]
        model.n_topic_sum_ = arrays["n_topic_sum"]
        model.provenance_ = header.get("provenance", {})
        model._finalize_beta()
        return model


class _numba_threads:
    """Scoped numba thread-count override, clamped to what the host allows."""

    def __init__(self, n: int):
        self.n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))

    def __enter__(self):
        self.prev = numba.get_num_threads()
        numba.set_num_threads(self.n)

    def __exit__(self, *exc):
        numba.set_num_threads(self.prev)


def write_attribution(path: str | Path, result: AttributionResult,
                      prov: dict | None = None, floor: float = PSI_EXPORT_FLOOR,
                      background_label: str | None = None) -> None:
    """Write per-document attribution records as line-delimited JSON.

    Label shares below ``floor`` are dropped from the psi map (background
    mass is always reported when a background label is known); readers
    renormalize, so downstream aggregates stay column-stochastic.
    """
    bg_idx = (result.labels.index(background_label)
              if background_label and background_label in result.labels else None)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(provenance.dumps_canonical({"_provenance": prov or {}}) + "\n")
        for row, did in enumerate(result.doc_ids):
            psi = result.psi[row]
            entry = {
                "id": did,
                "year": int(result.years[row]),
                "tokens": int(result.doc_lengths[row]),
                "psi": {result.labels[j]: float(psi[j])
                        for j in np.flatnonzero(psi >= floor)
                        if j != bg_idx},
            }
            if bg_idx is not None:
                entry["background"] = float(psi[bg_idx])
            fh.write(provenance.dumps_canonical(entry) + "\n")
        for did in result.skipped_ids:
            fh.write(provenance.dumps_canonical({"id": did, "skipped": True}) + "\n")


def read_attribution(path: str | Path, labels: Sequence[str],
                     background_label: str | None = None) -> AttributionResult:
    """Read an attribution file back against a fixed label ordering.

    Per-document psi vectors are renormalized to sum to one (the export
    floor truncates tiny shares).
    """
    labels = tuple(labels)
    index = {l: i for i, l in enumerate(labels)}
    doc_ids, years, lengths, rows, skipped = [], [], [], [], []
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        obj = json.loads(first)
        if "_provenance" not in obj:
            raise ValueError(f"{path}: missing provenance line")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("skipped"):
                skipped.append(rec["id"])
                continue
            vec = np.zeros(len(labels), dtype=np.float64)
            for lab, val in rec["psi"].items():
                if lab not in index:
                    raise ValueError(f"{path}: unknown label {lab!r}")
                vec[index[lab]] = val
            if background_label is not None and "background" in rec:
                vec[index[background_label]] = rec["background"]
            total = vec.sum()
            if total > 0:
                vec /= total
            doc_ids.append(rec["id"])
            years.append(int(rec["year"]))
            lengths.append(int(rec["tokens"]))
            rows.append(vec)
    return AttributionResult(
        labels=labels, doc_ids=doc_ids,
        years=np.array(years, dtype=np.int32),
        doc_lengths=np.array(lengths, dtype=np.int64),
        psi=np.vstack(rows) if rows else np.zeros((0, len(labels))),
        skipped_ids=skipped)
