"""Numba kernels for collapsed Gibbs sampling over (label, topic) pairs.

Layout: documents are concatenated into flat token arrays indexed by
``doc_ptr``; each document owns a contiguous slice of ``allowed_topics``
(the global topic ids its tokens may take, i.e. the topics of its label
set) indexed by ``allowed_ptr``. Assignments are stored as slots into the
document's allowed slice. Counts are exact tallies of the assignments.

Randomness comes from an explicit splitmix64 stream so that runs are
reproducible bit-for-bit for a given seed, independent of numba's global
RNG state. Inference derives one stream per document from the master
seed, which makes it deterministic regardless of thread count; parallel
training derives one stream per (sweep, shard).
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / 9007199254740992.0


@njit(inline="always", cache=True)
def _next_u64(state):
    state[0] = state[0] + _GAMMA
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(inline="always", cache=True)
def _next_uniform(state):
    return float(_next_u64(state) >> np.uint64(11)) * _INV_2_53


@njit(inline="always", cache=True)
def _mix_seed(seed, a, b):
    state = np.empty(1, dtype=np.uint64)
    state[0] = (np.uint64(seed) ^ (np.uint64(a) * _MIX1) ^ (np.uint64(b) * _MIX2))
    _next_u64(state)
    _next_u64(state)
    return state


@njit(inline="always", cache=True)
def _draw_slot(weights, n, total, state):
    """Draw an index proportional to weights[:n] (linear cumulative scan)."""
    u = _next_uniform(state) * total
    acc = 0.0
    for s in range(n):
        acc += weights[s]
        if u < acc:
            return s
    return n - 1


@njit(cache=True)
def sample_from_weights(weights, n_draws, seed):
    """Test hook: repeated draws through the kernel's categorical sampler."""
    state = _mix_seed(seed, 0, 0)
    total = 0.0
    for s in range(weights.shape[0]):
        total += weights[s]
    counts = np.zeros(weights.shape[0], dtype=np.int64)
    for _ in range(n_draws):
        counts[_draw_slot(weights, weights.shape[0], total, state)] += 1
    return counts


@njit(cache=True)
def conditional_weights(tokens, doc_ptr, allowed_topics, allowed_ptr,
                        n_term, n_topic, ndoc, alpha, eta, n_vocab,
                        d, i, out):
    """Fill ``out`` with the unnormalized conditional over doc d's allowed
    slots for the token at position i, using the same floating-point
    expression as the sweep kernels. Counts must already exclude (d, i).
    """
    veta = n_vocab * eta
    abase = allowed_ptr[d]
    n_allowed = allowed_ptr[d + 1] - abase
    t = tokens[doc_ptr[d] + i]
    for s in range(n_allowed):
        g = allowed_topics[abase + s]
        out[s] = (n_term[g, t] + eta) / (n_topic[g] + veta) * (ndoc[abase + s] + alpha)
    return n_allowed


@njit(cache=True)
def init_assignments(doc_ptr, allowed_ptr, seed, assign_slot):
    """Assign every token a uniformly random slot from its document's
    allowed (label, topic) pairs."""
    state = _mix_seed(seed, np.uint64(1), np.uint64(0))
    n_docs = doc_ptr.shape[0] - 1
    for d in range(n_docs):
        n_allowed = allowed_ptr[d + 1] - allowed_ptr[d]
        for i in range(doc_ptr[d], doc_ptr[d + 1]):
            s = int(_next_uniform(state) * n_allowed)
            if s >= n_allowed:
                s = n_allowed - 1
            assign_slot[i] = s


@njit(cache=True)
def recount(tokens, doc_ptr, allowed_topics, allowed_ptr, assign_slot,
            n_topics, n_vocab):
    """Tally assignment arrays into fresh count tensors."""
    n_term = np.zeros((n_topics, n_vocab), dtype=np.int64)
    n_topic = np.zeros(n_topics, dtype=np.int64)
    ndoc = np.zeros(allowed_topics.shape[0], dtype=np.int64)
    n_docs = doc_ptr.shape[0] - 1
    for d in range(n_docs):
        abase = allowed_ptr[d]
        for i in range(doc_ptr[d], doc_ptr[d + 1]):
            s = assign_slot[i]
            g = allowed_topics[abase + s]
            n_term[g, tokens[i]] += 1
            n_topic[g] += 1
            ndoc[abase + s] += 1
    return n_term, n_topic, ndoc


@njit(cache=True)
def run_training(tokens, doc_ptr, allowed_topics, allowed_ptr, assign_slot,
                 n_term, n_topic, ndoc, alpha, eta, n_vocab,
                 first_sweep, last_sweep, burn_in, lag, seed,
                 acc_term, acc_topic):
    """Sequential training sweeps [first_sweep, last_sweep] (1-based).

    Documents are visited in index order and every token is resampled
    once per sweep: decrement, draw from the conditional, increment.
    After burn-in, count snapshots are accumulated every ``lag`` sweeps.
    Returns the number of snapshots taken in this span.
    """
    veta = n_vocab * eta
    state = _mix_seed(seed, np.uint64(2), np.uint64(0))
    n_docs = doc_ptr.shape[0] - 1
    max_allowed = 0
    for d in range(n_docs):
        width = allowed_ptr[d + 1] - allowed_ptr[d]
        if width > max_allowed:
            max_allowed = width
    weights = np.empty(max_allowed, dtype=np.float64)
    snapshots = 0
    for sweep in range(first_sweep, last_sweep + 1):
        for d in range(n_docs):
            abase = allowed_ptr[d]
            n_allowed = allowed_ptr[d + 1] - abase
            for i in range(doc_ptr[d], doc_ptr[d + 1]):
                t = tokens[i]
                s_old = assign_slot[i]
                g_old = allowed_topics[abase + s_old]
                n_term[g_old, t] -= 1
                n_topic[g_old] -= 1
                ndoc[abase + s_old] -= 1
                total = 0.0
                for s in range(n_allowed):
                    g = allowed_topics[abase + s]
                    w = (n_term[g, t] + eta) / (n_topic[g] + veta) * (ndoc[abase + s] + alpha)
                    weights[s] = w
                    total += w
                s_new = _draw_slot(weights, n_allowed, total, state)
                g_new = allowed_topics[abase + s_new]
                assign_slot[i] = s_new
                n_term[g_new, t] += 1
                n_topic[g_new] += 1
                ndoc[abase + s_new] += 1
        if sweep > burn_in and (sweep - burn_in) % lag == 0:
            for g in range(n_term.shape[0]):
                acc_topic[g] += n_topic[g]
                for t in range(n_vocab):
                    acc_term[g, t] += n_term[g, t]
            snapshots += 1
    return snapshots


@njit(parallel=True, cache=True)
def _parallel_sweep(tokens, doc_ptr, allowed_topics, allowed_ptr, assign_slot,
                    ndoc, alpha, eta, n_vocab, shard_bounds,
                    local_term, local_topic, sweep, seed):
    """One approximate concurrent sweep: each shard samples against its own
    snapshot copy of the topic-term counts; deltas merge at the barrier."""
    veta = n_vocab * eta
    n_shards = shard_bounds.shape[0] - 1
    for w in prange(n_shards):
        state = _mix_seed(seed, np.uint64(sweep), np.uint64(w + 3))
        term_w = local_term[w]
        topic_w = local_topic[w]
        max_allowed = 0
        for d in range(shard_bounds[w], shard_bounds[w + 1]):
            width = allowed_ptr[d + 1] - allowed_ptr[d]
            if width > max_allowed:
                max_allowed = width
        weights = np.empty(max_allowed, dtype=np.float64)
        for d in range(shard_bounds[w], shard_bounds[w + 1]):
            abase = allowed_ptr[d]
            n_allowed = allowed_ptr[d + 1] - abase
            for i in range(doc_ptr[d], doc_ptr[d + 1]):
                t = tokens[i]
                s_old = assign_slot[i]
                g_old = allowed_topics[abase + s_old]
                term_w[g_old, t] -= 1
                topic_w[g_old] -= 1
                ndoc[abase + s_old] -= 1
                total = 0.0
                for s in range(n_allowed):
                    g = allowed_topics[abase + s]
                    wgt = (term_w[g, t] + eta) / (topic_w[g] + veta) * (ndoc[abase + s] + alpha)
                    weights[s] = wgt
                    total += wgt
                s_new = _draw_slot(weights, n_allowed, total, state)
                g_new = allowed_topics[abase + s_new]
                assign_slot[i] = s_new
                term_w[g_new, t] += 1
                topic_w[g_new] += 1
                ndoc[abase + s_new] += 1


def run_training_parallel(tokens, doc_ptr, allowed_topics, allowed_ptr, assign_slot,
                          n_term, n_topic, ndoc, alpha, eta, n_vocab,
                          first_sweep, last_sweep, burn_in, lag, seed,
                          acc_term, acc_topic, n_shards):
    """Driver for approximate concurrent training (document-sharded).

    Satisfies the same invariants as the sequential path (counts are exact
    tallies after every sweep barrier) but is not bit-identical to it.
    """
    n_docs = doc_ptr.shape[0] - 1
    shard_bounds = np.linspace(0, n_docs, n_shards + 1).astype(np.int64)
    local_term = np.empty((n_shards,) + n_term.shape, dtype=np.int64)
    local_topic = np.empty((n_shards, n_topic.shape[0]), dtype=np.int64)
    snapshots = 0
    for sweep in range(first_sweep, last_sweep + 1):
        local_term[:] = n_term
        local_topic[:] = n_topic
        _parallel_sweep(tokens, doc_ptr, allowed_topics, allowed_ptr, assign_slot,
                        ndoc, alpha, eta, n_vocab, shard_bounds,
                        local_term, local_topic, sweep, seed)
        # Merge per-shard deltas relative to the sweep-start snapshot.
        n_term += local_term.sum(axis=0) - n_shards * n_term
        n_topic += local_topic.sum(axis=0) - n_shards * n_topic
        if sweep > burn_in and (sweep - burn_in) % lag == 0:
            acc_term += n_term
            acc_topic += n_topic
            snapshots += 1
    return snapshots


@njit(parallel=True, cache=True)
def run_inference(tokens, doc_ptr, beta_t, alpha, topic_label, n_labels,
                  sweeps, burn_in, seed, want_token_marginals,
                  psi, theta, token_marginals):
    """Fold-in inference: resample each document over all topics with the
    topic-term distributions frozen; only document-local counts move.

    One RNG stream per document makes the result independent of thread
    count. ``psi``/``theta`` receive posterior-mean token fractions per
    label / per topic; ``token_marginals`` (optional) receives per-token
    posterior label distributions.
    """
    n_docs = doc_ptr.shape[0] - 1
    n_topics = beta_t.shape[1]
    for d in prange(n_docs):
        state = _mix_seed(seed, np.uint64(d), np.uint64(7))
        start = doc_ptr[d]
        n_tok = doc_ptr[d + 1] - start
        if n_tok == 0:
            continue
        assign = np.empty(n_tok, dtype=np.int32)
        ndoc = np.zeros(n_topics, dtype=np.int64)
        weights = np.empty(n_topics, dtype=np.float64)
        for i in range(n_tok):
            g = int(_next_uniform(state) * n_topics)
            if g >= n_topics:
                g = n_topics - 1
            assign[i] = g
            ndoc[g] += 1
        retained = 0
        for sweep in range(1, sweeps + 1):
            for i in range(n_tok):
                t = tokens[start + i]
                g_old = assign[i]
                ndoc[g_old] -= 1
                total = 0.0
                for g in range(n_topics):
                    w = beta_t[t, g] * (ndoc[g] + alpha)
                    weights[g] = w
                    total += w
                g_new = _draw_slot(weights, n_topics, total, state)
                assign[i] = g_new
                ndoc[g_new] += 1
            if sweep > burn_in:
                retained += 1
                for g in range(n_topics):
                    theta[d, g] += ndoc[g]
                    psi[d, topic_label[g]] += ndoc[g]
                if want_token_marginals:
                    for i in range(n_tok):
                        token_marginals[start + i, topic_label[assign[i]]] += 1.0
        if retained > 0:
            denom = float(retained) * float(n_tok)
            for g in range(n_topics):
                theta[d, g] /= denom
            for l in range(n_labels):
                psi[d, l] /= denom
            if want_token_marginals:
                for i in range(n_tok):
                    for l in range(n_labels):
                        token_marginals[start + i, l] /= float(retained)
