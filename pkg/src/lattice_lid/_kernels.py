"""Hot DP kernels: CTC forward-backward and Levenshtein tables.

Each kernel exists twice: a scalar-loop version compiled by numba and a
vectorized numpy version. ``ctc_batch`` and ``levenshtein_table`` dispatch on
``_accel.use_numba()``; both paths are exercised by the test suite.
"""

import math

import numpy as np

from ._accel import njit, use_numba

NEG_INF = -np.inf


# -- numba path --------------------------------------------------------

@njit
def _lse2(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit
def _ctc_single_loop(scores, ext, skip, grad):
    T = scores.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)
    alpha[0, 0] = scores[0, ext[0]]
    if S > 1:
        alpha[0, 1] = scores[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = _lse2(a, alpha[t - 1, s - 1])
            if s >= 2 and skip[s]:
                a = _lse2(a, alpha[t - 1, s - 2])
            if a != -np.inf:
                alpha[t, s] = a + scores[t, ext[s]]
    ll = alpha[T - 1, S - 1]
    if S > 1:
        ll = _lse2(ll, alpha[T - 1, S - 2])
    if ll == -np.inf:
        return ll
    beta[T - 1, S - 1] = scores[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = scores[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s]
            if s + 1 < S:
                b = _lse2(b, beta[t + 1, s + 1])
            if s + 2 < S and skip[s + 2]:
                b = _lse2(b, beta[t + 1, s + 2])
            if b != -np.inf:
                beta[t, s] = b + scores[t, ext[s]]
    for t in range(T):
        for s in range(S):
            g = alpha[t, s] + beta[t, s] - scores[t, ext[s]] - ll
            if g != -np.inf:
                grad[t, ext[s]] -= math.exp(g)
    return ll


@njit
def _ctc_batch_numba(scores, lengths, ext, ext_lengths, skip, nll, grad):
    for b in range(scores.shape[0]):
        T = lengths[b]
        S = ext_lengths[b]
        ll = _ctc_single_loop(scores[b, :T], ext[b, :S], skip[b, :S], grad[b, :T])
        nll[b] = -ll


# -- numpy path --------------------------------------------------------

def _ctc_single_numpy(scores, ext, skip, grad):
    T = scores.shape[0]
    S = ext.shape[0]
    emit = scores[:, ext]
    alpha = np.full((T, S), NEG_INF)
    beta = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    shifted = np.full(S, NEG_INF)
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            acc = prev.copy()
            acc[1:] = np.logaddexp(acc[1:], prev[:-1])
            shifted[:] = NEG_INF
            shifted[2:] = np.where(skip[2:], prev[:-2], NEG_INF)
            alpha[t] = np.logaddexp(acc, shifted) + emit[t]
        ll = alpha[T - 1, S - 1]
        if S > 1:
            ll = np.logaddexp(ll, alpha[T - 1, S - 2])
        if ll == NEG_INF:
            return ll
        beta[T - 1, S - 1] = emit[T - 1, S - 1]
        if S > 1:
            beta[T - 1, S - 2] = emit[T - 1, S - 2]
        skip_next = np.zeros(S, dtype=bool)
        skip_next[:-2] = skip[2:]
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1]
            acc = nxt.copy()
            acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
            shifted[:] = NEG_INF
            shifted[:-2] = np.where(skip_next[:-2], nxt[2:], NEG_INF)
            beta[t] = np.logaddexp(acc, shifted) + emit[t]
        occ = np.exp(alpha + beta - emit - ll)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return ll


def _ctc_batch_numpy(scores, lengths, ext, ext_lengths, skip, nll, grad):
    for b in range(scores.shape[0]):
        T = lengths[b]
        S = ext_lengths[b]
        nll[b] = -_ctc_single_numpy(scores[b, :T], ext[b, :S], skip[b, :S], grad[b, :T])


# -- shared ------------------------------------------------------------

def extend_targets(targets, blank=0):
    """Blank-interleaved label sequences plus skip-transition flags, padded to a batch."""
    n = len(targets)
    width = max((2 * len(y) + 1 for y in targets), default=1)
    ext = np.full((n, width), blank, dtype=np.int64)
    skip = np.zeros((n, width), dtype=np.bool_)
    ext_len = np.zeros(n, dtype=np.int64)
    for i, y in enumerate(targets):
        y = np.asarray(y, dtype=np.int64)
        S = 2 * len(y) + 1
        ext[i, 1:S:2] = y
        ext_len[i] = S
        if len(y) > 1:
            # label positions 3, 5, ... may skip the preceding blank unless repeated
            skip[i, 3:S:2] = y[1:] != y[:-1]
    return ext, ext_len, skip


def ctc_batch(scores, lengths, targets, blank=0):
    """Negative log of the summed path score and its gradient w.r.t. ``scores``.

    ``scores`` is (B, T, V) log-domain and need not be normalized. Frames at
    or beyond ``lengths[b]`` are ignored and receive zero gradient. Returns
    ``nll`` of shape (B,) with ``inf`` for infeasible rows.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if blank != 0:
        raise ValueError("kernels assume blank index 0")
    ext, ext_len, skip = extend_targets(targets, blank)
    nll = np.zeros(scores.shape[0])
    grad = np.zeros_like(scores)
    if use_numba():
        _ctc_batch_numba(scores, lengths, ext, ext_len, skip, nll, grad)
    else:
        _ctc_batch_numpy(scores, lengths, ext, ext_len, skip, nll, grad)
    return nll, grad


@njit
def _levenshtein_loop(hyp, ref):
    n, m = ref.shape[0], hyp.shape[0]
    table = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n + 1):
        table[i, 0] = i
    for j in range(m + 1):
        table[0, j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            best = table[i - 1, j - 1] + cost
            if table[i - 1, j] + 1 < best:
                best = table[i - 1, j] + 1
            if table[i, j - 1] + 1 < best:
                best = table[i, j - 1] + 1
            table[i, j] = best
    return table


def _levenshtein_numpy(hyp, ref):
    n, m = ref.shape[0], hyp.shape[0]
    table = np.zeros((n + 1, m + 1), dtype=np.int64)
    table[:, 0] = np.arange(n + 1)
    table[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        sub = table[i - 1, :-1] + (hyp != ref[i - 1])
        row = np.minimum(sub, table[i - 1, 1:] + 1)
        # insertions chain left-to-right: row[j] = min_k<=j (row[k] + j - k)
        full = np.concatenate(([table[i, 0]], row))
        idx = np.arange(m + 1)
        table[i] = np.minimum.accumulate(full - idx) + idx
    return table


def levenshtein_table(hyp, ref):
    hyp = np.asarray(hyp, dtype=np.int64)
    ref = np.asarray(ref, dtype=np.int64)
    if use_numba():
        return _levenshtein_loop(hyp, ref)
    return _levenshtein_numpy(hyp, ref)
